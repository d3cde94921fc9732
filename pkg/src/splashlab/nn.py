"""Layers, batch normalisation, loss, optimiser, reference models and training."""
from __future__ import annotations

import csv
import json
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .activations import ActivationKind, ActivationLayer, SplashActivation, snapshot_record
from .data import Dataset
from .streams import rng_stream
from .tensor import Graph, Parameter, Tensor, as_tensor


class ModelConfigError(ValueError):
    pass


class TrainingError(ValueError):
    pass


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------
class Layer:
    name = "layer"

    def parameters(self) -> list[Parameter]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def describe(self) -> dict:
        return {"type": type(self).__name__}


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "dense"):
        self.n_in, self.n_out, self.name = n_in, n_out, name
        self.weight = Parameter(kaiming_uniform(rng, (n_in, n_out), n_in), name=f"{name}.weight", decay=True)
        self.bias = Parameter(np.zeros(n_out), name=f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, training):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise T.ShapeError(f"{self.name}: expected (N, {self.n_in}) input, got {x.shape}")
        return x @ self.weight + self.bias

    def output_shape(self, in_shape):
        return (self.n_out,)

    def describe(self):
        return {"type": "Dense", "in": self.n_in, "out": self.n_out}


class Conv2D(Layer):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator, name: str = "conv"):
        self.in_ch, self.out_ch, self.k, self.name = in_ch, out_ch, k, name
        fan_in = in_ch * k * k
        self.weight = Parameter(kaiming_uniform(rng, (out_ch, in_ch, k, k), fan_in), name=f"{name}.weight", decay=True)
        self.bias = Parameter(np.zeros(out_ch), name=f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x, training):
        return T.conv2d(x, self.weight, self.bias)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_ch or h < self.k or w < self.k:
            raise ModelConfigError(f"{self.name}: cannot apply {self.k}x{self.k} conv to {in_shape}")
        return (self.out_ch, h - self.k + 1, w - self.k + 1)

    def describe(self):
        return {"type": "Conv2D", "in_ch": self.in_ch, "out_ch": self.out_ch, "k": self.k}


class MaxPool2x2(Layer):
    name = "pool"

    def forward(self, x, training):
        return T.maxpool2x2(x)

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if h % 2 or w % 2:
            raise ModelConfigError(f"2x2 pooling needs even spatial size, got {in_shape}")
        return (c, h // 2, w // 2)


class Flatten(Layer):
    name = "flatten"

    def forward(self, x, training):
        return x.reshape((x.shape[0], -1)) if x.ndim > 2 else x

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class Softmax(Layer):
    name = "softmax"

    def forward(self, x, training):
        return T.softmax(x)


class BatchNorm(Layer):
    """Per-feature (2-D input) or per-channel (4-D input) batch normalisation."""

    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5, name: str = "bn"):
        self.dim, self.momentum, self.eps, self.name = dim, momentum, eps, name
        self.gamma = Parameter(np.ones(dim), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(dim), name=f"{name}.beta")
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def forward(self, x, training):
        return batchnorm_forward(x, self, "train" if training else "eval")

    def describe(self):
        return {"type": "BatchNorm", "dim": self.dim, "momentum": self.momentum, "eps": self.eps}


def batchnorm_forward(x, layer: BatchNorm, mode: str) -> Tensor:
    x = as_tensor(x)
    if x.ndim not in (2, 4) or x.shape[1] != layer.dim:
        raise T.ShapeError(f"batchnorm: expected feature axis of size {layer.dim}, got {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, layer.dim) + (1,) * (x.ndim - 2)
    gamma = layer.gamma.reshape(bshape)
    beta = layer.beta.reshape(bshape)
    if mode == "train":
        if x.shape[0] < 2:
            raise TrainingError("batch normalisation in train mode needs a batch of at least 2")
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        xhat = xc * (var + layer.eps) ** -0.5
        m = layer.momentum
        layer.running_mean[...] = m * layer.running_mean + (1 - m) * mu.data.reshape(-1)
        layer.running_var[...] = m * layer.running_var + (1 - m) * var.data.reshape(-1)
    elif mode == "eval":
        mean = layer.running_mean.reshape(bshape)
        inv = 1.0 / np.sqrt(layer.running_var.reshape(bshape) + layer.eps)
        xhat = (x - mean) * inv
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return xhat * gamma + beta


class Activation(Layer):
    def __init__(self, unit: ActivationLayer):
        self.unit = unit
        self.name = unit.name

    def parameters(self):
        return self.unit.parameters()

    def forward(self, x, training):
        return self.unit(x)

    def describe(self):
        return {"type": "Activation", **self.unit.describe()}


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------
class Model:
    """An ordered stack of layers producing class logits."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...], name: str = "model",
                 allow_unnormalized: bool = False, meta: dict | None = None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.name = name
        self.meta = dict(meta or {})
        self.mode = "train"
        self.step_count = 0
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Activation) and layer.unit.requires_normalized_input and not allow_unnormalized:
                if i == 0 or not isinstance(self.layers[i - 1], BatchNorm):
                    raise ModelConfigError(
                        f"layer {i} ({layer.name}): SPLASH units need a BatchNorm directly before them; "
                        "pass allow_unnormalized=True to override")
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape

    # -- registry -------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = []
        for i, layer in enumerate(self.layers):
            for p in layer.parameters():
                out.append((f"{i}.{p.name}", p))
        return out

    def parameters(self, trainable_only: bool = False) -> list[Parameter]:
        return [p for _, p in self.named_parameters() if p.trainable or not trainable_only]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            for k, v in layer.buffers().items():
                out.append((f"{i}.{k}", v))
        return out

    def n_trainable(self) -> int:
        return int(sum(p.size for p in self.parameters(trainable_only=True)))

    def splash_units(self) -> list[SplashActivation]:
        return [l.unit for l in self.layers if isinstance(l, Activation) and isinstance(l.unit, SplashActivation)]

    def activation_units(self) -> list[ActivationLayer]:
        return [l.unit for l in self.layers if isinstance(l, Activation)]

    # -- modes ------------------------------------------------------------
    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "eval"
        return self

    # -- evaluation -----------------------------------------------------------
    def forward(self, x, trace: list | None = None) -> Tensor:
        x = as_tensor(x)
        if x.shape[1:] != self.input_shape:
            raise T.ShapeError(f"{self.name}: expected input (N, {self.input_shape}), got {x.shape}")
        training = self.mode == "train"
        for layer in self.layers:
            if trace is not None:
                if isinstance(layer, Activation):
                    trace.append(("act", x.data.copy(), layer.unit.kinks))
                elif isinstance(layer, MaxPool2x2):
                    trace.append(("pool", x.data.copy(), ()))
            x = layer.forward(x, training)
        return x

    __call__ = forward

    def logits(self, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
        """Eval-mode logits for an array of images, without recording a graph."""
        images = np.asarray(images, dtype=np.float64)
        prev = self.mode
        self.eval()
        try:
            outs = [self.forward(images[i:i + batch_size]).data for i in range(0, len(images), batch_size)]
        finally:
            self.mode = prev
        return np.concatenate(outs) if outs else np.zeros((0,) + self.output_shape)

    def predict(self, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
        """Softmax probabilities (eval mode)."""
        return T.softmax_np(self.logits(images, batch_size))

    def project_constraints(self) -> None:
        for unit in self.activation_units():
            unit.project()

    def describe(self) -> list[dict]:
        return [l.describe() for l in self.layers]


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise T.ShapeError(f"cross_entropy: {n} logit rows but labels shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy: labels must lie in [0, {c})")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    logp = T.log_softmax(logits)
    return -(logp * onehot).sum(axis=1).mean()


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------
@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay: float = 1e-6
    seed: int = 0
    augmentation: str = "none"     # none | flip+translate

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.lr_decay < 0:
            raise ValueError("decay rates must be non-negative")
        if self.augmentation not in ("none", "flip+translate"):
            raise ValueError(f"unknown augmentation {self.augmentation!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def sgd_step(model: Model, grads: T.Gradients, config: TrainConfig) -> None:
    """Momentum SGD with weight decay and time-based learning-rate decay.

    v <- momentum * v + (g + weight_decay * p);  p <- p - lr_t * v, with
    lr_t = lr / (1 + lr_decay * t). Activation constraints are re-projected
    afterwards.
    """
    lr = config.lr / (1.0 + config.lr_decay * model.step_count)
    for p in model.parameters(trainable_only=True):
        g = grads.get(p)
        if g is None:
            continue
        if config.weight_decay and p.decay:
            g = g + config.weight_decay * p.data
        if p.velocity is None:
            p.velocity = np.zeros_like(p.data)
        p.velocity = config.momentum * p.velocity + g
        p.data -= lr * p.velocity
    model.step_count += 1
    model.project_constraints()


# ---------------------------------------------------------------------------
# reference models
# ---------------------------------------------------------------------------
MODEL_NAMES = ("mlp", "lenet5-small")


def build_model(name: str, activation: ActivationKind | str = "relu", input_shape=(1, 28, 28),
                num_classes: int = 10, seed: int = 0, allow_unnormalized: bool = False) -> Model:
    kind = ActivationKind(activation) if isinstance(activation, str) else activation
    rng = rng_stream(seed, "init")
    layers: list[Layer] = []
    shape = tuple(input_shape)
    counter = iter(range(1, 100))

    def act(feature_shape):
        return Activation(kind.build(feature_shape, name=f"act{next(counter)}"))

    if name == "mlp":
        layers.append(Flatten())
        width = int(np.prod(shape))
        for i, units in enumerate((256, 64, 32), start=1):
            layers += [Dense(width, units, rng, name=f"dense{i}"), BatchNorm(units, name=f"bn{i}"), act((units,))]
            width = units
        layers.append(Dense(width, num_classes, rng, name="dense4"))
    elif name == "lenet5-small":
        c, h, w = shape
        layers += [Conv2D(c, 6, 5, rng, name="conv1"), BatchNorm(6, name="bn1"), act((6, h - 4, w - 4)), MaxPool2x2()]
        h, w = (h - 4) // 2, (w - 4) // 2
        layers += [Conv2D(6, 16, 5, rng, name="conv2"), BatchNorm(16, name="bn2"), act((16, h - 4, w - 4)), MaxPool2x2()]
        h, w = (h - 4) // 2, (w - 4) // 2
        layers.append(Flatten())
        width = 16 * h * w
        for i, units in enumerate((120, 84), start=3):
            layers += [Dense(width, units, rng, name=f"dense{i}"), BatchNorm(units, name=f"bn{i}"), act((units,))]
            width = units
        layers.append(Dense(width, num_classes, rng, name="dense5"))
    else:
        raise ModelConfigError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")
    meta = {"architecture": name, "input_shape": list(input_shape), "num_classes": num_classes,
            "activation": kind.to_dict(), "init": "kaiming-uniform(fan_in)", "seed": seed}
    return Model(layers, input_shape, name=name, allow_unnormalized=allow_unnormalized, meta=meta)


def build_reference_models(activation: ActivationKind | str = "splash", input_shape=(1, 28, 28),
                           seed: int = 0) -> dict[str, Model]:
    return {name: build_model(name, activation, input_shape, seed=seed) for name in MODEL_NAMES}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------
@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_error: float | None
    wall_seconds: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    @property
    def test_errors(self) -> list[float | None]:
        return [r.test_error for r in self.records]


def augment_batch(images: np.ndarray, rng: np.random.Generator, max_shift: int = 5) -> np.ndarray:
    """Random horizontal flips and integer translations (zero fill)."""
    out = np.zeros_like(images)
    n, _, h, w = images.shape
    flips = rng.random(n) < 0.5
    shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
    for i in range(n):
        img = images[i, :, :, ::-1] if flips[i] else images[i]
        dy, dx = shifts[i]
        ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
        xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
        out[i, :, yd, xd] = img[:, ys, xs]
    return out


def error_rate(model: Model, dataset: Dataset) -> float:
    pred = model.logits(dataset.images).argmax(axis=1)
    return float(np.mean(pred != dataset.labels))


def train(model: Model, dataset: Dataset, config: TrainConfig, test_set: Dataset | None = None,
          snapshot_shapes: bool = False, snapshot_grid=(-3.0, 3.0, 121), progress=None) -> TrainingLog:
    """Mini-batch training; returns per-epoch loss, test error and optional SPLASH shapes."""
    if len(dataset) == 0:
        raise TrainingError("cannot train on an empty dataset")
    shuffle_rng = rng_stream(config.seed, "shuffle")
    aug_rng = rng_stream(config.seed, "augment")
    log = TrainingLog()
    if snapshot_shapes:
        log.snapshots += [snapshot_record(u, 0, snapshot_grid) for u in model.splash_units()]
    n = len(dataset)
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = shuffle_rng.permutation(n)
        total, seen = 0.0, 0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            if len(idx) < 2:
                continue
            xb = dataset.images[idx]
            if config.augmentation == "flip+translate":
                xb = augment_batch(xb, aug_rng)
            with Graph() as g:
                loss = cross_entropy_loss(model(xb), dataset.labels[idx])
                grads = g.backward(loss)
            sgd_step(model, grads, config)
            total += loss.item() * len(idx)
            seen += len(idx)
        model.eval()
        test_err = error_rate(model, test_set) if test_set is not None else None
        rec = EpochRecord(epoch, total / seen, test_err, time.perf_counter() - start)
        log.records.append(rec)
        if snapshot_shapes:
            log.snapshots += [snapshot_record(u, epoch, snapshot_grid) for u in model.splash_units()]
        if progress:
            progress(rec)
    return log


def write_log_csv(log: TrainingLog, path, wall_time: bool = False) -> None:
    """epoch, train_loss, test_error, wall_seconds; wall_seconds left blank unless ``wall_time``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "test_error", "wall_seconds"])
        for r in log.records:
            w.writerow([r.epoch, f"{r.train_loss:.17g}", "" if r.test_error is None else f"{r.test_error:.17g}",
                        f"{r.wall_seconds:.3f}" if wall_time else ""])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
CKPT_MAGIC = b"SPLK"
CKPT_VERSION = 1


def save_checkpoint(model: Model, path, extra: dict | None = None) -> dict:
    """JSON header followed by a flat little-endian float64 block.

    Layout: magic ``SPLK``, uint32 version, uint64 header length, UTF-8 JSON
    header, then every parameter and buffer in header order.
    """
    entries, blocks, offset = [], [], 0
    for name, p in model.named_parameters():
        entries.append({"name": name, "kind": "parameter", "shape": list(p.shape), "offset": offset,
                        "trainable": p.trainable})
        blocks.append(p.data.ravel())
        offset += p.size
    for name, b in model.named_buffers():
        entries.append({"name": name, "kind": "buffer", "shape": list(b.shape), "offset": offset})
        blocks.append(b.ravel())
        offset += b.size
    header = {
        "format": "splashlab-checkpoint",
        "version": CKPT_VERSION,
        **model.meta,
        "layers": model.describe(),
        "splash_layers": [u.describe() | {"name": u.name} for u in model.splash_units()],
        "n_trainable": model.n_trainable(),
        "step_count": model.step_count,
        "tensors": entries,
        "n_values": offset,
    }
    if extra:
        header["config"] = extra
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = np.concatenate(blocks).astype("<f8").tobytes() if blocks else b""
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hbytes)) + hbytes + body)
    return header


def read_checkpoint_header(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a splashlab checkpoint")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    return header, raw[16 + hlen:]


def load_checkpoint(path) -> tuple[Model, dict]:
    header, body = read_checkpoint_header(path)
    values = np.frombuffer(body, dtype="<f8")
    if values.size != header["n_values"]:
        raise ValueError(f"{path}: expected {header['n_values']} values, found {values.size}")
    kind = ActivationKind.from_dict(header["activation"])
    model = build_model(header["architecture"], kind, tuple(header["input_shape"]), header["num_classes"],
                        seed=header.get("seed", 0))
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for e in header["tensors"]:
        chunk = values[e["offset"]:e["offset"] + int(np.prod(e["shape"], dtype=np.int64))].reshape(e["shape"])
        if e["kind"] == "parameter":
            params[e["name"]].data = chunk.astype(np.float64).copy()
            params[e["name"]].trainable = e["trainable"]
        else:
            buffers[e["name"]][...] = chunk
    model.step_count = header.get("step_count", 0)
    model.eval()
    return model, header
