"""Adversarial attacks and the success/margin bookkeeping around them.

Black-box attacks (one-pixel differential evolution, boundary) only call
``model.predict(images) -> softmax``. Open-box attacks (FGSM, CW-L2)
differentiate through ``model.forward``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, load_idx, write_idx
from .streams import rng_stream
from .tensor import Graph, Tensor

METHODS = ("one_pixel", "boundary", "fgsm", "cw_l2")
BLACK_BOX = ("one_pixel", "boundary")
FGSM_EPSILONS = (0.02, 0.04, 0.06)
PIXEL_COUNTS = (1, 3, 5)


class AttackError(ValueError):
    pass


@dataclass
class AttackConfig:
    method: str = "fgsm"
    pixels: int = 1
    de_iters: int = 40
    pop: int = 400
    de_classic: bool = False
    epsilon: float | None = None
    random_start: bool = True
    boundary_steps: int = 6000
    boundary_threshold: float = 0.1
    boundary_init_tries: int = 100
    cw_bsearch: int = 7
    cw_steps: int = 1000
    cw_lr: float = 0.01
    cw_init_c: float = 1e-3
    seed: int = 0
    repeats: int = 5

    def __post_init__(self):
        if self.method not in METHODS:
            raise AttackError(f"unknown attack method {self.method!r}; expected one of {METHODS}")
        if self.method == "fgsm":
            if self.epsilon is None:
                raise AttackError("fgsm needs an epsilon")
            if self.epsilon < 0:
                raise AttackError("epsilon must be non-negative")
        elif self.epsilon is not None:
            raise AttackError(f"epsilon only applies to fgsm, not {self.method}")
        if self.pixels < 1:
            raise AttackError("pixels must be at least 1")
        if self.pop < 4:
            raise AttackError("differential evolution needs a population of at least 4")
        if min(self.de_iters, self.boundary_steps, self.cw_bsearch, self.cw_steps) < 0:
            raise AttackError("iteration counts must be non-negative")
        if self.repeats < 1:
            raise AttackError("repeats must be at least 1")

    @property
    def strength(self) -> float | int | None:
        if self.method == "one_pixel":
            return self.pixels
        if self.method == "fgsm":
            return self.epsilon
        return None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**d)


@dataclass
class SampleResult:
    index: int
    label: int
    success: bool
    queries: int
    adversarial: np.ndarray
    probs: np.ndarray
    l2: float
    linf: float

    @property
    def prediction(self) -> int:
        return int(self.probs.argmax())

    @property
    def margin(self) -> float:
        """|Z_true - Z_adv| on the softmax of the adversarial image."""
        return float(abs(self.probs[self.label] - self.probs[self.prediction]))

    def to_dict(self) -> dict:
        return {"index": self.index, "label": self.label, "success": self.success, "prediction": self.prediction,
                "queries": self.queries, "l2": self.l2, "linf": self.linf,
                "margin": self.margin if self.success else None}


def _result(index, label, image, adversarial, probs, queries) -> SampleResult:
    diff = (adversarial - image).ravel()
    probs = np.asarray(probs, dtype=np.float64)
    return SampleResult(int(index), int(label), bool(probs.argmax() != label), int(queries), adversarial, probs,
                        float(np.linalg.norm(diff)), float(np.abs(diff).max()) if diff.size else 0.0)


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise AttackError("image pixels must lie in [0, 1]")
    return image


# ---------------------------------------------------------------------------
# model access
# ---------------------------------------------------------------------------
class Oracle:
    """Query-counting view of a model that exposes nothing but ``predict``."""

    def __init__(self, model):
        self._predict = model.predict
        self.queries = 0

    def predict(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        self.queries += len(images)
        return self._predict(images)


class AffineClassifier:
    """logits = flatten(x) @ weight + bias, usable by every attack."""

    def __init__(self, weight, bias, input_shape):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.input_shape = tuple(input_shape)

    def forward(self, x) -> Tensor:
        x = T.as_tensor(x)
        return x.reshape(len(x.data), -1) @ Tensor(self.weight) + Tensor(self.bias)

    def logits(self, images) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        return images.reshape(len(images), -1) @ self.weight + self.bias

    def predict(self, images) -> np.ndarray:
        return T.softmax_np(self.logits(images))


def _forward_eval(model, x: Tensor) -> Tensor:
    prev = getattr(model, "mode", None)
    if prev is not None:
        model.eval()
    try:
        return model.forward(x)
    finally:
        if prev is not None:
            model.mode = prev


def _logits_np(model, images: np.ndarray) -> np.ndarray:
    if hasattr(model, "logits"):
        return model.logits(images)
    return _forward_eval(model, Tensor(images)).data


# ---------------------------------------------------------------------------
# one-pixel differential evolution
# ---------------------------------------------------------------------------
def de_mutation(x1: np.ndarray, x2: np.ndarray, x3: np.ndarray, scale: float = 0.5,
                classic: bool = False) -> np.ndarray:
    """x1 + scale * (x2 + x3), or the usual x1 + scale * (x2 - x3) when ``classic``."""
    return x1 + scale * ((x2 - x3) if classic else (x2 + x3))


def _distinct_triples(rng: np.random.Generator, n: int) -> np.ndarray:
    """For each i, three distinct indices different from i."""
    keys = rng.random((n, n))
    np.fill_diagonal(keys, 2.0)
    idx = np.argpartition(keys, 3, axis=1)[:, :3]
    order = np.argsort(np.take_along_axis(keys, idx, axis=1), axis=1)
    return np.take_along_axis(idx, order, axis=1)


def _clamp_candidates(pop: np.ndarray, h: int, w: int) -> np.ndarray:
    pop[..., 0] = np.clip(pop[..., 0], 0, h - 1)
    pop[..., 1] = np.clip(pop[..., 1], 0, w - 1)
    pop[..., 2:] = np.clip(pop[..., 2:], 0.0, 1.0)
    return pop


def apply_pixels(image: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Paint each candidate's k (row, col, values...) tuples onto copies of ``image``."""
    p = len(candidates)
    out = np.repeat(image[None], p, axis=0)
    h, w = image.shape[1:]
    rows = np.clip(np.rint(candidates[..., 0]), 0, h - 1).astype(np.int64)
    cols = np.clip(np.rint(candidates[..., 1]), 0, w - 1).astype(np.int64)
    ar = np.arange(p)
    for j in range(candidates.shape[1]):
        out[ar, :, rows[:, j], cols[:, j]] = candidates[:, j, 2:]
    return out


def one_pixel_attack(model, image: np.ndarray, label: int, k: int, config: AttackConfig | None = None,
                     rng: np.random.Generator | None = None, index: int = 0) -> SampleResult:
    """Differential evolution over k-pixel modifications, minimising the true-class probability.

    A trial replaces its parent only if it strictly lowers the true-class
    probability; the search stops as soon as any candidate is misclassified.
    """
    config = config or AttackConfig(method="one_pixel", pixels=k)
    rng = rng or np.random.default_rng(config.seed)
    image = _check_image(image)
    c, h, w = image.shape
    if k > h * w:
        raise AttackError(f"cannot modify {k} pixels of a {h}x{w} image")
    probs = model.predict(image[None])[0]
    queries = 1
    if probs.argmax() != label:
        return _result(index, label, image, image.copy(), probs, queries)

    n = config.pop
    pop = np.empty((n, k, 2 + c))
    pop[..., 0] = rng.uniform(0, h, size=(n, k))
    pop[..., 1] = rng.uniform(0, w, size=(n, k))
    pop[..., 2:] = rng.uniform(0, 1, size=(n, k, c))
    _clamp_candidates(pop, h, w)
    pop_probs = model.predict(apply_pixels(image, pop))
    queries += n
    fitness = pop_probs[:, label]

    for _ in range(config.de_iters):
        if np.any(pop_probs.argmax(1) != label):
            break
        r = _distinct_triples(rng, n)
        trial = _clamp_candidates(de_mutation(pop[r[:, 0]], pop[r[:, 1]], pop[r[:, 2]],
                                              classic=config.de_classic), h, w)
        trial_probs = model.predict(apply_pixels(image, trial))
        queries += n
        better = trial_probs[:, label] < fitness
        pop[better] = trial[better]
        pop_probs[better] = trial_probs[better]
        fitness = pop_probs[:, label]

    fooled = np.flatnonzero(pop_probs.argmax(1) != label)
    pool = fooled if fooled.size else np.arange(n)
    best = pool[np.argmin(fitness[pool])]         # argmin keeps the earliest index on ties
    adv = apply_pixels(image, pop[best:best + 1])[0]
    return _result(index, label, image, adv, pop_probs[best], queries)


# ---------------------------------------------------------------------------
# boundary attack
# ---------------------------------------------------------------------------
def boundary_attack(model, image: np.ndarray, label: int, config: AttackConfig | None = None,
                    rng: np.random.Generator | None = None, index: int = 0,
                    trace: list | None = None) -> SampleResult:
    """Decision-based random walk along the boundary towards ``image``.

    Start from clipped Gaussian noise that is already misclassified, then
    repeat: an orthogonal step on the sphere around ``image`` followed by a
    step towards it, kept only if the result stays adversarial. Both step
    sizes adapt every 10 steps (targets: 50% orthogonal, 25% inward
    acceptance). ``trace`` receives (distance, iterate) for the start point and
    every accepted step.
    """
    config = config or AttackConfig(method="boundary")
    rng = rng or np.random.default_rng(config.seed)
    x = _check_image(image)
    queries = 0

    def query(batch):
        nonlocal queries
        queries += len(batch)
        p = model.predict(batch)
        return p.argmax(1) != label, p

    fooled, p = query(x[None])
    if fooled[0]:
        return _result(index, label, x, x.copy(), p[0], queries)
    for _ in range(config.boundary_init_tries):
        start = np.clip(rng.normal(0.0, 1.0, size=x.shape), 0.0, 1.0)
        fooled, p = query(start[None])
        if fooled[0]:
            break
    else:
        return _result(index, label, x, x.copy(), p[0], queries)

    adv, adv_probs = start, p[0]
    d0 = dist = float(np.linalg.norm(adv - x))
    if trace is not None:
        trace.append((dist, adv))
    orth, inward = 0.01, 0.01
    orth_hits: list[bool] = []
    inward_hits: list[bool] = []
    for step in range(1, config.boundary_steps + 1):
        if dist == 0.0:
            break
        diff = adv - x
        eta = rng.normal(size=x.shape)
        eta -= (np.vdot(eta, diff) / dist ** 2) * diff
        eta *= orth * dist / max(np.linalg.norm(eta), 1e-300)
        moved = diff + eta
        on_sphere = x + moved * (dist / np.linalg.norm(moved))
        cand = np.clip(on_sphere + inward * (x - on_sphere), 0.0, 1.0)
        on_sphere = np.clip(on_sphere, 0.0, 1.0)
        flags, p = query(np.stack([on_sphere, cand]))
        orth_hits.append(bool(flags[0]))
        if flags[0]:
            inward_hits.append(bool(flags[1]))
        if flags[1]:
            new_dist = float(np.linalg.norm(cand - x))
            if new_dist <= dist:
                adv, adv_probs, dist = cand, p[1], new_dist
                if trace is not None:
                    trace.append((dist, adv))
        if step % 10 == 0:
            orth *= 1.5 if np.mean(orth_hits[-10:]) > 0.5 else 1 / 1.5
            if inward_hits:
                inward *= 1.5 if np.mean(inward_hits[-10:]) > 0.25 else 1 / 1.5
            orth, inward = min(orth, 1.0), min(inward, 0.5)
    res = _result(index, label, x, adv, adv_probs, queries)
    res.success = res.success and dist < config.boundary_threshold * d0
    return res


# ---------------------------------------------------------------------------
# FGSM
# ---------------------------------------------------------------------------
def input_gradient(model, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(mean cross-entropy)/d images, scaled back to per-sample loss gradients."""
    from .nn import cross_entropy_loss

    x = Tensor(images, requires_grad=True)
    with Graph() as g:
        loss = cross_entropy_loss(_forward_eval(model, x), labels)
        grads = g.backward(loss)
    return grads[x] * len(images)


def fgsm_attack(model, images: np.ndarray, labels: np.ndarray, epsilon: float,
                rng: np.random.Generator | None = None, random_start: bool = False,
                indices=None) -> list[SampleResult]:
    """x' = clip(x + epsilon * sign(grad_x loss), 0, 1), batched.

    With ``random_start`` the gradient is taken at a uniform point of the
    epsilon-ball and the result is projected back onto that ball.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if epsilon < 0:
        raise AttackError("epsilon must be non-negative")
    x0 = images
    if random_start:
        rng = rng or np.random.default_rng(0)
        x0 = np.clip(images + rng.uniform(-epsilon, epsilon, size=images.shape), 0.0, 1.0)
    g = input_gradient(model, x0, labels)
    adv = np.clip(x0 + epsilon * np.sign(g), images - epsilon, images + epsilon)
    adv = np.clip(adv, 0.0, 1.0)
    probs = T.softmax_np(_logits_np(model, adv))
    indices = range(len(images)) if indices is None else indices
    return [_result(i, y, x, a, p, 1) for i, y, x, a, p in zip(indices, labels, images, adv, probs)]


# ---------------------------------------------------------------------------
# Carlini-Wagner L2
# ---------------------------------------------------------------------------
_TANH_SHRINK = 1 - 1e-6


def _to_box(w: np.ndarray) -> np.ndarray:
    return (np.tanh(w) + 1.0) * 0.5


def cw_margin(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """max(Z_y - max_{t != y} Z_t, 0) per row."""
    n = len(labels)
    masked = logits.copy()
    masked[np.arange(n), labels] = -np.inf
    return np.maximum(logits[np.arange(n), labels] - masked.max(axis=1), 0.0)


def cw_l2_attack(model, images: np.ndarray, labels: np.ndarray, config: AttackConfig | None = None,
                 indices=None) -> list[SampleResult]:
    """Untargeted CW-L2 with a tanh change of variables and a binary search on c.

    Minimises ||x' - x||^2 + c * max(Z_y - max_{t != y} Z_t, 0) with Adam.
    Each sample keeps its own c and its smallest successful perturbation.
    """
    config = config or AttackConfig(method="cw_l2")
    x = np.asarray(images, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n = len(x)
    w0 = np.arctanh((2 * x - 1) * _TANH_SHRINK)
    c = np.full(n, config.cw_init_c)
    lower, upper = np.zeros(n), np.full(n, 1e10)
    best_l2 = np.full(n, np.inf)
    best_adv = x.copy()
    onehot = np.zeros((n, _logits_np(model, x[:1]).shape[1]))
    onehot[np.arange(n), y] = 1.0
    b1, b2, eps_adam = 0.9, 0.999, 1e-8

    for _ in range(config.cw_bsearch):
        w = w0.copy()
        m, v = np.zeros_like(w), np.zeros_like(w)
        found = np.zeros(n, dtype=bool)
        for it in range(1, config.cw_steps + 1):
            wt = Tensor(w, requires_grad=True)
            with Graph() as g:
                xa = (wt.tanh() + 1.0) * 0.5
                dist = ((xa - Tensor(x)) ** 2).reshape(n, -1).sum(axis=1)
                z = _forward_eval(model, xa)
                masked = z.data - 1e30 * onehot
                other = np.zeros_like(onehot)
                other[np.arange(n), masked.argmax(1)] = 1.0
                margin = (z * Tensor(onehot - other)).sum(axis=1).relu()
                loss = (dist + Tensor(c) * margin).sum()
                grads = g.backward(loss)
            # record before stepping: xa, z belong to the current w
            adv_now = xa.data
            l2 = dist.data
            ok = (z.data.argmax(1) != y) & (l2 < best_l2)
            best_l2[ok] = l2[ok]
            best_adv[ok] = adv_now[ok]
            found |= z.data.argmax(1) != y
            gw = grads[wt]
            m = b1 * m + (1 - b1) * gw
            v = b2 * v + (1 - b2) * gw ** 2
            w = w - config.cw_lr * (m / (1 - b1 ** it)) / (np.sqrt(v / (1 - b2 ** it)) + eps_adam)
        # final iterate of this round
        xa = _to_box(w)
        z = _logits_np(model, xa)
        l2 = ((xa - x) ** 2).reshape(n, -1).sum(axis=1)
        ok = (z.argmax(1) != y) & (l2 < best_l2)
        best_l2[ok] = l2[ok]
        best_adv[ok] = xa[ok]
        found |= z.argmax(1) != y

        upper = np.where(found, np.minimum(upper, c), upper)
        lower = np.where(found, lower, np.maximum(lower, c))
        c = np.where(upper < 1e9, (lower + upper) / 2, c * 10)

    probs = T.softmax_np(_logits_np(model, best_adv))
    indices = range(n) if indices is None else indices
    return [_result(i, yi, xi, a, p, 0) for i, yi, xi, a, p in zip(indices, y, x, best_adv, probs)]


# ---------------------------------------------------------------------------
# campaigns and reports
# ---------------------------------------------------------------------------
@dataclass
class RepeatResult:
    repeat: int
    seed: int
    samples: list[SampleResult]

    @property
    def successes(self) -> int:
        return sum(s.success for s in self.samples)

    @property
    def margin(self) -> float | None:
        fooled = [s.margin for s in self.samples if s.success]
        return float(np.mean(fooled)) if fooled else None


@dataclass
class AttackReport:
    model: str
    activation: str
    config: AttackConfig
    n_samples: int
    repeats: list[RepeatResult] = field(default_factory=list)

    @property
    def method(self) -> str:
        return self.config.method

    @property
    def counts(self) -> list[int]:
        return [r.successes for r in self.repeats]

    @property
    def mean(self) -> float:
        return float(np.mean(self.counts))

    @property
    def std(self) -> float:
        return float(np.std(self.counts))

    def rows(self) -> list[dict]:
        strength = self.config.strength
        return [{"model": self.model, "activation": self.activation, "method": self.method,
                 "strength": "" if strength is None else strength, "repeat": r.repeat, "successes": r.successes,
                 "margin": "" if r.margin is None else f"{r.margin:.17g}"} for r in self.repeats]

    def to_dict(self) -> dict:
        return {"model": self.model, "activation": self.activation, "method": self.method,
                "strength": self.config.strength, "n_samples": self.n_samples, "config": self.config.to_dict(),
                "mean": self.mean, "std": self.std, "counts": self.counts,
                "repeats": [{"repeat": r.repeat, "seed": r.seed, "successes": r.successes, "margin": r.margin,
                             "samples": [s.to_dict() for s in r.samples]} for r in self.repeats]}


CSV_COLUMNS = ("model", "activation", "method", "strength", "repeat", "successes", "margin")


def write_reports(reports: list[AttackReport], json_path, csv_path, extra: dict | None = None) -> None:
    payload = {"reports": [r.to_dict() for r in reports]}
    if extra:
        payload.update(extra)
    Path(json_path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerows(r.rows())


_CONSTRAINED = {"positive": "splash-positive", "negative": "splash-negative", "frozen": "fixed-splash"}


def _activation_name(model) -> str:
    act = getattr(model, "meta", {}).get("activation", {})
    if not isinstance(act, dict):
        return "unknown"
    if act.get("name") == "splash":
        return _CONSTRAINED.get(act.get("constraint"), "splash")
    return act.get("name", "unknown")


def attack_repeat(model, dataset: Dataset, config: AttackConfig, repeat: int) -> RepeatResult:
    """One repeat of ``config`` over every sample; seeds derive from (seed, repeat, index)."""
    images, labels = dataset.images, dataset.labels
    n = len(labels)
    if config.method == "fgsm":
        rng = rng_stream(config.seed, "attack", repeat)
        samples = fgsm_attack(model, images, labels, config.epsilon, rng, config.random_start)
    elif config.method == "cw_l2":
        samples = cw_l2_attack(model, images, labels, config)
    else:
        oracle = Oracle(model)
        samples = []
        for i in range(n):
            rng = rng_stream(config.seed, "attack", repeat, i)
            if config.method == "one_pixel":
                samples.append(one_pixel_attack(oracle, images[i], labels[i], config.pixels, config, rng, i))
            else:
                samples.append(boundary_attack(oracle, images[i], labels[i], config, rng, i))
    return RepeatResult(repeat, config.seed, samples)


def run_campaign(models: dict, dataset: Dataset, configs: list[AttackConfig], progress=None) -> list[AttackReport]:
    """Attack every model with every config, ``config.repeats`` times each."""
    if len(dataset) == 0:
        raise AttackError("cannot attack an empty sample set")
    reports = []
    for name, model in models.items():
        for config in configs:
            report = AttackReport(name, _activation_name(model), config, len(dataset))
            for r in range(config.repeats):
                report.repeats.append(attack_repeat(model, dataset, config, r))
                if progress:
                    progress(report)
            reports.append(report)
    return reports


def paired_margin(a: RepeatResult, b: RepeatResult) -> tuple[float | None, float | None]:
    """Margins of two models restricted to the samples that fooled both."""
    fooled_a = {s.index: s for s in a.samples if s.success}
    fooled_b = {s.index: s for s in b.samples if s.success}
    both = sorted(fooled_a.keys() & fooled_b.keys())
    if not both:
        return None, None
    return (float(np.mean([fooled_a[i].margin for i in both])),
            float(np.mean([fooled_b[i].margin for i in both])))


def dump_adversarial(report: AttackReport, repeat: int, images_path, labels_path) -> None:
    """Write the repeat's adversarial images as exact float64 IDX."""
    samples = report.repeats[repeat].samples
    ds = Dataset(np.stack([s.adversarial for s in samples]), np.array([s.label for s in samples]),
                 name="adversarial", split="audit")
    write_idx(ds, images_path, labels_path, exact=True)


def verify_successes(model, report: AttackReport, workdir=None) -> tuple[int, int]:
    """Re-run the model on every stored success; return (verified, claimed).

    With ``workdir`` the adversarial images are round-tripped through IDX
    files first.
    """
    verified = claimed = 0
    for r, rep in enumerate(report.repeats):
        wins = [s for s in rep.samples if s.success]
        if not wins:
            continue
        if workdir is not None:
            img, lab = Path(workdir) / f"adv-{r}-images.idx", Path(workdir) / f"adv-{r}-labels.idx"
            dump_adversarial(report, r, img, lab)
            reloaded = load_idx(img, lab, split="audit")
            keep = [i for i, s in enumerate(rep.samples) if s.success]
            images = reloaded.images[keep].reshape((len(keep),) + wins[0].adversarial.shape)
        else:
            images = np.stack([s.adversarial for s in wins])
        preds = _logits_np(model, images).argmax(1)
        claimed += len(wins)
        verified += int(np.sum(preds != np.array([s.label for s in wins])))
    return verified, claimed
