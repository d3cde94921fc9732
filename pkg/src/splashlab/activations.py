"""Piecewise-linear activation family, SPLASH units and fixed baselines."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor import Parameter, Tensor, as_tensor, primitive, relu, sigmoid, exp, tanh

FAMILIES = ("general", "continuous", "grounded", "symmetric", "fixed")
CONSTRAINTS = ("none", "positive", "negative", "frozen")
DEFAULT_HINGES = (0.0, 1.0, 2.0, 2.5)


class ActivationError(ValueError):
    pass


def _check_s(S: int) -> None:
    if int(S) != S or S < 1:
        raise ActivationError(f"hinge count S must be a positive integer, got {S}")
    if S % 2 == 0:
        raise ActivationError(f"hinge count S must be odd (one hinge sits at zero), got {S}")


def param_count(family: str, S: int) -> int:
    """Number of free parameters of a piecewise-linear function with S hinges."""
    _check_s(S)
    formulas = {
        "general": 3 * S + 2,
        "continuous": 2 * S + 2,
        "grounded": 2 * S + 1,
        "symmetric": S + 1 + S // 2,
        "fixed": S + 1,
    }
    if family not in formulas:
        raise ActivationError(f"unknown family {family!r}; expected one of {FAMILIES}")
    return formulas[family]


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PiecewiseLinearSpec:
    """Hinges and slopes of one member of the piecewise-linear family.

    For ``fixed`` (SPLASH) and ``symmetric`` specs ``hinges`` holds the
    (S+1)/2 non-negative offsets starting with 0; the mirrored negative
    hinges are implicit. For the other families ``hinges`` holds all S
    locations. ``pos_slopes``/``neg_slopes`` are the a_+/a_- coefficients
    (fixed and symmetric); ``slopes``/``intercepts`` are per-segment values
    (general, continuous, grounded).
    """

    family: str
    S: int
    hinges: np.ndarray
    pos_slopes: np.ndarray | None = None
    neg_slopes: np.ndarray | None = None
    slopes: np.ndarray | None = None
    intercepts: np.ndarray | None = None
    constraint: str = "none"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ActivationError(f"unknown family {self.family!r}")
        _check_s(self.S)
        if self.constraint not in CONSTRAINTS:
            raise ActivationError(f"unknown constraint {self.constraint!r}")
        for name in ("hinges", "pos_slopes", "neg_slopes", "slopes", "intercepts"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, _frozen_array(val))
        h = self.hinges
        half = (self.S + 1) // 2
        if self.family in ("fixed", "symmetric"):
            if h.shape != (half,):
                raise ActivationError(f"{self.family} spec needs {half} non-negative hinges, got {h.shape}")
            if h[0] != 0.0:
                raise ActivationError("first hinge must be 0")
            if np.any(np.diff(h) <= 0):
                raise ActivationError("hinges must be strictly increasing")
            for name in ("pos_slopes", "neg_slopes"):
                v = getattr(self, name)
                if v is None or v.shape != (half,):
                    raise ActivationError(f"{name} must have length {half}")
        else:
            if h.shape != (self.S,) or np.any(np.diff(h) <= 0):
                raise ActivationError(f"{self.family} spec needs {self.S} strictly increasing hinges")
            if self.slopes is None or self.slopes.shape != (self.S + 1,):
                raise ActivationError(f"slopes must have length {self.S + 1}")
            n_int = {"general": self.S + 1, "continuous": 1, "grounded": 0}[self.family]
            got = 0 if self.intercepts is None else self.intercepts.size
            if got != n_int:
                raise ActivationError(f"{self.family} spec needs {n_int} intercepts, got {got}")

    @property
    def trainable(self) -> bool:
        return self.constraint != "frozen"

    def free_parameters(self) -> int:
        """Count free scalars stored in this spec (independent of the table formula)."""
        n_slopes = sum(v.size for v in (self.pos_slopes, self.neg_slopes, self.slopes) if v is not None)
        n_int = 0 if self.intercepts is None else self.intercepts.size
        if self.family == "fixed":
            n_hinges = 0
        elif self.family == "symmetric":
            n_hinges = self.hinges.size - 1
        else:
            n_hinges = self.hinges.size
        return n_slopes + n_int + n_hinges

    def to_dict(self) -> dict:
        out = {"family": self.family, "S": self.S, "hinges": self.hinges.tolist(), "constraint": self.constraint}
        for name in ("pos_slopes", "neg_slopes", "slopes", "intercepts"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PiecewiseLinearSpec":
        kw = {k: d[k] for k in ("pos_slopes", "neg_slopes", "slopes", "intercepts") if d.get(k) is not None}
        return cls(family=d["family"], S=int(d["S"]), hinges=d["hinges"], constraint=d.get("constraint", "none"), **kw)


def make_splash_spec(hinges, pos_slopes=None, neg_slopes=None, constraint: str = "none") -> PiecewiseLinearSpec:
    hinges = np.asarray(hinges, dtype=np.float64)
    half = hinges.size
    if pos_slopes is None:
        pos_slopes = np.zeros(half)
        pos_slopes[0] = 1.0
    if neg_slopes is None:
        neg_slopes = np.zeros(half)
    return PiecewiseLinearSpec("fixed", 2 * half - 1, hinges, pos_slopes, neg_slopes, constraint=constraint)


def make_default_splash() -> PiecewiseLinearSpec:
    """S=7 with hinges at 0, ±1, ±2, ±2.5 and ReLU-shaped slopes."""
    return make_splash_spec(DEFAULT_HINGES)


def default_hinges(S: int) -> np.ndarray:
    """Non-negative hinge offsets for S hinges.

    S=7 gives the standard 0, 1, 2, 2.5. Other S use evenly spaced offsets
    up to 2.5 standard deviations.
    """
    _check_s(S)
    if S == 7:
        return np.array(DEFAULT_HINGES)
    half = (S + 1) // 2
    return np.linspace(0.0, 2.5, half) if half > 1 else np.zeros(1)


def make_family_spec(family: str, S: int, rng: np.random.Generator | None = None) -> PiecewiseLinearSpec:
    """Build a random member of ``family`` with S hinges."""
    _check_s(S)
    rng = rng or np.random.default_rng(0)
    half = (S + 1) // 2
    if family == "fixed":
        return make_splash_spec(default_hinges(S), rng.normal(size=half), rng.normal(size=half))
    if family == "symmetric":
        hinges = np.concatenate([[0.0], np.sort(rng.uniform(0.1, 3.0, size=half - 1))])
        return PiecewiseLinearSpec(family, S, hinges, rng.normal(size=half), rng.normal(size=half))
    hinges = np.sort(rng.uniform(-3.0, 3.0, size=S))
    n_int = {"general": S + 1, "continuous": 1, "grounded": 0}[family]
    intercepts = rng.normal(size=n_int) if n_int else None
    return PiecewiseLinearSpec(family, S, hinges, slopes=rng.normal(size=S + 1), intercepts=intercepts)


def evaluate(spec: PiecewiseLinearSpec, x) -> np.ndarray:
    """Plain numpy evaluation of any family member (no graph)."""
    x = np.asarray(x, dtype=np.float64)
    if spec.family in ("fixed", "symmetric"):
        # same arithmetic as hinge_sum so snapshots reproduce layer outputs bit for bit
        b = spec.hinges
        signs = np.concatenate([np.ones_like(b), -np.ones_like(b)])
        z = x[..., None] * signs - np.concatenate([b, b])
        return (np.where(z > 0, z, 0.0) * np.concatenate([spec.pos_slopes, spec.neg_slopes])).sum(-1)
    seg = np.searchsorted(spec.hinges, x, side="right")
    if spec.family == "general":
        # segment i is the line slope_i * x + intercept_i
        return spec.slopes[seg] * x + spec.intercepts[seg]
    # continuous families: f(0) plus the integral of the slope from 0 to x
    base = 0.0 if spec.family == "grounded" else float(spec.intercepts[0])
    edges = np.concatenate([[-np.inf], spec.hinges, [np.inf]])
    out = np.full(x.shape, base)
    for i, m in enumerate(spec.slopes):
        lo, hi = edges[i], edges[i + 1]
        out += m * (np.clip(x, lo, hi) - np.clip(0.0, lo, hi))
    return out


def project_slopes(neg_slopes: np.ndarray, constraint: str) -> None:
    """Clamp a_-^1 in place according to the sign constraint."""
    if constraint == "negative":
        np.maximum(neg_slopes[..., 0], 0.0, out=neg_slopes[..., 0])
    elif constraint == "positive":
        np.minimum(neg_slopes[..., 0], 0.0, out=neg_slopes[..., 0])


def apply_constraint(spec: PiecewiseLinearSpec, constraint: str) -> PiecewiseLinearSpec:
    """Attach a constraint to a SPLASH spec, projecting the slopes onto it.

    ``negative`` keeps a_-^1 >= 0, ``positive`` keeps a_-^1 <= 0 and
    ``frozen`` marks every slope non-trainable.
    """
    if constraint not in CONSTRAINTS:
        raise ActivationError(f"unknown constraint {constraint!r}")
    if constraint == "none" and spec.constraint == "none":
        return spec
    neg = np.array(spec.neg_slopes)
    project_slopes(neg, constraint)
    return replace(spec, neg_slopes=neg, constraint=constraint)


def snapshot_shape(spec: PiecewiseLinearSpec, grid) -> tuple[np.ndarray, np.ndarray]:
    lo, hi, n = grid
    n = int(n)
    if n < 2:
        raise ActivationError("snapshot grid needs at least 2 points")
    if lo >= hi:
        raise ActivationError(f"snapshot grid needs lo < hi, got [{lo}, {hi}]")
    x = np.linspace(lo, hi, n)
    return x, evaluate(spec, x)


# ---------------------------------------------------------------------------
# graph primitive
# ---------------------------------------------------------------------------
def hinge_sum(x: Tensor, coeffs: Tensor, signs: np.ndarray, offsets: np.ndarray) -> Tensor:
    """h(x) = sum_j coeffs_j * max(0, signs_j * x - offsets_j), elementwise in x.

    ``coeffs`` has shape (J,) (one vector shared by every element) or
    ``x.shape[1:] + (J,)`` (one vector per unit).
    """
    x, coeffs = as_tensor(x), as_tensor(coeffs)
    J = signs.size
    shared = coeffs.ndim == 1
    if coeffs.shape[-1] != J or (not shared and coeffs.shape[:-1] != x.shape[1:]):
        raise ActivationError(f"hinge_sum: coefficient shape {coeffs.shape} does not match input {x.shape}")
    z = x.data[..., None] * signs - offsets
    act = z > 0
    basis = np.where(act, z, 0.0)
    out = (basis * coeffs.data).sum(-1)

    def vjp(g):
        gx = g * (act * (coeffs.data * signs)).sum(-1) if x.requires_grad else None
        gc = None
        if coeffs.requires_grad:
            contrib = g[..., None] * basis
            gc = contrib.reshape(-1, J).sum(0) if shared else contrib.sum(0)
        return gx, gc

    return primitive("hinge_sum", out, (x, coeffs), vjp)


def splash_eval(spec: PiecewiseLinearSpec, x) -> Tensor:
    """Evaluate a SPLASH spec on a tensor; slopes enter as constants."""
    if spec.family != "fixed":
        raise ActivationError("splash_eval needs a fixed-family spec")
    x = as_tensor(x)
    b = spec.hinges
    signs = np.concatenate([np.ones_like(b), -np.ones_like(b)])
    offsets = np.concatenate([b, b])
    coeffs = Tensor(np.concatenate([spec.pos_slopes, spec.neg_slopes]))
    flat = x.reshape((1,) + x.shape) if x.ndim == 0 else x
    out = hinge_sum(flat, coeffs, signs, offsets)
    return out.reshape(()) if x.ndim == 0 else out


# ---------------------------------------------------------------------------
# activation layers
# ---------------------------------------------------------------------------
@dataclass
class ActivationKind:
    """Serializable description of an activation choice.

    ``name`` is one of splash, relu, leaky_relu, prelu, tanh, sigmoid, elu,
    swish, apl.
    """

    name: str
    S: int = 7
    hinges: tuple[float, ...] | None = None
    sharing: str = "layer"          # layer | neuron
    constraint: str = "none"
    alpha: float | None = None      # leaky slope (0.2), elu scale (1.0), prelu init (0.25)
    beta: float = 0.2               # swish
    init_slopes: dict | None = None  # {"pos": [...], "neg": [...]} for frozen / custom init
    layer_slopes: dict = field(default_factory=dict)  # per-layer frozen slopes by layer name

    NAMES = ("splash", "relu", "leaky_relu", "prelu", "tanh", "sigmoid", "elu", "swish", "apl")

    def __post_init__(self):
        if self.name not in self.NAMES:
            raise ActivationError(f"unknown activation {self.name!r}; expected one of {self.NAMES}")
        if self.sharing not in ("layer", "neuron"):
            raise ActivationError(f"sharing must be 'layer' or 'neuron', got {self.sharing!r}")
        if self.constraint not in CONSTRAINTS:
            raise ActivationError(f"unknown constraint {self.constraint!r}")
        if self.alpha is None:
            self.alpha = {"leaky_relu": 0.2, "elu": 1.0, "prelu": 0.25}.get(self.name, 0.0)
        if self.name == "splash":
            _check_s(self.S)
            if self.hinges is None:
                self.hinges = tuple(default_hinges(self.S).tolist())
            if len(self.hinges) != (self.S + 1) // 2:
                raise ActivationError("hinge list must have (S+1)/2 entries")

    def to_dict(self) -> dict:
        d = {"name": self.name}
        if self.name == "splash":
            d.update(S=self.S, hinges=list(self.hinges), sharing=self.sharing, constraint=self.constraint)
            if self.init_slopes:
                d["init_slopes"] = self.init_slopes
            if self.layer_slopes:
                d["layer_slopes"] = self.layer_slopes
        elif self.name in ("leaky_relu", "elu", "prelu"):
            d["alpha"] = self.alpha
        elif self.name == "swish":
            d["beta"] = self.beta
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ActivationKind":
        d = dict(d)
        if d.get("hinges") is not None:
            d["hinges"] = tuple(d["hinges"])
        return cls(**d)

    def build(self, feature_shape: tuple[int, ...], name: str = "act") -> "ActivationLayer":
        if self.name == "splash":
            slopes = self.layer_slopes.get(name) or self.init_slopes
            return SplashActivation(self.hinges, feature_shape, sharing=self.sharing,
                                    constraint=self.constraint, init=slopes, name=name)
        cls = {"relu": ReLU, "leaky_relu": LeakyReLU, "prelu": PReLU, "tanh": Tanh, "sigmoid": Sigmoid,
               "elu": ELU, "swish": Swish, "apl": APL}[self.name]
        if self.name in ("leaky_relu", "elu", "prelu"):
            return cls(alpha=self.alpha, name=name)
        if self.name == "swish":
            return cls(beta=self.beta, name=name)
        return cls(name=name)


class ActivationLayer:
    kinks: tuple[float, ...] = ()
    requires_normalized_input = False

    def __init__(self, name: str = "act"):
        self.name = name

    def parameters(self) -> list[Parameter]:
        return []

    def project(self) -> None:
        pass

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(as_tensor(x))

    def describe(self) -> dict:
        return {"type": type(self).__name__}


class SplashActivation(ActivationLayer):
    """Learnable SPLASH unit with fixed symmetric hinges."""

    requires_normalized_input = True

    def __init__(self, hinges, feature_shape=(), sharing: str = "layer", constraint: str = "none",
                 init: dict | None = None, name: str = "splash"):
        super().__init__(name)
        self.hinges = _frozen_array(hinges)
        if self.hinges[0] != 0.0 or np.any(np.diff(self.hinges) <= 0):
            raise ActivationError("hinges must start at 0 and strictly increase")
        self.S = 2 * self.hinges.size - 1
        self.sharing = sharing
        self.constraint = constraint
        half = self.hinges.size
        shape = (half,) if sharing == "layer" else tuple(feature_shape) + (half,)
        pos, neg = np.zeros(shape), np.zeros(shape)
        if init is None:
            pos[..., 0] = 1.0
        else:
            pos[...] = np.asarray(init["pos"], dtype=np.float64)
            neg[...] = np.asarray(init["neg"], dtype=np.float64)
        trainable = constraint != "frozen"
        self.pos_slopes = Parameter(pos, name=f"{name}.pos_slopes", trainable=trainable)
        self.neg_slopes = Parameter(neg, name=f"{name}.neg_slopes", trainable=trainable)
        self._signs = np.concatenate([np.ones(half), -np.ones(half)])
        self._offsets = np.concatenate([self.hinges, self.hinges])
        self.project()

    @property
    def kinks(self):
        return tuple(sorted(set(self.hinges.tolist()) | set((-self.hinges).tolist())))

    def parameters(self):
        return [self.pos_slopes, self.neg_slopes]

    def project(self) -> None:
        project_slopes(self.neg_slopes.data, self.constraint)

    def forward(self, x: Tensor) -> Tensor:
        pos, neg = self.pos_slopes, self.neg_slopes
        half = self.hinges.size
        coeff_val = np.concatenate([pos.data, neg.data], axis=-1)
        needs = pos.requires_grad or neg.requires_grad
        if needs:
            # concatenation recorded so both slope tensors receive gradients
            coeffs = primitive("concat", coeff_val, (pos, neg), lambda g: (g[..., :half], g[..., half:]))
        else:
            coeffs = Tensor(coeff_val)
        return hinge_sum(x, coeffs, self._signs, self._offsets)

    def spec(self, unit: int | None = None) -> PiecewiseLinearSpec:
        pos, neg = self.pos_slopes.data, self.neg_slopes.data
        if self.sharing == "neuron":
            flat_p, flat_n = pos.reshape(-1, pos.shape[-1]), neg.reshape(-1, neg.shape[-1])
            pos, neg = flat_p[unit or 0], flat_n[unit or 0]
        return PiecewiseLinearSpec("fixed", self.S, self.hinges, pos.copy(), neg.copy(), constraint=self.constraint)

    def describe(self) -> dict:
        return {"type": "SPLASH", "S": self.S, "hinges": self.hinges.tolist(), "sharing": self.sharing,
                "constraint": self.constraint, "slopes_per_unit": self.S + 1,
                "n_slopes": int(self.pos_slopes.size + self.neg_slopes.size)}


class ReLU(ActivationLayer):
    kinks = (0.0,)

    def forward(self, x):
        return relu(x)


class LeakyReLU(ActivationLayer):
    """x for x > 0, alpha * x otherwise. A negative alpha flips the left branch."""

    kinks = (0.0,)

    def __init__(self, alpha: float = 0.2, name: str = "act"):
        super().__init__(name)
        self.alpha = float(alpha)

    def forward(self, x):
        return relu(x) - self.alpha * relu(-x)


class PReLU(ActivationLayer):
    kinks = (0.0,)

    def __init__(self, alpha: float = 0.25, name: str = "act"):
        super().__init__(name)
        self.alpha = Parameter(np.array([alpha]), name=f"{name}.alpha")

    def parameters(self):
        return [self.alpha]

    def forward(self, x):
        return relu(x) - self.alpha * relu(-x)


class Tanh(ActivationLayer):
    def forward(self, x):
        return tanh(x)


class Sigmoid(ActivationLayer):
    def forward(self, x):
        return sigmoid(x)


class ELU(ActivationLayer):
    kinks = (0.0,)

    def __init__(self, alpha: float = 1.0, name: str = "act"):
        super().__init__(name)
        self.alpha = float(alpha)

    def forward(self, x):
        return relu(x) + self.alpha * (exp(-relu(-x)) - 1.0)


class Swish(ActivationLayer):
    def __init__(self, beta: float = 0.2, name: str = "act"):
        super().__init__(name)
        self.beta = float(beta)

    def forward(self, x):
        return x * sigmoid(self.beta * x)


class APL(ActivationLayer):
    """Adaptive piecewise linear unit with fixed hinges at 0, ±1, ±2.

    h(x) = max(0, x) + sum_s a_s * max(0, -x + b_s), with learned a_s
    initialised to 0.
    """

    def __init__(self, hinges=(-2.0, -1.0, 0.0, 1.0, 2.0), name: str = "act"):
        super().__init__(name)
        self.hinge_locations = np.asarray(hinges, dtype=np.float64)
        self.kinks = tuple(sorted(self.hinge_locations.tolist()))
        self.slopes = Parameter(np.zeros(self.hinge_locations.size), name=f"{name}.apl_slopes")

    def parameters(self):
        return [self.slopes]

    def forward(self, x):
        J = self.hinge_locations.size
        return relu(x) + hinge_sum(x, self.slopes, -np.ones(J), -self.hinge_locations)


def baseline_eval(kind: ActivationKind, x) -> Tensor:
    """Evaluate a non-SPLASH activation with its default parameters."""
    return kind.build(as_tensor(x).shape[1:])(x)


# ---------------------------------------------------------------------------
# shape snapshots
# ---------------------------------------------------------------------------
def snapshot_record(layer: SplashActivation, epoch: int, grid=(-3.0, 3.0, 121)) -> dict:
    spec = layer.spec()
    x, h = snapshot_shape(spec, grid)
    return {"layer": layer.name, "epoch": int(epoch), "x": x.tolist(), "h": h.tolist(),
            "hinges": spec.hinges.tolist(), "pos_slopes": spec.pos_slopes.tolist(),
            "neg_slopes": spec.neg_slopes.tolist()}


def spec_from_snapshot(record: dict) -> PiecewiseLinearSpec:
    """Recover a frozen SPLASH spec from a shape snapshot.

    Uses the stored slopes when present; otherwise fits slopes to the
    sampled (x, h) curve by least squares on the hinge basis.
    """
    if "pos_slopes" in record and "neg_slopes" in record:
        return make_splash_spec(record["hinges"], record["pos_slopes"], record["neg_slopes"], constraint="frozen")
    hinges = np.asarray(record.get("hinges", DEFAULT_HINGES), dtype=np.float64)
    x = np.asarray(record["x"], dtype=np.float64)
    h = np.asarray(record["h"], dtype=np.float64)
    basis = np.concatenate([np.maximum(0.0, x[:, None] - hinges), np.maximum(0.0, -x[:, None] - hinges)], axis=1)
    coef, *_ = np.linalg.lstsq(basis, h, rcond=None)
    half = hinges.size
    return make_splash_spec(hinges, coef[:half], coef[half:], constraint="frozen")


def load_shape_file(path) -> dict[str, dict]:
    """Read snapshot JSON (one record or a list) and keep the latest epoch per layer."""
    data = json.loads(Path(path).read_text())
    records = data if isinstance(data, list) else [data]
    latest: dict[str, dict] = {}
    for rec in records:
        if not {"layer", "epoch", "x", "h"} <= rec.keys():
            raise ActivationError(f"{path}: snapshot record missing layer/epoch/x/h")
        prev = latest.get(rec["layer"])
        if prev is None or rec["epoch"] >= prev["epoch"]:
            latest[rec["layer"]] = rec
    return latest


def frozen_kind_from_snapshots(snapshots: dict[str, dict]) -> ActivationKind:
    """SPLASH kind whose every layer is frozen at the snapshot shape."""
    layer_slopes = {}
    first = None
    for name, rec in snapshots.items():
        spec = spec_from_snapshot(rec)
        first = first or spec
        layer_slopes[name] = {"pos": spec.pos_slopes.tolist(), "neg": spec.neg_slopes.tolist()}
    if first is None:
        raise ActivationError("no snapshots to freeze")
    return ActivationKind("splash", S=first.S, hinges=tuple(first.hinges.tolist()), constraint="frozen",
                          init_slopes={"pos": first.pos_slopes.tolist(), "neg": first.neg_slopes.tolist()},
                          layer_slopes=layer_slopes)
