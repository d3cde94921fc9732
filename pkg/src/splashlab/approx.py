"""Constructive SPLASH approximation of grounded, uniformly continuous functions."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.ndimage import maximum_filter1d, minimum_filter1d

from .activations import PiecewiseLinearSpec, evaluate, make_splash_spec


class ApproximationError(ValueError):
    pass


class ModulusResolutionError(ApproximationError):
    """The estimation grid is too coarse for the requested eps."""


Func = Callable[[np.ndarray], np.ndarray]

_OSC_TOL = 1e-12
EXACT_TOL = 1e-12


@dataclass
class FitResult:
    spec: PiecewiseLinearSpec
    S: int
    sup_error: float
    delta: float
    B: float
    eps: float
    exact: bool = False

    def to_dict(self) -> dict:
        return {"S": self.S, "sup_error": self.sup_error, "delta": self.delta, "interval": [-self.B, self.B],
                "eps": self.eps, "exact_member": self.exact, "spec": self.spec.to_dict()}


def _check_grounded(f: Func) -> None:
    f0 = float(np.asarray(f(np.array([0.0])))[0])
    if abs(f0) > 1e-9:
        raise ApproximationError(f"f(0) = {f0:g}; a grounded approximant can only match functions with f(0) = 0")


def _oscillation(fx: np.ndarray, m: int) -> float:
    """max |f(x_i) - f(x_j)| over grid pairs at most m steps apart."""
    size = min(m + 1, fx.size)
    return float((maximum_filter1d(fx, size, mode="nearest") - minimum_filter1d(fx, size, mode="nearest")).max())


def estimate_modulus(f: Func, B: float, eps: float, grid_n: int = 2000) -> float:
    """Largest gap delta with |f(x) - f(y)| <= eps/2 whenever |x - y| <= delta.

    Windows of a geometric ladder (halving) bracket the answer, then
    bisection over whole grid steps pins it down.
    """
    if grid_n < 1000:
        raise ApproximationError("grid_n must be at least 1000")
    if B <= 0 or eps <= 0:
        raise ApproximationError("B and eps must be positive")
    _check_grounded(f)
    x = np.linspace(-B, B, grid_n + 1)
    fx = np.asarray(f(x), dtype=np.float64)
    if not np.all(np.isfinite(fx)):
        raise ApproximationError("f is not finite on the interval")
    h = 2 * B / grid_n
    target = eps / 2 + _OSC_TOL

    def ok(m: int) -> bool:
        return _oscillation(fx, m) <= target

    m_hi = grid_n
    if ok(m_hi):
        return 2 * B
    m = grid_n // 2
    while m >= 1 and not ok(m):
        m_hi = m
        m //= 2
    if m < 1:
        raise ModulusResolutionError(f"modulus estimation failed: f varies by more than {eps / 2:g} "
                                 f"within one grid step of {h:g}; increase grid_n")
    lo, hi = m, m_hi          # ok(lo), not ok(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo * h


def _smallest_odd_above(v: float) -> int:
    s = max(int(np.floor(v)) + 1, 1)
    return s if s % 2 else s + 1


def splash_interpolant(f: Func, B: float, S: int) -> PiecewiseLinearSpec:
    """SPLASH through f at S equally spaced symmetric hinges on [-B, B].

    Positive-axis segment slopes m_k give a_+ by differencing
    (a_+^1 = m_0, a_+^{k+1} = m_k - m_{k-1}); the negative axis mirrors this
    with a_- = -(slope) differences.
    """
    if S < 1 or S % 2 == 0:
        raise ApproximationError(f"S must be a positive odd integer, got {S}")
    half = (S + 1) // 2
    spacing = 2 * B / (S + 1)
    k = np.arange(half + 1)
    right = np.asarray(f(k * spacing), dtype=np.float64)
    left = np.asarray(f(-k * spacing), dtype=np.float64)
    pos_seg = np.diff(right) / spacing                  # slope on [k s, (k+1) s]
    neg_seg = (left[:-1] - left[1:]) / spacing          # slope on [-(k+1) s, -k s]
    pos = np.diff(pos_seg, prepend=0.0)
    neg = np.diff(-neg_seg, prepend=0.0)
    return make_splash_spec(k[:-1] * spacing, pos, neg)


def measure_sup_error(f: Func, spec: PiecewiseLinearSpec, B: float, per_segment: int | None = None,
                      chunk: int = 20000) -> float:
    n_seg = spec.S + 1
    per_segment = per_segment or max(10, int(np.ceil(20000 / n_seg)))
    x = np.linspace(-B, B, n_seg * per_segment + 1)
    err = 0.0
    for lo in range(0, x.size, chunk):
        xs = x[lo:lo + chunk]
        err = max(err, float(np.max(np.abs(np.asarray(f(xs)) - evaluate(spec, xs)))))
    return err


def fit_splash(f: Func, B: float, eps: float, grid_n: int = 2000, A: float | None = None,
               max_refinements: int = 6, exact_check: bool = True) -> FitResult:
    """Fit a SPLASH unit to grounded f on [-B, B] with sup error at most eps.

    S is the smallest odd count whose hinge spacing 2B/(S+1) is below the
    estimated modulus delta, so S > 2B/delta - 1. With ``exact_check`` a
    function reproduced exactly by a SPLASH with S <= 7 (e.g. x or |x|) is
    returned at that S instead. Only symmetric intervals are supported
    because SPLASH hinges are mirrored around 0; passing ``A`` other than -B
    raises.
    """
    if A is not None and not np.isclose(A, -B):
        raise ApproximationError(f"interval [{A}, {B}] is not symmetric; SPLASH hinges require [-B, B]")
    for _ in range(6):
        try:
            delta = estimate_modulus(f, B, eps, grid_n)
            break
        except ModulusResolutionError:
            grid_n *= 4
    else:
        raise ApproximationError("modulus estimation failed at every grid resolution")
    if exact_check:
        # functions already in the family need no fine hinge grid
        for S in (1, 3, 5, 7):
            spec = splash_interpolant(f, B, S)
            err = measure_sup_error(f, spec, B)
            if err <= EXACT_TOL:
                return FitResult(spec, S, err, delta, B, eps, exact=True)
    S = _smallest_odd_above(2 * B / delta - 1)
    for _ in range(max_refinements + 1):
        spec = splash_interpolant(f, B, S)
        err = measure_sup_error(f, spec, B)
        if err <= eps:
            return FitResult(spec, S, err, delta, B, eps)
        S = 2 * S + 1
    raise ApproximationError(f"could not reach sup error {eps:g} (last {err:g} at S={spec.S})")


def error_table(f: Func, result: FitResult, n: int = 1001) -> np.ndarray:
    """Columns x, f(x), splash(x), |f - splash| on a uniform grid."""
    x = np.linspace(-result.B, result.B, n)
    fx = np.asarray(f(x), dtype=np.float64)
    sx = evaluate(result.spec, x)
    return np.column_stack([x, fx, sx, np.abs(fx - sx)])
