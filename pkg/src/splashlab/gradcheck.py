"""Central finite-difference checks for recorded gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Graph, Tensor


# central differences at step 1e-5 carry ~1e-10 of roundoff; the floor keeps
# identically-zero gradients (e.g. a bias followed by BatchNorm) from reading as relative noise
REL_FLOOR = 1e-5


def rel_error(a, b, floor: float = REL_FLOOR) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, index, step: float = 1e-5) -> float:
    """d f / d arr[index] by central differences, perturbing ``arr`` in place."""
    old = arr[index]
    arr[index] = old + step
    fp = f()
    arr[index] = old - step
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * step)


def analytic_grads(fn: Callable[..., Tensor], *tensors: Tensor) -> list[np.ndarray]:
    with Graph() as g:
        out = fn(*tensors)
        grads = g.backward(out)
    return [grads.get(t, np.zeros_like(t.data)) for t in tensors]


def kink_signature(trace: list) -> list[np.ndarray]:
    """Which side of every kink each activation input lies on, plus pooling winners."""
    sig = []
    for kind, data, kinks in trace:
        if kind == "act" and kinks:
            sig.append(np.sign(data[..., None] - np.asarray(kinks)).astype(np.int8))
        elif kind == "pool":
            n, c, h, w = data.shape
            win = data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
            sig.append(win.argmax(-1).astype(np.int8))
    return sig


def _same(sa, sb) -> bool:
    return len(sa) == len(sb) and all(np.array_equal(a, b) for a, b in zip(sa, sb))


@dataclass
class CheckResult:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return float(rel_error(self.analytic, self.numeric))


def check_model_gradients(model, images: np.ndarray, labels: np.ndarray, n_points: int = 100,
                          rng: np.random.Generator | None = None, step: float = 1e-5,
                          include_inputs: bool = True, max_tries: int = 20) -> list[CheckResult]:
    """Compare loss gradients w.r.t. random weights and input pixels with finite differences.

    A coordinate is redrawn when the +/- step moves any activation input
    across a kink or changes a pooling winner.
    """
    from .nn import cross_entropy_loss

    rng = rng or np.random.default_rng(0)
    x = Tensor(np.array(images, dtype=np.float64), requires_grad=include_inputs)
    params = [p for p in model.parameters(trainable_only=True)]
    with Graph() as g:
        loss = cross_entropy_loss(model(x), labels)
        grads = g.backward(loss)

    def loss_value(trace=None) -> float:
        return cross_entropy_loss(model.forward(Tensor(x.data), trace=trace), labels).item()

    targets = [(p.name, p.data, grads.get(p, np.zeros_like(p.data))) for p in params]
    if include_inputs:
        targets.append(("input", x.data, grads[x]))
    results = []
    while len(results) < n_points:
        # tensors drawn uniformly so small slope vectors are covered as often as weight matrices
        name, arr, garr = targets[int(rng.integers(len(targets)))]
        for _ in range(max_tries):
            index = tuple(int(rng.integers(0, s)) for s in arr.shape)
            old = arr[index]
            traces = []
            for delta in (0.0, step, -step):
                arr[index] = old + delta
                tr = []
                model.forward(Tensor(x.data), trace=tr)
                traces.append(kink_signature(tr))
            arr[index] = old
            if _same(traces[0], traces[1]) and _same(traces[0], traces[2]):
                break
        else:
            continue
        num = numeric_grad(loss_value, arr, index, step)
        results.append(CheckResult(name, index, float(garr[index]), num))
    return results
