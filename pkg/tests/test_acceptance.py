"""Acceptance suite: one test (or pair of tests) per criterion, each logging a PASS/FAIL line.

Soft criteria are asserted only through ``soft``: a miss is reported as FAIL
and marked xfail with the measured numbers, never relaxed into a pass.
"""
import time
from functools import lru_cache

import numpy as np
import pytest

from splashlab import activations as act
from splashlab import attacks as atk
from splashlab.activations import ActivationKind
from splashlab.approx import fit_splash
from splashlab.cli import resolve_activation
from splashlab.data import mnist_like, subsample, synthetic_grounded_functions
from splashlab.gradcheck import check_model_gradients
from splashlab.nn import MODEL_NAMES, TrainConfig, build_model, train
from splashlab.tensor import Tensor

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2, 3, 4)
EPOCHS = 10
REPORTS: list[tuple[object, atk.AttackReport]] = []


def soft(ok: bool, reason: str) -> None:
    if not ok:
        pytest.xfail(f"soft criterion missed: {reason}")


@lru_cache(maxsize=None)
def datasets():
    return mnist_like(6000, seed=0, split="train"), mnist_like(1000, seed=0, split="test")


@lru_cache(maxsize=None)
def trained(model_name: str, activation: str, seed: int):
    """Train once per (model, activation, seed); fixed-splash freezes the matching splash run."""
    train_set, test_set = datasets()
    snapshots = None
    if activation == "fixed-splash":
        _, splash_log = trained(model_name, "splash", seed)
        snapshots = {rec["layer"]: rec for rec in splash_log.snapshots}
    kind = resolve_activation(activation, snapshots=snapshots)
    model = build_model(model_name, kind, seed=seed)
    log = train(model, train_set, TrainConfig(epochs=EPOCHS, seed=seed), test_set,
                snapshot_shapes=activation == "splash")
    return model.eval(), log


@lru_cache(maxsize=None)
def attack_subset():
    return subsample(datasets()[1], 200, seed=0, stratified=True)


def inversions(counts) -> int:
    return sum(b < a for a, b in zip(counts, counts[1:]))


# -- 1 -----------------------------------------------------------------------------------
def test_c1_gradient_suite(acceptance_log):
    start = time.perf_counter()
    batch = mnist_like(3, seed=11)
    worst, points = 0.0, 0
    for model_name in MODEL_NAMES:
        for name in ActivationKind.NAMES:
            model = build_model(model_name, name, seed=1).train()
            rng = np.random.default_rng(7)
            for p in model.parameters():
                if "slopes" in p.name:
                    p.data[...] = rng.normal(0.0, 0.5, size=p.shape)
            res = check_model_gradients(model, batch.images, batch.labels, n_points=100, rng=rng)
            assert len(res) >= 100 and any(r.name == "input" for r in res)
            worst = max(worst, max(r.rel_error for r in res))
            points += len(res)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 60
    acceptance_log("1", ok, f"worst relative error {worst:.2e} over {points} points, {elapsed:.1f}s")
    assert ok


# -- 2 -----------------------------------------------------------------------------------
FAMILY_COUNTS = {"general": lambda S: 3 * S + 2, "continuous": lambda S: 2 * S + 2, "grounded": lambda S: 2 * S + 1,
          "symmetric": lambda S: S + 1 + S // 2, "fixed": lambda S: S + 1}


def test_c2_parameter_counts(acceptance_log):
    bad = [(fam, S) for fam, f in FAMILY_COUNTS.items() for S in (1, 3, 5, 7, 9, 11) if act.param_count(fam, S) != f(S)]
    acceptance_log("2", not bad, f"{5 * 6 - len(bad)}/30 family/S counts exact")
    assert not bad


# -- 3 -----------------------------------------------------------------------------------
def test_c3_splash_identities(acceptance_log):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    x = np.linspace(-10, 10, 20001)
    relu_dev = float(np.max(np.abs(act.splash_eval(act.make_default_splash(), Tensor(x)).data - np.maximum(x, 0))))
    grounded, secant, cumulative = True, 0.0, 0.0
    for _ in range(200):
        spec = act.make_splash_spec(act.DEFAULT_HINGES, rng.normal(size=4), rng.normal(size=4))
        grounded &= act.evaluate(spec, 0.0) == 0.0
        for b in np.concatenate([spec.hinges, -spec.hinges]):
            # the one-sided secants over a vanishing gap agree: no jump at the hinge
            h = 1e-9
            secant = max(secant, abs(float(act.evaluate(spec, b + h) - act.evaluate(spec, b - h))))
        edges = np.append(spec.hinges, 4.0)
        for k in range(4):
            lo, hi = edges[k] + 0.05, edges[k + 1] - 0.05
            slope = float(act.evaluate(spec, hi) - act.evaluate(spec, lo)) / (hi - lo)
            cumulative = max(cumulative, abs(slope - spec.pos_slopes[:k + 1].sum()))
            nslope = float(act.evaluate(spec, -lo) - act.evaluate(spec, -hi)) / (hi - lo)
            cumulative = max(cumulative, abs(nslope + spec.neg_slopes[:k + 1].sum()))
    elapsed = time.perf_counter() - start
    ok = grounded and relu_dev == 0.0 and secant <= 1e-6 and cumulative <= 1e-9 and elapsed < 10
    acceptance_log("3", ok, f"grounded={grounded}, relu deviation {relu_dev:g}, max hinge gap {secant:.1e}, "
                            f"cumulative-slope residual {cumulative:.1e}, {elapsed:.1f}s")
    assert ok


# -- 4 -----------------------------------------------------------------------------------
def test_c4_fitter_error_bound(acceptance_log):
    start = time.perf_counter()
    targets = synthetic_grounded_functions()
    rows, ok = [], True
    for name in ("tanh", "xsin"):
        for eps in (0.1, 0.05, 0.01):
            res = fit_splash(targets[name], 2.0, eps)
            # 10*S points per segment, capped near 1e5 points (never below 10 per segment) for large S
            per_segment = max(10, min(10 * res.S, 100_000 // (res.S + 1)))
            x = np.linspace(-2, 2, per_segment * (res.S + 1) + 1)
            err = max(float(np.max(np.abs(targets[name](c) - act.evaluate(res.spec, c))))
                      for c in np.array_split(x, max(1, x.size * res.S // 4_000_000)))
            ok &= err <= eps and res.S > 2 * res.B / res.delta - 1 and not res.exact
            rows.append(f"{name}/{eps}: S={res.S} err={err:.3g}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 30
    acceptance_log("4", ok, "; ".join(rows) + f"; {elapsed:.1f}s")
    assert ok


# -- 5 -----------------------------------------------------------------------------------
def test_c5_mean_accuracy(acceptance_log):
    start = time.perf_counter()
    relu = [trained("mlp", "relu", s)[1].test_errors[-1] for s in SEEDS]
    splash = [trained("mlp", "splash", s)[1].test_errors[-1] for s in SEEDS]
    elapsed = time.perf_counter() - start
    ok = np.mean(splash) <= np.mean(relu) and elapsed < 20 * 60
    acceptance_log("5", ok, f"mean test error splash {np.mean(splash):.4f} vs relu {np.mean(relu):.4f} "
                            f"over seeds {SEEDS}, {elapsed:.0f}s")
    assert ok


def test_c5_soft_seed_wins(acceptance_log):
    relu = [trained("mlp", "relu", s)[1].test_errors[-1] for s in SEEDS]
    splash = [trained("mlp", "splash", s)[1].test_errors[-1] for s in SEEDS]
    wins = sum(s <= r for s, r in zip(splash, relu))
    detail = f"splash wins {wins}/5 seeds (splash {np.round(splash, 4).tolist()}, relu {np.round(relu, 4).tolist()})"
    acceptance_log("5 (soft)", wins >= 3, detail)
    soft(wins >= 3, detail)


# -- 6 -----------------------------------------------------------------------------------
def test_c6_soft_ablation_ordering(acceptance_log):
    names = ("splash", "splash-negative", "splash-positive", "fixed-splash", "relu")
    loss = {n: np.array([trained("mlp", n, s)[1].train_losses[-1] for s in SEEDS[:3]]) for n in names}
    mean = {n: float(v.mean()) for n, v in loss.items()}
    order = mean["splash"] <= mean["splash-negative"] <= mean["splash-positive"]
    tol = max(loss["fixed-splash"].std(), loss["relu"].std())
    close = abs(mean["fixed-splash"] - mean["relu"]) <= tol
    detail = ", ".join(f"{n} {mean[n]:.4f}" for n in names) + f"; fixed-vs-relu gap " \
             f"{abs(mean['fixed-splash'] - mean['relu']):.4f} (1 std = {tol:.4f})"
    acceptance_log("6 (soft)", order and close, detail)
    soft(order and close, detail)


# -- 7 -----------------------------------------------------------------------------------
def test_c7_fgsm_harness(acceptance_log):
    model, _ = trained("mlp", "splash", 0)
    subset = attack_subset()
    configs = [atk.AttackConfig(method="fgsm", epsilon=e, repeats=5) for e in atk.FGSM_EPSILONS]
    reports = atk.run_campaign({"mlp-splash": model}, subset, configs)
    REPORTS.extend((model, r) for r in reports)
    linf = max(s.linf - r.config.epsilon for r in reports for rep in r.repeats for s in rep.samples)
    counts = np.array([r.counts for r in reports]).T          # repeats x eps
    inv = [inversions(c) for c in counts]
    ok = linf <= 1e-15 and max(inv) <= 1
    acceptance_log("7 fgsm", ok, f"max linf excess {linf:.1e}; counts per repeat {counts.tolist()}")
    assert ok


def test_c7_one_pixel_harness(acceptance_log):
    model, _ = trained("mlp", "splash", 0)
    subset = attack_subset()
    # reduced DE budget (population 100, 20 generations) to fit the desk-scale runtime
    configs = [atk.AttackConfig(method="one_pixel", pixels=k, pop=100, de_iters=20, repeats=5)
               for k in atk.PIXEL_COUNTS]
    reports = atk.run_campaign({"mlp-splash": model}, subset, configs)
    REPORTS.extend((model, r) for r in reports)
    support = max(int(np.any(s.adversarial != subset.images[s.index], axis=0).sum()) - r.config.pixels
                  for r in reports for rep in r.repeats for s in rep.samples)
    counts = np.array([r.counts for r in reports]).T
    inv = [inversions(c) for c in counts]
    ok = support <= 0 and max(inv) <= 1
    acceptance_log("7 one-pixel", ok, f"max support excess {support}; counts per repeat {counts.tolist()}")
    assert ok


def plane_2d():
    model = atk.AffineClassifier([[0.0, 2.0], [0.0, -1.0]], [0.0, -0.5], (1, 1, 2))
    return model, np.array([[[0.3, 0.4]]]), 0.3 / np.sqrt(5.0)


def test_c7_boundary_harness(acceptance_log):
    model, _ = trained("mlp", "splash", 0)
    subset = attack_subset()
    correct = np.flatnonzero(model.predict(subset.images).argmax(1) == subset.labels)[:3]
    adversarial, monotone = True, True
    for i in correct:
        trace = []
        atk.boundary_attack(model, subset.images[i], subset.labels[i], atk.AttackConfig(method="boundary",
                            boundary_steps=1500), np.random.default_rng(int(i)), trace=trace)
        d = [t[0] for t in trace]
        monotone &= all(b <= a for a, b in zip(d, d[1:]))
        adversarial &= bool(np.all(model.predict(np.stack([t[1] for t in trace])).argmax(1) != subset.labels[i]))
    lin, x, dist = plane_2d()
    res = atk.boundary_attack(lin, x, 0, atk.AttackConfig(method="boundary"), np.random.default_rng(0))
    rel = abs(res.l2 - dist) / dist
    (report,) = atk.run_campaign({"mlp-splash": model}, subset.take(correct),
                                 [atk.AttackConfig(method="boundary", boundary_steps=1500, repeats=1)])
    REPORTS.append((model, report))
    ok = adversarial and monotone and rel <= 0.05
    acceptance_log("7 boundary", ok, f"iterates adversarial={adversarial}, monotone={monotone}, "
                                     f"2-D distance {res.l2:.5f} vs analytic {dist:.5f} ({100 * rel:.2f}%)")
    assert ok


def test_c7_cw_harness(acceptance_log):
    model, _ = trained("mlp", "splash", 0)
    subset = attack_subset().take(range(20))
    cfg = atk.AttackConfig(method="cw_l2", cw_bsearch=4, cw_steps=100, cw_lr=0.05, repeats=1)
    (report,) = atk.run_campaign({"mlp-splash": model}, subset, [cfg])
    REPORTS.append((model, report))
    advs = np.stack([s.adversarial for s in report.repeats[0].samples])
    in_box = bool(advs.min() >= 0.0 and advs.max() <= 1.0)
    lin, x, dist = plane_2d()
    res = atk.cw_l2_attack(lin, x[None], np.array([0]), atk.AttackConfig(method="cw_l2"))[0]
    rel = abs(res.l2 - dist) / dist
    ok = in_box and res.success and rel <= 0.05
    acceptance_log("7 cw-l2", ok, f"outputs in box={in_box}; 2-D distance {res.l2:.5f} vs analytic {dist:.5f} "
                                  f"({100 * rel:.2f}%)")
    assert ok


# -- 8 -----------------------------------------------------------------------------------
def test_c8_soft_robustness_direction(acceptance_log):
    start = time.perf_counter()
    subset = attack_subset()
    cfg = atk.AttackConfig(method="fgsm", epsilon=0.04, repeats=5)
    counts = {}
    for name in ("splash", "relu"):
        model, _ = trained("lenet5-small", name, 0)
        (report,) = atk.run_campaign({f"lenet-{name}": model}, subset, [cfg])
        REPORTS.append((model, report))
        counts[name] = report.counts
    wins = sum(s <= r for s, r in zip(counts["splash"], counts["relu"]))
    elapsed = time.perf_counter() - start
    ok = wins >= 3 and elapsed < 30 * 60
    detail = f"splash <= relu in {wins}/5 repeats (splash {counts['splash']}, relu {counts['relu']}), {elapsed:.0f}s"
    acceptance_log("8 (soft)", ok, detail)
    assert elapsed < 30 * 60
    soft(wins >= 3, detail)


# -- 9 -----------------------------------------------------------------------------------
def test_c9_successes_reverify(acceptance_log, tmp_path):
    assert REPORTS, "criterion 9 runs after the attack criteria"
    verified = claimed = 0
    for i, (model, report) in enumerate(REPORTS):
        work = tmp_path / str(i)
        work.mkdir()
        v, c = atk.verify_successes(model, report, work)
        verified += v
        claimed += c
    ok = verified == claimed and claimed > 0
    acceptance_log("9", ok, f"{verified}/{claimed} reported successes re-verified after IDX reload "
                            f"across {len(REPORTS)} reports")
    assert ok
