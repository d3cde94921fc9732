import csv
import json

import pytest

from splashlab import cli
from splashlab.nn import TrainingLog, read_checkpoint_header

FAST = ["--n-train", "200", "--n-test", "50", "--epochs", "2", "--quiet"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train", "--activation", "splash", "--snapshot-shapes", "--out-dir", out, *FAST) == 0
    return out


def test_train_outputs_and_header(ckpt):
    manifest = json.loads((ckpt / "manifest.json").read_text())
    assert manifest["artifacts"] == ["log.csv", "model.ckpt", "shapes.json"]
    assert manifest["config"]["splash_s"] == 7
    header, _ = read_checkpoint_header(ckpt / "model.ckpt")
    assert [l["slopes_per_unit"] for l in header["splash_layers"]] == [8, 8, 8]
    rows = list(csv.DictReader(open(ckpt / "log.csv")))
    assert [r["epoch"] for r in rows] == ["1", "2"]


def test_train_is_byte_reproducible(tmp_path):
    for d in ("a", "b"):
        assert run("train", "--activation", "relu", "--seed", 3, "--out-dir", tmp_path / d, *FAST) == 0
    assert (tmp_path / "a/log.csv").read_bytes() == (tmp_path / "b/log.csv").read_bytes()


def test_splash_s_is_recorded(tmp_path):
    assert run("train", "--splash-s", 3, "--independent-units", "--out-dir", tmp_path, *FAST) == 0
    header, _ = read_checkpoint_header(tmp_path / "model.ckpt")
    assert {l["slopes_per_unit"] for l in header["splash_layers"]} == {4}


@pytest.mark.parametrize("argv", [
    ["train", "--activation", "softplus"],
    ["train", "--model", "vgg16"],
    ["train", "--constraint", "frozen"],
    ["train", "--activation", "relu", "--constraint", "negative"],
    ["train", "--splash-s", "4"],
    ["train", "--epochs", "0"],
    ["fit-fn", "--target", "cosine"],
    ["fit-fn", "--eps", "0"],
    ["compare", "--activations", "relu", "gelu"],
    ["bogus"],
    [],
])
def test_usage_errors_exit_2(argv, tmp_path):
    assert run(*argv, *(["--out-dir", tmp_path] if argv and argv[0] != "bogus" else [])) == 2


@pytest.mark.parametrize("extra", [["--method", "boundary", "--epsilon", "0.1"],
                                   ["--method", "fgsm", "--pixels", "3"],
                                   ["--method", "one_pixel", "--pop", "2"]])
def test_attack_flag_misuse(extra, ckpt, tmp_path):
    assert run("attack", "--checkpoint", ckpt / "model.ckpt", "--out-dir", tmp_path, "--quiet", *extra) == 2


def test_missing_checkpoint_exits_1(tmp_path):
    assert run("attack", "--checkpoint", tmp_path / "none.ckpt", "--out-dir", tmp_path, "--quiet") == 1


def test_attack_defaults():
    _, subs = cli.build_parser()
    args = subs["attack"].parse_args(["--checkpoint", "x"])
    assert (args.de_iters, args.pop, args.boundary_steps, args.cw_bsearch, args.cw_steps) == (40, 400, 6000, 7, 1000)


def test_attack_report_embeds_config(ckpt, tmp_path):
    out = tmp_path / "atk"
    argv = ["attack", "--checkpoint", ckpt / "model.ckpt", "--n", 30, "--repeats", 2, "--out-dir", out, "--quiet"]
    assert run(*argv) == 0
    first = (out / "report.json").read_bytes()
    report = json.loads(first)
    assert [r["strength"] for r in report["reports"]] == [0.02, 0.04, 0.06]
    assert report["config"]["n"] == 30 and report["config"]["method"] == "fgsm"
    assert report["checkpoint_header"]["activation"]["name"] == "splash"
    assert run(*argv) == 0
    assert (out / "report.json").read_bytes() == first


def test_attack_one_pixel_sweep_and_dump(ckpt, tmp_path):
    assert run("attack", "--checkpoint", ckpt / "model.ckpt", "--method", "one_pixel", "--pixels", 1, 3,
               "--pop", 20, "--de-iters", 3, "--n", 5, "--repeats", 1, "--dump-adversarial",
               "--paired-with", ckpt / "model.ckpt", "--out-dir", tmp_path, "--quiet") == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert [r["strength"] for r in report["reports"]] == [1, 3, 1, 3]
    assert len(report["paired_margins"]) == 2
    assert (tmp_path / "adv-0-0-images.idx").exists()


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 1, "activation": "relu", "n-train": 100, "n_test": 20}))
    assert run("train", "--config", cfg, "--out-dir", tmp_path / "a", "--quiet") == 0
    manifest = json.loads((tmp_path / "a/manifest.json").read_text())
    assert manifest["config"]["epochs"] == 1 and manifest["config"]["activation"] == "relu"
    assert run("train", "--config", cfg, "--epochs", 2, "--out-dir", tmp_path / "b", "--quiet") == 0
    assert json.loads((tmp_path / "b/manifest.json").read_text())["config"]["epochs"] == 2
    cfg.write_text(json.dumps({"epoch": 1}))
    assert run("train", "--config", cfg, "--out-dir", tmp_path / "c", "--quiet") == 2


def test_fit_fn_abs_is_exact(tmp_path):
    assert run("fit-fn", "--target", "abs", "--eps", 0.01, "--out-dir", tmp_path, "--quiet") == 0
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert fit["S"] <= 7 and fit["sup_error"] == 0.0 and fit["exact_member"]
    rows = list(csv.reader(open(tmp_path / "fit_error.csv")))
    assert rows[0] == ["x", "f", "splash", "error"] and len(rows) == 1002


def test_fit_fn_s_grows_as_eps_shrinks(tmp_path):
    S = []
    for eps in (0.2, 0.1, 0.05):
        assert run("fit-fn", "--target", "tanh", "--eps", eps, "--out-dir", tmp_path / str(eps), "--quiet") == 0
        S.append(json.loads((tmp_path / str(eps) / "fit.json").read_text())["S"])
    assert S == sorted(S)


def test_compare_figure_legend_set(tmp_path):
    names = ["splash", "splash-positive", "splash-negative", "fixed-splash", "relu"]
    assert run("compare", "--activations", *names, "--n-train", 120, "--n-test", 30, "--epochs", 2,
               "--out-dir", tmp_path, "--quiet") == 0
    rows = list(csv.DictReader(open(tmp_path / "compare.csv")))
    assert len(rows) == 2
    assert list(rows[0]) == ["epoch"] + [f"{n}_{c}" for n in names for c in ("train_loss", "test_error")]


def test_compare_single_activation_is_train(tmp_path):
    assert run("compare", "--activations", "relu", "--out-dir", tmp_path, *FAST) == 0
    assert (tmp_path / "model.ckpt").exists() and (tmp_path / "log.csv").exists()


def test_fixed_splash_from_shape_file(ckpt, tmp_path):
    assert run("train", "--constraint", "frozen", "--shape-file", ckpt / "shapes.json", "--out-dir", tmp_path,
               *FAST) == 0
    header, _ = read_checkpoint_header(tmp_path / "model.ckpt")
    assert header["activation"]["constraint"] == "frozen"


def test_merge_logs_rejects_mismatched_epochs():
    from splashlab.nn import EpochRecord

    a, b = TrainingLog(), TrainingLog()
    a.records = [EpochRecord(1, 0.5, 0.1, 0.0), EpochRecord(2, 0.4, 0.1, 0.0)]
    b.records = [EpochRecord(1, 0.5, 0.1, 0.0)]
    with pytest.raises(ValueError, match="epochs"):
        cli.merge_logs({"a": a, "b": b})
