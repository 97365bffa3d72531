import inspect
import json
import re

import numpy as np
import pytest

from moaecr import ablation, checks, cli
from moaecr import diffcore as dc
from moaecr.ablation import Cell
from moaecr.config import RunConfig, with_overrides
from moaecr.datasynth import read_csv
from moaecr.errors import DataError
from moaecr.projection import power_iteration_pca, project, scatter_svg
from moaecr.training import train

TINY = {"model": {"d": 8, "h": 2, "m": 2, "blocks": 1, "embed_dim": 4},
        "optim": {"iterations": 6, "batch_size": 8},
        "data": {"n_per_type": 12}}
TINY_FLAGS = ["--set", "model.d=8", "--set", "model.h=2", "--set", "model.m=2",
              "--set", "model.blocks=1", "--set", "model.embed_dim=4",
              "--set", "optim.iterations=6", "--set", "optim.batch_size=8",
              "--set", "data.n_per_type=12"]


def tiny_cfg(**extra):
    cfg = with_overrides(RunConfig(), TINY)
    return with_overrides(cfg, extra) if extra else cfg


# ----------------------------------------------------------------- projection

def test_pca_on_2d_data_is_a_rotation():
    x = np.random.default_rng(0).standard_normal((40, 2)) * [3.0, 1.0]
    y = project(x)
    dx = np.linalg.norm(x[:, None] - x[None], axis=-1)
    dy = np.linalg.norm(y[:, None] - y[None], axis=-1)
    np.testing.assert_allclose(dy, dx, atol=1e-9)


def test_pca_rank_one():
    t = np.random.default_rng(1).standard_normal(30)
    x = np.outer(t, [1.0, -2.0, 0.5])
    _, vals, _ = power_iteration_pca(x)
    assert vals[1] < 1e-12 * vals[0] + 1e-20


@pytest.mark.parametrize("seed", range(3))
def test_pca_eigenvalues_match_dense_solver(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((60, 6)) @ rng.standard_normal((6, 6))
    comps, vals, mean = power_iteration_pca(x)
    ref = np.linalg.eigh(np.cov(x, rowvar=False))[0][::-1][:2]
    np.testing.assert_allclose(vals, ref, rtol=0, atol=1e-6)
    proj_var = ((x - mean) @ comps.T).var(axis=0, ddof=1)
    np.testing.assert_allclose(proj_var, ref, rtol=0, atol=1e-6)
    np.testing.assert_allclose(comps @ comps.T, np.eye(2), atol=1e-9)


def test_pca_deterministic_and_needs_two_samples():
    x = np.random.default_rng(2).standard_normal((10, 4))
    a, b = power_iteration_pca(x, seed=3), power_iteration_pca(x, seed=3)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    with pytest.raises(DataError):
        power_iteration_pca(x[:1])


def test_svg_marks_classes():
    svg = scatter_svg(np.array([[0.0, 0.0], [1.0, 1.0]]), [0, 1], [0, 2], title="t")
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg.count("<circle") == 1
    assert "attack 2" in svg and "live" in svg


# ----------------------------------------------------------------- gradcheck registry

def _snake(name):
    return re.sub(r"(?<!^)(?=[A-Z])", "_", name).lower().replace("log_sum_exp", "logsumexp") \
        .replace("mat_mul", "matmul")


def test_registry_covers_every_primitive():
    prims = [cls.__name__ for _, cls in inspect.getmembers(dc, inspect.isclass)
             if issubclass(cls, dc.Function) and cls is not dc.Function]
    assert len(prims) >= 20
    missing = [p for p in prims if _snake(p) not in checks.CHECKS]
    assert not missing


def test_registry_covers_every_group():
    groups = {g for g, _ in checks.CHECKS.values()}
    assert groups == {"diffcore", "moae", "encoder", "crloss"}


def test_suite_lists_each_check_once():
    report = checks.run_suite(cases=1, names=["add", "softmax", "dm_loss"])
    names = [line.split()[1].rstrip(":") for line in report.lines()]
    assert names == ["diffcore.add", "diffcore.softmax", "crloss.dm_loss"]
    assert report.ok


def test_corrupted_backward_is_named(monkeypatch):
    def wrong(ctx, g):
        out = ctx["out"]
        return (out * g,)  # drops the Jacobian's second term
    monkeypatch.setattr(dc.Softmax, "backward", staticmethod(wrong))
    report = checks.run_suite(cases=2, names=["exp", "softmax"])
    assert not report.ok
    failed = [line for line in report.lines() if line.startswith("FAIL")]
    assert len(failed) == 1 and "diffcore.softmax" in failed[0]


# ----------------------------------------------------------------- training / ablation

def test_zero_iterations_history_empty():
    result = train(tiny_cfg(optim={"iterations": 0}))
    assert result.record.history == []
    assert set(result.record.report) == {"acer", "acc", "auc", "eer", "threshold"}


def test_training_is_deterministic():
    a, b = train(tiny_cfg()), train(tiny_cfg())
    assert a.record.to_json(include_wall_clock=False) == b.record.to_json(include_wall_clock=False)
    assert len(a.record.history) == 6
    h = a.record.history[0]
    assert abs(h["l_total"] - (h["l_ce"] + h["l_dm"] + h["l_cdm"])) < 1e-12


@pytest.mark.parametrize("baseline", ["triplet", "hard_triplet", "npair", "supcon"])
def test_baseline_losses_train(baseline):
    result = train(tiny_cfg(loss={"baseline": baseline, "dm": False, "cdm": False},
                            optim={"iterations": 2}))
    assert all(np.isfinite(h["l_total"]) for h in result.record.history)


def test_one_cell_grid(tmp_path):
    rows = ablation.ablate(tiny_cfg(), [Cell("only", {})], repeats=1, out_dir=tmp_path)
    assert len(rows) == 1 and rows[0]["runs"] == 1 and rows[0]["status"] == "ok"
    table = (tmp_path / "table.csv").read_text().splitlines()
    assert len(table) == 2 and table[0].startswith("cell,runs,status,acer_mean")


def test_experts_heads_grid_cell_count():
    cells = ablation.experts_heads_grid()
    assert len(cells) == 9
    assert {(c.overrides["model"]["m"], c.overrides["model"]["h"]) for c in cells} == \
        {(m, h) for m in (2, 4, 8) for h in (2, 4, 8)}


def test_grid_runs_cells_times_repeats(tmp_path, monkeypatch):
    calls = []

    def fake_run(args):
        _, cell, seed, _ = args
        calls.append((cell.name, seed))
        return cell.name, seed, {"acer": 1.0, "acc": 99.0, "auc": 100.0, "eer": 0.0}, None
    monkeypatch.setattr(ablation, "_run_one", fake_run)
    rows = ablation.ablate(tiny_cfg(), ablation.experts_heads_grid(), repeats=3, workers=1)
    assert len(calls) == 27 and len(rows) == 9


def test_cell_means_reproducible_from_records(tmp_path):
    cells = [Cell("a", {"loss": {"dm": False}}), Cell("b", {})]
    rows = ablation.ablate(tiny_cfg(), cells, repeats=2, out_dir=tmp_path)
    assert ablation.rows_from_records(tmp_path, cells) == rows
    recs = [json.loads((tmp_path / f"a__seed{s}.json").read_text())["report"] for s in (0, 1)]
    assert rows[0]["acc_mean"] == round(float(np.mean([r["acc"] for r in recs])), 4)


def test_failed_cell_is_marked_and_grid_continues(tmp_path):
    cells = [Cell("bad", {"optim": {"batch_size": 3}}), Cell("good", {})]
    rows = ablation.ablate(tiny_cfg(), cells, repeats=1, out_dir=tmp_path)
    assert rows[0]["status"].startswith("failed") and rows[0]["runs"] == 0
    assert rows[1]["status"] == "ok"


# ----------------------------------------------------------------- cli

def run_cli(args, capsys):
    code = cli.main(args)
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_train_evaluate_export_project(tmp_path, capsys):
    out = tmp_path / "run"
    code, stdout, _ = run_cli(["train", "--out", str(out), "--seed", "1", *TINY_FLAGS], capsys)
    assert code == 0
    report = json.loads(stdout)
    for name in ("config.ini", "model.ckpt", "run_record.json"):
        assert (out / name).exists()

    ckpt = str(out / "model.ckpt")
    cfg_flag = ["--config", str(out / "config.ini")]
    code, stdout, _ = run_cli(["evaluate", "--checkpoint", ckpt, *cfg_flag], capsys)
    assert code == 0 and json.loads(stdout) == report

    code, stdout, _ = run_cli(["export-embeddings", "--checkpoint", ckpt, *cfg_flag,
                               "--out", str(out)], capsys)
    assert code == 0
    emb = read_csv(stdout.strip())
    assert emb.features.shape[1] == 8
    first = (out / "embeddings_test.csv").read_bytes()
    run_cli(["export-embeddings", "--checkpoint", ckpt, *cfg_flag, "--out", str(out)], capsys)
    assert (out / "embeddings_test.csv").read_bytes() == first

    code, stdout, _ = run_cli(["project", str(out / "embeddings_test.csv"), "--out", str(out)],
                              capsys)
    assert code == 0
    csv_path, svg_path = stdout.split()
    assert read_csv(csv_path).features.shape == (len(emb), 2)
    assert open(svg_path).read().startswith("<svg")


def test_cli_generate_data(tmp_path, capsys):
    path = tmp_path / "d.csv"
    code, _, _ = run_cli(["generate-data", "--out-file", str(path), "--set",
                          "data.n_per_type=5"], capsys)
    assert code == 0 and len(read_csv(path)) == 40


def test_cli_gradcheck(capsys, monkeypatch):
    monkeypatch.setattr(checks, "CHECKS", {k: checks.CHECKS[k] for k in ("add", "softmax")})
    code, stdout, _ = run_cli(["gradcheck", "--cases", "2"], capsys)
    assert code == 0 and "all checks passed" in stdout


def test_cli_gradcheck_failure_exit_code(capsys, monkeypatch):
    monkeypatch.setattr(checks, "CHECKS", {"exp": checks.CHECKS["exp"]})
    monkeypatch.setattr(dc.Exp, "backward", staticmethod(lambda ctx, g: (3 * g * ctx["out"],)))
    code, stdout, _ = run_cli(["gradcheck", "--cases", "1"], capsys)
    assert code == 3 and "FAIL diffcore.exp" in stdout


@pytest.mark.parametrize("args", [
    ["train", "--set", "model.variant=dense"],
    ["train", "--set", "novalue"],
    ["train", "--preset", "huge"],
    ["frobnicate"],
    ["evaluate", "--checkpoint", "/nonexistent.ckpt"],
])
def test_cli_usage_errors(args, capsys):
    code, _, _ = run_cli(args, capsys)
    assert code == 1


def test_cli_project_needs_two_samples(tmp_path, capsys):
    path = tmp_path / "one.csv"
    path.write_text("f0,f1,label,attack_type\n1.0,2.0,0,0\n")
    code, _, err = run_cli(["project", str(path), "--out", str(tmp_path)], capsys)
    assert code == 1 and "at least 2" in err


def test_cli_numerical_abort(capsys, monkeypatch):
    from moaecr import training

    def nan_losses(*a, **k):
        raise training.NumericalAbort(3, None)
    monkeypatch.setattr(cli, "train", nan_losses)
    code, _, err = run_cli(["train", *TINY_FLAGS], capsys)
    assert code == 2 and "iteration 3" in err


def test_nan_loss_aborts_with_last_finite_bundle(monkeypatch):
    from moaecr import training
    real = training.batch_losses
    calls = {"n": 0}

    def flaky(model, images, labels, cfg):
        total, bundle = real(model, images, labels, cfg)
        calls["n"] += 1
        if calls["n"] == 4:
            total = total * np.nan
            bundle.l_total = float("nan")
        return total, bundle
    monkeypatch.setattr(training, "batch_losses", flaky)
    with pytest.raises(training.NumericalAbort) as info:
        train(tiny_cfg())
    assert info.value.iteration == 3
    assert np.isfinite(info.value.last_bundle.l_total)


def test_class_geometry_hand_example():
    from moaecr.projection import class_geometry
    x = np.array([[1.0, 0.0], [3.0, 0.0], [0.0, 2.0], [0.0, 4.0]])
    geo = class_geometry(x, [0, 0, 1, 1])
    assert geo["center_cosine"] == 0.0
    assert geo["intra_distance"] == 1.0
