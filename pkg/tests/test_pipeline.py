import json
import math
import shutil

import pytest

from selfscore import pipeline as pl
from selfscore.backend import load_delta
from selfscore.dpo import load_train_report
from selfscore.errors import ConfigError
from selfscore.pipeline import (IterationState, Pipeline, PipelineConfig, config_to_ini, crossfit_decode,
                                default_ini, format_table, load_config, load_state, mark_done, run_full,
                                run_iteration, stage_done, write_toy_workspace)
from selfscore.preference import load_pairs


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    ws = tmp_path_factory.mktemp("ws")
    cfg = load_config(write_toy_workspace(ws), env={})
    state, rows = run_full(cfg)
    return cfg, state, rows


def test_run_layout_and_report(toy_run):
    cfg, state, rows = toy_run
    root = cfg.out_path
    for rel in ("binning.json", "config.ini", "report.json", "report.txt", "zero-shot/metrics.json",
                "ite-1/data/score.jsonl", "ite-1/delta-score/manifest.json", "ite-1/state.json",
                "ite-2/data/consistency.jsonl", "ite-2/delta-consistency/manifest.json",
                "ite-2/delta-merged/merge_manifest.json", "ite-2/metrics.json"):
        assert (root / rel).is_file(), rel
    assert [r["row"] for r in rows] == ["zero-shot", "ite-1 score", "ite-2 score", "ite-2 consistency",
                                        "ite-2 merged"]
    for r in rows:
        assert set(r) >= {"plcc", "srcc", "rmse", "cons", "use", "gen", "n", "judge_failures"}
    assert state.iteration == 2 and state.current_delta == "ite-2/delta-merged"
    assert "ite-2 merged" in (root / "report.txt").read_text()


def test_iteration_one_has_no_consistency_artifacts(toy_run):
    cfg, _, _ = toy_run
    ite1 = cfg.out_path / "ite-1"
    assert not (ite1 / "data" / "consistency.jsonl").exists()
    assert not (ite1 / "delta-consistency").exists()
    assert not (ite1 / "delta-merged").exists()
    s1 = load_state(ite1 / "state.json")
    assert set(s1.deltas) == {"score"} and s1.merged is None
    with pytest.raises(ValueError):
        IterationState(1, None, None, deltas={"consistency": "x"})


def test_learning_rate_schedule(toy_run):
    cfg, _, _ = toy_run
    for k in (1, 2):
        tc = json.loads((cfg.out_path / f"ite-{k}/delta-score/train_config.json").read_text())
        assert tc["lr"] == 0.01 * 0.8 ** (k - 1)
    tc = json.loads((cfg.out_path / "ite-2/delta-consistency/train_config.json").read_text())
    assert tc["lr"] == 0.01 * 0.8


def test_lr_at_iteration_three_is_0_64_of_base():
    cfg = PipelineConfig(manifest="m", iterations=3)
    assert cfg.score_train.for_iteration(3).lr == cfg.score_train.lr * 0.8 ** 2
    assert cfg.score_train.for_iteration(3).lr / cfg.score_train.lr == pytest.approx(0.64, abs=1e-15)


def test_generation_lineage(toy_run):
    cfg, _, _ = toy_run
    h1, _ = load_pairs(cfg.out_path / "ite-1/data/score.jsonl")
    h2, _ = load_pairs(cfg.out_path / "ite-2/data/score.jsonl")
    assert h1["generator"].startswith("base:toy-")
    assert h2["generator"] == load_delta(cfg.out_path / "ite-1/delta-score").checksum()


def test_merged_delta_lineage(toy_run):
    cfg, _, _ = toy_run
    score = load_delta(cfg.out_path / "ite-2/delta-score")
    ite1 = load_delta(cfg.out_path / "ite-1/delta-score")
    assert score.metadata["parent"] == ite1.checksum()
    manifest = json.loads((cfg.out_path / "ite-2/delta-merged/merge_manifest.json").read_text())
    assert manifest["config"] == {"weights": [1.0, 1.0], "density": 0.5, "sign_method": "frequency"}
    assert [i["path"] for i in manifest["inputs"]] == ["ite-2/delta-score", "ite-2/delta-consistency"]


def test_fraction_counts_are_ceiled(tmp_path):
    ws = tmp_path / "ws"
    cfg_path = write_toy_workspace(ws)
    cfg = load_config(cfg_path, {"pipeline.score_fraction": "0.25", "pipeline.iterations": "2",
                                 "score.epochs": "1", "consistency.epochs": "1"}, env={})
    run_full(cfg)
    n_train = 110
    n_score = math.ceil(0.25 * n_train)
    for k in (1, 2):
        header, pairs = load_pairs(cfg.out_path / f"ite-{k}/data/score.jsonl")
        assert len(pairs) == header["count"] == n_score == 28
    _, cons = load_pairs(cfg.out_path / "ite-2/data/consistency.jsonl")
    assert len(cons) == math.ceil(0.3 * n_score) == 9


def test_resume_skips_finished_stages_and_reproduces(toy_run, tmp_path, monkeypatch):
    cfg, _, _ = toy_run
    root = cfg.out_path
    before = _tree(root)
    copy = tmp_path / "copy"
    shutil.copytree(root, copy)
    shutil.rmtree(copy / "ite-2" / "delta-merged")
    shutil.rmtree(copy / "ite-2" / "eval")
    (copy / "report.json").unlink()

    def no_training(*a, **k):
        raise AssertionError("training stage should have been skipped")

    monkeypatch.setattr(pl, "train_adapter", no_training)
    cfg2 = PipelineConfig(**{**cfg.__dict__, "out": str(copy)})
    run_full(cfg2)
    after = _tree(copy)
    assert set(after) == set(before)
    for rel in before:
        if rel == "config.ini":
            continue  # records the output root
        assert after[rel] == before[rel], rel


def test_tampered_output_is_recomputed(toy_run, tmp_path):
    cfg, _, _ = toy_run
    copy = tmp_path / "copy"
    shutil.copytree(cfg.out_path / "zero-shot", copy)
    inputs = json.loads((copy / "stage.json").read_text())["inputs"]
    assert stage_done(copy, inputs)
    (copy / "metrics.json").write_text("{}")
    assert not stage_done(copy, inputs)
    assert not stage_done(copy, {**inputs, "folds": 3})
    mark_done(copy, inputs)
    assert stage_done(copy, inputs)


def test_state_verify_detects_corruption(toy_run, tmp_path):
    cfg, state, _ = toy_run
    state.verify(cfg.out_path)
    copy = tmp_path / "copy"
    shutil.copytree(cfg.out_path, copy)
    bad = IterationState(**{**state.to_dict(), "current_checksum": "0" * 64})
    with pytest.raises(ValueError):
        bad.verify(copy)
    shutil.rmtree(copy / state.current_delta)
    with pytest.raises(FileNotFoundError):
        state.verify(copy)


def test_two_seeded_runs_identical(tmp_path):
    trees = []
    for tag in ("a", "b"):
        cfg = load_config(write_toy_workspace(tmp_path / tag), {"pipeline.iterations": "2"}, env={})
        run_full(cfg)
        trees.append(cfg.out_path)
    a, b = (_tree(t) for t in trees)
    for rel in a:
        if rel.endswith(".jsonl") and "/data/" in rel:
            assert a[rel] == b[rel], rel
    for rel in ("ite-1/delta-score", "ite-2/delta-score", "ite-2/delta-consistency"):
        ra, rb = load_train_report(trees[0] / rel), load_train_report(trees[1] / rel)
        assert ra.loss_trace == rb.loss_trace
    assert (trees[0] / "report.txt").read_bytes() == (trees[1] / "report.txt").read_bytes()


def test_run_iteration_function(tmp_path):
    cfg = load_config(write_toy_workspace(tmp_path / "ws"), {"score.epochs": "1", "consistency.epochs": "1"},
                      env={})
    s1 = run_iteration(None, cfg)
    assert s1.iteration == 1 and s1.merged is None
    s2 = run_iteration(s1, cfg)
    assert s2.iteration == 2 and s2.merged == "ite-2/delta-merged"
    assert set(s2.metrics) == {"score", "consistency", "merged"}
    assert load_state(cfg.out_path / "ite-2/state.json") == s2


def test_increment_basis_and_fresh_lineage(tmp_path):
    for over in ({"merge.basis": "increment"}, {"pipeline.lineage": "fresh"}):
        ws = tmp_path / next(iter(over.values()))
        cfg = load_config(write_toy_workspace(ws), {**over, "score.epochs": "1", "consistency.epochs": "1"},
                          env={})
        state, rows = run_full(cfg)
        assert rows[-1]["row"] == "ite-2 merged"
        if "pipeline.lineage" in over:
            assert load_delta(cfg.out_path / "ite-2/delta-score").metadata["parent"] is None


# config -------------------------------------------------------------------------------

def test_default_ini_round_trip(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text(default_ini())
    cfg = load_config(p, env={})
    assert cfg.score_train.lr == 5e-5 and cfg.score_train.beta == 0.1 and cfg.score_train.batch_size == 128
    assert cfg.adapter.rank == 64 and cfg.adapter.alpha == 128
    assert cfg.merge.density == 0.5 and cfg.merge.weights == (1.0, 1.0)
    assert (cfg.score_fraction, cfg.consistency_fraction_of_score) == (0.25, 0.3)
    assert cfg.manifest == str(tmp_path / "data/manifest.jsonl")
    again = tmp_path / "d.ini"
    again.write_text(config_to_ini(cfg))
    assert load_config(again, env={}) == cfg


def test_env_and_overrides(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text(default_ini())
    assert load_config(p, env={"SELFSCORE_OUT": "/x/y"}).out == "/x/y"
    assert load_config(p, {"pipeline.out": "/z"}, env={"SELFSCORE_OUT": "/x/y"}).out == "/z"
    assert load_config(p, {"score.lr": "0.5"}, env={}).score_train.lr == 0.5


@pytest.mark.parametrize("over", [
    {"score.lr": "fast"}, {"score.momentum": "0.9"}, {"pipeline.score_fraction": "0"},
    {"pipeline.iterations": "0"}, {"merge.weights": "1,1,1"}, {"merge.density": "2"},
    {"backend.kind": "llava"}, {"judge.provider": "gpt"}, {"pipeline.lineage": "odd"},
    {"pipeline.bogus": "1"}, {"nodot": "1"}, {"score.length_normalize": "maybe"},
])
def test_config_errors(tmp_path, over):
    p = tmp_path / "c.ini"
    p.write_text(default_ini())
    with pytest.raises(ConfigError):
        load_config(p, over, env={})


def test_missing_config_and_manifest(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini", env={})
    with pytest.raises(ConfigError):
        load_config(None, {}, env={})
    write_toy_workspace(tmp_path)
    with pytest.raises(ConfigError, match="features"):
        Pipeline(PipelineConfig(manifest=str(tmp_path / "manifest.jsonl")))


def test_plan_lists_every_stage(tmp_path):
    cfg = load_config(write_toy_workspace(tmp_path), {"pipeline.iterations": "3"}, env={})
    steps = Pipeline(cfg).plan()
    assert steps[0].startswith("zero-shot")
    assert sum("TIES merge" in s for s in steps) == 2
    assert any("lr 0.0064" in s for s in steps)


def test_crossfit_is_out_of_fold():
    import numpy as np

    rng = np.random.default_rng(0)
    P = rng.dirichlet(np.ones(10), size=50)
    y = rng.normal(size=50)
    pred = crossfit_decode(P, y, 5)
    y2 = y.copy()
    y2[0] += 100.0  # row 0 is in fold 0; its own prediction must not move
    assert crossfit_decode(P, y2, 5)[0] == pred[0]
    assert crossfit_decode(P, y2, 5)[1] != pred[1]


def test_format_table():
    text = format_table([{"row": "a", "plcc": 0.5, "srcc": None, "n": 3}])
    lines = text.splitlines()
    assert lines[0].split()[:3] == ["row", "plcc", "srcc"]
    assert "0.5000" in lines[2] and "-" in lines[2]
