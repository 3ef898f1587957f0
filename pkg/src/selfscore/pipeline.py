"""Iterative self-improvement loop: generate pairs, train specialists, merge, evaluate.

Output tree::

    <out>/binning.json
    <out>/zero-shot/{eval/, metrics.json}
    <out>/ite-<k>/data/{score.jsonl, consistency.jsonl}
    <out>/ite-<k>/delta-score/            (plus delta-consistency/, delta-merged/ from k = 2)
    <out>/ite-<k>/eval/                   fitted decoders and prediction dumps
    <out>/ite-<k>/{metrics.json, state.json}
    <out>/report.json, <out>/report.txt

Every stage directory carries ``stage.json`` with the stage inputs and the
sha256 of every file it produced. A rerun skips a stage whose record still
matches, which makes interrupted runs resumable with identical results.
"""

from __future__ import annotations

import configparser
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ._util import child_rng, sha256_file, write_json
from .backend.base import AdapterSpec, GenerationParams, NamedDelta, load_delta
from .codec import BinningScheme, decode_expected, fit_binning, fit_reference_values
from .dpo import TrainConfig, save_checkpoint, train_adapter
from .errors import ConfigError, FormatError
from .evaluation import (PredictionRecord, judge_batch, metrics_report, plcc, predict_distributions,
                         rmse, srcc, write_predictions)
from .ingest import load_manifest, split_filter
from .merging import MergeConfig, merge_archives
from .preference import build_dataset
from .prompting import parse_response, render_scoring_prompt

logger = logging.getLogger(__name__)

STAGE_FILE = "stage.json"
LINEAGES = ("cumulative", "fresh")
MERGE_BASES = ("cumulative", "increment")
JUDGES = ("none", "toy", "stub")


# configuration ----------------------------------------------------------------

@dataclass
class PipelineConfig:
    manifest: str
    features: str | None = None
    backend: str = "toy"
    backend_seed: int = 0
    adapter: AdapterSpec = field(default_factory=AdapterSpec)
    score_train: TrainConfig = field(default_factory=TrainConfig)
    consistency_train: TrainConfig = field(default_factory=TrainConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    merge_basis: str = "cumulative"
    lineage: str = "cumulative"
    score_fraction: float = 0.25
    consistency_fraction_of_score: float = 0.30
    min_distance: int = 3
    iterations: int = 4
    out: str = "out"
    seed: int = 0
    judge: str = "none"
    judge_sample_cap: int = 1000
    eval_folds: int = 5
    max_new_tokens: int = 256
    max_retries: int = 1

    def __post_init__(self):
        for name in ("score_fraction", "consistency_fraction_of_score"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        if self.iterations < 1:
            raise ConfigError("iterations must be at least 1")
        if not 1 <= self.min_distance <= 9:
            raise ConfigError("min_distance must lie in 1..9")
        if self.lineage not in LINEAGES:
            raise ConfigError(f"lineage must be one of {LINEAGES}")
        if self.merge_basis not in MERGE_BASES:
            raise ConfigError(f"merge basis must be one of {MERGE_BASES}")
        if self.judge not in JUDGES:
            raise ConfigError(f"judge must be one of {JUDGES}")
        if self.backend != "toy":
            raise ConfigError(f"unknown backend {self.backend!r}; only 'toy' ships with the package")
        if self.eval_folds < 2:
            raise ConfigError("eval_folds must be at least 2")

    @property
    def out_path(self) -> Path:
        return Path(self.out)


_TRAIN_KEYS = {"beta": float, "lr": float, "batch_size": int, "epochs": int,
               "lr_decay_per_iteration": float, "mode": str, "seed": int, "length_normalize": bool}
_PIPELINE_KEYS = {"score_fraction": float, "consistency_fraction_of_score": float, "min_distance": int,
                  "iterations": int, "out": str, "seed": int, "lineage": str, "eval_folds": int,
                  "max_new_tokens": int, "max_retries": int}


def _convert(kind, raw: str, key: str):
    try:
        if kind is bool:
            v = raw.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def _floats(raw: str, key: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"bad list for {key}: {raw!r}") from exc


def default_ini() -> str:
    """Config text with the published defaults filled in."""
    return config_to_ini(PipelineConfig(manifest="data/manifest.jsonl"))


def config_to_ini(cfg: PipelineConfig) -> str:
    cp = configparser.ConfigParser()
    cp["data"] = {"manifest": cfg.manifest, "features": cfg.features or ""}
    cp["backend"] = {"kind": cfg.backend, "seed": str(cfg.backend_seed)}
    cp["adapter"] = {"rank": str(cfg.adapter.rank), "target_scope": cfg.adapter.target_scope}
    for section, tc in (("score", cfg.score_train), ("consistency", cfg.consistency_train)):
        cp[section] = {k: str(v).lower() if isinstance(v, bool) else str(v) for k, v in asdict(tc).items()}
    cp["merge"] = {"weights": ",".join(str(w) for w in cfg.merge.weights), "density": str(cfg.merge.density),
                   "sign_method": cfg.merge.sign_method, "basis": cfg.merge_basis}
    cp["judge"] = {"provider": cfg.judge, "sample_cap": str(cfg.judge_sample_cap)}
    cp["pipeline"] = {k: str(getattr(cfg, k)) for k in _PIPELINE_KEYS}
    lines = []
    for section in cp.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in cp[section].items())
        lines.append("")
    return "\n".join(lines)


def load_config(path=None, overrides: dict | None = None, env=None) -> PipelineConfig:
    """Read an INI config; ``overrides`` maps ``section.key`` to raw strings.

    ``SELFSCORE_OUT`` in the environment replaces the output root unless an
    explicit override is given.
    """
    env = os.environ if env is None else env
    cp = configparser.ConfigParser()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            cp.read(p, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
        base_dir = p.parent
    else:
        base_dir = Path(".")
    overrides = dict(overrides or {})
    if "SELFSCORE_OUT" in env and "pipeline.out" not in overrides:
        overrides["pipeline.out"] = env["SELFSCORE_OUT"]
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        if not cp.has_section(section):
            cp.add_section(section)
        cp[section][key] = str(value)

    def get(section, key, default=None):
        return cp[section][key] if cp.has_section(section) and key in cp[section] else default

    manifest = get("data", "manifest")
    if not manifest:
        raise ConfigError("data.manifest is required")
    features = get("data", "features") or None

    def resolve(v):
        if v is None or Path(v).is_absolute() or path is None:
            return v
        return str(base_dir / v)

    def train_section(name):
        kw = {}
        if cp.has_section(name):
            for k, raw in cp[name].items():
                if k not in _TRAIN_KEYS:
                    raise ConfigError(f"unknown key {name}.{k}")
                kw[k] = _convert(_TRAIN_KEYS[k], raw, f"{name}.{k}")
        try:
            return TrainConfig(**kw)
        except ValueError as exc:
            raise ConfigError(f"[{name}]: {exc}") from exc

    try:
        adapter = AdapterSpec(rank=_convert(int, get("adapter", "rank", "64"), "adapter.rank"),
                              target_scope=get("adapter", "target_scope", "all-linear"))
        merge = MergeConfig(weights=_floats(get("merge", "weights", "1,1"), "merge.weights"),
                            density=_convert(float, get("merge", "density", "0.5"), "merge.density"),
                            sign_method=get("merge", "sign_method", "frequency"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if len(merge.weights) != 2:
        raise ConfigError("merge.weights needs one weight per specialist (2)")

    kw = {}
    if cp.has_section("pipeline"):
        for k, raw in cp["pipeline"].items():
            if k not in _PIPELINE_KEYS:
                raise ConfigError(f"unknown key pipeline.{k}")
            kw[k] = _convert(_PIPELINE_KEYS[k], raw, f"pipeline.{k}")
    out = kw.pop("out", "out")
    out = out if "pipeline.out" in overrides else resolve(out)
    return PipelineConfig(
        manifest=resolve(manifest), features=resolve(features),
        backend=get("backend", "kind", "toy"),
        backend_seed=_convert(int, get("backend", "seed", "0"), "backend.seed"),
        adapter=adapter, score_train=train_section("score"), consistency_train=train_section("consistency"),
        merge=merge, merge_basis=get("merge", "basis", "cumulative"),
        judge=get("judge", "provider", "none"),
        judge_sample_cap=_convert(int, get("judge", "sample_cap", "1000"), "judge.sample_cap"),
        out=out, **kw)


# backend construction -----------------------------------------------------------

def build_backend(cfg: PipelineConfig):
    from .backend.toy import ToyVLM, ToyWeights, load_features

    if not cfg.features:
        raise ConfigError("the toy backend needs data.features")
    if not Path(cfg.features).is_file():
        raise ConfigError(f"features file not found: {cfg.features}")
    feats, extra = load_features(cfg.features)
    direction = extra.get("direction")
    weights = ToyWeights.random(cfg.backend_seed, direction)
    return ToyVLM(weights, feats)


def build_judge(cfg: PipelineConfig):
    if cfg.judge == "toy":
        from .backend.toy import ToyJudge
        return ToyJudge()
    if cfg.judge == "stub":
        from .evaluation import StubProvider
        return StubProvider()
    return None


# state ------------------------------------------------------------------------------

@dataclass
class IterationState:
    """Artifacts of one finished iteration, as paths relative to the output root."""

    iteration: int
    current_delta: str | None
    current_checksum: str | None
    datasets: dict = field(default_factory=dict)
    deltas: dict = field(default_factory=dict)
    merged: str | None = None
    metrics: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.iteration < 1:
            raise ValueError("iterations are 1-based")
        if self.iteration == 1 and ("consistency" in self.deltas or "consistency" in self.datasets):
            raise ValueError("iteration 1 has no consistency training")

    def to_dict(self) -> dict:
        return asdict(self)

    def verify(self, root) -> None:
        """Check that every referenced archive exists and matches its checksum."""
        root = Path(root)
        for rel in [*self.datasets.values(), *self.deltas.values(), self.merged, self.current_delta]:
            if rel is None:
                continue
            if not (root / rel).exists():
                raise FileNotFoundError(root / rel)
        if self.current_delta is not None:
            got = load_delta(root / self.current_delta).checksum()
            if got != self.current_checksum:
                raise ValueError(f"checksum mismatch for {self.current_delta}")


def load_state(path) -> IterationState:
    return IterationState(**json.loads(Path(path).read_text()))


# stage bookkeeping ----------------------------------------------------------------

def _file_hashes(directory: Path) -> dict[str, str]:
    return {str(p.relative_to(directory)): sha256_file(p)
            for p in sorted(directory.rglob("*")) if p.is_file() and p.name != STAGE_FILE}


def stage_done(directory, inputs: dict) -> bool:
    directory = Path(directory)
    rec = directory / STAGE_FILE
    if not rec.is_file():
        return False
    doc = json.loads(rec.read_text())
    return doc.get("inputs") == _jsonable(inputs) and doc.get("outputs") == _file_hashes(directory)


def mark_done(directory, inputs: dict) -> None:
    directory = Path(directory)
    write_json(directory / STAGE_FILE, {"inputs": _jsonable(inputs), "outputs": _file_hashes(directory)})


def _jsonable(obj):
    return json.loads(json.dumps(obj, sort_keys=True))


def _derived_seed(seed: int, *keys) -> int:
    return int(child_rng(seed, *keys).integers(2 ** 31))


# evaluation inside the loop -----------------------------------------------------------

def crossfit_decode(P: np.ndarray, y: np.ndarray, folds: int) -> np.ndarray:
    """Out-of-fold predictions: each fold is decoded with s_bar fitted on the others."""
    n = len(y)
    fold = np.arange(n) % folds
    pred = np.empty(n)
    for f in range(folds):
        ref = fit_reference_values(P[fold != f], y[fold != f])
        pred[fold == f] = decode_expected(P[fold == f], ref)
    return pred


def validation_report(handle, records, out_dir, tag: str, cfg: PipelineConfig, judge=None) -> dict:
    """Fit s_bar on the split, report cross-fitted metrics and optional judge means."""
    out_dir = Path(out_dir)
    P = predict_distributions(handle, records)
    y = np.array([r.raw_score for r in records])
    ref = fit_reference_values(P, y)
    write_json(out_dir / f"decoder-{tag}.json", {"s_bar": list(ref.s_bar)})
    pred = crossfit_decode(P, y, cfg.eval_folds)
    params = GenerationParams(max_new_tokens=cfg.max_new_tokens)
    prompt = render_scoring_prompt()
    preds = []
    for r, p, raw in zip(records, P, pred):
        bin_, text = int(np.argmax(p)), ""
        try:
            parsed = parse_response(handle.generate(r.image_uri, prompt, params))
            bin_, text = parsed.score_bin, parsed.explanation
        except FormatError:
            pass
        preds.append(PredictionRecord(r.image_id, bin_, float(raw), float(r.raw_score), text))
    write_predictions(out_dir / f"predictions-{tag}.jsonl", preds)
    scoring = {"plcc": plcc(pred, y), "srcc": srcc(pred, y), "rmse": rmse(pred, y), "n": len(preds)}
    summary = judge_batch(judge, preds, cfg.judge_sample_cap, seed=cfg.seed) if judge else None
    return metrics_report(scoring, summary)


# the loop -----------------------------------------------------------------------------

class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = cfg.out_path
        self.manifest = load_manifest(cfg.manifest)
        self.train = split_filter(self.manifest, "train")
        self.val = split_filter(self.manifest, "val")
        if not self.train or not self.val:
            raise ConfigError("the manifest needs non-empty train and val splits")
        self.scheme: BinningScheme = fit_binning([r.raw_score for r in self.train])
        self.base = build_backend(cfg)
        self.judge = build_judge(cfg)
        self.manifest_sha = sha256_file(cfg.manifest)

    def plan(self) -> list[str]:
        steps = ["zero-shot: evaluate base on val"]
        for k in range(1, self.cfg.iterations + 1):
            steps.append(f"ite-{k}: generate pairs with the ite-{k - 1} model"
                         + (" (base)" if k == 1 else ""))
            steps.append(f"ite-{k}: train score specialist, lr {self.cfg.score_train.for_iteration(k).lr:g}")
            if k >= 2:
                steps.append(f"ite-{k}: train consistency specialist, "
                             f"lr {self.cfg.consistency_train.for_iteration(k).lr:g}")
                steps.append(f"ite-{k}: TIES merge (density {self.cfg.merge.density:g})")
            steps.append(f"ite-{k}: evaluate on val")
        return steps

    def _write_binning(self) -> None:
        s = self.scheme
        write_json(self.root / "binning.json", {"cuts": list(s.cuts), "lo": s.lo, "hi": s.hi})

    def _load(self, rel: str | None) -> NamedDelta | None:
        return None if rel is None else load_delta(self.root / rel)

    def zero_shot(self) -> dict:
        d = self.root / "zero-shot"
        inputs = {"manifest": self.manifest_sha, "base": self.base.weights.base_id,
                  "judge": self.cfg.judge, "folds": self.cfg.eval_folds}
        if not stage_done(d, inputs):
            report = validation_report(self.base, self.val, d / "eval", "base", self.cfg, self.judge)
            write_json(d / "metrics.json", report)
            mark_done(d, inputs)
        return json.loads((d / "metrics.json").read_text())

    def _train(self, k: int, kind: str, data_rel: str, init_rel: str | None, init_checksum) -> str:
        cfg = self.cfg
        base_tc = cfg.score_train if kind == "score" else cfg.consistency_train
        tc = replace(base_tc.for_iteration(k), seed=_derived_seed(cfg.seed, "train", k, kind))
        rel = f"ite-{k}/delta-{kind}"
        d = self.root / rel
        init = init_rel if cfg.lineage == "cumulative" else None
        inputs = {"data": sha256_file(self.root / data_rel), "init": init_checksum if init else None,
                  "train": asdict(tc), "adapter": cfg.adapter.to_dict(), "base": self.base.weights.base_id}
        if not stage_done(d, inputs):
            delta, report = train_adapter(self.base, self.root / data_rel, cfg.adapter, tc,
                                          init_delta=self._load(init), iteration=k, specialist=kind)
            save_checkpoint(d, delta, tc, report)
            mark_done(d, inputs)
        return rel

    def _merge(self, k: int, score_rel: str, cons_rel: str, prev_rel: str | None) -> str:
        cfg = self.cfg
        rel = f"ite-{k}/delta-merged"
        d = self.root / rel
        inputs = {"score": sha256_file(self.root / score_rel / "manifest.json"),
                  "consistency": sha256_file(self.root / cons_rel / "manifest.json"),
                  "config": cfg.merge.to_dict(), "basis": cfg.merge_basis,
                  "previous": prev_rel if cfg.merge_basis == "increment" else None}
        if not stage_done(d, inputs):
            if cfg.merge_basis == "cumulative" or prev_rel is None or cfg.lineage == "fresh":
                merge_archives([self.root / score_rel, self.root / cons_rel], d, cfg.merge, relative_to=self.root)
            else:
                self._merge_increments(d, score_rel, cons_rel, prev_rel)
            mark_done(d, inputs)
        return rel

    def _merge_increments(self, d: Path, score_rel, cons_rel, prev_rel) -> None:
        from .backend.base import save_delta
        from .merging import ties_merge

        prev = self._load(prev_rel)
        parts = [self._load(score_rel), self._load(cons_rel)]
        incs = [NamedDelta({k: v.entries[k] - prev.entries[k] for k in prev.entries}) for v in parts]
        merged = ties_merge(incs, self.cfg.merge)
        merged = NamedDelta({k: prev.entries[k] + merged.entries[k] for k in prev.entries},
                            {**merged.metadata, "basis": "increment", "previous": prev.checksum()})
        save_delta(merged, d)
        write_json(d / "merge_manifest.json", {
            "config": self.cfg.merge.to_dict(), "basis": "increment",
            "inputs": [{"path": p, "checksum": self._load(p).checksum()}
                       for p in (score_rel, cons_rel, prev_rel)],
            "output_checksum": merged.checksum()})

    def _generate(self, k: int, prev: IterationState | None) -> dict:
        cfg = self.cfg
        d = self.root / f"ite-{k}" / "data"
        cur_rel = prev.current_delta if prev else None
        generator = prev.current_checksum if prev else None
        inputs = {"manifest": self.manifest_sha, "generator": generator, "base": self.base.weights.base_id,
                  "score_fraction": cfg.score_fraction, "min_distance": cfg.min_distance,
                  "consistency_fraction": cfg.consistency_fraction_of_score if k >= 2 else None,
                  "seed": cfg.seed}
        datasets = {"score": f"ite-{k}/data/score.jsonl"}
        if k >= 2:
            datasets["consistency"] = f"ite-{k}/data/consistency.jsonl"
        if not stage_done(d, inputs):
            handle = self.base.apply_delta(self._load(cur_rel))
            stats = build_dataset(
                handle, self.train, self.scheme, child_rng(cfg.seed, "generate", k), cfg.score_fraction,
                self.root / datasets["score"],
                consistency_path=self.root / datasets["consistency"] if k >= 2 else None,
                consistency_fraction=cfg.consistency_fraction_of_score, min_distance=cfg.min_distance,
                params=GenerationParams(max_new_tokens=cfg.max_new_tokens), max_retries=cfg.max_retries,
                generator_id=generator or f"base:{self.base.weights.base_id}")
            write_json(d / "stats.json", asdict(stats))
            mark_done(d, inputs)
        return datasets

    def _evaluate(self, k: int, rows: dict[str, str]) -> dict:
        d = self.root / f"ite-{k}" / "eval"
        inputs = {name: sha256_file(self.root / rel / "manifest.json") for name, rel in rows.items()}
        inputs.update(judge=self.cfg.judge, folds=self.cfg.eval_folds)
        if not stage_done(d, inputs):
            metrics = {}
            for name, rel in rows.items():
                handle = self.base.apply_delta(self._load(rel))
                metrics[name] = validation_report(handle, self.val, d, name, self.cfg, self.judge)
            write_json(d / "metrics.json", metrics)
            mark_done(d, inputs)
        metrics = json.loads((d / "metrics.json").read_text())
        write_json(self.root / f"ite-{k}" / "metrics.json", metrics)
        return metrics

    def run_iteration(self, prev: IterationState | None) -> IterationState:
        k = 1 if prev is None else prev.iteration + 1
        if prev is not None:
            prev.verify(self.root)
        logger.info("iteration %d", k)
        datasets = self._generate(k, prev)
        cur_rel = prev.current_delta if prev else None
        cur_sum = prev.current_checksum if prev else None
        deltas = {"score": self._train(k, "score", datasets["score"], cur_rel, cur_sum)}
        merged = None
        rows = {"score": deltas["score"]}
        if k >= 2:
            deltas["consistency"] = self._train(k, "consistency", datasets["consistency"], cur_rel, cur_sum)
            merged = self._merge(k, deltas["score"], deltas["consistency"], cur_rel)
            rows.update(consistency=deltas["consistency"], merged=merged)
        metrics = self._evaluate(k, rows)
        new_rel = merged or deltas["score"]
        state = IterationState(
            iteration=k, current_delta=new_rel,
            current_checksum=self._load(new_rel).checksum(), datasets=datasets, deltas=deltas,
            merged=merged, metrics=metrics,
            seeds={"generate": f"child_rng({self.cfg.seed}, 'generate', {k})",
                   **{s: _derived_seed(self.cfg.seed, "train", k, s) for s in deltas}})
        write_json(self.root / f"ite-{k}" / "state.json", state.to_dict())
        return state

    def run_full(self) -> tuple[IterationState, list[dict]]:
        self.root.mkdir(parents=True, exist_ok=True)
        self._write_binning()
        (self.root / "config.ini").write_text(config_to_ini(self.cfg), encoding="utf-8")
        rows = [{"row": "zero-shot", **self.zero_shot()}]
        state = None
        for _ in range(self.cfg.iterations):
            state = self.run_iteration(state)
            k = state.iteration
            for name in ("score", "consistency", "merged"):
                if name in state.metrics:
                    rows.append({"row": f"ite-{k} {name}", **state.metrics[name]})
        write_json(self.root / "report.json", {"rows": rows})
        (self.root / "report.txt").write_text(format_table(rows), encoding="utf-8")
        return state, rows


def run_iteration(state: IterationState | None, config: PipelineConfig) -> IterationState:
    return Pipeline(config).run_iteration(state)


def run_full(config: PipelineConfig) -> tuple[IterationState, list[dict]]:
    return Pipeline(config).run_full()


def format_table(rows: list[dict]) -> str:
    cols = ["row", "plcc", "srcc", "rmse", "cons", "use", "gen", "n", "judge_failures"]

    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    table = [cols] + [[cell(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(line[i]) for line in table) for i in range(len(cols))]
    lines = []
    for j, line in enumerate(table):
        parts = [line[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(line[1:], widths[1:])]
        lines.append("  ".join(parts).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# toy workspace --------------------------------------------------------------------------

TOY_OVERRIDES = {
    "adapter.rank": "4",
    "score.lr": "0.01", "score.batch_size": "16", "score.epochs": "10", "score.beta": "1.0",
    "consistency.lr": "0.01", "consistency.batch_size": "16", "consistency.epochs": "10",
    "consistency.beta": "1.0",
    "pipeline.score_fraction": "1.0", "pipeline.iterations": "2",
    "judge.provider": "toy",
}


def write_toy_workspace(directory, n: int = 200, seed: int = 0, iterations: int = 2) -> Path:
    """Write ``manifest.jsonl``, ``features.npz`` and ``toy.cfg`` for the synthetic task.

    Returns the config path. The toy hyperparameters are scaled to a tiny
    CPU problem and differ from the published large-model settings.
    """
    from .backend.toy import make_toy_task, save_features
    from .ingest import save_manifest

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest, task = make_toy_task(n=n, seed=seed)
    save_manifest(manifest, directory / "manifest.jsonl")
    save_features(directory / "features.npz", task.features, direction=task.direction)
    overrides = dict(TOY_OVERRIDES)
    overrides.update({"data.manifest": "manifest.jsonl", "data.features": "features.npz",
                      "pipeline.iterations": str(iterations), "pipeline.seed": str(seed),
                      "backend.seed": str(seed), "pipeline.out": "out"})
    cfg = load_config(None, overrides, env={})
    cfg_path = directory / "toy.cfg"
    cfg_path.write_text(config_to_ini(cfg), encoding="utf-8")
    return cfg_path
