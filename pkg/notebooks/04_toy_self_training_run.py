# %% [markdown]
# # A two-iteration self-training run
#
# The pipeline evaluates the base model, then per iteration generates pairs
# with the previous model, trains a score specialist, and from iteration 2 on
# also trains a consistency specialist and merges the two. Every stage writes
# a record of its inputs and output hashes, so a rerun skips finished work.

# %%
import json
import tempfile
from pathlib import Path

from selfscore.evaluation import StubProvider, judge_batch, read_predictions
from selfscore.pipeline import Pipeline, format_table, load_config, run_full, write_toy_workspace

ws = Path(tempfile.mkdtemp())
cfg = load_config(write_toy_workspace(ws), {"pipeline.iterations": "2"}, env={})
print("\n".join(Pipeline(cfg).plan()))

# %%
state, rows = run_full(cfg)
print(format_table(rows))

# %%
print(sorted(str(p.relative_to(cfg.out_path)) for p in (cfg.out_path / "ite-2").rglob("*.json")))
print(json.dumps(json.loads((cfg.out_path / "ite-2/delta-merged/merge_manifest.json").read_text()), indent=1))

# %% [markdown]
# Explanation quality is rated by an external judge model. The stub provider
# always returns the same verdict, which is handy for checking the harness.

# %%
preds = read_predictions(next((cfg.out_path / "ite-2").rglob("predictions*.jsonl")))
summary = judge_batch(StubProvider(), preds, sample_cap=1000)
print(summary.n, summary.means())

# %% [markdown]
# Rerunning the same configuration finds every stage complete.

# %%
_, rows_again = run_full(cfg)
print(rows_again == rows)
