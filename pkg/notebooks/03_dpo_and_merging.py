# %% [markdown]
# # DPO training of a low-rank adapter, then TIES merging
#
# Two specialists are trained from the same parent: one on score pairs and one
# on consistency pairs. Their deltas are merged by trimming each to its
# largest entries, electing a sign per entry, and averaging the agreeing
# contributions.

# %%
import math
import tempfile
from pathlib import Path

import numpy as np

from selfscore.backend import AdapterSpec, NamedDelta, ToyVLM, ToyWeights, make_toy_task
from selfscore.codec import fit_binning
from selfscore.dpo import TrainConfig, dpo_loss, train_adapter
from selfscore.evaluation import predict_distributions, srcc
from selfscore.ingest import split_filter
from selfscore.merging import MergeConfig, ties_merge
from selfscore.preference import build_dataset, load_pairs

manifest, task = make_toy_task(n=200, seed=0)
train = split_filter(manifest, "train")
scheme = fit_binning([r.raw_score for r in train])
base = ToyVLM(ToyWeights.random(0, task.direction), task.features)
out = Path(tempfile.mkdtemp())
build_dataset(base, train, scheme, np.random.default_rng(0), 1.0, out / "score.jsonl", out / "consistency.jsonl")
_, score_pairs = load_pairs(out / "score.jsonl")
_, cons_pairs = load_pairs(out / "consistency.jsonl")

# %% [markdown]
# With a zero-initialized adapter the policy equals the reference, so every
# margin is zero and every loss is ln 2.

# %%
print(dpo_loss(-3.0, -5.0, -3.0, -5.0, 0.1)[0], math.log(2))
cfg = TrainConfig(beta=1.0, lr=0.01, batch_size=16, epochs=10)
score_delta, report = train_adapter(base, score_pairs, AdapterSpec(4), cfg)
print(f"initial loss {np.mean(report.initial_losses):.4f}  final {report.final_mean_loss:.4f}  "
      f"pair accuracy {report.pair_accuracy:.3f}")
cons_delta, cons_report = train_adapter(base, cons_pairs, AdapterSpec(4), cfg)
print(f"consistency specialist final loss {cons_report.final_mean_loss:.4f}")

# %%
def val_srcc(handle, records):
    expected = predict_distributions(handle, records) @ np.arange(10.0)
    return srcc(expected, [r.raw_score for r in records])


val = split_filter(manifest, "val")
merged = ties_merge([score_delta, cons_delta], MergeConfig())
for name, delta in (("base", None), ("score", score_delta), ("consistency", cons_delta), ("merged", merged)):
    h = base if delta is None else base.apply_delta(delta)
    print(f"{name:>11}: val SRCC {val_srcc(h, val):.3f}")

# %% [markdown]
# The merge on a four-entry example.

# %%
a = NamedDelta({"w": np.array([2.0, -3.0, 1.0, 0.5])})
b = NamedDelta({"w": np.array([1.5, -1.0, -4.0, 0.2])})
print(ties_merge([a, b]).entries["w"])
