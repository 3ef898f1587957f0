# %% [markdown]
# # Self-generated preference pairs on the toy backend
#
# The toy backend treats an image as a small feature vector. Its score head
# reads the features; its text head writes an explanation whose wording tier
# tracks the conditioned score. A score pair prefers the response conditioned
# on the true bin over one conditioned on a bin at least three away. A
# consistency pair keeps the true score head on both sides and swaps in the
# mismatched explanation.

# %%
import tempfile
from pathlib import Path

import numpy as np

from selfscore.backend import ToyVLM, ToyWeights, make_toy_task
from selfscore.codec import fit_binning
from selfscore.ingest import split_filter
from selfscore.preference import build_dataset, load_pairs

manifest, task = make_toy_task(n=200, seed=0)
train = split_filter(manifest, "train")
scheme = fit_binning([r.raw_score for r in train])
base = ToyVLM(ToyWeights.random(0, task.direction), task.features)
print(len(train), "training images")

# %%
out = Path(tempfile.mkdtemp())
stats = build_dataset(base, train, scheme, np.random.default_rng(0), 0.25, out / "score.jsonl",
                      out / "consistency.jsonl", consistency_fraction=0.3)
print(stats)
header, score = load_pairs(out / "score.jsonl")
_, cons = load_pairs(out / "consistency.jsonl")
print(header)

# %%
c = cons[0]
p = next(x for x in score if x.image_id == c.image_id)
print("gt bin", p.gt_bin, "rejected bin", p.rejected_bin)
print("chosen:  ", p.chosen)
print("rejected:", p.rejected)
print("consistency chosen:  ", c.chosen)
print("consistency rejected:", c.rejected)

# %%
dist = np.array([abs(x.rejected_bin - x.gt_bin) for x in score])
print("distance histogram:", np.bincount(dist, minlength=10))
