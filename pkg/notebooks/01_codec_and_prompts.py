# %% [markdown]
# # Score codec and prompts
#
# Raw scores are mapped to ten equal-count bins fit on the training split. A
# model's distribution over the ten score tokens is decoded back to a scalar
# as an expectation over per-bin reference values.

# %%
import numpy as np

from selfscore.codec import (decode_expected, encode_many, fit_binning, fit_reference_values,
                             softmax_scores)
from selfscore.prompting import parse_response, render_conditioned_prefix, render_scoring_prompt

rng = np.random.default_rng(0)
train = rng.normal(5.4, 0.7, size=2000)
scheme = fit_binning(train)
print("cut points:", np.round(scheme.cuts, 3))
print("bin counts:", np.bincount(encode_many(scheme, train), minlength=10))

# %% [markdown]
# Decoding with bin midpoints versus reference values fit by least squares on
# held-out data. The fit can only lower the squared error on the data it sees.

# %%
val = rng.normal(5.4, 0.7, size=300)
bins = encode_many(scheme, val)
logits = -((np.arange(10)[None, :] - bins[:, None]) ** 2) / 2.0 + rng.normal(0, 0.7, size=(300, 10))
P = softmax_scores(logits)
mid = decode_expected(P, scheme.midpoints())
ref = fit_reference_values(P, val)
fitted = decode_expected(P, ref)
for name, pred in (("midpoints", mid), ("fitted", fitted)):
    print(f"{name:>9}: rmse {np.sqrt(np.mean((pred - val) ** 2)):.4f}")
print("uniform distribution decodes to", decode_expected(softmax_scores(np.zeros(10)), np.arange(10.0)))

# %% [markdown]
# The scoring prompt, a score-conditioned prefix, and response parsing.

# %%
print(render_scoring_prompt())
print(repr(render_conditioned_prefix(7)))
print(parse_response("#Score: 7\n#Explain: Balanced light and a clear subject."))
