"""Deterministic, trainable toy scoring model for desk-scale runs.

An "image" is a feature vector of dimension ``d`` (``FEATURE_DIM`` by
default). The model has three linear maps, all adapter targets:

``score_head.weight`` (10 x d+1)
    affine map from features (plus a constant 1) to the ten score-token logits.
``text_head.tier.weight`` (4 x 4)
    maps the sentiment tier of the score currently in context to tier weights.
``text_head.feature.weight`` (4 x d)
    maps image features to tier weights.

Explanations are drawn from four fixed templates, one per sentiment tier
(bins 0-2, 3-4, 5-6, 7-9). At explanation position ``k`` the categorical
over the vocabulary puts logit ``w[t]`` on tier ``t``'s ``k``-th template word,
0 on ``<unk>`` (any out-of-vocabulary text) and ``-FORCE`` on everything
else, so every log-probability has a closed form. Structural positions
(the tags, end of text) are forced the same way.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping

import numpy as np

from .._util import child_rng
from ..errors import (
    BackendFailure,
    ContextOverflow,
    NoAdapterAttached,
    ShapeMismatch,
    TokenizationError,
)
from ..prompting import render_scoring_prompt
from .base import AdapterSpec, GenerationParams, NamedDelta, check_same_schema

FEATURE_DIM = 4
N_TIERS = 4
FORCE = 20.0

TIER_TEMPLATES = (
    "Blurry subject amid harsh muddy clutter.",
    "Plain framing with flat dull lighting.",
    "Pleasant colors, decent but ordinary composition.",
    "Striking balance, luminous tones, superb focus.",
)

EOS, UNK, SCORE_TAG, EXPLAIN_TAG = 0, 1, 2, 3
DIGIT0 = 4
_TOKEN = re.compile(r"\s*(#score:|#explain:|[^\s#]+|#)", re.IGNORECASE)


def tier_of_bin(bin: int) -> int:
    if not 0 <= bin <= 9:
        raise ValueError(f"bin {bin} outside 0..9")
    return 0 if bin <= 2 else 1 if bin <= 4 else 2 if bin <= 6 else 3


def tier_of_text(text: str) -> int | None:
    """Which template an explanation was drawn from (majority of matching words)."""
    words = [m.group(1) for m in _TOKEN.finditer(text)]
    hits = [sum(w in _TEMPLATE_WORDS[t] for w in words) for t in range(N_TIERS)]
    best = max(hits)
    if best == 0 or hits.count(best) > 1:
        return None
    return hits.index(best)


_TEMPLATE_WORDS = tuple(tuple(m.group(1) for m in _TOKEN.finditer(t)) for t in TIER_TEMPLATES)
TEMPLATE_LEN = len(_TEMPLATE_WORDS[0])
assert all(len(w) == TEMPLATE_LEN for w in _TEMPLATE_WORDS)


class ToyTokenizer:
    """Word-level tokenizer; tags and bare digits are single tokens.

    ``single_token_digits=False`` models a tokenizer whose score digits are
    not single tokens; score-logit reads then fail loudly.
    """

    def __init__(self, single_token_digits: bool = True):
        self.single_token_digits = single_token_digits
        self.vocab = ["<eos>", "<unk>", "#Score:", "#Explain:"] + [str(d) for d in range(10)]
        for words in _TEMPLATE_WORDS:
            self.vocab.extend(words)
        self.ids = {tok: i for i, tok in enumerate(self.vocab)}
        self.template_ids = np.array([[self.ids[w] for w in words] for words in _TEMPLATE_WORDS])
        self.size = len(self.vocab)
        self._encode = lru_cache(maxsize=8192)(self._encode_uncached)

    def _encode_uncached(self, text: str) -> tuple[int, ...]:
        out = []
        for m in _TOKEN.finditer(text):
            tok = m.group(1)
            low = tok.lower()
            if low == "#score:":
                out.append(SCORE_TAG)
            elif low == "#explain:":
                out.append(EXPLAIN_TAG)
            else:
                out.append(self.ids.get(tok, UNK))
        return tuple(out)

    def encode(self, text: str) -> tuple[int, ...]:
        return self._encode(text)

    def render(self, token_id: int) -> str:
        if token_id in (SCORE_TAG, EXPLAIN_TAG):
            return "\n" + self.vocab[token_id]
        if token_id == EOS:
            return ""
        return " " + self.vocab[token_id]


# Decoding state: (last_tag, tokens_since_tag, digit_after_score_tag)
_START = (None, 0, None)


def _advance(state, tok: int):
    last, n, digit = state
    if tok == SCORE_TAG:
        return ("score", 0, None)
    if tok == EXPLAIN_TAG:
        return ("explain", 0, digit if last == "score" else None)
    if last == "score" and n == 0:
        digit = tok - DIGIT0 if DIGIT0 <= tok < DIGIT0 + 10 else None
    return (last, n + 1, digit)


def _phase(state):
    """('forced', id) | ('score',) | ('text', k, tier or None)."""
    last, n, digit = state
    if last is None:
        return ("forced", SCORE_TAG)
    if last == "score":
        return ("score",) if n == 0 else ("forced", EXPLAIN_TAG)
    if n >= TEMPLATE_LEN:
        return ("forced", EOS)
    return ("text", n, None if digit is None else tier_of_bin(digit))


@dataclass
class ToyWeights:
    """Immutable base weights shared by every handle of one toy model."""

    params: dict[str, np.ndarray]

    def __post_init__(self):
        for v in self.params.values():
            v.setflags(write=False)
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k], dtype="<f8").tobytes())
        self.base_id = "toy-" + h.hexdigest()[:16]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.params.items()}

    @classmethod
    def random(cls, seed: int = 0, direction=None, score_scale: float = 0.3,
               feature_scale: float = 0.3, tier_gain: float = 12.0,
               dim: int | None = None) -> "ToyWeights":
        """Uninformed base model.

        When ``direction`` (the task's ground-truth feature direction) is
        given, it is projected out of the score head so the base model
        carries no information about the true score. The feature dimension
        follows ``direction`` when given, else ``dim`` (default FEATURE_DIM).
        """
        if direction is not None:
            dim = len(direction)
        dim = dim or FEATURE_DIM
        rng = child_rng(seed, "toy-weights")
        W = rng.normal(0.0, score_scale, size=(10, dim + 1))
        if direction is not None:
            d = np.asarray(direction, dtype=float)
            d = d / np.linalg.norm(d)
            W[:, :dim] -= np.outer(W[:, :dim] @ d, d)
        return cls({
            "score_head.weight": W,
            "text_head.tier.weight": tier_gain * np.eye(N_TIERS),
            "text_head.feature.weight": rng.normal(0.0, feature_scale, size=(N_TIERS, dim)),
        })

    @classmethod
    def oracle(cls, direction, offset: float, scale: float, cuts, sharpness: float = 10.0,
               tier_gain: float = 12.0) -> "ToyWeights":
        """Score head whose argmax equals the quantile bin of ``offset + scale * direction . x``.

        Logit ``i`` is ``sharpness * (i * u - sum(cuts[:i]))``; its argmax is the
        number of cuts strictly below ``u``, i.e. the right-closed bin of ``u``.
        """
        d = np.asarray(direction, dtype=float)
        cuts = np.asarray(cuts, dtype=float)
        dim = d.size
        W = np.zeros((10, dim + 1))
        for i in range(10):
            W[i, :dim] = i * scale * d
            # 1e-9 pulls exact ties at a cut into the lower (right-closed) bin
            W[i, dim] = i * (offset - 1e-9) - cuts[:i].sum()
        return cls({
            "score_head.weight": sharpness * W,
            "text_head.tier.weight": tier_gain * np.eye(N_TIERS),
            "text_head.feature.weight": np.zeros((N_TIERS, dim)),
        })


class ToyVLM:
    """A handle on the toy model: base weights, optional delta, optional adapter."""

    def __init__(self, weights: ToyWeights, features: Mapping[str, np.ndarray],
                 delta: NamedDelta | None = None, tokenizer: ToyTokenizer | None = None,
                 context_limit: int = 2048):
        self.weights = weights
        self.features = features
        dim = weights.params["text_head.feature.weight"].shape[1]
        for uri, x in features.items():
            if np.shape(x) != (dim,):
                raise ShapeMismatch(f"feature vector for {uri!r} has shape {np.shape(x)}, expected ({dim},)")
            break
        self.tokenizer = tokenizer or ToyTokenizer()
        self.context_limit = context_limit
        if delta is not None:
            check_same_schema(weights.shapes(), delta.shapes())
        self.delta = delta
        self.spec: AdapterSpec | None = None
        self._lora: dict[str, np.ndarray] | None = None
        self._eff_cache = None
        self._prompt_body = render_scoring_prompt()
        self.metadata = {"backend": "toy", "image_preprocessing": "none (feature vectors)"}

    # handles -----------------------------------------------------------

    def _spawn(self, delta):
        return ToyVLM(self.weights, self.features, delta, self.tokenizer, self.context_limit)

    def reference(self) -> "ToyVLM":
        return self._spawn(None)

    def apply_delta(self, delta: NamedDelta | None) -> "ToyVLM":
        return self._spawn(delta)

    def attach_adapter(self, spec: AdapterSpec, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        lora = {}
        for name in sorted(self.weights.params):
            out_dim, in_dim = self.weights.params[name].shape
            lora[name + ".lora_A"] = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(spec.rank, in_dim))
            lora[name + ".lora_B"] = np.zeros((out_dim, spec.rank))
        self.spec = spec
        self._lora = lora
        self._eff_cache = None

    def adapter_parameters(self) -> dict[str, np.ndarray]:
        if self._lora is None:
            raise NoAdapterAttached("no adapter attached to this handle")
        return self._lora

    def train_step(self, grads: Mapping[str, np.ndarray], optimizer) -> None:
        """Update adapter parameters only; base weights and delta stay frozen."""
        params = self.adapter_parameters()
        optimizer.step(params, grads)
        self._eff_cache = None

    def export_delta(self, **metadata) -> NamedDelta:
        if self._lora is None:
            raise NoAdapterAttached("no adapter attached to this handle")
        entries = {}
        for name in self.weights.params:
            d = self._adapter_dense(name)
            if self.delta is not None:
                d = d + self.delta.entries[name]
            entries[name] = d
        meta = {"base_id": self.weights.base_id, "adapter": self.spec.to_dict(),
                "parent": self.delta.checksum() if self.delta is not None else None}
        meta.update(metadata)
        return NamedDelta(entries, meta)

    def _adapter_dense(self, name: str) -> np.ndarray:
        A = self._lora[name + ".lora_A"]
        B = self._lora[name + ".lora_B"]
        return self.spec.scaling * (B @ A)

    def effective_weights(self) -> dict[str, np.ndarray]:
        if self._eff_cache is None:
            eff = {}
            for name, base in self.weights.params.items():
                w = np.array(base, dtype=float)
                if self.delta is not None:
                    w = w + self.delta.entries[name]
                if self._lora is not None:
                    w = w + self._adapter_dense(name)
                eff[name] = w
            self._eff_cache = eff
        return self._eff_cache

    # token-level model ---------------------------------------------------

    def _feature(self, image_uri: str) -> np.ndarray:
        try:
            return self.features[image_uri]
        except KeyError:
            raise BackendFailure(f"unknown image {image_uri!r}") from None

    def _context(self, prompt: str) -> tuple[int, ...]:
        body = prompt[len(self._prompt_body):] if prompt.startswith(self._prompt_body) else prompt
        ids = self.tokenizer.encode(body)
        if len(ids) > self.context_limit:
            raise ContextOverflow(f"{len(ids)} tokens exceeds context limit {self.context_limit}")
        return ids

    def _state_after(self, ids) -> tuple:
        state = _START
        for t in ids:
            state = _advance(state, t)
        return state

    def _score_logits(self, eff, x) -> np.ndarray:
        return eff["score_head.weight"] @ np.append(x, 1.0)

    def _tier_weights(self, eff, x, tier) -> np.ndarray:
        w = eff["text_head.feature.weight"] @ x
        if tier is not None:
            w = w + eff["text_head.tier.weight"][:, tier]
        return w

    def _text_lse(self, w: np.ndarray) -> float:
        others = self.tokenizer.size - N_TIERS - 1
        m = max(w.max(), 0.0)
        return m + np.log(np.exp(w - m).sum() + np.exp(-m) + others * np.exp(-FORCE - m))

    def _forced_lse(self) -> float:
        return np.log1p((self.tokenizer.size - 1) * np.exp(-FORCE))

    def _walk(self, image_uri, prompt, response, mask, want_grad):
        if mask not in ("all", "score"):
            raise ValueError(f"unknown mask {mask!r}")
        x = self._feature(image_uri)
        ctx = self._context(prompt)
        resp = self.tokenizer.encode(response)
        if not resp:
            raise ValueError("response tokenizes to nothing")
        eff = self.effective_weights()
        grads = {k: np.zeros_like(v) for k, v in eff.items()} if want_grad else None
        x1 = np.append(x, 1.0)
        state = self._state_after(ctx)
        total = 0.0
        for tok in resp:
            ph = _phase(state)
            if mask == "all" or ph[0] == "score":
                if ph[0] == "forced":
                    total += (0.0 if tok == ph[1] else -FORCE) - self._forced_lse()
                elif ph[0] == "score":
                    z = eff["score_head.weight"] @ x1
                    m = z.max()
                    lse = m + np.log(np.exp(z - m).sum())
                    d = tok - DIGIT0
                    if not 0 <= d < 10:
                        total += -np.inf
                    else:
                        total += z[d] - lse
                        if want_grad:
                            g = -np.exp(z - lse)
                            g[d] += 1.0
                            grads["score_head.weight"] += np.outer(g, x1)
                else:
                    _, k, tier = ph
                    w = self._tier_weights(eff, x, tier)
                    lse = self._text_lse(w)
                    words = self.tokenizer.template_ids[:, k]
                    hit = np.flatnonzero(words == tok)
                    if hit.size:
                        total += w[hit[0]] - lse
                    else:
                        total += (0.0 if tok == UNK else -FORCE) - lse
                    if want_grad:
                        g = -np.exp(w - lse)
                        if hit.size:
                            g[hit[0]] += 1.0
                        grads["text_head.feature.weight"] += np.outer(g, x)
                        if tier is not None:
                            grads["text_head.tier.weight"][:, tier] += g
            state = _advance(state, tok)
        return float(total), grads

    # public contract --------------------------------------------------------

    def count_tokens(self, text: str) -> int:
        return len(self.tokenizer.encode(text))

    def sequence_logprob(self, image_uri: str, prompt: str, response: str, mask: str = "all") -> float:
        """Sum of token log-probabilities of ``response`` given ``prompt``.

        ``mask="score"`` keeps only the score-token position(s). No
        end-of-text term is added, so log-probabilities chain over splits.
        """
        return self._walk(image_uri, prompt, response, mask, want_grad=False)[0]

    def weight_gradients(self, image_uri, prompt, response, mask="all"):
        """Log-probability and its gradient w.r.t. the effective weights."""
        return self._walk(image_uri, prompt, response, mask, want_grad=True)

    def sequence_logprob_grad(self, image_uri, prompt, response, mask="all"):
        """Log-probability and its gradient w.r.t. the adapter parameters."""
        lp, gw = self.weight_gradients(image_uri, prompt, response, mask)
        lora = self.adapter_parameters()
        s = self.spec.scaling
        grads = {}
        for name, G in gw.items():
            A = lora[name + ".lora_A"]
            B = lora[name + ".lora_B"]
            grads[name + ".lora_A"] = s * (B.T @ G)
            grads[name + ".lora_B"] = s * (G @ A.T)
        return lp, grads

    def score_token_logits(self, image_uri: str, prompt: str) -> np.ndarray:
        if not self.tokenizer.single_token_digits:
            raise TokenizationError("score digits are not single tokens for this tokenizer")
        state = self._state_after(self._context(prompt))
        if _phase(state) != ("score",):
            raise ValueError("prompt does not end at the score slot")
        return self._score_logits(self.effective_weights(), self._feature(image_uri))

    def generate(self, image_uri: str, prefix: str, params: GenerationParams = GenerationParams()) -> str:
        if not prefix:
            raise ValueError("prefix must be non-empty")
        x = self._feature(image_uri)
        ctx = self._context(prefix)
        eff = self.effective_weights()
        state = self._state_after(ctx)
        out = []
        for _ in range(params.max_new_tokens):
            if len(ctx) + len(out) >= self.context_limit:
                raise ContextOverflow("generation ran past the context limit")
            ph = _phase(state)
            if ph[0] == "forced":
                tok = ph[1]
            elif ph[0] == "score":
                tok = DIGIT0 + int(np.argmax(self._score_logits(eff, x)))
            else:
                _, k, tier = ph
                w = self._tier_weights(eff, x, tier)
                tok = int(self.tokenizer.template_ids[int(np.argmax(w)), k])
            if tok == EOS:
                break
            out.append(tok)
            state = _advance(state, tok)
        return "".join(self.tokenizer.render(t) for t in out)


# synthetic task --------------------------------------------------------------

@dataclass
class ToyTask:
    """Synthetic image-score task whose score is an exact linear function of the features."""

    records: list
    features: dict[str, np.ndarray]
    direction: np.ndarray
    offset: float
    scale: float

    def true_score(self, x) -> float:
        return float(self.offset + self.scale * np.dot(self.direction, x))


def make_toy_task(n: int = 200, seed: int = 0, splits=(0.55, 0.3, 0.15),
                  offset: float = 5.0, scale: float = 1.2, name: str = "toy", dim: int = FEATURE_DIM):
    """Build ``n`` feature-vector "images" with linear ground-truth scores.

    Returns ``(manifest, task)``. Splits are assigned by position after a
    seeded shuffle, so every split is a uniform sample.
    """
    from ..ingest import DatasetManifest, ScoredImage

    rng = child_rng(seed, "toy-task")
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    X = rng.normal(size=(n, dim))
    n_train = int(round(splits[0] * n))
    n_val = int(round(splits[1] * n))
    labels = np.array(["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val))
    labels = labels[rng.permutation(n)]
    records, feats = [], {}
    for i in range(n):
        uri = f"toy:img-{i:05d}"
        feats[uri] = X[i]
        raw = float(offset + scale * X[i] @ direction)
        records.append(ScoredImage(f"img-{i:05d}", uri, raw, str(labels[i])))
    task = ToyTask(records, feats, direction, offset, scale)
    return DatasetManifest(name, records), task


def save_features(path, features: Mapping[str, np.ndarray], **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    uris = sorted(features)
    with open(path, "wb") as fh:
        np.savez(fh, uris=np.array(uris), X=np.stack([features[u] for u in uris]),
                 **{k: np.asarray(v) for k, v in extra.items()})
    return path


def load_features(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        feats = {str(u): z["X"][i].copy() for i, u in enumerate(z["uris"])}
        extra = {k: z[k].copy() for k in z.files if k not in ("uris", "X")}
    return feats, extra


class ToyJudge:
    """Offline judge for toy explanations.

    Consistency is "excellent" when the explanation's template tier matches
    the score's tier, "fair" one tier off, "bad" otherwise; usefulness and
    general are fixed at "good" for template text and "poor" for anything else.
    """

    _SCORE = re.compile(r"#Aesthetic score: (\S+)")
    _TEXT = re.compile(r"#Explanatory text: (.*)\Z", re.DOTALL)

    def complete(self, prompt: str) -> str:
        s = self._SCORE.search(prompt)
        t = self._TEXT.search(prompt)
        text_tier = tier_of_text(t.group(1)) if t else None
        try:
            score_tier = tier_of_bin(int(s.group(1)))
        except (AttributeError, ValueError):
            score_tier = None
        if text_tier is None or score_tier is None:
            verdict = {"consistency": "bad", "usefulness": "poor", "general": "poor"}
        else:
            gap = abs(text_tier - score_tier)
            cons = "excellent" if gap == 0 else "fair" if gap == 1 else "bad"
            verdict = {"consistency": cons, "usefulness": "good", "general": "good"}
        return json.dumps(verdict)
