"""Contract checks any scoring backend should pass.

``run_conformance`` exercises a handle through the public interface only
and returns one ``CheckResult`` per property, so a new backend plug-in can
be validated without reading the toy implementation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NoAdapterAttached
from ..prompting import parse_response, render_conditioned_prefix, render_scoring_prompt, score_slot_prompt
from .base import AdapterSpec, NamedDelta, ScoringBackend


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _check(name, fn) -> CheckResult:
    try:
        detail = fn()
        return CheckResult(name, True, detail or "")
    except Exception as exc:  # a failing check reports instead of aborting the suite
        return CheckResult(name, False, f"{type(exc).__name__}: {exc}")


def run_conformance(handle, image_uri: str, spec: AdapterSpec = AdapterSpec(rank=2),
                    seed: int = 0, probes: int = 6, rel_tol: float = 1e-4) -> list[CheckResult]:
    prompt = render_scoring_prompt()
    fresh = lambda: handle.reference()  # noqa: E731

    def protocol():
        assert isinstance(handle, ScoringBackend), "handle does not satisfy ScoringBackend"

    def logits():
        z = np.asarray(handle.score_token_logits(image_uri, score_slot_prompt()))
        assert z.shape == (10,), f"expected 10 logits, got shape {z.shape}"
        assert np.all(np.isfinite(z)), "non-finite logits"

    def generation():
        text = handle.generate(image_uri, prompt)
        parse_response(text)
        assert handle.generate(image_uri, prompt) == text, "greedy generation is not deterministic"

    def conditioned():
        text = handle.generate(image_uri, render_conditioned_prefix(3))
        assert text.strip(), "empty continuation"

    def logprob_masks():
        response = handle.generate(image_uri, prompt)
        full = handle.sequence_logprob(image_uri, prompt, response, "all")
        score = handle.sequence_logprob(image_uri, prompt, response, "score")
        assert full <= 0 and score <= 0, "log-probabilities must be non-positive"
        assert score >= full - 1e-12, "score-only mask must not be below the full sequence"

    def no_adapter():
        h = fresh()
        try:
            h.adapter_parameters()
        except NoAdapterAttached:
            return
        raise AssertionError("adapter_parameters succeeded without an adapter")

    def zero_adapter_identity():
        response = handle.generate(image_uri, prompt)
        h = fresh()
        before = h.sequence_logprob(image_uri, prompt, response)
        h.attach_adapter(spec, seed)
        after = h.sequence_logprob(image_uri, prompt, response)
        assert before == after, f"fresh adapter changed the model: {before} vs {after}"

    def gradient():
        response = handle.generate(image_uri, prompt)
        h = fresh()
        h.attach_adapter(spec, seed)
        params = h.adapter_parameters()
        rng = np.random.default_rng(seed)
        for p in params.values():
            p += rng.normal(0.0, 0.05, size=p.shape)
        h.train_step({k: np.zeros_like(v) for k, v in params.items()}, _Noop())
        lp, grads = h.sequence_logprob_grad(image_uri, prompt, response)
        assert set(grads) == set(params), "gradient keys differ from adapter parameters"
        names = sorted(params)
        worst = 0.0
        for i in range(probes):
            name = names[i % len(names)]
            idx = tuple(int(rng.integers(s)) for s in params[name].shape)
            eps = 1e-5
            old = params[name][idx]
            params[name][idx] = old + eps
            h.train_step({}, _Noop())
            up = h.sequence_logprob(image_uri, prompt, response)
            params[name][idx] = old - eps
            h.train_step({}, _Noop())
            down = h.sequence_logprob(image_uri, prompt, response)
            params[name][idx] = old
            h.train_step({}, _Noop())
            fd = (up - down) / (2 * eps)
            g = grads[name][idx]
            err = abs(fd - g) / max(1.0, abs(fd), abs(g))
            worst = max(worst, err)
        assert worst <= rel_tol, f"finite-difference mismatch {worst:.2e}"
        return f"worst relative error {worst:.2e}"

    def export_roundtrip():
        response = handle.generate(image_uri, prompt)
        h = fresh()
        h.attach_adapter(spec, seed)
        for p in h.adapter_parameters().values():
            p += 0.05
        h.train_step({}, _Noop())
        want = h.sequence_logprob(image_uri, prompt, response)
        got = fresh().apply_delta(h.export_delta()).sequence_logprob(image_uri, prompt, response)
        assert abs(want - got) <= 1e-9 * max(1.0, abs(want)), f"{want} vs {got}"

    def zero_delta():
        response = handle.generate(image_uri, prompt)
        h = fresh()
        h.attach_adapter(spec, seed)
        zeros = NamedDelta.zeros(h.export_delta().shapes())
        a = fresh().sequence_logprob(image_uri, prompt, response)
        b = fresh().apply_delta(zeros).sequence_logprob(image_uri, prompt, response)
        assert a == b, "zero delta changed the model"

    def counting():
        n = handle.count_tokens(prompt)
        assert isinstance(n, int) and n > 0

    checks = [("protocol", protocol), ("score_logits", logits), ("greedy_generation", generation),
              ("conditioned_generation", conditioned), ("logprob_masks", logprob_masks),
              ("no_adapter_error", no_adapter), ("zero_adapter_identity", zero_adapter_identity),
              ("adapter_gradient", gradient), ("export_roundtrip", export_roundtrip),
              ("zero_delta_identity", zero_delta), ("token_count", counting)]
    return [_check(name, fn) for name, fn in checks]


class _Noop:
    """Optimizer stand-in that only lets the handle refresh cached weights."""

    def step(self, params, grads):
        pass
