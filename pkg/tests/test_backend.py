import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from selfscore.backend import (AdapterSpec, GenerationParams, NamedDelta, ScoringBackend, ToyTokenizer,
                               ToyVLM, ToyWeights, delta_archive_checksum, load_delta, make_toy_task,
                               save_delta, tier_of_bin, tier_of_text)
from selfscore.backend.conformance import run_conformance
from selfscore.codec import encode_bin, softmax_scores
from selfscore.dpo import Adam
from selfscore.errors import (BackendFailure, ContextOverflow, NoAdapterAttached, ShapeMismatch,
                              TokenizationError)
from selfscore.prompting import (parse_response, render_conditioned_prefix, render_scoring_prompt,
                                 response_head, score_slot_prompt)

PROMPT = render_scoring_prompt()


def _uri(task, k=0):
    return task.records[k].image_uri


def test_spec_types():
    assert AdapterSpec(rank=8).alpha == 16
    assert AdapterSpec(rank=3).scaling == 2.0
    with pytest.raises(ValueError):
        AdapterSpec(rank=0)
    assert GenerationParams().max_new_tokens == 256
    with pytest.raises(ValueError):
        GenerationParams(max_new_tokens=0)
    with pytest.raises(ValueError):
        GenerationParams(decoding="nucleus")
    with pytest.raises(ValueError):
        NamedDelta({"w": np.array([1.0, np.nan])})


def test_toy_handle_satisfies_protocol(toy_handle):
    assert isinstance(toy_handle, ScoringBackend)


@pytest.mark.parametrize("b", range(10))
def test_conditioned_generation_matches_tier(oracle_handle, toy_task, b):
    _, task = toy_task
    out = oracle_handle.generate(_uri(task), render_conditioned_prefix(b))
    assert tier_of_text(out) == tier_of_bin(b)


def test_generation_deterministic(toy_handle, toy_task):
    _, task = toy_task
    a = toy_handle.generate(_uri(task, 3), PROMPT)
    b = toy_handle.generate(_uri(task, 3), PROMPT)
    assert a == b and a.encode() == b.encode()
    r = parse_response(a)
    assert 0 <= r.score_bin <= 9


def test_generation_errors(toy_task):
    _, task = toy_task
    small = ToyVLM(ToyWeights.random(0, task.direction), task.features, context_limit=8)
    with pytest.raises(ContextOverflow):
        small.generate(_uri(task), "word " * 20)
    with pytest.raises(BackendFailure):
        small.generate("toy:missing", "#Score:")
    with pytest.raises(ValueError):
        small.generate(_uri(task), "")
    capped = ToyVLM(ToyWeights.random(0, task.direction), task.features)
    out = capped.generate(_uri(task), PROMPT, GenerationParams(max_new_tokens=3))
    assert capped.count_tokens(out) == 3


def test_greedy_response_logprob_near_zero(oracle_handle, toy_task):
    _, task = toy_task
    for k in range(10):
        uri = _uri(task, k)
        out = oracle_handle.generate(uri, PROMPT)
        lp = oracle_handle.sequence_logprob(uri, PROMPT, out)
        assert -0.1 * oracle_handle.count_tokens(out) < lp <= 0


@given(st.text(max_size=40))
def test_logprob_nonpositive(text):
    manifest, task = make_toy_task(n=10, seed=0)
    h = ToyVLM(ToyWeights.random(1, task.direction), task.features)
    if not h.count_tokens(text):
        return
    assert h.sequence_logprob(_uri(task), PROMPT, text) <= 0


@pytest.mark.parametrize("b", [0, 4, 8])
def test_logprob_chain_rule(toy_handle, toy_task, b):
    _, task = toy_task
    uri = _uri(task, 5)
    full = response_head(b) + " Plain framing with flat dull lighting."
    whole = toy_handle.sequence_logprob(uri, PROMPT, full)
    tokens = full.split(" ")
    for cut in range(1, len(tokens)):
        a = " ".join(tokens[:cut])
        rest = " " + " ".join(tokens[cut:])
        split = (toy_handle.sequence_logprob(uri, PROMPT, a)
                 + toy_handle.sequence_logprob(uri, PROMPT + "\n" + a, rest))
        assert abs(whole - split) <= 1e-9


def test_score_mask_only_counts_score_token(toy_handle, toy_task):
    _, task = toy_task
    uri = _uri(task)
    z = toy_handle.score_token_logits(uri, score_slot_prompt())
    lp = toy_handle.sequence_logprob(uri, PROMPT, response_head(6) + " Plain framing.", mask="score")
    assert abs(lp - np.log(softmax_scores(z)[6])) <= 1e-12


def test_score_logits_argmax_matches_engineered_bin(oracle_handle, toy_task, toy_scheme):
    _, task = toy_task
    # engineer a feature vector whose true score sits mid-bin 7
    u = 0.5 * (toy_scheme.cuts[6] + toy_scheme.cuts[7])
    x = task.direction * (u - task.offset) / task.scale
    assert encode_bin(toy_scheme, task.true_score(x)) == 7
    h = ToyVLM(oracle_handle.weights, {"toy:engineered": x})
    z = h.score_token_logits("toy:engineered", score_slot_prompt())
    assert z.shape == (10,) and int(np.argmax(z)) == 7
    assert abs(softmax_scores(z).sum() - 1) <= 1e-12


def test_oracle_argmax_equals_true_bin_everywhere(oracle_handle, toy_task, toy_scheme):
    _, task = toy_task
    for r in task.records:
        z = oracle_handle.score_token_logits(r.image_uri, score_slot_prompt())
        assert int(np.argmax(z)) == encode_bin(toy_scheme, r.raw_score)


def test_multi_token_digits_raise(toy_task):
    _, task = toy_task
    h = ToyVLM(ToyWeights.random(0, task.direction), task.features, tokenizer=ToyTokenizer(single_token_digits=False))
    with pytest.raises(TokenizationError):
        h.score_token_logits(_uri(task), score_slot_prompt())


def test_score_logits_require_score_slot(toy_handle, toy_task):
    _, task = toy_task
    with pytest.raises(ValueError):
        toy_handle.score_token_logits(_uri(task), PROMPT)


def test_no_adapter_errors(toy_handle):
    with pytest.raises(NoAdapterAttached):
        toy_handle.export_delta()
    with pytest.raises(NoAdapterAttached):
        toy_handle.adapter_parameters()


def test_zero_adapter_exports_zero_delta(toy_handle):
    toy_handle.attach_adapter(AdapterSpec(rank=4), seed=3)
    d = toy_handle.export_delta()
    assert d.is_zero()
    assert d.shapes() == toy_handle.weights.shapes()
    assert d.metadata["adapter"] == {"rank": 4, "alpha": 8, "target_scope": "all-linear"}


def test_zero_delta_is_identity(toy_handle, toy_task):
    _, task = toy_task
    h0 = toy_handle.apply_delta(NamedDelta.zeros(toy_handle.weights.shapes()))
    for k in range(5):
        uri = _uri(task, k)
        assert np.allclose(h0.score_token_logits(uri, score_slot_prompt()),
                           toy_handle.score_token_logits(uri, score_slot_prompt()), atol=1e-9, rtol=0)


def test_apply_delta_shape_mismatch(toy_handle):
    shapes = dict(toy_handle.weights.shapes())
    shapes["score_head.weight"] = (10, 3)
    with pytest.raises(ShapeMismatch):
        toy_handle.apply_delta(NamedDelta.zeros(shapes))
    with pytest.raises(ShapeMismatch):
        toy_handle.apply_delta(NamedDelta({"extra": np.zeros(2)}))


def test_feature_dim_mismatch(toy_task):
    _, task = toy_task
    with pytest.raises(ShapeMismatch):
        ToyVLM(ToyWeights.random(0, dim=16), task.features)


def _random_train(handle, rng, steps=5):
    opt = Adam(lr=0.05)
    for _ in range(steps):
        grads = {k: rng.normal(size=v.shape) for k, v in handle.adapter_parameters().items()}
        handle.train_step(grads, opt)


def test_export_apply_round_trip(toy_handle, toy_task, rng):
    _, task = toy_task
    toy_handle.attach_adapter(AdapterSpec(rank=2), seed=1)
    _random_train(toy_handle, rng)
    applied = toy_handle.reference().apply_delta(toy_handle.export_delta())
    for k in range(10):
        uri = _uri(task, k)
        assert np.allclose(applied.score_token_logits(uri, score_slot_prompt()),
                           toy_handle.score_token_logits(uri, score_slot_prompt()), atol=1e-6, rtol=0)
        resp = response_head(3) + " Pleasant colors, decent"
        assert abs(applied.sequence_logprob(uri, PROMPT, resp) - toy_handle.sequence_logprob(uri, PROMPT, resp)) <= 1e-6


def test_cumulative_export_adds_parent(toy_handle, rng):
    parent = NamedDelta({k: rng.normal(size=s) for k, s in toy_handle.weights.shapes().items()})
    h = toy_handle.apply_delta(parent)
    h.attach_adapter(AdapterSpec(rank=2), seed=0)
    assert all(np.array_equal(h.export_delta().entries[k], parent.entries[k]) for k in parent.entries)
    _random_train(h, rng)
    out = h.export_delta()
    assert out.metadata["parent"] == parent.checksum()
    for k in parent.entries:
        A, B = h.adapter_parameters()[k + ".lora_A"], h.adapter_parameters()[k + ".lora_B"]
        assert np.allclose(out.entries[k], parent.entries[k] + 2.0 * B @ A, atol=1e-12)


def test_reference_immutable_under_training(toy_handle, toy_task, rng):
    _, task = toy_task
    uri = _uri(task, 2)
    resp = response_head(8) + " Striking balance, luminous tones"
    ref = toy_handle.reference()
    before = ref.sequence_logprob(uri, PROMPT, resp)
    base_before = {k: v.copy() for k, v in toy_handle.weights.params.items()}
    toy_handle.attach_adapter(AdapterSpec(rank=4), seed=0)
    _random_train(toy_handle, rng, steps=20)
    assert toy_handle.sequence_logprob(uri, PROMPT, resp) != before
    assert ref.sequence_logprob(uri, PROMPT, resp) == before
    assert toy_handle.reference().sequence_logprob(uri, PROMPT, resp) == before
    assert all(np.array_equal(toy_handle.weights.params[k], base_before[k]) for k in base_before)


def test_score_cross_entropy_gradient_matches_finite_differences(toy_task, rng):
    _, task = toy_task
    h = ToyVLM(ToyWeights.random(2, task.direction), task.features)
    uri = _uri(task, 7)
    resp = response_head(4) + " Plain framing"
    _, grads = h.weight_gradients(uri, PROMPT, resp, mask="score")
    shapes = h.weights.shapes()
    eps = 1e-5
    for _ in range(20):
        name = "score_head.weight"
        idx = tuple(int(rng.integers(n)) for n in shapes[name])
        plus = NamedDelta.zeros(shapes)
        minus = NamedDelta.zeros(shapes)
        plus.entries[name][idx] = eps
        minus.entries[name][idx] = -eps
        fd = (h.apply_delta(plus).sequence_logprob(uri, PROMPT, resp, mask="score")
              - h.apply_delta(minus).sequence_logprob(uri, PROMPT, resp, mask="score")) / (2 * eps)
        g = grads[name][idx]
        assert abs(fd - g) <= 1e-4 * max(abs(g), abs(fd), 1e-6)


def test_adapter_gradients_match_finite_differences(toy_task, rng):
    _, task = toy_task
    h = ToyVLM(ToyWeights.random(0, task.direction), task.features)
    h.attach_adapter(AdapterSpec(rank=2), seed=4)
    _random_train(h, rng, steps=3)  # move B off zero so A's gradient is nontrivial
    uri = _uri(task, 1)
    resp = response_head(2) + " Blurry subject amid harsh muddy clutter."
    _, grads = h.sequence_logprob_grad(uri, PROMPT, resp)
    params = h.adapter_parameters()
    names = sorted(params)
    eps = 1e-6
    checked = 0
    for _ in range(24):
        name = names[int(rng.integers(len(names)))]
        idx = tuple(int(rng.integers(n)) for n in params[name].shape)
        orig = params[name][idx]
        vals = []
        for sign in (1, -1):
            params[name][idx] = orig + sign * eps
            h._eff_cache = None
            vals.append(h.sequence_logprob(uri, PROMPT, resp))
        params[name][idx] = orig
        h._eff_cache = None
        fd = (vals[0] - vals[1]) / (2 * eps)
        g = grads[name][idx]
        assert abs(fd - g) <= 1e-4 * max(abs(g), abs(fd), 1e-4)
        checked += 1
    assert checked >= 20


def test_archive_round_trip_bitwise(tmp_path, rng):
    d = NamedDelta({"a.weight": rng.normal(size=(3, 5)), "b": rng.normal(size=7).astype(np.float32),
                    "c": np.array([-0.0, 5e-324, 1e308])}, {"iteration": 2, "note": "x"})
    save_delta(d, tmp_path / "one")
    back = load_delta(tmp_path / "one")
    assert back.names() == d.names()
    for k in d.entries:
        assert back.entries[k].dtype == d.entries[k].dtype
        assert back.entries[k].tobytes() == d.entries[k].tobytes()
    assert back.metadata == d.metadata
    assert back.checksum() == d.checksum() == delta_archive_checksum(tmp_path / "one")
    save_delta(back, tmp_path / "two")
    for f in sorted((tmp_path / "one").iterdir()):
        assert f.read_bytes() == (tmp_path / "two" / f.name).read_bytes()


def test_archive_detects_corruption(tmp_path):
    save_delta(NamedDelta({"w": np.arange(4.0)}), tmp_path)
    (tmp_path / "0000.bin").write_bytes(np.arange(1.0, 5.0).tobytes())
    with pytest.raises(ValueError):
        load_delta(tmp_path)


@given(st.dictionaries(st.text("abcdefgh._", min_size=1, max_size=8),
                       arrays(np.float64, st.integers(1, 6), elements=st.floats(-1e9, 1e9)),
                       min_size=1, max_size=4))
def test_archive_round_trip_property(tmp_path_factory, entries):
    d = NamedDelta(entries)
    path = save_delta(d, tmp_path_factory.mktemp("nd"))
    back = load_delta(path)
    assert all(back.entries[k].tobytes() == entries[k].tobytes() for k in entries)


def test_checksum_depends_on_values_and_names():
    a = NamedDelta({"w": np.zeros(3)})
    assert a.checksum() == NamedDelta({"w": np.zeros(3)}).checksum()
    assert a.checksum() != NamedDelta({"v": np.zeros(3)}).checksum()
    assert a.checksum() != NamedDelta({"w": np.array([0.0, 0.0, 1e-300])}).checksum()


@pytest.mark.parametrize("dim", [4, 16])
def test_conformance_suite(dim):
    _, task = make_toy_task(n=20, seed=1, dim=dim)
    h = ToyVLM(ToyWeights.random(0, task.direction), task.features)
    results = run_conformance(h, task.records[0].image_uri)
    assert len(results) == 11
    failed = [r for r in results if not r.passed]
    assert not failed, failed


def test_conformance_reports_broken_backend(toy_task):
    _, task = toy_task

    class Broken(ToyVLM):
        def score_token_logits(self, image_uri, prompt):
            return np.zeros(9)

    h = Broken(ToyWeights.random(0, task.direction), task.features)
    results = {r.name: r for r in run_conformance(h, _uri(task))}
    assert not results["score_logits"].passed


def test_tokenizer_tags_digits_and_unknown_words():
    tok = ToyTokenizer()
    ids = tok.encode("#Score: 7\n#Explain: Plain zzz")
    assert [tok.vocab[i] for i in ids] == ["#Score:", "7", "#Explain:", "Plain", "<unk>"]
    assert tok.encode("#score: 7 #EXPLAIN: x") == tok.encode("#Score: 7\n#Explain: x")
    assert all(len(tok.encode(str(d))) == 1 for d in range(10))
