import math

import numpy as np
import pytest

from attnmix.intervention import MixConfig, MixHook
from attnmix.layout import IMAGE_SLOT, SegmentKind, assemble_tokens, build_layout
from attnmix.tensor_core import DimensionError
from attnmix.toytask import sample_layout, sample_tokens
from attnmix.training import forward_batch, make_batch
from attnmix.transformer import (
    HookContractError, HookResult, ModelConfig, decode, embed_sequence, forward, greedy_decode,
    init_weights, load_weights, save_weights, sinusoidal_positions,
)


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=2, d_k=16)
    with pytest.raises(ValueError):
        ModelConfig(n_layers=0)


def test_embed_text_only(random_weights):
    cfg = random_weights.config
    lay = build_layout("closedbook", V=0, T=3)
    ids = [5, 6, 7]
    x = embed_sequence(random_weights, lay, np.zeros((0, cfg.image_patch_dim)), ids)
    expected = random_weights["tok_emb"][ids] + sinusoidal_positions(3, cfg.d_model)
    np.testing.assert_array_equal(x, expected)


def test_embed_identity_projector():
    cfg = ModelConfig(n_layers=1, n_heads=1, d_model=4, d_k=4, d_ff=4, vocab_size=8,
                      max_seq=8, image_patch_dim=3)
    w = init_weights(cfg, 0)
    w = w.replace(img_proj_w=np.eye(3, 4), img_proj_b=np.zeros(4))
    lay = build_layout("closedbook", V=1, T=1)
    feat = np.array([[0.5, -2.0, 3.0]])
    x = embed_sequence(w, lay, feat, [IMAGE_SLOT, 2])
    np.testing.assert_array_equal(x[0] - sinusoidal_positions(2, 4)[0], [0.5, -2.0, 3.0, 0.0])


def test_embed_is_deterministic(random_weights, rag_samples):
    s = rag_samples[0]
    lay = build_layout("closedbook", V=16, T=3)
    a = embed_sequence(random_weights, lay, s.image_features, sample_tokens(s, lay))
    b = embed_sequence(random_weights, lay, s.image_features, sample_tokens(s, lay))
    assert a.tobytes() == b.tobytes()


def test_embed_length_mismatch(random_weights):
    lay = build_layout("closedbook", V=2, T=1)
    with pytest.raises(DimensionError):
        embed_sequence(random_weights, lay, np.zeros((3, 16)), [IMAGE_SLOT] * 2 + [4])
    with pytest.raises(DimensionError):
        embed_sequence(random_weights, lay, np.zeros((2, 16)), [IMAGE_SLOT] * 2)


def _ln(x, g, b, eps):
    mu = sum(x) / len(x)
    var = sum((t - mu) ** 2 for t in x) / len(x)
    return [(t - mu) / math.sqrt(var + eps) * gi + bi for t, gi, bi in zip(x, g, b)]


def _vecmat(x, W):
    return [sum(x[i] * W[i][j] for i in range(len(x))) for j in range(len(W[0]))]


def _gelu(z):
    return 0.5 * z * (1 + math.tanh(math.sqrt(2 / math.pi) * (z + 0.044715 * z ** 3)))


def test_forward_matches_hand_expansion():
    cfg = ModelConfig(n_layers=1, n_heads=1, d_model=4, d_k=4, d_ff=3, vocab_size=5,
                      max_seq=4, image_patch_dim=2)
    rng = np.random.default_rng(0)
    w = init_weights(cfg, 1)
    w = w.replace(**{k: rng.normal(size=v.shape) for k, v in w.params.items()})
    x = rng.normal(size=(2, 4))
    trace = forward(w, x)
    P = {k: v.tolist() for k, v in w.params.items()}
    eps = cfg.ln_eps
    h = [_ln(list(r), P["layers.0.ln1_g"], P["layers.0.ln1_b"], eps) for r in x]
    q = [_vecmat(r, P["layers.0.wq"]) for r in h]
    k = [_vecmat(r, P["layers.0.wk"]) for r in h]
    v = [_vecmat(r, P["layers.0.wv"]) for r in h]
    logits_out = []
    for i in range(2):
        s = [sum(q[i][t] * k[j][t] for t in range(4)) / 2.0 for j in range(i + 1)]
        e = [math.exp(t - max(s)) for t in s]
        a = [t / sum(e) for t in e]
        o = [sum(a[j] * v[j][t] for j in range(i + 1)) for t in range(4)]
        x1 = [xi + yi for xi, yi in zip(x[i], _vecmat(o, P["layers.0.wo"]))]
        h2 = _ln(x1, P["layers.0.ln2_g"], P["layers.0.ln2_b"], eps)
        z = [_gelu(zi + bi) for zi, bi in zip(_vecmat(h2, P["layers.0.w1"]), P["layers.0.b1"])]
        f = [fi + bi for fi, bi in zip(_vecmat(z, P["layers.0.w2"]), P["layers.0.b2"])]
        x2 = [a_ + b_ for a_, b_ in zip(x1, f)]
        hf = _ln(x2, P["lnf_g"], P["lnf_b"], eps)
        logits_out.append([l + b for l, b in zip(_vecmat(hf, P["out_w"]), P["out_b"])])
    np.testing.assert_allclose(trace.logits, logits_out, atol=1e-10)


def test_attention_records_normalised_and_causal(random_weights, rag_samples):
    s = rag_samples[1]
    lay = sample_layout(s, "rag")
    x = embed_sequence(random_weights, lay, s.image_features, sample_tokens(s, lay))
    trace = forward(random_weights, x)
    assert len(trace.records) == random_weights.config.n_layers * random_weights.config.n_heads
    for rec in trace.records:
        np.testing.assert_allclose(rec.rows.sum(1), 1.0, atol=1e-6)
        assert (np.triu(rec.rows, 1) == 0).all()


def _madrag_inputs(weights, sample):
    lay = sample_layout(sample, "madrag")
    x = embed_sequence(weights, lay, sample.image_features, sample_tokens(sample, lay))
    return lay, x


def test_alpha_zero_hook_matches_no_hook(random_weights, rag_samples):
    lay, x = _madrag_inputs(random_weights, rag_samples[2])
    plain = forward(random_weights, x)
    hooked = forward(random_weights, x, hook=MixHook(lay, MixConfig(0.0), 2))
    assert np.abs(plain.logits - hooked.logits).max() <= 1e-9


def test_empty_layer_set_is_bit_identical(random_weights, rag_samples):
    lay, x = _madrag_inputs(random_weights, rag_samples[2])
    plain = forward(random_weights, x, capture_hidden=True)
    hooked = forward(random_weights, x, hook=MixHook(lay, MixConfig(0.7, layers=()), 2),
                     capture_hidden=True)
    assert plain.logits.tobytes() == hooked.logits.tobytes()
    assert all(a.tobytes() == b.tobytes() for a, b in zip(plain.hidden, hooked.hidden))


def test_intervention_leaves_upstream_positions_untouched(random_weights, rag_samples):
    lay, x = _madrag_inputs(random_weights, rag_samples[3])
    plain = forward(random_weights, x, capture_hidden=True)
    hooked = forward(random_weights, x, hook=MixHook(lay, MixConfig(0.5), 2), capture_hidden=True)
    first_qc = lay.span(SegmentKind.CONTEXT_QUESTION).start
    for hp, hh in zip(plain.hidden, hooked.hidden):
        assert hp[:first_qc].tobytes() == hh[:first_qc].tobytes()
    assert not np.allclose(plain.logits[first_qc:], hooked.logits[first_qc:])


def test_hook_contract_violation(random_weights, rag_samples):
    lay, x = _madrag_inputs(random_weights, rag_samples[0])

    class BadHook:
        layers = frozenset({0})

        def __call__(self, ctx):
            return HookResult(range(0, 2), np.zeros((1, 2, 3)))

    with pytest.raises(HookContractError):
        forward(random_weights, x, hook=BadHook())


def test_prefix_stability(random_weights, rag_samples):
    s = rag_samples[4]
    lay = sample_layout(s, "madrag")
    toks = sample_tokens(s, lay)
    hook = MixHook(lay, MixConfig(0.5), 2)
    short = forward(random_weights, embed_sequence(random_weights, lay, s.image_features, toks), hook=hook)
    longer_lay = lay.with_generated(1)
    longer = forward(random_weights, embed_sequence(random_weights, longer_lay, s.image_features, toks + [9]),
                     hook=hook)
    np.testing.assert_allclose(longer.logits[: lay.length], short.logits, atol=1e-12, rtol=0)


def _rigged(out_b):
    cfg = ModelConfig(n_layers=1, n_heads=1, d_model=4, d_k=4, d_ff=2, vocab_size=3,
                      max_seq=16, image_patch_dim=2)
    w = init_weights(cfg, 0)
    return w.replace(out_w=np.zeros((4, 3)), out_b=np.array(out_b, dtype=float))


def test_greedy_forced_argmax_and_ties():
    lay = build_layout("closedbook", V=1, T=2)
    feats = np.zeros((1, 2))
    toks = assemble_tokens(lay, [1, 2])
    assert greedy_decode(_rigged([0, 5, 1]), lay, feats, toks, max_new_tokens=4) == [1, 1, 1, 1]
    assert greedy_decode(_rigged([2, 2, 0]), lay, feats, toks, max_new_tokens=2) == [0, 0]
    # stops at the end-of-answer id
    assert greedy_decode(_rigged([0, 5, 1]), lay, feats, toks, max_new_tokens=4, eos_id=1) == [1]
    with pytest.raises(ValueError):
        greedy_decode(_rigged([0, 5, 1]), lay, feats, toks, max_new_tokens=0)
    with pytest.raises(DimensionError):
        greedy_decode(_rigged([0, 5, 1]), lay, feats, toks, max_new_tokens=20)


def test_greedy_decode_deterministic(random_weights, rag_samples):
    s = rag_samples[5]
    lay = sample_layout(s, "madrag")
    toks = sample_tokens(s, lay)
    runs = [decode(random_weights, lay, s.image_features, toks, MixHook(lay, MixConfig(), 2), 4)
            for _ in range(2)]
    assert runs[0].tokens == runs[1].tokens
    assert runs[0].trace.logits.tobytes() == runs[1].trace.logits.tobytes()
    assert runs[0].layout.length == lay.length + 3


def test_checkpoint_roundtrip(tmp_path, random_weights):
    path = tmp_path / "w.npz"
    save_weights(path, random_weights)
    back = load_weights(path)
    assert back.config == random_weights.config
    for k, v in random_weights.params.items():
        assert back[k].tobytes() == v.tobytes()


def test_weights_are_read_only(random_weights):
    with pytest.raises(ValueError):
        random_weights["tok_emb"][0, 0] = 1.0


def test_batched_training_forward_matches_engine(random_weights, rag_samples):
    batch = make_batch(rag_samples[:4])
    logits, _ = forward_batch(random_weights.params, random_weights.config, batch)
    for b, s in enumerate(rag_samples[:4]):
        lay = sample_layout(s, "closedbook")
        x = embed_sequence(random_weights, lay, s.image_features, sample_tokens(s, lay))
        np.testing.assert_allclose(forward(random_weights, x).logits[-1], logits[b], atol=1e-10)
