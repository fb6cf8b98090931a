import numpy as np
import pytest

from genmc import tensor as T
from genmc.transformer import (BOS, EOS, PAD, ConfigError, EncoderDecoder, LengthError,
                               ModelConfig, MultiHeadAttention, backbone_params)
from gradcheck import check


def small(seed=0, **kw):
    base = dict(d_model=16, n_heads=2, n_enc_layers=2, n_dec_layers=2, d_ff=24,
                vocab_size=20, max_source_len=12, max_target_len=8)
    base.update(kw)
    return EncoderDecoder(ModelConfig(**base), np.random.default_rng(seed))


def encode_one(model, ids):
    ids = np.array([ids])
    return model.encode(ids), ids != PAD


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=10, n_heads=3)


def test_config_rejects_tiny_vocab():
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=3)


# -- attention -------------------------------------------------------------------

def test_attention_single_key_returns_value_projection():
    rng = np.random.default_rng(1)
    mha = MultiHeadAttention(8, 2, rng)
    xq = T.Tensor(rng.normal(size=(1, 3, 8)))
    xkv = T.Tensor(rng.normal(size=(1, 1, 8)))
    out = mha(xq, xkv).data
    expected = mha.o(mha.v(xkv)).data
    assert np.allclose(out, np.repeat(expected, 3, axis=1), atol=1e-12)


def test_attention_gradient():
    rng = np.random.default_rng(2)
    mha = MultiHeadAttention(8, 2, rng)
    x = T.parameter(rng.normal(size=(2, 4, 8)))
    mem = T.parameter(rng.normal(size=(2, 3, 8)))
    mask = np.zeros((2, 1, 1, 3))
    mask[1, ..., 2] = T.NEG_INF
    w = T.Tensor(rng.normal(size=(2, 4, 8)))
    params = [x, mem] + mha.parameters()
    assert check(lambda: T.tsum(mha(x, mem, mask) * w), params) < 1e-4


def test_attention_rows_are_probability_vectors_and_causal():
    m = small()
    mem, mask = encode_one(m, [5, 6, 7, 8])
    m.decode_full(np.array([[BOS, 4, 9, 10]]), mem, mask)
    w = m.dec_layers[0].self_attn.last_weights
    assert np.max(np.abs(w.sum(-1) - 1)) < 1e-9 and (w >= 0).all()
    assert not np.triu(w[0, 0], k=1).any()
    cw = m.dec_layers[1].cross_attn.last_weights
    assert np.max(np.abs(cw.sum(-1) - 1)) < 1e-9


# -- encoder -------------------------------------------------------------------------

def test_encoder_shape():
    m = small(max_source_len=12)
    h, _ = encode_one(m, [4, 5, 6, 7, 8, 9, 10])
    assert h.shape == (1, 7, 16)


def test_encoder_pad_tail_perturbation_is_invisible():
    m = small()
    ids = np.array([[5, 6, 7, PAD, PAD, PAD]])
    mask = ids != PAD
    base = m.encode(ids, mask).data
    noisy = ids.copy()
    noisy[0, 3:] = [11, 3, 19]
    other = m.encode(noisy, mask).data
    assert np.array_equal(base[:, :3], other[:, :3])


def test_encoder_deterministic():
    m = small()
    ids = np.array([[4, 5, 6]])
    assert np.array_equal(m.encode(ids).data, m.encode(ids).data)


def test_encoder_rejects_overlong():
    m = small(max_source_len=4)
    with pytest.raises(LengthError):
        m.encode(np.array([[4, 5, 6, 7, 8]]))


# -- decoder ---------------------------------------------------------------------------

def test_decoder_step_distribution_sums_to_one():
    m = small()
    mem, mask = encode_one(m, [4, 5, 6])
    p, h = m.decoder_step(np.array([BOS]), m.new_cache(), mem, mask)
    assert abs(p.data.sum() - 1) < 1e-9 and h.shape == (1, 16)


def test_stepwise_matches_teacher_forced():
    m = small()
    mem, mask = encode_one(m, [4, 5, 6, 7])
    target = np.array([[9, 12, 4, 17, 8]])
    full = T.softmax(m.teacher_forced_logits(mem, mask, target), axis=-1).data[0]
    cache = m.new_cache()
    prev = BOS
    for j in range(target.shape[1]):
        p, _ = m.decoder_step(np.array([prev]), cache, mem, mask)
        assert np.max(np.abs(p.data[0] - full[j])) < 1e-9
        prev = target[0, j]


def test_teacher_forced_single_token_conditions_on_bos():
    m = small()
    mem, mask = encode_one(m, [4, 5])
    a = m.teacher_forced_logits(mem, mask, np.array([[7]])).data
    b = m.teacher_forced_logits(mem, mask, np.array([[15]])).data
    assert a.shape == (1, 1, 20) and np.array_equal(a, b)


def test_teacher_forced_rejects_empty():
    m = small()
    mem, mask = encode_one(m, [4, 5])
    with pytest.raises(ValueError):
        m.teacher_forced_logits(mem, mask, np.zeros((1, 0), dtype=int))


def test_teacher_forced_causality_exact():
    m = small()
    mem, mask = encode_one(m, [4, 5, 6])
    target = np.array([[9, 12, 4, 17, 8, 10]])
    base = m.teacher_forced_logits(mem, mask, target).data[0]
    for k in range(target.shape[1]):
        pert = target.copy()
        pert[0, k] = 19 if target[0, k] != 19 else 18
        out = m.teacher_forced_logits(mem, mask, pert).data[0]
        # position j predicts a_{j+1} (1-based) from a_1..a_j, so a_k (index k) reaches rows > k
        assert np.array_equal(out[:k + 1], base[:k + 1])
        if k + 1 < target.shape[1]:
            assert not np.array_equal(out[k + 1:], base[k + 1:])


def test_decoder_cache_limit():
    m = small(max_target_len=2)
    mem, mask = encode_one(m, [4])
    cache = m.new_cache()
    m.decoder_step(np.array([BOS]), cache, mem, mask)
    m.decoder_step(np.array([5]), cache, mem, mask)
    with pytest.raises(LengthError):
        m.decoder_step(np.array([6]), cache, mem, mask)


# -- greedy decoding ----------------------------------------------------------------------

def _zero_decoder_layers(m):
    for layer in m.dec_layers:
        for p in layer.parameters():
            p.data[...] = 0.0


def test_greedy_forced_eos_gives_empty_clue():
    m = small(n_dec_layers=1)
    _zero_decoder_layers(m)
    m.dec_norm.gain.data[:] = 0.0
    m.lm_bias.data[:] = 0.0
    m.lm_bias.data[EOS] = 5.0
    mem, mask = encode_one(m, [4, 5, 6])
    tokens, states, smask = m.greedy_decode(mem, mask)
    assert tokens == [[]] and states.shape == (1, 0, 16) and smask.shape == (1, 0)


def test_greedy_forced_token_then_eos():
    m = small(n_dec_layers=1)
    _zero_decoder_layers(m)
    t = 11
    e = np.eye(16)
    m.embed.data[:] = 0.01 * np.random.default_rng(3).normal(size=m.embed.shape)
    m.embed.data[BOS] = 0.0
    m.embed.data[t] = e[0]
    m.embed.data[EOS] = e[1]
    m.dec_pos.data[:] = 0.0
    m.dec_pos.data[0] = 5 * e[0]
    m.dec_pos.data[1] = -e[0] + 5 * e[1]
    m.lm_bias.data[:] = 0.0
    mem, mask = encode_one(m, [4, 5, 6])
    tokens, states, _ = m.greedy_decode(mem, mask)
    assert tokens == [[t]] and states.shape == (1, 1, 16)


def test_greedy_deterministic_and_bounded():
    m = small(seed=5)
    mem, mask = encode_one(m, [4, 5, 6, 7])
    a = m.greedy_decode(mem, mask)
    b = m.greedy_decode(mem, mask)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])
    assert len(a[0][0]) <= m.cfg.max_target_len


def test_greedy_self_consistent_with_teacher_forcing():
    for seed in range(4):
        m = small(seed=seed)
        mem, mask = encode_one(m, [4, 5, 6, 7])
        tokens, states, _ = m.greedy_decode(mem, mask)
        seq = tokens[0]
        if len(seq) < m.cfg.max_target_len:
            seq = seq + [EOS]
        logits = m.teacher_forced_logits(mem, mask, np.array([seq])).data[0]
        assert logits.argmax(-1).tolist() == seq
        hidden = m.decode_full(np.array([[BOS] + seq[:-1]]), mem, mask).data[0]
        n = len(tokens[0])
        assert np.max(np.abs(hidden[:n] - states[0, :n])) < 1e-9


def test_greedy_batch_equals_single():
    m = small(seed=7)
    ids = np.array([[4, 5, 6, 7], [8, 9, PAD, PAD]])
    mem = m.encode(ids)
    tok, st, msk = m.greedy_decode(mem, ids != PAD)
    for i in range(2):
        row = ids[i:i + 1]
        n = int((row != PAD).sum())
        row = row[:, :n]
        t1, s1, _ = m.greedy_decode(m.encode(row), row != PAD)
        assert t1[0] == tok[i]
        assert np.max(np.abs(s1[0] - st[i, :len(tok[i])])) < 1e-9


# -- parameter accounting -------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    dict(d_model=8, n_heads=1, n_enc_layers=1, n_dec_layers=1, d_ff=16, vocab_size=30,
         max_source_len=10, max_target_len=5),
    dict(d_model=16, n_heads=4, n_enc_layers=2, n_dec_layers=3, d_ff=40, vocab_size=50),
    dict(d_model=32, n_heads=4, n_enc_layers=3, n_dec_layers=1, d_ff=64, vocab_size=120),
])
def test_backbone_param_formula(kw):
    cfg = ModelConfig(**kw)
    assert EncoderDecoder(cfg, np.random.default_rng(0)).num_parameters() == backbone_params(cfg)


def test_backbone_hand_expansion_d8():
    # V=30, d=8, f=16, Ls=10, Lt=5, one layer each:
    # embed 240 + pos 120 + enc (288 + 280 + 32) + dec (576 + 280 + 48) + norms 32 + lm_bias 30
    cfg = ModelConfig(d_model=8, n_heads=1, n_enc_layers=1, n_dec_layers=1, d_ff=16,
                      vocab_size=30, max_source_len=10, max_target_len=5)
    assert backbone_params(cfg) == 240 + 120 + 600 + 904 + 32 + 30 == 1926


def test_doubling_ffn_changes_only_ffn_rows():
    a = ModelConfig(d_model=8, n_heads=2, n_enc_layers=2, n_dec_layers=1, d_ff=16)
    b = ModelConfig(d_model=8, n_heads=2, n_enc_layers=2, n_dec_layers=1, d_ff=32)
    # each FFN gains d*f (up) + f (bias) + f*d (down) = 2*8*16 + 16
    assert backbone_params(b) - backbone_params(a) == 3 * (2 * 8 * 16 + 16)


def test_decoder_parameter_names():
    m = small()
    names = m.decoder_parameter_names()
    assert "lm_bias" in names and "dec_pos" in names
    assert not any(n.startswith(("enc_", "embed")) for n in names)
