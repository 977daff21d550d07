import itertools
import math

import numpy as np
import pytest

from roslu import tensor as T
from roslu.data import BOS, DOM, EOS, Batch, Domain, RawExample, build_vocab, collate, make_target
from roslu.errors import ConfigError, InputContractError
from roslu.model import CleanOnlyAdversarialWarning, ModelConfig, RoSLU, TaggingBaseline
from roslu.train import bio_tag_set

from conftest import joint_gradcheck, overfit, reversal_law_error


def test_encode_shape_and_determinism(tiny_model, stones_example):
    src = collate([stones_example], tiny_model.vocab).src
    h1 = tiny_model.encode(src).values
    assert h1.shape == (1, 8, 8)  # DOM + 7 words
    assert np.array_equal(h1, tiny_model.encode(src).values)


def test_encode_requires_dom(tiny_model):
    with pytest.raises(InputContractError):
        tiny_model.encode(np.array([[7, 8, 9]]))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(num_heads=5, hidden_size=96, vocab_size=10)
    cfg = ModelConfig(vocab_size=10)
    assert (cfg.num_layers, cfg.num_heads, cfg.hidden_size, cfg.feedforward_size) == (4, 8, 96, 384)


def test_zero_head_gives_half(tiny_model, tiny_batches):
    cb, _ = tiny_batches
    _zero_head(tiny_model)
    p = tiny_model.discriminate(tiny_model.encode(cb.src, cb.src_mask))
    assert np.array_equal(p, np.full(len(cb), 0.5))


def test_discriminator_range(tiny_model, tiny_batches):
    cb, nb = tiny_batches
    for b in (cb, nb):
        p = tiny_model.discriminate(tiny_model.encode(b.src, b.src_mask))
        assert np.all((p > 0) & (p < 1))


def _zero_head(model):
    for k, p in model.params.items():
        if k.startswith("dis."):
            p.values[...] = 0.0


def test_adversarial_half_everywhere(tiny_model, tiny_batches):
    cb, nb = tiny_batches
    _zero_head(tiny_model)
    loss = tiny_model.adversarial_loss(cb, nb).values
    assert abs(loss - (len(cb) + len(nb)) * math.log(2)) < 1e-12


def test_adversarial_saturated_limit(tiny_model, tiny_batches, monkeypatch):
    cb, nb = tiny_batches
    calls = iter([40.0, -40.0])
    monkeypatch.setattr(tiny_model, "discriminator_logit",
                        lambda states, route=None: T.Tensor(np.full(states.shape[0], next(calls))))
    assert tiny_model.adversarial_loss(cb, nb).values < 1e-15


def test_adversarial_matches_scalar_oracle(tiny_batches, tiny_model):
    cb, nb = tiny_batches
    for seed in range(5):
        model = RoSLU(tiny_model.config, tiny_model.vocab, seed=seed)
        pc = model.discriminate(model.encode(cb.src, cb.src_mask))
        pn = model.discriminate(model.encode(nb.src, nb.src_mask))
        oracle = -sum(math.log(p) for p in pc) - sum(math.log(1.0 - p) for p in pn)
        assert abs(model.adversarial_loss(cb, nb).values - oracle) < 1e-12


def test_adversarial_without_noisy_warns(tiny_model, tiny_batches):
    cb, _ = tiny_batches
    with pytest.warns(CleanOnlyAdversarialWarning):
        loss = tiny_model.adversarial_loss(cb, None)
    pc = tiny_model.discriminate(tiny_model.encode(cb.src, cb.src_mask))
    assert abs(loss.values + np.log(pc).sum()) < 1e-12


def test_logprob_is_sum_of_picks(tiny_model, tiny_batches):
    cb, _ = tiny_batches
    lp = tiny_model.s2s_logprob(cb).values
    mem = tiny_model.encode(cb.src, cb.src_mask)
    logp = T.log_softmax(tiny_model.logits(cb.tgt_in, mem, cb.src_mask, tiny_model._ctx(False, None))).values
    for i in range(len(cb)):
        n = int(cb.tgt_mask[i].sum())
        picks = [logp[i, t, cb.tgt_out[i, t]] for t in range(n)]
        assert abs(lp[i] - math.fsum(picks)) < 1e-12


def test_sequence_probabilities_sum_to_one():
    """Enumerate every output of length <= 2 over the full softmax vocabulary.

    Complete sequences end in EOS; sequences cut at the length limit
    contribute their prefix probability.  Together they cover all outcomes.
    """
    vocab = build_vocab([[RawExample("0", ["a", "b"], ["O", "O"])]])
    V = len(vocab)
    model = RoSLU(ModelConfig(num_layers=1, num_heads=2, hidden_size=8, vocab_size=V, dropout=0.0), vocab, seed=4)
    src = np.array([[DOM, vocab.id("a"), vocab.id("b")]])
    rows = [[EOS]] + [[t, EOS] for t in range(V) if t != EOS] + \
           [[s, t] for s, t in itertools.product(range(V), repeat=2) if EOS not in (s, t)]
    n = len(rows)
    tgt_out = np.zeros((n, 2), dtype=np.int64)
    tgt_in = np.full((n, 2), BOS, dtype=np.int64)
    mask = np.zeros((n, 2), dtype=bool)
    for i, r in enumerate(rows):
        tgt_out[i, :len(r)] = r
        tgt_in[i, 1] = r[0]
        mask[i, :len(r)] = True
    batch = Batch([str(i) for i in range(n)], Domain.CLEAN, np.repeat(src, n, 0), np.ones((n, 3), bool),
                  tgt_in, tgt_out, mask)
    total = math.fsum(np.exp(model.s2s_logprob(batch).values))
    assert abs(total - 1.0) < 1e-6


def test_padding_invariance(tiny_model, tiny_corpus):
    clean, _ = tiny_corpus
    a = tiny_model.s2s_logprob(collate(clean, tiny_model.vocab)).values
    b = tiny_model.s2s_logprob(collate(clean, tiny_model.vocab, src_pad=9)).values
    assert np.max(np.abs(a - b)) < 1e-9


def test_causality(tiny_model, tiny_batches):
    cb, _ = tiny_batches
    mem = tiny_model.encode(cb.src, cb.src_mask)
    ctx = tiny_model._ctx(False, None)
    base = tiny_model.logits(cb.tgt_in, mem, cb.src_mask, ctx).values
    for k in range(1, cb.tgt_in.shape[1]):
        alt = cb.tgt_in.copy()
        alt[:, k] = (alt[:, k] + 3) % len(tiny_model.vocab)
        out = tiny_model.logits(alt, mem, cb.src_mask, ctx).values
        assert np.array_equal(out[:, :k], base[:, :k])


def test_s2s_loss_single_and_additive(tiny_model, tiny_corpus):
    clean, _ = tiny_corpus
    v = tiny_model.vocab
    single = [tiny_model.s2s_loss(collate([ex], v)).values for ex in clean]
    for ex, s in zip(clean, single):
        assert s == -tiny_model.s2s_logprob(collate([ex], v)).values[0]
        assert s >= 0
    pair = tiny_model.s2s_loss(collate(clean[:2], v)).values
    assert abs(pair - (single[0] + single[1])) < 1e-12


def test_s2s_loss_rejects_noisy(tiny_model, tiny_batches):
    _, nb = tiny_batches
    with pytest.raises(InputContractError):
        tiny_model.s2s_loss(nb)


def test_joint_decomposition(tiny_model, tiny_batches):
    cb, nb = tiny_batches
    s2s = tiny_model.s2s_loss(cb).values
    adv = tiny_model.adversarial_loss(cb, nb).values
    assert tiny_model.joint_loss(cb, nb, 0.0).values == s2s
    assert abs(tiny_model.joint_loss(cb, nb, 1.0).values - (s2s + adv)) < 1e-12
    for a in (0.1, 0.5, 0.9):
        assert abs(tiny_model.joint_loss(cb, nb, a).values - (s2s + a * adv)) < 1e-12
    with pytest.raises(ConfigError):
        tiny_model.joint_loss(cb, nb, -0.1)


def _grads(model, loss):
    model.zero_grad()
    T.backward(loss)
    return {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.values)) for k, p in model.params.items()}


def test_gradient_routing(tiny_model, tiny_batches):
    cb, nb = tiny_batches
    m = tiny_model
    g0 = _grads(m, m.joint_loss(cb, nb, 0.0))
    assert all(np.all(g0[k] == 0) for k in g0 if k.startswith("dis."))
    g3, g9 = _grads(m, m.joint_loss(cb, nb, 0.3)), _grads(m, m.joint_loss(cb, nb, 0.9))
    for k in g3:
        if k.startswith("dec."):
            assert np.max(np.abs(g3[k] - g9[k])) < 1e-12
    g_adv = _grads(m, m.adversarial_loss(cb, nb))
    g_s2s = _grads(m, m.s2s_loss(cb))
    m.config.reversal = "identity"
    try:
        g_plain = _grads(m, m.adversarial_loss(cb, nb))
    finally:
        m.config.reversal = "grl"
    for k in g3:
        if k.startswith("dis."):
            assert np.allclose(g3[k], 0.3 * g_adv[k], rtol=1e-10, atol=1e-13)
        if k.startswith("enc."):
            lam = m.config.grl_lambda
            assert np.allclose(g_adv[k], -lam * g_plain[k], rtol=0, atol=1e-12)
            assert np.allclose(g3[k], g_s2s[k] + 0.3 * g_adv[k], rtol=1e-10, atol=1e-12)


def test_clean_term_detach_option(tiny_corpus):
    cfg_vocab = build_vocab(list(tiny_corpus))
    cfg = ModelConfig(num_layers=1, num_heads=2, hidden_size=8, vocab_size=len(cfg_vocab), dropout=0.0,
                      reverse_clean_term=False)
    m = RoSLU(cfg, cfg_vocab, seed=1)
    cb = collate(tiny_corpus[0], cfg_vocab)
    with pytest.warns(CleanOnlyAdversarialWarning):
        g = _grads(m, m.adversarial_loss(cb, None))
    assert all(np.all(g[k] == 0) for k in g if k.startswith("enc."))


def test_mini_gradcheck():
    assert joint_gradcheck(seed=1, alpha=0.4) < 1e-4


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
def test_reversal_law(lam):
    assert reversal_law_error(seed=2, lam=lam) <= 1e-12


def test_overfit_decodes_targets(stones_example):
    empty = RawExample("1", "hello there".split(), ["O", "O"])
    vocab = build_vocab([[stones_example, empty]])
    model = RoSLU(ModelConfig(num_layers=1, num_heads=2, hidden_size=16, vocab_size=len(vocab), dropout=0.0),
                  vocab, seed=0)
    overfit(model, [stones_example, empty], steps=400, lr=0.02)
    b = collate([stones_example, empty], vocab)
    out = model.greedy_decode(b.src, b.src_mask)
    assert vocab.decode(out[0].ids) == make_target(stones_example.tokens, stones_example.spans)
    assert out[1].ids == [] and not out[1].truncated
    for row, mask, r in zip(b.src, b.src_mask, out):
        beam = model.beam_decode(row[mask], beam=1)
        assert beam.ids == r.ids and beam.truncated == r.truncated
    assert model.greedy_decode(b.src[:1], b.src_mask[:1], max_target_len=2)[0].truncated


def test_beam_one_equals_greedy_untrained(tiny_model, tiny_batches):
    cb, _ = tiny_batches
    greedy = tiny_model.greedy_decode(cb.src, cb.src_mask, max_target_len=6)
    for row, mask, g in zip(cb.src, cb.src_mask, greedy):
        b = tiny_model.beam_decode(row[mask], 1, max_target_len=6)
        assert (b.ids, b.truncated) == (g.ids, g.truncated)


def test_wider_beam_is_no_worse(tiny_model, tiny_batches):
    cb, _ = tiny_batches
    row = cb.src[0][cb.src_mask[0]]
    s1 = tiny_model.beam_decode(row, 1, max_target_len=4)
    s3 = tiny_model.beam_decode(row, 3, max_target_len=4)
    if not s1.truncated and not s3.truncated:
        assert s3.score >= s1.score - 1e-12


def test_tagger_overfits(tiny_corpus):
    clean, _ = tiny_corpus
    vocab = build_vocab([clean])
    tags = bio_tag_set([clean])
    cfg = ModelConfig(num_layers=1, num_heads=2, hidden_size=16, vocab_size=len(vocab), dropout=0.0,
                      num_tags=len(tags))
    m = TaggingBaseline(cfg, vocab, tags, seed=0)
    batch = collate(clean, vocab, tag_index=m.tag_index)
    for _ in range(300):
        m.zero_grad()
        T.backward(m.tag_loss(batch))
        T.sgd_step(m.parameters(), 0.05)
    pred = m.tagging_baseline_decode(batch.src, batch.src_mask)
    assert [len(p) for p in pred] == [len(ex.tokens) for ex in clean]
    assert pred == [ex.bio_tags for ex in clean]
