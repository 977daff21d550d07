import random
from fractions import Fraction

import numpy as np
import pytest

from roslu.data import Domain, RawExample, build_vocab, collate
from roslu.model import ModelConfig, RoSLU

STONES_TOKENS = "play the rolling stones' love in vain".split()
STONES_TAGS = "O B-singer I-singer I-singer B-song I-song I-song".split()


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. the array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def stones_example():
    return RawExample("000000", list(STONES_TOKENS), list(STONES_TAGS))


@pytest.fixture
def tiny_corpus(stones_example):
    clean = [
        stones_example,
        RawExample("000001", "what is the weather in paris".split(), "O O O O O B-city".split()),
        RawExample("000002", "add love in vain to my playlist".split(), "O B-song I-song I-song O O O".split()),
    ]
    noisy = [
        RawExample("n000000", "play the rock stones' love in vain".split(), list(STONES_TAGS),
                   Domain.NOISY, "000000"),
        RawExample("n000001", "what the weather in paris".split(), "O O O O B-city".split(),
                   Domain.NOISY, "000001"),
    ]
    return clean, noisy


@pytest.fixture
def tiny_model(tiny_corpus):
    clean, noisy = tiny_corpus
    vocab = build_vocab([clean, noisy])
    cfg = ModelConfig(num_layers=1, num_heads=2, hidden_size=8, vocab_size=len(vocab), dropout=0.0)
    return RoSLU(cfg, vocab, seed=3)


@pytest.fixture
def tiny_batches(tiny_corpus, tiny_model):
    clean, noisy = tiny_corpus
    return collate(clean, tiny_model.vocab), collate(noisy, tiny_model.vocab)


# --------------------------------------------------------------- helpers

def mini_setup(seed: int = 0, dropout: float = 0.0, **overrides):
    """L=1, H=2, d=8 model over a 20-token vocabulary; sources are DOM + 4 words."""
    from roslu.rng import Rng
    words = [f"w{i}" for i in range(13)]
    rng = Rng(seed).substream(99)
    def sentence(i, domain=Domain.CLEAN):
        r = rng.substream(i)
        toks = [words[int(k)] for k in r.integers(len(words), size=4)]
        tags = ["O", "B-a", "I-a", "B-b"] if i % 2 else ["B-b", "O", "O", "B-a"]
        if domain is Domain.NOISY:
            return RawExample(f"n{i}", toks, tags, Domain.NOISY, str(i))
        return RawExample(str(i), toks, tags)
    clean = [sentence(i) for i in range(3)]
    noisy = [sentence(10 + i, Domain.NOISY) for i in range(2)]
    vocab = build_vocab([[RawExample("v", words, ["O"] * 13)], clean])
    assert len(vocab) == 20
    cfg = ModelConfig(num_layers=1, num_heads=2, hidden_size=8, vocab_size=20, dropout=dropout, **overrides)
    model = RoSLU(cfg, vocab, seed=seed)
    return model, collate(clean, vocab), collate(noisy, vocab)


def loss_value(fn) -> float:
    from roslu import tensor as T
    with T.no_grad():
        return float(fn().values)


def joint_gradcheck(seed: int = 0, alpha: float = 0.7, eps: float = 1e-5, lam: float = 1.0) -> float:
    """Max relative error of backward(joint_loss) against central differences.

    Below the reversal layer the backward pass is, by design, not the
    derivative of the scalar loss; for encoder parameters the oracle is
    FD(s2s) - alpha * lam * FD(adv), and FD(joint) everywhere else.
    """
    from roslu import tensor as T
    import warnings
    warnings.simplefilter("ignore")
    model, cb, nb = mini_setup(seed, grl_lambda=lam)
    T.backward(model.joint_loss(cb, nb, alpha))
    worst = 0.0
    for name, p in model.params.items():
        if name.startswith("enc."):
            num = (numeric_grad(lambda: loss_value(lambda: model.s2s_loss(cb)), p.values, eps)
                   - alpha * lam * numeric_grad(lambda: loss_value(lambda: model.adversarial_loss(cb, nb)),
                                                p.values, eps))
        else:
            num = numeric_grad(lambda: loss_value(lambda: model.joint_loss(cb, nb, alpha)), p.values, eps)
        worst = max(worst, max_rel_err(p.grad, num))
    return worst


def reversal_law_error(seed: int, lam: float) -> float:
    """Max |grad_grl + lam * grad_identity| over encoder parameters of the adversarial loss."""
    from roslu import tensor as T
    import warnings
    warnings.simplefilter("ignore")
    grads = {}
    for mode in ("grl", "identity"):
        model, cb, nb = mini_setup(seed, reversal=mode, grl_lambda=lam)
        T.backward(model.adversarial_loss(cb, nb))
        grads[mode] = {k: p.grad for k, p in model.params.items() if k.startswith("enc.")}
    return max(float(np.max(np.abs(grads["grl"][k] + lam * grads["identity"][k]))) for k in grads["grl"])


def overfit(model, examples, steps: int = 300, lr: float = 0.01, seed: int = 0, stop_when_exact=True):
    """Plain SGD on the generation loss of a fixed batch."""
    from roslu import tensor as T
    from roslu.rng import Rng
    batch = collate(examples, model.vocab)
    targets = [list(b[b != 0][:-1]) for b in batch.tgt_out]
    for step in range(steps):
        model.zero_grad()
        T.backward(model.s2s_loss(batch, train=True, rng=Rng(seed).substream(step)))
        T.sgd_step(model.parameters(), lr)
        if stop_when_exact and step % 10 == 9:
            out = model.greedy_decode(batch.src, batch.src_mask)
            if [r.ids for r in out] == [[int(x) for x in t] for t in targets]:
                return step + 1
    return steps


# ------------------------------------------------------------ scorer oracle

def optimal_matches(pred, gold):
    """Brute force: best one-to-one assignment of predictions to equal gold slots."""
    def best(i, used):
        if i == len(pred):
            return 0
        options = [best(i + 1, used)]
        for j, g in enumerate(gold):
            if j not in used and g == pred[i]:
                options.append(1 + best(i + 1, used | {j}))
        return max(options)
    return best(0, frozenset())


def oracle_f1(preds, golds):
    tp = sum(optimal_matches(p, g) for p, g in zip(preds, golds))
    n_p, n_g = sum(map(len, preds)), sum(map(len, golds))
    p = Fraction(tp, n_p) if n_p else Fraction(0)
    r = Fraction(tp, n_g) if n_g else Fraction(0)
    f = 2 * p * r / (p + r) if p + r else Fraction(0)
    return float(p), float(r), float(f)


def random_instance(rng: random.Random):
    labels = ["A", "B", "C", "D"][:rng.randint(1, 4)]
    words = ["x", "y", "z"]

    def slot():
        return (rng.choice(labels), tuple(rng.choice(words) for _ in range(rng.randint(1, 3))))

    gold = [slot() for _ in range(rng.randint(0, 5))]
    pred = [rng.choice(gold) if gold and rng.random() < 0.5 else slot() for _ in range(rng.randint(0, 5))]
    return pred, gold


# ------------------------------------------------------- acceptance report

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (passed, detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
