"""Transformer encoder-decoder slot generator with a DOM-token domain discriminator.

Parameters live in one flat ``name -> Tensor`` mapping whose first name
component is the group: ``enc`` (shared encoder and the tied embedding),
``dec`` (decoder, or the tagging head of the baseline) and ``dis``
(discriminator).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import BOS, DOM, EOS, PAD, Batch, Domain, RawExample, Vocab, bio_to_spans, pad_sources
from .errors import ConfigError, InputContractError
from .rng import Rng
from .tensor import Tensor

GROUPS = ("enc", "dec", "dis")
NEG_INF = -1e9


class CleanOnlyAdversarialWarning(RuntimeWarning):
    """The adversarial loss was evaluated without any noisy sample."""


@dataclass
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 8
    hidden_size: int = 96
    vocab_size: int = 0
    max_source_len: int = 64
    max_target_len: int = 64
    dropout: float = 0.1
    grl_lambda: float = 1.0
    reversal: str = "grl"  # "identity" removes the reversal layer (probe mode)
    reverse_clean_term: bool = True
    num_tags: int = 0

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ConfigError(f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if self.max_source_len < 2 or self.max_target_len < 2:
            raise ConfigError("max lengths must be >= 2")
        if self.grl_lambda < 0:
            raise ConfigError("grl_lambda must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.reversal not in ("grl", "identity"):
            raise ConfigError(f"unknown reversal mode {self.reversal!r}")

    @property
    def feedforward_size(self) -> int:
        return 4 * self.hidden_size

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


def _param_shapes(cfg: ModelConfig, tagger: bool) -> list[tuple[str, tuple[int, ...]]]:
    d, f, V = cfg.hidden_size, cfg.feedforward_size, cfg.vocab_size
    shapes: list[tuple[str, tuple[int, ...]]] = [("enc.embed", (V, d))]

    def linear(name, n_in, n_out):
        shapes.extend([(f"{name}.w", (n_in, n_out)), (f"{name}.b", (n_out,))])

    def norm(name):
        shapes.extend([(f"{name}.g", (d,)), (f"{name}.b", (d,))])

    def attn(name):
        for p in "qkvo":
            linear(f"{name}.{p}", d, d)

    for i in range(cfg.num_layers):
        norm(f"enc.{i}.ln1"); attn(f"enc.{i}.attn"); norm(f"enc.{i}.ln2")
        linear(f"enc.{i}.ff1", d, f); linear(f"enc.{i}.ff2", f, d)
    norm("enc.ln_f")
    if tagger:
        linear("dec.tag", d, cfg.num_tags)
        return shapes
    for i in range(cfg.num_layers):
        norm(f"dec.{i}.ln1"); attn(f"dec.{i}.self"); norm(f"dec.{i}.ln2"); attn(f"dec.{i}.cross")
        norm(f"dec.{i}.ln3"); linear(f"dec.{i}.ff1", d, f); linear(f"dec.{i}.ff2", f, d)
    norm("dec.ln_f")
    linear("dis.hidden", d, d)
    linear("dis.out", d, 1)
    return shapes


def init_params(cfg: ModelConfig, seed: int, tagger: bool = False) -> dict[str, Tensor]:
    """Xavier-uniform weights, zero biases, unit layer-norm gains."""
    rng = Rng(seed).substream(3)
    params = {}
    for k, (name, shape) in enumerate(_param_shapes(cfg, tagger)):
        leaf = name.rsplit(".", 1)[-1]
        if len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            values = rng.substream(k).uniform(-limit, limit, shape)
        elif leaf == "g":
            values = np.ones(shape)
        else:
            values = np.zeros(shape)
        params[name] = T.parameter(values)
    return params


def sinusoidal(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class _Ctx:
    """Train/eval switch plus the dropout substream for one forward pass."""

    def __init__(self, train: bool, rng: Rng | None, rate: float):
        self.train = train and rate > 0 and rng is not None
        self.rng = rng
        self.rate = rate
        self.k = 0

    def drop(self, x: Tensor) -> Tensor:
        if not self.train:
            return x
        self.k += 1
        return T.dropout(x, self.rate, self.rng.substream(self.k), train=True)


class _Network:
    """Shared transformer encoder machinery."""

    kind = "base"

    def __init__(self, config: ModelConfig, vocab: Vocab, params: dict[str, Tensor]):
        self.config = config
        self.vocab = vocab
        self.params = params
        n = max(config.max_source_len, config.max_target_len) + 1
        self._pos = sinusoidal(n, config.hidden_size)

    # parameter bookkeeping
    def group(self, name: str) -> list[Tensor]:
        return [p for k, p in self.params.items() if k.split(".", 1)[0] == name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        T.zero_grad(self.params.values())

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return x @ self.params[f"{name}.w"] + self.params[f"{name}.b"]

    def _norm(self, x: Tensor, name: str) -> Tensor:
        return T.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _embed(self, ids: np.ndarray, ctx: _Ctx) -> Tensor:
        d = self.config.hidden_size
        x = T.embedding(self.params["enc.embed"], ids) * math.sqrt(d)
        x = x + self._pos[: ids.shape[1]]
        return ctx.drop(x)

    def _attention(self, xq: Tensor, xkv: Tensor, name: str, key_mask: np.ndarray | None,
                   causal: bool) -> Tensor:
        B, Tq, d = xq.shape
        Tk = xkv.shape[1]
        H, dh = self.config.num_heads, self.config.head_size

        def heads(x, n, p):
            return T.transpose(T.reshape(self._linear(x, f"{name}.{p}"), (B, n, H, dh)), (0, 2, 1, 3))

        q, k, v = heads(xq, Tq, "q"), heads(xkv, Tk, "k"), heads(xkv, Tk, "v")
        scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        mask = np.zeros((B, 1, Tq, Tk), dtype=bool)
        if key_mask is not None:
            mask |= ~key_mask[:, None, None, :]
        if causal:
            mask |= np.triu(np.ones((Tq, Tk), dtype=bool), k=1)[None, None]
        if mask.any():
            scores = T.masked_fill(scores, mask, NEG_INF)
        out = T.softmax(scores) @ v
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, Tq, d))
        return self._linear(out, f"{name}.o")

    def _ff(self, x: Tensor, name: str) -> Tensor:
        return self._linear(T.relu(self._linear(x, f"{name}.ff1")), f"{name}.ff2")

    def encode(self, src: np.ndarray, src_mask: np.ndarray | None = None, train: bool = False,
               rng: Rng | None = None) -> Tensor:
        """Contextual states ``(batch, len, d)`` for DOM-prefixed sources."""
        src = np.atleast_2d(np.asarray(src, dtype=np.int64))
        if src_mask is None:
            src_mask = src != PAD
        if src.shape[1] == 0 or np.any(src[:, 0] != DOM):
            raise InputContractError("every source sequence must start with the DOM token")
        if src.shape[1] > self.config.max_source_len:
            raise InputContractError(f"source length {src.shape[1]} exceeds {self.config.max_source_len}")
        ctx = rng if isinstance(rng, _Ctx) else _Ctx(train, rng, self.config.dropout)
        x = self._embed(src, ctx)
        for i in range(self.config.num_layers):
            h = self._norm(x, f"enc.{i}.ln1")
            x = x + ctx.drop(self._attention(h, h, f"enc.{i}.attn", src_mask, causal=False))
            x = x + ctx.drop(self._ff(self._norm(x, f"enc.{i}.ln2"), f"enc.{i}"))
        return self._norm(x, "enc.ln_f")


@dataclass
class DecodeResult:
    ids: list[int]
    truncated: bool
    score: float = 0.0


class RoSLU(_Network):
    """Slot generator G_enc + decoder, with the discriminator head."""

    kind = "roslu"

    def __init__(self, config: ModelConfig, vocab: Vocab, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        if config.vocab_size != len(vocab):
            raise ConfigError(f"vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
        super().__init__(config, vocab, params if params is not None else init_params(config, seed))

    # ------------------------------------------------------------ forward
    def decode_states(self, tgt_in: np.ndarray, memory: Tensor, src_mask: np.ndarray,
                      ctx: _Ctx) -> Tensor:
        if tgt_in.shape[1] > self.config.max_target_len:
            raise InputContractError(f"target length {tgt_in.shape[1]} exceeds {self.config.max_target_len}")
        y = self._embed(tgt_in, ctx)
        for i in range(self.config.num_layers):
            h = self._norm(y, f"dec.{i}.ln1")
            y = y + ctx.drop(self._attention(h, h, f"dec.{i}.self", None, causal=True))
            h = self._norm(y, f"dec.{i}.ln2")
            y = y + ctx.drop(self._attention(h, memory, f"dec.{i}.cross", src_mask, causal=False))
            y = y + ctx.drop(self._ff(self._norm(y, f"dec.{i}.ln3"), f"dec.{i}"))
        return self._norm(y, "dec.ln_f")

    def logits(self, tgt_in: np.ndarray, memory: Tensor, src_mask: np.ndarray, ctx: _Ctx) -> Tensor:
        h = self.decode_states(tgt_in, memory, src_mask, ctx)
        return h @ T.transpose(self.params["enc.embed"], (1, 0))

    def discriminator_logit(self, states: Tensor, route: str | None = None) -> Tensor:
        """Clean-vs-noisy logit from the DOM row.

        ``route`` decides what reaches the encoder: ``grl`` (reversed and
        scaled by grl_lambda), ``identity`` (plain gradient) or ``detach``
        (nothing).  Defaults to the configured reversal mode.
        """
        route = route or self.config.reversal
        dom = states[:, 0, :]
        if route == "grl":
            dom = T.grad_reverse(dom, self.config.grl_lambda)
        elif route == "detach":
            dom = dom.detach()
        h = T.tanh(self._linear(dom, "dis.hidden"))
        return T.reshape(self._linear(h, "dis.out"), (states.shape[0],))

    def discriminate(self, states: Tensor) -> np.ndarray:
        """p(clean) per sample."""
        with T.no_grad():
            return T.sigmoid(self.discriminator_logit(states)).values.copy()

    def _ctx(self, train: bool, rng: Rng | None) -> _Ctx:
        return _Ctx(train, rng, self.config.dropout)

    # -------------------------------------------------------------- losses
    def s2s_logprob(self, batch: Batch, train: bool = False, rng: Rng | None = None,
                    memory: Tensor | None = None, ctx: _Ctx | None = None) -> Tensor:
        """log p(y|x) per example, summed over target positions (teacher forcing)."""
        if batch.tgt_in is None:
            raise InputContractError("batch has no generation targets")
        ctx = ctx or self._ctx(train, rng)
        if memory is None:
            memory = self.encode(batch.src, batch.src_mask, rng=ctx)
        logits = self.logits(batch.tgt_in, memory, batch.src_mask, ctx)
        nll = T.cross_entropy(logits, batch.tgt_out, mask=batch.tgt_mask, reduction="none")
        return -T.sum(nll, axis=1)

    def s2s_loss(self, batch: Batch, train: bool = False, rng: Rng | None = None,
                 memory: Tensor | None = None, ctx: _Ctx | None = None) -> Tensor:
        if batch.domain.value != "clean":
            raise InputContractError("generation loss is defined on clean batches; got a noisy one")
        if batch.tgt_in is None:
            raise InputContractError("batch has no generation targets")
        ctx = ctx or self._ctx(train, rng)
        if memory is None:
            memory = self.encode(batch.src, batch.src_mask, rng=ctx)
        logits = self.logits(batch.tgt_in, memory, batch.src_mask, ctx)
        return T.cross_entropy(logits, batch.tgt_out, mask=batch.tgt_mask, reduction="sum")

    def adversarial_loss(self, clean: Batch | None, noisy: Batch | None, train: bool = False,
                         rng: Rng | None = None, clean_memory: Tensor | None = None,
                         ctx: _Ctx | None = None) -> Tensor:
        """Batch-summed -log D(clean) + -log(1 - D(noisy))."""
        return self._adversarial(clean, noisy, train, rng, clean_memory, ctx)[0]

    def _adversarial(self, clean, noisy, train, rng, clean_memory, ctx):
        ctx = ctx or self._ctx(train, rng)
        terms, logits = [], {}
        if clean is not None and len(clean):
            mem = clean_memory if clean_memory is not None else self.encode(clean.src, clean.src_mask, rng=ctx)
            z = self.discriminator_logit(mem, None if self.config.reverse_clean_term else "detach")
            terms.append(T.sum(T.softplus(-z)))
            logits["clean"] = z.values
        if noisy is not None and len(noisy):
            mem = self.encode(noisy.src, noisy.src_mask, rng=ctx)
            z = self.discriminator_logit(mem)
            terms.append(T.sum(T.softplus(z)))
            logits["noisy"] = z.values
        else:
            warnings.warn("adversarial loss computed without noisy samples", CleanOnlyAdversarialWarning,
                          stacklevel=3)
        if not terms:
            raise InputContractError("adversarial loss needs at least one sample")
        loss = terms[0] if len(terms) == 1 else terms[0] + terms[1]
        return loss, logits

    def loss_terms(self, clean: Batch, noisy: Batch | None, alpha: float, train: bool = False,
                   rng: Rng | None = None) -> dict:
        """Joint loss plus its parts; the adversarial graph is skipped when it cannot contribute."""
        if alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {alpha}")
        ctx = self._ctx(train, rng)
        memory = self.encode(clean.src, clean.src_mask, rng=ctx)
        s2s = self.s2s_loss(clean, memory=memory, ctx=ctx)
        out = {"s2s": s2s, "adv": None, "joint": s2s, "disc_logits": {}}
        if alpha > 0 and noisy is not None and len(noisy):
            adv, logits = self._adversarial(clean, noisy, train, rng, memory, ctx)
            out.update(adv=adv, joint=s2s + adv * alpha, disc_logits=logits)
        return out

    def joint_loss(self, clean: Batch, noisy: Batch | None, alpha: float, train: bool = False,
                   rng: Rng | None = None) -> Tensor:
        return self.loss_terms(clean, noisy, alpha, train, rng)["joint"]

    # ------------------------------------------------------------- decoding
    def greedy_decode(self, src: np.ndarray, src_mask: np.ndarray | None = None,
                      max_target_len: int | None = None) -> list[DecodeResult]:
        """Argmax decoding for a padded batch of sources."""
        src = np.atleast_2d(src)
        if src_mask is None:
            src_mask = src != PAD
        limit = min(max_target_len or self.config.max_target_len, self.config.max_target_len)
        ctx = self._ctx(False, None)
        B = src.shape[0]
        with T.no_grad():
            memory = self.encode(src, src_mask)
            seq = np.full((B, 1), BOS, dtype=np.int64)
            done = np.zeros(B, dtype=bool)
            out: list[list[int]] = [[] for _ in range(B)]
            for _ in range(limit):
                logp = T.log_softmax(self.logits(seq, memory, src_mask, ctx)).values[:, -1, :]
                nxt = logp.argmax(axis=-1)
                for b in range(B):
                    if not done[b]:
                        if nxt[b] == EOS:
                            done[b] = True
                        else:
                            out[b].append(int(nxt[b]))
                if done.all():
                    break
                seq = np.concatenate([seq, nxt[:, None]], axis=1)
        return [DecodeResult(o, not d) for o, d in zip(out, done)]

    def beam_decode(self, src: Sequence[int], beam: int = 1,
                    max_target_len: int | None = None) -> DecodeResult:
        """Beam search for one source; sum of log-probabilities, no length penalty."""
        if beam < 1:
            raise ConfigError("beam width must be >= 1")
        src = np.asarray(src, dtype=np.int64)[None, :]
        mask = src != PAD
        limit = min(max_target_len or self.config.max_target_len, self.config.max_target_len)
        ctx = self._ctx(False, None)
        with T.no_grad():
            memory = self.encode(src, mask)
            alive: list[tuple[float, list[int]]] = [(0.0, [])]
            finished: list[tuple[float, list[int]]] = []
            for _ in range(limit):
                seq = np.array([[BOS] + ids for _, ids in alive], dtype=np.int64)
                n = len(alive)
                mem = Tensor(np.repeat(memory.values, n, axis=0))
                logp = T.log_softmax(self.logits(seq, mem, np.repeat(mask, n, axis=0), ctx)).values[:, -1, :]
                cands = []
                for bi, (score, ids) in enumerate(alive):
                    top = np.argsort(-logp[bi], kind="stable")[:beam]
                    cands.extend((score + float(logp[bi, t]), bi, int(t)) for t in top)
                cands.sort(key=lambda c: (-c[0], c[1], c[2]))
                prev, alive = alive, []
                for score, bi, t in cands[:beam]:
                    if t == EOS:
                        finished.append((score, list(prev[bi][1])))
                    else:
                        alive.append((score, prev[bi][1] + [t]))
                if len(finished) >= beam or not alive:
                    break
        if finished:
            score, ids = sorted(finished, key=lambda c: -c[0])[0]
            return DecodeResult(ids, False, score)
        score, ids = alive[0]
        return DecodeResult(ids, True, score)


class TaggingBaseline(_Network):
    """Shared encoder plus a per-token BIO softmax head (``dec.tag``)."""

    kind = "tagger"

    def __init__(self, config: ModelConfig, vocab: Vocab, tags: Sequence[str], seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        if config.num_tags != len(tags):
            raise ConfigError(f"num_tags {config.num_tags} != {len(tags)} tags")
        if config.vocab_size != len(vocab):
            raise ConfigError(f"vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
        self.tags = list(tags)
        self.tag_index = {t: i for i, t in enumerate(self.tags)}
        super().__init__(config, vocab, params if params is not None else init_params(config, seed, tagger=True))

    def tag_logits(self, batch: Batch, train: bool = False, rng: Rng | None = None) -> Tensor:
        states = self.encode(batch.src, batch.src_mask, train, rng)
        return self._linear(states, "dec.tag")

    def tag_loss(self, batch: Batch, train: bool = False, rng: Rng | None = None) -> Tensor:
        if batch.tag_ids is None:
            raise InputContractError("batch has no tag ids")
        mask = batch.src_mask.copy()
        mask[:, 0] = False
        return T.cross_entropy(self.tag_logits(batch, train, rng), batch.tag_ids, mask=mask)

    def tagging_baseline_decode(self, src: np.ndarray, src_mask: np.ndarray | None = None) -> list[list[str]]:
        """One BIO label per real (non-DOM, non-pad) source token."""
        src = np.atleast_2d(src)
        if src_mask is None:
            src_mask = src != PAD
        batch = Batch([""] * len(src), Domain.CLEAN, src, src_mask)
        with T.no_grad():
            pred = self.tag_logits(batch).values.argmax(axis=-1)
        return [[self.tags[t] for t in row[1:int(m.sum())]] for row, m in zip(pred, src_mask)]

    def predict_spans(self, examples: Sequence[RawExample], chunk: int = 64):
        out = []
        for i in range(0, len(examples), chunk):
            src, mask = pad_sources(examples[i:i + chunk], self.vocab, self.config.max_source_len)
            out.extend(bio_to_spans(t) for t in self.tagging_baseline_decode(src, mask))
        return out
