"""Corpus ingestion, BIO handling, noise injection, vocabulary and batching.

Corpora use the usual Snips directory layout: ``seq.in`` holds one
whitespace-tokenised utterance per line, ``seq.out`` the aligned BIO tags,
and an optional ``label`` file the intent (read, never used).
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import os
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError, InputContractError, NoiseError
from .rng import Rng

PAD, UNK, BOS, EOS, DOM = 0, 1, 2, 3, 4
SPECIALS = ("[PAD]", "[UNK]", "[BOS]", "[EOS]", "[DOM]")

META_FILE = "meta.jsonl"


class Domain(str, enum.Enum):
    CLEAN = "clean"
    NOISY = "noisy"


class NoiseKind(str, enum.Enum):
    DROP = "drop"
    REPLACE = "replace"
    SWAP = "swap"


@dataclass(frozen=True)
class SlotSpan:
    start: int
    end: int
    label: str


@dataclass(frozen=True)
class Perturbation:
    kind: NoiseKind
    position: tuple[int, ...]
    in_slot: bool


@dataclass
class RawExample:
    id: str
    tokens: list[str]
    bio_tags: list[str] | None
    domain: Domain = Domain.CLEAN
    clean_ref_id: str | None = None
    perturbation: Perturbation | None = None
    intent: str | None = None

    def __post_init__(self):
        if self.bio_tags is None:
            if self.domain is not Domain.NOISY:
                raise DataError(f"{self.id}: clean examples need BIO tags")
        elif len(self.tokens) != len(self.bio_tags):
            raise DataError(f"{self.id}: {len(self.tokens)} tokens vs {len(self.bio_tags)} tags")

    @property
    def spans(self) -> list[SlotSpan]:
        return bio_to_spans(self.bio_tags or [])


# ------------------------------------------------------------------ loading

def _read_lines(path: Path) -> list[str]:
    with open(path, encoding="utf-8", newline="") as f:
        text = f.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _check_tag(tag: str, lineno: int, path: Path) -> None:
    if tag == "O" or tag.startswith("B-") or tag.startswith("I-"):
        if tag != "O" and len(tag) == 2:
            raise DataError(f"{path}:{lineno}: empty label in tag {tag!r}")
        return
    raise DataError(f"{path}:{lineno}: unknown tag scheme in {tag!r} (expected B-/I-/O)")


def load_split(directory: str | os.PathLike) -> list[RawExample]:
    """Read one split directory.

    Lines listed in an accompanying ``meta.jsonl`` (forge output) are loaded
    as noisy examples linked to their clean source; all others are clean and
    get the zero-padded line index as id.
    """
    d = Path(directory)
    src, tags = d / "seq.in", d / "seq.out"
    if not src.exists() or not tags.exists():
        raise DataError(f"{d}: expected seq.in and seq.out")
    tok_lines = _read_lines(src)
    tag_lines = _read_lines(tags)
    if len(tok_lines) != len(tag_lines):
        raise DataError(f"{d}: seq.in has {len(tok_lines)} lines, seq.out has {len(tag_lines)}")
    intents = _read_lines(d / "label") if (d / "label").exists() else None
    meta = read_meta(d) if (d / META_FILE).exists() else {}

    out = []
    for i, (tl, gl) in enumerate(zip(tok_lines, tag_lines)):
        lineno = i + 1
        toks, tgs = tl.split(), gl.split()
        if len(toks) != len(tgs):
            raise DataError(f"{src}:{lineno}: {len(toks)} tokens but {len(tgs)} tags")
        for t in tgs:
            _check_tag(t, lineno, tags)
        intent = intents[i] if intents is not None and i < len(intents) else None
        m = meta.get(i)
        if m is None:
            out.append(RawExample(f"{i:06d}", toks, tgs, intent=intent))
        else:
            pert = Perturbation(NoiseKind(m["kind"]), tuple(m["position"]), bool(m["in_slot"]))
            out.append(RawExample(m["id"], toks, tgs, Domain.NOISY, m["clean_ref_id"], pert, intent))
    return out


def read_meta(directory: str | os.PathLike) -> dict[int, dict]:
    path = Path(directory) / META_FILE
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[int(rec["line"])] = rec
    return out


def write_split(directory: str | os.PathLike, examples: Sequence[RawExample],
                write_meta: bool = False) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "seq.in", "w", encoding="utf-8", newline="\n") as f:
        f.writelines(" ".join(ex.tokens) + "\n" for ex in examples)
    with open(d / "seq.out", "w", encoding="utf-8", newline="\n") as f:
        f.writelines(" ".join(ex.bio_tags or []) + "\n" for ex in examples)
    if all(ex.intent is not None for ex in examples) and examples:
        with open(d / "label", "w", encoding="utf-8", newline="\n") as f:
            f.writelines(ex.intent + "\n" for ex in examples)
    if write_meta:
        with open(d / META_FILE, "w", encoding="utf-8", newline="\n") as f:
            for i, ex in enumerate(examples):
                if ex.domain is Domain.NOISY and ex.perturbation is not None:
                    p = ex.perturbation
                    rec = {"id": ex.id, "clean_ref_id": ex.clean_ref_id, "kind": p.kind.value,
                           "position": list(p.position), "in_slot": p.in_slot, "line": i}
                    f.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------- BIO

def bio_to_spans(bio_tags: Sequence[str]) -> list[SlotSpan]:
    """Maximal chunks; an I-X that does not continue an X chunk opens a new one."""
    spans: list[SlotSpan] = []
    start, label = None, None
    for i, tag in enumerate(bio_tags):
        if tag == "O":
            if start is not None:
                spans.append(SlotSpan(start, i, label))
            start, label = None, None
            continue
        prefix, lab = tag[:1], tag[2:]
        if prefix == "B" or start is None or lab != label:
            if start is not None:
                spans.append(SlotSpan(start, i, label))
            start, label = i, lab
    if start is not None:
        spans.append(SlotSpan(start, len(bio_tags), label))
    return spans


def spans_to_bio(n: int, spans: Iterable[SlotSpan]) -> list[str]:
    tags = ["O"] * n
    for s in spans:
        tags[s.start] = f"B-{s.label}"
        for j in range(s.start + 1, s.end):
            tags[j] = f"I-{s.label}"
    return tags


def label_token(label: str) -> str:
    return label.upper()


def gold_slots(tokens: Sequence[str], spans: Iterable[SlotSpan]) -> list[tuple[str, tuple[str, ...]]]:
    """(label token, value tokens) pairs in span order."""
    return [(label_token(s.label), tuple(tokens[s.start:s.end])) for s in spans]


def make_target(tokens: Sequence[str], spans: Sequence[SlotSpan], vocab: "Vocab | None" = None) -> list[str]:
    """Span words followed by the span's label token, in span order; O words are dropped."""
    out: list[str] = []
    for s in spans:
        if not 0 <= s.start < s.end <= len(tokens):
            raise DataError(f"span {s} out of range for {len(tokens)} tokens")
        lab = label_token(s.label)
        if vocab is not None and not vocab.is_label(vocab.id(lab)):
            raise DataError(f"label token {lab!r} is not in the vocabulary")
        out.extend(tokens[s.start:s.end])
        out.append(lab)
    return out


# -------------------------------------------------------------------- vocab

class Vocab:
    """Reserved specials, then label tokens, then words by frequency."""

    def __init__(self, tokens: Sequence[str], num_labels: int):
        self.tokens = list(tokens)
        self.num_labels = num_labels
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("vocabulary tokens are not unique")
        if tuple(self.tokens[:len(SPECIALS)]) != SPECIALS:
            raise DataError("vocabulary does not start with the reserved specials")

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def is_label(self, idx: int) -> bool:
        return len(SPECIALS) <= idx < len(SPECIALS) + self.num_labels

    @property
    def label_tokens(self) -> list[str]:
        return self.tokens[len(SPECIALS):len(SPECIALS) + self.num_labels]

    @property
    def word_tokens(self) -> list[str]:
        return self.tokens[len(SPECIALS) + self.num_labels:]

    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.num_labels}\n".encode())
        for t in self.tokens:
            h.update(t.encode("utf-8") + b"\n")
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens and self.num_labels == other.num_labels


def label_inventory(corpora: Iterable[Iterable[RawExample]]) -> list[str]:
    labels = set()
    for corpus in corpora:
        for ex in corpus:
            for t in ex.bio_tags or []:
                if t != "O":
                    labels.add(t[2:])
    return sorted(labels)


def build_vocab(corpora: Sequence[Sequence[RawExample]], labels: Iterable[str] | None = None) -> Vocab:
    """Vocabulary over the words of ``corpora`` (clean and noisy training text)."""
    if not corpora or not any(len(c) for c in corpora):
        raise DataError("cannot build a vocabulary from empty corpora")
    if labels is None:
        labels = label_inventory(corpora)
    label_toks = sorted({label_token(lab) for lab in labels})
    for lt in label_toks:
        if lt in SPECIALS:
            raise DataError(f"slot label {lt!r} collides with a reserved token")
    counts: Counter[str] = Counter()
    for corpus in corpora:
        for ex in corpus:
            counts.update(ex.tokens)
    taken = set(SPECIALS) | set(label_toks)
    words = sorted((w for w in counts if w not in taken), key=lambda w: (-counts[w], w))
    return Vocab(list(SPECIALS) + label_toks + words, len(label_toks))


# -------------------------------------------------------------------- noise

@dataclass(frozen=True)
class NoiseConfig:
    ratio: float = 0.2
    strategies: tuple[NoiseKind, ...] = (NoiseKind.DROP, NoiseKind.REPLACE, NoiseKind.SWAP)
    protect_slots: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigError(f"noise ratio must be in [0, 1], got {self.ratio}")
        if not self.strategies:
            raise ConfigError("at least one noise strategy is required")
        object.__setattr__(self, "strategies", tuple(NoiseKind(s) for s in self.strategies))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _slot_mask(ex: RawExample) -> list[bool]:
    return [t != "O" for t in ex.bio_tags]


def _candidates(kind: NoiseKind, ex: RawExample, protect: bool, n_replacements: int) -> list[int]:
    n = len(ex.tokens)
    in_slot = _slot_mask(ex) if ex.bio_tags else [False] * n
    ok = [not (protect and s) for s in in_slot]
    if kind is NoiseKind.DROP:
        return [i for i in range(n) if ok[i]] if n >= 2 else []
    if kind is NoiseKind.REPLACE:
        # need at least one word different from the original
        return [i for i in range(n) if ok[i]] if n_replacements >= 2 else []
    if n < 2:
        return []
    return [i for i in range(n) if ok[i] and ok[_swap_partner(i, n)]]


def _swap_partner(i: int, n: int) -> int:
    return i + 1 if i + 1 < n else i - 1


def _perturb(ex: RawExample, cfg: NoiseConfig, rng: Rng, replacements: Sequence[str],
             noisy_id: str) -> RawExample | None:
    """Apply exactly one operation to ``ex`` or return None when no operation fits."""
    kinds = [k for k in cfg.strategies if _candidates(k, ex, cfg.protect_slots, len(replacements))]
    if not kinds:
        return None
    kind = rng.choice(kinds)
    pos = int(rng.choice(_candidates(kind, ex, cfg.protect_slots, len(replacements))))
    tokens, tags = list(ex.tokens), list(ex.bio_tags)
    slot = _slot_mask(ex)
    if kind is NoiseKind.DROP:
        removed = tags[pos]
        del tokens[pos], tags[pos]
        # keep the chunk that lost its first word well formed
        if removed.startswith("B-") and pos < len(tags) and tags[pos] == "I-" + removed[2:]:
            tags[pos] = removed
        position, in_slot = (pos,), slot[pos]
    elif kind is NoiseKind.REPLACE:
        orig = tokens[pos]
        while True:
            word = rng.choice(replacements)
            if word != orig:
                break
        tokens[pos] = word
        position, in_slot = (pos,), slot[pos]
    else:
        other = _swap_partner(pos, len(tokens))
        tokens[pos], tokens[other] = tokens[other], tokens[pos]
        position, in_slot = (pos, other), slot[pos] or slot[other]
    return RawExample(noisy_id, tokens, tags, Domain.NOISY, ex.id,
                      Perturbation(kind, position, in_slot), ex.intent)


def inject_noise(corpus: Sequence[RawExample], cfg: NoiseConfig,
                 replacement_words: Sequence[str] | None = None) -> tuple[list[RawExample], list[RawExample]]:
    """Perturb ``round(ratio * len(corpus))`` sentences, one operation each.

    Returns ``(noisy, untouched)``.  Selection walks a seeded permutation and
    skips sentences that have no admissible operation; each sentence's edit
    uses its own substream so results do not depend on visiting order.
    """
    if not corpus:
        raise NoiseError("cannot inject noise into an empty corpus")
    if replacement_words is None:
        replacement_words = sorted({w for ex in corpus for w in ex.tokens})
    replacement_words = list(replacement_words)
    target = round_half_up(cfg.ratio * len(corpus))
    rng = Rng(cfg.seed)
    order = rng.substream(0).permutation(len(corpus))
    chosen: dict[int, RawExample] = {}
    skipped = 0
    for idx in order:
        if len(chosen) == target:
            break
        idx = int(idx)
        ex = corpus[idx]
        noisy = _perturb(ex, cfg, rng.substream(1, idx), replacement_words, f"n{ex.id}")
        if noisy is None:
            skipped += 1
            continue
        chosen[idx] = noisy
    if len(chosen) < target:
        raise NoiseError(f"only {len(chosen)} of {target} sentences admit a perturbation "
                         f"({skipped} ineligible, protect_slots={cfg.protect_slots})")
    noisy = [chosen[i] for i in sorted(chosen)]
    untouched = [ex for i, ex in enumerate(corpus) if i not in chosen]
    return noisy, untouched


def forge_corpus(corpus: Sequence[RawExample], cfg: NoiseConfig,
                 replacement_words: Sequence[str] | None = None) -> list[RawExample]:
    """Whole corpus in original order with the selected sentences replaced."""
    noisy, _ = inject_noise(corpus, cfg, replacement_words)
    by_ref = {ex.clean_ref_id: ex for ex in noisy}
    return [by_ref.get(ex.id, ex) for ex in corpus]


def split_domains(examples: Iterable[RawExample]) -> tuple[list[RawExample], list[RawExample]]:
    clean, noisy = [], []
    for ex in examples:
        (noisy if ex.domain is Domain.NOISY else clean).append(ex)
    return clean, noisy


# ----------------------------------------------------------------- batching

@dataclass
class Batch:
    """Padded id arrays; ``src`` always starts with the DOM token.

    Target arrays are present only for clean batches: ``tgt_in`` is BOS plus
    the target without its last token and ``tgt_out`` ends in EOS.
    """

    ids: list[str]
    domain: Domain
    src: np.ndarray
    src_mask: np.ndarray
    tgt_in: np.ndarray | None = None
    tgt_out: np.ndarray | None = None
    tgt_mask: np.ndarray | None = None
    tag_ids: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)


def encode_source(tokens: Sequence[str], vocab: Vocab) -> list[int]:
    return [DOM] + vocab.encode(tokens)


def pad_sources(examples: Sequence[RawExample], vocab: Vocab, max_source_len: int = 64,
                extra_pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """DOM-prefixed, right-padded source ids and their non-pad mask."""
    srcs = [encode_source(ex.tokens, vocab) for ex in examples]
    for ex, s in zip(examples, srcs):
        if len(s) > max_source_len:
            raise DataError(f"{ex.id}: source length {len(s)} exceeds {max_source_len}")
    S = max(len(s) for s in srcs) + extra_pad
    src = np.full((len(srcs), S), PAD, dtype=np.int64)
    for i, s in enumerate(srcs):
        src[i, :len(s)] = s
    return src, src != PAD


def collate(examples: Sequence[RawExample], vocab: Vocab, max_source_len: int = 64,
            max_target_len: int = 64, with_targets: bool | None = None,
            tag_index: dict[str, int] | None = None, src_pad: int = 0) -> Batch:
    """Pad a list of examples into a :class:`Batch`.

    Targets are built only for clean examples; asking for targets on a batch
    that contains noisy members is a contract violation.
    """
    if not examples:
        raise DataError("cannot collate an empty batch")
    domains = {ex.domain for ex in examples}
    if len(domains) != 1:
        raise DataError("a sub-batch must hold a single domain")
    domain = domains.pop()
    if with_targets is None:
        with_targets = domain is Domain.CLEAN
    if with_targets and domain is not Domain.CLEAN:
        raise InputContractError("generation targets requested for noisy examples")

    src, src_mask = pad_sources(examples, vocab, max_source_len, src_pad)
    batch = Batch([ex.id for ex in examples], domain, src, src_mask)

    if with_targets:
        tgts = [vocab.encode(make_target(ex.tokens, ex.spans, vocab)) + [EOS] for ex in examples]
        for ex, t in zip(examples, tgts):
            if len(t) > max_target_len:
                raise DataError(f"{ex.id}: target length {len(t)} exceeds {max_target_len}")
        T = max(len(t) for t in tgts)
        tgt_out = np.full((len(tgts), T), PAD, dtype=np.int64)
        tgt_in = np.full((len(tgts), T), PAD, dtype=np.int64)
        for i, t in enumerate(tgts):
            tgt_out[i, :len(t)] = t
            tgt_in[i, 0] = BOS
            tgt_in[i, 1:len(t)] = t[:-1]
        batch.tgt_in, batch.tgt_out, batch.tgt_mask = tgt_in, tgt_out, tgt_out != PAD
    if tag_index is not None and all(ex.bio_tags is not None for ex in examples):
        tags = np.zeros(src.shape, dtype=np.int64)
        for i, ex in enumerate(examples):
            tags[i, 1:1 + len(ex.bio_tags)] = [tag_index.get(t, 0) for t in ex.bio_tags]
        batch.tag_ids = tags
    return batch


def allocate(batch_size: int, n_clean: int, n_noisy: int) -> tuple[int, int]:
    """Largest-remainder split of one batch between clean and noisy members."""
    if n_noisy == 0:
        return batch_size, 0
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2 when noisy data is present")
    total = n_clean + n_noisy
    quotas = [batch_size * n_clean / total, batch_size * n_noisy / total]
    base = [int(math.floor(q)) for q in quotas]
    rest = batch_size - sum(base)
    # ties go to the clean side
    for k in sorted(range(2), key=lambda k: (-(quotas[k] - base[k]), k))[:rest]:
        base[k] += 1
    c, n = base
    if n == 0:
        c, n = c - 1, 1
    if c == 0:
        c, n = 1, n - 1
    return c, n


def batch_iter(clean: Sequence[RawExample], noisy: Sequence[RawExample], batch_size: int,
               seed: int, epoch: int) -> Iterator[tuple[list[RawExample], list[RawExample]]]:
    """Mixed (clean, noisy) example groups for one epoch.

    The epoch ends when every clean example has been visited once; noisy
    examples are drawn from their own shuffled order, wrapping if needed.
    """
    c_per, n_per = allocate(batch_size, len(clean), len(noisy))
    rng = Rng(seed).substream(2, epoch)
    corder = rng.substream(0).permutation(len(clean))
    norder = rng.substream(1).permutation(len(noisy)) if noisy else np.zeros(0, dtype=np.int64)
    npos = 0
    for start in range(0, len(clean), c_per):
        cb = [clean[int(i)] for i in corder[start:start + c_per]]
        nb = []
        for _ in range(n_per):
            nb.append(noisy[int(norder[npos % len(noisy)])])
            npos += 1
        yield cb, nb
