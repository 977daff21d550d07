"""Slot parsing, multiset slot F1 per split, and in-slot correction analysis."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .data import BOS, EOS, PAD, Domain, RawExample, Vocab, gold_slots, label_token, pad_sources
from .errors import DataError

Slot = tuple[str, tuple[str, ...]]  # (label token, value tokens)


@dataclass(frozen=True)
class PredictedSlot:
    value: tuple[str, ...]
    label: str

    def as_pair(self) -> Slot:
        return (self.label, self.value)


def parse_generated(tokens: Sequence[int | str], vocab: Vocab) -> tuple[list[PredictedSlot], bool]:
    """Invert the generation format: words accumulate until a label token closes them.

    Trailing words without a label, and labels with nothing to close, are
    dropped and flag the sequence as malformed.
    """
    slots: list[PredictedSlot] = []
    pending: list[str] = []
    malformed = False
    for tok in tokens:
        if isinstance(tok, str):
            idx, word = vocab.id(tok), tok
        else:
            idx = int(tok)
            word = vocab.tokens[idx]
        if idx in (PAD, BOS, EOS):
            continue
        if vocab.is_label(idx):
            if pending:
                slots.append(PredictedSlot(tuple(pending), vocab.tokens[idx]))
                pending = []
            else:
                malformed = True
        else:
            pending.append(word)
    if pending:
        malformed = True
    return slots, malformed


@dataclass
class Score:
    precision: float
    recall: float
    f1: float
    tp: int
    n_pred: int
    n_gold: int

    @property
    def support(self) -> int:
        return self.n_gold


def prf(tp: int, n_pred: int, n_gold: int) -> Score:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    # 2PR/(P+R) reduced to a single correctly rounded division
    f = 2 * tp / (n_pred + n_gold) if tp else 0.0
    return Score(p, r, f, tp, n_pred, n_gold)


def match_count(pred: Iterable[Slot], gold: Iterable[Slot]) -> int:
    """Greedy one-to-one matching on exact (label, value) equality."""
    remaining = Counter(gold)
    tp = 0
    for s in pred:
        if remaining[s] > 0:
            remaining[s] -= 1
            tp += 1
    return tp


def slot_f1(predictions: Sequence[Sequence[Slot]], golds: Sequence[Sequence[Slot]]) -> Score:
    """Micro-averaged precision/recall/F1 over utterances."""
    if len(predictions) != len(golds):
        raise DataError(f"{len(predictions)} predictions vs {len(golds)} gold utterances")
    tp = n_pred = n_gold = 0
    for p, g in zip(predictions, golds):
        tp += match_count(p, g)
        n_pred += len(p)
        n_gold += len(g)
    return prf(tp, n_pred, n_gold)


# ------------------------------------------------------------------ reports

@dataclass
class Record:
    """One decoded utterance, as written to the audit file."""

    id: str
    domain: str
    gold: list[Slot]
    predicted: list[Slot]
    malformed: bool = False
    verdict: str = ""

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "domain": self.domain,
            "gold": [{"value": " ".join(v), "label": lab} for lab, v in self.gold],
            "predicted": [{"value": " ".join(v), "label": lab} for lab, v in self.predicted],
            "malformed": self.malformed,
            "verdict": self.verdict,
        }


@dataclass
class EvalReport:
    splits: dict[str, Score]
    malformed_rate: float
    n_utterances: dict[str, int]
    excluded_noisy: int = 0
    matching: str = "multiset (label, value) exact match"

    def to_json(self) -> dict:
        out = {"splits": {}, "malformed_rate": self.malformed_rate,
               "n_utterances": self.n_utterances,
               "diagnostics": {"excluded_noisy": self.excluded_noisy}, "matching": self.matching}
        for name, s in self.splits.items():
            out["splits"][name] = {"precision": s.precision, "recall": s.recall, "f1": s.f1,
                                   "support": s.support, "tp": s.tp, "n_pred": s.n_pred}
        return out


def score_records(records: Sequence[Record], excluded_noisy: int = 0) -> EvalReport:
    """Pure scoring of decoded records; ``global`` is the unweighted union."""
    by = {"clean": [r for r in records if r.domain == Domain.CLEAN.value],
          "noisy": [r for r in records if r.domain == Domain.NOISY.value]}
    splits = {}
    counts = {}
    for name, recs in by.items():
        if name == "noisy" and not recs:
            continue
        splits[name] = slot_f1([r.predicted for r in recs], [r.gold for r in recs])
        counts[name] = len(recs)
    splits["global"] = slot_f1([r.predicted for r in records], [r.gold for r in records])
    counts["global"] = len(records)
    rate = sum(r.malformed for r in records) / len(records) if records else 0.0
    return EvalReport(splits, rate, counts, excluded_noisy)


def predict_slots(model, examples: Sequence[RawExample], beam: int = 1,
                  chunk: int = 64) -> list[tuple[list[Slot], bool]]:
    """Decode ``examples`` with either model kind into (slots, malformed) pairs."""
    if getattr(model, "kind", "") == "tagger":
        out = []
        for ex, spans in zip(examples, model.predict_spans(examples, chunk)):
            out.append((gold_slots(ex.tokens, spans), False))
        return out
    out = []
    for i in range(0, len(examples), chunk):
        src, mask = pad_sources(examples[i:i + chunk], model.vocab, model.config.max_source_len)
        if beam == 1:
            results = model.greedy_decode(src, mask)
        else:
            results = [model.beam_decode(row[m], beam) for row, m in zip(src, mask)]
        for r in results:
            slots, bad = parse_generated(r.ids, model.vocab)
            out.append(([s.as_pair() for s in slots], bad or r.truncated))
    return out


def resolve_gold(ex: RawExample, references: Mapping[str, RawExample]) -> list[Slot] | None:
    """Gold slots of ``ex``: its own for clean examples, the clean reference's for noisy ones."""
    if ex.domain is Domain.CLEAN:
        return gold_slots(ex.tokens, ex.spans)
    ref = references.get(ex.clean_ref_id) if ex.clean_ref_id else None
    if ref is None:
        return None
    return gold_slots(ref.tokens, ref.spans)


def evaluate(model, clean_test: Sequence[RawExample], noisy_test: Sequence[RawExample] = (),
             references: Mapping[str, RawExample] | None = None, beam: int = 1,
             cached: Sequence[tuple[list[Slot], bool]] | None = None) -> tuple[EvalReport, list[Record]]:
    """Decode and score the clean, noisy and merged (global) test sets.

    ``references`` maps clean ids to examples; by default the clean test set
    itself.  Noisy examples whose reference cannot be found are excluded and
    counted in the report diagnostics.
    """
    refs = dict(references) if references is not None else {ex.id: ex for ex in clean_test}
    kept: list[RawExample] = list(clean_test)
    golds: list[list[Slot]] = [resolve_gold(ex, refs) for ex in clean_test]
    excluded = 0
    for ex in noisy_test:
        g = resolve_gold(ex, refs)
        if g is None:
            excluded += 1
            continue
        kept.append(ex)
        golds.append(g)
    preds = list(cached) if cached is not None else predict_slots(model, kept, beam)
    records = [Record(ex.id, ex.domain.value, g, p, bad)
               for ex, g, (p, bad) in zip(kept, golds, preds)]
    return score_records(records, excluded), records


# --------------------------------------------------------------- correction

@dataclass
class CorrectionReport:
    sampled: int = 0
    in_slot_error: int = 0
    corrected: int = 0
    near_miss: int = 0
    baseline_corrected: int | None = None
    verdicts: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("verdicts")
        return d


def _contains(seq: Sequence[str], sub: Sequence[str]) -> bool:
    n = len(sub)
    return any(tuple(seq[i:i + n]) == tuple(sub) for i in range(len(seq) - n + 1))


def _token_edit_distance(a: Sequence[str], b: Sequence[str]) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def damaged_slots(noisy: RawExample, ref: RawExample) -> list[Slot]:
    """Gold slots of ``ref`` touched by the perturbation and absent from the noisy text.

    A slot whose clean value still occurs verbatim in the noisy utterance can
    be recovered by span tagging, so it does not count as an in-slot error.
    """
    p = noisy.perturbation
    if p is None or not p.in_slot:
        return []
    out = []
    for s in ref.spans:
        if any(s.start <= pos < s.end for pos in p.position):
            value = tuple(ref.tokens[s.start:s.end])
            if not _contains(noisy.tokens, value):
                out.append((label_token(s.label), value))
    return out


def correction_analysis(model, noisy_test: Sequence[RawExample], references: Mapping[str, RawExample],
                        baseline=None, cached: Sequence[tuple[list[Slot], bool]] | None = None,
                        baseline_cached: Sequence[tuple[list[Slot], bool]] | None = None) -> CorrectionReport:
    """Count in-slot errors in a forged noisy set and how many the model restores.

    An utterance counts as corrected when at least one damaged slot comes
    back with its exact clean value, even if other damaged slots do not.
    """
    if any(ex.domain is Domain.NOISY and ex.perturbation is None for ex in noisy_test):
        raise DataError("noisy examples lack perturbation metadata; regenerate the set with noise-gen")
    noisy = [ex for ex in noisy_test if ex.domain is Domain.NOISY]
    errors = []
    for ex in noisy:
        ref = references.get(ex.clean_ref_id)
        if ref is None:
            continue
        dmg = damaged_slots(ex, ref)
        if dmg:
            errors.append((ex, dmg))
    report = CorrectionReport(sampled=len(noisy), in_slot_error=len(errors))
    examples = [ex for ex, _ in errors]
    preds = list(cached) if cached is not None else (predict_slots(model, examples) if examples else [])
    for (ex, dmg), (pred, _) in zip(errors, preds):
        pset = set(pred)
        hit = any(s in pset for s in dmg)
        near = not hit and any(lab == plab and _token_edit_distance(val, pval) == 1
                               for lab, val in dmg for plab, pval in pred)
        report.corrected += hit
        report.near_miss += near
        report.verdicts.append({"id": ex.id, "clean_ref_id": ex.clean_ref_id,
                                "kind": ex.perturbation.kind.value,
                                "damaged": [{"value": " ".join(v), "label": lab} for lab, v in dmg],
                                "predicted": [{"value": " ".join(v), "label": lab} for lab, v in pred],
                                "verdict": "corrected" if hit else ("near_miss" if near else "not_corrected")})
    if baseline is not None or baseline_cached is not None:
        bpreds = list(baseline_cached) if baseline_cached is not None else (
            predict_slots(baseline, examples) if examples else [])
        report.baseline_corrected = sum(any(s in set(p) for s in dmg)
                                        for (_, dmg), (p, _) in zip(errors, bpreds))
    return report


def write_report(path: str | Path, report: EvalReport, correction: CorrectionReport | None = None) -> None:
    out = {"eval": report.to_json()}
    if correction is not None:
        out["correction"] = correction.to_json()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(out, f, indent=2, sort_keys=True)
        f.write("\n")


def write_audit(path: str | Path, records: Iterable[Record]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
