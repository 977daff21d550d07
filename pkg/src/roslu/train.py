"""Joint training: one mixed batch, one backward pass, one SGD step per iteration."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import (RawExample, Vocab, batch_iter, collate, label_inventory)
from .errors import CheckpointError, ChecksumError, ConfigError, DataError, VocabMismatchError
from .evaluate import EvalReport, evaluate
from .model import ModelConfig, RoSLU, TaggingBaseline
from .rng import Rng

log = logging.getLogger(__name__)

MAGIC = b"ROSLUCKP"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    alpha: float = 0.0
    lr: float = 0.001
    batch_size: int = 32
    max_epochs: int = 50
    max_steps: int | None = None
    patience: int = 10
    seed: int = 0
    eval_every: int = 200
    mode: str = "global"  # or "clean_only"
    momentum: float = 0.0
    target_f1: float | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.mode not in ("global", "clean_only"):
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Corpora:
    """Everything a run reads; noisy members carry ``clean_ref_id`` into ``references``."""

    vocab: Vocab
    train_clean: list[RawExample]
    train_noisy: list[RawExample]
    dev_clean: list[RawExample]
    dev_noisy: list[RawExample] = field(default_factory=list)
    references: dict[str, RawExample] = field(default_factory=dict)
    tags: list[str] = field(default_factory=list)


def bio_tag_set(corpora: Sequence[Sequence[RawExample]]) -> list[str]:
    labels = label_inventory(corpora)
    return ["O"] + [f"{p}-{lab}" for lab in labels for p in "BI"]


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    best_dev_f1: float = -1.0
    best_step: int = 0
    best_checkpoint_path: str | None = None
    history: list[dict] = field(default_factory=list)
    diverged: bool = False
    stop_reason: str = ""


@dataclass
class TrainResult:
    model: RoSLU | TaggingBaseline
    state: TrainState
    best_report: EvalReport | None


# --------------------------------------------------------------- checkpoint

def save_checkpoint(path: str | Path, model, extra: dict | None = None) -> None:
    """Write header JSON, little-endian float64 payload and a SHA-256 trailer."""
    names = list(model.params)
    index, offset = [], 0
    for n in names:
        shape = list(model.params[n].shape)
        index.append({"name": n, "shape": shape, "offset": offset})
        offset += int(np.prod(shape)) * 8
    header = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "model_config": model.config.to_dict(),
        "vocab": {"tokens": model.vocab.tokens, "num_labels": model.vocab.num_labels,
                  "hash": model.vocab.hash()},
        "tags": getattr(model, "tags", None),
        "params": index,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes
    body += b"".join(np.ascontiguousarray(model.params[n].values, dtype="<f8").tobytes() for n in names)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(body + hashlib.sha256(body).digest())
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12 + 32 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupt or was modified")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = len(MAGIC) + 12
    header = json.loads(body[start:start + hlen].decode("utf-8"))
    payload = body[start + hlen:]
    arrays = {}
    for rec in header["params"]:
        n = int(np.prod(rec["shape"]))
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=rec["offset"])
        arrays[rec["name"]] = arr.astype(np.float64).reshape(rec["shape"])
    return header, arrays


def load_checkpoint(path: str | Path, vocab: Vocab | None = None,
                    config: ModelConfig | None = None):
    """Rebuild the model; refuses a vocabulary or architecture other than the expected one."""
    header, arrays = read_checkpoint(path)
    saved_vocab = Vocab(header["vocab"]["tokens"], header["vocab"]["num_labels"])
    if saved_vocab.hash() != header["vocab"]["hash"]:
        raise ChecksumError(f"{path}: stored vocabulary does not match its hash")
    if vocab is not None and vocab.hash() != saved_vocab.hash():
        raise VocabMismatchError(f"{path}: vocabulary hash {saved_vocab.hash()[:12]} differs "
                                 f"from expected {vocab.hash()[:12]}")
    cfg = ModelConfig(**header["model_config"])
    if config is not None and config.to_dict() != cfg.to_dict():
        raise CheckpointError(f"{path}: model config differs from the expected one")
    params = {k: T.parameter(v) for k, v in arrays.items()}
    if header["kind"] == "tagger":
        return TaggingBaseline(cfg, saved_vocab, header["tags"], params=params)
    return RoSLU(cfg, saved_vocab, params=params)


def _snapshot(model) -> dict[str, np.ndarray]:
    return {k: p.values.copy() for k, p in model.params.items()}


def _restore(model, snap: dict[str, np.ndarray]) -> None:
    for k, v in snap.items():
        model.params[k].values[...] = v


# ----------------------------------------------------------------- training

def build_model(cfg: TrainConfig, corpora: Corpora, kind: str = "roslu"):
    mcfg = cfg.model
    if mcfg.vocab_size != len(corpora.vocab):
        mcfg = ModelConfig(**{**mcfg.to_dict(), "vocab_size": len(corpora.vocab)})
    if kind == "tagger":
        tags = corpora.tags or bio_tag_set([corpora.train_clean])
        mcfg = ModelConfig(**{**mcfg.to_dict(), "num_tags": len(tags)})
        return TaggingBaseline(mcfg, corpora.vocab, tags, seed=cfg.seed)
    return RoSLU(mcfg, corpora.vocab, seed=cfg.seed)


def discriminator_accuracy(model: RoSLU, clean: Sequence[RawExample], noisy: Sequence[RawExample],
                           chunk: int = 64) -> float | None:
    """Held-out accuracy of D with threshold 0.5 (clean -> 1, noisy -> 0)."""
    if not clean or not noisy:
        return None
    correct = 0
    with T.no_grad():
        for group, want in ((clean, True), (noisy, False)):
            for i in range(0, len(group), chunk):
                b = collate(group[i:i + chunk], model.vocab, model.config.max_source_len, with_targets=False)
                p = model.discriminate(model.encode(b.src, b.src_mask))
                correct += int(((p > 0.5) == want).sum())
    return correct / (len(clean) + len(noisy))


def train(cfg: TrainConfig, corpora: Corpora, out_dir: str | Path | None = None, kind: str = "roslu",
          model=None, on_step: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Run the joint optimisation loop and keep the best dev-F1 parameters.

    Each iteration draws one mixed batch, builds the joint loss (generation
    loss on the clean part only), runs one backward pass and one SGD step
    over all parameter groups together.
    """
    if not corpora.dev_clean and not corpora.dev_noisy:
        raise DataError("dev set is empty")
    if not corpora.train_clean:
        raise DataError("no clean training examples")
    model = model or build_model(cfg, corpora, kind)
    noisy = corpora.train_noisy if cfg.mode == "global" else []
    use_adv = kind == "roslu" and cfg.alpha > 0 and bool(noisy)
    tag_index = getattr(model, "tag_index", None)
    refs = dict(corpora.references)
    refs.update({ex.id: ex for ex in corpora.dev_clean})

    out = Path(out_dir) if out_dir is not None else None
    log_f = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_f = open(out / "metrics.jsonl", "w", encoding="utf-8", newline="\n")
        log_f.write(json.dumps({"config": cfg.to_dict(), "kind": kind}, sort_keys=True) + "\n")

    state = TrainState()
    best_snap = _snapshot(model)
    best_report = None
    velocity: dict = {}
    window = {"s2s": 0.0, "adv": 0.0, "joint": 0.0, "tokens": 0, "adv_n": 0, "steps": 0}
    since_best = 0
    done = False
    try:
        for epoch in range(cfg.max_epochs):
            state.epoch = epoch
            # noisy members are drawn even when alpha == 0 so clean sub-batches match across alphas
            for cb, nb in batch_iter(corpora.train_clean, noisy if kind == "roslu" else [], cfg.batch_size,
                                     cfg.seed, epoch):
                step_rng = Rng(cfg.seed).substream(4, state.step)
                clean_b = collate(cb, model.vocab, model.config.max_source_len, model.config.max_target_len,
                                  with_targets=kind == "roslu", tag_index=tag_index)
                model.zero_grad()
                if kind == "tagger":
                    loss = model.tag_loss(clean_b, train=True, rng=step_rng)
                    terms = {"s2s": loss, "adv": None, "joint": loss}
                    ntok = int(clean_b.src_mask[:, 1:].sum())
                else:
                    noisy_b = collate(nb, model.vocab, model.config.max_source_len,
                                      with_targets=False) if nb and use_adv else None
                    terms = model.loss_terms(clean_b, noisy_b, cfg.alpha if use_adv else 0.0,
                                             train=True, rng=step_rng)
                    ntok = int(clean_b.tgt_mask.sum())
                joint = terms["joint"]
                if not math.isfinite(joint.item()):
                    state.diverged = True
                    state.stop_reason = f"non-finite joint loss at step {state.step}"
                    log.error(state.stop_reason)
                    done = True
                    break
                T.backward(joint)
                T.sgd_step(model.parameters(), cfg.lr, cfg.momentum, velocity)
                state.step += 1
                window["s2s"] += terms["s2s"].item()
                window["tokens"] += ntok
                window["joint"] += joint.item()
                window["steps"] += 1
                if terms["adv"] is not None:
                    window["adv"] += terms["adv"].item()
                    window["adv_n"] += len(cb) + len(nb)
                else:
                    nb = []
                if on_step is not None:
                    on_step(state.step, terms)

                if state.step % cfg.eval_every == 0:
                    rec, report = _eval_point(model, corpora, refs, state, window, kind)
                    window = {k: 0 for k in window}
                    state.history.append(rec)
                    if log_f:
                        log_f.write(json.dumps(rec, sort_keys=True) + "\n")
                        log_f.flush()
                    f1 = rec["dev_f1_global"]
                    if f1 > state.best_dev_f1:
                        state.best_dev_f1, state.best_step = f1, state.step
                        best_snap, best_report = _snapshot(model), report
                        since_best = 0
                        if out is not None:
                            state.best_checkpoint_path = str(out / "best.ckpt")
                            save_checkpoint(out / "best.ckpt", model,
                                            {"step": state.step, "dev_f1_global": f1, "alpha": cfg.alpha})
                    else:
                        since_best += 1
                    if cfg.target_f1 is not None and f1 >= cfg.target_f1:
                        state.stop_reason, done = "target_f1", True
                    elif since_best >= cfg.patience:
                        state.stop_reason, done = "patience", True
                if cfg.max_steps is not None and state.step >= cfg.max_steps:
                    state.stop_reason, done = state.stop_reason or "max_steps", True
                if done:
                    break
            if done:
                break
        else:
            state.stop_reason = "max_epochs"
        if state.best_dev_f1 < 0 or (not state.diverged and state.step % cfg.eval_every):
            # final evaluation so the last stretch of training is not lost
            rec, report = _eval_point(model, corpora, refs, state, window, kind)
            state.history.append(rec)
            if log_f:
                log_f.write(json.dumps(rec, sort_keys=True) + "\n")
            if rec["dev_f1_global"] > state.best_dev_f1 and not state.diverged:
                state.best_dev_f1, state.best_step = rec["dev_f1_global"], state.step
                best_snap, best_report = _snapshot(model), report
                if out is not None:
                    state.best_checkpoint_path = str(out / "best.ckpt")
                    save_checkpoint(out / "best.ckpt", model,
                                    {"step": state.step, "dev_f1_global": rec["dev_f1_global"],
                                     "alpha": cfg.alpha})
    finally:
        if log_f:
            log_f.close()
    _restore(model, best_snap)
    return TrainResult(model, state, best_report)


def _eval_point(model, corpora: Corpora, refs, state: TrainState, window: dict, kind: str):
    report, _ = evaluate(model, corpora.dev_clean, corpora.dev_noisy, refs)
    steps = max(window["steps"], 1)
    rec = {
        "step": state.step,
        "epoch": state.epoch,
        "s2s_loss": window["s2s"] / max(window["tokens"], 1),
        "adv_loss": window["adv"] / window["adv_n"] if window["adv_n"] else None,
        "joint_loss": window["joint"] / steps,
        "dev_f1_clean": report.splits["clean"].f1 if "clean" in report.splits else None,
        "dev_f1_noisy": report.splits["noisy"].f1 if "noisy" in report.splits else None,
        "dev_f1_global": report.splits["global"].f1,
        "disc_acc": discriminator_accuracy(model, corpora.dev_clean, corpora.dev_noisy)
        if kind == "roslu" else None,
    }
    log.info("step %d  s2s %.4f  dev global F1 %.4f", state.step, rec["s2s_loss"], rec["dev_f1_global"])
    return rec, report


# -------------------------------------------------------------- grid search

@dataclass
class GridRow:
    alpha: float
    dev_f1_clean: float | None
    dev_f1_noisy: float | None
    dev_f1_global: float
    best_step: int
    checkpoint: str | None = None


@dataclass
class GridResult:
    best_alpha: float
    rows: list[GridRow]
    best_model: object = None


def alpha_grid(start: float = 0.0, stop: float = 1.0, step: float = 0.1) -> list[float]:
    n = int(round((stop - start) / step))
    return [round(start + i * step, 10) for i in range(n + 1)]


def grid_search_alpha(cfg: TrainConfig, corpora: Corpora, values: Sequence[float] | None = None,
                      out_dir: str | Path | None = None) -> GridResult:
    """Train one model per alpha with a shared seed; pick the best global dev F1.

    Ties go to the smaller alpha.
    """
    values = list(alpha_grid() if values is None else values)
    if not corpora.dev_noisy:
        raise DataError("grid search needs a dev set with clean and noisy members")
    rows, best, best_model = [], None, None
    for a in sorted(values):
        run_cfg = TrainConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)}, "alpha": a})
        sub = Path(out_dir) / f"alpha_{a:.1f}" if out_dir is not None else None
        res = train(run_cfg, corpora, sub)
        rep = res.best_report
        row = GridRow(a,
                      rep.splits["clean"].f1 if rep and "clean" in rep.splits else None,
                      rep.splits["noisy"].f1 if rep and "noisy" in rep.splits else None,
                      res.state.best_dev_f1, res.state.best_step, res.state.best_checkpoint_path)
        rows.append(row)
        if best is None or row.dev_f1_global > best.dev_f1_global:
            best, best_model = row, res.model
    result = GridResult(best.alpha, rows, best_model)
    if out_dir is not None:
        with open(Path(out_dir) / "grid.json", "w", encoding="utf-8", newline="\n") as f:
            json.dump({"best_alpha": best.alpha, "rows": [asdict(r) for r in rows]}, f, indent=2, sort_keys=True)
            f.write("\n")
    return result
