"""Command-line entry point: ``roslu {noise-gen,train,gridsearch,eval,decode}``.

Every option may also come from a flat ``key=value`` file given with
``--config``; command-line flags win.  Each command writes the merged
configuration as ``config.snapshot`` next to its outputs, and that file can
be passed back through ``--config`` to replay the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .data import (NoiseConfig, NoiseKind, build_vocab, forge_corpus, load_split, split_domains,
                   write_split)
from .errors import ConfigError, RosluError

log = logging.getLogger("roslu")

SNAPSHOT = "config.snapshot"


# option table: name -> (type, default, help); "bool" options get --x/--no-x
COMMON = {
    "seed": (int, None, "random seed (required by randomized commands)"),
    "threads": (int, 1, "BLAS threads"),
}
MODEL_OPTS = {
    "layers": (int, 4, "transformer layers"),
    "heads": (int, 8, "attention heads"),
    "hidden": (int, 96, "hidden size"),
    "dropout": (float, 0.1, "dropout rate"),
    "grl-lambda": (float, 1.0, "gradient reversal scale"),
    "reversal": (str, "grl", "grl | identity"),
    "reverse-clean-term": ("bool", True, "reverse the clean term of the adversarial loss too"),
    "max-source-len": (int, 64, "maximum source length incl. DOM"),
    "max-target-len": (int, 64, "maximum target length incl. EOS"),
}
TRAIN_OPTS = {
    "train-dir": ("path", None, "training split (noise-gen output or clean)"),
    "dev-dir": ("path", None, "dev split (noise-gen output or clean)"),
    "dev-ref-dir": ("path", None, "clean dev split holding the references of noisy dev lines"),
    "checkpoint-dir": ("path", None, "output directory"),
    "alpha": (float, 0.0, "adversarial loss weight"),
    "lr": (float, 0.001, "SGD learning rate"),
    "momentum": (float, 0.0, "SGD momentum (0 = plain SGD)"),
    "batch-size": (int, 32, "batch size"),
    "max-epochs": (int, 50, "epoch limit"),
    "max-steps": (int, 0, "step limit (0 = none)"),
    "patience": (int, 10, "evaluations without dev improvement before stopping"),
    "eval-every": (int, 200, "steps between dev evaluations"),
    "mode": (str, "global", "global | clean_only"),
    "model": (str, "roslu", "roslu | tagger"),
    **MODEL_OPTS,
}
COMMANDS = {
    "noise-gen": {
        "input": ("path", None, "clean split directory"),
        "output": ("path", None, "output directory"),
        "ratio": (float, 0.2, "fraction of sentences to perturb"),
        "strategies": (str, "drop,replace,swap", "comma-separated subset of drop,replace,swap"),
        "protect-slots": ("bool", True, "keep perturbations outside slot chunks"),
        "vocab-from": ("path", None, "split whose words feed Replace (default: input)"),
    },
    "train": TRAIN_OPTS,
    "gridsearch": {**TRAIN_OPTS, "alphas": (str, "0.0:1.0:0.1", "start:stop:step or comma list")},
    "eval": {
        "checkpoint": ("path", None, "model checkpoint"),
        "test-clean": ("path", None, "clean test split (also the gold references)"),
        "test-noisy": ("path", None, "noise-gen output for the test split"),
        "report": ("path", None, "report JSON path"),
        "audit": ("path", None, "per-utterance JSONL (default: next to the report)"),
        "correction": ("bool", False, "run the in-slot correction analysis"),
        "baseline-checkpoint": ("path", None, "tagging baseline checkpoint for the correction analysis"),
        "beam": (int, 1, "beam width"),
    },
    "decode": {
        "checkpoint": ("path", None, "model checkpoint"),
        "input": ("path", "-", "utterances, one per line ('-' = stdin)"),
        "output": ("path", "-", "JSONL output ('-' = stdout)"),
        "beam": (int, 1, "beam width"),
    },
}
REQUIRED = {
    "noise-gen": ("input", "output", "seed"),
    "train": ("train-dir", "dev-dir", "checkpoint-dir", "seed"),
    "gridsearch": ("train-dir", "dev-dir", "checkpoint-dir", "seed"),
    "eval": ("checkpoint", "test-clean", "report"),
    "decode": ("checkpoint",),
}


@dataclass
class RunConfig:
    command: str
    values: dict
    provenance: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def snapshot_text(self) -> str:
        lines = [f"command={self.command}"]
        for k in sorted(self.values):
            v = self.values[k]
            if v is None:
                continue
            lines.append(f"{k}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def write_snapshot(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / SNAPSHOT
        path.write_text(self.snapshot_text(), encoding="utf-8")
        return path


def read_config_file(path: str) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip().replace("_", "-")] = v.strip()
    return out


def _convert(kind, raw, key):
    if raw is None:
        return None
    if kind == "bool":
        if isinstance(raw, bool):
            return raw
        low = str(raw).lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if kind == "path":
        return str(raw)
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roslu", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value file; flags override it")
        for key, (kind, _, help_) in {**COMMON, **opts}.items():
            dest = key.replace("-", "_")
            if kind == "bool":
                p.add_argument(f"--{key}", dest=dest, action=argparse.BooleanOptionalAction,
                               default=None, help=help_)
            else:
                p.add_argument(f"--{key}", dest=dest, default=None, help=help_,
                               type=None if kind == "path" else kind)
    return parser


def resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> RunConfig:
    """Merge defaults, config file and flags; validate paths before any work starts."""
    opts = {**COMMON, **COMMANDS[args.command]}
    filevals = read_config_file(args.config) if args.config else {}
    cmd = filevals.pop("command", args.command)
    if cmd != args.command:
        raise ConfigError(f"config file was written for {cmd!r}, not {args.command!r}")
    unknown = set(filevals) - set(opts)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    values, prov = {}, {}
    for key, (kind, default, _) in opts.items():
        flag = getattr(args, key.replace("-", "_"))
        if flag is not None:
            values[key], prov[key] = _convert(kind, flag, key), "flag"
        elif key in filevals:
            values[key], prov[key] = _convert(kind, filevals[key], key), f"config:{args.config}"
        else:
            values[key], prov[key] = default, "default"
    missing = [k for k in REQUIRED[args.command] if values.get(k) is None]
    if missing:
        parser.error(f"{args.command}: missing required option(s): " + ", ".join(f"--{k}" for k in missing))
    for key, (kind, _, _) in opts.items():
        if kind == "path" and values[key] not in (None, "-"):
            p = Path(values[key]).expanduser().resolve()
            values[key] = str(p)
            is_output = key in ("output", "checkpoint-dir", "report", "audit") and args.command != "decode" \
                or (args.command == "decode" and key == "output")
            if not is_output and not p.exists():
                raise ConfigError(f"--{key}: {p} does not exist")
    return RunConfig(args.command, values, prov)


# ---------------------------------------------------------------- commands

def _threads(n: int):
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(int(n), 1))


def cmd_noise_gen(rc: RunConfig) -> int:
    src = Path(rc["input"])
    out = Path(rc["output"])
    if out.resolve() == src.resolve():
        raise ConfigError("--output must differ from --input")
    corpus = load_split(src)
    words = None
    if rc["vocab-from"]:
        words = sorted({w for ex in load_split(rc["vocab-from"]) for w in ex.tokens})
    cfg = NoiseConfig(rc["ratio"], tuple(NoiseKind(s.strip()) for s in rc["strategies"].split(",") if s.strip()),
                      rc["protect-slots"], rc["seed"])
    forged = forge_corpus(corpus, cfg, words)
    write_split(out, forged, write_meta=True)
    rc.write_snapshot(out)
    noisy = [ex for ex in forged if ex.perturbation is not None]
    kinds = {k.value: sum(ex.perturbation.kind is k for ex in noisy) for k in NoiseKind}
    summary = {"sentences": len(forged), "perturbed": len(noisy),
               "in_slot": sum(ex.perturbation.in_slot for ex in noisy), "by_kind": kinds}
    print(json.dumps(summary, sort_keys=True))
    return 0


def _model_config(rc: RunConfig):
    from .model import ModelConfig
    return ModelConfig(num_layers=rc["layers"], num_heads=rc["heads"], hidden_size=rc["hidden"],
                       max_source_len=rc["max-source-len"], max_target_len=rc["max-target-len"],
                       dropout=rc["dropout"], grl_lambda=rc["grl-lambda"], reversal=rc["reversal"],
                       reverse_clean_term=rc["reverse-clean-term"])


def _train_setup(rc: RunConfig):
    from .train import Corpora, TrainConfig, bio_tag_set
    train_clean, train_noisy = split_domains(load_split(rc["train-dir"]))
    dev_all = load_split(rc["dev-dir"])
    dev_clean, dev_noisy = split_domains(dev_all)
    refs = {}
    if rc["dev-ref-dir"]:
        ref = load_split(rc["dev-ref-dir"])
        refs = {ex.id: ex for ex in ref}
        dev_clean = ref
    else:
        refs = {ex.id: ex for ex in dev_clean}
    vocab = build_vocab([train_clean, train_noisy])
    cfg = TrainConfig(alpha=rc["alpha"], lr=rc["lr"], batch_size=rc["batch-size"], max_epochs=rc["max-epochs"],
                      max_steps=rc["max-steps"] or None, patience=rc["patience"], seed=rc["seed"],
                      eval_every=rc["eval-every"], mode=rc["mode"], momentum=rc["momentum"],
                      model=_model_config(rc))
    corpora = Corpora(vocab, train_clean, train_noisy, dev_clean, dev_noisy, refs,
                      bio_tag_set([train_clean]))
    return cfg, corpora


def cmd_train(rc: RunConfig) -> int:
    from .train import train
    if rc["model"] not in ("roslu", "tagger"):
        raise ConfigError(f"unknown model kind {rc['model']!r}")
    cfg, corpora = _train_setup(rc)
    out = Path(rc["checkpoint-dir"])
    rc.write_snapshot(out)
    res = train(cfg, corpora, out, kind=rc["model"])
    print(json.dumps({"best_dev_f1_global": res.state.best_dev_f1, "best_step": res.state.best_step,
                      "steps": res.state.step, "stop_reason": res.state.stop_reason,
                      "checkpoint": res.state.best_checkpoint_path}, sort_keys=True))
    return 1 if res.state.diverged else 0


def _parse_alphas(text: str) -> list[float]:
    from .train import alpha_grid
    if ":" in text:
        a, b, s = (float(x) for x in text.split(":"))
        return alpha_grid(a, b, s)
    return [float(x) for x in text.split(",") if x.strip()]


def cmd_gridsearch(rc: RunConfig) -> int:
    from .train import grid_search_alpha
    cfg, corpora = _train_setup(rc)
    out = Path(rc["checkpoint-dir"])
    rc.write_snapshot(out)
    res = grid_search_alpha(cfg, corpora, _parse_alphas(rc["alphas"]), out)
    for row in res.rows:
        print(json.dumps({"alpha": row.alpha, "dev_f1_clean": row.dev_f1_clean, "dev_f1_noisy": row.dev_f1_noisy,
                          "dev_f1_global": row.dev_f1_global}, sort_keys=True))
    print(json.dumps({"best_alpha": res.best_alpha}))
    return 0


def cmd_eval(rc: RunConfig) -> int:
    from .evaluate import correction_analysis, evaluate, write_audit, write_report
    from .train import load_checkpoint
    model = load_checkpoint(rc["checkpoint"])
    clean = load_split(rc["test-clean"])
    refs = {ex.id: ex for ex in clean}
    noisy = []
    if rc["test-noisy"]:
        _, noisy = split_domains(load_split(rc["test-noisy"]))
    report, records = evaluate(model, clean, noisy, refs, beam=rc["beam"])
    correction = None
    if rc["correction"]:
        if not rc["test-noisy"] or not (Path(rc["test-noisy"]) / "meta.jsonl").exists():
            raise ConfigError("--correction needs --test-noisy produced by noise-gen (meta.jsonl missing)")
        baseline = load_checkpoint(rc["baseline-checkpoint"]) if rc["baseline-checkpoint"] else None
        correction = correction_analysis(model, noisy, refs, baseline)
    report_path = Path(rc["report"])
    write_report(report_path, report, correction)
    write_audit(Path(rc["audit"]) if rc["audit"] else report_path.with_suffix(".audit.jsonl"), records)
    if correction is not None:
        with open(report_path.with_suffix(".correction.jsonl"), "w", encoding="utf-8", newline="\n") as f:
            for v in correction.verdicts:
                f.write(json.dumps(v, sort_keys=True) + "\n")
    rc.write_snapshot(report_path.parent)
    print(json.dumps({k: round(s.f1, 6) for k, s in report.splits.items()}, sort_keys=True))
    return 0


def cmd_decode(rc: RunConfig) -> int:
    from .data import RawExample
    from .evaluate import predict_slots
    from .train import load_checkpoint
    model = load_checkpoint(rc["checkpoint"])
    if rc["input"] == "-":
        lines = sys.stdin.read().splitlines()
    else:
        lines = Path(rc["input"]).read_text(encoding="utf-8").splitlines()
    examples = [RawExample(f"{i:06d}", ln.split(), ["O"] * len(ln.split())) for i, ln in enumerate(lines)]
    preds = predict_slots(model, examples, beam=rc["beam"]) if examples else []
    out_lines = []
    for slots, _ in preds:
        items = [{"value": " ".join(v), "label": lab} for lab, v in slots]
        out_lines.append(json.dumps(items, ensure_ascii=False, separators=(",", ":")))
    text = "".join(line + "\n" for line in out_lines)
    if rc["output"] == "-":
        sys.stdout.write(text)
    else:
        Path(rc["output"]).parent.mkdir(parents=True, exist_ok=True)
        Path(rc["output"]).write_text(text, encoding="utf-8")
        rc.write_snapshot(Path(rc["output"]).parent)
    return 0


HANDLERS = {"noise-gen": cmd_noise_gen, "train": cmd_train, "gridsearch": cmd_gridsearch,
            "eval": cmd_eval, "decode": cmd_decode}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve(args, parser)
        with _threads(rc["threads"]):
            return HANDLERS[args.command](rc)
    except (RosluError, OSError) as exc:
        print(f"roslu {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
