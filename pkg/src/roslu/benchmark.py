"""Clean/noisy benchmark protocol: forge, grid-search alpha, compare against alpha=0.

    python -m roslu.benchmark DATA_DIR OUT_DIR --seeds 0 1 2

``DATA_DIR`` holds ``train``, ``valid`` and ``test`` in the three-file layout.
Each seed forges its own noisy splits, runs the alpha grid on dev and scores
both the selected model and the alpha=0 model on the test splits.
"""

from __future__ import annotations

import argparse
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import mean
from typing import Sequence

from .data import NoiseConfig, build_vocab, forge_corpus, load_split, split_domains
from .evaluate import evaluate
from .model import ModelConfig
from .train import Corpora, TrainConfig, bio_tag_set, grid_search_alpha, load_checkpoint

log = logging.getLogger(__name__)


@dataclass
class SeedOutcome:
    seed: int
    best_alpha: float
    selected: dict[str, float]  # split -> test F1 at the selected alpha
    ablation: dict[str, float]  # split -> test F1 at alpha=0


@dataclass
class BenchmarkResult:
    seeds: list[SeedOutcome] = field(default_factory=list)

    def mean_gap(self, split: str) -> float:
        return mean(s.selected[split] - s.ablation[split] for s in self.seeds)

    def mean_f1(self, split: str, which: str = "selected") -> float:
        return mean(getattr(s, which)[split] for s in self.seeds)

    def to_json(self) -> dict:
        return {"seeds": [asdict(s) for s in self.seeds],
                "mean_gap": {k: self.mean_gap(k) for k in ("clean", "noisy", "global")}}


def _f1s(model, clean, noisy, refs) -> dict[str, float]:
    report, _ = evaluate(model, clean, noisy, refs)
    return {k: s.f1 for k, s in report.splits.items()}


def run_benchmark(data_dir: str | Path, out_dir: str | Path, seeds: Sequence[int] = (0, 1, 2),
                  ratio: float = 0.2, alphas: Sequence[float] | None = None,
                  base: TrainConfig | None = None) -> BenchmarkResult:
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    splits = {name: load_split(data_dir / name) for name in ("train", "valid", "test")}
    result = BenchmarkResult()
    for seed in seeds:
        forged = {name: forge_corpus(exs, NoiseConfig(ratio=ratio, protect_slots=True, seed=seed))
                  for name, exs in splits.items()}
        train_clean, train_noisy = split_domains(forged["train"])
        _, dev_noisy = split_domains(forged["valid"])
        _, test_noisy = split_domains(forged["test"])
        vocab = build_vocab([train_clean, train_noisy])
        refs = {ex.id: ex for ex in splits["valid"]}
        corpora = Corpora(vocab, train_clean, train_noisy, splits["valid"], dev_noisy, refs,
                          bio_tag_set([train_clean]))
        cfg = base or TrainConfig(model=ModelConfig(vocab_size=len(vocab)))
        cfg = TrainConfig(**{**cfg.__dict__, "seed": seed})
        grid = grid_search_alpha(cfg, corpora, alphas, out_dir / f"seed_{seed}")
        ablation_row = next(r for r in grid.rows if r.alpha == 0.0)
        ablation = load_checkpoint(ablation_row.checkpoint, vocab=vocab)
        test_refs = {ex.id: ex for ex in splits["test"]}
        outcome = SeedOutcome(seed, grid.best_alpha,
                              _f1s(grid.best_model, splits["test"], test_noisy, test_refs),
                              _f1s(ablation, splits["test"], test_noisy, test_refs))
        log.info("seed %d: alpha %.1f  %s vs %s", seed, grid.best_alpha, outcome.selected, outcome.ablation)
        result.seeds.append(outcome)
        with open(out_dir / "benchmark.json", "w", encoding="utf-8", newline="\n") as f:
            json.dump(result.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")
    return result


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("data_dir")
    ap.add_argument("out_dir")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--max-epochs", type=int, default=50)
    ap.add_argument("--eval-every", type=int, default=200)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    base = TrainConfig(max_epochs=args.max_epochs, eval_every=args.eval_every, model=ModelConfig(vocab_size=1))
    res = run_benchmark(args.data_dir, args.out_dir, args.seeds, base=base)
    print(json.dumps(res.to_json(), indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
