"""Seeded synthetic comparison of model variants."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import SyntheticSpec, generate_synthetic, outfit_split
from .evaluation import evaluate
from .model import EmbeddingModel, Hyperparams
from .trainer import TrainConfig, fit

# single-space baseline, pair-specific masks, shared masks, everything on
VARIANTS: dict[str, dict] = {
    "siamese": dict(projection="none", use_vse=False, use_sim=False),
    "t4:1": dict(projection="diag", sharing_ratio=4, use_vse=False, use_sim=False),
    "t1:1": dict(projection="diag", use_vse=False, use_sim=False),
    "full": dict(projection="diag", score_mode="learned_metric", use_vse=True, use_sim=True),
}

DATA = SyntheticSpec(n_types=6, latent_dim=12, n_items=2000, n_outfits=1000, noise=0.1, threshold=0.3)
FRACTIONS = (0.7, 0.1, 0.2)
# linear encoder: the synthetic features are linear in the latents
BASE = Hyperparams(hidden=(), text_hidden=(), learning_rate=5e-3)
EPOCHS = 20


@dataclass
class VariantScore:
    variant: str
    seed: int
    fitb: float
    auc: float
    seconds: float


@dataclass
class BenchmarkResult:
    scores: list[VariantScore] = field(default_factory=list)
    oracle: dict[int, tuple[float, float]] = field(default_factory=dict)
    seconds: float = 0.0

    def mean(self, variant: str) -> tuple[float, float]:
        rows = [s for s in self.scores if s.variant == variant]
        return float(np.mean([s.fitb for s in rows])), float(np.mean([s.auc for s in rows]))

    def to_text(self) -> str:
        lines = ["variant\tseed\tfitb\tauc\tseconds"]
        for s in self.scores:
            lines.append(f"{s.variant}\t{s.seed}\t{s.fitb:.4f}\t{s.auc:.4f}\t{s.seconds:.1f}")
        for v in dict.fromkeys(s.variant for s in self.scores):
            fitb, auc = self.mean(v)
            lines.append(f"{v}\tmean\t{fitb:.4f}\t{auc:.4f}\t")
        return "\n".join(lines) + "\n"


def run_benchmark(seeds=(0, 1, 2), variants=tuple(VARIANTS), epochs: int = EPOCHS,
                  data: SyntheticSpec = DATA, base: Hyperparams = BASE) -> BenchmarkResult:
    """Train and evaluate each variant on one synthetic dataset per seed."""
    start = time.perf_counter()
    result = BenchmarkResult()
    for seed in seeds:
        dataset, oracle = generate_synthetic(replace(data, seed=seed))
        split = outfit_split(dataset, FRACTIONS, seed)
        ref = evaluate(oracle, dataset, split, seed)
        result.oracle[seed] = (ref.fitb_accuracy, ref.compat_auc)
        for name in variants:
            t0 = time.perf_counter()
            hyper = replace(base, seed=seed, **VARIANTS[name])
            ckpt = fit(dataset, TrainConfig(hyper, epochs=epochs), split)
            report = evaluate(EmbeddingModel(ckpt.params, dataset.items), dataset, split, seed)
            result.scores.append(VariantScore(name, seed, report.fitb_accuracy, report.compat_auc,
                                              time.perf_counter() - t0))
    result.seconds = time.perf_counter() - start
    return result
