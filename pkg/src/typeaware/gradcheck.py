"""Finite-difference check of the analytic loss gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import PROJECTION_KINDS, SCORE_MODES, Hyperparams, ItemRecord, ModelParams, TypePair
from .objectives import TripletBatch, TripletSpec, activation_pattern, loss_gradients, total_loss
from .trainer import init_params

STEP = 1e-5
FLOOR = 1e-6


@dataclass
class GradcheckResult:
    max_rel_error: float
    checked: int
    skipped_at_kinks: int
    configs: list[str] = field(default_factory=list)
    worst: str = ""
    seconds: float = 0.0

    def to_text(self) -> str:
        return (f"max_rel_error: {self.max_rel_error!r}\nchecked: {self.checked}\n"
                f"skipped_at_kinks: {self.skipped_at_kinks}\nconfigs: {len(self.configs)}\n"
                f"worst: {self.worst}\nseconds: {self.seconds:.2f}\n")


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), FLOOR)


def check_gradients(params: ModelParams, batch: TripletBatch, hyper: Hyperparams,
                    h: float = STEP) -> tuple[float, int, int, str]:
    """Compare analytic gradients with central differences, coordinate by coordinate.

    A coordinate is skipped when either probe changes any hinge or leaky-ReLU
    branch relative to the base point. Returns (max error, checked, skipped,
    name of the worst coordinate).
    """
    _, grads = loss_gradients(params, batch, hyper)
    base = activation_pattern(params, batch, hyper)
    worst, where = 0.0, ""
    checked = skipped = 0
    for name, arr in params.tensors().items():
        if not params.trainable(name):
            continue
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = total_loss(params, batch, hyper).total
            kink = activation_pattern(params, batch, hyper) != base
            arr[idx] = old - h
            down = total_loss(params, batch, hyper).total
            kink = kink or activation_pattern(params, batch, hyper) != base
            arr[idx] = old
            if kink:
                skipped += 1
                continue
            err = float(relative_error(grads[name][idx], (up - down) / (2 * h)))
            checked += 1
            if err > worst:
                worst, where = err, f"{name}{list(idx)}"
    return worst, checked, skipped, where


def random_problem(index: int, seed: int) -> tuple[Hyperparams, ModelParams, TripletBatch]:
    """A small seeded model and batch; ``index`` cycles through the variant flags."""
    rng = np.random.default_rng([seed, index])
    hyper = Hyperparams(
        embed_dim=6, hidden=(5,), text_hidden=(4,),
        projection=PROJECTION_KINDS[index % 4],
        score_mode=SCORE_MODES[index % 3],
        use_vse=bool(index // 4 % 2), use_sim=bool(index // 8 % 2),
        sharing_ratio=1 + index // 12 % 2,
        lambda1=0.7, lambda2=0.6, lambda3=0.5, lambda4=0.3, lambda5=0.2, seed=seed)
    items = {}
    for n in range(10):
        text = rng.normal(size=5) if n % 5 else None
        items[f"i{n}"] = ItemRecord(f"i{n}", n % 3 + 1, rng.normal(size=6), text)
    seen = [TypePair(1, 2), TypePair(1, 3), TypePair(2, 3)][: 2 + index % 2]
    params = init_params(hyper, 6, 5, seen, rng)
    # move off the symmetric initialization so every path carries signal
    for w in params.projection_bank:
        if params.projection_kind != "binary":
            w += rng.normal(scale=0.3, size=w.shape)
    if params.metric_weight is not None:
        params.metric_weight[:] = rng.normal(size=params.metric_weight.shape)
    triplets = []
    while len(triplets) < 4:
        a, p, q = (items[f"i{k}"] for k in rng.choice(10, 3, replace=False))
        if a.type_id != p.type_id and p.type_id == q.type_id:
            triplets.append(TripletSpec.build(a, p, q))
    return hyper, params, TripletBatch.from_triplets(triplets, items)


def run_suite(seed: int = 0, n_configs: int = 24, h: float = STEP) -> GradcheckResult:
    start = time.perf_counter()
    result = GradcheckResult(0.0, 0, 0)
    for index in range(n_configs):
        hyper, params, batch = random_problem(index, seed)
        tag = (f"{hyper.projection}/{hyper.score_mode}/vse={int(hyper.use_vse)}"
               f"/sim={int(hyper.use_sim)}/k={hyper.sharing_ratio}")
        err, checked, skipped, where = check_gradients(params, batch, hyper, h)
        result.configs.append(tag)
        result.checked += checked
        result.skipped_at_kinks += skipped
        if err >= result.max_rel_error:
            result.max_rel_error, result.worst = err, f"{tag} {where}"
    result.seconds = time.perf_counter() - start
    return result
