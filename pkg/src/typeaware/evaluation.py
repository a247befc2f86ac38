"""Fill-in-the-blank and outfit compatibility evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, SplitAssignment
from .model import CompatibilityModel, Outfit

log = logging.getLogger(__name__)

SAMPLING_MODES = ("category_aware", "unrestricted")


@dataclass(frozen=True)
class FitbQuestion:
    partial_outfit: Outfit
    answer: str
    distractors: tuple[str, ...]

    @property
    def candidates(self) -> tuple[str, ...]:
        return (self.answer,) + self.distractors


@dataclass(frozen=True)
class CompatSample:
    outfit: Outfit
    label: str
    pool_fallback: bool = False

    @property
    def positive(self) -> bool:
        return self.label == "positive"


@dataclass
class EvalReport:
    fitb_accuracy: float | None
    compat_auc: float | None
    n_questions: int
    n_outfits: int
    seed: int
    sampling_mode: str = "category_aware"
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            f"fitb_accuracy: {self.fitb_accuracy!r}",
            f"compat_auc: {self.compat_auc!r}",
            f"n_questions: {self.n_questions}",
            f"n_outfits: {self.n_outfits}",
            f"seed: {self.seed}",
            f"sampling_mode: {self.sampling_mode}",
        ]
        lines += [f"{k}: {v}" for k, v in sorted(self.extra.items())]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "EvalReport":
        kv = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if ": " in line:
                k, v = line.split(": ", 1)
                kv[k] = v

        def num(v):
            return None if v == "None" else float(v)

        core = {"fitb_accuracy", "compat_auc", "n_questions", "n_outfits", "seed", "sampling_mode"}
        return cls(num(kv["fitb_accuracy"]), num(kv["compat_auc"]), int(kv["n_questions"]),
                   int(kv["n_outfits"]), int(kv["seed"]), kv["sampling_mode"],
                   {k: v for k, v in kv.items() if k not in core})


def _test_pool(dataset: Dataset, outfits: Sequence[Outfit]) -> dict[int, list[str]]:
    pool: dict[int, set[str]] = {}
    for o in outfits:
        for i in o.items:
            pool.setdefault(dataset.type_of(i), set()).add(i)
    return {t: sorted(ids) for t, ids in pool.items()}


def _split_outfits(dataset: Dataset, split: SplitAssignment | None, name: str) -> list[Outfit]:
    return list(dataset.outfits) if split is None else split.apply(dataset, name)


def gen_compat_negatives(dataset: Dataset, split: SplitAssignment | None, mode: str = "category_aware",
                         seed: int = 0, multiplier: int = 1, split_name: str = "test") -> list[CompatSample]:
    """Positive test outfits followed by ``multiplier`` sampled negatives each.

    Negatives draw only from items of the test outfits. In category-aware
    mode every item is swapped for a different item of the same type; a type
    with no alternative falls back to the whole pool and the sample is flagged.
    """
    if mode not in SAMPLING_MODES:
        raise ValueError(f"unknown sampling mode {mode!r}")
    rng = np.random.default_rng(seed)
    outfits = _split_outfits(dataset, split, split_name)
    if not outfits:
        raise ValueError(f"split {split_name!r} has no outfits")
    pool = _test_pool(dataset, outfits)
    everything = sorted({i for ids in pool.values() for i in ids})
    samples = [CompatSample(o, "positive") for o in outfits]
    for rep in range(multiplier):
        for o in outfits:
            fallback = False
            if mode == "unrestricted":
                picked = rng.choice(len(everything), size=len(o), replace=False)
                chosen = [everything[k] for k in sorted(picked)]
            else:
                chosen = []
                for item in o.items:
                    cands = [c for c in pool[dataset.type_of(item)] if c != item and c not in chosen]
                    if not cands:
                        fallback = True
                        cands = [c for c in everything if c != item and c not in chosen]
                    chosen.append(cands[rng.integers(len(cands))])
            samples.append(CompatSample(Outfit(f"{o.outfit_id}~neg{rep}", tuple(chosen)),
                                        "negative", fallback))
    return samples


def gen_fitb_questions(dataset: Dataset, split: SplitAssignment | None, seed: int = 0,
                       split_name: str = "test", stats: dict | None = None) -> list[FitbQuestion]:
    rng = np.random.default_rng(seed)
    outfits = _split_outfits(dataset, split, split_name)
    pool = _test_pool(dataset, outfits)
    questions = []
    skipped = 0
    for o in outfits:
        answer = o.items[rng.integers(len(o))]
        cands = [c for c in pool[dataset.type_of(answer)] if c not in o.items]
        if len(cands) < 3:
            skipped += 1
            continue
        picks = rng.choice(len(cands), size=3, replace=False)
        questions.append(FitbQuestion(o.without(answer), answer, tuple(cands[k] for k in picks)))
    if stats is not None:
        stats["fitb_skipped"] = skipped
    if skipped:
        log.info("skipped %d fill-in-the-blank questions with too few distractors", skipped)
    return questions


def auc_brute_force(pos: Sequence[float], neg: Sequence[float]) -> float:
    """P(pos > neg) + P(tie) / 2 over every positive/negative pair."""
    if not len(pos) or not len(neg):
        raise ValueError("AUC needs at least one positive and one negative")
    wins = ties = 0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1
            elif p == n:
                ties += 1
    return (2 * wins + ties) / (2 * len(pos) * len(neg))


def auc_from_scores(pos: Sequence[float], neg: Sequence[float]) -> float:
    """Same value as :func:`auc_brute_force`, via sorting.

    Win and tie counts are exact integers, so the result is bit-identical.
    """
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.sort(np.asarray(neg, dtype=np.float64))
    if not pos.size or not neg.size:
        raise ValueError("AUC needs at least one positive and one negative")
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    wins = int(below.sum())
    ties = int((upto - below).sum())
    return (2 * wins + ties) / (2 * pos.size * neg.size)


def compat_auc(model: CompatibilityModel, samples: Sequence[CompatSample]) -> float:
    pos = [model.outfit_score(s.outfit) for s in samples if s.positive]
    neg = [model.outfit_score(s.outfit) for s in samples if not s.positive]
    if not pos or not neg:
        raise ValueError("compatibility AUC needs both positive and negative outfits")
    return auc_from_scores(pos, neg)


def fitb_choice(model: CompatibilityModel, question: FitbQuestion) -> tuple[str, bool]:
    """Best candidate by summed compatibility with the partial outfit.

    Returns the pick and whether a tie was broken (lowest item id wins).
    """
    scored = []
    for c in question.candidates:
        scored.append((sum(model.pair_score(c, other) for other in question.partial_outfit.items), c))
    best = max(s for s, _ in scored)
    winners = sorted(c for s, c in scored if s == best)
    return winners[0], len(winners) > 1


def fitb_accuracy(model: CompatibilityModel, questions: Sequence[FitbQuestion],
                  stats: dict | None = None) -> float:
    if not questions:
        raise ValueError("no questions to answer")
    correct = ties = 0
    for q in questions:
        pick, tied = fitb_choice(model, q)
        correct += pick == q.answer
        ties += tied
    if stats is not None:
        stats["fitb_ties"] = ties
    return correct / len(questions)


def evaluate(model: CompatibilityModel, dataset: Dataset, split: SplitAssignment | None,
             seed: int = 0, mode: str = "category_aware", multiplier: int = 1,
             split_name: str = "test", detail_path=None) -> EvalReport:
    extra: dict = {"negative_pool": f"{split_name}-only"}
    questions = gen_fitb_questions(dataset, split, seed, split_name, stats=extra)
    samples = gen_compat_negatives(dataset, split, mode, seed + 1, multiplier, split_name)
    extra["negatives_with_pool_fallback"] = sum(s.pool_fallback for s in samples)
    acc = fitb_accuracy(model, questions, stats=extra) if questions else None
    auc = compat_auc(model, samples)
    if detail_path is not None:
        with open(detail_path, "w", encoding="utf-8") as fh:
            fh.write("partial_outfit\tanswer\tpicked\tcorrect\n")
            for q in questions:
                pick, _ = fitb_choice(model, q)
                fh.write(f"{q.partial_outfit.outfit_id}\t{q.answer}\t{pick}\t{int(pick == q.answer)}\n")
    return EvalReport(acc, auc, len(questions), sum(s.positive for s in samples), seed, mode, extra)
