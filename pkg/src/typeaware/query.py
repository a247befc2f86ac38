"""Retrieval queries mixing pair-space compatibility with general-space geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import CompatibilityModel, Outfit


class QueryError(ValueError):
    pass


@dataclass(frozen=True)
class QueryEntry:
    item_id: str
    compatibility: float
    diversity: float


@dataclass
class QueryResult:
    entries: list[QueryEntry]
    requested: int
    short: bool = False
    threshold: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.entries) > self.requested:
            raise QueryError(f"{len(self.entries)} results for a request of {self.requested}")
        for e in self.entries:
            if not (math.isfinite(e.compatibility) and math.isfinite(e.diversity)):
                raise QueryError(f"non-finite score for {e.item_id}")

    @property
    def item_ids(self) -> list[str]:
        return [e.item_id for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def to_text(self) -> str:
        lines = []
        if self.threshold is not None:
            lines.append(f"# threshold\t{self.threshold!r}")
        if self.short:
            lines.append("# short\t1")
        for k, v in sorted(self.extra.items()):
            lines.append(f"# {k}\t{v}")
        lines.append("rank\titem_id\tcompatibility\tdiversity")
        for rank, e in enumerate(self.entries, 1):
            lines.append(f"{rank}\t{e.item_id}\t{e.compatibility!r}\t{e.diversity!r}")
        return "\n".join(lines) + "\n"


def _check_n(n: int) -> None:
    if n < 1:
        raise QueryError(f"N must be at least 1, got {n}")


def top_k_compatible(model: CompatibilityModel, item: str, target_type: int, k: int) -> list[tuple[str, float]]:
    """Candidates of ``target_type`` sorted by compatibility with ``item``.

    Ties are ordered by item id so the cut at ``k`` is deterministic.
    """
    pool = [c for c in model.items_of_type(target_type) if c != item]
    scored = sorted(((c, model.pair_score(item, c)) for c in pool), key=lambda cs: (-cs[1], cs[0]))
    return scored[:k]


def compatible_diverse(model: CompatibilityModel, item: str, target_type: int, n: int,
                       k: int | None = None) -> QueryResult:
    """Items of another type that go with ``item`` but differ from each other.

    The top ``k`` (default ``10 * n``) compatible candidates are thinned by
    greedy max-min selection in the general space. The first pick is the most
    compatible one; each entry's diversity is its minimum distance to the
    entries before it.
    """
    _check_n(n)
    if target_type == model.items[item].type_id:
        raise QueryError("target type must differ from the query item's type")
    k = 10 * n if k is None else k
    if k < n:
        raise QueryError(f"K={k} is smaller than N={n}")
    shortlist = top_k_compatible(model, item, target_type, k)
    if not shortlist:
        raise QueryError(f"no items of type {target_type}")
    chosen = [shortlist[0]]
    diversity = [0.0]
    rest = shortlist[1:]
    while rest and len(chosen) < n:
        best_i, best_d = 0, -math.inf
        for i, (c, _) in enumerate(rest):
            d = min(model.general_distance(c, s) for s, _ in chosen)
            # strict > keeps the more compatible candidate on ties
            if d > best_d:
                best_i, best_d = i, d
        chosen.append(rest.pop(best_i))
        diversity.append(best_d)
    entries = [QueryEntry(c, s, d) for (c, s), d in zip(chosen, diversity)]
    return QueryResult(entries, n, short=len(entries) < n, extra={"k": k})


def interchangeable(model: CompatibilityModel, item: str, n: int) -> QueryResult:
    """Same-type items closest to ``item`` in the general space.

    ``compatibility`` holds the negated distance and ``diversity`` the distance.
    """
    _check_n(n)
    pool = [c for c in model.items_of_type(model.items[item].type_id) if c != item]
    if not pool:
        raise QueryError(f"{item} has no other items of its type")
    ranked = sorted(((model.general_distance(item, c), c) for c in pool))[:n]
    return QueryResult([QueryEntry(c, -d, d) for d, c in ranked], n, short=len(ranked) < n)


def default_epsilon(score: float) -> float:
    return 0.05 * abs(score)


def replace_item(model: CompatibilityModel, outfit: Outfit, held: str, n: int,
                 epsilon: float | None = None) -> QueryResult:
    """Swap candidates for ``held`` that keep the outfit about as compatible.

    A candidate passes when the modified outfit scores at least the original
    score minus ``epsilon``. Survivors are ranked by general-space distance
    from ``held``, farthest first. ``compatibility`` is the modified outfit's
    score.
    """
    _check_n(n)
    if held not in outfit.items:
        raise QueryError(f"{held} is not in outfit {outfit.outfit_id}")
    base = model.outfit_score(outfit)
    eps = default_epsilon(base) if epsilon is None else epsilon
    if eps < 0:
        raise QueryError("epsilon must be non-negative")
    threshold = base - eps
    passing = []
    for c in model.items_of_type(model.items[held].type_id):
        if c in outfit.items:
            continue
        s = model.outfit_score(outfit.replace(held, c))
        if s >= threshold:
            passing.append((-model.general_distance(held, c), c, s))
    passing.sort()
    entries = [QueryEntry(c, s, -negd) for negd, c, s in passing[:n]]
    return QueryResult(entries, n, short=len(entries) < n, threshold=threshold,
                       extra={"base_score": base, "epsilon": eps})


@dataclass(frozen=True)
class SwapStep:
    held: str
    replacement: str | None
    outfit: Outfit
    score: float
    threshold: float

    @property
    def noop(self) -> bool:
        return self.replacement is None


def recursive_swap(model: CompatibilityModel, outfit: Outfit, seed: int = 0,
                   epsilon: float | None = None) -> list[SwapStep]:
    """Replace each item once, in a seeded order, gating every swap on the current outfit."""
    order = np.random.default_rng(seed).permutation(len(outfit))
    current = outfit
    steps = []
    for pos in order:
        held = outfit.items[pos]
        res = replace_item(model, current, held, 1, epsilon)
        if res.entries:
            new = res.entries[0].item_id
            current = current.replace(held, new)
            steps.append(SwapStep(held, new, current, res.entries[0].compatibility, res.threshold))
        else:
            steps.append(SwapStep(held, None, current, res.extra["base_score"], res.threshold))
    return steps
