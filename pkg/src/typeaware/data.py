"""Datasets: file I/O, train/val/test splitting, and a planted synthetic generator."""

from __future__ import annotations

import base64
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import networkx as nx
import numpy as np

from .model import CompatibilityModel, ItemRecord, ModelError, Outfit, TypePair

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


class SplitError(RuntimeError):
    def __init__(self, message: str, stats: Mapping | None = None):
        super().__init__(message)
        self.stats = dict(stats or {})


@dataclass
class Dataset:
    items: dict[str, ItemRecord]
    outfits: list[Outfit]
    taxonomy: dict[int, str] = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.taxonomy:
            self.taxonomy = {t: f"type{t}" for t in sorted({r.type_id for r in self.items.values()})}
        self.validate()

    def validate(self) -> None:
        dims = {r.image_features.shape[0] for r in self.items.values()}
        if len(dims) > 1:
            raise DatasetError(f"ragged image feature lengths: {sorted(dims)}")
        for r in self.items.values():
            if r.type_id not in self.taxonomy:
                raise DatasetError(f"item {r.item_id!r} has type {r.type_id} outside the taxonomy")
        seen = set()
        for o in self.outfits:
            if o.outfit_id in seen:
                raise DatasetError(f"duplicate outfit id {o.outfit_id!r}")
            seen.add(o.outfit_id)
            for i in o.items:
                if i not in self.items:
                    raise DatasetError(f"outfit {o.outfit_id!r} references unknown item {i!r}")

    @property
    def image_dim(self) -> int:
        return next(iter(self.items.values())).image_features.shape[0]

    @property
    def text_dim(self) -> int | None:
        for r in self.items.values():
            if r.text_features is not None:
                return r.text_features.shape[0]
        return None

    def type_of(self, item_id: str) -> int:
        return self.items[item_id].type_id

    def with_outfits(self, outfits: Sequence[Outfit]) -> "Dataset":
        return Dataset(self.items, list(outfits), self.taxonomy, dict(self.notes))

    def observed_pairs(self) -> set[TypePair]:
        """Cross-type pairs co-occurring in at least one outfit."""
        pairs = set()
        for o in self.outfits:
            for a, b in itertools.combinations(o.items, 2):
                ta, tb = self.type_of(a), self.type_of(b)
                if ta != tb:
                    pairs.add(TypePair(ta, tb))
        return pairs


# -- file formats -------------------------------------------------------------
#
# items file, tab separated, one item per line:
#   item_id  type_id  image_b64  text_b64  metadata_json
# feature blocks are base64 of raw little-endian float64; text_b64 and
# metadata_json may be empty. Lines "#type<TAB>id<TAB>name" declare the taxonomy.
# outfits file: outfit_id<TAB>item_id<TAB>item_id...


def _encode_block(vec: np.ndarray | None) -> str:
    if vec is None:
        return ""
    return base64.b64encode(np.asarray(vec, dtype="<f8").tobytes()).decode("ascii")


def _decode_block(text: str, where: str) -> np.ndarray | None:
    if not text:
        return None
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except ValueError as exc:
        raise DatasetError(f"{where}: bad base64 feature block ({exc})") from None
    if len(raw) % 8:
        raise DatasetError(f"{where}: feature block is not a whole number of float64 values")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def save_dataset(dataset: Dataset, items_path, outfits_path) -> None:
    with open(items_path, "w", encoding="utf-8") as fh:
        for t, name in sorted(dataset.taxonomy.items()):
            fh.write(f"#type\t{t}\t{name}\n")
        for r in dataset.items.values():
            meta = {}
            if r.title:
                meta["title"] = r.title
            if r.description:
                meta["description"] = r.description
            fh.write("\t".join([r.item_id, str(r.type_id), _encode_block(r.image_features),
                                _encode_block(r.text_features), json.dumps(meta) if meta else ""]) + "\n")
    with open(outfits_path, "w", encoding="utf-8") as fh:
        for o in dataset.outfits:
            fh.write("\t".join((o.outfit_id,) + o.items) + "\n")


def load_dataset(items_path, outfits_path) -> Dataset:
    """Read and validate a dataset.

    Items without a type are dropped, as are outfits left with fewer than two
    items; both counts are stored in ``dataset.notes``.
    """
    items: dict[str, ItemRecord] = {}
    taxonomy: dict[int, str] = {}
    untyped: set[str] = set()
    img_dim = None
    for lineno, line in enumerate(Path(items_path).read_text(encoding="utf-8").splitlines(), 1):
        where = f"{items_path}:{lineno}"
        if not line.strip():
            continue
        cols = line.split("\t")
        if cols[0] == "#type":
            taxonomy[int(cols[1])] = cols[2] if len(cols) > 2 else f"type{cols[1]}"
            continue
        if line.startswith("#"):
            continue
        cols += [""] * (5 - len(cols))
        item_id, type_text, img_text, txt_text, meta_text = cols[:5]
        if item_id in items or item_id in untyped:
            raise DatasetError(f"{where}: duplicate item id {item_id!r}")
        if not type_text:
            untyped.add(item_id)
            continue
        try:
            type_id = int(type_text)
        except ValueError:
            raise DatasetError(f"{where}: type id {type_text!r} is not an integer") from None
        image = _decode_block(img_text, where)
        if image is None:
            raise DatasetError(f"{where}: item {item_id!r} has no image features")
        if img_dim is None:
            img_dim = image.shape[0]
        elif image.shape[0] != img_dim:
            raise DatasetError(f"{where}: image features have length {image.shape[0]}, expected {img_dim}")
        meta = json.loads(meta_text) if meta_text else {}
        items[item_id] = ItemRecord(item_id, type_id, image, _decode_block(txt_text, where),
                                    meta.get("title", ""), meta.get("description", ""))

    outfits = []
    singles = 0
    for lineno, line in enumerate(Path(outfits_path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        outfit_id, members = cols[0], [c for c in cols[1:] if c]
        for i in members:
            if i not in items and i not in untyped:
                raise DatasetError(f"{outfits_path}:{lineno}: outfit {outfit_id!r} references unknown item {i!r}")
        members = [i for i in members if i not in untyped]
        if len(members) < 2:
            singles += 1
            continue
        try:
            outfits.append(Outfit(outfit_id, tuple(members)))
        except ModelError as exc:
            raise DatasetError(f"{outfits_path}:{lineno}: {exc}") from None
    if singles or untyped:
        log.info("dropped %d single-item outfits and %d untyped items", singles, len(untyped))
    if not taxonomy:
        taxonomy = {t: f"type{t}" for t in sorted({r.type_id for r in items.values()})}
    return Dataset(items, outfits, taxonomy,
                   notes={"dropped_single_item_outfits": singles, "dropped_untyped_items": len(untyped)})


# -- splits -------------------------------------------------------------------


@dataclass
class SplitAssignment:
    outfits: dict[str, str]
    items: dict[str, str]
    mode: str = "easy"
    stats: dict = field(default_factory=dict)

    @property
    def discarded(self) -> set[str]:
        return {i for i, s in self.items.items() if s == "discarded"}

    def outfit_ids(self, split: str) -> list[str]:
        return [o for o, s in self.outfits.items() if s == split]

    def apply(self, dataset: Dataset, split: str) -> list[Outfit]:
        """Outfits of one split, with discarded items removed."""
        gone = self.discarded
        out = []
        for o in dataset.outfits:
            if self.outfits.get(o.outfit_id) == split:
                kept = tuple(i for i in o.items if i not in gone)
                if len(kept) >= 2:
                    out.append(Outfit(o.outfit_id, kept))
        return out

    def check_disjoint(self, dataset: Dataset) -> None:
        """Full scan: every kept item's outfits all sit in one split."""
        seen: dict[str, str] = {}
        for split in SPLITS:
            for o in self.apply(dataset, split):
                for i in o.items:
                    if seen.setdefault(i, split) != split:
                        raise SplitError(f"item {i!r} appears in both {seen[i]} and {split}")
                    if self.items.get(i) != split:
                        raise SplitError(f"item {i!r} labelled {self.items.get(i)!r} but used in {split}")


def save_split(split: SplitAssignment, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#mode\t{split.mode}\n")
        for oid, s in split.outfits.items():
            fh.write(f"{oid}\t{s}\n")
        fh.write("#discarded\n")
        for i in sorted(split.discarded):
            fh.write(f"{i}\n")


def load_split(path, dataset: Dataset) -> SplitAssignment:
    outfits: dict[str, str] = {}
    discarded: set[str] = set()
    mode = "easy"
    section = "outfits"
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#mode"):
            mode = line.split("\t")[1]
        elif line == "#discarded":
            section = "discarded"
        elif section == "discarded":
            discarded.add(line.strip())
        else:
            oid, label = line.split("\t")
            if label not in SPLITS:
                raise DatasetError(f"{path}:{lineno}: unknown split label {label!r}")
            outfits[oid] = label
    return _label_items(dataset, outfits, discarded, mode)


def _label_items(dataset: Dataset, outfits: dict[str, str], discarded: set[str], mode: str,
                 stats: dict | None = None) -> SplitAssignment:
    labels: dict[str, str] = {}
    for o in dataset.outfits:
        s = outfits.get(o.outfit_id)
        if s is None:
            continue
        for i in o.items:
            if i not in discarded and i not in labels:
                labels[i] = s
    for i in dataset.items:
        if i not in labels:
            labels[i] = "discarded"
    return SplitAssignment(outfits, labels, mode, stats or {})


def largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    """Integer sizes summing to ``total``; leftovers go to the largest remainders."""
    raw = [total * f for f in fractions]
    sizes = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - sizes[k]), k))
    for k in order[: total - sum(sizes)]:
        sizes[k] += 1
    return sizes


def _check_fractions(fractions):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    return fractions


def outfit_split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitAssignment:
    """Random outfit-level partition. Items may appear in several splits."""
    fractions = _check_fractions(fractions)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset.outfits))
    sizes = largest_remainder(len(order), fractions)
    outfits: dict[str, str] = {}
    start = 0
    for name, n in zip(SPLITS, sizes):
        for k in order[start:start + n]:
            outfits[dataset.outfits[k].outfit_id] = name
        start += n
    outfits = {o.outfit_id: outfits[o.outfit_id] for o in dataset.outfits}
    return _label_items(dataset, outfits, set(), "easy", {"sizes": dict(zip(SPLITS, sizes))})


def build_item_graph(dataset_or_outfits) -> nx.Graph:
    outfits = getattr(dataset_or_outfits, "outfits", dataset_or_outfits)
    g = nx.Graph()
    for o in outfits:
        g.add_nodes_from(o.items)
        g.add_edges_from(itertools.combinations(o.items, 2))
    return g


def _shrink(outfits: Sequence[Outfit], removed: set[str]) -> list[Outfit]:
    out = []
    for o in outfits:
        kept = tuple(i for i in o.items if i not in removed)
        if len(kept) >= 2:
            out.append(Outfit(o.outfit_id, kept))
    return out


def _components(outfits: Sequence[Outfit]) -> list[tuple[set[str], list[str]]]:
    """Connected components as (items, outfit ids), largest outfit count first."""
    g = build_item_graph(outfits)
    comp_of = {}
    comps = []
    for n, nodes in enumerate(nx.connected_components(g)):
        comps.append((set(nodes), []))
        for i in nodes:
            comp_of[i] = n
    for o in outfits:
        comps[comp_of[o.items[0]]][1].append(o.outfit_id)
    comps.sort(key=lambda c: (-len(c[1]), min(c[0])))
    return comps


def packing_feasible(outfits: Sequence[Outfit], fractions) -> bool:
    """A component may not hold more outfits than the largest split's target."""
    if not outfits:
        return True
    comps = _components(outfits)
    return len(comps[0][1]) <= max(fractions) * len(outfits)


def _friendliest(outfits: Sequence[Outfit], component: set[str]) -> str:
    """Highest-degree item of the component.

    Ties go to the item whose removal leaves the smallest largest component
    (in outfits), then to the lowest id.
    """
    g = build_item_graph(outfits).subgraph(component)
    top = max(dict(g.degree).values())
    tied = sorted(i for i in g.nodes if g.degree(i) == top)
    if len(tied) == 1:
        return tied[0]

    def largest_after(i):
        rest = _shrink(outfits, {i})
        return len(_components(rest)[0][1]) if rest else 0

    return min(tied, key=lambda i: (largest_after(i), i))


def disjoint_split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), max_discard_fraction: float = 0.5) -> SplitAssignment:
    """Split so that no item is shared between splits.

    Components of the co-occurrence graph are packed largest-first into the
    split furthest below its outfit target. While the largest component is
    too big to fit, the highest-degree item in it is discarded and outfits
    left with fewer than two items are dropped.
    """
    fractions = _check_fractions(fractions)
    n_items = len({i for o in dataset.outfits for i in o.items})
    removed: set[str] = set()
    outfits = list(dataset.outfits)
    while True:
        comps = _components(outfits)
        if not outfits or len(comps[0][1]) <= max(fractions) * len(outfits):
            break
        victim = _friendliest(outfits, comps[0][0])
        removed.add(victim)
        if len(removed) > max_discard_fraction * n_items:
            raise SplitError(
                f"discard budget exhausted after removing {len(removed)} of {n_items} items",
                {"discarded": len(removed), "items": n_items, "outfits_left": len(outfits),
                 "largest_component_outfits": len(comps[0][1])})
        outfits = _shrink(outfits, removed)

    targets = [f * len(outfits) for f in fractions]
    filled = [0, 0, 0]
    labels: dict[str, str] = {}
    for _, oids in comps if outfits else []:
        k = max(range(3), key=lambda s: (targets[s] - filled[s], -s))
        filled[k] += len(oids)
        for oid in oids:
            labels[oid] = SPLITS[k]
    labels = {o.outfit_id: labels[o.outfit_id] for o in dataset.outfits if o.outfit_id in labels}
    stats = {"discarded": len(removed), "items": n_items,
             "outfits_kept": len(outfits), "outfits_dropped": len(dataset.outfits) - len(outfits),
             "sizes": dict(zip(SPLITS, filled))}
    split = _label_items(dataset, labels, removed, "disjoint", stats)
    split.check_disjoint(dataset)
    return split


# -- synthetic data with a planted compatibility rule --------------------------


@dataclass
class SyntheticSpec:
    n_types: int = 6
    latent_dim: int = 12
    n_items: int = 2000
    n_outfits: int = 1000
    coords_per_pair: int = 2
    relevant_coords: dict[TypePair, tuple[int, ...]] | None = None
    threshold: float = 0.5
    noise: float = 0.1
    image_dim: int = 24
    text_dim: int = 24
    outfit_size: tuple[int, int] = (3, 4)
    mixing: str = "random"
    seed: int = 0
    max_attempts: int = 50

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.n_types < 2:
            raise ValueError("need at least two types")
        lo, hi = self.outfit_size
        if not 2 <= lo <= hi <= self.n_types:
            raise ValueError(f"outfit_size must satisfy 2 <= min <= max <= n_types, got {self.outfit_size}")
        if self.mixing not in ("random", "identity"):
            raise ValueError(f"unknown mixing {self.mixing!r}")
        if self.mixing == "identity" and self.image_dim != self.latent_dim:
            raise ValueError("identity mixing needs image_dim == latent_dim")
        if self.relevant_coords is not None:
            for pair, coords in self.relevant_coords.items():
                if not coords:
                    raise ValueError(f"pair {pair} has no relevant coordinates")


class PlantedOracle(CompatibilityModel):
    """Ground truth for synthetic data: items of types (u, v) are compatible
    iff their latents are within ``threshold`` (squared distance) on the
    coordinates planted for that pair.

    Used as a model it scores 1 for compatible pairs and 0 otherwise, and
    measures similarity by squared latent distance.
    """

    def __init__(self, items: Mapping[str, ItemRecord], latents: Mapping[str, np.ndarray],
                 relevant_coords: Mapping[TypePair, tuple[int, ...]], threshold: float):
        self.items = items
        self.latents = latents
        self.relevant_coords = dict(relevant_coords)
        self.threshold = threshold
        self._all = tuple(sorted({c for cs in self.relevant_coords.values() for c in cs}))

    def coords(self, pair: TypePair) -> tuple[int, ...]:
        return self.relevant_coords.get(pair, self._all)

    def compatible(self, a: str, b: str) -> bool:
        coords = list(self.coords(TypePair(self.items[a].type_id, self.items[b].type_id)))
        diff = self.latents[a][coords] - self.latents[b][coords]
        return bool(diff @ diff < self.threshold)

    def pair_score(self, a: str, b: str) -> float:
        return 1.0 if self.compatible(a, b) else 0.0

    def general_distance(self, a: str, b: str) -> float:
        diff = self.latents[a] - self.latents[b]
        return float(diff @ diff)


def oracle_score(oracle: PlantedOracle, item_i: ItemRecord | str, item_j: ItemRecord | str) -> bool:
    """True when the planted rule calls the pair compatible."""
    a = getattr(item_i, "item_id", item_i)
    b = getattr(item_j, "item_id", item_j)
    return oracle.compatible(a, b)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, PlantedOracle]:
    rng = np.random.default_rng(spec.seed)
    T, m = spec.n_types, spec.latent_dim
    coords = spec.relevant_coords
    if coords is None:
        coords = {}
        for u, v in itertools.combinations(range(1, T + 1), 2):
            k = min(spec.coords_per_pair, m)
            coords[TypePair(u, v)] = tuple(sorted(int(c) for c in rng.choice(m, size=k, replace=False)))
    coords = {TypePair(p.u, p.v): tuple(c) for p, c in coords.items()}

    types = np.arange(spec.n_items) % T + 1
    H = rng.uniform(-1.0, 1.0, size=(spec.n_items, m))
    if spec.mixing == "identity":
        A = np.broadcast_to(np.eye(m), (T, m, m))
    else:
        A = rng.normal(size=(T, spec.image_dim, m)) / np.sqrt(m)
    Bt = rng.normal(size=(spec.text_dim, m)) / np.sqrt(m)
    X = np.einsum("nij,nj->ni", A[types - 1], H) + spec.noise * rng.normal(size=(spec.n_items, A.shape[1]))
    Tx = H @ Bt.T + spec.noise * rng.normal(size=(spec.n_items, spec.text_dim))

    ids = [f"i{n:05d}" for n in range(spec.n_items)]
    items = {ids[n]: ItemRecord(ids[n], int(types[n]), X[n], Tx[n]) for n in range(spec.n_items)}
    by_type = {t: np.flatnonzero(types == t) for t in range(1, T + 1)}

    every = sorted({c for v in coords.values() for c in v})

    def compatible_with(pool, members):
        mask = np.ones(len(pool), dtype=bool)
        for q in members:
            cs = list(coords.get(TypePair(int(types[pool[0]]), int(types[q])), every))
            diff = H[pool][:, cs] - H[q, cs]
            mask &= np.einsum("ij,ij->i", diff, diff) < spec.threshold
        return pool[mask]

    outfits = []
    lo, hi = spec.outfit_size
    for k in range(spec.n_outfits):
        for _attempt in range(spec.max_attempts):
            seed_item = int(rng.integers(spec.n_items))
            size = int(rng.integers(lo, hi + 1))
            others = [t for t in rng.permutation(np.arange(1, T + 1)) if t != types[seed_item]][: size - 1]
            members = [seed_item]
            for t in others:
                cands = compatible_with(rng.permutation(by_type[int(t)]), members)
                if not len(cands):
                    break
                members.append(int(cands[0]))
            else:
                outfits.append(Outfit(f"o{k:05d}", tuple(ids[n] for n in members)))
                break
        else:
            raise DatasetError(f"could not build outfit {k} after {spec.max_attempts} attempts")

    dataset = Dataset(items, outfits, {t: f"type{t}" for t in range(1, T + 1)},
                      notes={"synthetic_seed": spec.seed})
    latents = {ids[n]: H[n] for n in range(spec.n_items)}
    return dataset, PlantedOracle(items, latents, coords, spec.threshold)
