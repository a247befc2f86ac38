"""Item encoders, type-pair projections and pairwise compatibility scores.

Everything here is a pure function of ``(params, inputs)``. Parameter updates
live in :mod:`typeaware.trainer`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

LEAKY_SLOPE = 0.01
COSINE_EPS = 1e-12

SCORE_MODES = ("negative_distance", "learned_metric", "cosine")
PROJECTION_KINDS = ("diag", "binary", "fc", "none")

Layer = tuple[np.ndarray, np.ndarray]


class ModelError(ValueError):
    pass


class DimensionMismatch(ModelError):
    pass


class MissingModality(ModelError):
    pass


class ConfigurationError(ModelError):
    pass


class UnseenPair(KeyError):
    """Raised when a type pair has no learned projection."""


def _as_vector(values) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ModelError(f"expected a 1-D feature vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class ItemRecord:
    item_id: str
    type_id: int
    image_features: np.ndarray
    text_features: np.ndarray | None = None
    title: str = ""
    description: str = ""

    def __post_init__(self):
        object.__setattr__(self, "image_features", _as_vector(self.image_features))
        if self.text_features is not None:
            object.__setattr__(self, "text_features", _as_vector(self.text_features))
        object.__setattr__(self, "type_id", int(self.type_id))


@dataclass(frozen=True)
class Outfit:
    outfit_id: str
    items: tuple[str, ...]

    def __post_init__(self):
        items = tuple(str(i) for i in self.items)
        if len(set(items)) != len(items):
            raise ModelError(f"outfit {self.outfit_id!r} lists an item twice")
        object.__setattr__(self, "items", items)

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def without(self, item_id: str) -> "Outfit":
        return Outfit(self.outfit_id, tuple(i for i in self.items if i != item_id))

    def replace(self, old: str, new: str, outfit_id: str | None = None) -> "Outfit":
        return Outfit(outfit_id or self.outfit_id,
                      tuple(new if i == old else i for i in self.items))


@dataclass(frozen=True, order=True)
class TypePair:
    """Unordered pair of type ids, stored with ``u <= v``."""

    u: int
    v: int

    def __post_init__(self):
        u, v = int(self.u), int(self.v)
        if u > v:
            u, v = v, u
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @classmethod
    def of(cls, a: int, b: int) -> "TypePair":
        return cls(a, b)

    def __str__(self):
        return f"{self.u}-{self.v}"

    @classmethod
    def parse(cls, text: str) -> "TypePair":
        u, v = text.split("-")
        return cls(int(u), int(v))


@dataclass
class Hyperparams:
    margin: float = 0.2
    lambda1: float = 5e-4
    lambda2: float = 5e-4
    lambda3: float = 5e-5
    lambda4: float = 5e-4
    lambda5: float = 5e-4
    learning_rate: float = 5e-5
    batch_size: int = 256
    embed_dim: int = 64
    sharing_ratio: int = 1
    seed: int = 0
    score_mode: str = "negative_distance"
    projection: str = "diag"
    use_vse: bool = True
    use_sim: bool = True
    hidden: tuple[int, ...] = (256,)
    text_hidden: tuple[int, ...] = (256,)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.text_hidden = tuple(int(h) for h in self.text_hidden)
        self.validate()

    def validate(self) -> None:
        if not self.margin > 0:
            raise ConfigurationError(f"margin must be > 0, got {self.margin}")
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.embed_dim < 1:
            raise ConfigurationError("embed_dim must be >= 1")
        if self.sharing_ratio < 1:
            raise ConfigurationError("sharing_ratio must be >= 1")
        if self.score_mode not in SCORE_MODES:
            raise ConfigurationError(f"unknown score_mode {self.score_mode!r}")
        if self.projection not in PROJECTION_KINDS:
            raise ConfigurationError(f"unknown projection {self.projection!r}")

    @property
    def lambdas(self) -> tuple[float, float, float, float, float]:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5)


@dataclass
class ModelParams:
    """All weights of the type-aware model.

    ``pair_slots`` maps each type pair observed in training to an index into
    ``projection_bank``; with a sharing ratio above one, several pairs point
    at the same slot. An empty ``pair_slots`` is the single-space baseline.
    """

    image_layers: list[Layer]
    text_layers: list[Layer] | None = None
    projection_kind: str = "diag"
    projection_bank: list[np.ndarray] = field(default_factory=list)
    pair_slots: dict[TypePair, int] = field(default_factory=dict)
    metric_weight: np.ndarray | None = None
    metric_bias: np.ndarray | None = None
    score_mode: str = "negative_distance"

    def __post_init__(self):
        if self.score_mode not in SCORE_MODES:
            raise ConfigurationError(f"unknown score_mode {self.score_mode!r}")
        d = self.embed_dim
        for slot, w in enumerate(self.projection_bank):
            want = (d, d) if self.projection_kind == "fc" else (d,)
            if w.shape != want:
                raise DimensionMismatch(
                    f"projection slot {slot} has shape {w.shape}, expected {want}")
            if self.projection_kind == "binary":
                w.flags.writeable = False
        for pair, slot in self.pair_slots.items():
            if not 0 <= slot < len(self.projection_bank):
                raise ConfigurationError(f"pair {pair} points at missing slot {slot}")
        if self.metric_weight is not None and self.metric_weight.shape != (d,):
            raise DimensionMismatch("metric head length must equal embed_dim")

    @property
    def embed_dim(self) -> int:
        return self.image_layers[-1][0].shape[0]

    @property
    def image_input_dim(self) -> int:
        return self.image_layers[0][0].shape[1]

    @property
    def text_input_dim(self) -> int | None:
        return None if self.text_layers is None else self.text_layers[0][0].shape[1]

    def projection(self, pair: TypePair) -> np.ndarray:
        try:
            return self.projection_bank[self.pair_slots[pair]]
        except KeyError:
            raise UnseenPair(pair) from None

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        for prefix, layers in (("theta", self.image_layers), ("phi", self.text_layers)):
            for i, (W, b) in enumerate(layers or ()):
                yield f"{prefix}.{i}.W", W
                yield f"{prefix}.{i}.b", b
        for slot, w in enumerate(self.projection_bank):
            yield f"proj.{slot}", w
        if self.metric_weight is not None:
            yield "metric.w", self.metric_weight
            yield "metric.b", self.metric_bias

    def trainable(self, name: str) -> bool:
        return not (name.startswith("proj.") and self.projection_kind == "binary")

    def tensors(self) -> dict[str, np.ndarray]:
        return dict(self.named_tensors())

    def copy(self) -> "ModelParams":
        def layers(ls):
            return None if ls is None else [(W.copy(), b.copy()) for W, b in ls]

        return ModelParams(
            image_layers=layers(self.image_layers),
            text_layers=layers(self.text_layers),
            projection_kind=self.projection_kind,
            projection_bank=[w.copy() for w in self.projection_bank],
            pair_slots=dict(self.pair_slots),
            metric_weight=None if self.metric_weight is None else self.metric_weight.copy(),
            metric_bias=None if self.metric_bias is None else self.metric_bias.copy(),
            score_mode=self.score_mode,
        )


# -- encoders ---------------------------------------------------------------


def mlp_forward(layers: Sequence[Layer], x: np.ndarray):
    """Batched forward pass. Returns the output and the per-layer cache.

    The cache holds ``(layer_input, pre_activation)`` for every layer.
    """
    h = x
    cache = []
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = h @ W.T + b
        cache.append((h, z))
        h = z if i == last else np.where(z > 0, z, LEAKY_SLOPE * z)
    return h, cache


def _encode(layers, x, item_id, what):
    want = layers[0][0].shape[1]
    if x.shape[0] != want:
        raise DimensionMismatch(
            f"item {item_id!r}: {what} features have length {x.shape[0]}, encoder expects {want}")
    out, _ = mlp_forward(layers, x[None, :])
    return out[0]


def encode_image(params: ModelParams, item: ItemRecord) -> np.ndarray:
    return _encode(params.image_layers, item.image_features, item.item_id, "image")


def encode_text(params: ModelParams, item: ItemRecord) -> np.ndarray:
    if item.text_features is None:
        raise MissingModality(f"item {item.item_id!r} has no text features")
    if params.text_layers is None:
        raise MissingModality("model has no text encoder")
    return _encode(params.text_layers, item.text_features, item.item_id, "text")


# -- type-pair subspaces ----------------------------------------------------


def apply_projection(kind: str, w: np.ndarray, y: np.ndarray) -> np.ndarray:
    if kind == "fc":
        return y @ w.T
    return y * w


def project_pair(params: ModelParams, pair: TypePair, y: np.ndarray) -> np.ndarray:
    """Map a general embedding into the ``pair`` subspace; raises UnseenPair."""
    return apply_projection(params.projection_kind, params.projection(pair), y)


def _projected(params, a: ItemRecord, b: ItemRecord):
    fa, fb = encode_image(params, a), encode_image(params, b)
    pair = TypePair(a.type_id, b.type_id)
    try:
        return project_pair(params, pair, fa), project_pair(params, pair, fb)
    except UnseenPair:
        # no subspace was learned for this pair: compare in the general space
        return fa, fb


def pair_distance(params: ModelParams, a: ItemRecord, b: ItemRecord) -> float:
    pa, pb = _projected(params, a, b)
    diff = pa - pb
    return float(diff @ diff)


def metric_compatibility(params: ModelParams, a: ItemRecord, b: ItemRecord) -> float:
    if params.metric_weight is None:
        raise ConfigurationError("model has no metric head")
    pa, pb = _projected(params, a, b)
    return float(params.metric_weight @ (pa * pb) + params.metric_bias[0])


def cosine_compatibility(params: ModelParams, a: ItemRecord, b: ItemRecord) -> float:
    pa, pb = _projected(params, a, b)
    na = np.sqrt(pa @ pa + COSINE_EPS)
    nb = np.sqrt(pb @ pb + COSINE_EPS)
    return float(pa @ pb / (na * nb))


def pair_score(params: ModelParams, a: ItemRecord, b: ItemRecord) -> float:
    """Compatibility of two items; higher means more compatible."""
    if params.score_mode == "learned_metric":
        return metric_compatibility(params, a, b)
    if params.score_mode == "cosine":
        return cosine_compatibility(params, a, b)
    return -pair_distance(params, a, b)


def mean_pairwise(item_ids: Sequence[str], score) -> float:
    if len(item_ids) < 2:
        raise ModelError("an outfit needs at least 2 items to be scored")
    scores = [score(a, b) for a, b in itertools.combinations(item_ids, 2)]
    return float(sum(scores) / len(scores))


def outfit_score(params: ModelParams, outfit: Outfit, catalog: Mapping[str, ItemRecord]) -> float:
    return mean_pairwise(outfit.items, lambda a, b: pair_score(params, catalog[a], catalog[b]))


# -- catalog-level scoring --------------------------------------------------


class CompatibilityModel:
    """Scoring interface used by evaluation and queries.

    Subclasses provide ``pair_score`` and ``general_distance`` over item ids.
    """

    items: Mapping[str, ItemRecord]

    def pair_score(self, a: str, b: str) -> float:
        raise NotImplementedError

    def general_distance(self, a: str, b: str) -> float:
        raise NotImplementedError

    def outfit_score(self, outfit: Outfit | Iterable[str]) -> float:
        ids = outfit.items if isinstance(outfit, Outfit) else tuple(outfit)
        return mean_pairwise(ids, self.pair_score)

    def items_of_type(self, type_id: int) -> list[str]:
        return sorted(i for i, rec in self.items.items() if rec.type_id == type_id)


class EmbeddingModel(CompatibilityModel):
    """Trained parameters bound to an item catalog, with cached embeddings."""

    def __init__(self, params: ModelParams, items: Mapping[str, ItemRecord]):
        self.params = params
        self.items = items
        self._index = {item_id: n for n, item_id in enumerate(items)}
        X = np.stack([rec.image_features for rec in items.values()]) if items else np.zeros((0, params.image_input_dim))
        if X.shape[1] != params.image_input_dim:
            raise DimensionMismatch(
                f"catalog image features have length {X.shape[1]}, "
                f"encoder expects {params.image_input_dim}")
        self.embeddings, _ = mlp_forward(params.image_layers, X)
        self._proj_cache: dict[int, np.ndarray] = {}

    def embedding(self, item_id: str) -> np.ndarray:
        return self.embeddings[self._index[item_id]]

    def _projected(self, item_id: str, slot: int | None) -> np.ndarray:
        if slot is None:
            return self.embedding(item_id)
        if slot not in self._proj_cache:
            p = self.params
            self._proj_cache[slot] = apply_projection(
                p.projection_kind, p.projection_bank[slot], self.embeddings)
        return self._proj_cache[slot][self._index[item_id]]

    def pair_score(self, a: str, b: str) -> float:
        p = self.params
        slot = p.pair_slots.get(TypePair(self.items[a].type_id, self.items[b].type_id))
        pa, pb = self._projected(a, slot), self._projected(b, slot)
        if p.score_mode == "learned_metric":
            return float(p.metric_weight @ (pa * pb) + p.metric_bias[0])
        if p.score_mode == "cosine":
            na = np.sqrt(pa @ pa + COSINE_EPS)
            nb = np.sqrt(pb @ pb + COSINE_EPS)
            return float(pa @ pb / (na * nb))
        diff = pa - pb
        return -float(diff @ diff)

    def general_distance(self, a: str, b: str) -> float:
        diff = self.embedding(a) - self.embedding(b)
        return float(diff @ diff)
