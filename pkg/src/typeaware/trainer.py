"""Triplet sampling, the optimization loop and checkpoint files."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset, SplitAssignment
from .model import (
    ConfigurationError,
    Hyperparams,
    ModelParams,
    Outfit,
    TypePair,
)
from .objectives import LossBreakdown, NonFiniteError, TripletBatch, TripletSpec, loss_gradients

log = logging.getLogger(__name__)

MAX_NEGATIVE_DRAWS = 100


class SamplingError(RuntimeError):
    pass


class SkipTriplet(Exception):
    """No valid negative was found for the drawn anchor/positive pair."""


# -- initialization -----------------------------------------------------------


def _mlp_init(sizes: Sequence[int], rng: np.random.Generator):
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        layers.append((rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return layers


def assign_pair_slots(pairs: Iterable[TypePair], sharing_ratio: int,
                      rng: np.random.Generator) -> tuple[dict[TypePair, int], int]:
    """Randomly partition the pairs into groups of at most ``sharing_ratio``.

    Returns the pair -> slot map and the number of slots, ceil(P / k).
    """
    pairs = sorted(set(pairs))
    if sharing_ratio == 1:
        return {p: n for n, p in enumerate(pairs)}, len(pairs)
    order = rng.permutation(len(pairs))
    slots = {pairs[k]: n // sharing_ratio for n, k in enumerate(order)}
    return slots, -(-len(pairs) // sharing_ratio)


def fixed_binary_masks(n_slots: int, dim: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Deal the (shuffled) embedding dimensions to slots, ceil(d / n) each.

    When ``n * ceil(d / n) > d`` the deal wraps around and masks overlap.
    """
    if n_slots == 0:
        return []
    per = -(-dim // n_slots)
    dims = rng.permutation(dim)
    masks = []
    for s in range(n_slots):
        w = np.zeros(dim)
        w[dims[[(s * per + r) % dim for r in range(per)]]] = 1.0
        masks.append(w)
    return masks


def init_params(hyper: Hyperparams, image_dim: int, text_dim: int | None,
                pairs: Iterable[TypePair], rng: np.random.Generator) -> ModelParams:
    d = hyper.embed_dim
    image_layers = _mlp_init((image_dim, *hyper.hidden, d), rng)
    text_layers = None
    if text_dim is not None and (hyper.use_vse or hyper.use_sim):
        text_layers = _mlp_init((text_dim, *hyper.text_hidden, d), rng)
    kind = hyper.projection
    slots: dict[TypePair, int] = {}
    bank: list[np.ndarray] = []
    if kind != "none":
        slots, n = assign_pair_slots(pairs, hyper.sharing_ratio, rng)
        if kind == "diag":
            bank = [np.ones(d) for _ in range(n)]
        elif kind == "binary":
            bank = fixed_binary_masks(n, d, rng)
        else:
            bank = [np.eye(d) for _ in range(n)]
    metric_w = metric_b = None
    if hyper.score_mode == "learned_metric":
        # start as the plain inner product in the subspace, like the masks
        metric_w = 1.0 + rng.uniform(-0.1, 0.1, size=d)
        metric_b = np.zeros(1)
    return ModelParams(image_layers, text_layers, "diag" if kind == "none" else kind,
                       bank, slots, metric_w, metric_b, hyper.score_mode)


# -- triplet sampling ---------------------------------------------------------


class TripletSampler:
    """Draws (anchor, positive, negative) triplets from a set of outfits.

    An outfit is chosen uniformly, then an ordered cross-type item pair within
    it, then a negative of the positive's type that never shares an outfit
    with the anchor.
    """

    def __init__(self, dataset: Dataset, outfits: Sequence[Outfit] | None = None):
        self.items = dataset.items
        outfits = dataset.outfits if outfits is None else outfits
        self.cooccur: dict[str, set[str]] = {}
        pool: dict[int, set[str]] = {}
        self.outfits: list[list[tuple[str, str]]] = []
        for o in outfits:
            for i in o.items:
                self.cooccur.setdefault(i, set()).update(o.items)
                pool.setdefault(self.items[i].type_id, set()).add(i)
            pairs = [(a, p) for a in o.items for p in o.items
                     if self.items[a].type_id != self.items[p].type_id]
            if pairs:
                self.outfits.append(pairs)
        if not self.outfits:
            raise SamplingError("no outfit contains two items of different types")
        self.pool = {t: sorted(ids) for t, ids in pool.items()}

    def _try(self, rng: np.random.Generator) -> TripletSpec:
        pairs = self.outfits[rng.integers(len(self.outfits))]
        a, p = pairs[rng.integers(len(pairs))]
        candidates = self.pool[self.items[p].type_id]
        banned = self.cooccur[a]
        for _ in range(MAX_NEGATIVE_DRAWS):
            n = candidates[rng.integers(len(candidates))]
            if n not in banned:
                return TripletSpec(a, p, n, TypePair(self.items[a].type_id, self.items[p].type_id))
        raise SkipTriplet(a, p)

    def sample(self, rng: np.random.Generator, max_resamples: int = 1000) -> TripletSpec:
        for _ in range(max_resamples):
            try:
                return self._try(rng)
            except SkipTriplet:
                continue
        raise SamplingError(f"no valid triplet after {max_resamples} resamples")

    def batch(self, rng: np.random.Generator, size: int) -> list[TripletSpec]:
        return [self.sample(rng) for _ in range(size)]


def sample_triplet(dataset: Dataset, rng: np.random.Generator) -> TripletSpec:
    return TripletSampler(dataset).sample(rng)


# -- optimization -------------------------------------------------------------


@dataclass
class TrainConfig:
    hyper: Hyperparams = field(default_factory=Hyperparams)
    epochs: int = 10
    triplets_per_epoch: int | None = None
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_path: str | None = None
    log_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            tensors[name] -= self.lr * g


class Adam:
    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            tensors[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.hyper.learning_rate)
    return Adam(config.hyper.learning_rate, config.beta1, config.beta2, config.eps)


def train_step(params: ModelParams, batch: TripletBatch, config: TrainConfig,
               optimizer) -> tuple[ModelParams, LossBreakdown]:
    """One update, applied in place. Returns the params and the pre-update loss."""
    if len(batch) > config.hyper.batch_size:
        raise ValueError(f"batch of {len(batch)} exceeds batch_size {config.hyper.batch_size}")
    breakdown, grads = loss_gradients(params, batch, config.hyper)
    if not math.isfinite(breakdown.total):
        raise NonFiniteError(f"non-finite loss {breakdown}")
    tensors = params.tensors()
    optimizer.step(tensors, {k: g for k, g in grads.items() if params.trainable(k)})
    return params, breakdown


@dataclass
class Checkpoint:
    hyper: Hyperparams
    params: ModelParams
    step: int = 0
    rng_state: dict | None = None
    taxonomy: dict[int, str] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)


def _mean_breakdown(parts: Sequence[LossBreakdown]) -> dict[str, float]:
    keys = ("comp", "sim", "vse", "l1", "l2", "total")
    return {k: float(np.mean([getattr(b, k) for b in parts])) for k in keys}


def fit(dataset: Dataset, config: TrainConfig, split: SplitAssignment | None = None,
        log_path=None) -> Checkpoint:
    hyper = config.hyper
    rng = np.random.default_rng(hyper.seed)
    outfits = split.apply(dataset, "train") if split is not None else list(dataset.outfits)
    if not outfits:
        raise SamplingError("no training outfits")
    train = dataset.with_outfits(outfits)
    params = init_params(hyper, dataset.image_dim, dataset.text_dim, train.observed_pairs(), rng)
    sampler = TripletSampler(dataset, outfits)
    optimizer = make_optimizer(config)
    per_epoch = config.triplets_per_epoch or 16 * len(outfits)
    steps = max(1, per_epoch // hyper.batch_size)
    history = []
    step = 0
    for epoch in range(config.epochs):
        parts = []
        for _ in range(steps):
            triplets = sampler.batch(rng, hyper.batch_size)
            batch = TripletBatch.from_triplets(triplets, dataset.items)
            params, br = train_step(params, batch, config, optimizer)
            parts.append(br)
            step += 1
        row = {"epoch": epoch + 1, "step": step, **_mean_breakdown(parts)}
        history.append(row)
        if config.log_every and (epoch + 1) % config.log_every == 0:
            log.info("epoch %(epoch)d step %(step)d comp %(comp).5f total %(total).5f", row)
    ckpt = Checkpoint(hyper, params, step, rng.bit_generator.state, dict(dataset.taxonomy), history)
    if config.checkpoint_path:
        save_checkpoint(ckpt, config.checkpoint_path)
        write_training_log(history, log_path or str(config.checkpoint_path) + ".log")
    elif log_path:
        write_training_log(history, log_path)
    return ckpt


def write_training_log(history: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\tstep\tcomp\tsim\tvse\tl1\tl2\ttotal\n")
        for row in history:
            fh.write("\t".join([str(row["epoch"]), str(row["step"])]
                               + [repr(row[k]) for k in ("comp", "sim", "vse", "l1", "l2", "total")]) + "\n")


# -- checkpoint files ---------------------------------------------------------
#
# layout (little endian):
#   8s magic | u32 version | u64 header length | header JSON
#   u32 tensor count | per tensor: u16 name length, name, u8 ndim, u64 dims, raw f8 data

MAGIC = b"TYPEAWR\x00"
VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def hyper_to_dict(hyper: Hyperparams) -> dict:
    d = dataclasses.asdict(hyper)
    d["hidden"] = list(hyper.hidden)
    d["text_hidden"] = list(hyper.text_hidden)
    return d


def hyper_from_dict(d: dict) -> Hyperparams:
    return Hyperparams(**d)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    p = ckpt.params
    header = {
        "hyper": hyper_to_dict(ckpt.hyper),
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "taxonomy": {str(k): v for k, v in ckpt.taxonomy.items()},
        "history": ckpt.history,
        "projection_kind": p.projection_kind,
        "score_mode": p.score_mode,
        "pair_slots": [[pair.u, pair.v, slot] for pair, slot in sorted(p.pair_slots.items())],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<IQ", VERSION, len(head)), head]
    tensors = list(p.named_tensors())
    chunks.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: wanted {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if len(r.data) < len(MAGIC) or r.data[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file (bad magic)")
    r.take(len(MAGIC))
    version, head_len = r.unpack("<IQ")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(head_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header ({exc})") from None
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(r.data):
        raise CheckpointFormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    params = _params_from_tensors(tensors, header)
    hyper = hyper_from_dict(header["hyper"])
    widths = [W.shape[0] for W, _ in params.image_layers]
    if widths != [*hyper.hidden, hyper.embed_dim]:
        raise CheckpointShapeError(f"{path}: encoder widths {widths} disagree with the stored hyperparameters")
    return Checkpoint(
        hyper=hyper,
        params=params,
        step=header["step"],
        rng_state=header["rng_state"],
        taxonomy={int(k): v for k, v in header["taxonomy"].items()},
        history=header["history"],
    )


def _params_from_tensors(tensors: dict[str, np.ndarray], header: dict) -> ModelParams:
    def layers(prefix):
        out = []
        while f"{prefix}.{len(out)}.W" in tensors:
            k = len(out)
            out.append((tensors[f"{prefix}.{k}.W"], tensors[f"{prefix}.{k}.b"]))
        return out or None

    image = layers("theta")
    if image is None:
        raise CheckpointShapeError("checkpoint has no image encoder")
    text = layers("phi")
    for name, ls in (("theta", image), ("phi", text or [])):
        for k, (W, b) in enumerate(ls):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise CheckpointShapeError(f"{name}.{k}: weight {W.shape} and bias {b.shape} disagree")
            if k and W.shape[1] != ls[k - 1][0].shape[0]:
                raise CheckpointShapeError(f"{name}.{k}: input size {W.shape[1]} does not match previous layer")
    bank = []
    while f"proj.{len(bank)}" in tensors:
        bank.append(tensors[f"proj.{len(bank)}"])
    slots = {TypePair(u, v): s for u, v, s in header["pair_slots"]}
    try:
        return ModelParams(
            image_layers=image,
            text_layers=text,
            projection_kind=header["projection_kind"],
            projection_bank=bank,
            pair_slots=slots,
            metric_weight=tensors.get("metric.w"),
            metric_bias=tensors.get("metric.b"),
            score_mode=header["score_mode"],
        )
    except (ValueError, ConfigurationError) as exc:
        raise CheckpointShapeError(str(exc)) from None


def checkpoint_roundtrip(path) -> ModelParams:
    return load_checkpoint(path).params
