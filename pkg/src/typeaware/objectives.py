"""Triplet objectives for compatibility, similarity and visual-semantic terms.

The single-triplet functions (``compatibility_loss`` and friends) go through
the per-item forward API in :mod:`typeaware.model`. ``total_loss`` and
``loss_gradients`` use a vectorized batch path with hand-written backprop;
the two routes are checked against each other in the test-suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model import (
    COSINE_EPS,
    LEAKY_SLOPE,
    Hyperparams,
    ItemRecord,
    MissingModality,
    ModelParams,
    TypePair,
    encode_image,
    encode_text,
    mlp_forward,
    pair_score,
)


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TripletSpec:
    anchor: str
    positive: str
    negative: str
    pair: TypePair

    @classmethod
    def build(cls, anchor: ItemRecord, positive: ItemRecord, negative: ItemRecord) -> "TripletSpec":
        if positive.type_id != negative.type_id:
            raise ValueError("positive and negative must share a type")
        if anchor.type_id == positive.type_id:
            raise ValueError("anchor must differ in type from the positive")
        return cls(anchor.item_id, positive.item_id, negative.item_id,
                   TypePair(anchor.type_id, positive.type_id))


@dataclass
class LossBreakdown:
    comp: float
    sim: float
    vse: float
    l1: float
    l2: float
    total: float
    text_skipped: int = 0

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("comp", "sim", "vse", "l1", "l2", "total")}


def hinge_triplet(d_pos: float, d_neg: float, mu: float) -> float:
    if not mu > 0:
        raise ValueError("margin must be positive")
    return max(0.0, d_pos - d_neg + mu)


def _sqdist(a: np.ndarray, b: np.ndarray) -> float:
    diff = a - b
    return float(diff @ diff)


# -- single-triplet reference path ------------------------------------------


def compatibility_loss(params: ModelParams, triplet: TripletSpec,
                       items: Mapping[str, ItemRecord], margin: float = 0.2) -> float:
    a, p, n = items[triplet.anchor], items[triplet.positive], items[triplet.negative]
    s_pos = pair_score(params, a, p)
    s_neg = pair_score(params, a, n)
    # for distances s = -d, so this is max(0, d_pos - d_neg + mu)
    return hinge_triplet(-s_pos, -s_neg, margin)


def similarity_loss(params: ModelParams, triplet: TripletSpec, items: Mapping[str, ItemRecord],
                    hyper: Hyperparams) -> float:
    a, p, n = items[triplet.anchor], items[triplet.positive], items[triplet.negative]
    mu = hyper.margin
    fi, fj, fk = (encode_image(params, r) for r in (a, p, n))
    loss = hyper.lambda1 * hinge_triplet(_sqdist(fj, fk), _sqdist(fj, fi), mu)
    try:
        ti, tj, tk = (encode_text(params, r) for r in (a, p, n))
    except MissingModality:
        return loss
    return loss + hyper.lambda2 * hinge_triplet(_sqdist(tj, tk), _sqdist(tj, ti), mu)


def vse_loss(params: ModelParams, triplet: TripletSpec, items: Mapping[str, ItemRecord],
             margin: float = 0.2) -> float:
    recs = [items[triplet.anchor], items[triplet.positive], items[triplet.negative]]
    f = [encode_image(params, r) for r in recs]
    t = []
    for r in recs:
        try:
            t.append(encode_text(params, r))
        except MissingModality:
            t.append(None)
    total = 0.0
    for own in range(3):
        if t[own] is None:
            continue
        d_own = _sqdist(f[own], t[own])
        for other in range(3):
            if other != own and t[other] is not None:
                total += hinge_triplet(d_own, _sqdist(f[own], t[other]), margin)
    return total


# -- vectorized batch path --------------------------------------------------


@dataclass
class TripletBatch:
    """Feature rows for the distinct items in a batch plus per-triplet row indices."""

    image: np.ndarray
    text: np.ndarray | None
    has_text: np.ndarray
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    pairs: list[TypePair]

    def __len__(self):
        return len(self.anchor)

    @classmethod
    def from_triplets(cls, triplets: Sequence[TripletSpec], items: Mapping[str, ItemRecord]) -> "TripletBatch":
        if not triplets:
            raise ValueError("empty batch")
        rows: dict[str, int] = {}
        idx = np.empty((3, len(triplets)), dtype=np.int64)
        for b, t in enumerate(triplets):
            for role, item_id in enumerate((t.anchor, t.positive, t.negative)):
                idx[role, b] = rows.setdefault(item_id, len(rows))
        recs = [items[i] for i in rows]
        image = np.stack([r.image_features for r in recs])
        has_text = np.array([r.text_features is not None for r in recs])
        text = None
        if has_text.any():
            dim = next(r.text_features.shape[0] for r in recs if r.text_features is not None)
            text = np.zeros((len(recs), dim))
            for n, r in enumerate(recs):
                if r.text_features is not None:
                    text[n] = r.text_features
        return cls(image, text, has_text, idx[0], idx[1], idx[2], [t.pair for t in triplets])


def _mlp_backward(layers, cache, grad_out):
    grads = [None] * len(layers)
    delta = grad_out
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        h_in, _ = cache[i]
        grads[i] = (delta.T @ h_in, delta.sum(axis=0))
        if i > 0:
            z_prev = cache[i - 1][1]
            delta = (delta @ W) * np.where(z_prev > 0, 1.0, LEAKY_SLOPE)
    return grads


def _cosine_and_grads(x, y):
    nx = np.sqrt(np.einsum("bi,bi->b", x, x) + COSINE_EPS)
    ny = np.sqrt(np.einsum("bi,bi->b", y, y) + COSINE_EPS)
    s = np.einsum("bi,bi->b", x, y) / (nx * ny)
    dx = y / (nx * ny)[:, None] - (s / nx**2)[:, None] * x
    dy = x / (nx * ny)[:, None] - (s / ny**2)[:, None] * y
    return s, dx, dy


def _hinge_triplet_grads(anchor, pos, neg, mu):
    """Squared-distance hinge on row batches: returns hinge, active mask and
    d(hinge)/d(anchor, pos, neg) for the active rows (unscaled)."""
    dp = anchor - pos
    dn = anchor - neg
    h = np.einsum("bi,bi->b", dp, dp) - np.einsum("bi,bi->b", dn, dn) + mu
    act = h > 0
    return h, act, 2 * (neg - pos), -2 * dp, 2 * dn


def _evaluate(params: ModelParams, batch: TripletBatch, hyper: Hyperparams, need_grad: bool):
    mu = hyper.margin
    B = len(batch)
    kind = params.projection_kind
    mode = params.score_mode
    pattern = []

    F, fcache = mlp_forward(params.image_layers, batch.image)
    for _, z in fcache[:-1]:
        pattern.append(z > 0)
    use_text = (params.text_layers is not None and batch.text is not None
                and (hyper.use_sim or hyper.use_vse))
    if use_text:
        G, gcache = mlp_forward(params.text_layers, batch.text)
        for _, z in gcache[:-1]:
            pattern.append(z > 0)
        dG = np.zeros_like(G)
    dF = np.zeros_like(F)
    bank_grads = [np.zeros_like(w) for w in params.projection_bank]
    dm = None if params.metric_weight is None else np.zeros_like(params.metric_weight)

    ia, ip, ineg = batch.anchor, batch.positive, batch.negative
    fa, fp, fn = F[ia], F[ip], F[ineg]

    # projection into each triplet's type-pair subspace; slot -1 = general space
    slots = np.array([params.pair_slots.get(p, -1) for p in batch.pairs], dtype=np.int64)
    seen = slots >= 0
    d = F.shape[1]
    if kind == "fc":
        Wr = np.broadcast_to(np.eye(d), (B, d, d)).copy()
        if seen.any():
            Wr[seen] = np.stack(params.projection_bank)[slots[seen]]
        pa, pp, pn = (np.einsum("bij,bj->bi", Wr, v) for v in (fa, fp, fn))
    else:
        wr = np.ones((B, d))
        if seen.any():
            wr[seen] = np.stack(params.projection_bank)[slots[seen]]
        pa, pp, pn = fa * wr, fp * wr, fn * wr

    # compatibility term
    if mode == "negative_distance":
        h, act, ga, gp, gn = _hinge_triplet_grads(pa, pp, pn, mu)
    elif mode == "learned_metric":
        m, bias = params.metric_weight, params.metric_bias[0]
        s_pos = (pa * pp) @ m + bias
        s_neg = (pa * pn) @ m + bias
        h = s_neg - s_pos + mu
        act = h > 0
        ga, gp, gn = m * (pn - pp), -m * pa, m * pa
    else:
        s_pos, cpa1, cpp = _cosine_and_grads(pa, pp)
        s_neg, cpa2, cpn = _cosine_and_grads(pa, pn)
        h = s_neg - s_pos + mu
        act = h > 0
        ga, gp, gn = cpa2 - cpa1, -cpp, cpn
    pattern.append(act)
    comp = float(np.where(act, h, 0.0).sum() / B)

    if need_grad:
        g = (act / B)[:, None]
        dpa, dpp, dpn = g * ga, g * gp, g * gn
        if mode == "learned_metric":
            dm += ((act / B)[:, None] * pa * (pn - pp)).sum(axis=0)
        if kind == "fc":
            dfa, dfp, dfn = (np.einsum("bij,bi->bj", Wr, v) for v in (dpa, dpp, dpn))
            dW = (np.einsum("bi,bj->bij", dpa, fa) + np.einsum("bi,bj->bij", dpp, fp)
                  + np.einsum("bi,bj->bij", dpn, fn))
        else:
            dfa, dfp, dfn = dpa * wr, dpp * wr, dpn * wr
            dW = dpa * fa + dpp * fp + dpn * fn
        for b in np.flatnonzero(seen):
            bank_grads[slots[b]] += dW[b]
        np.add.at(dF, ia, dfa)
        np.add.at(dF, ip, dfp)
        np.add.at(dF, ineg, dfn)

    # similarity term: anchor j (positive), positive k (negative), negative i (anchor)
    sim = 0.0
    if hyper.use_sim:
        h, act, gj, gk, gi = _hinge_triplet_grads(fp, fn, fa, mu)
        pattern.append(act)
        sim += hyper.lambda1 * float(np.where(act, h, 0.0).sum() / B)
        if need_grad:
            g = (hyper.lambda1 * act / B)[:, None]
            np.add.at(dF, ip, g * gj)
            np.add.at(dF, ineg, g * gk)
            np.add.at(dF, ia, g * gi)
    text_skipped = 0
    if use_text:
        ok = batch.has_text[ia] & batch.has_text[ip] & batch.has_text[ineg]
        if hyper.use_sim:
            text_skipped += int((~ok).sum())
            ta, tp, tn = G[ia], G[ip], G[ineg]
            h, act, gj, gk, gi = _hinge_triplet_grads(tp, tn, ta, mu)
            act = act & ok
            pattern.append(act)
            sim += hyper.lambda2 * float(np.where(act, h, 0.0).sum() / B)
            if need_grad:
                g = (hyper.lambda2 * act / B)[:, None]
                np.add.at(dG, ip, g * gj)
                np.add.at(dG, ineg, g * gk)
                np.add.at(dG, ia, g * gi)
    elif hyper.use_sim:
        text_skipped += B

    # visual-semantic term
    vse = 0.0
    if hyper.use_vse and use_text:
        roles = (ia, ip, ineg)
        for own in range(3):
            for other in range(3):
                if other == own:
                    continue
                o, t = roles[own], roles[other]
                ok = batch.has_text[o] & batch.has_text[t]
                h, act, gf, gown, gother = _hinge_triplet_grads(F[o], G[o], G[t], mu)
                act = act & ok
                pattern.append(act)
                vse += float(np.where(act, h, 0.0).sum() / B)
                if need_grad:
                    g = (hyper.lambda3 * act / B)[:, None]
                    np.add.at(dF, o, g * gf)
                    np.add.at(dG, o, g * gown)
                    np.add.at(dG, t, g * gother)

    # regularizers
    rows = np.concatenate([ia, ip, ineg])
    l2 = float(np.einsum("bi,bi->", F[rows], F[rows]) / (3 * B))
    learned = kind != "binary"
    l1 = float(sum(np.abs(w).sum() for w in params.projection_bank)) if learned else 0.0
    total = comp + sim + hyper.lambda3 * vse + hyper.lambda4 * l2 + hyper.lambda5 * l1
    breakdown = LossBreakdown(comp, sim, vse, l1, l2, total, text_skipped)
    if not np.isfinite(total):
        raise NonFiniteError(f"non-finite loss: {breakdown}")
    if not need_grad:
        return breakdown, None, pattern

    np.add.at(dF, rows, (hyper.lambda4 * 2.0 / (3 * B)) * F[rows])
    grads: dict[str, np.ndarray] = {}
    for i, (dW_, db_) in enumerate(_mlp_backward(params.image_layers, fcache, dF)):
        grads[f"theta.{i}.W"], grads[f"theta.{i}.b"] = dW_, db_
    if params.text_layers is not None:
        if use_text:
            tgrads = _mlp_backward(params.text_layers, gcache, dG)
        else:
            tgrads = [(np.zeros_like(W), np.zeros_like(b)) for W, b in params.text_layers]
        for i, (dW_, db_) in enumerate(tgrads):
            grads[f"phi.{i}.W"], grads[f"phi.{i}.b"] = dW_, db_
    for slot, w in enumerate(params.projection_bank):
        if learned:
            grads[f"proj.{slot}"] = bank_grads[slot] + hyper.lambda5 * np.sign(w)
        else:
            grads[f"proj.{slot}"] = np.zeros_like(w)
    if dm is not None:
        grads["metric.w"] = dm
        # the bias cancels in s_neg - s_pos
        grads["metric.b"] = np.zeros_like(params.metric_bias)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    return breakdown, grads, pattern


def total_loss(params: ModelParams, batch: TripletBatch, hyper: Hyperparams) -> LossBreakdown:
    return _evaluate(params, batch, hyper, need_grad=False)[0]


def loss_gradients(params: ModelParams, batch: TripletBatch, hyper: Hyperparams):
    """Return ``(LossBreakdown, grads)`` with one gradient per named tensor."""
    breakdown, grads, _ = _evaluate(params, batch, hyper, need_grad=True)
    return breakdown, grads


def activation_pattern(params: ModelParams, batch: TripletBatch, hyper: Hyperparams) -> bytes:
    """Fingerprint of every hinge and leaky-rectifier branch taken by the loss."""
    _, _, pattern = _evaluate(params, batch, hyper, need_grad=False)
    return b"".join(np.packbits(np.ravel(p)).tobytes() for p in pattern)
