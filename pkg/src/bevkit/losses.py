"""Training objective: segmentation, instance embedding, direction, depth focal loss.

Every loss returns a :class:`~bevkit.tensor.GradPair` whose ``value`` is a
Python float and whose ``grads`` hold the gradient w.r.t. the logits or
embeddings it was given.
"""

from __future__ import annotations

import math

import numpy as np

from .config import LossWeights
from .errors import LabelError, LossError, ShapeError
from .tensor import GradPair, log_softmax64, out_dtype

NO_LANE = -1


def _masked_ce(logits, labels, mask):
    """Mean softmax cross-entropy over ``mask`` cells, with its gradient."""
    logits = np.asarray(logits)
    logp = log_softmax64(logits)
    n = int(mask.sum())
    grad = np.zeros(logits.shape)
    if n == 0:
        return 0.0, grad.astype(out_dtype(logits))
    idx = np.where(mask, labels, 0)
    picked = np.take_along_axis(logp, idx[..., None], axis=-1)[..., 0]
    value = float(-picked[mask].sum() / n)
    p = np.exp(logp)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    grad = np.where(mask[..., None], (p - onehot) / n, 0.0)
    return value, grad.astype(out_dtype(logits))


def seg_loss(seg_logits, labels) -> GradPair:
    labels = np.asarray(labels).astype(np.int64)
    k = np.shape(seg_logits)[-1]
    if labels.shape != np.shape(seg_logits)[:-1]:
        raise ShapeError("segmentation labels do not match logits")
    if labels.min() < 0 or labels.max() >= k:
        raise LabelError(f"segmentation labels must lie in [0, {k})")
    value, grad = _masked_ce(seg_logits, labels, np.ones(labels.shape, dtype=bool))
    return GradPair(value, {"seg_logits": grad})


def direction_loss(dir_logits, dir_labels) -> GradPair:
    """Cross-entropy over lane pixels only; cells labelled NO_LANE get zero gradient."""
    labels = np.asarray(dir_labels).astype(np.int64)
    k = np.shape(dir_logits)[-1]
    if labels.shape != np.shape(dir_logits)[:-1]:
        raise ShapeError("direction labels do not match logits")
    mask = labels != NO_LANE
    if np.any(labels[mask] < 0) or np.any(labels[mask] >= k):
        raise LabelError(f"direction labels must lie in [0, {k}) or be {NO_LANE}")
    value, grad = _masked_ce(dir_logits, labels, mask)
    return GradPair(value, {"dir_logits": grad})


def depth_focal_loss(depth_logits, targets, gamma: float = 2.0) -> GradPair:
    """Multi-class focal loss -(1 - p_t)^gamma log p_t averaged over supervised cells."""
    logits = np.asarray(depth_logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape:
        raise ShapeError("depth targets do not match logits")
    mask = targets.sum(axis=-1) > 0
    n = int(mask.sum())
    dt = out_dtype(logits)
    if n == 0:
        return GradPair(0.0, {"depth_logits": np.zeros(logits.shape, dtype=dt)})
    logp = log_softmax64(logits)
    p = np.exp(logp)
    t = np.argmax(targets, axis=-1)
    logpt = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    pt = np.exp(logpt)
    q = np.clip(1.0 - pt, 0.0, 1.0)
    per_cell = -(q**gamma) * logpt
    value = float(per_cell[mask].sum() / n)
    # q = 0 implies log p_t = 0, so zeroing dq there only avoids inf * 0
    safe_q = np.where(q > 0, q, 1.0)
    dq = np.where(q > 0, gamma * safe_q ** (gamma - 1.0), 0.0)
    # d/dz_k = [gamma q^(g-1) p_t log p_t - q^g] (1[k=t] - p_k)
    coef = dq * pt * logpt - q**gamma
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, t[..., None], 1.0, axis=-1)
    grad = coef[..., None] * (onehot - p) / n
    grad = np.where(mask[..., None], grad, 0.0)
    return GradPair(value, {"depth_logits": grad.astype(dt)})


def instance_loss(embeddings, instance_labels, w: LossWeights = LossWeights()) -> GradPair:
    """Discriminative variance + distance loss over instance ids (0 = background).

    The distance term averages over ordered pairs of distinct clusters and is
    zero when fewer than two clusters exist.
    """
    emb = np.asarray(embeddings)
    labels = np.asarray(instance_labels).astype(np.int64)
    if labels.shape != emb.shape[:-1]:
        raise ShapeError("instance labels do not match embeddings")
    e = emb.reshape(-1, emb.shape[-1]).astype(np.float64)
    lab = labels.reshape(-1)
    ids = np.unique(lab[lab > 0])
    if ids.size == 0:
        raise LossError("instance loss needs at least one foreground instance")
    C = ids.size
    members = [np.flatnonzero(lab == c) for c in ids]
    means = np.stack([e[sel].mean(axis=0) for sel in members])

    # gradients are accumulated w.r.t. embeddings directly and w.r.t. cluster
    # means; mean gradients are spread evenly over members at the end
    grad = np.zeros_like(e)
    gmeans = np.zeros_like(means)

    l_var = 0.0
    for i, sel in enumerate(members):
        diff = e[sel] - means[i]
        dist = np.sqrt((diff * diff).sum(axis=1))
        hinge = np.maximum(dist - w.delta_v, 0.0)
        n_c = len(sel)
        l_var += float((hinge**2).sum()) / (n_c * C)
        safe = np.where(dist > 0, dist, 1.0)
        gd = w.alpha * (2.0 * hinge / safe / (n_c * C))[:, None] * diff
        grad[sel] += gd
        gmeans[i] -= gd.sum(axis=0)

    l_dist = 0.0
    if C > 1:
        norm = C * (C - 1)
        for a in range(C):
            for b in range(C):
                if a == b:
                    continue
                diff = means[a] - means[b]
                dist = math.sqrt(float(diff @ diff))
                hinge = max(2.0 * w.delta_d - dist, 0.0)
                l_dist += hinge**2 / norm
                if hinge > 0 and dist > 0:
                    gd = -2.0 * w.beta * hinge / dist / norm * diff
                    gmeans[a] += gd
                    gmeans[b] -= gd

    for i, sel in enumerate(members):
        grad[sel] += gmeans[i] / len(sel)
    value = w.alpha * l_var + w.beta * l_dist
    return GradPair(float(value), {"embeddings": grad.reshape(emb.shape).astype(out_dtype(emb))})


def total_loss(parts: dict, w: LossWeights = LossWeights()) -> GradPair:
    """Weighted sum over parts named ``dep``, ``seg``, ``ins`` and ``dir``.

    Each part is a GradPair or a plain number; gradients are scaled by the
    part's weight and summed per key.
    """
    weights = {"dep": w.lambda_dep, "seg": w.lambda_seg, "ins": w.lambda_ins, "dir": w.lambda_dir}
    unknown = set(parts) - set(weights)
    if unknown:
        raise LossError(f"unknown loss parts: {sorted(unknown)}")
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for name, part in parts.items():
        v = part.value if isinstance(part, GradPair) else float(part)
        if not math.isfinite(v):
            raise LossError(f"loss part {name} is not finite")
        lam = weights[name]
        value += lam * v
        if isinstance(part, GradPair):
            for key, g in part.grads.items():
                scaled = (np.asarray(g, dtype=np.float64) * lam).astype(out_dtype(g))
                grads[key] = grads[key] + scaled if key in grads else scaled
    return GradPair(value, grads)
