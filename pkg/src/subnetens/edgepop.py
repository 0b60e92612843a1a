"""Edge-pop mask search on a pretrained store.

Each maskable weight gets a popup score, initialised to the weight divided by
its layer's largest magnitude. A forward pass uses the per-layer top-quota
weights by ``|score|``; scores follow straight-through gradients while the
weights themselves never change.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .masks import Mask, QuotaError
from .nn import NonFiniteError, WeightStore, _im2col, backward, conv2d_weight_grad, forward


@dataclass
class PruneConfig:
    quotas: list[int]
    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    seed: int = 0


def init_scores(store: WeightStore) -> list[np.ndarray]:
    """Scores ``W / max|W|`` per maskable layer; an all-zero layer gets zero scores."""
    scores = []
    for name in store.maskable:
        w = store.params[name]
        peak = np.abs(w).max() if w.size else 0
        scores.append(w / peak if peak > 0 else np.zeros_like(w))
    return scores


def _top_quota(score: np.ndarray, avail: np.ndarray, quota: int) -> np.ndarray:
    mag = np.abs(score).ravel()
    if np.isnan(mag).any():
        raise NonFiniteError("NaN popup score")
    cand = np.flatnonzero(avail.ravel())
    if quota > cand.size:
        raise QuotaError(f"quota {quota} exceeds {cand.size} available weights")
    out = np.zeros(mag.size, bool)
    if quota == cand.size:
        out[cand] = True
    elif quota > 0:
        vals = mag[cand]
        thr = np.partition(vals, cand.size - quota)[cand.size - quota]
        out[cand[vals > thr]] = True
        need = quota - int(np.count_nonzero(vals > thr))
        # cand is ascending, so ties resolve to lower flat indices
        out[cand[vals == thr][:need]] = True
    return out.reshape(score.shape)


def select_mask(scores: Sequence[np.ndarray], avail: Mask, quotas: Sequence[int]) -> Mask:
    """Per layer, keep the ``quota`` available weights with the largest ``|score|``."""
    if len(scores) != len(avail.layers) or len(quotas) != len(scores):
        raise ValueError("scores, availability and quotas must cover the same layers")
    return Mask([_top_quota(np.asarray(s), a, int(q)) for s, a, q in zip(scores, avail.layers, quotas)])


def ste_score_grads(upstream, weights, inputs, *, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Straight-through score gradient for one layer.

    Dense: ``grad[j, i] = sum_batch upstream[:, j] * weights[j, i] * inputs[:, i]``
    with ``weights`` shaped (out, in). For a 4-D conv weight the same product
    is summed over output positions as well.
    """
    upstream = np.atleast_2d(np.asarray(upstream))
    weights = np.asarray(weights)
    if weights.ndim == 2:
        inputs = np.atleast_2d(np.asarray(inputs))
        if upstream.shape[1] != weights.shape[0] or inputs.shape[1] != weights.shape[1]:
            raise ValueError(
                f"shape mismatch: upstream {upstream.shape}, weights {weights.shape}, inputs {inputs.shape}"
            )
        if upstream.shape[0] != inputs.shape[0]:
            raise ValueError("upstream and inputs batch sizes differ")
        return weights * (upstream.T @ inputs)
    if weights.ndim == 4:
        inputs = np.asarray(inputs)
        if inputs.ndim != 4 or inputs.shape[1] != weights.shape[1] or upstream.shape[1] != weights.shape[0]:
            raise ValueError(
                f"shape mismatch: upstream {upstream.shape}, weights {weights.shape}, inputs {inputs.shape}"
            )
        cols = _im2col(inputs, weights.shape[2], stride, padding)
        if cols.shape[1:3] != upstream.shape[2:]:
            raise ValueError("upstream spatial size does not match the convolution output")
        return weights * conv2d_weight_grad(upstream, cols, weights.shape)
    raise ValueError(f"unsupported weight rank {weights.ndim}")


def optimize_mask(
    store: WeightStore,
    avail: Mask,
    cfg: PruneConfig,
    data,
    variant: int = 0,
    callback: Callable[[int, Mask], None] | None = None,
) -> Mask:
    """Run ``cfg.epochs`` of score SGD with the store's weights held fixed.

    ``data`` is ``(x, y)``. Batchnorm normalises with batch statistics but its
    running buffers are not touched. Scores of unavailable weights never move
    and are never selected. ``callback(step, mask)`` sees every intermediate
    selection.
    """
    x, y = data
    scores = init_scores(store)
    if cfg.epochs <= 0:
        return select_mask(scores, avail, cfg.quotas)
    velocity = [np.zeros_like(s) for s in scores]
    rng = np.random.default_rng(cfg.seed)
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            mask = select_mask(scores, avail, cfg.quotas)
            if callback is not None:
                callback(step, mask)
            _, cache = forward(store, x[idx], mask, variant, "train", update_stats=False)
            rec = backward(cache, y[idx])
            if not np.isfinite(rec.loss):
                raise NonFiniteError(f"non-finite loss during mask optimisation at step {step}")
            for j, name in enumerate(store.maskable):
                g = rec.effective[name] * store.params[name]
                g *= avail.layers[j]
                velocity[j] *= cfg.momentum
                velocity[j] += g
                scores[j] -= cfg.lr * velocity[j]
            step += 1
    return select_mask(scores, avail, cfg.quotas)
