"""Binary weight masks for a fixed set of non-overlapping subnetworks.

Subnetwork indices are 0-based throughout. Per-layer quotas follow one rule
everywhere: a layer of ``n`` weights split ``k`` ways gives every subnetwork
``n // k`` weights, and the first ``n % k`` subnetworks one extra.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class MaskError(ValueError):
    pass


class MaskOverlapError(MaskError):
    pass


class QuotaError(MaskError):
    pass


def _shape(s) -> tuple[int, ...]:
    return (int(s),) if np.isscalar(s) else tuple(int(d) for d in s)


class Mask:
    """Per-layer boolean arrays; immutable, with popcounts cached at construction."""

    __slots__ = ("layers", "popcounts")

    def __init__(self, layers: Sequence[np.ndarray]):
        arrs = []
        for layer in layers:
            a = np.array(layer, dtype=bool)
            a.flags.writeable = False
            arrs.append(a)
        self.layers = tuple(arrs)
        self.popcounts = tuple(int(np.count_nonzero(a)) for a in self.layers)

    @classmethod
    def ones(cls, shapes) -> "Mask":
        return cls([np.ones(_shape(s), bool) for s in shapes])

    @classmethod
    def zeros(cls, shapes) -> "Mask":
        return cls([np.zeros(_shape(s), bool) for s in shapes])

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [a.shape for a in self.layers]

    @property
    def sizes(self) -> list[int]:
        return [a.size for a in self.layers]

    @property
    def count(self) -> int:
        return sum(self.popcounts)

    @property
    def size(self) -> int:
        return sum(self.sizes)

    def fraction(self) -> float:
        return self.count / self.size

    def _check(self, other: "Mask") -> None:
        if self.shapes != other.shapes:
            raise MaskError(f"mask layouts differ: {self.shapes} vs {other.shapes}")

    def __and__(self, other: "Mask") -> "Mask":
        self._check(other)
        return Mask([a & b for a, b in zip(self.layers, other.layers)])

    def __or__(self, other: "Mask") -> "Mask":
        self._check(other)
        return Mask([a | b for a, b in zip(self.layers, other.layers)])

    def __invert__(self) -> "Mask":
        return Mask([~a for a in self.layers])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Mask):
            return NotImplemented
        return self.shapes == other.shapes and all(np.array_equal(a, b) for a, b in zip(self.layers, other.layers))

    def __hash__(self):
        return hash(tuple(a.tobytes() for a in self.layers))

    def any(self) -> bool:
        return self.count > 0

    def __repr__(self) -> str:
        return f"Mask(popcounts={self.popcounts}, sizes={self.sizes})"


def layer_quota(n: int, k: int, i: int) -> int:
    """Number of weights subnetwork ``i`` gets from a layer of ``n`` weights."""
    return n // k + (1 if i < n % k else 0)


def quotas(sizes: Sequence[int], k: int, i: int) -> list[int]:
    return [layer_quota(int(n), k, i) for n in sizes]


@dataclass(frozen=True)
class MaskSet:
    """``k`` subnetwork masks (``None`` until claimed) and their union."""

    k: int
    shapes: tuple[tuple[int, ...], ...]
    masks: tuple[Mask | None, ...]
    claimed: Mask

    @classmethod
    def empty(cls, shapes, k: int) -> "MaskSet":
        if k < 1:
            raise ValueError(f"k must be >= 1, got {k}")
        shapes = tuple(_shape(s) for s in shapes)
        return cls(k, shapes, (None,) * k, Mask.zeros(shapes))

    @property
    def sizes(self) -> list[int]:
        return [int(np.prod(s)) for s in self.shapes]

    @property
    def finalized(self) -> list[int]:
        return [i for i, m in enumerate(self.masks) if m is not None]

    def quotas(self, i: int) -> list[int]:
        return quotas(self.sizes, self.k, i)


def random_orthogonal_partition(layer_sizes, k: int, seed: int) -> MaskSet:
    """Shuffle each layer's weights and deal them round-robin into ``k`` masks.

    ``layer_sizes`` holds ints or weight shapes. Dealing in order hands any
    remainder to the lowest mask indices.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    shapes = tuple(_shape(s) for s in layer_sizes)
    rng = np.random.default_rng(seed)
    per_mask = [[] for _ in range(k)]
    for shape in shapes:
        n = int(np.prod(shape))
        owner = np.empty(n, dtype=np.int64)
        owner[rng.permutation(n)] = np.arange(n) % k
        owner = owner.reshape(shape)
        for i in range(k):
            per_mask[i].append(owner == i)
    masks = tuple(Mask(layers) for layers in per_mask)
    claimed = masks[0]
    for m in masks[1:]:
        claimed = claimed | m
    return MaskSet(k, shapes, masks, claimed)


def availability(maskset: MaskSet, i: int) -> Mask:
    """Weights subnetwork ``i`` may use: everything not in masks ``0..i-1``."""
    if not 0 <= i < maskset.k:
        raise IndexError(f"subnetwork index {i} out of range for k={maskset.k}")
    used = Mask.zeros(maskset.shapes)
    for j in range(i):
        m = maskset.masks[j]
        if m is None:
            raise MaskError(f"mask {j} is not finalized")
        used = used | m
    return ~used


def claim(maskset: MaskSet, i: int, mask: Mask) -> MaskSet:
    """Return a new MaskSet with ``mask`` stored as subnetwork ``i``'s mask."""
    if not 0 <= i < maskset.k:
        raise IndexError(f"subnetwork index {i} out of range for k={maskset.k}")
    if tuple(mask.shapes) != maskset.shapes:
        raise MaskError(f"mask layout {mask.shapes} does not match {list(maskset.shapes)}")
    if maskset.masks[i] is not None:
        raise MaskError(f"mask {i} already claimed")
    overlap = mask & maskset.claimed
    if overlap.any():
        layer = next(li for li, c in enumerate(overlap.popcounts) if c)
        index = int(np.flatnonzero(overlap.layers[layer])[0])
        raise MaskOverlapError(f"mask {i} overlaps claimed weights at layer {layer}, index {index}")
    want = maskset.quotas(i)
    if list(mask.popcounts) != want:
        raise QuotaError(f"mask {i} per-layer counts {list(mask.popcounts)} != quotas {want}")
    masks = list(maskset.masks)
    masks[i] = mask
    return MaskSet(maskset.k, maskset.shapes, tuple(masks), maskset.claimed | mask)


@dataclass
class ConstraintReport:
    orthogonal: bool
    first_overlap: tuple[int, int, int, int] | None  # (mask i, mask j, layer, flat index)
    sparsity: dict[int, float]  # n / popcount per finalized mask
    target_sparsity: int
    quota_deviation: dict[int, list[int]]  # popcount - quota, per layer
    coverage: float  # fraction of maskable weights that are claimed
    claimed_consistent: bool
    messages: list[str] = field(default_factory=list)

    @property
    def max_quota_deviation(self) -> int:
        return max((abs(d) for devs in self.quota_deviation.values() for d in devs), default=0)

    @property
    def ok(self) -> bool:
        return self.orthogonal and self.claimed_consistent and self.max_quota_deviation <= 1

    def lines(self) -> list[str]:
        out = [f"orthogonality: {'pass' if self.orthogonal else 'fail'}"]
        if self.first_overlap is not None:
            i, j, layer, idx = self.first_overlap
            out.append(f"first_overlap: masks {i},{j} layer {layer} index {idx}")
        out.append(f"quota: {'pass' if self.max_quota_deviation <= 1 else 'fail'} (max deviation {self.max_quota_deviation})")
        out.append(f"claimed_union: {'pass' if self.claimed_consistent else 'fail'}")
        out.append(f"coverage: {self.coverage:.6f}")
        for i, s in sorted(self.sparsity.items()):
            out.append(f"mask {i}: n/popcount = {s:.4f} (target {self.target_sparsity})")
        return out + self.messages


def verify(maskset: MaskSet) -> ConstraintReport:
    """Check pairwise disjointness, quotas and the claimed union. Never raises."""
    fin = maskset.finalized
    first = None
    for a, i in enumerate(fin):
        if first is not None:
            break
        for j in fin[a + 1 :]:
            both = maskset.masks[i] & maskset.masks[j]
            if both.any():
                layer = next(li for li, c in enumerate(both.popcounts) if c)
                first = (i, j, layer, int(np.flatnonzero(both.layers[layer])[0]))
                break
    total = sum(maskset.sizes)
    sparsity = {}
    deviation = {}
    union = Mask.zeros(maskset.shapes)
    messages = []
    for i in fin:
        m = maskset.masks[i]
        union = union | m
        sparsity[i] = total / m.count if m.count else float("inf")
        deviation[i] = [c - q for c, q in zip(m.popcounts, maskset.quotas(i))]
    consistent = union == maskset.claimed
    if not consistent:
        messages.append("claimed mask differs from the union of finalized masks")
    return ConstraintReport(
        orthogonal=first is None,
        first_overlap=first,
        sparsity=sparsity,
        target_sparsity=maskset.k,
        quota_deviation=deviation,
        coverage=maskset.claimed.count / total if total else 1.0,
        claimed_consistent=consistent,
        messages=messages,
    )


def masks_from_arrays(arrays: Sequence[Sequence[np.ndarray]], k: int | None = None) -> MaskSet:
    """Build a MaskSet from raw per-mask layer arrays (e.g. ``[[1,0]], [[0,1]]``).

    No constraint is enforced here; run ``verify`` on the result.
    """
    masks = tuple(Mask(layers) for layers in arrays)
    k = len(masks) if k is None else k
    shapes = tuple(masks[0].shapes)
    claimed = Mask.zeros(shapes)
    for m in masks:
        claimed = claimed | m
    return MaskSet(k, shapes, masks + (None,) * (k - len(masks)), claimed)
