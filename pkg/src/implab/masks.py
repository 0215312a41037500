"""Binary masks over prunable coordinates, magnitude/random pruning and weight CDFs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from implab.exceptions import DimensionError
from implab.model import Layout, ParamVector


@dataclass
class Mask:
    """Bit per prunable parameter; 1 keeps the weight, 0 prunes it."""

    bits: np.ndarray
    level: int = 0

    def __post_init__(self):
        self.bits = np.ascontiguousarray(self.bits, dtype=bool)
        if self.bits.ndim != 1:
            raise DimensionError("mask bits must be a vector")

    @classmethod
    def ones(cls, layout_or_n, level: int = 0) -> "Mask":
        n = layout_or_n.n_prunable if isinstance(layout_or_n, Layout) else int(layout_or_n)
        return cls(np.ones(n, dtype=bool), level)

    @classmethod
    def from_params(cls, params: ParamVector, level: int = 0) -> "Mask":
        return cls(params.prunable_values != 0, level)

    @property
    def n_surviving(self) -> int:
        return int(self.bits.sum())

    @property
    def density(self) -> float:
        """Surviving fraction of prunable weights."""
        return self.n_surviving / self.bits.size

    @property
    def sparsity(self) -> float:
        return 1.0 - self.density

    def full(self, layout: Layout) -> np.ndarray:
        """0/1 float vector over the whole parameter vector (non-prunable entries are 1)."""
        if layout.n_prunable != self.bits.size:
            raise DimensionError("mask does not fit this layout")
        out = np.ones(layout.size)
        out[layout.prunable_index] = self.bits
        return out

    def support(self, layout: Layout) -> np.ndarray:
        """Indices into the full vector of every free (unpruned) parameter."""
        return np.flatnonzero(self.full(layout))

    def apply(self, params: ParamVector) -> ParamVector:
        return params.replace(params.values * self.full(params.layout))

    def is_nested_in(self, other: "Mask") -> bool:
        return bool(np.all(self.bits <= other.bits))

    def __eq__(self, other):
        return isinstance(other, Mask) and np.array_equal(self.bits, other.bits)

    def __repr__(self):
        return f"Mask(level={self.level}, surviving={self.n_surviving}/{self.bits.size})"


def _candidates(params: ParamVector, mask: Mask, ratio: float) -> tuple[np.ndarray, int]:
    if mask.bits.size != params.layout.n_prunable:
        raise DimensionError("mask does not fit the parameters")
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"pruning ratio must be in [0, 1), got {ratio}")
    surviving = np.flatnonzero(mask.bits)
    k = int(np.floor(ratio * surviving.size))
    if surviving.size - k < 1:
        raise ValueError("pruning would leave no surviving weights")
    return surviving, k


def n_pruned(n_surviving: int, ratio: float) -> int:
    return int(np.floor(ratio * n_surviving))


def magnitude_prune(params: ParamVector, mask: Mask, ratio: float, per_layer: bool = False) -> Mask:
    """Remove ``floor(ratio * surviving)`` smallest-magnitude surviving weights.

    Global across layers by default; ties go to the lowest parameter index.
    """
    surviving, k = _candidates(params, mask, ratio)
    bits = mask.bits.copy()
    mags = np.abs(params.prunable_values)
    if per_layer:
        layout = params.layout
        pos = 0
        for s in layout.slots:
            if not s.prunable:
                continue
            local = surviving[(surviving >= pos) & (surviving < pos + s.size)]
            kl = n_pruned(local.size, ratio)
            order = np.lexsort((local, mags[local]))
            bits[local[order[:kl]]] = False
            pos += s.size
        return Mask(bits, mask.level + 1)
    order = np.lexsort((surviving, mags[surviving]))
    bits[surviving[order[:k]]] = False
    return Mask(bits, mask.level + 1)


def random_prune(params: ParamVector, mask: Mask, ratio: float, seed: int) -> Mask:
    """Remove ``floor(ratio * surviving)`` surviving weights chosen uniformly without replacement."""
    surviving, k = _candidates(params, mask, ratio)
    bits = mask.bits.copy()
    rng = np.random.default_rng(seed)
    bits[rng.choice(surviving, size=k, replace=False)] = False
    return Mask(bits, mask.level + 1)


def project(params: ParamVector, new_mask: Mask) -> tuple[ParamVector, float]:
    """Return ``m * w`` and the projection distance ``||w - m * w||``."""
    projected = new_mask.apply(params)
    return projected, float(np.linalg.norm(params.values - projected.values))


def sparsity_after_levels(ratio, levels: int | None = None) -> float:
    """Surviving fraction after pruning ``ratio`` of the survivors at each level.

    ``ratio`` may also be a sequence of per-level ratios (then ``levels`` is ignored).
    """
    if np.ndim(ratio):
        return float(np.prod([1.0 - f for f in ratio]))
    return float((1.0 - ratio) ** levels)


def surviving_count_after_levels(n: int, ratios) -> int:
    """Exact integer survivor count under floor rounding of each level's pruned count."""
    for f in ratios:
        n -= n_pruned(n, f)
    return n


class WeightCdf:
    """Empirical CDF of ``|w| / mean(|w|)`` over a set of prunable coordinates.

    By default the coordinates are the mask's surviving weights.  Passing an
    older ``support`` (e.g. the previous level's mask) evaluates a projected
    vector over the support it was projected from, so the freshly zeroed
    weights show up as a flat segment at zero.
    """

    def __init__(self, params: ParamVector, mask: Mask | None = None, support: Mask | None = None):
        support = support if support is not None else mask
        vals = params.prunable_values
        if support is not None:
            vals = vals[support.bits]
        if vals.size == 0:
            raise ValueError("weight CDF needs at least one surviving weight")
        mags = np.abs(vals)
        mean = mags.mean()
        if mean == 0:
            raise ValueError("all weights are zero; normalization undefined")
        self.values = np.sort(mags / mean)
        self.mean_magnitude = float(mean)

    def __len__(self):
        return self.values.size

    def __call__(self, x) -> np.ndarray:
        """Fraction of weights with normalized magnitude <= x."""
        return np.searchsorted(self.values, x, side="right") / self.values.size

    def fraction_below(self, x: float) -> float:
        """Fraction with normalized magnitude strictly below ``x``."""
        return float(np.searchsorted(self.values, x, side="left") / self.values.size)

    def quantile(self, p: float) -> float:
        """Smallest normalized magnitude whose CDF reaches ``p``."""
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must be in [0, 1]")
        k = max(int(np.ceil(p * self.values.size)) - 1, 0)
        return float(self.values[k])


def weight_cdf(params: ParamVector, mask: Mask | None = None, support: Mask | None = None) -> WeightCdf:
    return WeightCdf(params, mask, support)
