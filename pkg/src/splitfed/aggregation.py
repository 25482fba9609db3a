"""Global-model averaging: naive, sample-weighted (FedAVG) and loss-aware smart weights."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import Params, SplitModelWeights

STRATEGIES = ("naive", "fedavg", "smart")
DEFAULT_ALPHA = 10.0


class AggregationError(ValueError):
    """Raised for inputs the averaging rules cannot accept (incl. non-finite indicators)."""


@dataclass
class AggregationWeights:
    d: np.ndarray
    q: np.ndarray
    r: np.ndarray


def unreliability_indicator(losses: Sequence[float]) -> float:
    """Mean plus two population standard deviations of the per-sample losses."""
    arr = np.asarray(losses, dtype=np.float64)
    if arr.size == 0:
        raise AggregationError("unreliability_indicator: empty loss list")
    return float(arr.mean() + 2.0 * arr.std())


def quality_scores(b: Sequence[float], alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.size == 0:
        raise AggregationError("quality_scores: no clients")
    if not np.isfinite(b).all():
        raise AggregationError(f"quality_scores: non-finite unreliability indicator in {b.tolist()}")
    z = alpha * (1.0 - b)
    e = np.exp(z - z.max())
    return e / e.sum()


def smart_weights(b: Sequence[float], m: Sequence[int], alpha: float = DEFAULT_ALPHA) -> AggregationWeights:
    m = _check_counts(m)
    if len(m) != len(b):
        raise AggregationError(f"smart_weights: {len(b)} indicators for {len(m)} clients")
    d = m / m.sum()
    q = quality_scores(b, alpha)
    qd = q * d
    return AggregationWeights(d=d, q=q, r=qd / qd.sum())


def _check_counts(m: Sequence[int]) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0 or (m < 1).any():
        raise AggregationError(f"sample counts must all be >= 1, got {m.tolist()}")
    return m


def _check_compatible(snapshots: Sequence[SplitModelWeights]) -> None:
    if not snapshots:
        raise AggregationError("no snapshots to average")
    ref = snapshots[0].parts()
    for k, snap in enumerate(snapshots[1:], start=1):
        for a, b in zip(ref, snap.parts()):
            if list(a) != list(b):
                raise AggregationError(f"snapshot {k} has different parameter names")
            for name in a:
                if a[name].shape != b[name].shape:
                    raise AggregationError(f"snapshot {k}: {name} shape {b[name].shape} != {a[name].shape}")


def _combine(snapshots: Sequence[SplitModelWeights], coeffs: np.ndarray) -> SplitModelWeights:
    def part(idx: int) -> Params:
        out = {}
        for name in snapshots[0].parts()[idx]:
            acc = coeffs[0] * snapshots[0].parts()[idx][name]
            for c, snap in zip(coeffs[1:], snapshots[1:]):
                acc = acc + c * snap.parts()[idx][name]
            out[name] = acc
        return out
    return SplitModelWeights(part(0), part(1), part(2))


def naive_average(snapshots: Sequence[SplitModelWeights]) -> SplitModelWeights:
    _check_compatible(snapshots)
    n = len(snapshots)

    def part(idx: int) -> Params:
        names = snapshots[0].parts()[idx]
        # offset from the first snapshot so identical snapshots average to themselves exactly
        return {k: names[k] + np.sum([s.parts()[idx][k] - names[k] for s in snapshots], axis=0) / n
                for k in names}
    return SplitModelWeights(part(0), part(1), part(2))


def federated_average(snapshots: Sequence[SplitModelWeights], m: Sequence[int]) -> SplitModelWeights:
    _check_compatible(snapshots)
    m = _check_counts(m)
    if len(m) != len(snapshots):
        raise AggregationError(f"{len(m)} sample counts for {len(snapshots)} snapshots")
    total = m.sum()

    def part(idx: int) -> Params:
        names = snapshots[0].parts()[idx]
        return {k: names[k] + np.sum([mi * (s.parts()[idx][k] - names[k]) for mi, s in zip(m, snapshots)],
                                     axis=0) / total
                for k in names}
    return SplitModelWeights(part(0), part(1), part(2))


def weighted_average(snapshots: Sequence[SplitModelWeights], r: Sequence[float]) -> SplitModelWeights:
    _check_compatible(snapshots)
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (len(snapshots),):
        raise AggregationError(f"weight vector of length {r.size} for {len(snapshots)} snapshots")
    if (r < 0).any() or abs(r.sum() - 1.0) > 1e-9:
        raise AggregationError(f"averaging weights must lie on the simplex, got {r.tolist()}")
    return _combine(snapshots, r)


def aggregate(strategy: str, snapshots: Sequence[SplitModelWeights], m: Sequence[int],
              b: Sequence[float], alpha: float = DEFAULT_ALPHA) -> tuple[SplitModelWeights, np.ndarray]:
    """Apply ``strategy``; returns the global model and the effective per-client weights."""
    n = len(snapshots)
    if strategy == "naive":
        return naive_average(snapshots), np.full(n, 1.0 / n)
    if strategy == "fedavg":
        counts = _check_counts(m)
        return federated_average(snapshots, counts), counts / counts.sum()
    if strategy == "smart":
        w = smart_weights(b, m, alpha)
        return weighted_average(snapshots, w.r), w.r
    raise AggregationError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
