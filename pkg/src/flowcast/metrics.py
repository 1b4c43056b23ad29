"""Best-of-K accuracy and within-set diversity metrics.

Accuracy metrics compare a set of K predicted trajectories with J reference
futures (minADE, minFDE); diversity metrics look only at the predicted set
(min/mean ASD over whole trajectories, min/mean FSD over endpoints).

Distances are either squared Euclidean (``"squared"``, the default) or plain
Euclidean (``"euclidean"``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

DISTANCE_MODES = ("squared", "euclidean")
METRIC_NAMES = ("minADE", "minFDE", "minASD", "minFSD", "meanASD", "meanFSD")


def _check_mode(mode: str) -> None:
    if mode not in DISTANCE_MODES:
        raise ValueError(f"unknown distance mode {mode!r}")


def _as_set(x, name: str) -> np.ndarray:
    arr = np.asarray(getattr(x, "trajectories", x), dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[-1] != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValueError(f"{name} must be a non-empty (N, T, 2) array, got shape {arr.shape}")
    return arr


def pointwise(a: np.ndarray, b: np.ndarray, mode: str = "squared") -> np.ndarray:
    """Distance between matching points along the last axis."""
    _check_mode(mode)
    sq = ((a - b) ** 2).sum(-1)
    return sq if mode == "squared" else np.sqrt(sq)


def _cross(preds, gts, mode):
    P, G = _as_set(preds, "preds"), _as_set(gts, "gts")
    if P.shape[1] != G.shape[1]:
        raise ValueError("predictions and references differ in length")
    return pointwise(P[:, None], G[None], mode)          # (K, J, T)


def min_ade(preds, gts, mode: str = "squared") -> float:
    d = _cross(preds, gts, mode).mean(-1)                  # (K, J)
    return float(d.min(0).mean())


def min_fde(preds, gts, mode: str = "squared") -> float:
    d = _cross(preds, gts, mode)[..., -1]
    return float(d.min(0).mean())


def self_distance(preds, agg: str = "min", scope: str = "average", mode: str = "squared") -> float:
    """Pairwise distance within a set, aggregated over unordered pairs.

    ``scope`` is ``"average"`` (mean over time steps) or ``"final"`` (last
    step only); ``agg`` is ``"min"`` or ``"mean"``.
    """
    P = _as_set(preds, "preds")
    K = len(P)
    if K < 2:
        raise ValueError("self-distance needs at least two predictions")
    if agg not in ("min", "mean"):
        raise ValueError(f"unknown aggregation {agg!r}")
    if scope not in ("average", "final"):
        raise ValueError(f"unknown scope {scope!r}")
    I, J = np.triu_indices(K, k=1)
    d = pointwise(P[I], P[J], mode)                        # (pairs, T)
    d = d.mean(-1) if scope == "average" else d[:, -1]
    return float(d.min() if agg == "min" else d.mean())


def set_metrics(preds, gts, mode: str = "squared") -> dict[str, float]:
    out = {"minADE": min_ade(preds, gts, mode), "minFDE": min_fde(preds, gts, mode)}
    if len(_as_set(preds, "preds")) >= 2:
        for agg in ("min", "mean"):
            out[f"{agg}ASD"] = self_distance(preds, agg, "average", mode)
            out[f"{agg}FSD"] = self_distance(preds, agg, "final", mode)
    return out


@dataclass
class MetricsReport:
    """Per-metric mean and population std across seeds."""

    mean: dict[str, float]
    std: dict[str, float]
    K: int
    J: int
    mode: str
    n_instances: int
    seeds: list[int]
    per_seed: list[dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def rows(self) -> list[dict]:
        return [{"metric": m, "K": self.K, "mean": self.mean[m], "std": self.std[m]} for m in self.mean]


Predictor = Callable[[np.ndarray, int, int], np.ndarray]


def evaluate(predictor: Predictor, instances: Sequence, K: int, seeds: Sequence[int],
             mode: str = "squared") -> MetricsReport:
    """Average every metric over instances for each seed, then summarise across seeds.

    ``predictor(history, K, seed)`` must return a (K, T, 2) array (or a
    prediction set with a ``trajectories`` attribute) for one observation.
    """
    _check_mode(mode)
    if not instances:
        raise ValueError("no evaluation instances")
    if not seeds:
        raise ValueError("at least one seed is required")
    per_seed = []
    for seed in seeds:
        rows = []
        for i, inst in enumerate(instances):
            pred = _as_set(predictor(inst.history, K, seed), "prediction")
            if len(pred) != K:
                raise ValueError(f"predictor returned {len(pred)} trajectories, expected {K}")
            rows.append(set_metrics(pred, inst.futures, mode))
        per_seed.append({m: float(np.mean([r[m] for r in rows])) for m in rows[0]})
    names = list(per_seed[0])
    mean = {m: float(np.mean([s[m] for s in per_seed])) for m in names}
    std = {m: float(np.std([s[m] for s in per_seed])) for m in names}
    J = len(instances[0].futures)
    return MetricsReport(mean, std, K, J, mode, len(instances), list(seeds), per_seed)
