"""Numerical evaluation: Fréchet Distance, segmentation metrics, driving scores.

Feature statistics accumulate in one pass (Welford's recurrence extended to
the outer-product matrix) and merge pairwise, so evaluation parallelizes as
map-then-merge.  All linear algebra runs in 64-bit floats regardless of how
features were stored.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .embeddings import EmbeddingStore, as_vector
from .errors import (
    AllClassesEmpty,
    ClassOutOfRange,
    DimensionMismatch,
    EigenFailure,
    EmptyInput,
    NotSymmetric,
    NumericalFailure,
    ParseError,
    SchemaError,
    ShapeMismatch,
    StatsError,
    UnknownEventKind,
)
from .manifest import Subgroup, SubgroupTaxonomy

# multiplicative penalty per infraction, CARLA-leaderboard style; the table
# is configurable because no canonical set of factors exists
DEFAULT_PENALTIES: dict[str, float] = {
    "collision_pedestrian": 0.50,
    "collision_vehicle": 0.60,
    "collision_static": 0.65,
    "red_light": 0.70,
    "stop_sign": 0.80,
}


class FeatureStats:
    """Streaming mean and unbiased covariance of fixed-dimension vectors."""

    def __init__(self, dimension: int):
        if dimension < 1:
            raise DimensionMismatch("dimension must be >= 1")
        self.dimension = int(dimension)
        self.n = 0
        self.mean = np.zeros(dimension, dtype=np.float64)
        self._m2 = np.zeros((dimension, dimension), dtype=np.float64)

    def update(self, v) -> None:
        v = as_vector(v, self.dimension)
        self.n += 1
        delta = v - self.mean
        self.mean += delta / self.n
        self._m2 += np.outer(delta, v - self.mean)

    def merge(self, other: "FeatureStats") -> "FeatureStats":
        """Combine two accumulators as if their inputs had been concatenated."""
        if other.dimension != self.dimension:
            raise DimensionMismatch(
                f"cannot merge dimensions {self.dimension} and {other.dimension}"
            )
        out = FeatureStats(self.dimension)
        out.n = self.n + other.n
        if out.n == 0:
            return out
        delta = other.mean - self.mean
        out.mean = self.mean + delta * (other.n / out.n)
        out._m2 = (
            self._m2
            + other._m2
            + np.outer(delta, delta) * (self.n * other.n / out.n)
        )
        return out

    def covariance(self) -> np.ndarray:
        """Unbiased covariance (divisor n-1), symmetrized against fp drift."""
        if self.n < 2:
            raise StatsError(f"covariance needs n >= 2, have n = {self.n}")
        c = self._m2 / (self.n - 1)
        c = (c + c.T) / 2
        if not np.isfinite(c).all():
            raise NumericalFailure("covariance has non-finite entries")
        return c

    @classmethod
    def from_rows(cls, rows) -> "FeatureStats":
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] == 0:
            raise EmptyInput(f"expected a non-empty 2-D array, got shape {rows.shape}")
        stats = cls(rows.shape[1])
        for row in rows:
            stats.update(row)
        return stats

    @classmethod
    def from_store(cls, store: EmbeddingStore, indices: Optional[Sequence[int]] = None) -> "FeatureStats":
        stats = cls(store.dimension)
        rng = range(store.count) if indices is None else indices
        for i in rng:
            stats.update(store.get_row(i))
        return stats


def accumulate_stats(s: FeatureStats, v) -> FeatureStats:
    """Pure update: returns a new accumulator including ``v``."""
    out = FeatureStats(s.dimension)
    out.n = s.n
    out.mean = s.mean.copy()
    out._m2 = s._m2.copy()
    out.update(v)
    return out


def matrix_sqrt_psd(a, sym_tol: float = 1e-8) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues below zero (numerical noise on a PSD input) are clamped to
    zero before the square root.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NotSymmetric(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    if np.abs(a - a.T).max() > sym_tol * scale:
        raise NotSymmetric("matrix is not symmetric within tolerance")
    sym = (a + a.T) / 2
    try:
        w, v = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as e:
        raise EigenFailure(f"eigendecomposition failed: {e}") from e
    w = np.clip(w, 0.0, None)
    root = (v * np.sqrt(w)) @ v.T
    return (root + root.T) / 2


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """Gaussian-Wasserstein-2 distance between two feature distributions.

    FD = ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 sqrt(S_a S_b)), with the cross
    term computed as sqrt(sqrt(S_a) S_b sqrt(S_a)): same trace, but the inner
    matrix is symmetric PSD so the stable eigh-based root applies.
    """
    if a.dimension != b.dimension:
        raise DimensionMismatch(
            f"stats dimensions differ: {a.dimension} vs {b.dimension}"
        )
    ca = a.covariance()
    cb = b.covariance()
    root_a = matrix_sqrt_psd(ca)
    inner = root_a @ cb @ root_a
    cross = matrix_sqrt_psd((inner + inner.T) / 2)
    dmu = a.mean - b.mean
    fd = float(dmu @ dmu + np.trace(ca) + np.trace(cb) - 2.0 * np.trace(cross))
    if not math.isfinite(fd):
        raise NumericalFailure("Frechet distance is not finite")
    return max(fd, 0.0)


class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        if num_classes < 1:
            raise ClassOutOfRange("need at least one class")
        self.num_classes = int(num_classes)
        if counts is None:
            self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (num_classes, num_classes):
                raise ShapeMismatch(
                    f"counts shape {counts.shape} != ({num_classes}, {num_classes})"
                )
            if (counts < 0).any():
                raise ClassOutOfRange("counts must be non-negative")
            self.counts = counts

    def update(self, gt, pred, ignore_label: Optional[int] = None) -> None:
        """Accumulate one mask pair; pixels equal to ignore_label on either
        grid are skipped."""
        gt = np.asarray(gt)
        pred = np.asarray(pred)
        if gt.shape != pred.shape:
            raise ShapeMismatch(f"gt shape {gt.shape} != pred shape {pred.shape}")
        g = gt.reshape(-1).astype(np.int64)
        p = pred.reshape(-1).astype(np.int64)
        if ignore_label is not None:
            keep = (g != ignore_label) & (p != ignore_label)
            g, p = g[keep], p[keep]
        if g.size == 0:
            return
        k = self.num_classes
        if g.min() < 0 or g.max() >= k:
            raise ClassOutOfRange(f"ground-truth id outside [0, {k})")
        if p.min() < 0 or p.max() >= k:
            raise ClassOutOfRange(f"prediction id outside [0, {k})")
        self.counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeMismatch("cannot merge confusion matrices of different K")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def update_confusion(
    cm: ConfusionMatrix, gt, pred, ignore_label: Optional[int] = None
) -> ConfusionMatrix:
    """Pure form of ConfusionMatrix.update: returns a new matrix."""
    out = ConfusionMatrix(cm.num_classes, cm.counts.copy())
    out.update(gt, pred, ignore_label)
    return out


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where the union is empty (class absent everywhere)."""
    d = np.diag(cm.counts).astype(np.float64)
    row = cm.counts.sum(axis=1).astype(np.float64)
    col = cm.counts.sum(axis=0).astype(np.float64)
    union = row + col - d
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, d / union, np.nan)


def per_class_f1(cm: ConfusionMatrix) -> np.ndarray:
    d = np.diag(cm.counts).astype(np.float64)
    row = cm.counts.sum(axis=1).astype(np.float64)
    col = cm.counts.sum(axis=0).astype(np.float64)
    denom = row + col
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, 2.0 * d / denom, np.nan)


def _mean_excluding_nan(values: np.ndarray, include_empty_as_nan: bool) -> float:
    if include_empty_as_nan:
        return float(values.mean())
    finite = values[~np.isnan(values)]
    if finite.size == 0:
        raise AllClassesEmpty("every class has an empty union")
    return float(finite.mean())


def miou(cm: ConfusionMatrix, include_empty_as_nan: bool = False) -> float:
    """Mean IoU over classes; empty-union classes are excluded by default."""
    return _mean_excluding_nan(per_class_iou(cm), include_empty_as_nan)


def mf1(cm: ConfusionMatrix, include_empty_as_nan: bool = False) -> float:
    return _mean_excluding_nan(per_class_f1(cm), include_empty_as_nan)


InfractionEvent = Union[str, Mapping[str, object]]


def infraction_score(
    events: Iterable[InfractionEvent],
    penalties: Optional[Mapping[str, float]] = None,
) -> float:
    """Product of penalty factors over all infractions, starting from 1.

    Events are either bare kind strings or {"kind": str, "count": int}
    entries; a count of c multiplies the kind's factor in c times.  Counts
    are tallied per kind first and the factors applied in sorted kind order,
    so the result is a function of the event multiset alone; a naive running
    product would pick up order-dependent rounding.
    """
    table = DEFAULT_PENALTIES if penalties is None else dict(penalties)
    totals: dict[str, int] = {}
    for event in events:
        if isinstance(event, str):
            kind, count = event, 1
        else:
            kind = event.get("kind")
            count = int(event.get("count", 1))
        if kind not in table:
            raise UnknownEventKind(str(kind))
        if count < 0:
            raise SchemaError("count", "event count must be >= 0")
        totals[kind] = totals.get(kind, 0) + count
    score = 1.0
    for kind in sorted(totals):
        score *= table[kind] ** totals[kind]
    return score


@dataclass(frozen=True)
class RouteResult:
    """One evaluated route: completion fraction, infraction score, and their
    product as the driving score."""

    route_id: str
    subgroup: Optional[Subgroup]
    rc: float
    infraction: float

    def __post_init__(self):
        if not 0.0 <= self.rc <= 1.0:
            raise SchemaError("rc", f"route completion {self.rc} outside [0, 1]")
        if not 0.0 <= self.infraction <= 1.0:
            raise SchemaError("is", f"infraction score {self.infraction} outside [0, 1]")

    @property
    def ds(self) -> float:
        return self.rc * self.infraction


@dataclass(frozen=True)
class DrivingSummary:
    rc_mean: float
    is_mean: float
    ds_mean: float
    route_count: int
    per_subgroup: Mapping[str, "DrivingSummary"] = field(default_factory=dict)

    def rendered(self) -> str:
        """Table convention: RC and DS scaled by 100, IS raw."""
        return (
            f"{self.rc_mean * 100:.2f} / {self.is_mean:.3f} / {self.ds_mean * 100:.2f}"
        )


def aggregate_driving(routes: Sequence[RouteResult]) -> DrivingSummary:
    """Arithmetic means of per-route RC, IS, and DS = RC x IS.

    DS is averaged per route, not recomputed from the aggregate means; the
    mean of products is the quantity reported, and it differs from the
    product of means.
    """
    if not routes:
        raise EmptyInput("no routes to aggregate")

    def summarize(group: Sequence[RouteResult], nested: bool) -> DrivingSummary:
        rc = sum(r.rc for r in group) / len(group)
        is_ = sum(r.infraction for r in group) / len(group)
        ds = sum(r.ds for r in group) / len(group)
        per = {}
        if nested:
            phrases: dict[str, list[RouteResult]] = {}
            for r in group:
                if r.subgroup is not None:
                    phrases.setdefault(r.subgroup.phrase, []).append(r)
            per = {
                phrase: summarize(rs, nested=False)
                for phrase, rs in sorted(phrases.items())
            }
        return DrivingSummary(rc, is_, ds, len(group), per)

    return summarize(routes, nested=True)


def load_route_log(
    path,
    taxonomy: SubgroupTaxonomy,
    penalties: Optional[Mapping[str, float]] = None,
) -> list[RouteResult]:
    """Parse a route log: JSON lines with route_id, subgroup indices, rc,
    and an infraction event list."""
    routes = []
    text = Path(path).read_text("utf-8")
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(i, str(e)) from e
        if not isinstance(obj, dict):
            raise ParseError(i, "route line must be a JSON object")
        route_id = obj.get("route_id")
        if not isinstance(route_id, str):
            raise SchemaError("route_id", f"missing on line {i}")
        rc = obj.get("rc")
        if not isinstance(rc, (int, float)) or isinstance(rc, bool):
            raise SchemaError("rc", f"missing on line {i}")
        coords = obj.get("subgroup")
        subgroup = taxonomy.subgroup(coords) if coords is not None else None
        events = obj.get("events", [])
        if not isinstance(events, list):
            raise SchemaError("events", "must be an array")
        routes.append(
            RouteResult(
                route_id=route_id,
                subgroup=subgroup,
                rc=float(rc),
                infraction=infraction_score(events, penalties),
            )
        )
    return routes
