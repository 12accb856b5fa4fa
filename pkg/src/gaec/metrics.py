"""Evaluation measures: TC error rate, IoU, relative l2, false-negative and ROI ratios."""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NoEventsError
from .grid import Field

Point = tuple[int, float, float]


class EmptyMaskWarning(UserWarning):
    """IoU of two empty masks was reported as 1.0."""


@dataclass
class DetectionSet:
    """Detections from an external tracker: TC points ``(frame, u, v)`` and an AR mask."""

    tc: list[Point] = field(default_factory=list)
    ar: np.ndarray | None = None


@dataclass(frozen=True)
class TCMatch:
    n_total: int
    n_error: int
    n_spurious: int

    @property
    def rate(self) -> float:
        if self.n_total == 0:
            raise NoEventsError("no ground-truth cyclones: TC error rate is undefined")
        return 100.0 * self.n_error / self.n_total


def _points(obj) -> list[Point]:
    return list(obj.tc) if isinstance(obj, DetectionSet) else list(obj)


def match_tc(truth, test, match_radius: float = 2.0) -> TCMatch:
    """Greedy nearest-first one-to-one matching within each frame.

    Truth points left without a test point inside ``match_radius`` count as errors;
    unmatched test points are reported separately as spurious.
    """
    if match_radius < 0:
        raise ValueError("match_radius must be >= 0")
    truth_pts = _points(truth)
    test_pts = _points(test)
    frames = {p[0] for p in truth_pts} | {p[0] for p in test_pts}
    matched = 0
    for f in sorted(frames):
        a = [(u, v) for fr, u, v in truth_pts if fr == f]
        b = [(u, v) for fr, u, v in test_pts if fr == f]
        pairs = []
        for i, (u0, v0) in enumerate(a):
            for j, (u1, v1) in enumerate(b):
                dist = math.hypot(u0 - u1, v0 - v1)
                if dist <= match_radius:
                    pairs.append((dist, i, j))
        pairs.sort()
        used_a, used_b = set(), set()
        for _, i, j in pairs:
            if i not in used_a and j not in used_b:
                used_a.add(i)
                used_b.add(j)
        matched += len(used_a)
    return TCMatch(len(truth_pts), len(truth_pts) - matched, len(test_pts) - matched)


def tc_error_rate(truth, test, match_radius: float = 2.0) -> float:
    """Percentage of ground-truth cyclones not reproduced within ``match_radius`` cells."""
    return match_tc(truth, test, match_radius).rate


def iou(truth: np.ndarray, test: np.ndarray) -> float:
    """TP / (TP + FP + FN) over cells; two empty masks give 1.0 with a warning."""
    a = np.asarray(truth, dtype=bool)
    b = np.asarray(test, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        warnings.warn("both masks are empty; IoU reported as 1.0", EmptyMaskWarning, stacklevel=2)
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def relative_l2(x: Field | np.ndarray, x_hat: Field | np.ndarray) -> float:
    """||x - x_hat|| / ||x|| over cells that are valid in ``x``."""
    if isinstance(x, Field):
        valid = x.valid_mask
        xa = x.data
    else:
        xa = np.asarray(x)
        valid = np.ones(xa.shape, dtype=bool)
    xb = x_hat.data if isinstance(x_hat, Field) else np.asarray(x_hat)
    if xa.shape != xb.shape:
        raise ValueError(f"shape mismatch: {xa.shape} vs {xb.shape}")
    a = xa[valid].astype(np.float64)
    b = xb[valid].astype(np.float64)
    norm = float(np.linalg.norm(a))
    if norm == 0:
        raise ValueError("reference field has zero norm; relative l2 is undefined")
    return float(np.linalg.norm(a - b)) / norm


def fn_ratio(truth_events, predicted_mask: np.ndarray) -> float:
    """Share of genuine events the predicted ROI mask misses.

    ``truth_events`` is either a list of ``(frame, u, v)`` points (fraction of points
    whose nearest cell lies outside the mask) or a boolean mask (FN cells / truth cells).
    """
    mask = np.asarray(predicted_mask, dtype=bool)
    if isinstance(truth_events, DetectionSet):
        truth_events = truth_events.tc
    if isinstance(truth_events, np.ndarray) and truth_events.dtype == bool:
        truth = truth_events
        if truth.shape != mask.shape:
            raise ValueError("mask shapes differ")
        n = int(truth.sum())
        if n == 0:
            raise NoEventsError("ground-truth mask is empty")
        return int((truth & ~mask).sum()) / n
    pts = list(truth_events)
    if not pts:
        raise NoEventsError("no ground-truth points")
    t, h, w = mask.shape
    missed = 0
    for f, u, v in pts:
        i, j = int(round(u)), int(round(v))
        if not (0 <= f < t and 0 <= i < h and 0 <= j < w):
            raise ValueError(f"point ({f}, {u}, {v}) outside the mask lattice")
        missed += not mask[f, i, j]
    return missed / len(pts)


def composed_bound(taus: Sequence[float], x: Field | np.ndarray) -> float:
    """sqrt(sum tau_p^2) / ||x||: the relative l2 ceiling implied by per-patch bounds."""
    xa = x.data[x.valid_mask] if isinstance(x, Field) else np.asarray(x)
    return math.sqrt(float(np.sum(np.square(taus)))) / float(np.linalg.norm(xa.astype(np.float64)))


def metrics_csv(rows: Sequence[tuple[str, object]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "value"])
    for name, value in rows:
        writer.writerow([name, "" if value is None else value])
    return buf.getvalue()


def metrics_table(rows: Sequence[tuple[str, object]]) -> str:
    width = max((len(n) for n, _ in rows), default=6)
    lines = [f"{'metric':<{width}}  value", f"{'-' * width}  -----"]
    for name, value in rows:
        shown = "no events" if value is None else (f"{value:.6g}" if isinstance(value, float) else str(value))
        lines.append(f"{name:<{width}}  {shown}")
    return "\n".join(lines)
