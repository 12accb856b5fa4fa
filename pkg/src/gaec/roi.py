"""ROI maps: Gaussian heatmaps, thresholding, patch classes and per-patch bounds."""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .grid import PartitionSpec, _check_lattice, header_path, parse_shape, read_header, write_header


class PatchClass(enum.IntEnum):
    ROI = 0
    BUFFER = 1
    NON_ROI = 2


@dataclass(frozen=True)
class HeatmapParams:
    amplitude: float = 1.0
    sigma: float = 3.0

    def __post_init__(self):
        if not self.amplitude > 0 or not self.sigma > 0:
            raise ValueError("heatmap amplitude and sigma must be positive")


@dataclass(frozen=True)
class Bounds:
    """l2 error bounds for ROI, buffer and background patches."""

    roi: float
    buffer: float | None = None
    background: float | None = None

    def __post_init__(self):
        buf = self.roi if self.buffer is None else self.buffer
        bg = buf if self.background is None else self.background
        object.__setattr__(self, "buffer", float(buf))
        object.__setattr__(self, "background", float(bg))
        object.__setattr__(self, "roi", float(self.roi))
        if not self.roi > 0:
            raise ValueError("error bounds must be positive")
        if not self.roi <= self.buffer <= self.background:
            raise ValueError("bounds must satisfy tau_roi <= tau_buf <= tau_bg")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.roi, self.buffer, self.background)

    def of(self, cls: int) -> float:
        return self.as_tuple()[int(cls)]


@dataclass(frozen=True)
class PatchClassMap:
    """Class per lattice patch, shape (gt, gh, gw), plus the bounds per class."""

    classes: np.ndarray
    bounds: Bounds

    @property
    def flat(self) -> np.ndarray:
        return self.classes.reshape(-1)

    def taus(self) -> np.ndarray:
        return np.asarray(self.bounds.as_tuple())[self.flat]

    def counts(self) -> dict[str, int]:
        return {c.name: int((self.flat == c).sum()) for c in PatchClass}

    def collapsed(self) -> "PatchClassMap":
        """Merge classes that share a bound into the tightest such class."""
        cls = self.classes.copy()
        b = self.bounds
        if b.buffer == b.roi:
            cls[cls == PatchClass.BUFFER] = PatchClass.ROI
        if b.background == b.buffer:
            cls[cls == PatchClass.NON_ROI] = cls.dtype.type(
                PatchClass.ROI if b.buffer == b.roi else PatchClass.BUFFER)
        return PatchClassMap(cls, b)

    @classmethod
    def uniform(cls, grid_shape: Sequence[int], tau: float) -> "PatchClassMap":
        return cls(np.zeros(tuple(grid_shape), dtype=np.uint8), Bounds(tau, tau, tau))


def gaussian_heatmap(points: Iterable[tuple[float, float]], params: HeatmapParams,
                     shape: tuple[int, int]) -> np.ndarray:
    """Max-combined Gaussian bumps ``A * exp(-r**2 / (2 sigma**2))`` on an (H, W) grid.

    ``u`` indexes rows and ``v`` columns.
    """
    h, w = shape
    uu = np.arange(h, dtype=np.float64)[:, None]
    vv = np.arange(w, dtype=np.float64)[None, :]
    out = np.zeros((h, w), dtype=np.float64)
    for u0, v0 in points:
        if not (0 <= u0 < h and 0 <= v0 < w):
            raise ValueError(f"point ({u0}, {v0}) outside grid {shape}")
        d2 = (uu - u0) ** 2 + (vv - v0) ** 2
        np.maximum(out, params.amplitude * np.exp(-d2 / (2.0 * params.sigma ** 2)), out=out)
    return out


def heatmap_series(points: Iterable[tuple[int, float, float]], params: HeatmapParams,
                   shape: Sequence[int]) -> np.ndarray:
    """(T, H, W) heatmaps from ``(frame, u, v)`` points."""
    t, h, w = shape
    by_frame: dict[int, list] = {}
    for f, u, v in points:
        if not 0 <= f < t:
            raise ValueError(f"frame {f} outside [0, {t})")
        by_frame.setdefault(int(f), []).append((u, v))
    return np.stack([gaussian_heatmap(by_frame.get(i, []), params, (h, w)) for i in range(t)])


def threshold_map(prob: np.ndarray, accept: float) -> np.ndarray:
    if accept < 0:
        raise ValueError("acceptance threshold must be >= 0")
    return np.asarray(prob) >= accept


def _neighbour_offsets(connectivity: int, depth: int) -> list[tuple[int, int]]:
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    out = []
    for dh in range(-depth, depth + 1):
        for dw in range(-depth, depth + 1):
            if (dh, dw) == (0, 0):
                continue
            if connectivity == 4 and abs(dh) + abs(dw) > depth:
                continue
            out.append((dh, dw))
    return out


def classify_patches(mask: np.ndarray, spec: PartitionSpec, bounds: Bounds,
                     roi_fraction: float = 0.05, connectivity: int = 8,
                     depth: int = 1, temporal: bool = False) -> PatchClassMap:
    """Label every lattice patch ROI, BUFFER or NON_ROI.

    A patch is ROI when its share of set in-bounds cells is at least ``roi_fraction``.
    NON_ROI patches within ``depth`` steps of an ROI patch in the (h, w) patch grid
    become BUFFER; with ``temporal`` the neighbouring time blocks count too.
    """
    if not 0 < roi_fraction <= 1:
        raise ValueError("roi_fraction must lie in (0, 1]")
    if depth < 0:
        raise ValueError("buffer depth must be >= 0")
    mask = np.asarray(mask, dtype=bool)
    _check_lattice(mask.shape, spec)
    gt, gh, gw = spec.grid_shape(mask.shape)
    pt, ph, pw = spec.patch
    pads = [(0, p) for p in spec.padding(mask.shape)]
    hits = np.pad(mask, pads).reshape(gt, pt, gh, ph, gw, pw).sum(axis=(1, 3, 5))
    cells = np.pad(np.ones(mask.shape, dtype=bool), pads).reshape(gt, pt, gh, ph, gw, pw).sum(axis=(1, 3, 5))
    roi = hits >= roi_fraction * cells

    near = np.zeros_like(roi)
    offsets = _neighbour_offsets(connectivity, depth) if depth else []
    for dh, dw in offsets:
        shifted = np.zeros_like(roi)
        shifted[:, max(dh, 0):gh + min(dh, 0), max(dw, 0):gw + min(dw, 0)] = \
            roi[:, max(-dh, 0):gh + min(-dh, 0), max(-dw, 0):gw + min(-dw, 0)]
        near |= shifted
    if temporal and depth:
        near[1:] |= roi[:-1]
        near[:-1] |= roi[1:]

    classes = np.full((gt, gh, gw), PatchClass.NON_ROI, dtype=np.uint8)
    classes[near & ~roi] = PatchClass.BUFFER
    classes[roi] = PatchClass.ROI
    return PatchClassMap(classes, bounds)


def roi_ratio(obj: PatchClassMap | np.ndarray) -> float:
    """Fraction of ROI patches (class map) or of set cells (mask)."""
    if isinstance(obj, PatchClassMap):
        return float(np.mean(obj.flat == PatchClass.ROI))
    arr = np.asarray(obj, dtype=bool)
    return float(arr.mean()) if arr.size else 0.0


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------

def write_mask(mask: np.ndarray, path: str | Path) -> None:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValueError("mask must be (T, H, W)")
    Path(path).write_bytes(np.packbits(mask.reshape(-1), bitorder="little").tobytes())
    write_header(path, {"kind": "mask", "shape": " ".join(map(str, mask.shape)), "bitorder": "little"})


def read_mask(path: str | Path) -> np.ndarray:
    hdr = read_header(path)
    shape = parse_shape(hdr["shape"])
    n = int(np.prod(shape))
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    if raw.size != (n + 7) // 8:
        raise ValueError(f"{path}: {raw.size} bytes do not match mask shape {shape}")
    return np.unpackbits(raw, bitorder="little", count=n).astype(bool).reshape(shape)


def is_mask_file(path: str | Path) -> bool:
    return header_path(path).exists() and read_header(path).get("kind") == "mask"


def write_points(points: Iterable[tuple[int, float, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "u", "v"])
        for f, u, v in points:
            writer.writerow([int(f), repr(float(u)), repr(float(v))])


def read_points(path: str | Path) -> list[tuple[int, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["frame"]), float(r["u"]), float(r["v"])) for r in rows]
