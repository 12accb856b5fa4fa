"""Fields, derived variables and the block lattice used as guarantee units."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class PadPolicy(str, enum.Enum):
    EDGE = "edge"
    REFLECT = "reflect"
    ZERO = "zero"
    NONE = "none"


@dataclass(frozen=True)
class Field:
    """A named (T, H, W) float32 array with an optional fill value."""

    name: str
    data: np.ndarray
    fill_value: float | None = None

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"field must be 3-D (T, H, W), got shape {data.shape}")
        if 0 in data.shape:
            raise ValueError("field has a zero-length dimension")
        ok = np.isfinite(data) | self.fill_mask_of(data, self.fill_value)
        if not ok.all():
            raise ValueError("field contains non-finite samples that are not fill values")
        object.__setattr__(self, "data", data)

    @staticmethod
    def fill_mask_of(data: np.ndarray, fill_value: float | None) -> np.ndarray:
        if fill_value is None:
            return np.zeros(data.shape, dtype=bool)
        if math.isnan(fill_value):
            return np.isnan(data)
        return data == np.float32(fill_value)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def samples(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def fill_mask(self) -> np.ndarray:
        return self.fill_mask_of(self.data, self.fill_value)

    @property
    def valid_mask(self) -> np.ndarray:
        return ~self.fill_mask

    @property
    def nbytes(self) -> int:
        return self.data.size * 4

    @classmethod
    def from_samples(cls, name: str, shape: Sequence[int], samples, fill_value=None) -> "Field":
        samples = np.asarray(samples, dtype=np.float32).reshape(-1)
        if samples.size != math.prod(shape):
            raise ValueError(f"{samples.size} samples do not match shape {tuple(shape)}")
        return cls(name, samples.reshape(tuple(shape)), fill_value)


@dataclass(frozen=True)
class PartitionSpec:
    patch_t: int = 8
    patch_h: int = 16
    patch_w: int = 16
    pad_policy: PadPolicy = PadPolicy.EDGE

    def __post_init__(self):
        if min(self.patch) < 1:
            raise ValueError(f"patch extents must be >= 1, got {self.patch}")
        object.__setattr__(self, "pad_policy", PadPolicy(self.pad_policy))

    @property
    def patch(self) -> tuple[int, int, int]:
        return (self.patch_t, self.patch_h, self.patch_w)

    @property
    def dim(self) -> int:
        return self.patch_t * self.patch_h * self.patch_w

    def grid_shape(self, shape: Sequence[int]) -> tuple[int, int, int]:
        """Number of patches along each axis."""
        return tuple(-(-n // p) for n, p in zip(shape, self.patch))

    def padding(self, shape: Sequence[int]) -> tuple[int, int, int]:
        return tuple(g * p - n for g, p, n in zip(self.grid_shape(shape), self.patch, shape))


@dataclass
class PatchUnit:
    field_name: str
    origin: tuple[int, int, int]
    vector: np.ndarray
    valid_mask: np.ndarray = dc_field(repr=False)


def _check_lattice(shape: Sequence[int], spec: PartitionSpec) -> None:
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"invalid field shape {tuple(shape)}")
    if spec.pad_policy is PadPolicy.NONE:
        for n, p in zip(shape, spec.patch):
            if n % p:
                raise ValueError(
                    f"extent {n} is not a multiple of patch extent {p} and padding is disabled")


def pad_array(data: np.ndarray, spec: PartitionSpec) -> np.ndarray:
    pads = [(0, p) for p in spec.padding(data.shape)]
    if not any(p for _, p in pads):
        return data
    mode = {PadPolicy.EDGE: "edge", PadPolicy.REFLECT: "reflect", PadPolicy.ZERO: "constant"}[spec.pad_policy]
    return np.pad(data, pads, mode=mode)


def to_blocks(data: np.ndarray, spec: PartitionSpec) -> np.ndarray:
    """(T, H, W) -> (N, D) with rows in t-major, then h, then w lattice order."""
    _check_lattice(data.shape, spec)
    padded = pad_array(data, spec)
    gt, gh, gw = spec.grid_shape(data.shape)
    pt, ph, pw = spec.patch
    blocks = padded.reshape(gt, pt, gh, ph, gw, pw).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(blocks.reshape(gt * gh * gw, spec.dim))


def from_blocks(blocks: np.ndarray, shape: Sequence[int], spec: PartitionSpec) -> np.ndarray:
    """Inverse of :func:`to_blocks`; crops padding."""
    gt, gh, gw = spec.grid_shape(shape)
    pt, ph, pw = spec.patch
    arr = np.asarray(blocks).reshape(gt, gh, gw, pt, ph, pw).transpose(0, 3, 1, 4, 2, 5)
    arr = arr.reshape(gt * pt, gh * ph, gw * pw)
    return np.ascontiguousarray(arr[: shape[0], : shape[1], : shape[2]])


def valid_blocks(field: Field, spec: PartitionSpec) -> np.ndarray:
    """(N, D) bool: True for in-bounds, non-fill cells."""
    valid = field.valid_mask
    _check_lattice(valid.shape, spec)
    pads = [(0, p) for p in spec.padding(valid.shape)]
    padded = np.pad(valid, pads, mode="constant", constant_values=False)
    gt, gh, gw = spec.grid_shape(valid.shape)
    pt, ph, pw = spec.patch
    out = padded.reshape(gt, pt, gh, ph, gw, pw).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(out.reshape(gt * gh * gw, spec.dim))


def working_array(field: Field) -> np.ndarray:
    """Field samples with fill cells zeroed so padding and prediction stay finite."""
    data = field.data
    if field.fill_value is None:
        return data
    return np.where(field.fill_mask, np.float32(0), data)


def lattice_origins(shape: Sequence[int], spec: PartitionSpec) -> list[tuple[int, int, int]]:
    gt, gh, gw = spec.grid_shape(shape)
    pt, ph, pw = spec.patch
    return [(it * pt, ih * ph, iw * pw) for it in range(gt) for ih in range(gh) for iw in range(gw)]


def partition(field: Field, spec: PartitionSpec) -> list[PatchUnit]:
    """Tile ``field`` into patches in t-major lattice order.

    Boundary patches are padded per ``spec.pad_policy``; padded and fill cells are
    cleared in each patch's ``valid_mask``.
    """
    blocks = to_blocks(working_array(field), spec)
    valid = valid_blocks(field, spec)
    origins = lattice_origins(field.shape, spec)
    return [PatchUnit(field.name, o, blocks[i], valid[i]) for i, o in enumerate(origins)]


def reassemble(patches: Iterable[PatchUnit], shape: Sequence[int], spec: PartitionSpec,
               name: str | None = None, fill_value: float | None = None) -> Field:
    """Rebuild a field from patches keyed by origin (input order is irrelevant).

    In-bounds cells whose patch marks them invalid are written as ``fill_value``.
    """
    shape = tuple(shape)
    _check_lattice(shape, spec)
    index = {o: i for i, o in enumerate(lattice_origins(shape, spec))}
    blocks = np.zeros((len(index), spec.dim), dtype=np.float32)
    valid = np.zeros((len(index), spec.dim), dtype=bool)
    seen = np.zeros(len(index), dtype=bool)
    for p in patches:
        origin = tuple(int(v) for v in p.origin)
        if origin not in index:
            raise ValueError(f"patch origin {origin} is not on the lattice")
        i = index[origin]
        if seen[i]:
            raise ValueError(f"duplicate patch origin {origin}")
        seen[i] = True
        blocks[i] = p.vector
        valid[i] = p.valid_mask
        name = name or p.field_name
    if not seen.all():
        missing = [o for o, i in index.items() if not seen[i]]
        raise ValueError(f"missing patch origins, e.g. {missing[0]}")
    data = from_blocks(blocks, shape, spec)
    if fill_value is not None:
        inb = from_blocks(valid, shape, spec)
        data = np.where(inb, data, np.float32(fill_value))
    return Field(name or "field", data, fill_value)


def compute_ivt(tvq: Field, tuq: Field, name: str = "IVT") -> Field:
    """Integrated vapour transport magnitude sqrt(tvq**2 + tuq**2) per cell."""
    if tvq.shape != tuq.shape:
        raise ValueError(f"shape mismatch: {tvq.shape} vs {tuq.shape}")
    ivt = np.hypot(tvq.data.astype(np.float64), tuq.data.astype(np.float64))
    fill = tvq.fill_mask | tuq.fill_mask
    fill_value = tvq.fill_value if tvq.fill_value is not None else tuq.fill_value
    if fill.any():
        ivt = np.where(fill, fill_value, ivt)
    return Field(name, ivt.astype(np.float32), fill_value if fill.any() else None)


# --------------------------------------------------------------------------
# raw float32 file format: <path> holds samples, <path>.hdr holds metadata
# --------------------------------------------------------------------------

def header_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".hdr")


def write_header(path: str | Path, entries: dict[str, str]) -> None:
    header_path(path).write_text("".join(f"{k} = {v}\n" for k, v in entries.items()))


def read_header(path: str | Path) -> dict[str, str]:
    hp = header_path(path)
    out = {}
    for lineno, line in enumerate(hp.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{hp}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_shape(text: str) -> tuple[int, int, int]:
    dims = tuple(int(v) for v in text.replace(",", " ").split())
    if len(dims) != 3:
        raise ValueError(f"shape needs 3 extents, got {text!r}")
    return dims


def write_field(field: Field, path: str | Path) -> None:
    path = Path(path)
    path.write_bytes(field.data.astype("<f4").tobytes())
    write_header(path, {
        "name": field.name,
        "shape": " ".join(str(n) for n in field.shape),
        "dtype": "float32le",
        "fill_value": "none" if field.fill_value is None else repr(float(field.fill_value)),
    })


def read_field(path: str | Path) -> Field:
    path = Path(path)
    hdr = read_header(path)
    if hdr.get("dtype", "float32le") != "float32le":
        raise ValueError(f"unsupported dtype {hdr['dtype']!r}")
    shape = parse_shape(hdr["shape"])
    fill = hdr.get("fill_value", "none")
    fill_value = None if fill.lower() == "none" else float(fill)
    raw = np.fromfile(path, dtype="<f4")
    return Field.from_samples(hdr.get("name", path.stem), shape, raw, fill_value)
