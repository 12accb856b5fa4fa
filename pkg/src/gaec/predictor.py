"""Predictor stage: the approximate reconstruction x_R that the correction refines.

Built-in predictors regenerate x_R from their quantized payload alone, so encoder
and decoder agree bit for bit. EXTERNAL ingests reconstructions produced by a
trained model elsewhere and pins them by content checksum.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .entropy import ESCAPE, dequantize_array, quantize_array
from .errors import ConfigError, ExternalReferenceError
from .grid import Field, PartitionSpec, PatchUnit, to_blocks, working_array

KINDS = ("zero", "block_mean", "downsample", "external")


@dataclass(frozen=True)
class PredictorKind:
    kind: str = "block_mean"
    factors: tuple[int, int, int] = (2, 4, 4)
    reference_id: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown predictor {self.kind!r}; choose from {KINDS}")
        object.__setattr__(self, "factors", tuple(int(f) for f in self.factors))
        if self.kind == "downsample" and (len(self.factors) != 3 or min(self.factors) < 1):
            raise ConfigError(f"downsample factors must be three positive ints, got {self.factors}")

    def check(self, spec: PartitionSpec) -> None:
        if self.kind == "downsample":
            for p, f in zip(spec.patch, self.factors):
                if p % f:
                    raise ConfigError(f"downsample factor {f} does not divide patch extent {p}")

    def payload_size(self, spec: PartitionSpec, latent_dim: int = 0) -> int:
        """Quantized payload values per patch."""
        if self.kind == "zero":
            return 0
        if self.kind == "block_mean":
            return 1
        if self.kind == "downsample":
            return spec.dim // int(np.prod(self.factors))
        return latent_dim

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "downsample":
            out["factors"] = list(self.factors)
        if self.kind == "external":
            out["reference_id"] = self.reference_id
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorKind":
        return cls(d["kind"], tuple(d.get("factors", (2, 4, 4))), d.get("reference_id"))


@dataclass
class PredictorPayload:
    """Quantized side information for every patch, concatenated in patch order."""

    bins: np.ndarray
    raws: np.ndarray
    per_patch: int


def field_checksum(field: Field) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<3I", *field.shape))
    h.update(field.data.astype("<f4").tobytes())
    return h.hexdigest()


@dataclass
class ExternalSource:
    """Reconstruction from an external model, plus its optional per-patch latents."""

    recon: Field
    latents: np.ndarray | None = None

    @property
    def checksum(self) -> str:
        return field_checksum(self.recon)

    @property
    def latent_dim(self) -> int:
        return 0 if self.latents is None else int(self.latents.shape[1])


def write_latents(latents: np.ndarray, path: str | Path) -> None:
    latents = np.asarray(latents, dtype="<f4")
    if latents.ndim != 2:
        raise ValueError("latents must be (patches, dim)")
    Path(path).write_bytes(struct.pack("<II", *latents.shape) + latents.tobytes())


def read_latents(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: latent file too short")
    n, dim = struct.unpack("<II", raw[:8])
    if len(raw) != 8 + 4 * n * dim:
        raise ValueError(f"{path}: size does not match {n} x {dim} header")
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(n, dim).astype(np.float32)


def _interp_matrix(n: int, f: int) -> np.ndarray:
    """(n, n/f) weights for linear interpolation between coarse cell centres.

    Cells beyond the outermost centres are linearly extrapolated, which keeps
    linear ramps exact.
    """
    m = n // f
    if m == 1:
        return np.ones((n, 1))
    p = (np.arange(n) - (f - 1) / 2.0) / f
    i0 = np.clip(np.floor(p).astype(int), 0, m - 2)
    t = p - i0
    w = np.zeros((n, m))
    w[np.arange(n), i0] = 1.0 - t
    w[np.arange(n), i0 + 1] = t
    return w


def _coarsen(blocks: np.ndarray, spec: PartitionSpec, factors) -> np.ndarray:
    pt, ph, pw = spec.patch
    ft, fh, fw = factors
    b = blocks.astype(np.float64).reshape(-1, pt // ft, ft, ph // fh, fh, pw // fw, fw)
    return b.mean(axis=(2, 4, 6)).reshape(len(blocks), -1)


def _upsample(coarse: np.ndarray, spec: PartitionSpec, factors) -> np.ndarray:
    pt, ph, pw = spec.patch
    ft, fh, fw = factors
    wt, wh, ww = (_interp_matrix(n, f) for n, f in zip(spec.patch, factors))
    c = coarse.reshape(-1, pt // ft, ph // fh, pw // fw)
    out = np.einsum("ti,hj,wk,nijk->nthw", wt, wh, ww, c, optimize=False)
    return out.reshape(len(coarse), spec.dim)


def _raw_payload(blocks, valid, kind, spec, external):
    n = len(blocks)
    if kind.kind == "block_mean":
        b = np.where(valid, blocks.astype(np.float64), 0.0)
        cnt = valid.sum(axis=1)
        return (b.sum(axis=1) / np.maximum(cnt, 1)).reshape(n, 1)
    if kind.kind == "downsample":
        return _coarsen(blocks, spec, kind.factors)
    if kind.kind == "external" and external is not None and external.latents is not None:
        if external.latents.shape[0] != n:
            raise ExternalReferenceError(
                f"latent file holds {external.latents.shape[0]} vectors for {n} patches")
        return external.latents.astype(np.float64)
    return np.zeros((n, 0))


def regenerate_blocks(payload: PredictorPayload, kind: PredictorKind, spec: PartitionSpec,
                      n_patches: int, payload_bin: float, shape=None,
                      external: ExternalSource | None = None, checksum: str | None = None) -> np.ndarray:
    """x_R for every patch as an (N, D) float32 array."""
    if kind.kind == "zero":
        return np.zeros((n_patches, spec.dim), dtype=np.float32)
    if kind.kind == "external":
        if external is None:
            raise ExternalReferenceError(f"reconstruction {kind.reference_id!r} is required to decode")
        if checksum is not None and external.checksum != checksum:
            raise ExternalReferenceError("external reconstruction does not match the archived checksum")
        if shape is not None and external.recon.shape != tuple(shape):
            raise ExternalReferenceError(
                f"reconstruction shape {external.recon.shape} does not match field {tuple(shape)}")
        return to_blocks(working_array(external.recon), spec)
    values = dequantize_array(payload.bins, payload.raws, payload_bin).reshape(n_patches, payload.per_patch)
    if kind.kind == "block_mean":
        out = np.repeat(values, spec.dim, axis=1)
    else:
        out = _upsample(values, spec, kind.factors)
    return out.astype(np.float32)


def predict_blocks(blocks: np.ndarray, valid: np.ndarray, kind: PredictorKind, spec: PartitionSpec,
                   payload_bin: float, latent_bin: float | None = None, shape=None,
                   external: ExternalSource | None = None) -> tuple[np.ndarray, PredictorPayload]:
    """Predict every patch; returns (x_R as (N, D) float32, payload)."""
    kind.check(spec)
    n = len(blocks)
    if kind.kind == "external" and external is None:
        raise ExternalReferenceError("EXTERNAL predictor needs a reconstruction")
    raw = _raw_payload(blocks, valid, kind, spec, external)
    d = latent_bin if kind.kind == "external" and latent_bin is not None else payload_bin
    bins, reps = quantize_array(raw.reshape(-1), d)
    payload = PredictorPayload(bins, reps[bins == ESCAPE], raw.shape[1])
    x_r = regenerate_blocks(payload, kind, spec, n, d, shape=shape, external=external)
    return x_r, payload


def predict(patch: PatchUnit, kind: PredictorKind, spec: PartitionSpec, payload_bin: float = 1e-3,
            external_block: np.ndarray | None = None) -> tuple[np.ndarray, PredictorPayload]:
    """Single-patch convenience wrapper around :func:`predict_blocks`."""
    blocks = patch.vector.reshape(1, -1)
    valid = patch.valid_mask.reshape(1, -1)
    if kind.kind == "external":
        if external_block is None:
            raise ExternalReferenceError("EXTERNAL predictor needs the reconstructed block")
        xr = np.asarray(external_block, dtype=np.float32).reshape(1, -1)
        return xr[0], PredictorPayload(np.zeros(0, np.int64), np.zeros(0), 0)
    x_r, payload = predict_blocks(blocks, valid, kind, spec, payload_bin)
    return x_r[0], payload


def regenerate(payload: PredictorPayload, kind: PredictorKind, spec: PartitionSpec,
               payload_bin: float = 1e-3) -> np.ndarray:
    """Single-patch decode-side mirror of :func:`predict`."""
    return regenerate_blocks(payload, kind, spec, 1, payload_bin)[0]
