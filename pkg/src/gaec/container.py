"""The ``.gaec`` archive and end-to-end compress / decompress.

Byte layout (all integers little-endian)::

    magic    5 bytes   b"GAEC1"
    count    u16       number of sections
    table    count x { tag 4s, offset u64, length u64, checksum u64 }
    tabsum   u64       checksum of magic + count + table
    payloads           sections back to back, in table order, ending at EOF

Checksums are 64-bit BLAKE2b digests. Sections:

    META  JSON (sorted keys): shape, partition, predictor, bounds, bins, basis size
    BASI  u32 D, u32 K, u64 n_train, f32[K] eigenvalues, f32[D*K] basis (column-major)
    CLAS  Huffman stream of per-patch class codes
    PRED  quantized stream of predictor payload / latent bins
    INDX  Huffman stream of index prefix lengths, then the raw prefix bits
    COEF  quantized stream of coefficient bins, patch order, ascending basis index
    FALL  u32 count, u32[count] patch ids, f32[count*D] raw patch samples
    FILL  packed fill-cell mask (little bit order), empty when the field has none
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._bytes import ByteReader
from .entropy import (MAX_BIN, BitReader, BitWriter, ESCAPE, IndexCode, bin_width, index_decode, index_encode,
                      read_quantized_stream, read_symbol_stream, write_quantized_stream,
                      write_symbol_stream)
from .errors import ConfigError, DecodeError, IntegrityError
from .grid import Field, PadPolicy, PartitionSpec, from_blocks, to_blocks, valid_blocks, working_array
from .guarantee import (Correction, ResidualBasis, SecondMoment, apply_correction, correct_patch,
                        train_basis)
from .predictor import ExternalSource, PredictorKind, PredictorPayload, predict_blocks, regenerate_blocks
from .roi import Bounds, PatchClass, PatchClassMap

MAGIC = b"GAEC1"
FORMAT_VERSION = 1
SECTION_TAGS = ("META", "BASI", "CLAS", "PRED", "INDX", "COEF", "FALL", "FILL")
_ENTRY = struct.Struct("<4sQQQ")
_MAX_SECTIONS = 64


def checksum64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


@dataclass
class CompressConfig:
    spec: PartitionSpec = dc_field(default_factory=PartitionSpec)
    predictor: PredictorKind = dc_field(default_factory=PredictorKind)
    bounds: Bounds = dc_field(default_factory=lambda: Bounds(1.0))
    # absolute coefficient bin; None derives one per class as coef_bin_rel * tau / sqrt(D)
    coef_bin: float | None = None
    coef_bin_rel: float = 2.0
    # absolute payload bin; None derives payload_bin_rel * tau_roi / sqrt(D)
    payload_bin: float | None = None
    payload_bin_rel: float = 0.5
    latent_bin: float | None = None
    k_store: int | None = None
    allow_fallback: bool = True
    search: str = "screened"
    workers: int = 1

    def validate(self) -> None:
        self.predictor.check(self.spec)
        for name in ("coef_bin", "payload_bin", "latent_bin"):
            v = getattr(self, name)
            if v is not None and not (v > 0 and math.isfinite(v)):
                raise ConfigError(f"{name} must be positive, got {v}")
        if not self.coef_bin_rel > 0 or not self.payload_bin_rel > 0:
            raise ConfigError("relative bin sizes must be positive")
        if self.k_store is not None:
            if self.k_store < 0:
                raise ConfigError("k_store must be >= 0")
            if self.k_store < self.spec.dim and not self.allow_fallback:
                raise ConfigError("truncating the stored basis requires the raw fallback to stay enabled")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def class_bins(self, bounds: Bounds) -> tuple[float, float, float]:
        if self.coef_bin is not None:
            return (float(self.coef_bin),) * 3
        scale = self.coef_bin_rel / math.sqrt(self.spec.dim)
        return tuple(float(t * scale) for t in bounds.as_tuple())

    def resolved_payload_bin(self, bounds: Bounds) -> float:
        if self.payload_bin is not None:
            return float(self.payload_bin)
        return float(self.payload_bin_rel * bounds.roi / math.sqrt(self.spec.dim))


@dataclass
class Archive:
    """Parsed or freshly built archive: an ordered set of tagged sections."""

    sections: dict[str, bytes]

    @property
    def meta(self) -> dict:
        return json.loads(self.sections["META"].decode())

    def header_size(self) -> int:
        return len(MAGIC) + 2 + _ENTRY.size * len(self.sections) + 8

    def section_table(self) -> list[tuple[str, int, int, int]]:
        off = self.header_size()
        rows = []
        for tag, data in self.sections.items():
            rows.append((tag, off, len(data), checksum64(data)))
            off += len(data)
        return rows

    def to_bytes(self) -> bytes:
        head = bytearray(MAGIC + struct.pack("<H", len(self.sections)))
        for tag, off, length, csum in self.section_table():
            head += _ENTRY.pack(tag.encode("ascii"), off, length, csum)
        head += struct.pack("<Q", checksum64(bytes(head)))
        return bytes(head) + b"".join(self.sections.values())

    def __len__(self) -> int:
        return self.header_size() + sum(len(s) for s in self.sections.values())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Archive":
        """Parse and verify every checksum; raises IntegrityError on any damage."""
        buf = bytes(buf)
        if len(buf) < len(MAGIC) + 2 + 8:
            raise IntegrityError("archive too short")
        if buf[:len(MAGIC)] != MAGIC:
            raise IntegrityError("bad magic: not a GAEC1 archive")
        (count,) = struct.unpack_from("<H", buf, len(MAGIC))
        if count > _MAX_SECTIONS:
            raise IntegrityError(f"implausible section count {count}")
        tab_end = len(MAGIC) + 2 + _ENTRY.size * count
        if len(buf) < tab_end + 8:
            raise IntegrityError("section table truncated")
        (tabsum,) = struct.unpack_from("<Q", buf, tab_end)
        if checksum64(buf[:tab_end]) != tabsum:
            raise IntegrityError("section table checksum mismatch")
        sections = {}
        expect = tab_end + 8
        for i in range(count):
            tag_b, off, length, csum = _ENTRY.unpack_from(buf, len(MAGIC) + 2 + i * _ENTRY.size)
            try:
                tag = tag_b.decode("ascii")
            except UnicodeDecodeError as exc:
                raise IntegrityError("non-ASCII section tag") from exc
            if tag in sections:
                raise IntegrityError(f"duplicate section {tag}")
            if off != expect or off + length > len(buf):
                raise IntegrityError(f"section {tag} lies outside the archive")
            data = buf[off:off + length]
            if checksum64(data) != csum:
                raise IntegrityError(f"checksum mismatch in section {tag}")
            sections[tag] = data
            expect = off + length
        if expect != len(buf):
            raise IntegrityError("trailing bytes after last section")
        missing = [t for t in SECTION_TAGS if t not in sections]
        if missing:
            raise IntegrityError(f"missing sections: {missing}")
        archive = cls(sections)
        try:
            meta = archive.meta
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IntegrityError("META section is not valid JSON") from exc
        if not isinstance(meta, dict) or meta.get("version") != FORMAT_VERSION:
            raise IntegrityError(f"unsupported archive version {meta.get('version') if isinstance(meta, dict) else None}")
        return archive

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Archive":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class CompressResult:
    archive: Archive
    corrections: list[Correction]
    taus: np.ndarray
    class_map: PatchClassMap
    basis: ResidualBasis

    def summary(self, field: Field) -> dict:
        size = len(self.archive)
        basis_bytes = len(self.archive.sections["BASI"])
        counts = {c.name: int((self.class_map.flat == c).sum()) for c in PatchClass}
        ms = np.array([c.m for c in self.corrections])
        plens = np.array([(int(c.indices.max()) + 1) if c.m else 0 for c in self.corrections])
        corrected = ms > 0
        return {
            "original_bytes": field.nbytes,
            "archive_bytes": size,
            "basis_bytes": basis_bytes,
            "compression_ratio": field.nbytes / size,
            "compression_ratio_without_basis": field.nbytes / max(1, size - basis_bytes),
            "patches": len(self.corrections),
            "class_counts": {k: v for k, v in counts.items() if v},
            "classes_used": sum(1 for v in counts.values() if v),
            "bounds": dict(zip(("roi", "buffer", "background"), self.class_map.bounds.as_tuple())),
            "corrected_patches": int(corrected.sum()),
            "fallback_patches": sum(1 for c in self.corrections if c.fallback is not None),
            "mean_selected": float(ms[corrected].mean()) if corrected.any() else 0.0,
            "mean_prefix_len": float(plens[corrected].mean()) if corrected.any() else 0.0,
            "basis_columns_stored": self.basis.k,
            "section_bytes": {t: len(s) for t, s in self.archive.sections.items()},
        }


def _chunks(n: int, workers: int) -> list[range]:
    if workers <= 1 or n < 2:
        return [range(n)]
    size = -(-n // (workers * 4))
    return [range(i, min(n, i + size)) for i in range(0, n, size)]


def _parallel(fn, n: int, workers: int) -> list:
    ranges = _chunks(n, workers)
    if len(ranges) == 1:
        return fn(ranges[0])
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(fn, ranges))
    return [x for part in parts for x in part]


def _encode_basis(basis: ResidualBasis) -> bytes:
    d, k = basis.U.shape
    return (struct.pack("<IIQ", d, k, basis.n_train)
            + basis.eigenvalues.astype("<f4").tobytes()
            + np.ascontiguousarray(basis.U.T).astype("<f4").tobytes())


def _decode_basis(data: bytes) -> ResidualBasis:
    r = ByteReader(data)
    d, k, n_train = r.unpack("<IIQ")
    if k > d:
        raise DecodeError("basis has more columns than its dimension")
    ev = r.array("<f4", k)
    cols = r.array("<f4", d * k).reshape(k, d)
    r.expect_end()
    return ResidualBasis(cols.T.astype(np.float64), ev.astype(np.float64), n_train)


def compress(field: Field, config: CompressConfig, class_map: PatchClassMap | None = None,
             external: ExternalSource | None = None, basis: ResidualBasis | None = None) -> CompressResult:
    """Compress ``field`` so every patch meets the bound of its class.

    ``class_map`` defaults to a single class at ``config.bounds.roi``. A pre-trained
    ``basis`` may be supplied to skip training.
    """
    config.validate()
    spec = config.spec
    kind = config.predictor
    grid = spec.grid_shape(field.shape)
    if class_map is None:
        class_map = PatchClassMap.uniform(grid, config.bounds.roi)
    if class_map.classes.shape != grid:
        raise ConfigError(f"class map grid {class_map.classes.shape} does not match patch grid {grid}")
    if kind.kind == "external":
        if external is None:
            raise ConfigError("EXTERNAL predictor requires a reconstruction")
        if external.recon.shape != field.shape:
            raise ConfigError(f"reconstruction shape {external.recon.shape} != field shape {field.shape}")
    class_map = class_map.collapsed()
    bounds = class_map.bounds
    bins_by_class = config.class_bins(bounds)
    payload_bin = config.resolved_payload_bin(bounds)
    latent_bin = config.latent_bin if config.latent_bin is not None else payload_bin

    blocks = to_blocks(working_array(field), spec)
    valid = valid_blocks(field, spec)
    n = len(blocks)
    x_r, payload = predict_blocks(blocks, valid, kind, spec, payload_bin, latent_bin,
                                  shape=field.shape, external=external)

    classes = class_map.flat
    taus = np.asarray(bounds.as_tuple())[classes]
    ds = np.asarray(bins_by_class)[classes]
    resid = np.where(valid, blocks.astype(np.float64) - x_r, 0.0)
    needs = np.sqrt(np.einsum("ij,ij->i", resid, resid)) > taus

    if basis is None:
        if needs.any():
            acc = SecondMoment(spec.dim)
            for i in range(0, n, 1024):
                acc.add(resid[i:i + 1024])
            if acc.count < 2:
                acc.add(np.zeros(spec.dim))
            basis = train_basis(acc)
        else:
            basis = ResidualBasis(np.zeros((spec.dim, 0)), np.zeros(0), n)
    elif basis.dim != spec.dim:
        raise ConfigError(f"supplied basis has dimension {basis.dim}, patches have {spec.dim}")
    work_basis = basis.stored(config.k_store)

    def run(rng):
        out = []
        for i in rng:
            if not needs[i]:
                out.append(Correction(achieved_error=float(np.linalg.norm(resid[i]))))
                continue
            _, corr = correct_patch(blocks[i], x_r[i], work_basis, float(taus[i]), float(ds[i]),
                                    valid=valid[i], search=config.search,
                                    allow_fallback=config.allow_fallback)
            out.append(corr)
        return out

    corrections = _parallel(run, n, config.workers)
    k_used = max((int(c.indices.max()) + 1 for c in corrections if c.m), default=0)
    stored = work_basis.truncated(k_used)

    meta = {
        "format": "gaec",
        "version": FORMAT_VERSION,
        "name": field.name,
        "shape": list(field.shape),
        "fill_value": None if field.fill_value is None else repr(float(field.fill_value)),
        "partition": {"patch": list(spec.patch), "pad_policy": spec.pad_policy.value,
                      "padding": list(spec.padding(field.shape))},
        "predictor": kind.to_dict(),
        "payload_bin": payload_bin,
        "latent_bin": latent_bin,
        "payload_per_patch": payload.per_patch,
        "bounds": list(bounds.as_tuple()),
        "coef_bins": list(bins_by_class),
        "patches": n,
        "basis": {"dim": spec.dim, "columns": stored.k, "trained_on": basis.n_train},
        "external_checksum": external.checksum if kind.kind == "external" else None,
    }
    sections = {"META": json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()}
    sections["BASI"] = _encode_basis(stored)
    sections["CLAS"] = write_symbol_stream(classes.astype(np.int64))
    sections["PRED"] = write_quantized_stream(payload.bins, payload.raws)

    lens = []
    bits = BitWriter()
    coef_bins = []
    coef_raws = []
    fallback_ids = []
    fallback_vals = []
    for i, c in enumerate(corrections):
        code = index_encode(c.indices, spec.dim)
        lens.append(code.prefix_len)
        bits.write(code.bits)
        coef_bins.append(c.bins)
        coef_raws.append(c.coeffs_q[c.bins == ESCAPE])
        if c.fallback is not None:
            fallback_ids.append(i)
            fallback_vals.append(np.asarray(c.fallback, dtype="<f4"))
    sections["INDX"] = write_symbol_stream(np.asarray(lens, dtype=np.int64)) + bits.to_bytes()
    sections["COEF"] = write_quantized_stream(
        np.concatenate(coef_bins) if coef_bins else np.zeros(0, np.int64),
        np.concatenate(coef_raws) if coef_raws else np.zeros(0))
    sections["FALL"] = (struct.pack("<I", len(fallback_ids))
                        + np.asarray(fallback_ids, dtype="<u4").tobytes()
                        + b"".join(v.tobytes() for v in fallback_vals))
    fill = field.fill_mask
    sections["FILL"] = np.packbits(fill.reshape(-1), bitorder="little").tobytes() if fill.any() else b""
    archive = Archive(sections)
    return CompressResult(archive, corrections, taus, class_map, stored)


@dataclass
class DecodedArchive:
    """Everything decompress recovers, per patch, before reassembly."""

    field: Field
    taus: np.ndarray
    classes: np.ndarray
    spec: PartitionSpec


def _decode(archive: Archive, external: ExternalSource | None, workers: int) -> DecodedArchive:
    try:
        return _decode_inner(archive, external, workers)
    except (KeyError, TypeError, ValueError, IndexError, struct.error) as exc:
        if isinstance(exc, IntegrityError):
            raise
        raise IntegrityError(f"malformed archive: {exc}") from exc


def _decode_inner(archive: Archive, external: ExternalSource | None, workers: int) -> DecodedArchive:
    meta = archive.meta
    shape = tuple(int(v) for v in meta["shape"])
    part = meta["partition"]
    spec = PartitionSpec(*part["patch"], pad_policy=PadPolicy(part["pad_policy"]))
    if list(spec.padding(shape)) != part["padding"]:
        raise IntegrityError("recorded padding does not match the lattice")
    n = int(meta["patches"])
    if n != math.prod(spec.grid_shape(shape)):
        raise IntegrityError("patch count does not match the lattice")
    kind = PredictorKind.from_dict(meta["predictor"])
    basis = _decode_basis(archive.sections["BASI"])
    if basis.dim != spec.dim:
        raise IntegrityError("basis dimension does not match patch size")
    # float32 storage keeps the Gram matrix within ~1e-6 of I; anything far off is damage
    if not np.all(np.isfinite(basis.U)) or basis.orthonormality_error() > 1e-4:
        raise IntegrityError("stored basis is not orthonormal")

    r = ByteReader(archive.sections["CLAS"])
    classes = read_symbol_stream(r)
    r.expect_end()
    if classes.size != n or classes.min(initial=0) < 0 or classes.max(initial=0) > 2:
        raise IntegrityError("class stream does not cover the lattice")
    bounds = np.asarray(meta["bounds"], dtype=np.float64)
    coef_bins = np.asarray(meta["coef_bins"], dtype=np.float64)

    r = ByteReader(archive.sections["PRED"])
    pbins, praws = read_quantized_stream(r)
    r.expect_end()
    per_patch = int(meta["payload_per_patch"])
    if pbins.size != n * per_patch:
        raise IntegrityError("predictor payload size does not match the lattice")
    pbin = float(meta["latent_bin"] if kind.kind == "external" else meta["payload_bin"])
    payload = PredictorPayload(pbins, praws, per_patch)
    with np.errstate(over="ignore", invalid="ignore"):
        x_r = regenerate_blocks(payload, kind, spec, n, pbin, shape=shape, external=external,
                                checksum=meta.get("external_checksum"))
    if not np.all(np.isfinite(x_r)):
        raise IntegrityError("predictor payload overflows float32")

    r = ByteReader(archive.sections["INDX"])
    lens = read_symbol_stream(r)
    bit_reader = BitReader(r)
    r.expect_end()
    if lens.size != n:
        raise IntegrityError("index stream does not cover the lattice")
    indices = []
    for plen in lens.tolist():
        if not 0 <= plen <= basis.k:
            raise IntegrityError(f"index prefix length {plen} exceeds stored basis columns {basis.k}")
        indices.append(index_decode(IndexCode(plen, bit_reader.read(plen)), basis.k))
    bit_reader.expect_end()

    r = ByteReader(archive.sections["COEF"])
    cbins, craws = read_quantized_stream(r)
    r.expect_end()
    counts = np.array([len(ix) for ix in indices], dtype=np.int64)
    if cbins.size != counts.sum():
        raise IntegrityError("coefficient count does not match selected indices")
    if not np.all((coef_bins > 0) & np.isfinite(coef_bins)):
        raise IntegrityError("invalid coefficient bin size")
    half = np.repeat(np.array([bin_width(b) / 2 for b in coef_bins])[classes], counts)
    escaped = cbins == ESCAPE
    if np.any(np.abs(cbins[~escaped]) > MAX_BIN):
        raise IntegrityError("coefficient bin index out of range")
    reps = (2 * cbins.astype(np.float64) + 1) * half
    reps[escaped] = craws
    if not np.all(np.isfinite(reps)):
        raise IntegrityError("non-finite coefficient")
    starts = np.concatenate([[0], np.cumsum(counts)])

    r = ByteReader(archive.sections["FALL"])
    nf = r.u32()
    fids = r.array("<u4", nf).astype(np.int64)
    fvals = r.array("<f4", nf * spec.dim).reshape(nf, spec.dim)
    r.expect_end()
    if not np.all(np.isfinite(fvals)):
        raise IntegrityError("non-finite fallback sample")
    if nf and (fids.max() >= n or np.unique(fids).size != nf):
        raise IntegrityError("invalid fallback patch ids")
    if nf and counts[fids].any():
        raise IntegrityError("fallback patch also carries coefficients")
    fallback = dict(zip(fids.tolist(), fvals))

    def run(rng):
        out = []
        for i in rng:
            corr = Correction(indices[i], cbins[starts[i]:starts[i + 1]],
                              reps[starts[i]:starts[i + 1]], fallback=fallback.get(i))
            out.append(apply_correction(x_r[i], basis, corr))
        return out

    with np.errstate(over="ignore", invalid="ignore"):
        rows = _parallel(run, n, workers)
    data = from_blocks(np.stack(rows) if rows else np.zeros((0, spec.dim), np.float32), shape, spec)
    if not np.all(np.isfinite(data)):
        raise IntegrityError("decoded values overflow float32")

    fill_value = meta["fill_value"]
    fill_value = None if fill_value is None else float(fill_value)
    fill_bytes = archive.sections["FILL"]
    if fill_bytes:
        cells = math.prod(shape)
        if len(fill_bytes) != (cells + 7) // 8 or fill_value is None:
            raise IntegrityError("fill mask size does not match the field")
        fmask = np.unpackbits(np.frombuffer(fill_bytes, np.uint8), bitorder="little", count=cells)
        data = np.where(fmask.reshape(shape).astype(bool), np.float32(fill_value), data)
    fld = Field(meta["name"], data, fill_value)
    return DecodedArchive(fld, bounds[classes], classes, spec)


def decompress(archive: Archive | bytes, external: ExternalSource | None = None, workers: int = 1) -> Field:
    """Rebuild the field; raises IntegrityError on any corruption."""
    if not isinstance(archive, Archive):
        archive = Archive.from_bytes(archive)
    return _decode(archive, external, workers).field


def decode_with_bounds(archive: Archive | bytes, external: ExternalSource | None = None,
                       workers: int = 1) -> DecodedArchive:
    if not isinstance(archive, Archive):
        archive = Archive.from_bytes(archive)
    return _decode(archive, external, workers)


def patch_errors(original: Field, decoded: Field, spec: PartitionSpec) -> np.ndarray:
    """l2 error of every lattice patch over valid cells."""
    valid = valid_blocks(original, spec)
    a = to_blocks(working_array(original), spec).astype(np.float64)
    b = to_blocks(working_array(decoded), spec).astype(np.float64)
    diff = np.where(valid, a - b, 0.0)
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def verify_bounds(original: Field, archive: Archive | bytes, external: ExternalSource | None = None,
                  workers: int = 1) -> dict:
    """Decode and check every patch against the bound recorded in the archive."""
    dec = decode_with_bounds(archive, external, workers)
    errs = patch_errors(original, dec.field, dec.spec)
    viol = errs > dec.taus
    return {
        "bounds_verified": not bool(viol.any()),
        "violations": int(viol.sum()),
        "max_error_over_tau": float((errs / dec.taus).max()) if errs.size else 0.0,
    }


def compression_ratio(original: Field, archive: Archive | bytes) -> float:
    """Original float32 bytes over total archive bytes (basis and tables included)."""
    size = len(archive) if isinstance(archive, Archive) else len(bytes(archive))
    return original.nbytes / size


def write_manifest(entries: Sequence[dict], path: str | Path) -> dict:
    """One record per variable archive plus the overall ratio (total bytes over total bytes)."""
    total_orig = sum(e["original_bytes"] for e in entries)
    total_arch = sum(e["archive_bytes"] for e in entries)
    manifest = {
        "format": "gaec-manifest",
        "version": FORMAT_VERSION,
        "variables": list(entries),
        "overall_compression_ratio": total_orig / total_arch if total_arch else None,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
