import json
import math

import numpy as np
import pytest

from gaec.container import (MAGIC, SECTION_TAGS, Archive, CompressConfig, checksum64, compress,
                            compression_ratio, decode_with_bounds, decompress, patch_errors,
                            verify_bounds, write_manifest)
from gaec.errors import ConfigError, ExternalReferenceError, IntegrityError
from gaec.grid import Field, PartitionSpec
from gaec.guarantee import train_basis
from gaec.predictor import ExternalSource, PredictorKind
from gaec.roi import Bounds, PatchClassMap, classify_patches

SPEC = PartitionSpec(2, 4, 4)


def _cfg(**kw):
    kw.setdefault("bounds", Bounds(0.05))
    return CompressConfig(SPEC, **kw)


def test_roundtrip_meets_bounds(smooth_field):
    res = compress(smooth_field, _cfg())
    out = decompress(res.archive.to_bytes())
    assert out.shape == smooth_field.shape and out.name == "smooth"
    assert (patch_errors(smooth_field, out, SPEC) <= 0.05).all()
    assert verify_bounds(smooth_field, res.archive)["violations"] == 0


def test_layout_sections_fill_the_file(smooth_field):
    arc = compress(smooth_field, _cfg()).archive
    blob = arc.to_bytes()
    assert blob.startswith(MAGIC)
    table = arc.section_table()
    assert [t for t, *_ in table] == list(SECTION_TAGS)
    assert arc.header_size() + sum(n for _, _, n, _ in table) == len(blob) == len(arc)
    for tag, off, n, cs in table:
        assert checksum64(blob[off:off + n]) == cs
    assert json.loads(arc.sections["META"])["shape"] == list(smooth_field.shape)


def test_save_load(tmp_path, smooth_field):
    arc = compress(smooth_field, _cfg()).archive
    arc.save(tmp_path / "a.gaec")
    assert Archive.load(tmp_path / "a.gaec").to_bytes() == arc.to_bytes()


def test_equal_bounds_collapse_to_uniform(smooth_field, rng):
    mask = rng.random(smooth_field.shape) < 0.2
    cmap = classify_patches(mask, SPEC, Bounds(0.05))
    a = compress(smooth_field, _cfg(), class_map=cmap).archive.to_bytes()
    b = compress(smooth_field, _cfg()).archive.to_bytes()
    assert a == b


def test_differential_bounds_recorded(smooth_field, rng):
    bounds = Bounds(0.02, 0.05, 0.3)
    classes = rng.integers(0, 3, SPEC.grid_shape(smooth_field.shape)).astype(np.uint8)
    res = compress(smooth_field, _cfg(bounds=bounds), class_map=PatchClassMap(classes, bounds))
    dec = decode_with_bounds(res.archive)
    assert np.array_equal(dec.classes, classes.reshape(-1))
    assert np.array_equal(dec.taus, np.array(bounds.as_tuple())[classes.reshape(-1)])
    assert (patch_errors(smooth_field, dec.field, SPEC) <= dec.taus).all()


def test_fill_values_restored(rng):
    data = rng.standard_normal((3, 7, 9))
    data[rng.random(data.shape) < 0.15] = -999.0
    f = Field("f", data, fill_value=-999.0)
    out = decompress(compress(f, _cfg(bounds=Bounds(0.01))).archive.to_bytes())
    assert np.array_equal(out.fill_mask, f.fill_mask)
    assert out.fill_value == -999.0


def test_fallback_and_escape_paths(rng):
    f = Field("x", rng.standard_normal((2, 4, 4)) * 1e6)
    res = compress(f, _cfg(bounds=Bounds(1e-3), coef_bin=1.0))
    assert any(c.fallback is not None for c in res.corrections) or res.basis.k
    assert verify_bounds(f, res.archive)["bounds_verified"]
    with pytest.raises(Exception):
        compress(f, _cfg(bounds=Bounds(1e-3), coef_bin=1e9, allow_fallback=False))


def test_nothing_to_correct_stores_empty_basis(rng):
    f = Field("c", np.full((2, 4, 4), 3.0))
    res = compress(f, _cfg(predictor=PredictorKind("block_mean")))
    assert res.basis.k == 0
    assert (patch_errors(f, decompress(res.archive), SPEC) <= 0.05).all()


def test_basis_truncated_to_used_columns(smooth_field):
    res = compress(smooth_field, _cfg())
    used = max(int(c.indices.max()) + 1 for c in res.corrections if c.m)
    assert res.basis.k == used
    small = compress(smooth_field, _cfg(k_store=3))
    assert small.basis.k <= 3
    assert verify_bounds(smooth_field, small.archive)["bounds_verified"]


def test_supplied_basis(smooth_field, rng):
    basis = train_basis(rng.standard_normal((100, SPEC.dim)))
    res = compress(smooth_field, _cfg(), basis=basis)
    assert verify_bounds(smooth_field, res.archive)["bounds_verified"]
    with pytest.raises(ConfigError):
        compress(smooth_field, _cfg(), basis=train_basis(rng.standard_normal((10, 3))))


def test_external_predictor(smooth_field, rng):
    recon = Field("r", smooth_field.data + rng.standard_normal(smooth_field.shape).astype(np.float32) * 0.01)
    src = ExternalSource(recon)
    cfg = _cfg(predictor=PredictorKind("external", reference_id="r.f32"))
    res = compress(smooth_field, cfg, external=src)
    out = decompress(res.archive, external=src)
    assert (patch_errors(smooth_field, out, SPEC) <= 0.05).all()
    with pytest.raises(ExternalReferenceError):
        decompress(res.archive)
    other = ExternalSource(Field("r", recon.data + np.float32(1e-3)))
    with pytest.raises(ExternalReferenceError):
        decompress(res.archive, external=other)
    with pytest.raises(ConfigError):
        compress(smooth_field, cfg)


def test_config_validation(smooth_field):
    with pytest.raises(ConfigError):
        compress(smooth_field, _cfg(coef_bin=-1.0))
    with pytest.raises(ConfigError):
        compress(smooth_field, _cfg(), class_map=PatchClassMap.uniform((1, 1, 1), 0.1))


def test_ratio_includes_everything(smooth_field):
    res = compress(smooth_field, _cfg())
    assert compression_ratio(smooth_field, res.archive) == smooth_field.nbytes / len(res.archive.to_bytes())
    s = res.summary(smooth_field)
    assert s["archive_bytes"] == sum(s["section_bytes"].values()) + res.archive.header_size()
    assert s["compression_ratio"] <= s["compression_ratio_without_basis"]


def test_manifest(tmp_path):
    entries = [{"name": "a", "original_bytes": 100, "archive_bytes": 10},
               {"name": "b", "original_bytes": 300, "archive_bytes": 30}]
    m = write_manifest(entries, tmp_path / "manifest.json")
    assert m["overall_compression_ratio"] == 10.0
    assert json.loads((tmp_path / "manifest.json").read_text()) == m


@pytest.mark.parametrize("cut", [0, 4, 10, 50, -1])
def test_truncation_is_integrity_error(smooth_field, cut):
    blob = compress(smooth_field, _cfg()).archive.to_bytes()
    with pytest.raises(IntegrityError):
        decompress(blob[:cut])


def test_reordered_or_extended_archive_rejected(smooth_field):
    blob = compress(smooth_field, _cfg()).archive.to_bytes()
    with pytest.raises(IntegrityError):
        decompress(blob + b"\x00")
    with pytest.raises(IntegrityError):
        decompress(b"GAEC2" + blob[5:])


def test_workers_do_not_change_output(smooth_field):
    a = compress(smooth_field, _cfg(workers=1)).archive.to_bytes()
    b = compress(smooth_field, _cfg(workers=3)).archive.to_bytes()
    assert a == b
    assert decompress(a, workers=1).data.tobytes() == decompress(a, workers=5).data.tobytes()
