import numpy as np
import pytest
from scipy.interpolate import RegularGridInterpolator

from gaec.entropy import dequantize, quantize
from gaec.errors import ConfigError, ExternalReferenceError
from gaec.grid import Field, PartitionSpec, partition, to_blocks, valid_blocks, working_array
from gaec.predictor import (ExternalSource, PredictorKind, field_checksum, predict, predict_blocks,
                            read_latents, regenerate, regenerate_blocks, write_latents)


def _run(field, kind, spec, d=1e-9, external=None):
    blocks = to_blocks(working_array(field), spec)
    return predict_blocks(blocks, valid_blocks(field, spec), kind, spec, d, shape=field.shape,
                          external=external)


def test_zero_predictor():
    f = Field("x", np.ones((2, 4, 4)))
    x_r, payload = _run(f, PredictorKind("zero"), PartitionSpec(1, 2, 2))
    assert not x_r.any() and payload.per_patch == 0 and payload.bins.size == 0


def test_block_mean_constant_patch():
    spec = PartitionSpec(1, 2, 2)
    f = Field("x", np.full((1, 2, 2), 0.73))
    d = 0.1
    x_r, payload = _run(f, PredictorKind("block_mean"), spec, d)
    assert np.all(x_r == np.float32(dequantize(quantize(0.73, d), d)))
    assert np.abs(x_r - 0.73).max() <= d / 2


def test_block_mean_ignores_fill_cells():
    data = np.array([[[1.0, 3.0], [5.0, -9.0]]])
    f = Field("x", data, fill_value=-9.0)
    x_r, _ = _run(f, PredictorKind("block_mean"), PartitionSpec(1, 2, 2))
    assert np.allclose(x_r, 3.0, atol=1e-8)


def test_downsample_exact_on_multilinear_ramp():
    spec = PartitionSpec(4, 8, 8)
    t, u, v = np.meshgrid(np.arange(8), np.arange(16), np.arange(8), indexing="ij")
    ramp = 0.5 * t - 0.25 * u + 0.125 * v + 0.01 * t * u * v + 3.0
    f = Field("ramp", ramp)
    x_r, _ = _run(f, PredictorKind("downsample", (2, 2, 2)), spec)
    blocks = to_blocks(f.data, spec)
    assert np.abs(x_r - blocks).max() < 1e-4


def test_downsample_matches_interpolation_oracle():
    rng = np.random.default_rng(4)
    spec = PartitionSpec(4, 8, 8)
    factors = (2, 4, 2)
    f = Field("x", rng.standard_normal((4, 8, 8)))
    x_r, _ = _run(f, PredictorKind("downsample", factors), spec)
    coarse = f.data.astype(np.float64).reshape(2, 2, 2, 4, 4, 2).mean(axis=(1, 3, 5))
    centres = [np.arange(n // k) * k + (k - 1) / 2 for n, k in zip(spec.patch, factors)]
    oracle = RegularGridInterpolator(centres, coarse, bounds_error=False, fill_value=None)
    pts = np.stack(np.meshgrid(*[np.arange(n) for n in spec.patch], indexing="ij"), -1).reshape(-1, 3)
    assert np.abs(x_r[0] - oracle(pts)).max() < 1e-5


def test_downsample_factor_must_divide_patch():
    with pytest.raises(ConfigError):
        PredictorKind("downsample", (3, 2, 2)).check(PartitionSpec(4, 8, 8))
    with pytest.raises(ConfigError):
        PredictorKind("bogus")


def test_payload_regenerates_identically():
    rng = np.random.default_rng(1)
    spec = PartitionSpec(2, 4, 4)
    f = Field("x", rng.standard_normal((4, 8, 8)))
    for kind in (PredictorKind("block_mean"), PredictorKind("downsample", (1, 2, 2))):
        x_r, payload = _run(f, kind, spec, 0.01)
        again = regenerate_blocks(payload, kind, spec, len(x_r), 0.01)
        assert np.array_equal(x_r, again)
        assert payload.per_patch == kind.payload_size(spec)


def test_single_patch_wrappers():
    spec = PartitionSpec(1, 2, 2)
    patch = partition(Field("x", np.arange(4.0).reshape(1, 2, 2)), spec)[0]
    x_r, payload = predict(patch, PredictorKind("block_mean"), spec, 0.5)
    assert np.all(x_r == 1.75)
    assert np.array_equal(regenerate(payload, PredictorKind("block_mean"), spec, 0.5), x_r)


def test_external_reference_checks(tmp_path):
    spec = PartitionSpec(1, 2, 2)
    f = Field("x", np.ones((1, 2, 2)))
    recon = Field("r", np.full((1, 2, 2), 0.9))
    src = ExternalSource(recon)
    kind = PredictorKind("external")
    x_r, _ = _run(f, kind, spec, external=src)
    assert np.all(x_r == np.float32(0.9))
    with pytest.raises(ExternalReferenceError):
        regenerate_blocks(None, kind, spec, 1, 0.1, external=None)
    with pytest.raises(ExternalReferenceError):
        regenerate_blocks(None, kind, spec, 1, 0.1, external=src, checksum="0" * 32)
    assert field_checksum(recon) == src.checksum
    assert field_checksum(Field("r", np.full((1, 2, 2), 0.91))) != src.checksum


def test_latents(tmp_path):
    lat = np.arange(6, dtype=np.float32).reshape(3, 2)
    write_latents(lat, tmp_path / "l.bin")
    assert np.array_equal(read_latents(tmp_path / "l.bin"), lat)
    spec = PartitionSpec(1, 2, 2)
    f = Field("x", np.ones((1, 2, 6)))
    src = ExternalSource(Field("r", np.ones((1, 2, 6))), lat)
    _, payload = _run(f, PredictorKind("external"), spec, 0.5, external=src)
    assert payload.per_patch == 2 and payload.bins.size == 6
    with pytest.raises(ExternalReferenceError):
        _run(f, PredictorKind("external"), spec, external=ExternalSource(src.recon, lat[:2]))
