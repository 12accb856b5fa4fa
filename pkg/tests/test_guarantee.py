import numpy as np
import pytest

from gaec.errors import BoundUnattainableError
from gaec.guarantee import (Correction, ResidualBasis, SecondMoment, apply_correction,
                            correct_patch, greedy_order, project, train_basis)


def _basis(rng, dim, n=None):
    res = rng.standard_normal((n or 4 * dim, dim)) @ rng.standard_normal((dim, dim))
    return train_basis(res)


def test_train_basis_sorted_and_sign_fixed(rng):
    b = _basis(rng, 12)
    assert np.all(np.diff(b.eigenvalues) <= 0)
    first = [col[np.flatnonzero(np.abs(col) > 1e-10)[0]] for col in b.U.T]
    assert all(v > 0 for v in first)
    assert b.orthonormality_error() < 1e-12


def test_streamed_training_matches_batch(rng):
    res = rng.standard_normal((300, 6))
    a = train_basis(res)
    b = train_basis(iter(np.array_split(res, 7)))
    m1, m2 = SecondMoment(6).add(res[:100]), SecondMoment(6).add(res[100:])
    c = train_basis(m1.merge(m2))
    assert np.allclose(a.U, b.U) and np.allclose(a.U, c.U)
    assert c.n_train == 300
    with pytest.raises(ValueError):
        train_basis(res[:1])


def test_greedy_order_ties_lower_index():
    assert list(greedy_order(np.array([1.0, -3.0, 3.0, 0.5]))) == [1, 2, 0, 3]


def test_identity_basis_example():
    dim = 6
    x_r = np.zeros(dim)
    x = np.array([0.1, 10.0, 0.1, 0.1, 0.1, 0.1])
    tau = 9.99
    xg, corr = correct_patch(x, x_r, ResidualBasis.identity(dim), tau, 1e-4)
    assert list(corr.indices) == [1]
    assert np.linalg.norm(x - xg) <= tau


def test_gate_returns_prediction_unchanged(rng):
    x = rng.standard_normal(8)
    xg, corr = correct_patch(x, x + 1e-3, _basis(rng, 8), 1.0, 0.1)
    assert corr.empty and np.array_equal(xg, (x + 1e-3).astype(np.float32))


def test_bound_always_met(rng):
    b = _basis(rng, 32)
    for _ in range(200):
        x = rng.standard_normal(32) * 10.0 ** rng.uniform(-2, 2)
        x_r = x + rng.standard_normal(32) * 10.0 ** rng.uniform(-2, 1)
        tau = float(np.linalg.norm(x - x_r)) * 10.0 ** rng.uniform(-3, 0)
        d = tau / np.sqrt(32) * 10.0 ** rng.uniform(-1, 1.5)
        xg, corr = correct_patch(x, x_r, b, tau, d)
        err = np.linalg.norm(x.astype(np.float32).astype(np.float64) - xg)
        assert err <= tau
        assert np.array_equal(apply_correction(x_r, b, corr), xg)


def test_screened_and_linear_agree(rng):
    b = _basis(rng, 64)
    for _ in range(100):
        x = rng.standard_normal(64)
        x_r = x + rng.standard_normal(64) * rng.uniform(0.1, 2)
        tau = float(np.linalg.norm(x - x_r)) * rng.uniform(0.01, 0.9)
        d = tau / 8 * rng.uniform(0.05, 3)
        _, a = correct_patch(x, x_r, b, tau, d, search="screened")
        _, c = correct_patch(x, x_r, b, tau, d, search="linear")
        assert np.array_equal(a.indices, c.indices) and np.array_equal(a.bins, c.bins)
        assert (a.fallback is None) == (c.fallback is None)


def test_monotone_without_quantization(rng):
    b = _basis(rng, 16)
    x, x_r = rng.standard_normal(16), np.zeros(16)
    c = project(x, x_r, b)
    order = greedy_order(c)
    deltas = [np.linalg.norm(x - b.U[:, order[:m]] @ c[order[:m]]) for m in range(17)]
    assert np.all(np.diff(deltas) <= 1e-12)
    assert deltas[-1] <= 1e-5 * np.linalg.norm(x)


def test_quantized_tail_bound(rng):
    b = _basis(rng, 16)
    for _ in range(50):
        x = rng.standard_normal(16)
        tau = 0.5 * np.linalg.norm(x)
        d = 0.2
        xg, corr = correct_patch(x, np.zeros(16), b, tau, d)
        if corr.fallback is not None or corr.empty:
            continue
        c = project(x, np.zeros(16), b)
        rest = np.setdiff1d(np.arange(16), corr.indices)
        bound = np.sum(c[rest] ** 2) + corr.m * (d / 2) ** 2
        assert np.linalg.norm(x - xg) ** 2 <= bound * (1 + 1e-6) + 1e-10


def test_fallback_when_bins_too_coarse(rng):
    b = _basis(rng, 8)
    x = rng.standard_normal(8)
    xg, corr = correct_patch(x, np.zeros(8), b, 1e-6, 10.0)
    assert corr.fallback is not None and corr.m == 0
    assert np.array_equal(xg, x.astype(np.float32))
    with pytest.raises(BoundUnattainableError):
        correct_patch(x, np.zeros(8), b, 1e-6, 10.0, allow_fallback=False)


def test_truncated_basis_relies_on_fallback(rng):
    b = _basis(rng, 8).truncated(2)
    x = rng.standard_normal(8)
    xg, corr = correct_patch(x, np.zeros(8), b, 1e-3, 1e-4)
    assert np.linalg.norm(x - xg) <= 1e-3


def test_valid_mask_excludes_cells(rng):
    b = _basis(rng, 4)
    x = np.array([1.0, 2.0, 3.0, 4.0])
    x_r = np.array([1.0, 2.0, 3.0, 100.0])
    xg, corr = correct_patch(x, x_r, b, 0.1, 0.01, valid=np.array([True, True, True, False]))
    assert corr.empty


def test_apply_correction_rejects_bad_index(rng):
    b = _basis(rng, 4).truncated(2)
    with pytest.raises(IndexError):
        apply_correction(np.zeros(4), b, Correction(np.array([3]), np.array([0]), np.array([0.5])))


def test_input_validation(rng):
    b = _basis(rng, 4)
    with pytest.raises(ValueError):
        correct_patch(np.zeros(4), np.zeros(4), b, 0.0, 0.1)
    with pytest.raises(ValueError):
        correct_patch(np.zeros(3), np.zeros(3), b, 1.0, 0.1)
    with pytest.raises(ValueError):
        correct_patch(np.zeros(4), np.zeros(4), b, 1.0, 0.1, search="binary")
