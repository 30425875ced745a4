import numpy as np
import pytest

from adaptkit.alignment import KERNEL_BACKEND, _nearest_rows_numpy, nearest_rows
from adaptkit.errors import ArgumentError


def bruteforce_nearest(query, bank):
    """Plain double-loop reference: strict less-than keeps the lowest index."""
    indices, dists = [], []
    for qrow in query:
        best, best_j = None, 0
        for j, brow in enumerate(bank):
            acc = 0.0
            for a, b in zip(qrow, brow):
                diff = float(a) - float(b)
                acc += diff * diff
            if best is None or acc < best:
                best, best_j = acc, j
        indices.append(best_j)
        dists.append(best)
    return np.array(indices), np.array(dists)


IMPLEMENTATIONS = [("active", nearest_rows), ("numpy", _nearest_rows_numpy)]


@pytest.mark.parametrize("name,impl", IMPLEMENTATIONS)
def test_matches_bruteforce(name, impl, rng):
    query = rng.randn(11, 5)
    bank = rng.randn(17, 5)
    idx, d2 = impl(query, bank)
    ref_idx, ref_d2 = bruteforce_nearest(query, bank)
    assert np.array_equal(idx, ref_idx)
    assert np.max(np.abs(d2 - ref_d2)) < 1e-12


@pytest.mark.parametrize("name,impl", IMPLEMENTATIONS)
def test_tie_break_lowest_index(name, impl, rng):
    row = rng.randn(4)
    bank = np.stack([rng.randn(4), row.copy(), rng.randn(4), row.copy(), row.copy()])
    idx, d2 = impl(row[None, :], bank)
    assert idx[0] == 1
    assert d2[0] == 0.0


@pytest.mark.parametrize("name,impl", IMPLEMENTATIONS)
def test_self_bank_identity(name, impl, rng):
    query = rng.randn(9, 6)
    idx, d2 = impl(query, query)
    assert np.array_equal(idx, np.arange(9))
    assert np.all(d2 == 0.0)


def test_monotone_in_bank_size(rng):
    query = rng.randn(10, 4)
    bank = rng.randn(6, 4)
    extra = rng.randn(9, 4)
    _, d_small = nearest_rows(query, bank)
    _, d_large = nearest_rows(query, np.vstack([bank, extra]))
    assert np.all(d_large <= d_small + 1e-15)


def test_empty_bank_rejected(rng):
    with pytest.raises(ArgumentError):
        nearest_rows(rng.randn(3, 4), np.empty((0, 4)))


def test_width_mismatch_rejected(rng):
    with pytest.raises(ArgumentError):
        nearest_rows(rng.randn(3, 4), rng.randn(5, 3))


def test_backends_agree(rng):
    query = rng.randn(23, 8)
    bank = rng.randn(31, 8)
    idx_active, d_active = nearest_rows(query, bank)
    idx_np, d_np = _nearest_rows_numpy(
        np.ascontiguousarray(query, dtype=np.float64), np.ascontiguousarray(bank, dtype=np.float64)
    )
    assert np.array_equal(idx_active, idx_np)
    assert np.max(np.abs(d_active - d_np)) < 1e-12


def test_kernel_backend_reported():
    assert KERNEL_BACKEND in ("compiled", "numpy")
