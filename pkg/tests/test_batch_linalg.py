import numpy as np

from gbp_ba.batch_linalg import cholesky_masked, solve_cholesky, solve_spd_masked


def random_spd_stack(rng, n, d, cond=100.0):
    mats = np.empty((n, d, d))
    for i in range(n):
        q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        mats[i] = q @ np.diag(np.linspace(1.0, cond, d)) @ q.T
    return mats


def test_matches_numpy_solve():
    rng = np.random.default_rng(0)
    for d in (1, 3, 6):
        mats = random_spd_stack(rng, 50, d)
        rhs = rng.normal(size=(50, d, 4))
        x, ok = solve_spd_masked(mats, rhs)
        assert ok.all()
        np.testing.assert_allclose(x, np.linalg.solve(mats, rhs), rtol=1e-9, atol=1e-11)


def test_masks_singular_members():
    rng = np.random.default_rng(1)
    mats = random_spd_stack(rng, 10, 3)
    mats[4] = 0.0
    v = rng.normal(size=3)
    mats[7] = np.outer(v, v)  # rank 1
    rhs = rng.normal(size=(10, 3, 1))
    x, ok = solve_spd_masked(mats, rhs)
    assert not ok[4] and not ok[7]
    assert ok.sum() == 8
    good = np.flatnonzero(ok)
    np.testing.assert_allclose(x[good], np.linalg.solve(mats[good], rhs[good]), rtol=1e-9)
    assert np.all(np.isfinite(x))  # masked rows still finite garbage, not inf/nan


def test_masks_indefinite_members():
    rng = np.random.default_rng(2)
    mats = random_spd_stack(rng, 5, 3)
    mats[2] = np.diag([1.0, -1.0, 1.0])
    _, ok = cholesky_masked(mats)
    assert not ok[2] and ok.sum() == 4


def test_factor_reconstructs():
    rng = np.random.default_rng(3)
    mats = random_spd_stack(rng, 20, 6)
    lower, ok = cholesky_masked(mats)
    assert ok.all()
    np.testing.assert_allclose(lower @ np.swapaxes(lower, 1, 2), mats, rtol=1e-10, atol=1e-12)


def test_solve_cholesky_identity():
    rng = np.random.default_rng(4)
    mats = random_spd_stack(rng, 8, 4)
    lower, _ = cholesky_masked(mats)
    eye = np.broadcast_to(np.eye(4), (8, 4, 4)).copy()
    inv = solve_cholesky(lower, eye)
    np.testing.assert_allclose(mats @ inv, eye, atol=1e-9)


def test_chunk_invariance_bitwise():
    # solving a sub-stack must give bitwise identical results to the full stack
    rng = np.random.default_rng(5)
    mats = random_spd_stack(rng, 64, 6)
    rhs = rng.normal(size=(64, 6, 7))
    full, _ = solve_spd_masked(mats, rhs)
    for sl in (slice(0, 16), slice(16, 64), slice(3, 5)):
        part, _ = solve_spd_masked(mats[sl], rhs[sl])
        np.testing.assert_array_equal(part, full[sl])
