"""Tests for lazy transfer matrices and eigenvalue tooling."""

import itertools

import numpy as np
import pytest

from syncmodal.lti import (
    DefectiveMatrix,
    DimensionMismatch,
    SingularAtS,
    TransferMatrix,
    eig_loci,
    eig_lr,
)

TM = TransferMatrix


# ---------------------------------------------------------------------------
# element evaluation
# ---------------------------------------------------------------------------

def test_pi_element_at_j():
    h = TM.pi_element(1.0, 1.0)
    assert h.eval(1j)[0, 0] == pytest.approx(1.0 - 1.0j)


def test_delay_is_unity_at_zero_delay():
    d = TM.delay(0.0)
    for s in (0.3 + 1j, -2.0, 5j):
        assert d.eval(s)[0, 0] == pytest.approx(1.0)


def test_delay_phase_and_magnitude():
    t = 2.5e-4
    d = TM.delay(t)
    w = 2 * np.pi * 120.0
    v = d.eval(1j * w)[0, 0]
    assert abs(v) == pytest.approx(1.0, abs=1e-14)
    assert np.angle(v) == pytest.approx(-((w * t + np.pi) % (2 * np.pi) - np.pi))


def test_constant_matrix_is_frequency_independent():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    c = TM.constant(m)
    for s in (0.0, 1j, -3.0 + 2j):
        np.testing.assert_allclose(c.eval(s), m)


def test_integrator_and_rational():
    integ = TM.integrator()
    assert integ.eval(2j)[0, 0] == pytest.approx(-0.5j)
    # (s + 3) / (s**2 + 2)
    h = TM.rational([1.0, 3.0], [1.0, 0.0, 2.0])
    s = 1.0 + 1.0j
    expect = (s + 3) / (s * s + 2)
    assert h.eval(s)[0, 0] == pytest.approx(expect)


def test_rational_pole_raises_singular():
    h = TM.integrator()
    with pytest.raises(SingularAtS):
        h.eval(0.0)


# ---------------------------------------------------------------------------
# composition algebra against direct numpy evaluation
# ---------------------------------------------------------------------------

def _random_const(rng, rows, cols):
    return rng.standard_normal((rows, cols)) + 1j * rng.standard_normal((rows, cols))


def test_composition_matches_direct_numpy():
    rng = np.random.default_rng(7)
    a_mat = _random_const(rng, 2, 2)
    b_mat = _random_const(rng, 2, 2)
    c_mat = _random_const(rng, 2, 3)
    a, b, c = TM.constant(a_mat), TM.constant(b_mat), TM.constant(c_mat)
    integ = TM.integrator()
    expr = ((a + 2.0 * b) @ c) * integ
    big = TM.block_diag([a @ b, expr])
    stack = TM.vstack([TM.hstack([a, b]), TM.hstack([b, a])])
    for _ in range(100):
        s = rng.standard_normal() + 1j * rng.standard_normal()
        if s == 0:
            continue
        direct = ((a_mat + 2.0 * b_mat) @ c_mat) * (1.0 / s)
        np.testing.assert_allclose(expr.eval(s), direct, rtol=1e-12)
        top = np.zeros((2 + 2, 2 + 3), dtype=complex)
        top[:2, :2] = a_mat @ b_mat
        top[2:, 2:] = direct
        np.testing.assert_allclose(big.eval(s), top, rtol=1e-12)
        np.testing.assert_allclose(
            stack.eval(s), np.block([[a_mat, b_mat], [b_mat, a_mat]]), rtol=1e-12)


def test_inverse_matches_numpy_and_roundtrips():
    rng = np.random.default_rng(11)
    m_mat = _random_const(rng, 3, 3) + 3.0 * np.eye(3)
    m = TM.constant(m_mat)
    minv = m.inv()
    s = 0.5j
    np.testing.assert_allclose(minv.eval(s), np.linalg.inv(m_mat), rtol=1e-12)
    np.testing.assert_allclose((m @ minv).eval(s), np.eye(3), atol=1e-12)


def test_submatrix_selects_entries():
    rng = np.random.default_rng(3)
    m_mat = _random_const(rng, 4, 4)
    m = TM.constant(m_mat)
    sub = m.submatrix([0, 2], [1, 3])
    np.testing.assert_allclose(sub.eval(1j), m_mat[np.ix_([0, 2], [1, 3])])


def test_eval_is_pure():
    m = TM.constant(np.eye(2))
    out = m.eval(1j)
    out[0, 0] = 99.0
    np.testing.assert_allclose(m.eval(1j), np.eye(2))


# ---------------------------------------------------------------------------
# construction-time dimension checks
# ---------------------------------------------------------------------------

def test_dimension_mismatch_on_add():
    with pytest.raises(DimensionMismatch):
        TM.zeros(2, 2) + TM.zeros(2, 3)


def test_dimension_mismatch_on_matmul():
    with pytest.raises(DimensionMismatch):
        TM.zeros(2, 3) @ TM.zeros(2, 3)


def test_dimension_mismatch_on_stack():
    with pytest.raises(DimensionMismatch):
        TM.hstack([TM.zeros(2, 1), TM.zeros(3, 1)])
    with pytest.raises(DimensionMismatch):
        TM.vstack([TM.zeros(1, 2), TM.zeros(1, 3)])


def test_dimension_mismatch_on_nonsquare_inverse():
    with pytest.raises(DimensionMismatch):
        TM.zeros(2, 3).inv()


def test_scalar_scaling_requires_1x1():
    with pytest.raises(DimensionMismatch):
        TM.zeros(2, 2) * TM.zeros(2, 2)


# ---------------------------------------------------------------------------
# singular / ill-conditioned inversion
# ---------------------------------------------------------------------------

def test_singular_inverse_raises_with_location():
    m = TM.constant([[1.0, 1.0], [1.0, 1.0]]).inv()
    with pytest.raises(SingularAtS) as exc:
        m.eval(0.25j)
    assert exc.value.s == 0.25j
    assert exc.value.cond > 1e12 or not np.isfinite(exc.value.cond)


def test_cond_cap_is_configurable():
    mat = np.diag([1.0, 1e-6])
    assert np.allclose(TM.constant(mat).inv().eval(1j), np.linalg.inv(mat))
    with pytest.raises(SingularAtS):
        TM.constant(mat).inv(cond_cap=1e3).eval(1j)


# ---------------------------------------------------------------------------
# eig_lr
# ---------------------------------------------------------------------------

def test_eig_lr_identity():
    lam, r, t = eig_lr(np.eye(3))
    np.testing.assert_allclose(sorted(lam.real), [1, 1, 1], atol=1e-12)
    np.testing.assert_allclose(t @ r, np.eye(3), atol=1e-12)


def test_eig_lr_diagonal():
    lam, r, t = eig_lr(np.diag([2.0, 5.0]))
    assert sorted(lam.real) == pytest.approx([2.0, 5.0])
    np.testing.assert_allclose(t @ r, np.eye(2), atol=1e-12)


def test_eig_lr_reconstructs_random_matrix():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    lam, r, t = eig_lr(a)
    np.testing.assert_allclose(r @ np.diag(lam) @ t, a, atol=1e-10)
    np.testing.assert_allclose(t @ r, np.eye(8), atol=1e-8)
    # columns of r and rows of t are right/left eigenvectors
    for k in range(8):
        np.testing.assert_allclose(a @ r[:, k], lam[k] * r[:, k], atol=1e-9)
        np.testing.assert_allclose(t[k] @ a, lam[k] * t[k], atol=1e-9)


def test_eig_lr_jordan_block_is_defective():
    with pytest.raises(DefectiveMatrix):
        eig_lr(np.array([[1.0, 1.0], [0.0, 1.0]]))


def test_eig_lr_rejects_nonsquare():
    with pytest.raises(DimensionMismatch):
        eig_lr(np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# eig_loci
# ---------------------------------------------------------------------------

def _diag_family():
    # diag(1/(s+1), 2/(s+1)): ordered magnitudes, traces must never swap
    g1 = TM.rational([1.0], [1.0, 1.0])
    g2 = TM.rational([2.0], [1.0, 1.0])
    return TM.block_diag([g1, g2])


def test_eig_loci_no_swap_on_separated_traces():
    freqs = np.linspace(0.01, 10.0, 80)
    loci = eig_loci(_diag_family(), freqs)
    s_vals = 2j * np.pi * freqs
    base = 1.0 / (s_vals + 1.0)
    # traces are ordered at the first point by (real, imag); identify by value
    first = loci.values[0]
    scale = np.array([1.0, 2.0]) if abs(first[0] - base[0]) < abs(first[0] - 2 * base[0]) \
        else np.array([2.0, 1.0])
    np.testing.assert_allclose(loci.values, np.outer(base, scale), rtol=1e-10)


def _brute_force_loci(m, freqs):
    """Independent oracle: exhaustive minimal-displacement matching."""
    n = m.rows
    out = np.empty((len(freqs), n), dtype=complex)
    w = np.linalg.eigvals(m.eval(2j * np.pi * freqs[0]))
    w = w[np.lexsort((w.imag, w.real))]
    out[0] = w
    for p in range(1, len(freqs)):
        w_next = np.linalg.eigvals(m.eval(2j * np.pi * freqs[p]))
        best, best_cost = None, np.inf
        for perm in itertools.permutations(range(n)):
            cost = np.sum(np.abs(out[p - 1] - w_next[list(perm)]))
            if cost < best_cost:
                best, best_cost = list(perm), cost
        out[p] = w_next[best]
    return out


def test_eig_loci_crossing_family_matches_brute_force():
    # diag(s, 1-s): eigenvalues pass close to each other mid-sweep
    s_elem = TM.rational([1.0, 0.0], [1.0])
    one_minus_s = TM.rational([-1.0, 1.0], [1.0])
    m = TM.block_diag([s_elem, one_minus_s])
    freqs = np.linspace(0.0, 1.0, 51)
    loci = eig_loci(m, freqs)
    oracle = _brute_force_loci(m, freqs)
    np.testing.assert_allclose(loci.values, oracle, atol=1e-12)


def test_eig_loci_matches_brute_force_on_random_smooth_families():
    # with bisection refinement off, each step must pick exactly the
    # exhaustive minimal-displacement assignment over all 3! permutations
    rng = np.random.default_rng(23)
    for _ in range(5):
        a0 = _random_const(rng, 3, 3)
        a1 = 0.3 * _random_const(rng, 3, 3)
        m = TM.constant(a0) + TM.constant(a1) * TM.rational([1.0, 0.0], [1.0, 0.0, 40.0])
        freqs = np.linspace(0.1, 4.0, 120)
        loci = eig_loci(m, freqs, max_bisect=0)
        oracle = _brute_force_loci(m, freqs)
        np.testing.assert_allclose(loci.values, oracle, atol=1e-9)


def test_eig_loci_traces_are_continuous():
    rng = np.random.default_rng(4)
    a0 = _random_const(rng, 4, 4)
    m = TM.constant(a0) * TM.rational([1.0], [1.0 / 50.0, 1.0])
    freqs = np.linspace(0.1, 100.0, 400)
    loci = eig_loci(m, freqs)
    steps = np.abs(np.diff(loci.values, axis=0))
    scale = np.abs(loci.values).max()
    assert steps.max() < 0.2 * scale


def test_eig_loci_attaches_frequency_on_failure():
    # inversion of a singular constant matrix fails at the first grid point
    m = TM.constant([[1.0, 1.0], [1.0, 1.0]]).inv()
    with pytest.raises(SingularAtS) as exc:
        eig_loci(m, [2.0, 3.0])
    assert exc.value.freq_hz == 2.0


def test_eig_loci_rejects_nonsquare_and_empty_grid():
    with pytest.raises(DimensionMismatch):
        eig_loci(TM.zeros(2, 3), [1.0])
    with pytest.raises(DimensionMismatch):
        eig_loci(TM.zeros(2, 2), [])
