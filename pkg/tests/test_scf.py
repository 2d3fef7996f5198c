"""Self-consistency machinery: dressing exponents, narrowing factors,
fixed-point solver, scaling-field extraction."""

import math

import numpy as np
import pytest

from polaron1d import (
    InvalidParameter,
    ModelParams,
    NotConverged,
    NumericalBreakdown,
    UndefinedField,
    bose_factor,
    coupling_matrix,
    make_grid,
)
from polaron1d.propagators import gaussian_decay, p_factor, phonon_propagators
from polaron1d.scf import (
    TriadicE,
    build_E,
    extract_scaling,
    matrix_exp,
    solve,
    theta_avg,
    update_A,
)

RNG = np.random.default_rng(20260815)


def expm_taylor(M):
    """Independent scaled Taylor-series reference for the matrix exponential."""
    M = np.asarray(M, dtype=np.complex128)
    nrm = np.linalg.norm(M, np.inf)
    s = 0
    while nrm / (2 ** s) > 0.5:
        s += 1
    X = M / (2 ** s)
    out = np.eye(len(M), dtype=np.complex128)
    term = np.eye(len(M), dtype=np.complex128)
    for j in range(1, 80):
        term = term @ X / j
        out = out + term
        if np.abs(term).max() < 1e-22 * max(np.abs(out).max(), 1.0):
            break
    for _ in range(s):
        out = out @ out
    return out


# ---------------------------------------------------------------- propagators


def test_p_factor_values():
    p = ModelParams(n_sites=6, temperature=1.0, delta=0.1)
    n = bose_factor(1.0, 1.0)
    assert p_factor(1.0, 0.0, p) == pytest.approx((2 * n + 1) / 6, rel=1e-14)
    # T = 0: pure phase times Gaussian
    p0 = ModelParams(n_sites=4, temperature=0.0, delta=0.2)
    t = 1.7
    expect = np.exp(1j * t) * math.exp(-0.25 * (0.2 * t) ** 2) / 4
    assert p_factor(0.0, t, p0) == pytest.approx(expect, rel=1e-14)
    # Gaussian bound at the integration horizon
    th = 10.0 / p.delta
    assert abs(p_factor(1.0, th, p)) <= (2 * n + 1) / 6 * math.exp(-25.0) * (1 + 1e-12)


def test_phonon_propagators_relations():
    p = ModelParams(n_sites=6, temperature=2.0, delta=0.1)
    n = bose_factor(2.0, 1.0)
    for t in (0.0, 0.3, 2.7):
        pr = phonon_propagators(2.0, t, p)
        g = gaussian_decay(t, 0.1)
        assert pr.psi_up == pytest.approx(-pr.psi_down, rel=1e-14)
        assert pr.psi_down == pytest.approx(
            (n * np.exp(-1j * t) - (n + 1) * np.exp(1j * t)) * g, rel=1e-13)
        assert pr.psi_psi == pytest.approx(
            ((n + 1) * np.exp(1j * t) + n * np.exp(-1j * t)) * g, rel=1e-13)
    # all four decay to <= 1e-10 of the t=0 magnitude by t = 10/delta
    t0 = phonon_propagators(2.0, 0.0, p)
    th = phonon_propagators(2.0, 10.0 / p.delta, p)
    for name in ("p_factor", "psi_down", "psi_up", "psi_psi"):
        assert abs(getattr(th, name)) <= 1e-10 * abs(getattr(t0, name))


# -------------------------------------------------------------------- build_E


def test_build_E_zero_coupling():
    grid = make_grid(6)
    p = ModelParams(n_sites=6, temperature=1.0)
    E = build_E(np.zeros((6, 6), dtype=complex), grid, p)
    assert np.all(E.values == 0)


@pytest.mark.parametrize("n_sites", [4, 6, 8])
def test_build_E_constant_diagonal_amplitude(n_sites):
    # A = g everywhere: every static entry equals (2n+1) g^2 / N
    g2, T = 0.1, 1.0
    grid = make_grid(n_sites)
    p = ModelParams(n_sites=n_sites, g=math.sqrt(g2), temperature=T)
    E = build_E(np.full((n_sites, n_sites), p.g, dtype=complex), grid, p)
    n = bose_factor(T, 1.0)
    np.testing.assert_allclose(E.values, (2 * n + 1) * g2 / n_sites, atol=1e-14)


def test_build_E_literal_indexing():
    # entry-by-entry against the defining bilinear, on a random amplitude field
    n = 5
    grid = make_grid(n)
    p = ModelParams(n_sites=n, temperature=0.7, delta=0.1)
    A = RNG.standard_normal((n, n)) + 1j * RNG.standard_normal((n, n))
    t = 0.9
    E = build_E(A, grid, p, t=t)
    pf = p_factor(p.temperature, t, p)
    for qi in range(n):
        for ki in range(n):
            for kpi in range(n):
                d = grid.sub(ki, kpi)
                expect = pf * np.conj(A[grid.sub(ki, qi), d]) * A[ki, d]
                assert E.values[qi, ki, kpi] == pytest.approx(expect, rel=1e-13)


def test_build_E_t0_matches_static_and_decays():
    grid = make_grid(6)
    p = ModelParams(n_sites=6, g=0.5, phi=0.3, temperature=1.0, delta=0.1)
    A = coupling_matrix(grid, p)
    E_static = build_E(A, grid, p)
    E_t0 = build_E(A, grid, p, t=0.0)
    np.testing.assert_allclose(E_static.values, E_t0.values, atol=1e-15)
    # q = 0 static slice is real nonnegative
    q0 = E_static.values[grid.zero]
    assert np.abs(q0.imag).max() < 1e-15
    assert q0.real.min() >= 0.0
    E_far = build_E(A, grid, p, t=10.0 / p.delta * 3)
    assert np.abs(E_far.values).max() < 1e-30


# ------------------------------------------------------------------ theta_avg


def test_theta_avg_identity_and_frozen_diagonal_value():
    grid = make_grid(6)
    p = ModelParams(n_sites=6, temperature=1.0)
    E = build_E(np.zeros((6, 6), dtype=complex), grid, p)
    np.testing.assert_allclose(theta_avg(E), np.ones(6), atol=1e-15)
    # constant A = g, T = 0, g^2 = 0.1: <theta> = exp(-0.05), independent of N
    for n_sites in (4, 6, 9):
        g = math.sqrt(0.1)
        gr = make_grid(n_sites)
        pp = ModelParams(n_sites=n_sites, g=g, temperature=0.0)
        E0 = build_E(np.full((n_sites, n_sites), g, dtype=complex), gr, pp)
        np.testing.assert_allclose(theta_avg(E0), math.exp(-0.05), atol=1e-14)


# ----------------------------------------------------------------- matrix_exp


def test_matrix_exp_vs_taylor_reference():
    for n, target in ((6, 0.5), (8, 5.0), (12, 18.0)):
        M = RNG.standard_normal((n, n)) + 1j * RNG.standard_normal((n, n))
        M *= target / np.linalg.norm(M, np.inf)
        assert np.linalg.norm(M, np.inf) <= 20
        ref = expm_taylor(M)
        got = matrix_exp(M)
        assert np.abs(got - ref).max() / np.abs(ref).max() < 1e-12


def test_matrix_exp_guards():
    with pytest.raises(NumericalBreakdown):
        matrix_exp(np.array([[np.nan, 0.0], [0.0, 1.0]]))


# ------------------------------------------------------------------- update_A


def test_update_identity_collapse():
    grid = make_grid(6)
    theta = np.ones(6)
    E = TriadicE(values=np.zeros((6, 6, 6), dtype=complex))
    p_diag = ModelParams(n_sites=6, g=0.4, phi=0.0)
    np.testing.assert_allclose(update_A(p_diag, grid, E, theta), 0.4 * np.ones((6, 6)), atol=1e-15)
    p_full = ModelParams(n_sites=6, g=0.4, phi=0.6)
    np.testing.assert_allclose(
        update_A(p_full, grid, E, theta), coupling_matrix(grid, p_full), atol=1e-15)


def test_update_matches_direct_summation():
    # one update step cross-checked against explicit loops with the Taylor expm
    n = 5
    grid = make_grid(n)
    p = ModelParams(n_sites=n, g=math.sqrt(0.1), phi=math.sqrt(0.3), temperature=1.0)
    A = coupling_matrix(grid, p)
    E = build_E(A, grid, p)
    theta = theta_avg(E)
    got = update_A(p, grid, E, theta)
    f = coupling_matrix(grid, p)
    for ki in range(n):
        for qi in range(n):
            M = expm_taylor(E.values[qi])
            acc = 0.0 + 0.0j
            for kpi in range(n):
                acc += f[kpi, qi] * M[ki, kpi]
            expect = theta[grid.sub(ki, qi)] * theta[ki] * acc
            assert got[ki, qi] == pytest.approx(expect, rel=1e-12, abs=1e-14)


def test_update_from_flat_start_acquires_k_structure():
    grid = make_grid(8)
    p = ModelParams(n_sites=8, g=math.sqrt(0.1), phi=math.sqrt(0.3),
                    transfer=0.1, temperature=1.0)
    A = coupling_matrix(grid, p)  # scalar-scaling surrogate (xi = eta = 1)
    E = build_E(A, grid, p)
    A1 = update_A(p, grid, E, theta_avg(E))
    qi = 1  # some q != 0
    assert np.ptp(np.abs(A1[:, qi])) > 1e-6


# ---------------------------------------------------------------------- solve


def test_solve_zero_coupling():
    sol = solve(ModelParams(n_sites=6, temperature=1.0))
    assert sol.report.iterations == 1
    assert sol.report.final_residual == 0.0
    np.testing.assert_allclose(sol.A, 0.0, atol=1e-15)
    np.testing.assert_allclose(sol.theta, 1.0, atol=1e-15)


def test_solve_diagonal_limit_is_exact_fixed_point():
    # phi = 0: A = g solves the equations exactly (flat field, one iteration)
    g = math.sqrt(0.5)
    sol = solve(ModelParams(n_sites=6, g=g, temperature=1.0))
    assert sol.report.iterations == 1
    np.testing.assert_allclose(sol.A, g, atol=1e-12)
    assert np.abs(sol.A.imag).max() < 1e-14  # realness preserved when f real
    n = bose_factor(1.0, 1.0)
    np.testing.assert_allclose(sol.theta, math.exp(-0.5 * (2 * n + 1) * 0.5), rtol=1e-12)


@pytest.mark.parametrize("g2,phi2,T", [(0.1, 0.3, 1.0), (0.5, 0.3, 2.0), (0.1, 0.3, 0.5)])
def test_solve_general_coupling(g2, phi2, T):
    p = ModelParams(n_sites=6, g=math.sqrt(g2), phi=math.sqrt(phi2),
                    transfer=0.1, temperature=T)
    sol = solve(p)
    assert sol.report.converged
    # back-substitution: the returned field is a fixed point of the update map
    E = build_E(sol.A, sol.grid, p)
    resid = np.abs(update_A(p, sol.grid, E, theta_avg(E)) - sol.A).max()
    assert resid < 1e-10
    # symmetry A_k^q = conj(A_{k-q}^{-q})
    g_ = sol.grid
    worst = max(
        abs(sol.A[ki, qi] - np.conj(sol.A[g_.sub(ki, qi), g_.neg(qi)]))
        for ki in range(6) for qi in range(6))
    assert worst < 1e-9
    # inversion property A_{-k}^{-q} = conj(A_k^q)
    worst_inv = max(
        abs(sol.A[g_.neg(ki), g_.neg(qi)] - np.conj(sol.A[ki, qi]))
        for ki in range(6) for qi in range(6))
    assert worst_inv < 1e-9
    assert np.all(sol.theta > 0) and np.all(sol.theta <= 1 + 1e-12)


def test_solve_deterministic():
    p = ModelParams(n_sites=6, g=math.sqrt(0.1), phi=math.sqrt(0.3), temperature=1.0)
    s1 = solve(p)
    s2 = solve(p)
    assert np.array_equal(s1.A, s2.A)
    assert s1.report.iterations == s2.report.iterations


def test_solve_not_converged_carries_report():
    p = ModelParams(n_sites=6, g=math.sqrt(0.1), phi=math.sqrt(0.3), temperature=1.0)
    with pytest.raises(NotConverged) as exc:
        solve(p, max_iters=2)
    assert exc.value.report is not None
    assert exc.value.report.iterations == 2
    assert not exc.value.report.converged


def test_solve_guard_trips_on_huge_coupling():
    with pytest.raises(NumericalBreakdown):
        solve(ModelParams(n_sites=6, g=10.0, temperature=1.0))


def test_solve_rejects_bad_init_shape():
    with pytest.raises(InvalidParameter):
        solve(ModelParams(n_sites=6), init=np.zeros((4, 4)))


# ------------------------------------------------------------ extract_scaling


def test_extract_scaling_definitional_inverse():
    grid = make_grid(8)
    p = ModelParams(n_sites=8, g=0.4, phi=0.5)
    fields = extract_scaling(coupling_matrix(grid, p), p, grid)
    np.testing.assert_allclose(fields.xi, 1.0, atol=1e-12)
    np.testing.assert_allclose(fields.eta, 1.0, atol=1e-9)  # incl. filled lines
    assert np.all(np.isfinite(fields.eta))


def test_extract_scaling_undefined_components():
    grid = make_grid(6)
    p = ModelParams(n_sites=6, g=0.0, phi=0.5)
    fields = extract_scaling(coupling_matrix(grid, p), p, grid)
    with pytest.raises(UndefinedField):
        fields.xi
    _ = fields.eta
    p2 = ModelParams(n_sites=6, g=0.5, phi=0.0)
    fields2 = extract_scaling(coupling_matrix(grid, p2), p2, grid)
    with pytest.raises(UndefinedField):
        fields2.eta
    np.testing.assert_allclose(fields2.xi, 1.0, atol=1e-12)


def test_extract_scaling_symmetry_on_converged_solution():
    p = ModelParams(n_sites=6, g=math.sqrt(0.1), phi=math.sqrt(0.3),
                    transfer=0.1, temperature=1.0)
    sol = solve(p)
    g_ = sol.grid
    xi, eta = sol.scaling.xi, sol.scaling.eta
    k = g_.points[:, None]
    q = g_.points[None, :]
    regular = np.abs(2.0 * np.cos(k - q / 2.0) * np.sin(q / 2.0)) >= 1e-9
    for ki in range(6):
        for qi in range(6):
            ks, qs = g_.sub(ki, qi), g_.neg(qi)
            assert xi[ki, qi] == pytest.approx(xi[ks, qs], abs=1e-9)
            if regular[ki, qi] and regular[ks, qs]:
                assert eta[ki, qi] == pytest.approx(eta[ks, qs], abs=1e-9)
    # imaginary part of A vanishes identically when phi = 0
    sol_d = solve(p.with_(phi=0.0))
    assert np.abs(sol_d.A.imag).max() < 1e-12
