"""Dressed band, narrowing identities, spectral velocities, thermal averages."""

import math

import numpy as np
import pytest

from polaron1d import ModelParams, bare_transfer, make_grid
from polaron1d.band import (
    PolaronBand,
    band,
    band_of,
    group_velocity,
    renormalized_transfer,
    thermal_avg,
)
from polaron1d.scf import solve


def test_transfer_reduces_to_bare_without_coupling():
    grid = make_grid(8)
    p = ModelParams(n_sites=8, transfer=0.1)
    A = np.zeros((8, 8), dtype=complex)
    jt = renormalized_transfer(A, np.ones(8), p, grid)
    np.testing.assert_allclose(jt, bare_transfer(grid, p), atol=1e-14)
    b = band(p, A, np.ones(8), grid)
    assert b.bandwidth == pytest.approx(0.4, abs=1e-14)
    np.testing.assert_allclose(b.energies, bare_transfer(grid, p), atol=1e-14)


@pytest.mark.parametrize("n_sites,g2", [(6, 0.1), (6, 0.5), (8, 0.3)])
def test_zero_temperature_narrowing_identity(n_sites, g2):
    # constant A = g at T = 0: Jt_k = exp(-g^2) J_k to 1e-10 (the rank-one part
    # of exp(E^0) is annihilated because sum_k J_k = 0); binding shift -g^2 uniform
    grid = make_grid(n_sites)
    p = ModelParams(n_sites=n_sites, transfer=0.1, g=math.sqrt(g2), temperature=0.0)
    sol = solve(p)
    jt = renormalized_transfer(sol.A, sol.theta, p, grid)
    np.testing.assert_allclose(jt, math.exp(-g2) * bare_transfer(grid, p), atol=1e-10)
    b = band_of(sol)
    np.testing.assert_allclose(
        b.energies, -g2 + math.exp(-g2) * bare_transfer(grid, p), atol=1e-10)
    assert b.bandwidth == pytest.approx(0.4 * math.exp(-g2), abs=1e-10)


def test_narrowing_with_nonlocal_coupling_at_high_T():
    p = ModelParams(n_sites=32, transfer=0.1, g=math.sqrt(0.1),
                    phi=math.sqrt(0.3), temperature=4.0)
    sol = solve(p)
    jt = renormalized_transfer(sol.A, sol.theta, p, sol.grid)
    assert np.abs(jt).max() < np.abs(bare_transfer(sol.grid, p)).max()


def test_band_parity_and_bimodal_structure():
    p = ModelParams(n_sites=32, transfer=0.1, g=math.sqrt(0.1),
                    phi=math.sqrt(0.3), temperature=1.0)
    sol = solve(p)
    b = band_of(sol)
    g_ = sol.grid
    for ki in range(32):
        assert b.energies[ki] == pytest.approx(b.energies[g_.neg(ki)], abs=1e-9)
    # interior extrema: the velocity changes sign more often than a pure cosine
    v = b.velocities
    signs = np.sign(v[np.abs(v) > 1e-12])
    changes = int(np.count_nonzero(signs != np.roll(signs, 1)))
    assert changes > 2


def test_group_velocity_exact_modes():
    grid = make_grid(16)
    k = grid.points
    np.testing.assert_allclose(
        group_velocity(0.2 * np.cos(k), grid), -0.2 * np.sin(k), atol=1e-14)
    np.testing.assert_allclose(group_velocity(np.full(16, 1.3), grid), 0.0, atol=1e-14)
    rng = np.random.default_rng(7)
    # random even band: sum of cosine harmonics with random weights
    weights = rng.standard_normal(5)
    e = sum(w * np.cos((j + 1) * k) for j, w in enumerate(weights))
    v = group_velocity(e, grid)
    for ki in range(16):
        assert v[ki] == pytest.approx(-v[grid.neg(ki)], abs=1e-12)
    assert v[grid.zero] == pytest.approx(0.0, abs=1e-12)
    assert v[0] == pytest.approx(0.0, abs=1e-12)  # k = -pi for even grid


def test_group_velocity_vs_central_differences_order():
    # on a non-band-limited analytic band the spectral derivative converges much
    # faster; the mismatch with central differences shrinks as O(h^2)
    def analytic(k):
        return np.exp(np.cos(k))

    errs = []
    for n in (16, 32, 64):
        grid = make_grid(n)
        e = analytic(grid.points)
        spec = group_velocity(e, grid)
        central = (np.roll(e, -1) - np.roll(e, 1)) / (2 * (2 * math.pi / n))
        errs.append(np.abs(spec - central).max())
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.35)
    assert errs[1] / errs[2] == pytest.approx(4.0, rel=0.35)


def test_thermal_avg():
    b = PolaronBand(energies=np.array([0.0, 1.0]), velocities=np.zeros(2), bandwidth=1.0)
    assert thermal_avg(np.array([3.3, 3.3]), b, 0.7) == pytest.approx(3.3)
    assert thermal_avg(np.array([0.0, 1.0]), b, 1.0) == pytest.approx(
        math.exp(-1) / (1 + math.exp(-1)), rel=1e-12)
    assert thermal_avg(np.array([0.0, 1.0]), b, 1e9) == pytest.approx(0.5, rel=1e-6)
    # T = 0 picks the (degenerate) minima
    b2 = PolaronBand(energies=np.array([0.0, 1.0, 0.0]), velocities=np.zeros(3), bandwidth=1.0)
    assert thermal_avg(np.array([2.0, 5.0, 4.0]), b2, 0.0) == pytest.approx(3.0)
