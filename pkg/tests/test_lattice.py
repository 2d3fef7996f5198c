"""Grid algebra, bare band, couplings, Bose factors."""

import math

import numpy as np
import pytest

from polaron1d import (
    InvalidParameter,
    ModelParams,
    bare_band,
    bare_transfer,
    bose_factor,
    coupling,
    coupling_matrix,
    make_grid,
)


def test_bose_factor_frozen_values():
    # 2n + 1 = coth(omega / 2T)
    assert 2.0 * bose_factor(1.0, 1.0) + 1.0 == pytest.approx(2.1639534137386583, rel=1e-14)
    assert 2.0 * bose_factor(4.0, 1.0) + 1.0 == pytest.approx(1.0 / math.tanh(0.125), rel=1e-14)
    assert bose_factor(0.0, 1.0) == 0.0
    assert bose_factor(1e-4, 1.0) == pytest.approx(0.0, abs=1e-300)


def test_bose_factor_validation():
    with pytest.raises(InvalidParameter):
        bose_factor(1.0, omega=0.0)
    with pytest.raises(InvalidParameter):
        bose_factor(-0.5, 1.0)


@pytest.mark.parametrize("n", [2, 3, 4, 5, 6, 7, 8, 32])
def test_grid_contains_zero_and_is_sorted(n):
    grid = make_grid(n)
    assert grid.points.shape == (n,)
    assert np.all(np.diff(grid.points) > 0)
    assert grid.points[grid.zero] == 0.0
    assert np.all(grid.points >= -math.pi - 1e-15)
    assert np.all(grid.points < math.pi)
    if n % 2 == 0:
        # even grids follow -pi + 2*pi*j/n exactly
        np.testing.assert_allclose(grid.points, -math.pi + 2 * math.pi * np.arange(n) / n, atol=1e-15)


@pytest.mark.parametrize("n", [3, 4, 6, 7])
def test_grid_modular_tables(n):
    grid = make_grid(n)
    two_pi = 2 * math.pi
    for i in range(n):
        # neg: k_neg = -k_i (mod 2 pi)
        knm = (-grid.points[i] + math.pi) % two_pi - math.pi
        assert grid.points[grid.neg(i)] == pytest.approx(knm, abs=1e-12)
        for j in range(n):
            ks = (grid.points[i] + grid.points[j] + math.pi) % two_pi - math.pi
            kd = (grid.points[i] - grid.points[j] + math.pi) % two_pi - math.pi
            # fold exactly-pi results to -pi to match the open interval
            if ks == math.pi:
                ks = -math.pi
            if kd == math.pi:
                kd = -math.pi
            assert grid.points[grid.add(i, j)] == pytest.approx(ks, abs=1e-12)
            assert grid.points[grid.sub(i, j)] == pytest.approx(kd, abs=1e-12)


def test_grid_index_of():
    grid = make_grid(6)
    for j, k in enumerate(grid.points):
        assert grid.index_of(k) == j
    assert grid.index_of(2 * math.pi / 3 - 2 * math.pi) == grid.index_of(2 * math.pi / 3)
    with pytest.raises(InvalidParameter):
        grid.index_of(0.1)


def test_params_validation():
    with pytest.raises(InvalidParameter):
        ModelParams(n_sites=1)
    with pytest.raises(InvalidParameter):
        ModelParams(n_sites=6, omega=-1.0)
    with pytest.raises(InvalidParameter):
        ModelParams(n_sites=6, temperature=-0.1)
    with pytest.raises(InvalidParameter):
        ModelParams(n_sites=6, delta=-0.1)
    with pytest.raises(InvalidParameter):
        ModelParams(n_sites=6, band_convention="other")
    p = ModelParams(n_sites=6, temperature=1.0)
    assert p.n_bose == pytest.approx(bose_factor(1.0, 1.0))


def test_bare_band_conventions():
    grid = make_grid(8)
    p = ModelParams(n_sites=8, transfer=0.1, epsilon=0.25)
    jk = bare_transfer(grid, p)
    np.testing.assert_allclose(jk, 0.2 * np.cos(grid.points), atol=1e-15)
    np.testing.assert_allclose(bare_band(grid, p), 0.25 + jk, atol=1e-15)
    assert jk.max() - jk.min() == pytest.approx(0.4)  # bare bandwidth 4J
    p2 = p.with_(band_convention="text-jcosk")
    np.testing.assert_allclose(bare_transfer(grid, p2), 0.1 * np.cos(grid.points), atol=1e-15)


def test_coupling_reduces_to_local_at_q0_and_frozen_value():
    p = ModelParams(n_sites=6, g=0.3, phi=0.5)
    grid = make_grid(6)
    f = coupling_matrix(grid, p)
    np.testing.assert_allclose(f[:, grid.zero], 0.3 * np.ones(6), atol=1e-15)
    k = 2 * math.pi / 6
    q = 4 * math.pi / 6
    # sin(pi/3) - sin(-pi/3) = 2 sin(pi/3)
    expect = 0.3 - 1j * 0.5 * (2 * math.sin(math.pi / 3))
    assert coupling(k, q, p) == pytest.approx(expect, abs=1e-15)


def test_coupling_symmetry_f_k_q():
    # f_k^q = conj(f_{k-q}^{-q}) on the grid
    p = ModelParams(n_sites=7, g=0.21, phi=0.47)
    grid = make_grid(7)
    f = coupling_matrix(grid, p)
    for ki in range(7):
        for qi in range(7):
            assert f[ki, qi] == pytest.approx(
                np.conj(f[grid.sub(ki, qi), grid.neg(qi)]), abs=1e-12
            )


def test_coupling_is_pure_local_when_phi_zero():
    p = ModelParams(n_sites=5, g=0.7, phi=0.0)
    grid = make_grid(5)
    f = coupling_matrix(grid, p)
    np.testing.assert_allclose(f, 0.7 * np.ones((5, 5)), atol=1e-15)
