"""Polaron band structure derived from a converged dressing field.

The dressed dispersion is

    e_k = epsilon + Jt_k - (1/N) sum_q |A_k^q|^2 omega

with the thermally renormalized transfer

    Jt_k = <theta_k>^2 sum_{k'} [exp(E^0)]_{kk'} J_{k'} .
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameter
from .lattice import ModelParams, MomentumGrid, bare_transfer
from .scf import SCFSolution, TriadicE, build_E, matrix_exp, theta_avg


@dataclass(frozen=True)
class PolaronBand:
    """Dressed dispersion on the zone grid."""

    energies: np.ndarray   # (N,) real
    velocities: np.ndarray  # (N,) real, spectral d(energy)/dk
    bandwidth: float

    @property
    def minimum(self) -> float:
        return float(self.energies.min())


def renormalized_transfer(A: np.ndarray, theta: np.ndarray, p: ModelParams,
                          grid: MomentumGrid, E0: TriadicE | None = None) -> np.ndarray:
    """Thermally averaged transfer Jt_k; equals the bare J_k when A = 0."""
    if E0 is None:
        E0 = build_E(A, grid, p, t=0.0)
    jk = bare_transfer(grid, p)
    M = matrix_exp(E0.values[grid.zero])
    jt = (theta ** 2) * (M @ jk)
    if np.abs(np.asarray(jt).imag).max(initial=0.0) > 1e-10:
        raise InvalidParameter("renormalized transfer acquired an imaginary part")
    return np.asarray(jt).real


def band(p: ModelParams, A: np.ndarray, theta: np.ndarray, grid: MomentumGrid,
         E0: TriadicE | None = None) -> PolaronBand:
    """Dressed band energies, spectral group velocities and the bandwidth."""
    jt = renormalized_transfer(A, theta, p, grid, E0=E0)
    binding = (np.abs(np.asarray(A)) ** 2).sum(axis=1) * p.omega / grid.n
    energies = p.epsilon + jt - binding
    vel = group_velocity(energies, grid)
    return PolaronBand(
        energies=energies,
        velocities=vel,
        bandwidth=float(energies.max() - energies.min()),
    )


def band_of(sol: SCFSolution) -> PolaronBand:
    """Convenience: band from a solver solution."""
    return band(sol.params, sol.A, sol.theta, sol.grid, E0=sol.E0)


def group_velocity(energies: np.ndarray, grid: MomentumGrid) -> np.ndarray:
    """Spectral derivative d(energy)/dk of a band sampled on the zone grid.

    Exact for any band resolvable in the grid's Fourier basis; the Nyquist
    mode (even N) carries no odd derivative and is dropped.
    """
    e = np.asarray(energies, dtype=np.float64)
    if e.shape != (grid.n,):
        raise InvalidParameter(f"energies must have shape {(grid.n,)}")
    n = grid.n
    # reorder from the sorted zone to FFT ordering (k = 2*pi*j/n, j = 0..n-1)
    fft_order = np.argsort(np.mod(grid.m, n))
    inv = np.argsort(fft_order)
    coeff = np.fft.fft(e[fft_order])
    freqs = np.fft.fftfreq(n, d=1.0 / n)  # integer harmonics
    if n % 2 == 0:
        freqs[n // 2] = 0.0
    dcoeff = 1j * freqs * coeff
    deriv = np.fft.ifft(dcoeff).real
    return deriv[inv]


def thermal_avg(values: np.ndarray, band_: PolaronBand, temperature: float) -> float:
    """Boltzmann average of ``values`` over the dressed band.

    At T = 0 the average runs over the degenerate band minima only.
    """
    values = np.asarray(values, dtype=np.float64)
    e = band_.energies
    if temperature < 0:
        raise InvalidParameter("temperature must be >= 0")
    if temperature == 0.0:
        at_min = np.abs(e - e.min()) < 1e-12
        return float(values[at_min].mean())
    w = np.exp(-(e - e.min()) / temperature)
    return float((values * w).sum() / w.sum())
