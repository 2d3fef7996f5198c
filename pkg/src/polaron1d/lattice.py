"""Model definition for a 1-D molecular chain with local (diagonal) and
nonlocal (off-diagonal, antisymmetric nearest-neighbour) exciton-phonon
coupling to a dispersionless optical phonon branch.

Units: hbar = k_B = lattice constant = 1; energies in units of the phonon
quantum unless stated otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .errors import InvalidParameter

BAND_CONVENTIONS = ("eq5-literal", "text-jcosk")


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters of the chain.

    Attributes
    ----------
    n_sites : number of sites / momentum points N.
    transfer : bare nearest-neighbour transfer integral J.
    g : local coupling amplitude (dimensionless, g**2 is the usual
        Huang-Rhys-type strength).
    phi : nonlocal coupling amplitude (antisymmetric nearest-neighbour).
    omega : phonon frequency (energy unit, > 0).
    delta : phenomenological phonon dispersion width used for the Gaussian
        decay of phonon correlations (>= 0; must be > 0 for transport).
    temperature : bath temperature T (>= 0).
    epsilon : exciton site energy offset.
    band_convention : "eq5-literal" (J_k = 2 J cos k) or "text-jcosk"
        (J_k = J cos k).
    """

    n_sites: int
    transfer: float = 0.1
    g: float = 0.0
    phi: float = 0.0
    omega: float = 1.0
    delta: float = 0.1
    temperature: float = 1.0
    epsilon: float = 0.0
    band_convention: str = "eq5-literal"

    def __post_init__(self):
        if not isinstance(self.n_sites, (int, np.integer)) or self.n_sites < 2:
            raise InvalidParameter(f"n_sites must be an integer >= 2, got {self.n_sites!r}")
        if self.omega <= 0:
            raise InvalidParameter(f"omega must be positive, got {self.omega}")
        if self.delta < 0:
            raise InvalidParameter(f"delta must be >= 0, got {self.delta}")
        if self.temperature < 0:
            raise InvalidParameter(f"temperature must be >= 0, got {self.temperature}")
        for name in ("transfer", "g", "phi", "omega", "delta", "temperature", "epsilon"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise InvalidParameter(f"{name} must be finite, got {v}")
        if self.band_convention not in BAND_CONVENTIONS:
            raise InvalidParameter(
                f"band_convention must be one of {BAND_CONVENTIONS}, got {self.band_convention!r}"
            )

    def with_(self, **kw) -> "ModelParams":
        """Return a copy with some fields replaced."""
        return replace(self, **kw)

    @property
    def n_bose(self) -> float:
        """Thermal phonon occupation n(omega, T)."""
        return bose_factor(self.temperature, self.omega)


def bose_factor(temperature: float, omega: float = 1.0) -> float:
    """Bose-Einstein occupation n = 1 / (exp(omega/T) - 1); 0 at T = 0."""
    if omega <= 0:
        raise InvalidParameter(f"omega must be positive, got {omega}")
    if temperature < 0:
        raise InvalidParameter(f"temperature must be >= 0, got {temperature}")
    if temperature == 0.0:
        return 0.0
    x = omega / temperature
    if x > 700:  # exp would overflow; occupation is indistinguishable from 0
        return 0.0
    return 1.0 / math.expm1(x)


@dataclass(frozen=True)
class MomentumGrid:
    """First-Brillouin-zone grid closed under modular momentum addition.

    ``points[j] = 2*pi*m[j]/n`` with integer wavevectors
    ``m = [-(n//2), ..., n - n//2 - 1]`` sorted ascending, so the grid always
    contains k = 0 and, for even n, k = -pi.  All momentum algebra is exact
    integer arithmetic modulo n via the precomputed index tables.
    """

    n: int
    points: np.ndarray
    m: np.ndarray
    add_table: np.ndarray = field(repr=False)
    sub_table: np.ndarray = field(repr=False)
    neg_table: np.ndarray = field(repr=False)

    @property
    def zero(self) -> int:
        """Index of k = 0."""
        return self.n // 2

    def add(self, i, j):
        """Index of k_i + k_j (folded to the zone)."""
        return self.add_table[i, j]

    def sub(self, i, j):
        """Index of k_i - k_j (folded to the zone)."""
        return self.sub_table[i, j]

    def neg(self, i):
        """Index of -k_i (folded to the zone)."""
        return self.neg_table[i]

    def index_of(self, k: float) -> int:
        """Index of the grid point equal to ``k`` modulo 2*pi (exact match)."""
        mm = k * self.n / (2.0 * math.pi)
        mi = int(round(mm))
        if abs(mm - mi) > 1e-9:
            raise InvalidParameter(f"{k} is not a grid momentum for n = {self.n}")
        return int((mi + self.n // 2) % self.n)


def make_grid(n_sites: int) -> MomentumGrid:
    """Build the N-point zone grid with its modular index tables."""
    if not isinstance(n_sites, (int, np.integer)) or n_sites < 2:
        raise InvalidParameter(f"n_sites must be an integer >= 2, got {n_sites!r}")
    n = int(n_sites)
    half = n // 2
    m = np.arange(n) - half
    points = 2.0 * math.pi * m / n
    idx = np.arange(n)
    # index arithmetic: index j holds integer wavevector m[j] = j - half
    add_table = (idx[:, None] + idx[None, :] - half) % n
    sub_table = (idx[:, None] - idx[None, :] + half) % n
    neg_table = (2 * half - idx) % n
    return MomentumGrid(
        n=n,
        points=points,
        m=m,
        add_table=add_table.astype(np.int64),
        sub_table=sub_table.astype(np.int64),
        neg_table=neg_table.astype(np.int64),
    )


def bare_transfer(grid: MomentumGrid, params: ModelParams) -> np.ndarray:
    """Momentum-space transfer J_k (the k-dependent part of the bare band)."""
    if params.band_convention == "eq5-literal":
        return 2.0 * params.transfer * np.cos(grid.points)
    return params.transfer * np.cos(grid.points)


def bare_band(grid: MomentumGrid, params: ModelParams) -> np.ndarray:
    """Bare exciton dispersion epsilon + J_k."""
    return params.epsilon + bare_transfer(grid, params)


def coupling(k, q, params: ModelParams):
    """Momentum-space coupling f_k^q = g - i*phi*(sin k - sin(k - q)).

    Accepts scalars or broadcastable arrays of wavenumbers.
    """
    return params.g - 1j * params.phi * (np.sin(k) - np.sin(np.asarray(k) - q))


def coupling_matrix(grid: MomentumGrid, params: ModelParams) -> np.ndarray:
    """f[k_idx, q_idx] over the full grid (N x N complex)."""
    k = grid.points[:, None]
    q = grid.points[None, :]
    return np.asarray(coupling(k, q, params), dtype=np.complex128)
