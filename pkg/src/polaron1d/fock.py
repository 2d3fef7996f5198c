"""Exact reference calculations on a small lattice with a truncated phonon space.

Everything in this module is deliberately direct: operators are dense matrices
over the tensor product of the one-exciton momentum space and a boson Fock
space truncated at ``n_max`` quanta per mode.  The dressing operator is built
by exponentiating its generator with :func:`scipy.linalg.expm`, time evolution
is a phase twist in the number basis, and thermal averages are explicit
Boltzmann-weighted traces.  None of the closed-form machinery from
:mod:`polaron1d.correlation` is used here, which is the point: results from
this module serve as an independent yardstick for that machinery.

Cost grows as ``(n_max + 1)**n_sites``, so this is only usable for very small
lattices; :func:`make_space` refuses to build anything past a hard size limit.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm as _dense_expm

from .errors import CutoffNotConverged, InvalidParameter, TooLarge
from .lattice import ModelParams, MomentumGrid, bare_transfer, coupling_matrix

#: Hard ceiling on exciton-dimension times phonon-dimension.
SIZE_LIMIT = 5000


@dataclass(frozen=True)
class TruncatedSpace:
    """A boson Fock space with at most ``n_max`` quanta in each of ``n`` modes.

    occupations : (dim, n) integer array, one row per basis state.
    lowering    : tuple of dense (dim, dim) annihilation matrices, one per mode,
                  indexed like the momentum grid.
    """

    grid: MomentumGrid
    n_max: int
    occupations: np.ndarray
    lowering: tuple

    @property
    def dim(self) -> int:
        return self.occupations.shape[0]

    @property
    def total_occupation(self) -> np.ndarray:
        return self.occupations.sum(axis=1)


def make_space(grid: MomentumGrid, n_max: int, limit: int = SIZE_LIMIT) -> TruncatedSpace:
    """Enumerate the truncated Fock space and build per-mode ladder matrices."""
    if n_max < 0:
        raise InvalidParameter("n_max must be >= 0, got %d" % n_max)
    n = grid.n
    dim = (n_max + 1) ** n
    if n * dim > limit:
        raise TooLarge(
            "requested space has exciton*phonon dimension %d > %d" % (n * dim, limit)
        )
    occupations = np.array(
        list(itertools.product(range(n_max + 1), repeat=n)), dtype=np.int64
    )
    index = {tuple(row): i for i, row in enumerate(occupations)}
    lowering = []
    for q in range(n):
        b = np.zeros((dim, dim))
        for i, row in enumerate(occupations):
            if row[q] > 0:
                target = list(row)
                target[q] -= 1
                b[index[tuple(target)], i] = np.sqrt(row[q])
        lowering.append(b)
    return TruncatedSpace(grid=grid, n_max=n_max, occupations=occupations, lowering=tuple(lowering))


@dataclass(frozen=True)
class DressingPair:
    """Dense dressing operator and its adjoint on the exciton (x) phonon space.

    ``minus`` is exp(-S), ``plus`` is exp(+S); with an anti-Hermitian generator
    these are unitary and adjoint to each other.  Momentum blocks of size
    ``space.dim`` are laid out contiguously: block (k, k') starts at row
    k*dim, column k'*dim.
    """

    space: TruncatedSpace
    minus: np.ndarray
    plus: np.ndarray


def _block(space: TruncatedSpace, full: np.ndarray, k_row: int, k_col: int) -> np.ndarray:
    d = space.dim
    return full[k_row * d : (k_row + 1) * d, k_col * d : (k_col + 1) * d]


def _dagger_block(theta: "DressingPair", k_row: int, k_col: int) -> np.ndarray:
    """theta†_{k_row k_col}: the boson-space adjoint of the (k_row, k_col)
    block of the dressing operator (not the block of the adjoint operator)."""
    return _block(theta.space, theta.minus, k_row, k_col).conj().T


def build_theta(A: np.ndarray, space: TruncatedSpace) -> DressingPair:
    """Exponentiate the dressing generator for exciton-shift amplitudes ``A``.

    The generator is the one-exciton-sector matrix of the canonical shift

        S = N^{-1/2} sum_{k,q} [(A_k^q)* b†_q |k-q><k|  -  A_k^q b_q |k><k-q|],

    i.e. A_k^q is the coefficient of the phonon-absorption vertex scattering
    the exciton from k-q to k; the creation part is its Hermitian partner, so
    S is anti-Hermitian (exp(-S) unitary) for *any* amplitude matrix.  For an
    A constant over k both vertices share one amplitude per block and the
    (k_row, k_col) block reduces to the compact A (b†_{k_col-k_row} -
    b_{k_row-k_col}) form.  The vertex assignment (rather than its mirror) is
    pinned at N=3 by comparison with the closed pair average, which carries
    the (A*, A) bilinear of the same orientation; N=2 cannot discriminate
    because the antisymmetric coupling vanishes on its two grid points.
    """
    grid = space.grid
    n, d = grid.n, space.dim
    A = np.asarray(A, dtype=complex)
    if A.shape != (n, n):
        raise InvalidParameter("A must have shape (%d, %d)" % (n, n))
    S = np.zeros((n * d, n * d), dtype=complex)
    root = 1.0 / np.sqrt(n)
    for k_row in range(n):
        for k_col in range(n):
            q = grid.sub_table[k_col, k_row]
            block = root * np.conj(A[k_col, q]) * space.lowering[q].T
            block = block - root * A[k_row, grid.neg_table[q]] * (
                space.lowering[grid.neg_table[q]]
            )
            S[k_row * d : (k_row + 1) * d, k_col * d : (k_col + 1) * d] = block
    herm_defect = np.abs(S + S.conj().T).max()
    if herm_defect > 1e-12 * max(1.0, np.abs(S).max()):
        raise InvalidParameter(
            "dressing generator is not anti-Hermitian (defect %g)" % herm_defect
        )
    return DressingPair(space=space, minus=_dense_expm(-S), plus=_dense_expm(S))


def thermal_weights(space: TruncatedSpace, temperature: float, omega: float = 1.0) -> np.ndarray:
    """Boltzmann weights over the truncated number basis (vacuum only at T=0)."""
    if temperature < 0:
        raise InvalidParameter("temperature must be >= 0")
    occ = space.total_occupation
    if temperature == 0.0:
        w = (occ == 0).astype(float)
    else:
        w = np.exp(-omega * occ / temperature)
    return w / w.sum()


def evolve(space: TruncatedSpace, M: np.ndarray, t: float, omega: float = 1.0) -> np.ndarray:
    """Heisenberg-evolve a phonon-space matrix under the free boson Hamiltonian."""
    phase = np.exp(1j * omega * t * space.total_occupation)
    return phase[:, None] * M * phase[None, :].conj()


def _traced(weights: np.ndarray, product: np.ndarray) -> complex:
    return complex(np.sum(weights * np.diagonal(product)))


def exact_two_theta(
    theta: DressingPair,
    k: int,
    kp: int,
    q: int,
    qp: int,
    t: float,
    temperature: float,
    omega: float = 1.0,
) -> complex:
    """Thermal average of theta†(k,k') times the t-evolved theta(q,q')."""
    space = theta.space
    w = thermal_weights(space, temperature, omega)
    left = _dagger_block(theta, k, kp)
    right = evolve(space, _block(space, theta.minus, q, qp), t, omega)
    return _traced(w, left @ right)


def exact_four_theta(
    theta: DressingPair,
    indices: tuple,
    t: float,
    temperature: float,
    omega: float = 1.0,
) -> complex:
    """Thermal average of theta†theta (static) times theta†theta (t-evolved).

    ``indices`` is (k1, k2, k3, k4, q1, q2, q3, q4) for
    <theta†_{k1 k2} theta_{k3 k4} theta†_{q1 q2}(t) theta_{q3 q4}(t)>.
    """
    k1, k2, k3, k4, q1, q2, q3, q4 = indices
    space = theta.space
    w = thermal_weights(space, temperature, omega)
    static = _dagger_block(theta, k1, k2) @ _block(space, theta.minus, k3, k4)
    moving = _dagger_block(theta, q1, q2) @ _block(space, theta.minus, q3, q4)
    return _traced(w, static @ evolve(space, moving, t, omega))


def converged_correlators(
    A: np.ndarray,
    grid: MomentumGrid,
    n_max: int,
    requests: list,
    temperature: float,
    omega: float = 1.0,
    drift_tol: float = 1e-9,
    limit: int = SIZE_LIMIT,
) -> tuple:
    """Evaluate a batch of oracle averages at a truncation-stable cutoff.

    ``requests`` is a list of ("two" | "four", indices, t) items, where
    ``indices`` is (k, k', q, q') for pair averages and the eight-index tuple
    for four-operator averages.  Starting from ``n_max``, the per-mode cutoff
    grows in steps of two until no requested value moves by ``drift_tol`` or
    more; a raw value at a fixed cutoff cannot honestly be reported otherwise
    (at moderate temperature the Boltzmann tail alone shifts thermal traces by
    more than typical comparison tolerances).

    Returns (values, used_cutoff).  Raises :class:`CutoffNotConverged` if the
    size limit is reached before the values settle.
    """

    def evaluate(cut: int) -> np.ndarray:
        space = make_space(grid, cut, limit=limit)
        theta = build_theta(A, space)
        out = np.empty(len(requests), dtype=complex)
        for i, (kind, indices, t) in enumerate(requests):
            if kind == "two":
                out[i] = exact_two_theta(theta, *indices, t, temperature, omega)
            elif kind == "four":
                out[i] = exact_four_theta(theta, tuple(indices), t, temperature, omega)
            else:
                raise InvalidParameter("unknown request kind %r" % (kind,))
        return out

    cut = n_max
    prev = evaluate(cut)
    while True:
        try:
            cur = evaluate(cut + 2)
        except TooLarge as exc:
            raise CutoffNotConverged(
                "correlators not stable to %g below the size limit "
                "(last cutoff %d)" % (drift_tol, cut)
            ) from exc
        drift = float(np.abs(cur - prev).max())
        if drift < drift_tol:
            return cur, cut + 2
        prev = cur
        cut += 2


def converged_two_theta(
    A: np.ndarray,
    grid: MomentumGrid,
    n_max: int,
    k: int,
    kp: int,
    q: int,
    qp: int,
    t: float,
    temperature: float,
    omega: float = 1.0,
    drift_tol: float = 1e-9,
) -> complex:
    """Single truncation-stable pair average (see converged_correlators)."""
    values, _ = converged_correlators(
        A, grid, n_max, [("two", (k, kp, q, qp), t)], temperature, omega, drift_tol
    )
    return complex(values[0])


def converged_four_theta(
    A: np.ndarray,
    grid: MomentumGrid,
    n_max: int,
    indices: tuple,
    t: float,
    temperature: float,
    omega: float = 1.0,
    drift_tol: float = 1e-9,
) -> complex:
    """Single truncation-stable four-operator average."""
    values, _ = converged_correlators(
        A, grid, n_max, [("four", tuple(indices), t)], temperature, omega, drift_tol
    )
    return complex(values[0])


def _subtracted_pair(
    theta: DressingPair,
    weights: np.ndarray,
    a: int,
    b: int,
    c: int,
    d: int,
) -> np.ndarray:
    """Fluctuation operator theta†_{ab} theta_{cd} - <theta†_{ab} theta_{cd}>."""
    space = theta.space
    op = _dagger_block(theta, a, b) @ _block(space, theta.minus, c, d)
    mean = _traced(weights, op)
    return op - mean * np.eye(space.dim)


def build_scattering_operator(
    theta: DressingPair,
    A: np.ndarray,
    params: ModelParams,
    k: int,
    kp: int,
    temperature: float | None = None,
) -> np.ndarray:
    """Dense phonon-space matrix of the residual coupling's (k, k') element.

    Assembles the transfer term, the two shift-amplitude counterterms and the
    symmetrised single-phonon term, with every theta†theta pair replaced by its
    fluctuation around the thermal mean.  The single-phonon field for wavevector
    q is taken as b_q + b†_{-q}.  ``A`` must be the same amplitude matrix used
    to build ``theta``.
    """
    space = theta.space
    grid = space.grid
    if temperature is None:
        temperature = params.temperature
    w = thermal_weights(space, temperature, params.omega)
    A = np.asarray(A, dtype=complex)
    n = grid.n
    J = bare_transfer(grid, params)
    f = coupling_matrix(grid, params)
    add, sub, neg = grid.add_table, grid.sub_table, grid.neg_table
    root = 1.0 / np.sqrt(n)
    V = np.zeros((space.dim, space.dim), dtype=complex)
    psi = [space.lowering[q] + space.lowering[neg[q]].T for q in range(n)]
    for kappa in range(n):
        V += J[kappa] * _subtracted_pair(theta, w, kappa, k, kappa, kp)
        for q in range(n):
            fw = params.omega * f[neg[kappa], q]
            if fw == 0.0:
                continue
            T_pair = _subtracted_pair(theta, w, add[kappa, q], k, kappa, kp)
            shift_down = A[neg[k], neg[q]] * _subtracted_pair(
                theta, w, add[kappa, q], k, kappa, sub[kp, q]
            )
            shift_up = np.conj(A[neg[k], q]) * _subtracted_pair(
                theta, w, add[kappa, q], add[k, q], kappa, kp
            )
            V -= root * fw * (
                root * (shift_down + shift_up)
                - 0.5 * (T_pair @ psi[q] + psi[q] @ T_pair)
            )
    return V


def exact_vv(
    A: np.ndarray,
    params: ModelParams,
    space: TruncatedSpace,
    k1: int,
    k2: int,
    q1: int,
    q2: int,
    t: float,
    temperature: float | None = None,
) -> complex:
    """Exact thermal average <V_{k1 k2} V_{q1 q2}(t)> in the truncated space.

    This is the integrand of the golden-rule rate tensor, evaluated without any
    factorisation; use it to size the error of the closed-form assembly.
    """
    theta = build_theta(A, space)
    if temperature is None:
        temperature = params.temperature
    w = thermal_weights(space, temperature, params.omega)
    V1 = build_scattering_operator(theta, A, params, k1, k2, temperature)
    V2 = build_scattering_operator(theta, A, params, q1, q2, temperature)
    return _traced(w, V1 @ evolve(space, V2, t, params.omega))
