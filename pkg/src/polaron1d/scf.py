"""Self-consistent determination of the momentum-dependent dressing
amplitudes A_k^q.

The variationally optimal canonical transformation is fixed by the coupled
equations

    E^q_{kk'}      = P_{k-k'}(0) (A_{k-q}^{k-k'})^* A_k^{k-k'}
    <theta_k>      = exp[-1/2 sum_{k'} E^0_{kk'}]
    A_k^q          = <theta_{k-q}> <theta_k> sum_{k'} f_{k'}^q [exp(E^q)]_{kk'}

iterated to a fixed point with damped mixing.  The time-dependent E^q(t)
(same A-bilinear scaled by P(t)) feeds the correlation-function machinery.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import InvalidParameter, NotConverged, NumericalBreakdown, UndefinedField
from .lattice import ModelParams, MomentumGrid, coupling_matrix, make_grid
from .propagators import p_factor

# Dressing exponents with larger matrix norms than this are treated as a
# breakdown of the weak-coupling transformation rather than fed to expm.
E_NORM_GUARD = 50.0


@dataclass(frozen=True)
class TriadicE:
    """Dressing-exponent stack E^q_{kk'} indexed [q, k, k']."""

    values: np.ndarray  # (N, N, N) complex
    t: float = 0.0

    def slice_q(self, q_index: int) -> np.ndarray:
        return self.values[q_index]


@dataclass(frozen=True)
class ScalingFields:
    """Dimensionless scale factors of the converged amplitudes relative to
    the bare coupling structure: Re A = g*xi, -Im A = phi*(sin k - sin(k-q))*eta.

    Access raises UndefinedField for a component whose bare prefactor is zero.
    """

    _xi: Optional[np.ndarray]
    _eta: Optional[np.ndarray]

    @property
    def xi(self) -> np.ndarray:
        if self._xi is None:
            raise UndefinedField("xi is undefined for g = 0")
        return self._xi

    @property
    def eta(self) -> np.ndarray:
        if self._eta is None:
            raise UndefinedField("eta is undefined for phi = 0")
        return self._eta


@dataclass(frozen=True)
class SolverReport:
    iterations: int
    final_residual: float
    converged: bool
    damping_used: float
    residual_history: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class SCFSolution:
    """Converged dressing amplitudes and everything derived at the fixed point."""

    params: ModelParams
    grid: MomentumGrid
    A: np.ndarray          # (N, N) complex, A[k_idx, q_idx]
    theta: np.ndarray      # (N,) real, <theta_k>
    E0: TriadicE           # static dressing exponents
    scaling: ScalingFields
    report: SolverReport


def matrix_exp(M: np.ndarray) -> np.ndarray:
    """Dense matrix exponential with a finiteness guard."""
    M = np.asarray(M)
    if not np.all(np.isfinite(M)):
        raise NumericalBreakdown("matrix_exp input contains non-finite entries")
    out = scipy.linalg.expm(M)
    if not np.all(np.isfinite(out)):
        raise NumericalBreakdown("matrix exponential overflowed")
    return out


def shift_bilinear(A: np.ndarray, grid: MomentumGrid) -> np.ndarray:
    """Static bilinear stack C^q_{kk'} = (A_{k-q}^{k-k'})^* A_k^{k-k'}, (N,N,N).

    The time- and temperature-dependent dressing exponents are P(t) times this
    array, so callers that need many times can reuse one stack.
    """
    n = grid.n
    A = np.asarray(A, dtype=np.complex128)
    if A.shape != (n, n):
        raise InvalidParameter(f"A must be {(n, n)}, got {A.shape}")
    ks = np.arange(n)
    D = grid.sub_table  # D[k, k'] -> index of k - k'
    base = A[ks[:, None], D]  # A_k^{k-k'}
    C = np.empty((n, n, n), dtype=np.complex128)
    for qi in range(n):
        rows = grid.sub_table[:, qi]  # k - q for each k
        C[qi] = np.conj(A[rows[:, None], D]) * base
    return C


def build_E(A: np.ndarray, grid: MomentumGrid, p: ModelParams, t: float = 0.0) -> TriadicE:
    """Dressing exponents E^q_{kk'}(t) = P_{k-k'}(t) (A_{k-q}^{k-k'})^* A_k^{k-k'}.

    With a single mean phonon frequency P is wavevector independent, so the
    whole stack is one bilinear in A scaled by the scalar P(t).
    """
    pf = p_factor(p.temperature, t, p)
    return TriadicE(values=pf * shift_bilinear(A, grid), t=float(t))


def theta_avg(E0) -> np.ndarray:
    """Band-narrowing factors <theta_k> = exp(-1/2 sum_{k'} E^0_{kk'}).

    ``E0`` is the static q = 0 dressing matrix (N x N) or the full TriadicE,
    from which the q = 0 slice is taken.
    """
    if isinstance(E0, TriadicE):
        n = E0.values.shape[0]
        E0 = E0.values[n // 2]
    E0 = np.asarray(E0)
    if np.abs(E0.imag).max(initial=0.0) > 1e-12:
        raise NumericalBreakdown("static q=0 dressing matrix should be real")
    return np.exp(-0.5 * E0.real.sum(axis=1))


def update_A(p: ModelParams, grid: MomentumGrid, E: TriadicE, theta: np.ndarray,
             f: Optional[np.ndarray] = None) -> np.ndarray:
    """One evaluation of the self-consistency right-hand side."""
    n = grid.n
    if f is None:
        f = coupling_matrix(grid, p)
    out = np.empty((n, n), dtype=np.complex128)
    for qi in range(n):
        M = matrix_exp(E.values[qi])
        rhs = M @ f[:, qi]
        out[:, qi] = theta[grid.sub_table[:, qi]] * theta * rhs
    if not np.all(np.isfinite(out)):
        raise NumericalBreakdown("update produced non-finite amplitudes")
    return out


def extract_scaling(A: np.ndarray, p: ModelParams, grid: Optional[MomentumGrid] = None) -> ScalingFields:
    """Split A into dimensionless scale factors of the two bare couplings.

    xi = Re(A)/g.  eta = -Im(A)/(phi*(sin k - sin(k-q))) away from the
    singular lines q = 0 and q = 2k +- pi, where the denominator vanishes;
    there eta is filled by averaging the nearest finite values along q
    (removable singularities).
    """
    if grid is None:
        grid = make_grid(A.shape[0])
    n = grid.n
    xi = None
    eta = None
    if p.g != 0.0:
        xi = np.asarray(A).real / p.g
    if p.phi != 0.0:
        k = grid.points[:, None]
        q = grid.points[None, :]
        denom = p.phi * (np.sin(k) - np.sin(k - q))
        # singular iff 2 cos(k - q/2) sin(q/2) = 0
        singular = np.abs(2.0 * np.cos(k - q / 2.0) * np.sin(q / 2.0)) < 1e-9
        eta = np.full((n, n), np.nan)
        ok = ~singular
        eta[ok] = -np.asarray(A).imag[ok] / denom[ok]
        for ki in range(n):
            for qi in range(n):
                if not singular[ki, qi]:
                    continue
                vals = []
                for step in range(1, n):
                    for qj in ((qi + step) % n, (qi - step) % n):
                        if not singular[ki, qj]:
                            vals.append(eta[ki, qj])
                    if vals:
                        break
                eta[ki, qi] = float(np.mean(vals)) if vals else 0.0
    return ScalingFields(_xi=xi, _eta=eta)


def _guard_norm(E: TriadicE) -> float:
    """Largest infinity-norm among the q-slices of the dressing stack."""
    return float(np.abs(E.values).sum(axis=2).max())


def solve(p: ModelParams, init: Optional[np.ndarray] = None, *,
          grid: Optional[MomentumGrid] = None, tol: float = 1e-10,
          max_iters: int = 10000, damping: float = 0.5) -> SCFSolution:
    """Damped fixed-point iteration for the dressing amplitudes.

    Starts from A = f (or ``init``), mixes A <- A + alpha*(F(A) - A) with
    alpha = ``damping``, halving alpha whenever the residual grows.  Raises
    NotConverged (with the report attached) after ``max_iters`` sweeps and
    NumericalBreakdown if the dressing exponents leave the trustworthy range.
    """
    if grid is None:
        grid = make_grid(p.n_sites)
    f = coupling_matrix(grid, p)
    A = np.array(f if init is None else init, dtype=np.complex128)
    if A.shape != (grid.n, grid.n):
        raise InvalidParameter(f"init must have shape {(grid.n, grid.n)}")
    alpha = float(damping)
    res_prev = np.inf
    history = []
    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        E = build_E(A, grid, p, t=0.0)
        if _guard_norm(E) > E_NORM_GUARD:
            raise NumericalBreakdown(
                f"dressing exponent norm {_guard_norm(E):.3g} exceeds guard {E_NORM_GUARD}")
        theta = theta_avg(E)
        A_new = update_A(p, grid, E, theta, f=f)
        res = float(np.abs(A_new - A).max())
        history.append(res)
        if res < tol:
            A = A_new
            converged = True
            break
        if res > res_prev:
            alpha = max(alpha * 0.5, 2.0 ** -12)
        A = A + alpha * (A_new - A)
        res_prev = res
    report = SolverReport(
        iterations=iterations,
        final_residual=history[-1] if history else 0.0,
        converged=converged,
        damping_used=alpha,
        residual_history=np.asarray(history),
    )
    if not converged:
        raise NotConverged(
            f"no fixed point after {max_iters} iterations (residual {report.final_residual:.3e})",
            report=report,
        )
    E = build_E(A, grid, p, t=0.0)
    theta = theta_avg(E)
    return SCFSolution(
        params=p,
        grid=grid,
        A=A,
        theta=theta,
        E0=E,
        scaling=extract_scaling(A, p, grid),
        report=report,
    )
