"""Golden-rule transport from the residual-coupling correlation tables.

The scattering tensor

    W[j, k, k'] = int_0^{t_max} dt [ <V_{k'+q, k+q} V_{k, k'}(t)>
                                       e^{-i(e_{k'+q} - e_{k+q}) t}
                                   + <V_{k'+q, k+q} V_{k, k'}(-t)>
                                       e^{-i(e_k - e_{k'}) t} ]

is evaluated on the three momentum transfers q in {0, +2pi/N, -2pi/N}
(index j) using the dressed band energies e_k for the oscillating phases.
The finite phonon bandwidth damps the correlations on the scale 1/delta, so
the integral converges once t_max covers a few multiples of that.

Two transport channels follow:

* band diffusion: thermal average of v_k^2 / Gamma_k, with Gamma_k the
  momentum-relaxation rate built from the q = 0 slice, and
* hopping diffusion: thermal average of the q-curvature of the rate sums,
  the incoherent channel that survives when the band states lose meaning.

Everything downstream of the solver lives here: rate extraction, the
diffusion split, mobility, and the temperature sweep driver used by the
command line.  Sweeps never abort on a single bad point; failures are
recorded per temperature and the remaining points still run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import simpson

from .errors import (
    DegenerateZeroScattering,
    InvalidParameter,
    NonPositiveRate,
    PolaronError,
)
from .lattice import ModelParams, MomentumGrid
from .scf import SCFSolution, solve
from .band import PolaronBand, band_of, thermal_avg
from .correlation import CorrelationContext, context_from_solution
from ._kernels import (
    conjugate_swap_tables,
    correlation_tables,
    momentum_offsets,
    tuple_indices,
    uses_uniform_path,
)

__all__ = [
    "WTensor",
    "TransportPoint",
    "time_grid",
    "build_w_tensor",
    "scattering_rate",
    "hopping_rate",
    "diffusion",
    "sweep",
    "write_sweep_csv",
    "dump_correlation_traces",
    "SWEEP_CSV_HEADER",
]


@dataclass(frozen=True)
class WTensor:
    """Integrated scattering tensor over the on-shell tuple family.

    ``entries[j, k, kp]`` is W for transfer index j (0, +2pi/N, -2pi/N
    in that order); diagnostics record the time grid actually used and the
    largest imaginary part (the rate formulas consume real parts only).
    """

    entries: np.ndarray
    offsets: np.ndarray
    dt: float
    t_max: float
    n_times: int
    imag_norm: float
    route: str
    min_rate_rel: float = 0.0

    def validate(self, tol: float = 1e-8) -> None:
        """Reject significantly negative q = 0 transition rates.

        Elementwise nonnegativity of the q = 0 slice is a theorem only when
        the coupling elements pair Hermitianly, which the dressed residual
        coupling does in the momentum-independent (diagonal) limit; there
        anything beyond ``tol`` relative to the largest rate indicates a
        broken time grid.  With a momentum-dependent dressing the closed
        correlation forms are leading-order and small entries can come out
        negative; ``build_w_tensor`` therefore enforces this gate on the
        uniform route only and records ``min_rate_rel`` as a diagnostic
        otherwise.
        """
        if self.min_rate_rel < -tol:
            raise NonPositiveRate(
                f"transition rate at {self.min_rate_rel:.3e} of scale "
                f"(tolerance -{tol:.1e})"
            )


@dataclass(frozen=True)
class TransportPoint:
    """Diffusion summary at one temperature of a sweep."""

    temperature: float
    d_total: float
    d_band: float
    d_hop: float
    mobility: float
    min_gamma: float
    bandwidth: float
    solver_residual: float
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def time_grid(params: ModelParams, energies: np.ndarray, *,
              dt: float | None = None, t_max_factor: float = 10.0):
    """Integration grid for the rate integrals.

    t_max covers ``t_max_factor`` dephasing times 1/delta; the step resolves
    the fastest oscillation (band mismatch plus two phonon quanta) and is
    capped at 0.05.  The interval count is kept even for Simpson's rule.
    """
    if params.delta <= 0:
        raise InvalidParameter(
            "transport needs a positive phonon dispersion width delta; "
            f"got {params.delta}"
        )
    t_max = t_max_factor / params.delta
    if dt is None:
        de = float(energies.max() - energies.min())
        dt = min(0.05, 0.1 / (de + 2.0 * params.omega))
    if dt <= 0:
        raise InvalidParameter(f"dt must be positive, got {dt}")
    n = int(math.ceil(t_max / dt))
    n += n % 2
    return np.linspace(0.0, t_max, n + 1), t_max / n, t_max


def build_w_tensor(sol: SCFSolution, *, dt: float | None = None,
                   t_max_factor: float = 10.0, conjugate_swap: bool = False,
                   force_general: bool = False,
                   band: PolaronBand | None = None) -> WTensor:
    """Scattering tensor from a converged dressing field.

    The reversed-time tables are evaluated directly by default.
    ``conjugate_swap`` derives them from the forward tables through the
    Hermitian pairing of the coupling elements instead; that shortcut is
    exact only when the dressing is momentum-independent (diagonal-coupling
    limit), where it halves the work and doubles as a cross-check.
    """
    ctx = context_from_solution(sol)
    grid = sol.grid
    if band is None:
        band = band_of(sol)
    energies = band.energies
    t_arr, dt_eff, t_max = time_grid(sol.params, energies, dt=dt,
                                     t_max_factor=t_max_factor)
    offs = momentum_offsets(grid)
    vv_pos = correlation_tables(ctx, t_arr, force_general=force_general)
    if conjugate_swap:
        vv_neg = conjugate_swap_tables(vv_pos, grid, offs)
    else:
        vv_neg = correlation_tables(ctx, -t_arr, force_general=force_general)
    add = grid.add_table
    n = grid.n
    w = np.empty((3, n, n), dtype=np.complex128)
    for j in range(3):
        off = int(offs[j])
        e_shift = energies[add[:, off]]      # e_{i+q} indexed by i
        # tables carry [t, k1, q1] = [t, k'+q, k]; reorder to [t, k, k']
        v_pos = vv_pos[..., j][:, add[:, off], :].transpose(0, 2, 1)
        v_neg = vv_neg[..., j][:, add[:, off], :].transpose(0, 2, 1)
        de_pos = e_shift[None, :] - e_shift[:, None]    # e_{k'+q} - e_{k+q}
        de_neg = energies[:, None] - energies[None, :]  # e_k - e_k'
        ph_pos = np.exp(-1j * de_pos[None] * t_arr[:, None, None])
        ph_neg = np.exp(-1j * de_neg[None] * t_arr[:, None, None])
        integrand = v_pos * ph_pos + v_neg * ph_neg
        w[j] = simpson(integrand, x=t_arr, axis=0)
    route = "general" if force_general or not uses_uniform_path(ctx) else "uniform"
    w0 = w[0].real
    scale = max(float(np.abs(w0).max()), 1e-300)
    off_mask = ~np.eye(n, dtype=bool)
    worst = float(w0[off_mask].min()) if n > 1 else 0.0
    tensor = WTensor(
        entries=w,
        offsets=offs,
        dt=dt_eff,
        t_max=t_max,
        n_times=t_arr.size,
        imag_norm=float(np.abs(w.imag).max()),
        route=route,
        min_rate_rel=min(worst / scale, 0.0),
    )
    if route == "uniform":
        tensor.validate()
    return tensor


def scattering_rate(w: WTensor, *, tol: float = 1e-8) -> np.ndarray:
    """Momentum-relaxation rate Gamma_k' = (1/N) sum_{k != k'} Re W[0, k, k'].

    A rate more negative than ``-tol`` times the largest magnitude is a
    diagnostic failure (NonPositiveRate); an identically zero vector (no
    coupling) passes here and is caught by ``diffusion`` instead.
    """
    w0 = w.entries[0].real
    n = w0.shape[0]
    tot = w0.sum(axis=0) - np.diag(w0)
    gamma = tot / n
    scale = float(np.abs(gamma).max())
    if scale > 0.0 and float(gamma.min()) < -tol * scale:
        raise NonPositiveRate(
            f"momentum-relaxation rate {gamma.min():.3e} below "
            f"-{tol:.1e} * scale {scale:.3e}"
        )
    return gamma


def hopping_rate(w: WTensor, grid: MomentumGrid, *,
                 drop_constant: bool = False) -> np.ndarray:
    """Curvature of the rate sums in the momentum transfer.

    gamma_k = (F(+h) - 2 F(0) + F(-h)) / (2 h^2) with h = 2 pi / N and

        F(q)(k) = sum_k' Re( W[0, k, k'+q] / 2 - W(q)[k, k'] ).

    The first term is independent of q after the k' sum and cancels in the
    stencil; ``drop_constant`` skips it (diagnostic, must not change the
    result).
    """
    add = grid.add_table
    n = grid.n
    h = 2.0 * math.pi / n
    f = np.empty((3, n))
    for j in range(3):
        off = int(w.offsets[j])
        wq = w.entries[j].real
        f[j] = -wq.sum(axis=1)
        if not drop_constant:
            f[j] += 0.5 * w.entries[0].real[:, add[:, off]].sum(axis=1)
    return 0.5 * (f[1] - 2.0 * f[0] + f[2]) / (h * h)


def diffusion(sol: SCFSolution, w: WTensor | None = None, *,
              dt: float | None = None, t_max_factor: float = 10.0,
              conjugate_swap: bool = False, force_general: bool = False) -> TransportPoint:
    """Band plus hopping diffusion at the solution's temperature.

    Raises DegenerateZeroScattering when the model has no coupling at all or
    the relaxation rate vanishes on some momentum (infinite lifetime: the
    band channel is ill-defined and no finite diffusivity exists).
    """
    p = sol.params
    if p.g == 0.0 and p.phi == 0.0:
        raise DegenerateZeroScattering(
            "g = phi = 0 leaves the dressed band unscattered; "
            "the diffusion constant diverges"
        )
    band = band_of(sol)
    if w is None:
        w = build_w_tensor(sol, dt=dt, t_max_factor=t_max_factor,
                           conjugate_swap=conjugate_swap,
                           force_general=force_general)
    gamma = scattering_rate(w)
    if np.any(gamma <= 0.0):
        raise DegenerateZeroScattering(
            f"relaxation rate vanishes (min {gamma.min():.3e}); "
            "band diffusion is unbounded"
        )
    curv = hopping_rate(w, sol.grid)
    d_band = thermal_avg(band.velocities ** 2 / gamma, band, p.temperature)
    d_hop = thermal_avg(curv, band, p.temperature)
    d_total = d_band + d_hop
    mob = d_total / p.temperature if p.temperature > 0 else math.inf
    return TransportPoint(
        temperature=p.temperature,
        d_total=d_total,
        d_band=d_band,
        d_hop=d_hop,
        mobility=mob,
        min_gamma=float(gamma.min()),
        bandwidth=band.bandwidth,
        solver_residual=float(sol.report.final_residual),
    )


def _failed_point(temperature: float, exc: PolaronError) -> TransportPoint:
    nan = float("nan")
    return TransportPoint(
        temperature=temperature,
        d_total=nan, d_band=nan, d_hop=nan, mobility=nan,
        min_gamma=nan, bandwidth=nan, solver_residual=nan,
        status=f"failed:{type(exc).__name__}",
    )


def sweep(params: ModelParams, temperatures, *, tol: float = 1e-10,
          max_iters: int = 10000, damping: float = 0.5,
          dt: float | None = None, t_max_factor: float = 10.0,
          conjugate_swap: bool = False, force_general: bool = False,
          warm_start: bool = True, progress=None) -> list[TransportPoint]:
    """Diffusion and mobility across an ascending temperature list.

    The dressing field converged at one temperature seeds the next solve
    (the fixed point moves smoothly with T), which is why the list must be
    ascending.  A failure at one temperature is recorded in that point's
    status and the sweep continues.
    """
    temps = [float(t) for t in temperatures]
    if not temps:
        raise InvalidParameter("temperature list is empty")
    if any(t <= 0 for t in temps):
        raise InvalidParameter("sweep temperatures must be positive")
    if any(b <= a for a, b in zip(temps, temps[1:])):
        raise InvalidParameter("sweep temperatures must be strictly ascending")
    points = []
    init = None
    for t in temps:
        p = params.with_(temperature=t)
        try:
            sol = solve(p, init=init, tol=tol, max_iters=max_iters,
                        damping=damping)
            if warm_start:
                init = sol.A
            pt = diffusion(sol, dt=dt, t_max_factor=t_max_factor,
                           conjugate_swap=conjugate_swap,
                           force_general=force_general)
        except PolaronError as exc:
            pt = _failed_point(t, exc)
        points.append(pt)
        if progress is not None:
            progress(pt)
    return points


SWEEP_CSV_HEADER = ("T,D_total,D_band,D_hop,mobility,min_Gamma,bandwidth,"
                    "solver_residual,status")


def write_sweep_csv(points, path) -> None:
    """Sweep results as CSV; fixed %.14e formatting keeps reruns byte-identical."""
    lines = [SWEEP_CSV_HEADER]
    for pt in points:
        nums = (pt.temperature, pt.d_total, pt.d_band, pt.d_hop, pt.mobility,
                pt.min_gamma, pt.bandwidth, pt.solver_residual)
        lines.append(",".join("%.14e" % v for v in nums) + "," + pt.status)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def dump_correlation_traces(sol: SCFSolution, path, *, dt: float | None = None,
                            t_max_factor: float = 10.0,
                            force_general: bool = False) -> None:
    """Raw correlation traces as CSV: one time column, then re/im per tuple.

    Column labels carry the integer wavevectors of (k1, k2, q1, q2) so the
    file stands alone without the grid convention.
    """
    ctx = context_from_solution(sol)
    grid = sol.grid
    band = band_of(sol)
    t_arr, _, _ = time_grid(sol.params, band.energies, dt=dt,
                            t_max_factor=t_max_factor)
    tabs = correlation_tables(ctx, t_arr, force_general=force_general)
    offs = momentum_offsets(grid)
    m = grid.m
    header = ["t"]
    cols = []
    for j in range(3):
        for k1 in range(grid.n):
            for q1 in range(grid.n):
                _, k2, _, q2 = tuple_indices(grid, k1, q1, int(offs[j]))
                tag = f"k{m[k1]}_{m[k2]}_q{m[q1]}_{m[q2]}"
                header.append("re_" + tag)
                header.append("im_" + tag)
                cols.append(tabs[:, k1, q1, j])
    lines = [",".join(header)]
    for it, t in enumerate(t_arr):
        row = ["%.14e" % t]
        for c in cols:
            row.append("%.14e" % c[it].real)
            row.append("%.14e" % c[it].imag)
        lines.append(",".join(row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
