"""Batched correlation tables for the rate integrals.

:mod:`polaron1d.correlation` evaluates the residual-coupling autocorrelation
one (index tuple, time) point at a time, which is the right shape for spot
checks but hopeless for transport: the golden-rule rates need
<V_{k'+q,k+q} V_{k,k'}(t)> on a dense time grid for every (k, k') pair and
momentum transfer q in {0, +2pi/N, -2pi/N}.  This module evaluates exactly
the same closed forms, reorganized as staged tensor contractions so that one
pass over a time sample produces the whole 3 N^2 family of on-shell tuples:

* stage 1 contracts the internal transfer ``v`` of the four-operator average
  against the time-evolved exponential tables (``P1`` and its counterterm-
  weighted sibling ``P1B``),
* stage 2 contracts the first-factor internal momentum ``kappa`` against the
  static exponential table (the ``Q`` builds, one per vertex shape),
* stage 3 applies the remaining two exponential-matrix elements and the
  vertex weights while accumulating into the output table.

The thermal subtraction (products of static pair averages) and the crossed
one-phonon source products are time-separable; they are assembled once in
plain Python per context and combined with the compiled result.

A converged diagonal-only model dresses every site with the same real shift,
and the whole correlation then collapses to a short lattice sum over
displaced-oscillator overlaps.  :func:`uses_uniform_path` detects that case
and :func:`correlation_tables` routes it to the closed form, which is what
makes large-N diagonal-coupling sweeps cheap.

Tuple convention: entry ``[it, k1, q1, j]`` of a table holds
<V_{k1 k2} V_{q1 q2}(t_it)> with k2 = q1 + off_j and q2 = k1 - off_j, where
``off_j`` runs over the three scattering transfers returned by
:func:`momentum_offsets`.  Every such tuple conserves momentum, which is why
the family closes under the staged evaluation.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from .errors import NumericalBreakdown
from .lattice import bose_factor
from .propagators import p_factor, phonon_propagators
from .correlation import CorrelationContext, exp_shift, two_theta_avg

__all__ = [
    "momentum_offsets",
    "uses_uniform_path",
    "correlation_tables",
    "conjugate_swap_tables",
    "build_exp_stacks",
]

_C = np.complex128


def momentum_offsets(grid) -> np.ndarray:
    """Grid indices of the three scattering transfers 0, +2pi/N, -2pi/N."""
    iz = grid.zero
    n = grid.n
    return np.array([iz, (iz + 1) % n, (iz - 1) % n], dtype=np.int64)


def tuple_indices(grid, k1: int, q1: int, off: int):
    """Full index tuple (k1, k2, q1, q2) for table entry (k1, q1, offset)."""
    return k1, int(grid.add_table[q1, off]), q1, int(grid.sub_table[k1, off])


# ----------------------------------------------------------------------
# exponential table stacks
# ----------------------------------------------------------------------

def build_exp_stacks(ctx: CorrelationContext, t_arr):
    """exp(+E^q(t)) and exp(-E^q(t)) for every (t, q), plus static exp(+E^q(0)).

    Uses the per-q eigenfactorizations held by the context (dense expm
    fallback for slices the context flagged as untrustworthy), so the stacks
    agree with :func:`polaron1d.correlation.exp_shift` to rounding.
    """
    grid, params = ctx.grid, ctx.params
    n = grid.n
    t_arr = np.asarray(t_arr, dtype=np.float64)
    nt = t_arr.size
    pf = np.array([p_factor(params.temperature, float(t), params) for t in t_arr])
    Xp = np.empty((nt, n, n, n), dtype=_C)
    Xm = np.empty((nt, n, n, n), dtype=_C)
    for qi in range(n):
        eig = ctx._eig[qi]
        if eig is None:
            for it in range(nt):
                Xp[it, qi] = _expm_entry(ctx, qi, +pf[it])
                Xm[it, qi] = _expm_entry(ctx, qi, -pf[it])
        else:
            lam, V, Vinv = eig
            for it in range(nt):
                Xp[it, qi] = (V * np.exp(+pf[it] * lam)) @ Vinv
                Xm[it, qi] = (V * np.exp(-pf[it] * lam)) @ Vinv
    if not (np.all(np.isfinite(Xp)) and np.all(np.isfinite(Xm))):
        raise NumericalBreakdown("dressing exponential stack overflowed")
    X0 = np.empty((n, n, n), dtype=_C)
    for qi in range(n):
        X0[qi] = exp_shift(ctx, qi, +1, 0.0)
    return Xp, Xm, X0


def _expm_entry(ctx, qi, factor):
    from .scf import matrix_exp

    return matrix_exp(factor * ctx.C[qi])


# ----------------------------------------------------------------------
# uniform-dressing closed form (diagonal coupling, constant shift)
# ----------------------------------------------------------------------

def uses_uniform_path(ctx: CorrelationContext) -> bool:
    """True when the model is diagonal-only and the shift table is constant.

    Off-diagonal coupling or any momentum structure in A invalidates the
    displaced-oscillator collapse, so the general engine is used instead.
    """
    if ctx.params.phi != 0.0:
        return False
    a0 = ctx.A.flat[0]
    scale = max(1.0, abs(a0))
    if abs(a0.imag) > 1e-10 * scale:
        return False
    return float(np.abs(ctx.A - a0).max()) <= 1e-8 * scale


def _uniform_tables(ctx: CorrelationContext, t_arr, offs) -> np.ndarray:
    """Correlation tables from the site-local displaced-oscillator overlap.

    With every site dressed by the same real shift ``a``, only the bare-hop
    pair term survives in the residual coupling, and the phonon average of a
    hop pair is an exponential of the site-coincidence count between the
    static and time-evolved displacement pattern:

        <X X(t)> - <X><X> = exp(-2(2n+1)a^2) [exp(-a^2 N P(t) M) - 1]

    with M in {-2..2} counting signed coincidences of the four involved
    sites.  The lattice sum over hop displacements then yields the full
    on-shell tuple family in O(N) per (tuple, time).
    """
    grid, params = ctx.grid, ctx.params
    n = grid.n
    add, sub = grid.add_table, grid.sub_table
    t_arr = np.asarray(t_arr, dtype=np.float64)
    nt = t_arr.size
    a = float(ctx.A.flat[0].real)
    nbar = bose_factor(params.temperature, params.omega)
    pts = grid.points
    # real-space nearest-neighbour hop amplitude, band-convention free
    jh = float(np.real(np.sum(ctx.transfer * np.exp(-1j * pts))) / n)
    # N P(t): the single-mode bracket [(2n+1)cos wt + i sin wt] decay
    np_t = n * np.asarray(
        [p_factor(params.temperature, float(t), params) for t in t_arr], dtype=_C
    )
    pref = jh * jh / n * np.exp(-2.0 * (2.0 * nbar + 1.0) * a * a)
    out = np.zeros((nt, n, n, 3), dtype=_C)
    # hop kernels exp(-a^2 N P M) - 1 for the five possible coincidence counts
    kern = {m: np.exp(-a * a * m * np_t) - 1.0 for m in (-2, -1, 1, 2)}
    for j, off in enumerate(offs):
        for k1 in range(n):
            q2 = sub[k1, off]
            for q1 in range(n):
                k2 = add[q1, off]
                acc = np.zeros(nt, dtype=_C)
                for d in range(n):
                    for e1 in (1, -1):
                        for e2 in (1, -1):
                            m = (
                                (d % n == 0)
                                - ((d + e2) % n == 0)
                                - (d % n == e1 % n)
                                + ((d + e2) % n == e1 % n)
                            )
                            if m == 0:
                                continue
                            phase = np.exp(
                                1j
                                * (
                                    pts[k2] * e1
                                    + pts[q2] * e2
                                    + (pts[q2] - pts[q1]) * d
                                )
                            )
                            acc += phase * kern[m]
                out[:, k1, q1, j] = pref * acc
    return out


# ----------------------------------------------------------------------
# compiled stages of the general engine
# ----------------------------------------------------------------------

@njit(cache=True)
def _coef_p1(X0, theta, add, neg, out):
    # out[a, y, v] = theta[-a] theta[v] X0^{a+v}[v, -y]
    n = theta.shape[0]
    for a in range(n):
        ta = theta[neg[a]]
        for y in range(n):
            ny = neg[y]
            for v in range(n):
                out[a, y, v] = ta * theta[v] * X0[add[a, v], v, ny]


@njit(cache=True)
def _coef_p1b(X0, theta, fmat, A, add, sub, neg, omega, out):
    # counterterm-weighted second-pair coefficient, kappa' summed in place:
    # out[a, m, v] = sum_kp -(w/n) f[-kp, m-kp] conj(A[-a, m-kp])
    #                theta[-(a+m-kp)] theta[v] X0^{a+m-kp+v}[v, -kp]
    n = theta.shape[0]
    for a in range(n):
        for m in range(n):
            for v in range(n):
                acc = 0.0 + 0.0j
                for kp in range(n):
                    s2 = sub[m, kp]
                    wgt = fmat[neg[kp], s2] * np.conj(A[neg[a], s2])
                    if wgt == 0:
                        continue
                    q2x = add[a, s2]
                    acc += (
                        wgt
                        * theta[neg[q2x]]
                        * theta[v]
                        * X0[add[q2x, v], v, neg[kp]]
                    )
                out[a, m, v] = -(omega / n) * acc


@njit(cache=True)
def _contract_p(Xp, Xm, coef, add, sub, neg, out):
    # out[a, y, w, h, r] = sum_v coef[a, y, v] Xp^{h+v}[-w, v]
    #                      Xm^{h+w-a-y}[r, -(a+y+v)]
    n = add.shape[0]
    cw = np.empty(n, dtype=np.complex128)
    col = np.empty(n, dtype=np.int64)
    for a in range(n):
        for y in range(n):
            S = add[a, y]
            for v in range(n):
                col[v] = neg[add[S, v]]
            for w in range(n):
                nw = neg[w]
                for h in range(n):
                    for v in range(n):
                        cw[v] = coef[a, y, v] * Xp[add[h, v], nw, v]
                    lab1 = sub[add[h, w], S]
                    for r in range(n):
                        acc = 0.0 + 0.0j
                        for v in range(n):
                            acc += cw[v] * Xm[lab1, r, col[v]]
                        out[a, y, w, h, r] = acc


@njit(cache=True)
def _build_q_std(P, X0, theta, Jvec, fmat, add, sub, neg, case, Q):
    # First-pair kappa contraction for the standard vertex shapes.
    # case 0: bare hop (s1 pinned to zero transfer), 1: shift counterterm A,
    # case 2: shift counterterm A*, 3: one-phonon field pair (s1 pinned to
    # zero transfer as well: on-shell conservation of the mixed average kills
    # every other slice, so its consumers never read them).
    # Q[k1, a, s1, y, w, r] = sum_kp wgt(kp) theta[u] X0^{lab0}[u, -kp]
    #                         P[a, y, w, kp+s1, r]
    # with u = w - y - (k1 + a) - r (+ s1 for case 1) and
    # lab0 = k1 + u (+ s1 for case 2).
    n = add.shape[0]
    iz = n // 2
    if case == 0 or case == 3:
        s_lo, s_hi = iz, iz + 1
    else:
        s_lo, s_hi = 0, n
    for k1 in range(n):
        for a in range(n):
            ka = add[k1, a]
            for s1 in range(s_lo, s_hi):
                base_k = add[k1, s1] if case == 2 else k1
                for y in range(n):
                    for w in range(n):
                        base = sub[sub[w, y], ka]
                        if case == 1:
                            base = add[base, s1]
                        for r in range(n):
                            u = sub[base, r]
                            lab0 = add[base_k, u]
                            acc = 0.0 + 0.0j
                            for kp in range(n):
                                if case == 0:
                                    wgt = Jvec[kp] + 0.0j
                                else:
                                    wgt = fmat[neg[kp], s1]
                                if wgt == 0:
                                    continue
                                acc += (
                                    wgt
                                    * X0[lab0, u, neg[kp]]
                                    * P[a, y, w, add[kp, s1], r]
                                )
                            Q[k1, a, s1, y, w, r] = theta[u] * acc


@njit(cache=True)
def _build_q_pf1i(P, Xp, X0, theta, Jvec, fmat, A, add, sub, neg, case, Q):
    # First-pair kappa contraction for the pair-field cross term, source
    # branch that pins the field transfer to the later pair's first index.
    # Folds the source amplitude, the second-side field weight f[-y, s2] and
    # the third exponential element (whose row depends on kappa through s2).
    n = add.shape[0]
    iz = n // 2
    if case == 0:
        s_lo, s_hi = iz, iz + 1
    else:
        s_lo, s_hi = 0, n
    for k1 in range(n):
        for a in range(n):
            for s1 in range(s_lo, s_hi):
                base_k = add[k1, s1] if case == 2 else k1
                for y in range(n):
                    for w in range(n):
                        for r in range(n):
                            Q[k1, a, s1, y, w, r] = 0.0 + 0.0j
                        for kp in range(n):
                            if case == 0:
                                w1 = Jvec[kp] + 0.0j
                                s2 = sub[kp, k1]
                                val = A[neg[kp], sub[k1, kp]]
                            elif case == 1:
                                w1 = fmat[neg[kp], s1]
                                ks = add[kp, s1]
                                s2 = sub[ks, k1]
                                val = A[neg[ks], sub[k1, ks]]
                            else:
                                w1 = fmat[neg[kp], s1]
                                s2 = sub[kp, k1]
                                val = A[neg[add[kp, s1]], sub[k1, kp]]
                            if s2 != iz:
                                # a nonzero field transfer breaks momentum
                                # conservation of the mixed average on-shell
                                continue
                            wgt = w1 * val * fmat[neg[y], s2]
                            if wgt == 0:
                                continue
                            q1x = add[y, s2]
                            row3 = neg[q1x]
                            hp = add[kp, s1]
                            base = sub[sub[sub[w, y], kp], a]
                            for r in range(n):
                                u = sub[base, r]
                                lab0 = add[base_k, u]
                                lab3 = neg[add[q1x, u]]
                                Q[k1, a, s1, y, w, r] += (
                                    wgt
                                    * theta[u]
                                    * X0[lab0, u, neg[kp]]
                                    * Xp[lab3, row3, r]
                                    * P[a, y, w, hp, r]
                                )


@njit(cache=True)
def _s4_pp_plain(Q, Xp, Xm, theta, Jvec, A, add, sub, neg, offs, omega,
                 case1, side2, bfac, out):
    # pair-pair assembly against the bare-hop (side2 = 0) or folded-A*
    # counterterm (side2 = 1, weights already inside the P1B chain) pair.
    n = add.shape[0]
    iz = n // 2
    if case1 == 0:
        s_lo, s_hi = iz, iz + 1
    else:
        s_lo, s_hi = 0, n
    for j in range(3):
        off = offs[j]
        for k1 in range(n):
            q2 = sub[k1, off]
            nq2 = neg[q2]
            for q1 in range(n):
                k2 = add[q1, off]
                tot = 0.0 + 0.0j
                for s1 in range(s_lo, s_hi):
                    if case1 == 0:
                        w1 = theta[neg[k1]] + 0.0j
                        K4 = k2
                    elif case1 == 1:
                        w1 = -(omega / n) * A[neg[k1], neg[s1]] * theta[neg[k1]]
                        K4 = sub[k2, s1]
                    else:
                        w1 = (
                            -(omega / n)
                            * np.conj(A[neg[k1], s1])
                            * theta[neg[add[k1, s1]]]
                        )
                        K4 = k2
                    if w1 == 0:
                        continue
                    for y in range(n):
                        w2 = 1.0 + 0.0j if side2 == 1 else Jvec[y] + 0.0j
                        if w2 == 0:
                            continue
                        t2 = add[y, q2]
                        ny = neg[y]
                        acc = 0.0 + 0.0j
                        for w in range(n):
                            x4 = Xm[sub[K4, w], nq2, neg[w]]
                            if x4 == 0:
                                continue
                            base = sub[sub[w, t2], K4]
                            for r in range(n):
                                u = sub[base, r]
                                lab3 = neg[add[y, u]]
                                acc += Q[k1, q1, s1, y, w, r] * Xp[lab3, ny, r] * x4
                        tot += w1 * w2 * acc
                out[k1, q1, j] += bfac * tot


@njit(cache=True)
def _s4_pp_ca2(Q, Xp, Xm, theta, fmat, A, add, sub, neg, offs, omega,
               case1, bfac, out):
    # pair-pair assembly against the A-counterterm pair: its transfer s2
    # stays free, so it is an explicit stage-3 loop.
    n = add.shape[0]
    iz = n // 2
    if case1 == 0:
        s_lo, s_hi = iz, iz + 1
    else:
        s_lo, s_hi = 0, n
    for j in range(3):
        off = offs[j]
        for k1 in range(n):
            q2 = sub[k1, off]
            for q1 in range(n):
                k2 = add[q1, off]
                tot = 0.0 + 0.0j
                for s1 in range(s_lo, s_hi):
                    if case1 == 0:
                        w1 = theta[neg[k1]] + 0.0j
                        K4 = k2
                    elif case1 == 1:
                        w1 = -(omega / n) * A[neg[k1], neg[s1]] * theta[neg[k1]]
                        K4 = sub[k2, s1]
                    else:
                        w1 = (
                            -(omega / n)
                            * np.conj(A[neg[k1], s1])
                            * theta[neg[add[k1, s1]]]
                        )
                        K4 = k2
                    if w1 == 0:
                        continue
                    for y in range(n):
                        t2 = add[y, q2]
                        for s2 in range(n):
                            w2 = -(omega / n) * fmat[neg[y], s2] * A[neg[q1], neg[s2]]
                            if w2 == 0:
                                continue
                            q1x = add[y, s2]
                            row3 = neg[q1x]
                            row4 = neg[sub[q2, s2]]
                            acc = 0.0 + 0.0j
                            for w in range(n):
                                x4 = Xm[sub[K4, w], row4, neg[w]]
                                if x4 == 0:
                                    continue
                                base = sub[sub[w, t2], K4]
                                for r in range(n):
                                    u = sub[base, r]
                                    lab3 = neg[add[q1x, u]]
                                    acc += (
                                        Q[k1, q1, s1, y, w, r]
                                        * Xp[lab3, row3, r]
                                        * x4
                                    )
                            tot += w1 * w2 * acc
                out[k1, q1, j] += bfac * tot


@njit(cache=True)
def _s4_ff(Q, Xp, Xm, theta, fmat, add, sub, neg, offs, omega, bpsi, out):
    # field-field contraction against the time-dependent pair kernel; the
    # second field transfer is locked to -s1.
    n = add.shape[0]
    for j in range(3):
        off = offs[j]
        for k1 in range(n):
            q2 = sub[k1, off]
            nq2 = neg[q2]
            th1 = theta[neg[k1]]
            for q1 in range(n):
                k2 = add[q1, off]
                tot = 0.0 + 0.0j
                for s1 in range(n):
                    for y in range(n):
                        w2 = fmat[neg[y], neg[s1]]
                        if w2 == 0:
                            continue
                        q1x = sub[y, s1]
                        row3 = neg[q1x]
                        t2 = add[q1x, q2]
                        acc = 0.0 + 0.0j
                        for w in range(n):
                            x4 = Xm[sub[k2, w], nq2, neg[w]]
                            if x4 == 0:
                                continue
                            base = sub[sub[w, t2], k2]
                            for r in range(n):
                                u = sub[base, r]
                                lab3 = neg[add[q1x, u]]
                                acc += Q[k1, q1, s1, y, w, r] * Xp[lab3, row3, r] * x4
                        tot += w2 * acc
                out[k1, q1, j] += (omega * omega / n) * bpsi * th1 * tot


@njit(cache=True)
def _s4_pf2(Q, Xp, Xm, theta, Jvec, fmat, A, add, sub, neg, offs, omega,
            side2, bup, out):
    # field(first) x pair(second) cross terms; the first-pair transfer s1 is
    # pinned by the source average, so it is read off the Q slot.
    # side2: 0 bare hop, 1 A counterterm, 2 A* counterterm.
    n = add.shape[0]
    iz = n // 2
    for j in range(3):
        off = offs[j]
        for k1 in range(n):
            q2 = sub[k1, off]
            th1 = theta[neg[k1]]
            for q1 in range(n):
                k2 = add[q1, off]
                tot = 0.0 + 0.0j
                for y in range(n):
                    if side2 == 0:
                        wj = Jvec[y]
                        if wj == 0:
                            continue
                        t2 = add[y, q2]
                        ny = neg[y]
                        for br in range(2):
                            if br == 0:
                                s1 = sub[y, q1]
                                val = A[neg[y], sub[q1, y]]
                            else:
                                s1 = sub[q2, y]
                                val = -A[neg[q2], sub[y, q2]]
                            if s1 != iz:
                                continue  # conservation on-shell
                            if val == 0:
                                continue
                            w2 = (omega / n) * wj * val
                            acc = 0.0 + 0.0j
                            for w in range(n):
                                x4 = Xm[sub[k2, w], neg[q2], neg[w]]
                                if x4 == 0:
                                    continue
                                base = sub[sub[w, t2], k2]
                                for r in range(n):
                                    u = sub[base, r]
                                    lab3 = neg[add[y, u]]
                                    acc += (
                                        Q[k1, q1, s1, y, w, r]
                                        * Xp[lab3, ny, r]
                                        * x4
                                    )
                            tot += w2 * acc
                    else:
                        for s2 in range(n):
                            if side2 == 1:
                                wf = fmat[neg[y], s2] * A[neg[q1], neg[s2]]
                            else:
                                wf = fmat[neg[y], s2] * np.conj(A[neg[q1], s2])
                            if wf == 0:
                                continue
                            q1x = add[y, s2]
                            if side2 == 1:
                                q4x = sub[q2, s2]
                                t2 = add[y, q2]
                                aslot = q1
                            else:
                                q4x = q2
                                t2 = add[q1x, q2]
                                aslot = add[q1, s2]
                            row3 = neg[q1x]
                            row4 = neg[q4x]
                            for br in range(2):
                                if br == 0:
                                    s1 = sub[q1x, aslot] if side2 == 1 else sub[y, q1]
                                    if side2 == 1:
                                        val = A[neg[q1x], sub[q1, q1x]]
                                    else:
                                        val = A[neg[q1x], sub[q1, y]]
                                else:
                                    if side2 == 1:
                                        s1 = sub[q4x, y]
                                        val = -A[neg[q4x], sub[y, q4x]]
                                    else:
                                        s1 = sub[q2, y]
                                        val = -A[neg[q2], sub[y, q2]]
                                if s1 != iz:
                                    continue  # conservation on-shell
                                if val == 0:
                                    continue
                                w2 = -(omega * omega / (n * n)) * wf * val
                                acc = 0.0 + 0.0j
                                for w in range(n):
                                    x4 = Xm[sub[k2, w], row4, neg[w]]
                                    if x4 == 0:
                                        continue
                                    base = sub[sub[w, t2], k2]
                                    for r in range(n):
                                        u = sub[base, r]
                                        lab3 = neg[add[q1x, u]]
                                        acc += (
                                            Q[k1, aslot, s1, y, w, r]
                                            * Xp[lab3, row3, r]
                                            * x4
                                        )
                                tot += w2 * acc
                out[k1, q1, j] += bup * th1 * tot


@njit(cache=True)
def _s4_pf1i(Q, Xm, theta, A, add, sub, neg, offs, omega, case1, bdown, out):
    # pair(first) x field(second) cross terms, source branch one; everything
    # kappa-dependent (including the third exponential element) was folded
    # into the Q build, so only the fourth element and vertex scalars remain.
    n = add.shape[0]
    iz = n // 2
    if case1 == 0:
        s_lo, s_hi = iz, iz + 1
    else:
        s_lo, s_hi = 0, n
    for j in range(3):
        off = offs[j]
        for k1 in range(n):
            q2 = sub[k1, off]
            nq2 = neg[q2]
            for q1 in range(n):
                k2 = add[q1, off]
                tot = 0.0 + 0.0j
                for s1 in range(s_lo, s_hi):
                    if case1 == 0:
                        scal = (omega / n) * theta[neg[k1]] + 0.0j
                        K4 = k2
                    elif case1 == 1:
                        scal = (
                            -(omega * omega / (n * n))
                            * A[neg[k1], neg[s1]]
                            * theta[neg[k1]]
                        )
                        K4 = sub[k2, s1]
                    else:
                        scal = (
                            -(omega * omega / (n * n))
                            * np.conj(A[neg[k1], s1])
                            * theta[neg[add[k1, s1]]]
                        )
                        K4 = k2
                    if scal == 0:
                        continue
                    acc = 0.0 + 0.0j
                    for y in range(n):
                        for w in range(n):
                            x4 = Xm[sub[K4, w], nq2, neg[w]]
                            if x4 == 0:
                                continue
                            for r in range(n):
                                acc += Q[k1, q1, s1, y, w, r] * x4
                    tot += scal * acc
                out[k1, q1, j] += bdown * tot


@njit(cache=True)
def _s4_pf1ii(P, Xp, Xm, X0, theta, Jvec, fmat, A, add, sub, neg, offs,
              omega, bdown, out):
    # pair(first) x field(second) cross terms, source branch two: the field
    # transfer is pinned to the later pair's second index, which couples the
    # kappa sum to the externals, so it stays explicit here.
    n = add.shape[0]
    iz = n // 2
    for j in range(3):
        off = offs[j]
        for k1 in range(n):
            q2 = sub[k1, off]
            nq2 = neg[q2]
            for q1 in range(n):
                k2 = add[q1, off]
                tot = 0.0 + 0.0j
                for case1 in range(3):
                    if case1 == 0:
                        s_lo, s_hi = iz, iz + 1
                    else:
                        s_lo, s_hi = 0, n
                    for s1 in range(s_lo, s_hi):
                        if case1 == 0:
                            scal = (omega / n) * theta[neg[k1]] + 0.0j
                            K4 = k2
                            base_k = k1
                        elif case1 == 1:
                            scal = (
                                -(omega * omega / (n * n))
                                * A[neg[k1], neg[s1]]
                                * theta[neg[k1]]
                            )
                            K4 = sub[k2, s1]
                            base_k = k1
                        else:
                            scal = (
                                -(omega * omega / (n * n))
                                * np.conj(A[neg[k1], s1])
                                * theta[neg[add[k1, s1]]]
                            )
                            K4 = k2
                            base_k = add[k1, s1]
                        if scal == 0:
                            continue
                        acc = 0.0 + 0.0j
                        for y in range(n):
                            for kp in range(n):
                                if case1 == 0:
                                    w1 = Jvec[kp] + 0.0j
                                    s2 = sub[k2, kp]
                                    val = -A[neg[k2], sub[kp, k2]]
                                elif case1 == 1:
                                    w1 = fmat[neg[kp], s1]
                                    dsl = sub[k2, s1]
                                    s2 = sub[dsl, kp]
                                    val = -A[neg[dsl], sub[kp, dsl]]
                                else:
                                    w1 = fmat[neg[kp], s1]
                                    s2 = sub[k2, kp]
                                    val = -A[neg[k2], sub[kp, k2]]
                                if s2 != iz:
                                    continue  # conservation on-shell
                                wgt = w1 * val * fmat[neg[y], s2]
                                if wgt == 0:
                                    continue
                                q1x = add[y, s2]
                                row3 = neg[q1x]
                                t2 = add[q1x, q2]
                                hp = add[kp, s1]
                                nkp = neg[kp]
                                for w in range(n):
                                    x4 = Xm[sub[K4, w], nq2, neg[w]]
                                    if x4 == 0:
                                        continue
                                    base = sub[sub[w, t2], K4]
                                    for r in range(n):
                                        u = sub[base, r]
                                        lab0 = add[base_k, u]
                                        lab3 = neg[add[q1x, u]]
                                        acc += (
                                            wgt
                                            * theta[u]
                                            * X0[lab0, u, nkp]
                                            * Xp[lab3, row3, r]
                                            * x4
                                            * P[q1, y, w, hp, r]
                                        )
                        tot += scal * acc
                out[k1, q1, j] += bdown * tot


@njit(cache=True)
def _vv_one_time(Xp, Xm, X0, theta, Jvec, fmat, A, add, sub, neg, offs,
                 omega, bd, bu, bp, out):
    """All staged passes for one time sample; writes into out[(n, n, 3)]."""
    n = add.shape[0]
    coef = np.empty((n, n, n), dtype=np.complex128)
    _coef_p1(X0, theta, add, neg, coef)
    P1 = np.empty((n, n, n, n, n), dtype=np.complex128)
    _contract_p(Xp, Xm, coef, add, sub, neg, P1)
    _coef_p1b(X0, theta, fmat, A, add, sub, neg, omega, coef)
    P1B = np.empty((n, n, n, n, n), dtype=np.complex128)
    _contract_p(Xp, Xm, coef, add, sub, neg, P1B)
    Q = np.empty((n, n, n, n, n, n), dtype=np.complex128)
    one = 1.0 + 0.0j
    # bare-hop first pair
    _build_q_std(P1, X0, theta, Jvec, fmat, add, sub, neg, 0, Q)
    _s4_pp_plain(Q, Xp, Xm, theta, Jvec, A, add, sub, neg, offs, omega, 0, 0, one, out)
    _s4_pp_ca2(Q, Xp, Xm, theta, fmat, A, add, sub, neg, offs, omega, 0, one, out)
    # A-counterterm first pair (shared by the field-field kernel)
    _build_q_std(P1, X0, theta, Jvec, fmat, add, sub, neg, 1, Q)
    _s4_pp_plain(Q, Xp, Xm, theta, Jvec, A, add, sub, neg, offs, omega, 1, 0, one, out)
    _s4_pp_ca2(Q, Xp, Xm, theta, fmat, A, add, sub, neg, offs, omega, 1, one, out)
    _s4_ff(Q, Xp, Xm, theta, fmat, add, sub, neg, offs, omega, bp, out)
    # A*-counterterm first pair
    _build_q_std(P1, X0, theta, Jvec, fmat, add, sub, neg, 2, Q)
    _s4_pp_plain(Q, Xp, Xm, theta, Jvec, A, add, sub, neg, offs, omega, 2, 0, one, out)
    _s4_pp_ca2(Q, Xp, Xm, theta, fmat, A, add, sub, neg, offs, omega, 2, one, out)
    # second pair = folded A*-counterterm chain
    _build_q_std(P1B, X0, theta, Jvec, fmat, add, sub, neg, 0, Q)
    _s4_pp_plain(Q, Xp, Xm, theta, Jvec, A, add, sub, neg, offs, omega, 0, 1, one, out)
    _build_q_std(P1B, X0, theta, Jvec, fmat, add, sub, neg, 1, Q)
    _s4_pp_plain(Q, Xp, Xm, theta, Jvec, A, add, sub, neg, offs, omega, 1, 1, one, out)
    _build_q_std(P1B, X0, theta, Jvec, fmat, add, sub, neg, 2, Q)
    _s4_pp_plain(Q, Xp, Xm, theta, Jvec, A, add, sub, neg, offs, omega, 2, 1, one, out)
    # field first pair: field x pair cross terms
    _build_q_std(P1, X0, theta, Jvec, fmat, add, sub, neg, 3, Q)
    _s4_pf2(Q, Xp, Xm, theta, Jvec, fmat, A, add, sub, neg, offs, omega, 0, bu, out)
    _s4_pf2(Q, Xp, Xm, theta, Jvec, fmat, A, add, sub, neg, offs, omega, 1, bu, out)
    _s4_pf2(Q, Xp, Xm, theta, Jvec, fmat, A, add, sub, neg, offs, omega, 2, bu, out)
    # pair x field cross terms, branch one (folded) and branch two (explicit)
    _build_q_pf1i(P1, Xp, X0, theta, Jvec, fmat, A, add, sub, neg, 0, Q)
    _s4_pf1i(Q, Xm, theta, A, add, sub, neg, offs, omega, 0, bd, out)
    _build_q_pf1i(P1, Xp, X0, theta, Jvec, fmat, A, add, sub, neg, 1, Q)
    _s4_pf1i(Q, Xm, theta, A, add, sub, neg, offs, omega, 1, bd, out)
    _build_q_pf1i(P1, Xp, X0, theta, Jvec, fmat, A, add, sub, neg, 2, Q)
    _s4_pf1i(Q, Xm, theta, A, add, sub, neg, offs, omega, 2, bd, out)
    _s4_pf1ii(P1, Xp, Xm, X0, theta, Jvec, fmat, A, add, sub, neg, offs, omega, bd, out)


@njit(parallel=True, cache=True)
def _vv_batch(Xp, Xm, X0, theta, Jvec, fmat, A, add, sub, neg, offs, omega,
              bd, bu, bp):
    nt = Xp.shape[0]
    n = X0.shape[0]
    out = np.zeros((nt, n, n, 3), dtype=np.complex128)
    for it in prange(nt):
        _vv_one_time(
            Xp[it], Xm[it], X0, theta, Jvec, fmat, A, add, sub, neg, offs,
            omega, bd[it], bu[it], bp[it], out[it],
        )
    return out


# ----------------------------------------------------------------------
# time-separable pieces assembled in Python
# ----------------------------------------------------------------------

def _twotwo(ctx, k3, s1, k4, s2, a1, a2, b1, b2):
    add = ctx.grid.add_table
    t1 = two_theta_avg(ctx, add[k3, s1], a1, k3, a2)
    if t1 == 0:
        return 0j
    return t1 * two_theta_avg(ctx, add[k4, s2], b1, k4, b2)


def _static_coeff_tables(ctx: CorrelationContext, offs):
    """Thermal-product subtraction, collected per time bracket.

    Mirrors the correlation assembly with the four-operator average replaced
    by the product of static pair averages; returns the coefficient of 1,
    psi_down, psi_up and psi_psi for every on-shell tuple.
    """
    g = ctx.grid
    n = g.n
    add, sub, neg = g.add_table, g.sub_table, g.neg_table
    J, A, f, w = ctx.transfer, ctx.A, ctx.f, ctx.params.omega
    iz = g.zero
    c_pp = np.zeros((n, n, 3), dtype=_C)
    c_dn = np.zeros((n, n, 3), dtype=_C)
    c_up = np.zeros((n, n, 3), dtype=_C)
    c_ps = np.zeros((n, n, 3), dtype=_C)
    root = 1.0 / np.sqrt(n)

    def pair_sources(a, b, c, d, q):
        val = 0j
        if sub[b, a] == q:
            val += A[neg[b], sub[a, b]]
        if sub[d, c] == q:
            val -= A[neg[d], sub[c, d]]
        return val * root

    for j in range(3):
        off = offs[j]
        for k1 in range(n):
            q2 = sub[k1, off]
            for q1 in range(n):
                k2 = add[q1, off]
                # field-field static (bracket psi_psi)
                acc = 0j
                for k3 in range(n):
                    for s1 in range(n):
                        c1 = w * f[neg[k3], s1]
                        if c1 == 0:
                            continue
                        t1 = two_theta_avg(ctx, add[k3, s1], k1, k3, k2)
                        if t1 == 0:
                            continue
                        ns1 = neg[s1]
                        for k4 in range(n):
                            c2 = w * f[neg[k4], ns1]
                            if c2 == 0:
                                continue
                            acc += c1 * c2 * t1 * two_theta_avg(
                                ctx, add[k4, ns1], q1, k4, q2
                            )
                c_ps[k1, q1, j] = acc / n
                if k1 != k2:
                    continue  # every pair-shape static vanishes off-shell
                # pair-pair statics (no bracket)
                acc = 0j
                for k3 in range(n):
                    tj1 = two_theta_avg(ctx, k3, k1, k3, k2)
                    for k4 in range(n):
                        if tj1 != 0:
                            acc += J[k3] * J[k4] * tj1 * two_theta_avg(
                                ctx, k4, q1, k4, q2
                            )
                        for s2 in range(n):
                            c = J[k3] * w * f[neg[k4], s2] / n
                            if c != 0 and tj1 != 0:
                                acc -= c * tj1 * (
                                    A[neg[q1], neg[s2]]
                                    * two_theta_avg(ctx, add[k4, s2], q1, k4, sub[q2, s2])
                                    + np.conj(A[neg[q1], s2])
                                    * two_theta_avg(ctx, add[k4, s2], add[q1, s2], k4, q2)
                                )
                        for s1 in range(n):
                            c = J[k4] * w * f[neg[k3], s1] / n
                            if c != 0:
                                tq = two_theta_avg(ctx, k4, q1, k4, q2)
                                if tq != 0:
                                    acc -= c * tq * (
                                        A[neg[k1], neg[s1]]
                                        * two_theta_avg(ctx, add[k3, s1], k1, k3, sub[k2, s1])
                                        + np.conj(A[neg[k1], s1])
                                        * two_theta_avg(ctx, add[k3, s1], add[k1, s1], k3, k2)
                                    )
                        for s1 in range(n):
                            for s2 in range(n):
                                c = w * w * f[neg[k3], s1] * f[neg[k4], s2] / (n * n)
                                if c == 0:
                                    continue
                                dn1 = A[neg[k1], neg[s1]]
                                up1 = np.conj(A[neg[k1], s1])
                                dn2 = A[neg[q1], neg[s2]]
                                up2 = np.conj(A[neg[q1], s2])
                                acc += c * (
                                    dn1 * dn2 * _twotwo(ctx, k3, s1, k4, s2, k1, sub[k2, s1], q1, sub[q2, s2])
                                    + dn1 * up2 * _twotwo(ctx, k3, s1, k4, s2, k1, sub[k2, s1], add[q1, s2], q2)
                                    + up1 * dn2 * _twotwo(ctx, k3, s1, k4, s2, add[k1, s1], k2, q1, sub[q2, s2])
                                    + up1 * up2 * _twotwo(ctx, k3, s1, k4, s2, add[k1, s1], k2, add[q1, s2], q2)
                                )
                c_pp[k1, q1, j] = acc
                # pair x field statics (bracket psi_down)
                acc = 0j
                for k3 in range(n):
                    for k4 in range(n):
                        for s2 in range(n):
                            c = root * J[k3] * w * f[neg[k4], s2]
                            if c == 0:
                                continue
                            src = pair_sources(k1, k3, k3, k2, s2)
                            if src != 0:
                                acc += c * src * _twotwo(ctx, k3, iz, k4, s2, k1, k2, q1, q2)
                        for s1 in range(n):
                            for s2 in range(n):
                                c = root * w * w * f[neg[k3], s1] * f[neg[k4], s2] / n
                                if c == 0:
                                    continue
                                src = pair_sources(k1, add[k3, s1], k3, sub[k2, s1], s2)
                                if src != 0:
                                    acc -= c * A[neg[k1], neg[s1]] * src * _twotwo(
                                        ctx, k3, s1, k4, s2, k1, sub[k2, s1], q1, q2)
                                src = pair_sources(add[k1, s1], add[k3, s1], k3, k2, s2)
                                if src != 0:
                                    acc -= c * np.conj(A[neg[k1], s1]) * src * _twotwo(
                                        ctx, k3, s1, k4, s2, add[k1, s1], k2, q1, q2)
                c_dn[k1, q1, j] = acc
                # field x pair statics (bracket psi_up)
                acc = 0j
                for k3 in range(n):
                    for k4 in range(n):
                        for s1 in range(n):
                            c = root * J[k4] * w * f[neg[k3], s1]
                            if c == 0:
                                continue
                            src = pair_sources(q1, k4, k4, q2, s1)
                            if src != 0:
                                acc += c * src * _twotwo(ctx, k3, s1, k4, iz, k1, k2, q1, q2)
                        for s1 in range(n):
                            for s2 in range(n):
                                c = root * w * w * f[neg[k3], s1] * f[neg[k4], s2] / n
                                if c == 0:
                                    continue
                                src = pair_sources(q1, add[k4, s2], k4, sub[q2, s2], s1)
                                if src != 0:
                                    acc -= c * A[neg[q1], neg[s2]] * src * _twotwo(
                                        ctx, k3, s1, k4, s2, k1, k2, q1, sub[q2, s2])
                                src = pair_sources(add[q1, s2], add[k4, s2], k4, q2, s1)
                                if src != 0:
                                    acc -= c * np.conj(A[neg[q1], s2]) * src * _twotwo(
                                        ctx, k3, s1, k4, s2, k1, k2, add[q1, s2], q2)
                c_up[k1, q1, j] = acc
    return c_pp, c_dn, c_up, c_ps


def _ffsrc_coeff_tables(ctx: CorrelationContext, offs):
    """Crossed one-phonon source products, as bilinears in the two
    single-frequency brackets n e^{-iwt} decay and (n+1) e^{+iwt} decay."""
    g = ctx.grid
    n = g.n
    add, sub, neg = g.add_table, g.sub_table, g.neg_table
    A, f, w = ctx.A, ctx.f, ctx.params.omega
    c_mm = np.zeros((n, n, 3), dtype=_C)
    c_mp = np.zeros((n, n, 3), dtype=_C)
    c_pp = np.zeros((n, n, 3), dtype=_C)
    root = 1.0 / np.sqrt(n)

    def source_coeffs(a, b, c, d, q):
        # coefficients (of the 'down' and 'up' bracket) in the one-phonon
        # source average, mirroring the straight-line evaluator
        cd = 0j
        cu = 0j
        if c == d and sub[a, b] == q:
            cd += np.conj(A[a, sub[a, b]])
            cu -= A[b, sub[b, a]]
        if a == b and sub[d, c] == q:
            cu += A[c, sub[c, d]]
            cd -= np.conj(A[d, sub[d, c]])
        return cd * root, cu * root

    for j in range(3):
        off = offs[j]
        for k1 in range(n):
            q2 = sub[k1, off]
            for q1 in range(n):
                k2 = add[q1, off]
                mm = 0j
                mp = 0j
                pp = 0j
                for k3 in range(n):
                    for s1 in range(n):
                        c1 = w * f[neg[k3], s1]
                        if c1 == 0:
                            continue
                        for s2 in range(n):
                            le, lp = source_coeffs(add[k3, s1], k1, k3, k2, s2)
                            if le == 0 and lp == 0:
                                continue
                            for k4 in range(n):
                                c2 = w * f[neg[k4], s2]
                                if c2 == 0:
                                    continue
                                # right factor has the brackets exchanged
                                rp, re = source_coeffs(add[k4, s2], q1, k4, q2, s1)
                                if re == 0 and rp == 0:
                                    continue
                                cc = c1 * c2
                                mm += cc * le * re
                                mp += cc * (le * rp + lp * re)
                                pp += cc * lp * rp
                c_mm[k1, q1, j] = mm / n
                c_mp[k1, q1, j] = mp / n
                c_pp[k1, q1, j] = pp / n
    return c_mm, c_mp, c_pp


# ----------------------------------------------------------------------
# public assembly
# ----------------------------------------------------------------------

def correlation_tables(ctx: CorrelationContext, t_arr, *, force_general: bool = False) -> np.ndarray:
    """Subtracted correlation tables <V V(t)> over the on-shell tuple family.

    Returns a complex array of shape (len(t_arr), N, N, 3) indexed
    [time, k1, q1, offset]; see the module docstring for the tuple layout.
    Negative times are allowed.  ``force_general`` bypasses the
    uniform-dressing closed form (used by the equivalence tests).
    """
    offs = momentum_offsets(ctx.grid)
    t_arr = np.asarray(t_arr, dtype=np.float64)
    if not force_general and uses_uniform_path(ctx):
        return _uniform_tables(ctx, t_arr, offs)
    grid, params = ctx.grid, ctx.params
    Xp, Xm, X0 = build_exp_stacks(ctx, t_arr)
    br = phonon_propagators(params.temperature, t_arr, params)
    bd = np.asarray(br.psi_down, dtype=_C).reshape(-1)
    bu = np.asarray(br.psi_up, dtype=_C).reshape(-1)
    bp = np.asarray(br.psi_psi, dtype=_C).reshape(-1)
    theta = np.asarray(ctx.theta, dtype=np.float64)
    raw = _vv_batch(
        Xp, Xm, X0, theta,
        np.asarray(ctx.transfer, dtype=np.float64),
        np.asarray(ctx.f, dtype=_C),
        np.asarray(ctx.A, dtype=_C),
        grid.add_table, grid.sub_table, grid.neg_table, offs,
        float(params.omega), bd, bu, bp,
    )
    c_pp, c_dn, c_up, c_ps = _static_coeff_tables(ctx, offs)
    out = raw
    out -= c_pp[None, :, :, :]
    out -= bd[:, None, None, None] * c_dn[None]
    out -= bu[:, None, None, None] * c_up[None]
    out -= bp[:, None, None, None] * c_ps[None]
    em = 0.5 * (bp + bd)
    ep = 0.5 * (bp - bd)
    c_mm, c_mp, c_pp2 = _ffsrc_coeff_tables(ctx, offs)
    out += (em * em)[:, None, None, None] * c_mm[None]
    out += (em * ep)[:, None, None, None] * c_mp[None]
    out += (ep * ep)[:, None, None, None] * c_pp2[None]
    if not np.all(np.isfinite(out)):
        raise NumericalBreakdown("correlation table evaluation overflowed")
    return out


def conjugate_swap_tables(vv: np.ndarray, grid, offs=None) -> np.ndarray:
    """Reversed-time tables from Hermitian conjugation of the coupling.

    <V_ab V_cd(-t)> = conj(<V_dc V_ba(t)>); on the on-shell family the swap
    maps entry (k1, q1, off) to (k1 - off, q1 + off, -off), so the negative-
    time table is a relabeling of the positive-time one.
    """
    if offs is None:
        offs = momentum_offsets(grid)
    add, sub = grid.add_table, grid.sub_table
    n = grid.n
    out = np.empty_like(vv)
    jneg = (0, 2, 1)
    for j in range(3):
        off = offs[j]
        for k1 in range(n):
            for q1 in range(n):
                out[:, k1, q1, j] = np.conj(
                    vv[:, sub[k1, off], add[q1, off], jneg[j]]
                )
    return out
