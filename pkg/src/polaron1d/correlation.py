"""Thermal correlation functions of the dressing operators.

The dressed-exciton machinery needs three nested averages over the phonon
bath, all expressible through matrix exponentials of the dressing-exponent
stack E^q(t) = P(t) C^q (see :func:`polaron1d.scf.shift_bilinear`):

* :func:`two_theta_avg` — the pair average
  <theta†_{k k'} theta_{q q'}(t)>, nonzero only on the momentum-conserving
  shell k - k' = q - q'.
* :func:`four_theta_avg` — the four-operator average with two static and two
  time-evolved factors, written as a triple lattice sum over internal
  wavevector transfers weighted by six exponential-matrix elements.
* :func:`vv_correlation` — the autocorrelation <V_{k1 k2} V_{q1 q2}(t)> of
  the residual coupling left over after the dressing transformation.  It is
  assembled from three blocks: the correlation of the theta-pair parts of V
  with themselves (:func:`_pair_pair_part`), the cross terms between a
  theta-pair part and the symmetrised one-phonon field
  (:func:`_pair_field_part`), and the field-field terms
  (:func:`_field_field_part`).

Everything here is straight-line evaluation of the closed forms at one
(index-tuple, time) point; no attempt is made to batch.  The production rate
integrals in :mod:`polaron1d.transport` use a compiled engine instead, which
is cross-checked against this module in the test suite.

All momentum arguments are *grid indices* (see MomentumGrid); modular
arithmetic goes through the grid's integer tables so that no floating-point
wrapping is involved anywhere.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidParameter, NumericalBreakdown
from .lattice import ModelParams, MomentumGrid, bare_transfer, coupling_matrix, make_grid
from .propagators import p_factor, phonon_propagators
from .scf import matrix_exp, shift_bilinear, theta_avg, build_E

__all__ = [
    "CorrelationContext",
    "make_context",
    "context_from_solution",
    "exp_shift",
    "exp_shift_direct",
    "two_theta_avg",
    "four_theta_avg",
    "vv_correlation",
]


class CorrelationContext:
    """Precomputed, reusable state for correlation evaluations at fixed model.

    Holds the converged shift amplitudes ``A``, the narrowing factors
    ``theta``, the static bilinear stack ``C`` (so E^q(t) = P(t) C^q), the
    transfer harmonics and the bare coupling matrix.  Each q-slice of ``C``
    gets an eigendecomposition so that the many matrix exponentials needed
    along a time grid cost two small matrix products apiece; slices whose
    eigenbasis reconstructs poorly fall back to a dense expm per call.

    Matrix exponentials are memoized per (q, sign, t):
    :func:`exp_shift` consults the cache, :func:`exp_shift_direct` bypasses
    it (used to verify that caching changes nothing, bit for bit).
    """

    def __init__(self, params: ModelParams, A: np.ndarray, grid: MomentumGrid | None = None):
        if grid is None:
            grid = make_grid(params.n_sites)
        A = np.asarray(A, dtype=np.complex128)
        if A.shape != (grid.n, grid.n):
            raise InvalidParameter(f"A must be {(grid.n, grid.n)}, got {A.shape}")
        self.params = params
        self.grid = grid
        self.A = A
        self.C = shift_bilinear(A, grid)
        self.theta = theta_avg(build_E(A, grid, params, 0.0))
        self.transfer = bare_transfer(grid, params)
        self.f = coupling_matrix(grid, params)
        self._eig = []
        for qi in range(grid.n):
            self._eig.append(self._try_eig(self.C[qi]))
        self._cache: dict = {}

    @staticmethod
    def _try_eig(M: np.ndarray):
        """Eigen-factor one slice, or None if the basis is untrustworthy."""
        lam, V = np.linalg.eig(M)
        try:
            Vinv = np.linalg.inv(V)
        except np.linalg.LinAlgError:
            return None
        recon = (V * lam) @ Vinv
        scale = max(1.0, np.abs(M).max())
        if np.abs(recon - M).max() > 1e-13 * scale:
            return None
        return lam, V, Vinv

    def clear_cache(self) -> None:
        self._cache.clear()


def make_context(params: ModelParams, A: np.ndarray, grid: MomentumGrid | None = None) -> CorrelationContext:
    """Bundle model parameters and shift amplitudes for correlation work."""
    return CorrelationContext(params, A, grid)


def context_from_solution(solution) -> CorrelationContext:
    """Context straight from a converged SCFSolution."""
    return CorrelationContext(solution.params, solution.A, solution.grid)


def exp_shift_direct(ctx: CorrelationContext, qi: int, sign: int, t: float) -> np.ndarray:
    """exp(sign * E^q(t)) for one q-slice, computed afresh."""
    pf = p_factor(ctx.params.temperature, t, ctx.params)
    factor = sign * pf
    eig = ctx._eig[qi]
    if eig is None:
        out = matrix_exp(factor * ctx.C[qi])
    else:
        lam, V, Vinv = eig
        out = (V * np.exp(factor * lam)) @ Vinv
    if not np.all(np.isfinite(out)):
        raise NumericalBreakdown("dressing exponential overflowed")
    return out


def exp_shift(ctx: CorrelationContext, qi: int, sign: int, t: float) -> np.ndarray:
    """Memoized exp(sign * E^q(t)); identical to the direct evaluation."""
    key = (qi, sign, t)
    out = ctx._cache.get(key)
    if out is None:
        out = exp_shift_direct(ctx, qi, sign, t)
        ctx._cache[key] = out
    return out


def _exp_tables(ctx: CorrelationContext, t: float):
    """Stacked (N,N,N) tables of exp(+E^q(t)) and exp(-E^q(t)) over q."""
    n = ctx.grid.n
    plus = np.empty((n, n, n), dtype=np.complex128)
    minus = np.empty((n, n, n), dtype=np.complex128)
    for qi in range(n):
        plus[qi] = exp_shift(ctx, qi, +1, t)
        minus[qi] = exp_shift(ctx, qi, -1, t)
    return plus, minus


def two_theta_avg(ctx: CorrelationContext, k: int, kp: int, q: int, qp: int, t: float = 0.0) -> complex:
    """Pair average <theta†_{k k'} theta_{q q'}(t)>.

    Vanishes unless k - k' = q - q'; on the conserving shell it equals
    <theta_{-k'}> [exp(E^{k-q}(t))]_{-q', -q} <theta_{-q'}>.
    """
    g = ctx.grid
    if g.sub_table[k, kp] != g.sub_table[q, qp]:
        return 0j
    X = exp_shift(ctx, g.sub_table[k, q], +1, t)
    nkp, nq, nqp = g.neg_table[kp], g.neg_table[q], g.neg_table[qp]
    return complex(ctx.theta[nkp] * X[nqp, nq] * ctx.theta[nqp])


def four_theta_avg(ctx: CorrelationContext, indices, t: float = 0.0) -> complex:
    """Four-operator average <theta†_{k1 k2} theta_{k3 k4} theta†_{q1 q2}(t) theta_{q3 q4}(t)>.

    Evaluated as the closed triple sum over internal transfers (r1, r2, r3):
    two static pair averages carrying r1 and r2, four exponential-matrix
    elements tying everything together, and the overall conservation rule
    k1 + q1 + k4 + q4 = k2 + q2 + k3 + q3.  The r1 and r2 sums are contracted
    as one matrix-vector product per r3; the brute-force triple loop in the
    test suite checks this grouping.
    """
    k1, k2, k3, k4, q1, q2, q3, q4 = indices
    g = ctx.grid
    add, sub, neg = g.add_table, g.sub_table, g.neg_table
    lhs = add[add[k1, q1], add[k4, q4]]
    rhs = add[add[k2, q2], add[k3, q3]]
    if lhs != rhs:
        return 0j
    n = g.n
    plus_t, minus_t = _exp_tables(ctx, t)
    plus_0, _ = _exp_tables(ctx, 0.0)
    r = np.arange(n)
    theta = ctx.theta

    # Static pair averages over the two internal transfers:
    #   S2a(r1) = <theta†_{k2+r1, k2} theta_{k3, k3-r1}>
    #   S2b(r2) = <theta†_{q2+r2, q2} theta_{q3, q3-r2}>
    lab_a = sub[add[k2, r], k3]
    row_a = sub[r, k3]
    s2a = theta[neg[k2]] * plus_0[lab_a, row_a, neg[k3]] * theta[row_a]
    lab_b = sub[add[q2, r], q3]
    row_b = sub[r, q3]
    s2b = theta[neg[q2]] * plus_0[lab_b, row_b, neg[q3]] * theta[row_b]

    # Exponential-factor labels/elements that depend on a single transfer:
    lab2 = sub[add[k1, r], q3]          # exp(+E^{k1+r2-q3}) element [-q4-r3, r2-q3]
    col2 = sub[r, q3]
    lab3 = sub[sub[k3, q1], r]          # exp(+E^{k3-q1-r1}) element [-q1, k3+r3-q1-k4-r1]
    total = 0j
    base13 = sub[sub[k3, q1], k4]       # k3 - q1 - k4
    for r3 in range(n):
        row13 = sub[add[base13, r3], r]                     # k3+r3-q1-k4-r1 over r1
        x4 = minus_t[sub[sub[k4, q4], r3], neg[q4], neg[add[q4, r3]]]
        lab1 = sub[sub[add[add[k1, q4], r3], q2], q3]       # k1+q4+r3-q2-q3
        x1 = minus_t[lab1][row13[:, None], neg[add[q2, r]][None, :]]
        x2 = plus_t[lab2, neg[add[q4, r3]], col2]
        x3 = plus_t[lab3, neg[q1], row13]
        total += x4 * ((s2a * x3) @ (x1 @ (s2b * x2)))
    return complex(total)


def _tt(ctx: CorrelationContext, t: float, k3: int, s1: int, k4: int, s2: int,
        a1: int, a2: int, b1: int, b2: int) -> complex:
    """Subtracted pair-fluctuation kernel.

    <T_{k3+s1, a1; k3, a2} T_{k4+s2, b1; k4, b2}(t)> where T is a theta†theta
    pair minus its thermal mean; the subtraction removes the product of the
    two static pair averages.
    """
    g = ctx.grid
    add = g.add_table
    four = four_theta_avg(
        ctx, (add[k3, s1], a1, k3, a2, add[k4, s2], b1, k4, b2), t
    )
    stat = two_theta_avg(ctx, add[k3, s1], a1, k3, a2) * two_theta_avg(
        ctx, add[k4, s2], b1, k4, b2
    )
    return four - stat


def _pair_pair_part(ctx: CorrelationContext, k1: int, k2: int, q1: int, q2: int, t: float) -> complex:
    """Correlation of the theta-pair parts of V (transfer term and the two
    shift counterterms) with themselves."""
    g = ctx.grid
    n = g.n
    add, sub, neg = g.add_table, g.sub_table, g.neg_table
    J, A, f, w = ctx.transfer, ctx.A, ctx.f, ctx.params.omega
    total = 0j
    for k3 in range(n):
        for k4 in range(n):
            total += J[k3] * J[k4] * _tt(ctx, t, k3, g.zero, k4, g.zero, k1, k2, q1, q2)
            for s2 in range(n):
                c = J[k3] * w * f[neg[k4], s2] / n
                if c != 0:
                    total -= c * (
                        A[neg[q1], neg[s2]] * _tt(ctx, t, k3, g.zero, k4, s2, k1, k2, q1, sub[q2, s2])
                        + np.conj(A[neg[q1], s2]) * _tt(ctx, t, k3, g.zero, k4, s2, k1, k2, add[q1, s2], q2)
                    )
            for s1 in range(n):
                c = J[k4] * w * f[neg[k3], s1] / n
                if c != 0:
                    total -= c * (
                        A[neg[k1], neg[s1]] * _tt(ctx, t, k3, s1, k4, g.zero, k1, sub[k2, s1], q1, q2)
                        + np.conj(A[neg[k1], s1]) * _tt(ctx, t, k3, s1, k4, g.zero, add[k1, s1], k2, q1, q2)
                    )
            for s1 in range(n):
                for s2 in range(n):
                    c = w * w * f[neg[k3], s1] * f[neg[k4], s2] / (n * n)
                    if c == 0:
                        continue
                    down1, up1 = A[neg[k1], neg[s1]], np.conj(A[neg[k1], s1])
                    down2, up2 = A[neg[q1], neg[s2]], np.conj(A[neg[q1], s2])
                    total += c * (
                        down1 * down2 * _tt(ctx, t, k3, s1, k4, s2, k1, sub[k2, s1], q1, sub[q2, s2])
                        + down1 * up2 * _tt(ctx, t, k3, s1, k4, s2, k1, sub[k2, s1], add[q1, s2], q2)
                        + up1 * down2 * _tt(ctx, t, k3, s1, k4, s2, add[k1, s1], k2, q1, sub[q2, s2])
                        + up1 * up2 * _tt(ctx, t, k3, s1, k4, s2, add[k1, s1], k2, add[q1, s2], q2)
                    )
    return total


def _pair_field_sources(ctx, a, b, c, d, q, bracket):
    """One-phonon source average of a pair fluctuation against the field.

    <Z_{a,b;c,d} psi_q(t)> (or the reversed order, depending on ``bracket``)
    = [A_{-b}^{a-b} delta_{b-a,q} - A_{-d}^{c-d} delta_{d-c,q}] * bracket / sqrt(N).
    """
    g = ctx.grid
    sub, neg = g.sub_table, g.neg_table
    A = ctx.A
    val = 0j
    if sub[b, a] == q:
        val += A[neg[b], sub[a, b]]
    if sub[d, c] == q:
        val -= A[neg[d], sub[c, d]]
    if val == 0:
        return 0j
    return val * bracket / np.sqrt(g.n)


def _one_phonon_source(ctx, a, b, c, d, q, down, up):
    """Leading-order average of a pair fluctuation against one field operator.

    <Z_{a,b;c,d} psi_q(t)> with (down, up) = (n e^{-iwt}, (n+1) e^{+iwt})
    brackets, or the reversed order <psi_q Z_{a,b;c,d}(t)> with the two
    brackets exchanged:

        delta_{c,d} delta_{q,a-b} [conj(A_a^{a-b}) down - A_b^{b-a} up]
      + delta_{a,b} delta_{q,d-c} [A_c^{c-d} up - conj(A_d^{d-c}) down],
      all over sqrt(N).

    Each term expands one dressing factor of the pair to single-phonon order;
    the other factor only survives the thermal trace on its lattice diagonal,
    which is the companion Kronecker delta, and the two frequency components
    pick up different shift-amplitude cells (they coincide only for constant
    A).  Cell assignment, q pinning, signs and thermal weights are all fixed
    against the dense phonon-space trace of the pair-fluctuation operator.
    """
    g = ctx.grid
    sub = g.sub_table
    A = ctx.A
    val = 0j
    if c == d and sub[a, b] == q:
        val += np.conj(A[a, sub[a, b]]) * down - A[b, sub[b, a]] * up
    if a == b and sub[d, c] == q:
        val += A[c, sub[c, d]] * up - np.conj(A[d, sub[d, c]]) * down
    if val == 0:
        return 0j
    return val / np.sqrt(g.n)


def _pair_field_part(ctx: CorrelationContext, k1: int, k2: int, q1: int, q2: int, t: float) -> complex:
    """Cross terms between a theta-pair part of one V factor and the
    symmetrised one-phonon field of the other."""
    g = ctx.grid
    n = g.n
    add, sub, neg = g.add_table, g.sub_table, g.neg_table
    J, A, f, w = ctx.transfer, ctx.A, ctx.f, ctx.params.omega
    br = phonon_propagators(ctx.params.temperature, t, ctx.params)
    root = 1.0 / np.sqrt(n)
    total = 0j
    # Pair part of the first factor against the field of the second (the
    # source average carries the later time, bracket psi_down).
    for k3 in range(n):
        for k4 in range(n):
            for s2 in range(n):
                c = root * J[k3] * w * f[neg[k4], s2]
                if c == 0:
                    continue
                src = _pair_field_sources(ctx, k1, k3, k3, k2, s2, br.psi_down)
                if src != 0:
                    total += c * src * _tt(ctx, t, k3, g.zero, k4, s2, k1, k2, q1, q2)
            for s1 in range(n):
                for s2 in range(n):
                    c = root * w * w * f[neg[k3], s1] * f[neg[k4], s2] / n
                    if c == 0:
                        continue
                    src = _pair_field_sources(
                        ctx, k1, add[k3, s1], k3, sub[k2, s1], s2, br.psi_down
                    )
                    if src != 0:
                        total -= c * A[neg[k1], neg[s1]] * src * _tt(
                            ctx, t, k3, s1, k4, s2, k1, sub[k2, s1], q1, q2
                        )
                    src = _pair_field_sources(
                        ctx, add[k1, s1], add[k3, s1], k3, k2, s2, br.psi_down
                    )
                    if src != 0:
                        total -= c * np.conj(A[neg[k1], s1]) * src * _tt(
                            ctx, t, k3, s1, k4, s2, add[k1, s1], k2, q1, q2
                        )
    # Field of the first factor against the pair part of the second (source
    # average with reversed operator order, bracket psi_up).
    for k3 in range(n):
        for k4 in range(n):
            for s1 in range(n):
                c = root * J[k4] * w * f[neg[k3], s1]
                if c == 0:
                    continue
                src = _pair_field_sources(ctx, q1, k4, k4, q2, s1, br.psi_up)
                if src != 0:
                    total += c * src * _tt(ctx, t, k3, s1, k4, g.zero, k1, k2, q1, q2)
            for s1 in range(n):
                for s2 in range(n):
                    c = root * w * w * f[neg[k3], s1] * f[neg[k4], s2] / n
                    if c == 0:
                        continue
                    src = _pair_field_sources(
                        ctx, q1, add[k4, s2], k4, sub[q2, s2], s1, br.psi_up
                    )
                    if src != 0:
                        total -= c * A[neg[q1], neg[s2]] * src * _tt(
                            ctx, t, k3, s1, k4, s2, k1, k2, q1, sub[q2, s2]
                        )
                    src = _pair_field_sources(
                        ctx, add[q1, s2], add[k4, s2], k4, q2, s1, br.psi_up
                    )
                    if src != 0:
                        total -= c * np.conj(A[neg[q1], s2]) * src * _tt(
                            ctx, t, k3, s1, k4, s2, k1, k2, add[q1, s2], q2
                        )
    return total


def _field_field_part(ctx: CorrelationContext, k1: int, k2: int, q1: int, q2: int, t: float) -> complex:
    """Correlation of the symmetrised one-phonon fields of the two V factors.

    With V_F(k,k') = (w/2 sqrt(N)) sum_{kappa,q} f_{-kappa}^q {Z, psi_q},
    the four operator orderings pair off into two contractions:

    * the field-field contraction <psi_q psi_{q'}(t)> = delta_{q+q',0} psi_psi
      times the *time-dependent* pair-fluctuation kernel <Z Z'(t)>, and
    * the crossed product of two one-phonon source averages,
      <Z psi_{q'}(t)> <psi_q Z'(t)>.

    Each ordering contributes the same pairings, cancelling the 1/4 of the
    symmetrisation.  For a diagonal-only coupling the summed field operator
    vanishes identically (the site-diagonal dressing makes the kappa sum of
    pair fluctuations collapse by unitarity), and the two pieces here inherit
    that cancellation; the residual of the assembly against the dense-trace
    field-field correlation is bounded by the oracle cross-checks in the test
    suite.
    """
    g = ctx.grid
    n = g.n
    add, neg = g.add_table, g.neg_table
    f, w = ctx.f, ctx.params.omega
    br = phonon_propagators(ctx.params.temperature, t, ctx.params)
    em = 0.5 * (br.psi_psi + br.psi_down)  # n e^{-iwt} x decay
    ep = 0.5 * (br.psi_psi - br.psi_down)  # (n+1) e^{+iwt} x decay
    total = 0j
    for k3 in range(n):
        for s1 in range(n):
            c1 = w * f[neg[k3], s1]
            if c1 == 0:
                continue
            for k4 in range(n):
                c2 = w * f[neg[k4], neg[s1]]
                if c2 != 0:
                    total += c1 * c2 * br.psi_psi * _tt(
                        ctx, t, k3, s1, k4, neg[s1], k1, k2, q1, q2
                    )
                for s2 in range(n):
                    c2 = w * f[neg[k4], s2]
                    if c2 == 0:
                        continue
                    left = _one_phonon_source(
                        ctx, add[k3, s1], k1, k3, k2, s2, em, ep
                    )
                    if left == 0:
                        continue
                    right = _one_phonon_source(
                        ctx, add[k4, s2], q1, k4, q2, s1, ep, em
                    )
                    if right != 0:
                        total += c1 * c2 * left * right
    return total / n


def vv_correlation(ctx: CorrelationContext, k1: int, k2: int, q1: int, q2: int, t: float) -> complex:
    """Autocorrelation <V_{k1 k2} V_{q1 q2}(t)> of the residual coupling.

    Sum of the pair-pair, pair-field and field-field blocks.  Negative ``t``
    is allowed (used for the reversed-order term of the rate integrals).
    """
    return (
        _pair_pair_part(ctx, k1, k2, q1, q2, t)
        + _pair_field_part(ctx, k1, k2, q1, q2, t)
        + _field_field_part(ctx, k1, k2, q1, q2, t)
    )
