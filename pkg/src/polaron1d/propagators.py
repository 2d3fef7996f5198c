"""One-phonon thermal propagator factors shared by the dressing matrices and
the velocity-velocity correlation functions.

A finite phonon bandwidth ``delta`` enters only through the Gaussian envelope
exp(-delta^2 t^2 / 4) that multiplies every single-phonon bracket, modelling
the dephasing of the (otherwise dispersionless) branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import ModelParams, bose_factor


def gaussian_decay(t, delta: float):
    """Envelope exp(-delta^2 t^2 / 4) from the phonon bandwidth."""
    t = np.asarray(t, dtype=np.float64)
    out = np.exp(-0.25 * (delta * t) ** 2)
    return out if out.ndim else float(out)


def p_factor(temperature: float, t, p: ModelParams):
    """Dressing propagator P(t) = [(2n+1)cos(w t) + i sin(w t)]·decay / N.

    P(0) = (2n+1)/N.  Independent of the phonon wavevector for a single mean
    frequency.  ``t`` may be a scalar or array.
    """
    n = bose_factor(temperature, p.omega)
    t = np.asarray(t, dtype=np.float64)
    wt = p.omega * t
    val = ((2.0 * n + 1.0) * np.cos(wt) + 1j * np.sin(wt)) * gaussian_decay(t, p.delta)
    val = val / p.n_sites
    return val if val.ndim else complex(val)


@dataclass(frozen=True)
class PhononPropagators:
    """The four one-phonon time factors at a common time t.

    p_factor : dressing propagator P(t) (already divided by N).
    psi_down : [n e^{-iwt} - (n+1) e^{+iwt}]·decay
    psi_up   : [(n+1) e^{+iwt} - n e^{-iwt}]·decay  (= -psi_down)
    psi_psi  : [(n+1) e^{+iwt} + n e^{-iwt}]·decay

    The field autocorrelation psi_psi carries the same frequency content as
    P(t) (creation part rotating with e^{+iwt}), which keeps all three
    brackets mutually consistent under complex conjugation / time reversal.
    """

    p_factor: complex
    psi_down: complex
    psi_up: complex
    psi_psi: complex


def phonon_propagators(temperature: float, t, p: ModelParams) -> PhononPropagators:
    """Evaluate all four propagator factors; scalar or array ``t``."""
    n = bose_factor(temperature, p.omega)
    t = np.asarray(t, dtype=np.float64)
    decay = gaussian_decay(t, p.delta)
    em = np.exp(-1j * p.omega * t)
    ep = np.exp(+1j * p.omega * t)
    down = (n * em - (n + 1.0) * ep) * decay
    psipsi = ((n + 1.0) * ep + n * em) * decay
    pf = p_factor(temperature, t, p)
    if t.ndim:
        return PhononPropagators(pf, down, -down, psipsi)
    return PhononPropagators(complex(pf), complex(down), complex(-down), complex(psipsi))
