"""Run configuration: plain-text key=value parsing, defaults, emission, and
the named figure-data presets used by the command line front end.

The on-disk format is a small INI-like dialect::

    preset = fig5            # optional, before any section header

    [model]
    n_sites = 6
    g2 = 0.5                 # squared coupling strengths, g = sqrt(g2)

    [sweep]
    start = 0.5
    stop = 4.0
    count = 8
    spacing = linear         # or "log"; or give "temperatures = 0.5, 1, 2"

    [numerics]
    tol = 1e-10

    [outputs]
    directory = out
    formats = csv, json

Unknown sections or keys are rejected with the 1-based line number.  An empty
file parses to the full default configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError
from .lattice import BAND_CONVENTIONS, ModelParams

KNOWN_FORMATS = ("csv", "json", "gnuplot")

PRESET_NAMES = ("fig1", "fig2", "fig3", "fig4", "fig5", "fig6")


@dataclass(frozen=True)
class SweepSpec:
    """Temperature sweep: an explicit list wins over the (start, stop, count)
    range when non-empty."""

    temperatures: tuple = ()
    start: float = 0.5
    stop: float = 4.0
    count: int = 8
    spacing: str = "linear"

    def values(self) -> tuple:
        if self.temperatures:
            return tuple(float(t) for t in self.temperatures)
        if self.count == 1:
            return (float(self.start),)
        if self.spacing == "log":
            pts = np.geomspace(self.start, self.stop, self.count)
        else:
            pts = np.linspace(self.start, self.stop, self.count)
        return tuple(float(t) for t in pts)


@dataclass(frozen=True)
class NumericsSpec:
    tol: float = 1e-10
    max_iters: int = 200
    damping: float = 0.35
    dt: float = 0.0  # 0 -> automatic step from the band/phonon scales
    t_max_factor: float = 10.0


@dataclass(frozen=True)
class OutputSpec:
    directory: str = "out"
    formats: tuple = ("csv", "json")


@dataclass(frozen=True)
class RunConfig:
    """Complete description of one run cell.

    Couplings are configured as the squared strengths ``g2``/``phi2`` (the
    conventional way the model is parameterized); the amplitudes handed to the
    model are their square roots.
    """

    n_sites: int = 6
    transfer: float = 0.1
    g2: float = 0.5
    phi2: float = 0.0
    omega: float = 1.0
    delta: float = 0.1
    temperature: float = 1.0
    epsilon: float = 0.0
    band_convention: str = "eq5-literal"
    sweep: SweepSpec = field(default_factory=SweepSpec)
    numerics: NumericsSpec = field(default_factory=NumericsSpec)
    outputs: OutputSpec = field(default_factory=OutputSpec)
    preset: str = ""

    def model(self, temperature: float | None = None) -> ModelParams:
        """Materialize the physical parameters, optionally at a sweep point."""
        t = self.temperature if temperature is None else float(temperature)
        return ModelParams(
            n_sites=self.n_sites,
            transfer=self.transfer,
            g=math.sqrt(self.g2),
            phi=math.sqrt(self.phi2),
            omega=self.omega,
            delta=self.delta,
            temperature=t,
            epsilon=self.epsilon,
            band_convention=self.band_convention,
        )

    def sweep_values(self) -> tuple:
        return self.sweep.values()


# ---------------------------------------------------------------------------
# parsing

_MODEL_KEYS = {
    "n_sites": int,
    "transfer": float,
    "g2": float,
    "phi2": float,
    "omega": float,
    "delta": float,
    "temperature": float,
    "epsilon": float,
    "band_convention": str,
}
_SWEEP_KEYS = {
    "temperatures": "floatlist",
    "start": float,
    "stop": float,
    "count": int,
    "spacing": str,
}
_NUMERICS_KEYS = {
    "tol": float,
    "max_iters": int,
    "damping": float,
    "dt": float,
    "t_max_factor": float,
}
_OUTPUT_KEYS = {
    "directory": str,
    "formats": "strlist",
}
_SECTIONS = {
    "model": _MODEL_KEYS,
    "sweep": _SWEEP_KEYS,
    "numerics": _NUMERICS_KEYS,
    "outputs": _OUTPUT_KEYS,
}


def _convert(raw: str, kind, key: str, ln: int):
    raw = raw.strip()
    try:
        if kind is int:
            # reject silent float truncation ("n_sites = 6.5")
            as_float = float(raw)
            as_int = int(as_float)
            if as_int != as_float:
                raise ValueError
            return as_int
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind == "floatlist":
            if not raw:
                return ()
            return tuple(float(tok) for tok in raw.split(","))
        if kind == "strlist":
            if not raw:
                return ()
            return tuple(tok.strip() for tok in raw.split(",") if tok.strip())
    except ValueError:
        raise ConfigError(f"cannot parse value {raw!r} for key {key!r}", ln) from None
    raise ConfigError(f"internal: unknown kind for key {key!r}", ln)


def parse_config(text: str) -> RunConfig:
    """Parse configuration text to a :class:`RunConfig` with defaults filled.

    Raises :class:`ConfigError` (with the 1-based line number) on unknown
    sections/keys, malformed lines, type mismatches, and out-of-range values.
    """
    section = None
    seen: dict[tuple, int] = {}
    top: dict[str, object] = {}
    bags: dict[str, dict] = {name: {} for name in _SECTIONS}

    for ln, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body or body.startswith(";"):
            continue
        if body.startswith("["):
            if not body.endswith("]"):
                raise ConfigError(f"malformed section header {body!r}", ln)
            name = body[1:-1].strip().lower()
            if name not in _SECTIONS:
                raise ConfigError(f"unknown section [{name}]", ln)
            section = name
            continue
        if "=" not in body:
            raise ConfigError(f"expected 'key = value', got {body!r}", ln)
        key, raw = (part.strip() for part in body.split("=", 1))
        if not key:
            raise ConfigError("empty key", ln)
        if (section, key) in seen:
            raise ConfigError(
                f"duplicate key {key!r} (first set on line {seen[(section, key)]})", ln
            )
        seen[(section, key)] = ln
        if section is None:
            if key != "preset":
                raise ConfigError(
                    f"unknown top-level key {key!r} (only 'preset' may appear "
                    "before a section header)", ln
                )
            value = raw.strip()
            if value not in PRESET_NAMES:
                raise ConfigError(
                    f"unknown preset {value!r}; choose from {', '.join(PRESET_NAMES)}", ln
                )
            top["preset"] = value
            continue
        table = _SECTIONS[section]
        if key not in table:
            raise ConfigError(f"unknown key {key!r} in section [{section}]", ln)
        bags[section][key] = (_convert(raw, table[key], key, ln), ln)

    return _assemble(top, bags)


def _assemble(top: dict, bags: dict) -> RunConfig:
    def pick(section: str, key: str, default):
        entry = bags[section].get(key)
        return entry if entry is not None else (default, 0)

    dflt = RunConfig()

    n_sites, ln = pick("model", "n_sites", dflt.n_sites)
    if n_sites < 2:
        raise ConfigError(f"n_sites must be >= 2, got {n_sites}", ln)
    g2, ln = pick("model", "g2", dflt.g2)
    if g2 < 0:
        raise ConfigError(f"g2 must be >= 0, got {g2}", ln)
    phi2, ln = pick("model", "phi2", dflt.phi2)
    if phi2 < 0:
        raise ConfigError(f"phi2 must be >= 0, got {phi2}", ln)
    omega, ln = pick("model", "omega", dflt.omega)
    if omega <= 0:
        raise ConfigError(f"omega must be > 0, got {omega}", ln)
    delta, ln = pick("model", "delta", dflt.delta)
    if delta < 0:
        raise ConfigError(f"delta must be >= 0, got {delta}", ln)
    temperature, ln = pick("model", "temperature", dflt.temperature)
    if temperature < 0:
        raise ConfigError(f"temperature must be >= 0, got {temperature}", ln)
    convention, ln = pick("model", "band_convention", dflt.band_convention)
    if convention not in BAND_CONVENTIONS:
        raise ConfigError(
            f"band_convention must be one of {BAND_CONVENTIONS}, got {convention!r}", ln
        )
    transfer, _ = pick("model", "transfer", dflt.transfer)
    epsilon, _ = pick("model", "epsilon", dflt.epsilon)

    temps, ln = pick("sweep", "temperatures", ())
    if temps:
        if any(t <= 0 for t in temps):
            raise ConfigError("sweep temperatures must be positive", ln)
        if any(b <= a for a, b in zip(temps, temps[1:])):
            raise ConfigError("sweep temperatures must be strictly ascending", ln)
    start, ln = pick("sweep", "start", dflt.sweep.start)
    if start <= 0:
        raise ConfigError(f"sweep start must be > 0, got {start}", ln)
    stop, ln = pick("sweep", "stop", dflt.sweep.stop)
    if stop < start:
        raise ConfigError(f"sweep stop must be >= start, got {stop}", ln)
    count, ln = pick("sweep", "count", dflt.sweep.count)
    if count < 1:
        raise ConfigError(f"sweep count must be >= 1, got {count}", ln)
    spacing, ln = pick("sweep", "spacing", dflt.sweep.spacing)
    if spacing not in ("linear", "log"):
        raise ConfigError(f"spacing must be 'linear' or 'log', got {spacing!r}", ln)

    tol, ln = pick("numerics", "tol", dflt.numerics.tol)
    if not 0 < tol < 1:
        raise ConfigError(f"tol must be in (0, 1), got {tol}", ln)
    max_iters, ln = pick("numerics", "max_iters", dflt.numerics.max_iters)
    if max_iters < 1:
        raise ConfigError(f"max_iters must be >= 1, got {max_iters}", ln)
    damping, ln = pick("numerics", "damping", dflt.numerics.damping)
    if not 0 <= damping < 1:
        raise ConfigError(f"damping must be in [0, 1), got {damping}", ln)
    dt, ln = pick("numerics", "dt", dflt.numerics.dt)
    if dt < 0:
        raise ConfigError(f"dt must be >= 0 (0 selects automatically), got {dt}", ln)
    tmf, ln = pick("numerics", "t_max_factor", dflt.numerics.t_max_factor)
    if tmf <= 0:
        raise ConfigError(f"t_max_factor must be > 0, got {tmf}", ln)

    directory, _ = pick("outputs", "directory", dflt.outputs.directory)
    formats, ln = pick("outputs", "formats", dflt.outputs.formats)
    for fmt in formats:
        if fmt not in KNOWN_FORMATS:
            raise ConfigError(
                f"unknown output format {fmt!r}; choose from {', '.join(KNOWN_FORMATS)}", ln
            )

    return RunConfig(
        n_sites=n_sites,
        transfer=transfer,
        g2=g2,
        phi2=phi2,
        omega=omega,
        delta=delta,
        temperature=temperature,
        epsilon=epsilon,
        band_convention=convention,
        sweep=SweepSpec(temperatures=tuple(temps), start=start, stop=stop,
                        count=count, spacing=spacing),
        numerics=NumericsSpec(tol=tol, max_iters=max_iters, damping=damping,
                              dt=dt, t_max_factor=tmf),
        outputs=OutputSpec(directory=directory, formats=tuple(formats)),
        preset=top.get("preset", ""),
    )


# ---------------------------------------------------------------------------
# emission

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_config(cfg: RunConfig) -> str:
    """Render a config back to text such that ``parse_config(emit_config(c))``
    reproduces ``c`` exactly (floats are written with full precision)."""
    lines = []
    if cfg.preset:
        lines.append(f"preset = {cfg.preset}")
        lines.append("")
    lines.append("[model]")
    for key in ("n_sites", "transfer", "g2", "phi2", "omega", "delta",
                "temperature", "epsilon", "band_convention"):
        lines.append(f"{key} = {_fmt(getattr(cfg, key))}")
    lines.append("")
    lines.append("[sweep]")
    if cfg.sweep.temperatures:
        lines.append("temperatures = " + ", ".join(repr(t) for t in cfg.sweep.temperatures))
    lines.append(f"start = {_fmt(cfg.sweep.start)}")
    lines.append(f"stop = {_fmt(cfg.sweep.stop)}")
    lines.append(f"count = {cfg.sweep.count}")
    lines.append(f"spacing = {cfg.sweep.spacing}")
    lines.append("")
    lines.append("[numerics]")
    for key in ("tol", "max_iters", "damping", "dt", "t_max_factor"):
        lines.append(f"{key} = {_fmt(getattr(cfg.numerics, key))}")
    lines.append("")
    lines.append("[outputs]")
    lines.append(f"directory = {cfg.outputs.directory}")
    lines.append("formats = " + ", ".join(cfg.outputs.formats))
    lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# figure presets

def expand_preset(cfg: RunConfig) -> list:
    """Expand ``cfg.preset`` into labelled run cells.

    Returns ``[(label, RunConfig), ...]``; a config without a preset expands
    to a single cell labelled "run".  Each cell is a complete RunConfig (the
    preset overrides model/sweep fields; numerics and outputs are inherited).
    """
    if not cfg.preset:
        return [("run", cfg)]

    def cell(label, **kw):
        base = replace(cfg, preset="")
        sweep_kw = {k: kw.pop(k) for k in list(kw) if k in
                    ("temperatures", "start", "stop", "count", "spacing")}
        if sweep_kw:
            sweep_kw.setdefault("temperatures", ())
            base = replace(base, sweep=replace(base.sweep, **sweep_kw))
        return (label, replace(base, **kw))

    cells = []
    if cfg.preset == "fig1":
        # dressing-parameter surfaces vs diagonal coupling strength
        for g2 in (0.1, 0.3, 1.0):
            cells.append(cell(f"g2-{g2:g}", n_sites=16, transfer=0.1, g2=g2,
                              phi2=0.3, temperature=1.0,
                              temperatures=(1.0,), count=1, start=1.0, stop=1.0))
    elif cfg.preset == "fig2":
        # bandwidth vs temperature for two off-diagonal strengths
        for phi2 in (0.1, 0.3):
            cells.append(cell(f"phi2-{phi2:g}", n_sites=cfg.n_sites, transfer=0.1,
                              g2=0.1, phi2=phi2,
                              start=0.2, stop=4.0, count=12, spacing="linear"))
    elif cfg.preset == "fig3":
        # dressing-parameter surfaces vs temperature
        for t in (0.2, 1.3, 4.0):
            cells.append(cell(f"T-{t:g}", n_sites=16, transfer=0.1, g2=0.1,
                              phi2=0.3, temperature=t,
                              temperatures=(t,), count=1, start=t, stop=t))
    elif cfg.preset == "fig4":
        # diffusion vs temperature over the size/coupling grid
        for g2 in (0.1, 0.5):
            for phi2 in (0.0, 0.3, 0.7):
                for n in (4, 6, 8):
                    cells.append(cell(f"g2-{g2:g}_phi2-{phi2:g}_N-{n}",
                                      n_sites=n, transfer=0.1, g2=g2, phi2=phi2,
                                      start=0.2, stop=4.0, count=16,
                                      spacing="log"))
    elif cfg.preset == "fig5":
        # phonon-bandwidth effect on the transport split
        for delta in (0.05, 0.1, 0.2):
            cells.append(cell(f"delta-{delta:g}", n_sites=cfg.n_sites,
                              transfer=0.1, g2=0.5, phi2=0.0, delta=delta,
                              start=0.5, stop=4.0, count=8, spacing="linear"))
    elif cfg.preset == "fig6":
        # low-temperature diffusion at moderate mixed coupling
        cells.append(cell("mixed", n_sites=6, transfer=0.1, g2=0.5, phi2=0.3,
                          delta=0.1, start=0.2, stop=1.5, count=12,
                          spacing="log"))
    else:  # pragma: no cover - parse_config already validates names
        raise ConfigError(f"unknown preset {cfg.preset!r}")
    return cells


def config_dict(cfg: RunConfig) -> dict:
    """Plain-dict form used for JSON sidecars (tuples become lists)."""
    def unpack(obj):
        out = {}
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, (SweepSpec, NumericsSpec, OutputSpec)):
                out[f.name] = unpack(v)
            elif isinstance(v, tuple):
                out[f.name] = list(v)
            else:
                out[f.name] = v
        return out
    return unpack(cfg)
