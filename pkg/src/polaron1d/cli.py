"""Command-line front end: config files, pipeline runs, datasets, plot scripts.

Subcommands
-----------
solve      converged dressing amplitudes and their scale factors as a
           (k, q) surface CSV per parameter cell
band       dressed dispersion, group velocities and bandwidth per sweep
           temperature
transport  diffusion/mobility temperature sweep (the main pipeline)
oracle     closed-form correlators vs the truncated-Fock reference on a
           small lattice, emitted as a JSON comparison table

Every CSV gets a JSON sidecar carrying the full configuration echo, column
names, convergence reports and wall time, so a dataset is reproducible from
the sidecar alone.  Numbers are written with ``%.14e`` so identical builds
produce byte-identical files.  ``--preset figN`` expands to the cell lists
behind the published figures; ``emit_plots`` turns a directory of datasets
into gnuplot scripts that reference the CSVs by name and never embed data.

Exit status: 0 all cells succeeded; 2 some sweep points or cells failed but
datasets were written; 1 fatal (bad config, I/O failure, or nothing usable
produced).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .band import band_of
from .config import (
    PRESET_NAMES,
    RunConfig,
    config_dict,
    expand_preset,
    parse_config,
)
from .correlation import four_theta_avg, make_context, two_theta_avg
from .errors import (
    ConfigError,
    CutoffNotConverged,
    MissingDataset,
    PolaronError,
)
from .fock import converged_correlators
from .scf import solve as scf_solve
from .transport import sweep as transport_sweep
from .transport import write_sweep_csv

__all__ = ["main", "run", "emit_plots"]

_FMT = "%.14e"


# --------------------------------------------------------------------------
# argument handling


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polaron1d",
        description="Polaron band and transport pipeline for a 1-D molecular "
                    "lattice with diagonal and off-diagonal phonon coupling.",
    )
    parser.add_argument("command", choices=("solve", "band", "transport", "oracle"),
                        help="pipeline stage to run")
    parser.add_argument("--config", metavar="PATH",
                        help="key=value config file (defaults apply when omitted)")
    parser.add_argument("--preset", metavar="NAME", choices=PRESET_NAMES,
                        help="expand a figure preset, overriding the config's")
    parser.add_argument("--out", metavar="DIR",
                        help="output directory (overrides config)")
    parser.add_argument("--threads", metavar="K", type=int,
                        help="worker threads for the kernels "
                             "(env POLARON_THREADS is the fallback)")
    parser.add_argument("--seedless", action="store_true",
                        help="reserved; the pipeline has no stochastic elements")
    return parser


def _load_config(args) -> RunConfig:
    if args.config is not None:
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = parse_config(fh.read())
    else:
        cfg = RunConfig()
    if args.preset:
        cfg = replace(cfg, preset=args.preset)
    if args.out:
        cfg = replace(cfg, outputs=replace(cfg.outputs, directory=args.out))
    return cfg


def _resolve_threads(args) -> int | None:
    if args.threads is not None:
        requested = args.threads
    else:
        raw = os.environ.get("POLARON_THREADS", "").strip()
        if not raw:
            return None
        try:
            requested = int(raw)
        except ValueError:
            raise ConfigError(f"POLARON_THREADS must be an integer, got {raw!r}")
    if requested < 1:
        raise ConfigError(f"thread count must be >= 1, got {requested}")
    return requested


def _set_threads(count: int) -> None:
    import numba

    numba.set_num_threads(min(count, numba.config.NUMBA_NUM_THREADS))


# --------------------------------------------------------------------------
# dataset helpers


def _write_csv(path: str, header: str, rows) -> None:
    lines = [header]
    for row in rows:
        lines.append(",".join(_FMT % v if isinstance(v, float) else str(v)
                              for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_sidecar(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sidecar(command: str, label: str, cfg: RunConfig, *, csv: str | None,
             columns, wall: float, reports, error: str | None = None) -> dict:
    payload = {
        "command": command,
        "label": label,
        "csv": csv,
        "columns": list(columns) if columns else [],
        "config": config_dict(cfg),
        "package_version": __version__,
        "wall_seconds": wall,
        "reports": reports,
    }
    if error is not None:
        payload["error"] = error
    return payload


def _report_dict(report) -> dict:
    return {
        "iterations": report.iterations,
        "final_residual": report.final_residual,
        "converged": report.converged,
        "damping_used": report.damping_used,
    }


# --------------------------------------------------------------------------
# per-command runners; each returns "ok" | "partial" | "failed"


def _run_solve(cell: RunConfig, label: str, outdir: str) -> str:
    num = cell.numerics
    t0 = time.monotonic()
    base = os.path.join(outdir, f"solve_{label}")
    try:
        sol = scf_solve(cell.model(), tol=num.tol, max_iters=num.max_iters,
                        damping=num.damping)
    except PolaronError as exc:
        _write_sidecar(base + ".json", _sidecar(
            "solve", label, cell, csv=None, columns=None,
            wall=time.monotonic() - t0, reports=[],
            error=f"{type(exc).__name__}: {exc}"))
        return "failed"
    grid = sol.grid
    try:
        xi = sol.scaling.xi
    except PolaronError:
        xi = None
    try:
        eta = sol.scaling.eta
    except PolaronError:
        eta = None
    nan = float("nan")
    rows = []
    for ki in range(grid.n):
        for qi in range(grid.n):
            rows.append((
                ki, qi, float(grid.points[ki]), float(grid.points[qi]),
                float(sol.A[ki, qi].real), float(sol.A[ki, qi].imag),
                float(xi[ki, qi]) if xi is not None else nan,
                float(eta[ki, qi]) if eta is not None else nan,
            ))
    header = "k_index,q_index,k,q,A_re,A_im,xi,eta"
    _write_csv(base + ".csv", header, rows)
    _write_sidecar(base + ".json", _sidecar(
        "solve", label, cell, csv=os.path.basename(base) + ".csv",
        columns=header.split(","), wall=time.monotonic() - t0,
        reports=[_report_dict(sol.report)]))
    return "ok"


def _run_band(cell: RunConfig, label: str, outdir: str) -> str:
    num = cell.numerics
    t0 = time.monotonic()
    base = os.path.join(outdir, f"band_{label}")
    rows = []
    reports = []
    failures = 0
    init = None
    for t in cell.sweep_values():
        params = cell.model(temperature=t)
        try:
            sol = scf_solve(params, init=init, tol=num.tol,
                            max_iters=num.max_iters, damping=num.damping)
        except PolaronError as exc:
            reports.append({"T": t, "error": f"{type(exc).__name__}: {exc}"})
            failures += 1
            continue
        init = sol.A
        b = band_of(sol)
        entry = _report_dict(sol.report)
        entry["T"] = t
        reports.append(entry)
        for ki in range(sol.grid.n):
            rows.append((float(t), ki, float(sol.grid.points[ki]),
                         float(b.energies[ki]), float(b.velocities[ki]),
                         float(b.bandwidth)))
    header = "T,k_index,k,energy,velocity,bandwidth"
    if not rows:
        _write_sidecar(base + ".json", _sidecar(
            "band", label, cell, csv=None, columns=None,
            wall=time.monotonic() - t0, reports=reports,
            error="every temperature failed"))
        return "failed"
    _write_csv(base + ".csv", header, rows)
    _write_sidecar(base + ".json", _sidecar(
        "band", label, cell, csv=os.path.basename(base) + ".csv",
        columns=header.split(","), wall=time.monotonic() - t0,
        reports=reports))
    return "partial" if failures else "ok"


def _run_transport(cell: RunConfig, label: str, outdir: str) -> str:
    num = cell.numerics
    t0 = time.monotonic()
    base = os.path.join(outdir, f"transport_{label}")
    try:
        points = transport_sweep(
            cell.model(), cell.sweep_values(), tol=num.tol,
            max_iters=num.max_iters, damping=num.damping,
            dt=num.dt or None, t_max_factor=num.t_max_factor)
    except PolaronError as exc:
        _write_sidecar(base + ".json", _sidecar(
            "transport", label, cell, csv=None, columns=None,
            wall=time.monotonic() - t0, reports=[],
            error=f"{type(exc).__name__}: {exc}"))
        return "failed"
    write_sweep_csv(points, base + ".csv")
    statuses = [{"T": pt.temperature, "status": pt.status} for pt in points]
    from .transport import SWEEP_CSV_HEADER

    _write_sidecar(base + ".json", _sidecar(
        "transport", label, cell, csv=os.path.basename(base) + ".csv",
        columns=SWEEP_CSV_HEADER.split(","), wall=time.monotonic() - t0,
        reports=statuses))
    ok = sum(1 for pt in points if pt.ok)
    if ok == len(points):
        return "ok"
    return "partial" if ok else "failed"


def _oracle_requests(n: int):
    """Representative pair and quartet index tuples on an N-site grid."""
    pairs = []
    for k in range(n):
        for kp in range(n):
            pairs.append((k, kp, k, kp))
    quartets = [
        (0, 0, 0, 0, 0, 0, 0, 0),
        (0, 1, 1, 0, 0, 1, 1, 0),
        (1, 0, 0, 1, 1, 0, 0, 1),
        (0, 0, 1, 1, 1, 1, 0, 0),
    ]
    return pairs, quartets


def _run_oracle(cell: RunConfig, label: str, outdir: str) -> str:
    t0 = time.monotonic()
    base = os.path.join(outdir, f"oracle_{label}")
    params = cell.model().with_(delta=0.0)  # the reference runs sharp
    note = None
    if params.n_sites > 3:
        note = (f"n_sites {params.n_sites} exceeds the tractable reference "
                "size; comparing on a 2-site lattice instead")
        print(f"oracle[{label}]: {note}", file=sys.stderr)
        params = params.with_(n_sites=2)
    num = cell.numerics
    payload = {
        "command": "oracle",
        "label": label,
        "config": config_dict(cell),
        "package_version": __version__,
        "delta_forced_zero": True,
    }
    if note:
        payload["note"] = note
    try:
        sol = scf_solve(params, tol=num.tol, max_iters=num.max_iters,
                        damping=num.damping)
        ctx = make_context(params, sol.A, sol.grid)
        pairs, quartets = _oracle_requests(sol.grid.n)
        times = (0.0, 0.5, 1.0)
        requests = [("two", idx, t) for idx in pairs for t in times]
        requests += [("four", idx, t) for idx in quartets for t in times]
        exact, cutoff = converged_correlators(
            sol.A, sol.grid, 8, requests, params.temperature, params.omega)
        entries = []
        for (kind, idx, t), ex in zip(requests, exact):
            if kind == "two":
                closed = two_theta_avg(ctx, *idx, t)
            else:
                closed = four_theta_avg(ctx, idx, t)
            err = abs(closed - ex)
            entries.append({
                "kind": kind,
                "indices": list(idx),
                "t": t,
                "closed": [closed.real, closed.imag],
                "exact": [ex.real, ex.imag],
                "abs_err": err,
                "rel_err": err / abs(ex) if ex != 0 else float("inf"),
            })
        payload["used_cutoff"] = cutoff
        payload["entries"] = entries
        payload["reports"] = [_report_dict(sol.report)]
        status = "ok"
    except (CutoffNotConverged, PolaronError) as exc:
        payload["error"] = f"{type(exc).__name__}: {exc}"
        status = "failed"
    payload["wall_seconds"] = time.monotonic() - t0
    _write_sidecar(base + ".json", payload)
    return status


_RUNNERS = {
    "solve": _run_solve,
    "band": _run_band,
    "transport": _run_transport,
    "oracle": _run_oracle,
}


# --------------------------------------------------------------------------
# plot scripts


def _gp_header(output_png: str) -> list[str]:
    return [
        "set datafile separator \",\"",
        "set terminal pngcairo size 1100,750",
        f"set output \"{output_png}\"",
    ]


def _transport_curves(csv: str, title: str) -> str:
    return (f"plot \"{csv}\" skip 1 using 1:2 with linespoints "
            f"title \"{title} total\", \\\n"
            f"     \"{csv}\" skip 1 using 1:3 with linespoints "
            f"title \"band\", \\\n"
            f"     \"{csv}\" skip 1 using 1:4 with linespoints "
            f"title \"hopping\"")


def _emit_transport_preset(outdir: str, preset: str, cells: list) -> str:
    """One multi-panel script per preset: panels by coupling cell, one curve
    per remaining swept field (lattice size, phonon bandwidth, ...)."""
    panels = {}
    for sc in cells:
        key = (sc["config"]["g2"], sc["config"]["phi2"])
        panels.setdefault(key, []).append(sc)
    g2s = sorted({k[0] for k in panels})
    phi2s = sorted({k[1] for k in panels})
    name = f"transport_{preset}.gp"
    lines = _gp_header(f"transport_{preset}.png")
    lines.append(f"set multiplot layout {len(g2s)},{len(phi2s)} "
                 f"title \"{preset}\"")
    lines.append("set xlabel \"T\"")
    lines.append("set ylabel \"D\"")
    for g2 in g2s:
        for phi2 in phi2s:
            group = panels.get((g2, phi2))
            if not group:
                lines.append("set multiplot next")
                continue
            lines.append(f"set title \"g2={g2} phi2={phi2}\"")
            parts = [
                f"\"{sc['csv']}\" skip 1 using 1:2 with linespoints "
                f"title \"{sc['label']}\""
                for sc in sorted(group, key=lambda s: s["label"])
            ]
            lines.append("plot " + ", \\\n     ".join(parts))
    lines.append("unset multiplot")
    path = os.path.join(outdir, name)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return name


def _emit_single(outdir: str, sc: dict) -> str:
    command = sc["command"]
    label = sc["label"]
    csv = sc["csv"]
    name = f"{command}_{label}.gp"
    lines = _gp_header(f"{command}_{label}.png")
    if command == "transport":
        lines.append("set xlabel \"T\"")
        lines.append("set ylabel \"D\"")
        lines.append(_transport_curves(csv, label))
    elif command == "band":
        lines.append(f"set multiplot layout 1,2 title \"{label}\"")
        lines.append("set xlabel \"T\"")
        lines.append("set ylabel \"bandwidth\"")
        lines.append(f"plot \"{csv}\" skip 1 using 1:6 with points "
                     "title \"bandwidth\"")
        lines.append("set xlabel \"k\"")
        lines.append("set ylabel \"energy\"")
        lines.append(f"plot \"{csv}\" skip 1 using 3:4:1 with points "
                     "palette title \"dispersion by T\"")
        lines.append("unset multiplot")
    else:  # solve surfaces
        lines.append(f"set multiplot layout 1,2 title \"{label}\"")
        lines.append("set xlabel \"k\"")
        lines.append("set ylabel \"q\"")
        lines.append(f"splot \"{csv}\" skip 1 using 3:4:7 with points "
                     "title \"xi\"")
        lines.append(f"splot \"{csv}\" skip 1 using 3:4:8 with points "
                     "title \"eta\"")
        lines.append("unset multiplot")
    path = os.path.join(outdir, name)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return name


def emit_plots(directory: str) -> list[str]:
    """Write gnuplot scripts for every dataset found in ``directory``.

    Scripts reference the CSVs by relative name and never embed computed
    values, so they stay valid when a dataset is regenerated.  Returns the
    script names written; raises MissingDataset when the directory holds no
    dataset sidecars.
    """
    try:
        names = sorted(os.listdir(directory))
    except OSError as exc:
        raise MissingDataset(f"cannot read dataset directory: {exc}") from exc
    sidecars = []
    for name in names:
        if not name.endswith(".json"):
            continue
        try:
            with open(os.path.join(directory, name), "r", encoding="utf-8") as fh:
                payload = json.load(fh)
        except (OSError, ValueError):
            continue
        if isinstance(payload, dict) and payload.get("csv"):
            sidecars.append(payload)
    if not sidecars:
        raise MissingDataset(f"no dataset sidecars in {directory!r}")
    written = []
    grouped = {}
    for sc in sidecars:
        preset = sc.get("config", {}).get("preset", "")
        if sc["command"] == "transport" and preset:
            grouped.setdefault(preset, []).append(sc)
        else:
            written.append(_emit_single(directory, sc))
    for preset in sorted(grouped):
        written.append(_emit_transport_preset(directory, preset,
                                              grouped[preset]))
    return written


# --------------------------------------------------------------------------
# orchestration


def run(cfg: RunConfig, command: str) -> int:
    """Execute one subcommand over every cell of the (expanded) config."""
    if command not in _RUNNERS:
        raise ConfigError(f"unknown command {command!r}")
    outdir = cfg.outputs.directory
    os.makedirs(outdir, exist_ok=True)
    statuses = []
    for label, cell in expand_preset(cfg):
        status = _RUNNERS[command](cell, label, outdir)
        print(f"{command}[{label}]: {status}")
        statuses.append(status)
    if "gnuplot" in cfg.outputs.formats and command != "oracle":
        try:
            emit_plots(outdir)
        except MissingDataset as exc:
            print(f"plot scripts skipped: {exc}", file=sys.stderr)
    if all(s == "ok" for s in statuses):
        return 0
    if all(s == "failed" for s in statuses):
        return 1
    return 2


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
        threads = _resolve_threads(args)
        if threads is not None:
            _set_threads(threads)
        return run(cfg, args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (PolaronError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
