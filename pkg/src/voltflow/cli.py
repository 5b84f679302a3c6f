"""voltflow command line: run bundled or user scenarios, scan stepsizes, check
convergence conditions for a network file."""
from __future__ import annotations

import argparse
import hashlib
import io
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .analysis import (
    CONDITION_COLUMNS,
    EigenError,
    EquilibriumError,
    active_set_bounds,
    check_conditions,
    run_grid,
    solve_equilibrium,
    sweep_stepsize,
)
from .control import ControllerSet
from .dynamics import DynamicsSpec, control_model, make_physics, simulate
from .netmodel import NetworkError, load_network
from .powerflow import PowerFlowError
from .scenario import ScenarioError, bundled_scenarios, load_scenario

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2
OUT_ENV = "VOLTFLOW_OUT"
MANIFEST_SCHEMA = "voltflow-manifest/1"
RANGE_SCHEMA = "voltflow-range/1"
CONDITION_SWEEP_SCHEMA = "voltflow-condition-sweep/1"


@dataclass
class Outcome:
    files: dict[str, str] = field(default_factory=dict)
    summary: list[str] = field(default_factory=list)
    failed: bool = False


def _meta(scenario, **extra) -> dict:
    meta = {"scenario": scenario.name, "scenario_hash": scenario.hash, "physics": scenario.physics}
    meta.update(extra)
    return meta


def _table(writer, *args, **kwargs) -> str:
    buf = io.StringIO()
    writer(buf, *args, **kwargs)
    return buf.getvalue()


def _header(schema: str, meta: dict) -> str:
    return f"# schema\t{schema}\n" + "".join(f"# {k}\t{v}\n" for k, v in meta.items())


# --- experiments ------------------------------------------------------------

def _run_simulate(sc, seed: int, workers: int | None) -> Outcome:
    out = Outcome()
    net = sc.network()
    ctrl = sc.controller(net)
    model = control_model(net, ctrl)
    report = check_conditions(ctrl, model.X)
    out.files["conditions.tsv"] = _table(report.write_table, _meta(sc))
    q0 = sc.initial_q(ctrl, seed)
    eq = solve_equilibrium(model, ctrl)
    finals = {}
    for run in sc.runs:
        if run.kind == "D1":
            gamma = 1.0
        elif run.stepsize is not None:
            gamma = run.stepsize
        else:
            gamma = run.stepsize_fraction * (report.c2_bound if run.kind == "D2" else report.c3_bound)
        spec = DynamicsSpec(run.kind, ctrl, make_physics(net, ctrl, sc.physics), gamma)
        tr = simulate(spec, q0, sc.max_steps, sc.conv_tol, sc.conv_window)
        name = f"trajectory-{run.kind}.tsv"
        if name in out.files:
            name = f"trajectory-{run.kind}-{len(out.files)}.tsv"
        rise = tr.objective_rise()
        monotone = rise <= sc.rise_tol
        out.files[name] = _table(tr.write_table, _meta(sc, seed=seed, F_rise=f"{rise:.3e}", F_monotone=int(monotone)))
        finals[name] = tr.final.q
        out.failed |= tr.failure is not None
        steps = "-" if tr.converged_at is None else tr.converged_at
        out.summary.append(
            f"{run.kind} gamma={gamma:.6g}: {tr.status()}, steps={steps}, F={tr.objective[-1]:.6e}, "
            f"F monotone={'yes' if monotone else 'no'} (max rise {rise:.1e})"
            + (f", {tr.failure}" if tr.failure else "")
        )
    out.summary.append(f"linear-model equilibrium F*={eq.objective:.6e}, q*={np.array2string(eq.q_star, precision=5)}")
    qs = list(finals.values())
    if len(qs) > 1:
        spread = max(float(np.max(np.abs(a - b))) for a in qs for b in qs)
        out.summary.append(f"largest final-q spread between runs: {spread:.2e} p.u.")
    return out


def _run_rates(sc, seed: int, workers: int | None) -> Outcome:
    out = Outcome()
    net = sc.network()
    ctrl = sc.controller(net)
    res = run_grid(net, ctrl, sc.grid.values(), sc.kind, sc.physics, sc.initial_q(ctrl, seed), sc.max_steps, sc.conv_tol, sc.conv_window, workers)
    onset = res.onset(sc.rise_tol)
    best = res.best()
    meta = _meta(
        sc,
        seed=seed,
        rise_tol=sc.rise_tol,
        onset=onset,
        best_stepsize=None if best is None else best.stepsize,
        best_steps=None if best is None else best.converged_at,
    )
    out.files[f"rates-{sc.kind}.tsv"] = _table(res.write_table, meta)
    out.summary.append(f"{sc.kind}: {sum(p.status == 'converged' for p in res.points)}/{len(res.points)} grid points converged")
    out.summary.append(f"oscillation onset: {onset}; steps non-increasing below it: {'yes' if res.steps_nonincreasing_before(onset) else 'no'}")
    if best is not None:
        out.summary.append(f"best: {best.converged_at} steps at stepsize {best.stepsize:g}")
    return out


def _run_range(sc, seed: int, workers: int | None) -> Outcome:
    out = Outcome()
    net = sc.network()
    g_grid, p_grid = sc.gamma_g.values(), sc.gamma_p.values()
    cols = ["offset", "alpha_max", "c2_bound", "c3_bound", "max_gamma_g", "max_gamma_p", "ratio", "ratio_over_alpha_max", "grid_capped"]
    rows = []
    for off in sc.offsets.values():
        ctrl = sc.controller(net, off)
        report = check_conditions(ctrl, control_model(net, ctrl).X)
        q0 = sc.initial_q(ctrl, seed)
        mg = sweep_stepsize(net, ctrl, g_grid, "D2", sc.physics, q0, sc.max_steps, sc.conv_tol, sc.conv_window, workers).max_stable
        mp = sweep_stepsize(net, ctrl, p_grid, "D3", sc.physics, q0, sc.max_steps, sc.conv_tol, sc.conv_window, workers).max_stable
        ratio = mg / mp if mg is not None and mp is not None else float("nan")
        capped = mg == g_grid[-1] or mp == p_grid[-1]
        rows.append([f"{off!r}", f"{report.alpha_max:.6e}", f"{report.c2_bound:.6e}", f"{report.c3_bound:.6e}", str(mg), str(mp), f"{ratio:.6e}", f"{ratio / report.alpha_max:.6e}", str(int(capped))])
        out.summary.append(f"offset {off:.2f}: max alpha {report.alpha_max:7.2f}, max gamma_g {mg}, max gamma_p {mp}, ratio/max alpha {ratio / report.alpha_max:.3f}")
    text = _header(RANGE_SCHEMA, _meta(sc, seed=seed)) + "\t".join(cols) + "\n" + "".join("\t".join(r) + "\n" for r in rows)
    out.files["range.tsv"] = text
    return out


def _run_conditions(sc, seed: int, workers: int | None) -> Outcome:
    out = Outcome()
    net = sc.network()
    cols = ["offset", *CONDITION_COLUMNS, "eq_status", "eq_objective", "eq_residual", "local_gamma_g", "local_gamma_p"]
    rows = []
    for off in sc.offsets.values():
        ctrl = sc.controller(net, off)
        model = control_model(net, ctrl)
        report = check_conditions(ctrl, model.X)
        try:
            eq = solve_equilibrium(model, ctrl)
            lg, lp = active_set_bounds(ctrl, model.X, eq.q_star, eq.v_star)
            tail = ["ok", f"{eq.objective:.12e}", f"{eq.residual:.3e}", f"{lg:.6e}", f"{lp:.6e}"]
        except EquilibriumError:
            tail = ["failed", "nan", "nan", "nan", "nan"]
        rows.append(f"{off!r}\t{report.row()}\t" + "\t".join(tail))
        out.summary.append(f"offset {off:.2f}: C1 {'holds' if report.c1_holds else 'fails'}, c2 {report.c2_bound:.4g}, c3 {report.c3_bound:.4g}, equilibrium {tail[0]}")
    text = _header(CONDITION_SWEEP_SCHEMA, {"scenario": sc.name, "scenario_hash": sc.hash}) + "\t".join(cols) + "\n" + "".join(r + "\n" for r in rows)
    out.files["conditions.tsv"] = text
    return out


EXPERIMENT_RUNNERS = {"simulate": _run_simulate, "rates": _run_rates, "range": _run_range, "conditions": _run_conditions}


def run_scenario(sc, seed: int = 0, workers: int | None = None) -> Outcome:
    return EXPERIMENT_RUNNERS[sc.experiment](sc, seed, workers)


# --- output ---------------------------------------------------------------

def resolve_out_dir(arg: str | None, sc) -> Path:
    if arg:
        return Path(arg)
    base = os.environ.get(OUT_ENV) or sc.raw.get("outputs", {}).get("dir") or "voltflow-out"
    return Path(base) / sc.name


def write_outputs(out_dir: Path, sc, outcome: Outcome, seed: int) -> Path:
    """Write tables, then the manifest; each file goes through a temp name."""
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, text in sorted(outcome.files.items()):
        _atomic_write(out_dir / name, text)
        entries[name] = hashlib.sha256(text.encode()).hexdigest()
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "voltflow_version": __version__,
        "scenario": sc.name,
        "scenario_hash": sc.hash,
        "experiment": sc.experiment,
        "physics": sc.physics,
        "seed": seed,
        "operating_point": {"load_multiplier": sc.load_multiplier, "power_factor": sc.power_factor, "pv_fraction": sc.pv_fraction, "v0": sc.v0},
        "notes": list(sc.notes),
        "status": "numerical-failure" if outcome.failed else "ok",
        "files": entries,
        "summary": outcome.summary,
    }
    path = out_dir / "run-manifest.json"
    _atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    tmp.replace(path)


# --- commands ---------------------------------------------------------------

def _cmd_run(args, require_grid: bool = False) -> int:
    sc = load_scenario(args.scenario)
    if args.physics:
        sc = sc.with_physics(args.physics)
    if require_grid and sc.experiment not in ("range", "rates"):
        raise ScenarioError(f"scenario {sc.name!r} is a {sc.experiment} experiment, not a stepsize sweep; use 'voltflow run'")
    outcome = run_scenario(sc, args.seed, args.workers)
    path = write_outputs(resolve_out_dir(args.out, sc), sc, outcome, args.seed)
    print(f"{sc.name} [{sc.experiment}, {sc.physics} physics, hash {sc.hash[:12]}]")
    for line in outcome.summary:
        print(f"  {line}")
    print(f"  wrote {len(outcome.files)} table(s) and {path}")
    return EXIT_NUMERICAL if outcome.failed else EXIT_OK


def _cmd_check(args) -> int:
    text = Path(args.network).read_text()
    net = load_network(args.network, power_factor=args.power_factor)
    net = net.with_load_multiplier(args.load_multiplier)
    if args.pv_fraction is not None:
        net = net.with_pv_fraction(args.pv_fraction)
    if not net.control_buses:
        raise NetworkError("network has no inverter buses to check")
    ctrl = ControllerSet.for_network(net, args.offset, args.v_nom, args.deadband)
    report = check_conditions(ctrl, control_model(net, ctrl).X)
    meta = {"network_hash": hashlib.sha256(text.encode()).hexdigest(), "control_buses": ",".join(map(str, ctrl.buses)), "threshold_offset": args.offset, "deadband": args.deadband}
    report.write_table(sys.stdout, meta)
    return EXIT_OK


def _cmd_list(args) -> int:
    for name in bundled_scenarios():
        sc = load_scenario(name)
        print(f"{name:22s} {sc.experiment:10s} {sc.description}")
    return EXIT_OK


def _cmd_describe(args) -> int:
    sc = load_scenario(args.scenario)
    print(f"name:        {sc.name}")
    print(f"experiment:  {sc.experiment} ({sc.physics} physics)")
    print(f"hash:        {sc.hash}")
    print(f"network:     {sc.network_ref}")
    print(f"operating:   load x{sc.load_multiplier:g}, pf {sc.power_factor:g}, PV at {sc.pv_fraction:.0%} of nameplate, v0 {sc.v0 if sc.v0 is not None else 'from network'}")
    curve = f"threshold offset {sc.threshold_offset:g} p.u." if sc.threshold_offset is not None else (f"alpha {sc.alpha:g}" if sc.alpha is not None else "per-offset")
    print(f"curves:      v_nom {sc.v_nom:g}, deadband {sc.deadband:g}, {curve}")
    if sc.offsets is not None:
        print(f"offsets:     {sc.offsets.start:g}-{sc.offsets.stop:g} p.u. step {sc.offsets.step:g}")
    for label, g in (("gamma_g grid", sc.gamma_g), ("gamma_p grid", sc.gamma_p), ("grid", sc.grid)):
        if g is not None:
            print(f"{label + ':':13s}{g.start:g}-{g.stop:g} step {g.step:g}")
    print(f"description: {sc.description}")
    print(f"provenance:  {sc.provenance}")
    for n in sc.notes:
        print(f"  - {n}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voltflow", description="Volt/var control experiments on radial distribution feeders.")
    p.add_argument("--version", action="version", version=f"voltflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_args(sp):
        sp.add_argument("scenario", help="scenario file, or the name of a bundled scenario (see 'voltflow list')")
        sp.add_argument("--out", metavar="DIR", help=f"output directory (default: ${OUT_ENV}/<name>, else ./voltflow-out/<name>)")
        sp.add_argument("--physics", choices=("linear", "nonlinear"), help="override the scenario's physics model")
        sp.add_argument("--seed", type=int, default=0, help="seed for random initial conditions (default 0)")
        sp.add_argument("--workers", type=int, default=None, help="worker processes for grid scans (default: CPU count)")

    scenario_args(sub.add_parser("run", help="run a scenario and write its tables"))
    scenario_args(sub.add_parser("sweep", help="run a stepsize-scan scenario (range or rates)"))

    c = sub.add_parser("check", help="convergence conditions for a network file")
    c.add_argument("network", help="network file")
    c.add_argument("--offset", type=float, default=0.08, help="curve threshold offset from v_nom in p.u. (default 0.08)")
    c.add_argument("--deadband", type=float, default=0.04, help="deadband width in p.u. (default 0.04)")
    c.add_argument("--v-nom", type=float, default=1.0, help="nominal voltage in p.u. (default 1.0)")
    c.add_argument("--pv-fraction", type=float, default=None, help="PV output as a fraction of nameplate (default: file values)")
    c.add_argument("--load-multiplier", type=float, default=1.0, help="scale all loads (default 1.0)")
    c.add_argument("--power-factor", type=float, default=None, help="override the file's default load power factor")

    sub.add_parser("list", help="list bundled scenarios")
    d = sub.add_parser("describe", help="show a scenario's setup and provenance")
    d.add_argument("scenario")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "sweep": lambda a: _cmd_run(a, require_grid=True),
        "check": _cmd_check,
        "list": _cmd_list,
        "describe": _cmd_describe,
    }
    try:
        return handlers[args.command](args)
    except (ScenarioError, NetworkError, OSError, yaml.YAMLError, ValueError) as exc:
        print(f"voltflow: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PowerFlowError, EigenError, EquilibriumError) as exc:
        print(f"voltflow: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
