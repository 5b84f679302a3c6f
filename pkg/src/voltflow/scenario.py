"""Scenario files: a network, an operating point, a curve design and one
experiment, validated in full before anything runs."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .control import ControllerSet, DroopCurve
from .netmodel import FeederNetwork, NetworkError, bundled_network_path, parse_network

SCENARIO_SCHEMA = "voltflow-scenario/1"
SCENARIO_DIR = Path(__file__).parent / "data" / "scenarios"
EXPERIMENTS = ("simulate", "range", "rates", "conditions")
KINDS = ("D1", "D2", "D3")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    start: float
    stop: float
    step: float

    def values(self) -> list[float]:
        n = int(round((self.stop - self.start) / self.step)) + 1
        return [round(self.start + k * self.step, 10) for k in range(n)]

    def to_dict(self) -> dict:
        return {"start": self.start, "stop": self.stop, "step": self.step}


@dataclass(frozen=True)
class RunSpec:
    kind: str
    stepsize: float | None = None
    stepsize_fraction: float | None = None


@dataclass(frozen=True)
class Scenario:
    name: str
    description: str
    provenance: str
    network_ref: str
    network_text: str
    load_multiplier: float
    power_factor: float
    pv_fraction: float
    v0: float | None
    v_nom: float
    deadband: float
    threshold_offset: float | None
    alpha: float | None
    experiment: str
    physics: str
    runs: tuple[RunSpec, ...] = ()
    kind: str | None = None
    grid: Grid | None = None
    offsets: Grid | None = None
    gamma_g: Grid | None = None
    gamma_p: Grid | None = None
    q0: Any = "zero"
    max_steps: int = 1000
    conv_tol: float = 1e-8
    conv_window: int = 5
    rise_tol: float = 1e-4
    notes: tuple[str, ...] = ()
    raw: Mapping = field(default_factory=dict, repr=False)

    @property
    def hash(self) -> str:
        """sha256 over the canonical scenario document and the network text."""
        h = hashlib.sha256()
        h.update(json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode())
        h.update(b"\0")
        h.update(self.network_text.encode())
        return h.hexdigest()

    def network(self) -> FeederNetwork:
        net = parse_network(self.network_text, power_factor=self.power_factor)
        net = net.with_load_multiplier(self.load_multiplier).with_pv_fraction(self.pv_fraction)
        return net if self.v0 is None else net.with_v0(self.v0)

    def controller(self, network: FeederNetwork, offset: float | None = None) -> ControllerSet:
        offset = self.threshold_offset if offset is None else offset
        if offset is not None:
            return ControllerSet.for_network(network, offset, self.v_nom, self.deadband)
        curves = {}
        for b in network.control_buses:
            q = network.bus(b).inverter.q_limit
            curves[b] = DroopCurve(self.alpha, self.v_nom, self.deadband, -q, q)
        return ControllerSet(curves)

    def initial_q(self, controller: ControllerSet, seed: int = 0) -> np.ndarray | None:
        if isinstance(self.q0, str):
            if self.q0 == "zero":
                return None
            rng = np.random.default_rng(seed)
            return rng.uniform(controller.q_min, controller.q_max)
        q = np.array(self.q0, dtype=float)
        if q.shape != (len(controller),) or not controller.within_limits(q):
            raise ScenarioError(f"q0 must list {len(controller)} values within the reactive limits")
        return q

    def with_physics(self, physics: str) -> "Scenario":
        return replace(self, physics=_choice("physics", physics, ("linear", "nonlinear")))


# --- validation helpers ---------------------------------------------------

def _mapping(where: str, value: Any, allowed: set[str], required: set[str] = frozenset()) -> Mapping:
    if not isinstance(value, Mapping):
        raise ScenarioError(f"{where}: expected a mapping")
    extra = set(value) - allowed
    if extra:
        raise ScenarioError(f"{where}: unknown field(s) {sorted(extra)}")
    missing = required - set(value)
    if missing:
        raise ScenarioError(f"{where}: missing field(s) {sorted(missing)}")
    return value


def _num(where: str, value: Any, lo: float, hi: float, *, lo_open: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ScenarioError(f"{where}: expected a finite number, got {value!r}")
    if value < lo or value > hi or (lo_open and value == lo):
        bracket = "(" if lo_open else "["
        raise ScenarioError(f"{where}: {value} outside {bracket}{lo}, {hi}]")
    return float(value)


def _int(where: str, value: Any, lo: int, hi: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or not lo <= value <= hi:
        raise ScenarioError(f"{where}: expected an integer in [{lo}, {hi}], got {value!r}")
    return value


def _choice(where: str, value: Any, options) -> str:
    if value not in options:
        raise ScenarioError(f"{where}: expected one of {list(options)}, got {value!r}")
    return value


def _text(where: str, value: Any) -> str:
    if not isinstance(value, str):
        raise ScenarioError(f"{where}: expected text")
    return value


def _grid(where: str, value: Any, lo: float, hi: float) -> Grid:
    m = _mapping(where, value, {"start", "stop", "step"}, {"start", "stop", "step"})
    g = Grid(_num(f"{where}.start", m["start"], lo, hi, lo_open=True), _num(f"{where}.stop", m["stop"], lo, hi, lo_open=True), _num(f"{where}.step", m["step"], 0, hi, lo_open=True))
    if g.stop < g.start:
        raise ScenarioError(f"{where}: stop below start")
    if (g.stop - g.start) / g.step > 10_000:
        raise ScenarioError(f"{where}: more than 10000 grid points")
    return g


_TOP = {"schema", "name", "description", "provenance", "notes", "network", "operating_point", "curves", "experiment", "tolerances", "outputs"}
_EXPERIMENT = {"type", "physics", "runs", "kind", "grid", "offsets", "gamma_g", "gamma_p", "q0", "max_steps"}


def parse_scenario(document: str | Mapping, base_dir: Path | None = None) -> Scenario:
    """Validate a scenario document; nothing is computed here."""
    if isinstance(document, str):
        try:
            data = yaml.safe_load(document)
        except yaml.YAMLError as exc:
            raise ScenarioError(f"not valid YAML: {exc}") from None
    else:
        data = document
    data = _mapping("scenario", data, _TOP, {"schema", "name", "network", "operating_point", "curves", "experiment"})
    if data["schema"] != SCENARIO_SCHEMA:
        raise ScenarioError(f"schema: expected {SCENARIO_SCHEMA!r}, got {data['schema']!r}")
    name = _text("name", data["name"])
    if not name or any(c in name for c in "/\\ "):
        raise ScenarioError("name: must be a non-empty word without slashes or spaces")

    ref = _text("network", data["network"])
    network_text = _network_text(ref, base_dir)

    op = _mapping("operating_point", data["operating_point"], {"load_multiplier", "power_factor", "pv_fraction", "v0"}, {"pv_fraction"})
    curves = _mapping("curves", data["curves"], {"v_nom", "deadband", "threshold_offset", "alpha"})
    exp = _mapping("experiment", data["experiment"], _EXPERIMENT, {"type"})
    tol = _mapping("tolerances", data.get("tolerances") or {}, {"conv_tol", "conv_window", "rise_tol"})
    _mapping("outputs", data.get("outputs") or {}, {"dir"})
    notes = data.get("notes") or []
    if not isinstance(notes, list) or not all(isinstance(n, str) for n in notes):
        raise ScenarioError("notes: expected a list of text entries")

    deadband = _num("curves.deadband", curves.get("deadband", 0.04), 0, 0.2)
    offset = curves.get("threshold_offset")
    alpha = curves.get("alpha")
    if offset is not None and alpha is not None:
        raise ScenarioError("curves: give threshold_offset or alpha, not both")
    if offset is not None:
        offset = _num("curves.threshold_offset", offset, 0, 0.5, lo_open=True)
        if offset <= deadband / 2:
            raise ScenarioError("curves.threshold_offset: must exceed half the deadband")
    if alpha is not None:
        alpha = _num("curves.alpha", alpha, 0, 1e6, lo_open=True)

    kind_exp = _choice("experiment.type", exp["type"], EXPERIMENTS)
    allowed = {
        "simulate": {"type", "physics", "runs", "q0", "max_steps"},
        "range": {"type", "physics", "offsets", "gamma_g", "gamma_p", "q0", "max_steps"},
        "rates": {"type", "physics", "kind", "grid", "q0", "max_steps"},
        "conditions": {"type", "offsets"},
    }[kind_exp]
    if set(exp) - allowed:
        raise ScenarioError(f"experiment: field(s) {sorted(set(exp) - allowed)} not used by a {kind_exp} experiment")

    fields: dict[str, Any] = {}
    if kind_exp == "simulate":
        runs = exp.get("runs")
        if not isinstance(runs, list) or not runs:
            raise ScenarioError("experiment.runs: expected a non-empty list")
        specs = []
        for i, r in enumerate(runs):
            where = f"experiment.runs[{i}]"
            r = _mapping(where, r, {"kind", "stepsize", "stepsize_fraction"}, {"kind"})
            k = _choice(f"{where}.kind", r["kind"], KINDS)
            if k != "D1" and ("stepsize" in r) == ("stepsize_fraction" in r):
                raise ScenarioError(f"{where}: give exactly one of stepsize or stepsize_fraction")
            specs.append(RunSpec(
                k,
                _num(f"{where}.stepsize", r["stepsize"], 0, 1e6, lo_open=True) if "stepsize" in r else None,
                _num(f"{where}.stepsize_fraction", r["stepsize_fraction"], 0, 10, lo_open=True) if "stepsize_fraction" in r else None,
            ))
        fields["runs"] = tuple(specs)
    elif kind_exp == "rates":
        if "kind" not in exp or "grid" not in exp:
            raise ScenarioError("experiment: a rates experiment needs kind and grid")
        fields["kind"] = _choice("experiment.kind", exp["kind"], ("D2", "D3"))
        fields["grid"] = _grid("experiment.grid", exp["grid"], 0, 1e6)
    elif kind_exp == "range":
        for key in ("offsets", "gamma_g", "gamma_p"):
            if key not in exp:
                raise ScenarioError(f"experiment: a range experiment needs {key}")
        fields["gamma_g"] = _grid("experiment.gamma_g", exp["gamma_g"], 0, 1e6)
        fields["gamma_p"] = _grid("experiment.gamma_p", exp["gamma_p"], 0, 1e6)
    if kind_exp in ("range", "conditions"):
        if "offsets" not in exp:
            raise ScenarioError(f"experiment: a {kind_exp} experiment needs offsets")
        fields["offsets"] = _grid("experiment.offsets", exp["offsets"], 0, 0.5)
        if fields["offsets"].start <= deadband / 2:
            raise ScenarioError("experiment.offsets: every offset must exceed half the deadband")
        if alpha is not None:
            raise ScenarioError("curves: alpha cannot be combined with an offset sweep")
    elif offset is None and alpha is None:
        raise ScenarioError("curves: need threshold_offset or alpha")

    q0 = exp.get("q0", "zero")
    if isinstance(q0, str):
        _choice("experiment.q0", q0, ("zero", "random"))
    elif not (isinstance(q0, list) and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in q0)):
        raise ScenarioError("experiment.q0: expected 'zero', 'random' or a list of numbers")

    v0 = op.get("v0")
    return Scenario(
        name=name,
        description=_text("description", data.get("description", "")),
        provenance=_text("provenance", data.get("provenance", "")),
        network_ref=ref,
        network_text=network_text,
        load_multiplier=_num("operating_point.load_multiplier", op.get("load_multiplier", 1.0), 0, 10),
        power_factor=_num("operating_point.power_factor", op.get("power_factor", 0.9), 0, 1, lo_open=True),
        pv_fraction=_num("operating_point.pv_fraction", op["pv_fraction"], 0, 1),
        v0=None if v0 is None else _num("operating_point.v0", v0, 0.8, 1.2),
        v_nom=_num("curves.v_nom", curves.get("v_nom", 1.0), 0.8, 1.2),
        deadband=deadband,
        threshold_offset=offset,
        alpha=alpha,
        experiment=kind_exp,
        physics=_choice("experiment.physics", exp.get("physics", "linear" if kind_exp == "conditions" else "nonlinear"), ("linear", "nonlinear")),
        q0=q0,
        max_steps=_int("experiment.max_steps", exp.get("max_steps", 1000), 1, 1_000_000),
        conv_tol=_num("tolerances.conv_tol", tol.get("conv_tol", 1e-8), 0, 1, lo_open=True),
        conv_window=_int("tolerances.conv_window", tol.get("conv_window", 5), 1, 1000),
        rise_tol=_num("tolerances.rise_tol", tol.get("rise_tol", 1e-4), 0, 1),
        notes=tuple(notes),
        raw=json.loads(json.dumps(data, default=str)),
        **fields,
    )


def _network_text(ref: str, base_dir: Path | None) -> str:
    if "/" not in ref and not ref.endswith((".yaml", ".yml")):
        try:
            return bundled_network_path(ref).read_text()
        except FileNotFoundError:
            raise ScenarioError(f"network: no bundled network named {ref!r}") from None
    path = Path(ref)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"network: cannot read {path}: {exc.strerror}") from None
    try:
        parse_network(text)
    except NetworkError as exc:
        raise ScenarioError(f"network {path}: {exc}") from None
    return text


def load_scenario(ref: str | Path) -> Scenario:
    """Load a scenario by file path or by bundled name."""
    path = Path(ref)
    if not path.is_file():
        bundled = SCENARIO_DIR / f"{ref}.yaml"
        if not bundled.is_file():
            raise ScenarioError(f"no scenario file or bundled scenario named {str(ref)!r}")
        path = bundled
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc.strerror}") from None
    return parse_scenario(text, path.parent)


def bundled_scenarios() -> list[str]:
    return sorted(p.stem for p in SCENARIO_DIR.glob("*.yaml"))
