"""Radial feeder model, network-file parsing and the R/X path matrices."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
import yaml

NETWORK_SCHEMA = "voltflow-network/1"
DEFAULT_POWER_FACTOR = 0.9


class NetworkError(ValueError):
    """Invalid network data. ``record`` holds the offending entry, if any."""

    def __init__(self, message: str, record: Any = None):
        self.reason = message
        if record is not None:
            message = f"{message}: {record!r}"
        super().__init__(message)
        self.record = record


class SchemaError(NetworkError):
    pass


class NonRadialError(NetworkError):
    pass


class DanglingBusError(NetworkError):
    pass


class UnknownBusError(NetworkError, KeyError):
    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class PerUnitBase:
    """Base quantities in SI units (volts, volt-amperes)."""

    v_base: float
    s_base: float

    def __post_init__(self):
        if not (self.v_base > 0 and self.s_base > 0):
            raise NetworkError("per-unit bases must be positive", (self.v_base, self.s_base))

    @classmethod
    def from_kv_kva(cls, v_base_kv: float, s_base_kva: float) -> "PerUnitBase":
        return cls(v_base_kv * 1e3, s_base_kva * 1e3)

    @property
    def z_base(self) -> float:
        return self.v_base**2 / self.s_base

    def ohm_to_pu(self, z):
        return np.asarray(z) / self.z_base if np.ndim(z) else z / self.z_base

    def pu_to_ohm(self, z):
        return np.asarray(z) * self.z_base if np.ndim(z) else z * self.z_base

    def mva_to_pu(self, s):
        return np.asarray(s) * 1e6 / self.s_base if np.ndim(s) else s * 1e6 / self.s_base

    def pu_to_mva(self, s):
        return np.asarray(s) * self.s_base / 1e6 if np.ndim(s) else s * self.s_base / 1e6


@dataclass(frozen=True)
class Inverter:
    """PV inverter operating point (p.u.). Reactive headroom is what the
    apparent-power rating leaves after real output, unless overridden."""

    s_rated: float
    p_operating: float
    q_override: float | None = None

    def __post_init__(self):
        if not self.s_rated > 0:
            raise NetworkError("inverter rating must be positive", self)
        if not 0 <= self.p_operating <= self.s_rated:
            raise NetworkError("inverter operating point outside [0, rating]", self)
        if self.q_override is not None and not self.q_override > 0:
            raise NetworkError("q limit override must be positive", self)

    @property
    def q_limit(self) -> float:
        if self.q_override is not None:
            return self.q_override
        return math.sqrt(max(self.s_rated**2 - self.p_operating**2, 0.0))


@dataclass(frozen=True)
class Bus:
    id: int
    p_load: float = 0.0
    q_load: float = 0.0
    p_gen: float = 0.0
    inverter: Inverter | None = None

    def __post_init__(self):
        for name in ("p_load", "q_load", "p_gen"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val >= 0):
                raise NetworkError(f"bus {name} must be finite and non-negative", self)


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float
    note: str = ""

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise SchemaError("line connects a bus to itself", self)
        # x == 0 occurs in field data (short jumpers); X stays PD on any
        # bus set whose paths all include a reactive line.
        if not (self.r >= 0 and self.x >= 0 and self.r + self.x > 0):
            raise NetworkError("line impedance must be non-negative and non-zero", self)


@dataclass(frozen=True)
class FeederNetwork:
    """Radial feeder rooted at ``slack_bus``; ``buses`` excludes the slack."""

    slack_bus: int
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    v0: float = 1.0
    base: PerUnitBase = field(default_factory=lambda: PerUnitBase(1.0, 1.0))
    power_factor: float = DEFAULT_POWER_FACTOR

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        if not self.v0 > 0:
            raise NetworkError("slack voltage must be positive", self.v0)
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate bus ids", sorted(i for i in set(ids) if ids.count(i) > 1))
        if self.slack_bus in ids:
            raise NetworkError("slack bus must not appear in the bus list", self.slack_bus)
        self._check_radial()

    def _check_radial(self):
        known = set(self.bus_ids) | {self.slack_bus}
        seen = set()
        adjacency: dict[int, list[tuple[int, Line]]] = {b: [] for b in known}
        for line in self.lines:
            key = frozenset((line.from_bus, line.to_bus))
            if key in seen:
                raise NonRadialError("parallel or duplicate line", line)
            seen.add(key)
            for end in (line.from_bus, line.to_bus):
                if end not in known:
                    raise DanglingBusError("line references unknown bus", line)
            adjacency[line.from_bus].append((line.to_bus, line))
            adjacency[line.to_bus].append((line.from_bus, line))
        if len(self.lines) != len(self.buses):
            raise NonRadialError(
                f"a radial feeder with {len(self.buses)} non-slack buses needs exactly "
                f"{len(self.buses)} lines, got {len(self.lines)}"
            )
        parent: dict[int, tuple[int, Line]] = {}
        order = []
        queue = deque([self.slack_bus])
        visited = {self.slack_bus}
        while queue:
            u = queue.popleft()
            for w, line in adjacency[u]:
                if w in visited:
                    continue
                visited.add(w)
                parent[w] = (u, line)
                order.append(w)
                queue.append(w)
        missing = known - visited
        if missing:
            raise NonRadialError("buses not connected to the slack", sorted(missing))
        object.__setattr__(self, "_parent", parent)
        object.__setattr__(self, "_bfs_order", tuple(order))

    # --- indexing -------------------------------------------------------
    @cached_property
    def bus_ids(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses)

    @cached_property
    def index(self) -> dict[int, int]:
        return {b: i for i, b in enumerate(self.bus_ids)}

    @property
    def n(self) -> int:
        return len(self.buses)

    def bus(self, bus_id: int) -> Bus:
        try:
            return self.buses[self.index[bus_id]]
        except KeyError:
            raise UnknownBusError(f"unknown bus id {bus_id!r}") from None

    @cached_property
    def control_buses(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses if b.inverter is not None)

    def parent(self, bus_id: int) -> int:
        return self._parent[bus_id][0]

    @cached_property
    def parent_rows(self) -> np.ndarray:
        """Row of each bus's upstream bus; -1 for children of the slack."""
        out = np.array([self.index.get(self._parent[b][0], -1) for b in self.bus_ids], dtype=int)
        out.flags.writeable = False
        return out

    @cached_property
    def line_r(self) -> np.ndarray:
        """Resistance of the line feeding each bus, in bus order."""
        out = np.array([self._parent[b][1].r for b in self.bus_ids], dtype=float)
        out.flags.writeable = False
        return out

    @cached_property
    def line_x(self) -> np.ndarray:
        out = np.array([self._parent[b][1].x for b in self.bus_ids], dtype=float)
        out.flags.writeable = False
        return out

    @cached_property
    def path_matrix(self) -> np.ndarray:
        """0/1 matrix B with B[k, j] = 1 iff the line feeding bus k lies on
        the slack-to-j path. Rows and columns follow ``bus_ids``."""
        n = self.n
        B = np.zeros((n, n))
        for j, b in enumerate(self.bus_ids):
            node = b
            while node != self.slack_bus:
                B[self.index[node], j] = 1.0
                node = self._parent[node][0]
        B.flags.writeable = False
        return B

    @cached_property
    def topological_rows(self) -> np.ndarray:
        """Bus rows in breadth-first order from the slack."""
        return np.array([self.index[b] for b in self._bfs_order], dtype=int)

    # --- injections -----------------------------------------------------
    @property
    def p_load(self) -> np.ndarray:
        return np.array([b.p_load for b in self.buses])

    @property
    def q_load(self) -> np.ndarray:
        return np.array([b.q_load for b in self.buses])

    @property
    def p_gen(self) -> np.ndarray:
        return np.array([b.p_gen for b in self.buses])

    # --- scenario adjustments ------------------------------------------
    def with_load_multiplier(self, multiplier: float) -> "FeederNetwork":
        if not (multiplier >= 0 and math.isfinite(multiplier)):
            raise NetworkError("load multiplier must be finite and non-negative", multiplier)
        buses = [replace(b, p_load=b.p_load * multiplier, q_load=b.q_load * multiplier) for b in self.buses]
        return replace(self, buses=tuple(buses))

    def with_pv_fraction(self, fraction: float) -> "FeederNetwork":
        """Set every inverter's real output to ``fraction`` of its rating."""
        if not 0 <= fraction <= 1:
            raise NetworkError("pv fraction must lie in [0, 1]", fraction)
        buses = []
        for b in self.buses:
            if b.inverter is not None:
                inv = replace(b.inverter, p_operating=fraction * b.inverter.s_rated)
                b = replace(b, inverter=inv, p_gen=inv.p_operating)
            buses.append(b)
        return replace(self, buses=tuple(buses))

    def with_v0(self, v0: float) -> "FeederNetwork":
        return replace(self, v0=v0)


def path_to_root(network: FeederNetwork, bus: int) -> list[Line]:
    """Lines on the unique slack-to-``bus`` path, ordered from the slack."""
    if bus == network.slack_bus:
        return []
    if bus not in network.index:
        raise UnknownBusError(f"unknown bus id {bus!r}")
    path = []
    node = bus
    while node != network.slack_bus:
        up, line = network._parent[node]
        path.append(line)
        node = up
    path.reverse()
    return path


@dataclass(frozen=True)
class ImpedanceMatrices:
    R: np.ndarray
    X: np.ndarray
    bus_order: tuple[int, ...]

    @cached_property
    def index(self) -> dict[int, int]:
        return {b: i for i, b in enumerate(self.bus_order)}

    def rows(self, buses: Iterable[int]) -> list[int]:
        out = []
        for b in buses:
            if b not in self.index:
                raise UnknownBusError(f"unknown bus id {b!r}")
            out.append(self.index[b])
        return out


def build_impedance_matrices(network: FeederNetwork) -> ImpedanceMatrices:
    # R_ij = sum of r over the lines shared by the paths to i and j.
    B = network.path_matrix
    R = B.T @ (network.line_r[:, None] * B)
    X = B.T @ (network.line_x[:, None] * B)
    R = 0.5 * (R + R.T)
    X = 0.5 * (X + X.T)
    R.flags.writeable = False
    X.flags.writeable = False
    return ImpedanceMatrices(R=R, X=X, bus_order=network.bus_ids)


def effective_submatrix(matrices: ImpedanceMatrices, control_buses: Iterable[int], which: str = "X") -> np.ndarray:
    """Principal submatrix of X (or R) on the controlled buses."""
    idx = matrices.rows(control_buses)
    M = matrices.X if which == "X" else matrices.R
    return M[np.ix_(idx, idx)].copy()


# --- network file ---------------------------------------------------------

_TOP_KEYS = {"schema", "name", "description", "base", "slack", "power_factor", "lines", "loads", "inverters"}
_REQUIRED_TOP = {"schema", "base", "slack", "lines"}
_SECTION_KEYS = {
    "base": ({"v_base_kv", "s_base_kva"}, set()),
    "slack": ({"id", "v0_pu"}, set()),
    "lines": ({"from", "to", "r_ohm", "x_ohm"}, {"note"}),
    "loads": ({"bus", "peak_mva"}, {"pf"}),
    "inverters": ({"bus", "nameplate_mw", "p_operating_mw"}, {"q_limit_override_mvar"}),
}


def _check_record(section: str, rec: Any) -> None:
    required, optional = _SECTION_KEYS[section]
    if not isinstance(rec, Mapping):
        raise SchemaError(f"{section}: expected a mapping", rec)
    keys = set(rec)
    if not required <= keys:
        raise SchemaError(f"{section}: missing field(s) {sorted(required - keys)}", dict(rec))
    extra = keys - required - optional
    if extra:
        raise SchemaError(f"{section}: unknown field(s) {sorted(extra)}", dict(rec))
    for k, v in rec.items():
        if k == "note":
            continue
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise SchemaError(f"{section}: field {k!r} must be numeric", dict(rec))
        if not math.isfinite(v):
            raise SchemaError(f"{section}: field {k!r} must be finite", dict(rec))


def _as_id(section: str, rec: Mapping, key: str) -> int:
    val = rec[key]
    if int(val) != val:
        raise SchemaError(f"{section}: bus id {key!r} must be an integer", dict(rec))
    return int(val)


def parse_network(document: str | Mapping, power_factor: float | None = None) -> FeederNetwork:
    """Build a validated per-unit network from a network document.

    ``document`` is YAML text or an already-loaded mapping. ``power_factor``
    overrides the file-level default load power factor (per-load ``pf``
    entries still win).
    """
    if isinstance(document, str):
        try:
            data = yaml.safe_load(document)
        except yaml.YAMLError as exc:
            raise SchemaError(f"not valid YAML: {exc}") from None
    else:
        data = document
    if not isinstance(data, Mapping):
        raise SchemaError("network document must be a mapping", type(data).__name__)
    keys = set(data)
    if keys - _TOP_KEYS:
        raise SchemaError(f"unknown top-level field(s) {sorted(keys - _TOP_KEYS)}")
    if _REQUIRED_TOP - keys:
        raise SchemaError(f"missing top-level field(s) {sorted(_REQUIRED_TOP - keys)}")
    if data["schema"] != NETWORK_SCHEMA:
        raise SchemaError(f"unsupported schema (expected {NETWORK_SCHEMA!r})", data["schema"])

    _check_record("base", data["base"])
    base = PerUnitBase.from_kv_kva(data["base"]["v_base_kv"], data["base"]["s_base_kva"])
    _check_record("slack", data["slack"])
    slack = _as_id("slack", data["slack"], "id")
    v0 = float(data["slack"]["v0_pu"])

    pf_default = data.get("power_factor", DEFAULT_POWER_FACTOR) if power_factor is None else power_factor
    if not (isinstance(pf_default, (int, float)) and 0 < pf_default <= 1):
        raise SchemaError("power_factor must lie in (0, 1]", pf_default)

    for section in ("lines", "loads", "inverters"):
        if not isinstance(data.get(section, []) or [], list):
            raise SchemaError(f"{section} must be a list")

    lines = []
    touched = {slack}
    for rec in data["lines"] or []:
        _check_record("lines", rec)
        a, b = _as_id("lines", rec, "from"), _as_id("lines", rec, "to")
        try:
            lines.append(Line(a, b, base.ohm_to_pu(float(rec["r_ohm"])), base.ohm_to_pu(float(rec["x_ohm"])), str(rec.get("note", ""))))
        except NetworkError as exc:
            raise type(exc)(exc.reason, dict(rec)) from None
        touched.update((a, b))

    def _target(section: str, rec: Mapping) -> int:
        bus = _as_id(section, rec, "bus")
        if bus == slack:
            raise SchemaError(f"{section}: entry on the slack bus", dict(rec))
        if bus not in touched:
            if not lines:
                raise NonRadialError("no lines connect bus to the slack", dict(rec))
            raise DanglingBusError(f"{section}: bus is not on any line", dict(rec))
        return bus

    loads: dict[int, tuple[float, float]] = {}
    for rec in data.get("loads") or []:
        _check_record("loads", rec)
        bus = _target("loads", rec)
        if bus in loads:
            raise SchemaError("loads: duplicate entry for bus", dict(rec))
        pf = rec.get("pf", pf_default)
        s = base.mva_to_pu(float(rec["peak_mva"]))
        if not (0 < pf <= 1) or s < 0:
            raise SchemaError("loads: need peak_mva >= 0 and pf in (0, 1]", dict(rec))
        loads[bus] = (pf * s, s * math.sqrt(1 - pf**2))

    inverters: dict[int, Inverter] = {}
    for rec in data.get("inverters") or []:
        _check_record("inverters", rec)
        bus = _target("inverters", rec)
        if bus in inverters:
            raise SchemaError("inverters: duplicate entry for bus", dict(rec))
        override = rec.get("q_limit_override_mvar")
        try:
            inverters[bus] = Inverter(
                base.mva_to_pu(float(rec["nameplate_mw"])),
                base.mva_to_pu(float(rec["p_operating_mw"])),
                None if override is None else base.mva_to_pu(float(override)),
            )
        except NetworkError as exc:
            raise SchemaError(exc.reason, dict(rec)) from None

    buses = []
    for bid in sorted(touched - {slack}):
        p, q = loads.get(bid, (0.0, 0.0))
        inv = inverters.get(bid)
        buses.append(Bus(bid, p, q, inv.p_operating if inv else 0.0, inv))
    return FeederNetwork(slack, tuple(buses), tuple(lines), v0, base, float(pf_default))


def load_network(path: str | Path, power_factor: float | None = None) -> FeederNetwork:
    return parse_network(Path(path).read_text(), power_factor=power_factor)


def bundled_network_path(name: str) -> Path:
    path = Path(__file__).parent / "data" / f"{name}.yaml"
    if not path.is_file():
        raise FileNotFoundError(f"no bundled network named {name!r}")
    return path


def load_sce42(power_factor: float | None = None) -> FeederNetwork:
    """The bundled 45-bus SCE feeder."""
    return load_network(bundled_network_path("sce42"), power_factor=power_factor)
