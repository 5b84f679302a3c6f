"""Closed-loop volt/var dynamics: non-incremental (D1), gradient (D2) and
pseudo-gradient (D3) controllers against linear or exact network physics.

State vectors live on the controlled buses only; uncontrolled buses carry
q = 0 throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence, TextIO

import numpy as np

from .control import ControllerSet
from .netmodel import FeederNetwork, build_impedance_matrices
from .powerflow import InjectionProfile, LinearModel, PowerFlowError, build_linear_model, solve_distflow

TRAJECTORY_SCHEMA = "voltflow-trajectory/1"

CONV_TOL = 1e-8
CONV_WINDOW = 5
TRANSIENT_STEPS = 20
STALL_STEPS = 50


class Kind(str, Enum):
    D1 = "D1"
    D2 = "D2"
    D3 = "D3"


def project(x, lo, hi):
    """Clamp ``x`` to [lo, hi] (elementwise for arrays)."""
    if np.any(np.asarray(lo) > np.asarray(hi)):
        raise ValueError(f"empty interval [{lo}, {hi}]")
    if np.ndim(x) == 0 and np.ndim(lo) == 0 and np.ndim(hi) == 0:
        return min(max(x, lo), hi)
    return np.minimum(np.maximum(x, lo), hi)


# --- physics --------------------------------------------------------------

class LinearPhysics:
    """v = X_eff q + v_tilde on the controlled buses."""

    mode = "linear"

    def __init__(self, model: LinearModel):
        self.model = model

    @classmethod
    def from_network(cls, network: FeederNetwork, controller: ControllerSet) -> "LinearPhysics":
        return cls(control_model(network, controller))

    def __call__(self, q: np.ndarray) -> np.ndarray:
        return self.model.X @ q + self.model.v_tilde


class NonlinearPhysics:
    """Exact branch-flow voltages at the controlled buses.

    Each solve warm-starts from the previous voltage profile; the returned
    magnitudes still satisfy the sweep tolerance.
    """

    mode = "nonlinear"

    def __init__(self, network: FeederNetwork, controller: ControllerSet, tol: float = 1e-10, max_iter: int = 100):
        self.network = network
        self.rows = [network.index[b] for b in controller.buses]
        self.base = InjectionProfile.from_network(network)
        self.model = control_model(network, controller)
        self.tol = tol
        self.max_iter = max_iter

    def __call__(self, q: np.ndarray) -> np.ndarray:
        q_full = np.zeros(self.network.n)
        q_full[self.rows] = q
        sol = solve_distflow(self.network, self.base.with_control(q_full), self.tol, self.max_iter)
        return sol.v[self.rows]


def control_model(network: FeederNetwork, controller: ControllerSet) -> LinearModel:
    """Linear model restricted to the controlled buses (effective X)."""
    matrices = build_impedance_matrices(network)
    full = build_linear_model(network, matrices, InjectionProfile.from_network(network))
    return full.restrict(matrices.rows(controller.buses))


def make_physics(network: FeederNetwork, controller: ControllerSet, mode: str = "linear"):
    if mode == "linear":
        return LinearPhysics.from_network(network, controller)
    if mode == "nonlinear":
        return NonlinearPhysics(network, controller)
    raise ValueError(f"unknown physics mode {mode!r} (expected 'linear' or 'nonlinear')")


# --- state and steppers ---------------------------------------------------

@dataclass(frozen=True)
class ControlState:
    t: int
    q: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class DynamicsSpec:
    kind: Kind
    controller: ControllerSet
    physics: LinearPhysics | NonlinearPhysics
    stepsize: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind is not Kind.D1 and not self.stepsize > 0:
            raise ValueError(f"{self.kind.value} needs a positive stepsize, got {self.stepsize}")

    def initial_state(self, q0=None) -> ControlState:
        q = np.zeros(len(self.controller)) if q0 is None else np.array(q0, dtype=float)
        if q.shape != (len(self.controller),):
            raise ValueError(f"q0 must have {len(self.controller)} entries")
        if not self.controller.within_limits(q):
            raise ValueError("q0 outside the reactive limits")
        return ControlState(0, q, self.physics(q))


def _advance(state: ControlState, spec: DynamicsSpec, q_next: np.ndarray) -> ControlState:
    return ControlState(state.t + 1, q_next, spec.physics(q_next))


def step_d1(state: ControlState, spec: DynamicsSpec) -> ControlState:
    """q(t+1) = f(v(t))."""
    return _advance(state, spec, spec.controller.evaluate(state.v))


def step_d2(state: ControlState, spec: DynamicsSpec) -> ControlState:
    """Projected subgradient step on the reverse-engineered objective."""
    c = spec.controller
    g = c.subgradient(state.q, state.v)
    return _advance(state, spec, project(state.q - spec.stepsize * g, c.q_min, c.q_max))


def step_d3(state: ControlState, spec: DynamicsSpec) -> ControlState:
    """Projected move toward the droop response: q - gamma (q - f(v))."""
    c = spec.controller
    f = c.evaluate(state.v)
    return _advance(state, spec, project(state.q - spec.stepsize * (state.q - f), c.q_min, c.q_max))


STEPPERS = {Kind.D1: step_d1, Kind.D2: step_d2, Kind.D3: step_d3}


def step(state: ControlState, spec: DynamicsSpec) -> ControlState:
    return STEPPERS[spec.kind](state, spec)


# --- trajectories ---------------------------------------------------------

@dataclass
class Trajectory:
    kind: Kind
    stepsize: float
    buses: tuple[int, ...]
    states: list[ControlState] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    converged_at: int | None = None
    oscillating: bool = False
    failure: str | None = None

    @property
    def converged(self) -> bool:
        return self.converged_at is not None

    @property
    def q(self) -> np.ndarray:
        return np.array([s.q for s in self.states])

    @property
    def v(self) -> np.ndarray:
        return np.array([s.v for s in self.states])

    @property
    def final(self) -> ControlState:
        return self.states[-1]

    def objective_monotone(self, rtol: float = 1e-12) -> bool:
        """True when F never increases by more than rounding."""
        F = np.asarray(self.objective)
        if F.size < 2:
            return True
        slack = rtol * np.maximum(np.abs(F[:-1]), 1.0)
        return bool(np.all(np.diff(F) <= slack))

    def objective_rise(self) -> float:
        """Largest single-step increase of F relative to its total descent.

        Under nonlinear physics F is only a surrogate, so tiny rises near the
        end of a converging run are expected; real oscillation shows up as
        rises of a sizeable fraction of the descent.
        """
        F = np.asarray(self.objective)
        if F.size < 2:
            return 0.0
        rise = float(np.max(np.diff(F)))
        if rise <= 0:
            return 0.0
        span = F[0] - float(np.min(F))
        return rise / span if span > 0 else float("inf")

    def status(self) -> str:
        if self.failure:
            return "failed"
        if self.converged:
            return "converged"
        return "oscillating" if self.oscillating else "unconverged"

    def write_table(self, fh: TextIO, meta: dict | None = None) -> None:
        fh.write(f"# schema\t{TRAJECTORY_SCHEMA}\n")
        for k, v in (meta or {}).items():
            fh.write(f"# {k}\t{v}\n")
        fh.write(f"# kind\t{self.kind.value}\n# stepsize\t{self.stepsize!r}\n")
        fh.write(f"# status\t{self.status()}\n# converged_at\t{self.converged_at}\n")
        cols = ["t", "F"] + [f"q_{b}" for b in self.buses] + [f"v_{b}" for b in self.buses]
        fh.write("\t".join(cols) + "\n")
        for s, F in zip(self.states, self.objective):
            vals = [f"{s.t}", f"{F:.12e}"] + [f"{x:.12e}" for x in s.q] + [f"{x:.12e}" for x in s.v]
            fh.write("\t".join(vals) + "\n")


def simulate(
    spec: DynamicsSpec,
    q0: Sequence[float] | None = None,
    max_steps: int = 500,
    conv_tol: float = CONV_TOL,
    conv_window: int = CONV_WINDOW,
    transient: int = TRANSIENT_STEPS,
    stall: int = STALL_STEPS,
) -> Trajectory:
    """Iterate the selected controller until convergence, oscillation or
    ``max_steps``.

    Convergence: ||q(t+1) - q(t)||_inf < conv_tol for ``conv_window``
    consecutive steps; ``converged_at`` is the first step of that run.
    Oscillation: past the ``transient``, the increment is still above
    10 * conv_tol while the best objective value has not improved over the
    last ``stall`` steps.
    """
    from .analysis import objective_value

    if max_steps < 1:
        raise ValueError("max_steps must be at least 1")
    model = spec.physics.model
    traj = Trajectory(spec.kind, float(spec.stepsize), spec.controller.buses)
    state = spec.initial_state(q0)
    traj.states.append(state)
    traj.objective.append(objective_value(state.q, model, spec.controller))
    best = [traj.objective[0]]
    streak = 0
    stepper = STEPPERS[spec.kind]
    for _ in range(max_steps):
        try:
            nxt = stepper(state, spec)
        except PowerFlowError as exc:
            traj.failure = f"step {state.t + 1}: {exc}"
            break
        dq = float(np.max(np.abs(nxt.q - state.q), initial=0.0))
        state = nxt
        traj.states.append(state)
        F = objective_value(state.q, model, spec.controller)
        traj.objective.append(F)
        best.append(min(best[-1], F))
        streak = streak + 1 if dq < conv_tol else 0
        if streak >= conv_window:
            traj.converged_at = state.t - conv_window
            break
        if state.t > transient and state.t >= stall and dq > 10 * conv_tol and best[-1] >= best[-1 - stall]:
            traj.oscillating = True
            break
    return traj
