"""Objective, convergence conditions, equilibria and step-size experiments."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence, TextIO

import numpy as np
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .control import ControllerSet
from .dynamics import DynamicsSpec, Kind, LinearPhysics, control_model, make_physics, simulate, step_d3
from .netmodel import FeederNetwork
from .powerflow import LinearModel

CONDITIONS_SCHEMA = "voltflow-conditions/1"
SWEEP_SCHEMA = "voltflow-sweep/1"


class EigenError(RuntimeError):
    pass


class EquilibriumError(RuntimeError):
    pass


def objective_value(q, model: LinearModel, controller: ControllerSet) -> float:
    """F(q) = C(q) + q'Xq/2 + q'v_tilde on the controlled buses."""
    q = np.asarray(q, dtype=float)
    return controller.cost(q) + 0.5 * float(q @ model.X @ q) + float(q @ model.v_tilde)


objective = objective_value


def lambda_max_symmetric(M, tol: float = 1e-10, max_iter: int = 200_000, seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric matrix by implicitly restarted
    Lanczos (ARPACK), started from a seeded random vector so results are
    reproducible.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {M.shape}")
    scale = float(np.max(np.abs(M), initial=0.0))
    if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(scale, 1e-300)):
        raise ValueError("matrix is not symmetric")
    n = M.shape[0]
    if n == 1:
        return float(M[0, 0])
    if scale == 0:
        return 0.0
    v0 = np.random.default_rng(seed).standard_normal(n)
    try:
        vals = eigsh((M + M.T) / 2, k=1, which="LA", v0=v0, tol=tol, maxiter=max_iter, return_eigenvectors=False)
    except ArpackNoConvergence as exc:
        raise EigenError(f"Lanczos iteration did not converge in {max_iter} restarts") from exc
    return float(vals[0])


# --- convergence conditions -----------------------------------------------

@dataclass(frozen=True)
class ConditionReport:
    c1_holds: bool
    c1_margin: float
    c2_bound: float
    c3_bound: float
    lambda_max: float
    alpha_max: float

    def write_table(self, fh: TextIO, meta: dict | None = None) -> None:
        fh.write(f"# schema\t{CONDITIONS_SCHEMA}\n")
        for k, v in (meta or {}).items():
            fh.write(f"# {k}\t{v}\n")
        fh.write("\t".join(CONDITION_COLUMNS) + "\n")
        fh.write(self.row() + "\n")

    def row(self) -> str:
        d = asdict(self)
        return "\t".join(str(int(d[c])) if c == "c1_holds" else f"{d[c]:.12e}" for c in CONDITION_COLUMNS)


CONDITION_COLUMNS = ("c1_holds", "c1_margin", "c2_bound", "c3_bound", "lambda_max", "alpha_max")


def check_conditions(controller: ControllerSet, X_eff, tol: float = 1e-10) -> ConditionReport:
    """Spectral convergence conditions with C'' replaced by diag(1/alpha)."""
    X_eff = np.asarray(X_eff, dtype=float)
    alpha = controller.alpha
    A_inv = np.diag(1.0 / alpha)
    # min eig of (A^-1 - X) = -max eig of (X - A^-1)
    margin = -lambda_max_symmetric(X_eff - A_inv, tol)
    lam = lambda_max_symmetric(A_inv + X_eff, tol)
    c2 = 2.0 / lam
    a_max = float(np.max(alpha))
    return ConditionReport(bool(margin > 0), margin, c2, c2 / a_max, lam, a_max)


def active_set_bounds(controller: ControllerSet, X_eff, q, v, tol: float = 1e-10) -> tuple[float, float]:
    """Local stability limits of D2 and D3 around an equilibrium (q, v).

    Buses sitting in their deadband or pinned at a reactive limit do not move
    under small perturbations, so only the remaining ones enter:
    gamma_g < 2 / lambda_max(A^-1 + X)_act, gamma_p < 2 / lambda_max(I + A X)_act.
    Returns (inf, inf) when no bus is active.
    """
    act = [i for i, (c, qi, vi) in enumerate(zip(controller.curves, q, v)) if _is_active(c, qi, vi)]
    if not act:
        return float("inf"), float("inf")
    X = np.asarray(X_eff)[np.ix_(act, act)]
    a = controller.alpha[act]
    lam_g = lambda_max_symmetric(np.diag(1 / a) + X, tol)
    # I + A X is similar to I + A^1/2 X A^1/2
    sa = np.sqrt(a)
    lam_p = lambda_max_symmetric(np.eye(len(act)) + sa[:, None] * X * sa[None, :], tol)
    return 2 / lam_g, 2 / lam_p


def _is_active(curve, q, v, atol: float = 1e-9) -> bool:
    if abs(q) <= atol:
        return False
    return curve.q_min + atol < q < curve.q_max - atol


# --- equilibrium ----------------------------------------------------------

@dataclass(frozen=True)
class EquilibriumResult:
    q_star: np.ndarray
    v_star: np.ndarray
    objective: float
    residual: float
    iterations: int


def fixed_point_residual(q, model: LinearModel, controller: ControllerSet) -> float:
    q = np.asarray(q, dtype=float)
    return float(np.max(np.abs(q - controller.evaluate(model.X @ q + model.v_tilde)), initial=0.0))


def solve_equilibrium(system: FeederNetwork | LinearModel, controller: ControllerSet, tol: float = 1e-10, max_iter: int = 1_000_000, step_fraction: float = 0.5) -> EquilibriumResult:
    """Unique equilibrium under linear physics, by pseudo-gradient iteration
    with gamma_p = step_fraction * (C3 bound)."""
    model = control_model(system, controller) if isinstance(system, FeederNetwork) else system
    report = check_conditions(controller, model.X)
    spec = DynamicsSpec(Kind.D3, controller, LinearPhysics(model), step_fraction * report.c3_bound)
    state = spec.initial_state()
    for it in range(max_iter + 1):
        res = fixed_point_residual(state.q, model, controller)
        if res <= tol:
            return EquilibriumResult(state.q, state.v, objective_value(state.q, model, controller), res, it)
        state = step_d3(state, spec)
    raise EquilibriumError(f"fixed-point residual {res:.3e} above tol={tol:g} after {max_iter} iterations")


# --- descent comparison ---------------------------------------------------

def descent_bounds(q, v, controller: ControllerSet, X_eff, gamma_g: float, gamma_p: float, gradient_linear_coef: float | None = None) -> tuple[float, float]:
    """Second-order bounds on the per-step decrease of F.

    Returns (gradient, pseudo_gradient):
      |g'(gamma_g^2 H - 2c I) g| with g the subgradient and c =
      ``gradient_linear_coef`` (gamma_g unless given), and
      |d'(gamma_p^2 H - 2 gamma_p A^-1) d| with d = q - f(v),
    where H = diag(1/alpha) + X_eff.
    """
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    X_eff = np.asarray(X_eff, dtype=float)
    A_inv = np.diag(1.0 / controller.alpha)
    H = A_inv + X_eff
    c = gamma_g if gradient_linear_coef is None else gradient_linear_coef
    g = controller.subgradient(q, v)
    d = q - controller.evaluate(v)
    grad = abs(float(g @ (gamma_g**2 * H - 2 * c * np.eye(len(q))) @ g))
    pseudo = abs(float(d @ (gamma_p**2 * H - 2 * gamma_p * A_inv) @ d))
    return grad, pseudo


# --- step-size sweeps -----------------------------------------------------

@dataclass(frozen=True)
class RunSummary:
    stepsize: float
    status: str
    converged_at: int | None
    steps: int
    final_objective: float
    objective_monotone: bool
    objective_rise: float
    overshoot: bool


@dataclass
class SweepResult:
    kind: Kind
    points: list[RunSummary] = field(default_factory=list)

    @property
    def max_stable(self) -> float | None:
        ok = [p.stepsize for p in self.points if p.status == "converged"]
        return max(ok) if ok else None

    def write_table(self, fh: TextIO, meta: dict | None = None) -> None:
        fh.write(f"# schema\t{SWEEP_SCHEMA}\n")
        for k, v in (meta or {}).items():
            fh.write(f"# {k}\t{v}\n")
        fh.write(f"# kind\t{self.kind.value}\n# max_stable\t{self.max_stable}\n")
        fh.write("index\tstepsize\tstatus\tconverged_at\tsteps\tfinal_F\tF_monotone\tF_rise\tovershoot\n")
        for i, p in enumerate(sorted(self.points, key=lambda p: p.stepsize)):
            conv = "" if p.converged_at is None else p.converged_at
            fh.write(f"{i}\t{p.stepsize!r}\t{p.status}\t{conv}\t{p.steps}\t{p.final_objective:.12e}\t{int(p.objective_monotone)}\t{p.objective_rise:.3e}\t{int(p.overshoot)}\n")

    def onset(self, rise_tol: float = 1e-4) -> float | None:
        """Smallest stepsize whose run oscillates, fails, or lets F rise by
        more than ``rise_tol`` of its total descent."""
        for p in sorted(self.points, key=lambda p: p.stepsize):
            if p.status != "converged" or p.objective_rise > rise_tol:
                return p.stepsize
        return None

    def best(self) -> RunSummary | None:
        """Fastest converging point (smallest stepsize on ties)."""
        ok = [p for p in self.points if p.status == "converged"]
        return min(ok, key=lambda p: (p.converged_at, p.stepsize)) if ok else None

    def steps_nonincreasing_before(self, stepsize: float | None) -> bool:
        pts = sorted((p for p in self.points if stepsize is None or p.stepsize < stepsize), key=lambda p: p.stepsize)
        if any(p.status != "converged" for p in pts):
            return False
        steps = [p.converged_at for p in pts]
        return all(b <= a for a, b in zip(steps, steps[1:]))


def has_overshoot(q_series: np.ndarray, atol: float = 1e-6) -> bool:
    """True when some bus's increment changes sign with both moves above atol."""
    dq = np.diff(np.asarray(q_series), axis=0)
    if len(dq) < 2:
        return False
    big = np.abs(dq) > atol
    flips = (np.sign(dq[1:]) * np.sign(dq[:-1]) < 0) & big[1:] & big[:-1]
    return bool(flips.any())


@dataclass(frozen=True)
class _Job:
    network: FeederNetwork
    controller: ControllerSet
    kind: Kind
    stepsize: float
    physics: str
    q0: tuple | None
    max_steps: int
    conv_tol: float
    conv_window: int


def _run_job(job: _Job) -> RunSummary:
    spec = DynamicsSpec(job.kind, job.controller, make_physics(job.network, job.controller, job.physics), job.stepsize)
    tr = simulate(spec, job.q0, job.max_steps, job.conv_tol, job.conv_window)
    return RunSummary(job.stepsize, tr.status(), tr.converged_at, tr.states[-1].t, tr.objective[-1], tr.objective_monotone(), tr.objective_rise(), has_overshoot(tr.q))


def run_grid(
    network: FeederNetwork,
    controller: ControllerSet,
    grid: Sequence[float],
    kind: Kind | str,
    physics: str = "nonlinear",
    q0=None,
    max_steps: int = 1000,
    conv_tol: float = 1e-8,
    conv_window: int = 5,
    workers: int | None = None,
) -> SweepResult:
    """Simulate every grid stepsize; results are in grid order."""
    kind = Kind(kind)
    jobs = [_Job(network, controller, kind, float(g), physics, None if q0 is None else tuple(q0), max_steps, conv_tol, conv_window) for g in grid]
    return SweepResult(kind, _map(jobs, workers))


def sweep_stepsize(
    network: FeederNetwork,
    controller: ControllerSet,
    grid: Sequence[float],
    kind: Kind | str,
    physics: str = "nonlinear",
    q0=None,
    max_steps: int = 1000,
    conv_tol: float = 1e-8,
    conv_window: int = 5,
    workers: int | None = None,
) -> SweepResult:
    """Largest grid stepsize whose run converges.

    The grid is scanned from the top down and the scan stops at the first
    converging point, so the answer does not assume the stable set is an
    interval. Only evaluated points appear in the result.
    """
    grid = [float(g) for g in grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be sorted ascending")
    kind = Kind(kind)
    workers = _workers(workers)
    result = SweepResult(kind)
    todo = grid[::-1]
    while todo:
        batch, todo = todo[:workers], todo[workers:]
        jobs = [_Job(network, controller, kind, g, physics, None if q0 is None else tuple(q0), max_steps, conv_tol, conv_window) for g in batch]
        out = _map(jobs, workers)
        result.points.extend(out)
        if any(p.status == "converged" for p in out):
            break
    return result


def _workers(workers: int | None) -> int:
    return max(1, workers if workers else (os.cpu_count() or 1))


def _map(jobs: list[_Job], workers: int | None) -> list[RunSummary]:
    workers = min(_workers(workers), len(jobs)) if jobs else 1
    if workers <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))
