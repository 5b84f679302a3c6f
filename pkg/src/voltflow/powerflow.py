"""Linear (LinDistFlow) and exact branch-flow voltage models."""
from __future__ import annotations

from dataclasses import dataclass
from typing import TextIO

import numpy as np

from .netmodel import FeederNetwork, ImpedanceMatrices


class PowerFlowError(RuntimeError):
    pass


class NonConvergenceError(PowerFlowError):
    pass


class VoltageCollapseError(PowerFlowError):
    pass


@dataclass(frozen=True)
class InjectionProfile:
    """Per-bus injections in bus order (p.u.)."""

    p_net: np.ndarray
    q_net_uncontrolled: np.ndarray
    q_control: np.ndarray

    def __post_init__(self):
        arrs = [np.asarray(a, dtype=float) for a in (self.p_net, self.q_net_uncontrolled, self.q_control)]
        if len({a.shape for a in arrs}) != 1 or arrs[0].ndim != 1:
            raise ValueError("injection vectors must be 1-D and the same length")
        if not all(np.isfinite(a).all() for a in arrs):
            raise ValueError("injection vectors must be finite")
        for name, a in zip(("p_net", "q_net_uncontrolled", "q_control"), arrs):
            object.__setattr__(self, name, a)

    @classmethod
    def from_network(cls, network: FeederNetwork, q_control=None) -> "InjectionProfile":
        q = np.zeros(network.n) if q_control is None else np.asarray(q_control, dtype=float)
        return cls(network.p_gen - network.p_load, -network.q_load, q)

    def with_control(self, q_control) -> "InjectionProfile":
        return InjectionProfile(self.p_net, self.q_net_uncontrolled, q_control)

    @property
    def q_net(self) -> np.ndarray:
        return self.q_control + self.q_net_uncontrolled


@dataclass(frozen=True)
class LinearModel:
    """v = X q + v_tilde over all non-slack buses."""

    X: np.ndarray
    v_tilde: np.ndarray

    def restrict(self, rows) -> "LinearModel":
        rows = list(rows)
        return LinearModel(self.X[np.ix_(rows, rows)], self.v_tilde[rows])


def build_linear_model(network: FeederNetwork, matrices: ImpedanceMatrices, inj: InjectionProfile) -> LinearModel:
    n = network.n
    if matrices.X.shape != (n, n) or inj.p_net.shape != (n,):
        raise ValueError(f"dimension mismatch: network has {n} buses, matrices {matrices.X.shape}, injections {inj.p_net.shape}")
    # q_net_uncontrolled is -q^c, so "- X q^c" becomes "+ X q_net_uncontrolled".
    v_tilde = network.v0 + matrices.R @ inj.p_net + matrices.X @ inj.q_net_uncontrolled
    return LinearModel(matrices.X, v_tilde)


def linear_voltage(model: LinearModel, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != model.v_tilde.shape:
        raise ValueError(f"control vector has shape {q.shape}, model expects {model.v_tilde.shape}")
    return model.X @ q + model.v_tilde


@dataclass(frozen=True)
class PowerFlowSolution:
    """Branch quantities are indexed by the receiving bus (bus order)."""

    v: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    ell: np.ndarray
    residual: float
    iterations: int
    bus_ids: tuple[int, ...] = ()
    parent_ids: tuple[int, ...] = ()

    def write_table(self, fh: TextIO) -> None:
        fh.write("# voltflow-powerflow/1\n")
        fh.write(f"# iterations\t{self.iterations}\n# residual\t{self.residual:.6e}\n")
        fh.write("bus\tv\n")
        for b, v in zip(self.bus_ids, self.v):
            fh.write(f"{b}\t{v:.12f}\n")
        fh.write("from\tto\tP\tQ\tell\n")
        for a, b, P, Q, l in zip(self.parent_ids, self.bus_ids, self.P, self.Q, self.ell):
            fh.write(f"{a}\t{b}\t{P:.12e}\t{Q:.12e}\t{l:.12e}\n")


def distflow_residuals(network: FeederNetwork, inj: InjectionProfile, v, P, Q, ell) -> dict[str, float]:
    """Max absolute residual of each branch-flow equation family.

    Line k is the line feeding bus k; its sending-end voltage is the parent's.
    """
    r, x = network.line_r, network.line_x
    parent = network.parent_rows
    v_send = np.where(parent >= 0, v[np.maximum(parent, 0)], network.v0)
    # children flows: sum of P over lines whose parent row is k
    child_P = np.zeros_like(P)
    child_Q = np.zeros_like(Q)
    np.add.at(child_P, parent[parent >= 0], P[parent >= 0])
    np.add.at(child_Q, parent[parent >= 0], Q[parent >= 0])
    return {
        "p_balance": float(np.max(np.abs(P - (-inj.p_net + child_P + r * ell)), initial=0.0)),
        "q_balance": float(np.max(np.abs(Q - (-inj.q_net + child_Q + x * ell)), initial=0.0)),
        "v_drop": float(np.max(np.abs(v**2 - (v_send**2 - 2 * (r * P + x * Q) + (r**2 + x**2) * ell)), initial=0.0)),
        "current": float(np.max(np.abs(ell * v_send**2 - (P**2 + Q**2)), initial=0.0)),
    }


def solve_distflow(
    network: FeederNetwork,
    inj: InjectionProfile,
    tol: float = 1e-10,
    max_iter: int = 100,
    v_start=None,
) -> PowerFlowSolution:
    """Backward/forward sweep on the exact branch-flow equations.

    Starts flat (v = v0, ell = 0) unless ``v_start`` is given. Each pass
    accumulates branch flows with losses toward the slack, then updates
    squared voltages away from it, then refreshes the squared currents.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    n = network.n
    if inj.p_net.shape != (n,):
        raise ValueError(f"injection length {inj.p_net.shape[0]} does not match {n} buses")
    B = network.path_matrix
    r, x = network.line_r, network.line_x
    z2 = r**2 + x**2
    parent = network.parent_rows
    has_parent = parent >= 0
    v0sq = network.v0**2
    p_demand = -inj.p_net
    q_demand = -inj.q_net

    vsq = np.full(n, v0sq) if v_start is None else np.asarray(v_start, dtype=float) ** 2
    ell = np.zeros(n)
    for it in range(1, max_iter + 1):
        P = B @ (p_demand + r * ell)
        Q = B @ (q_demand + x * ell)
        vsq = v0sq - B.T @ (2 * (r * P + x * Q) - z2 * ell)
        if np.any(vsq <= 0):
            raise VoltageCollapseError(f"squared voltage non-positive at iteration {it}")
        vsq_send = np.where(has_parent, vsq[np.maximum(parent, 0)], v0sq)
        ell_new = (P**2 + Q**2) / vsq_send
        # the flows and voltages above are exact for the previous ell, so
        # only the current equation carries a residual
        resid = float(np.max(np.abs(ell * vsq_send - (P**2 + Q**2)), initial=0.0))
        if resid <= tol:
            return PowerFlowSolution(np.sqrt(vsq), P, Q, ell, resid, it, network.bus_ids, tuple(network.parent(b) for b in network.bus_ids))
        ell = ell_new
        if not np.all(np.isfinite(ell)):
            raise NonConvergenceError(f"sweep diverged at iteration {it}")
    raise NonConvergenceError(f"sweep did not reach tol={tol:g} in {max_iter} iterations (residual {resid:.3e})")


@dataclass(frozen=True)
class LinearizationReport:
    bus_ids: tuple[int, ...]
    relative_error: np.ndarray
    v_linear: np.ndarray
    v_nonlinear: np.ndarray

    @property
    def max_error(self) -> float:
        return float(np.max(self.relative_error, initial=0.0))

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.relative_error)) if self.relative_error.size else 0.0


def linearization_error(network: FeederNetwork, inj: InjectionProfile, tol: float = 1e-10, matrices: ImpedanceMatrices | None = None) -> LinearizationReport:
    from .netmodel import build_impedance_matrices

    matrices = matrices or build_impedance_matrices(network)
    sol = solve_distflow(network, inj, tol)
    model = build_linear_model(network, matrices, inj)
    v_lin = linear_voltage(model, inj.q_control)
    err = np.abs(v_lin - sol.v) / sol.v
    return LinearizationReport(network.bus_ids, err, v_lin, sol.v)
