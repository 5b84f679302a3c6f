import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import root

from conftest import random_network
from voltflow.netmodel import Bus, FeederNetwork, Line, build_impedance_matrices, parse_network
from voltflow.powerflow import (
    InjectionProfile,
    LinearModel,
    NonConvergenceError,
    VoltageCollapseError,
    build_linear_model,
    distflow_residuals,
    linear_voltage,
    linearization_error,
    solve_distflow,
)


def single_line(r=0.01, x=0.02, p=0.1, q=0.0, v0=1.0):
    return FeederNetwork(0, (Bus(1, p_load=p, q_load=q),), (Line(0, 1, r, x),), v0)


def test_zero_injections_give_flat_model():
    net = FeederNetwork(0, (Bus(1), Bus(2)), (Line(0, 1, 0.1, 0.2), Line(1, 2, 0.1, 0.2)), v0=1.03)
    model = build_linear_model(net, build_impedance_matrices(net), InjectionProfile.from_network(net))
    np.testing.assert_array_equal(model.v_tilde, [1.03, 1.03])


def test_single_line_v_tilde():
    net = single_line(r=0.1, x=0.2, p=0.5)
    model = build_linear_model(net, build_impedance_matrices(net), InjectionProfile.from_network(net))
    assert model.v_tilde[0] == pytest.approx(1.0 - 0.05, abs=1e-15)


def test_v_tilde_includes_reactive_load_and_generation():
    net = FeederNetwork(0, (Bus(1, p_load=0.5, q_load=0.2, p_gen=0.3),), (Line(0, 1, 0.1, 0.2),))
    model = build_linear_model(net, build_impedance_matrices(net), InjectionProfile.from_network(net))
    assert model.v_tilde[0] == pytest.approx(1.0 + 0.1 * (0.3 - 0.5) - 0.2 * 0.2, abs=1e-15)


def test_feeder_linear_voltage_at_zero_control_is_v_tilde(sce42):
    model = build_linear_model(sce42, build_impedance_matrices(sce42), InjectionProfile.from_network(sce42))
    np.testing.assert_array_equal(linear_voltage(model, np.zeros(sce42.n)), model.v_tilde)


def test_scalar_linear_voltage():
    v = linear_voltage(LinearModel(np.array([[0.5]]), np.array([0.95])), [0.1])
    assert v[0] == pytest.approx(1.0, abs=1e-15)


def test_linear_voltage_dimension_mismatch():
    with pytest.raises(ValueError):
        linear_voltage(LinearModel(np.eye(2), np.ones(2)), [0.1])
    net = single_line()
    with pytest.raises(ValueError):
        build_linear_model(net, build_impedance_matrices(net), InjectionProfile(np.zeros(2), np.zeros(2), np.zeros(2)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_linear_voltage_matches_dense_multiply(seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, 8)
    model = build_linear_model(net, build_impedance_matrices(net), InjectionProfile.from_network(net))
    q = rng.normal(size=8)
    expected = [sum(model.X[i, j] * q[j] for j in range(8)) + model.v_tilde[i] for i in range(8)]
    np.testing.assert_allclose(linear_voltage(model, q), expected, rtol=0, atol=1e-14)


def test_sweep_with_zero_injections_is_flat_in_one_iteration():
    net = FeederNetwork(0, (Bus(1), Bus(2)), (Line(0, 1, 0.1, 0.2), Line(1, 2, 0.1, 0.2)), v0=1.01)
    sol = solve_distflow(net, InjectionProfile.from_network(net))
    assert sol.iterations == 1
    np.testing.assert_array_equal(sol.v, [1.01, 1.01])
    assert not sol.P.any() and not sol.Q.any() and not sol.ell.any()


def test_single_line_solution_satisfies_all_equations():
    net = single_line()
    inj = InjectionProfile.from_network(net)
    sol = solve_distflow(net, inj)
    res = distflow_residuals(net, inj, sol.v, sol.P, sol.Q, sol.ell)
    assert max(res.values()) <= 1e-10


def test_feeder_peak_load_linearization_within_two_percent(sce42):
    rep = linearization_error(sce42, InjectionProfile.from_network(sce42))
    assert rep.max_error <= 0.02
    assert rep.mean_error <= rep.max_error


def test_doubled_load_has_larger_linearization_error(sce42):
    base = linearization_error(sce42, InjectionProfile.from_network(sce42))
    heavy_net = sce42.with_load_multiplier(2.0)
    heavy = linearization_error(heavy_net, InjectionProfile.from_network(heavy_net))
    assert heavy.max_error > base.max_error


def test_zero_injection_linearization_error_vanishes():
    net = FeederNetwork(0, (Bus(1), Bus(2)), (Line(0, 1, 0.1, 0.2), Line(0, 2, 0.1, 0.2)))
    rep = linearization_error(net, InjectionProfile.from_network(net))
    assert rep.max_error == 0.0


def test_extreme_loading_collapses_voltage():
    net = single_line(r=0.5, x=0.5, p=2.0, q=2.0)
    with pytest.raises(VoltageCollapseError):
        solve_distflow(net, InjectionProfile.from_network(net))


def test_iteration_cap_raises_non_convergence():
    net = single_line(r=0.05, x=0.05, p=1.0, q=0.5)
    with pytest.raises(NonConvergenceError):
        solve_distflow(net, InjectionProfile.from_network(net), max_iter=2)


def test_solver_rejects_bad_tolerance():
    net = single_line()
    with pytest.raises(ValueError):
        solve_distflow(net, InjectionProfile.from_network(net), tol=0)


def test_solution_table_lists_buses_and_lines():
    net = single_line()
    buf = io.StringIO()
    solve_distflow(net, InjectionProfile.from_network(net)).write_table(buf)
    text = buf.getvalue()
    assert text.startswith("# voltflow-powerflow/1")
    assert "\n1\t0.9" in text and "\n0\t1\t" in text


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 30), seed=st.integers(0, 2**32 - 1))
def test_distflow_residuals_and_loss_signs(n, seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n, n_control=max(1, n // 3))
    q = np.zeros(n)
    q[[net.index[b] for b in net.control_buses]] = rng.uniform(-0.05, 0.05, len(net.control_buses))
    inj = InjectionProfile.from_network(net, q)
    sol = solve_distflow(net, inj)
    res = distflow_residuals(net, inj, sol.v, sol.P, sol.Q, sol.ell)
    assert max(res.values()) <= 1e-10
    assert np.all(sol.v > 0)
    assert np.all(net.line_r * sol.ell >= 0) and np.all(net.line_x * sol.ell >= 0)


def _root_oracle(net: FeederNetwork, inj: InjectionProfile) -> np.ndarray:
    """Solve the branch-flow equations as one generic nonlinear system."""
    n = net.n
    parent = net.parent_rows
    r, x = net.line_r, net.line_x
    children = [[k for k in range(n) if parent[k] == i] for i in range(n)]

    def F(z):
        vsq, P, Q, ell = z[:n], z[n : 2 * n], z[2 * n : 3 * n], z[3 * n :]
        out = []
        for k in range(n):
            send = net.v0**2 if parent[k] < 0 else vsq[parent[k]]
            out.append(P[k] - r[k] * ell[k] - sum(P[c] for c in children[k]) + inj.p_net[k])
            out.append(Q[k] - x[k] * ell[k] - sum(Q[c] for c in children[k]) + inj.q_net[k])
            out.append(vsq[k] - send + 2 * (r[k] * P[k] + x[k] * Q[k]) - (r[k] ** 2 + x[k] ** 2) * ell[k])
            out.append(ell[k] * send - P[k] ** 2 - Q[k] ** 2)
        return out

    z0 = np.concatenate([np.full(n, net.v0**2), np.zeros(3 * n)])
    sol = root(F, z0, method="hybr", tol=1e-13)
    # hybr may report "no progress" once it sits at machine precision, so
    # judge the answer by its residual
    assert np.max(np.abs(F(sol.x))) < 1e-13
    return np.sqrt(sol.x[:n])


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 5), seed=st.integers(0, 2**32 - 1))
def test_sweep_matches_generic_root_finder(n, seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n, load_scale=0.2)
    inj = InjectionProfile.from_network(net)
    np.testing.assert_allclose(solve_distflow(net, inj).v, _root_oracle(net, inj), rtol=0, atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 15), seed=st.integers(0, 2**32 - 1))
def test_raising_var_injection_never_lowers_linear_voltage(n, seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, n)
    model = build_linear_model(net, build_impedance_matrices(net), InjectionProfile.from_network(net))
    assert np.all(model.X >= 0)
    q = rng.normal(size=n)
    k = int(rng.integers(n))
    bumped = q.copy()
    bumped[k] += float(rng.uniform(1e-3, 1))
    assert np.all(linear_voltage(model, bumped) >= linear_voltage(model, q) - 1e-15)


def test_linear_and_exact_coincide_at_zero_injection():
    net = parse_network({
        "schema": "voltflow-network/1",
        "base": {"v_base_kv": 1.0, "s_base_kva": 1000.0},
        "slack": {"id": 0, "v0_pu": 1.02},
        "lines": [{"from": 0, "to": 1, "r_ohm": 0.1, "x_ohm": 0.1}, {"from": 1, "to": 2, "r_ohm": 0.1, "x_ohm": 0.1}],
    })
    inj = InjectionProfile.from_network(net)
    model = build_linear_model(net, build_impedance_matrices(net), inj)
    np.testing.assert_array_equal(linear_voltage(model, inj.q_control), solve_distflow(net, inj).v)
