"""End-to-end acceptance checks, one test per criterion.

Each test carries an ``acceptance`` marker; the conftest hook prints a
PASS/FAIL line per criterion at the end of the session.
"""
import time

import numpy as np
import pytest

from conftest import random_controller, random_feeder, random_network
from voltflow.analysis import (
    check_conditions,
    fixed_point_residual,
    lambda_max_symmetric,
    objective_value,
    solve_equilibrium,
)
from voltflow.cli import run_scenario
from voltflow.control import ControllerSet, DroopCurve
from voltflow.dynamics import DynamicsSpec, LinearPhysics, control_model, simulate
from voltflow.netmodel import build_impedance_matrices, parse_network, path_to_root
from voltflow.powerflow import InjectionProfile, distflow_residuals, linearization_error, solve_distflow
from voltflow.scenario import load_scenario

REFERENCE_OFFSET = 0.08


def reference_setup(net, offset=REFERENCE_OFFSET):
    ctrl = ControllerSet.for_network(net, offset)
    model = control_model(net, ctrl)
    return ctrl, model, check_conditions(ctrl, model.X)


@pytest.mark.acceptance(1, "linearization error at peak load <= 2%, < 1 s")
def test_linearization_accuracy(sce42):
    t0 = time.perf_counter()
    rep = linearization_error(sce42, InjectionProfile.from_network(sce42))
    elapsed = time.perf_counter() - t0
    print(f"max relative error {rep.max_error:.4%}, {elapsed:.3f} s")
    assert rep.max_error <= 0.02
    assert elapsed < 1.0


@pytest.mark.acceptance(2, "D1 equals D3 with unit stepsize on 100+ random feeders, 1e-12, < 30 s")
def test_non_incremental_equals_unit_pseudo_gradient():
    rng = np.random.default_rng(20240)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(120):
        n = int(rng.integers(3, 11))
        net = random_network(rng, n, n_control=int(rng.integers(1, n + 1)))
        ctrl = random_controller(rng, net)
        physics = LinearPhysics.from_network(net, ctrl)
        q0 = rng.uniform(ctrl.q_min, ctrl.q_max)
        runs = [
            simulate(DynamicsSpec(kind, ctrl, physics, 1.0), q0, max_steps=50, conv_window=10**6)
            for kind in ("D1", "D3")
        ]
        a, b = runs[0].q, runs[1].q
        assert a.shape == b.shape == (51, len(ctrl))
        worst = max(worst, float(np.max(np.abs(a - b))))
    elapsed = time.perf_counter() - t0
    print(f"max elementwise gap {worst:.2e}, {elapsed:.2f} s")
    assert worst <= 1e-12
    assert elapsed < 30.0


@pytest.mark.acceptance(3, "F non-increasing and convergence within 500 steps at 0.9 of the stepsize bounds")
def test_descent_at_stepsize_bounds(reference_network):
    ctrl, model, report = reference_setup(reference_network)
    physics = LinearPhysics(model)
    for kind, gamma in (("D3", 0.9 * report.c3_bound), ("D2", 0.9 * report.c2_bound)):
        tr = simulate(DynamicsSpec(kind, ctrl, physics, gamma), np.zeros(len(ctrl)), max_steps=500)
        print(f"{kind} gamma={gamma:.4g}: {tr.status()} at step {tr.converged_at}")
        assert tr.objective_monotone(rtol=1e-12)
        assert tr.converged and tr.converged_at <= 500


@pytest.mark.acceptance(4, "D1, D2 and D3 reach the same equilibrium within 1e-6; fixed-point residual <= 1e-8")
@pytest.mark.parametrize("offset", [REFERENCE_OFFSET, 0.12, 0.18])
def test_equilibrium_agreement(reference_network, offset):
    ctrl, model, report = reference_setup(reference_network, offset)
    physics = LinearPhysics(model)
    eq = solve_equilibrium(model, ctrl)
    assert eq.residual <= 1e-8
    assert fixed_point_residual(eq.q_star, model, ctrl) <= 1e-8
    runs = {
        "D2": (0.9 * report.c2_bound, 5000),
        "D3": (0.9 * report.c3_bound, 5000),
    }
    if report.c1_holds:
        runs["D1"] = (1.0, 5000)
    finals = {}
    for kind, (gamma, cap) in runs.items():
        tr = simulate(DynamicsSpec(kind, ctrl, physics, gamma), np.zeros(len(ctrl)), max_steps=cap)
        assert tr.converged, f"{kind} did not converge: {tr.status()}"
        finals[kind] = tr.final.q
        assert fixed_point_residual(tr.final.q, model, ctrl) <= 1e-8
    assert "D1" in finals
    for kind, q in finals.items():
        gap = float(np.max(np.abs(q - eq.q_star)))
        print(f"offset {offset}: {kind} |q - q*| = {gap:.2e}")
        assert gap <= 1e-6


@pytest.mark.slow
@pytest.mark.acceptance(5, "c2/c3 equals max alpha; measured stepsize ratio within 2x of max alpha at every offset, < 10 min")
def test_stepsize_ratio_tracks_alpha_max(reference_network):
    for offset in np.round(np.arange(0.03, 0.1801, 0.01), 10):
        _, _, report = reference_setup(reference_network, float(offset))
        assert report.c2_bound / report.c3_bound == pytest.approx(report.alpha_max, rel=1e-12)
    sc = load_scenario("fig4-range")
    assert sc.physics == "nonlinear"
    assert sc.gamma_g.step == 1 and sc.gamma_p.step == 0.05
    t0 = time.perf_counter()
    outcome = run_scenario(sc)
    elapsed = time.perf_counter() - t0
    lines = [l for l in outcome.files["range.tsv"].splitlines() if not l.startswith("#")]
    cols = lines[0].split("\t")
    rows = [dict(zip(cols, l.split("\t"))) for l in lines[1:]]
    assert [float(r["offset"]) for r in rows] == pytest.approx(list(np.arange(0.03, 0.1801, 0.01)))
    for r in rows:
        rel = float(r["ratio_over_alpha_max"])
        print(f"offset {r['offset']}: gamma_g {r['max_gamma_g']}, gamma_p {r['max_gamma_p']}, ratio/max alpha {rel:.3f}")
        assert r["grid_capped"] == "0"
        assert 0.5 <= rel <= 2.0
    print(f"{elapsed:.1f} s")
    assert elapsed < 600


@pytest.mark.acceptance(6, "steps non-increasing up to the oscillation onset; best run within 15 steps")
@pytest.mark.parametrize("name", ["fig5-gradient-rates", "fig6-pseudo-rates"])
def test_convergence_rates(name):
    sc = load_scenario(name)
    assert sc.threshold_offset == REFERENCE_OFFSET
    outcome = run_scenario(sc)
    text = outcome.files[f"rates-{sc.kind}.tsv"]
    meta = dict(l[2:].split("\t", 1) for l in text.splitlines() if l.startswith("# "))
    lines = [l for l in text.splitlines() if not l.startswith("#")]
    cols = lines[0].split("\t")
    rows = [dict(zip(cols, l.split("\t"))) for l in lines[1:]]
    onset = float(meta["onset"])
    below = [r for r in rows if float(r["stepsize"]) < onset]
    assert len(below) >= 5 and all(r["status"] == "converged" for r in below)
    steps = [int(r["converged_at"]) for r in below]
    print(f"{sc.kind}: onset {onset}, steps below onset {steps}, best {meta['best_steps']} at {meta['best_stepsize']}")
    assert all(b <= a for a, b in zip(steps, steps[1:]))
    assert int(meta["best_steps"]) <= 15


@pytest.mark.acceptance(7, "strong monotonicity of the inverse curve on 1e5 samples, equality for same-sign pairs")
def test_inverse_strong_monotonicity():
    rng = np.random.default_rng(7)
    n = 100_000
    alpha = rng.uniform(0.5, 200, n)
    v_nom = rng.uniform(0.95, 1.05, n)
    delta = np.where(rng.random(n) < 0.1, 0.0, rng.uniform(0, 0.08, n))
    q_lo = rng.uniform(0.01, 2, n)
    q_hi = rng.uniform(0.01, 2, n)

    def sample_q():
        u = rng.uniform(0.001, 0.999, n)
        return np.where(rng.random(n) < 0.5, -u * q_lo, u * q_hi)

    qa, qb = sample_q(), sample_q()
    inv_a = np.empty(n)
    inv_b = np.empty(n)
    for i in range(n):
        c = DroopCurve(alpha[i], v_nom[i], delta[i], -q_lo[i], q_hi[i])
        inv_a[i] = c.inverse(qa[i])
        inv_b[i] = c.inverse(qb[i])
    lhs = (inv_b - inv_a) * (qa - qb)
    rhs = (qa - qb) ** 2 / alpha
    slack = lhs - rhs
    print(f"min slack {slack.min():.3e} over {n} samples")
    assert slack.min() >= -1e-12
    same = np.sign(qa) == np.sign(qb)
    scale = np.maximum(np.abs(lhs), 1e-300)
    assert np.all(np.abs(slack[same]) <= 1e-9 * scale[same] + 1e-15)
    opposite = ~same & (delta > 0)
    assert np.all(slack[opposite] > 0)
    assert same.sum() > 10_000 and opposite.sum() > 10_000


def _edge_path(net, bus):
    return {(l.from_bus, l.to_bus) for l in path_to_root(net, bus)}


@pytest.mark.acceptance(8, "oracles: path-intersection X, dense eigenvalues 1e-9, finite-difference subgradient 1e-6, DistFlow residuals 1e-10")
def test_oracle_suites():
    rng = np.random.default_rng(8)
    # X and R from shared path segments
    for _ in range(50):
        d = random_feeder(rng, int(rng.integers(1, 13)))
        net = parse_network(d)
        m = build_impedance_matrices(net)
        x = {(rec["from"], rec["to"]): rec["x_ohm"] for rec in d["lines"]}
        paths = {b: _edge_path(net, b) for b in net.bus_ids}
        oracle = np.array([[sum(x[e] for e in paths[a] & paths[b]) for b in net.bus_ids] for a in net.bus_ids])
        np.testing.assert_allclose(m.X, oracle, rtol=1e-12, atol=1e-15)
    # eigensolver
    for _ in range(100):
        n = int(rng.integers(1, 12))
        A = rng.normal(size=(n, n))
        M = (A + A.T) / 2
        assert lambda_max_symmetric(M) == pytest.approx(np.linalg.eigvalsh(M)[-1], rel=1e-9, abs=1e-9)
    # subgradient away from kinks
    for _ in range(50):
        net = random_network(rng, 7, n_control=4)
        ctrl = random_controller(rng, net)
        model = control_model(net, ctrl)
        q = rng.uniform(0.05, 0.95, len(ctrl)) * np.where(rng.random(len(ctrl)) < 0.5, ctrl.q_min, ctrl.q_max)
        g = ctrl.subgradient(q, model.X @ q + model.v_tilde)
        h = 1e-6
        for i in range(len(q)):
            e = np.zeros(len(q))
            e[i] = h
            fd = (objective_value(q + e, model, ctrl) - objective_value(q - e, model, ctrl)) / (2 * h)
            assert fd == pytest.approx(g[i], abs=1e-6)
    # branch-flow residuals
    for _ in range(50):
        n = int(rng.integers(1, 31))
        net = random_network(rng, n, n_control=max(1, n // 3))
        inj = InjectionProfile.from_network(net)
        sol = solve_distflow(net, inj)
        assert max(distflow_residuals(net, inj, sol.v, sol.P, sol.Q, sol.ell).values()) <= 1e-10
