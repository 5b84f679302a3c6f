import numpy as np
import pytest

from voltflow.control import ControllerSet, DroopCurve
from voltflow.netmodel import load_sce42, parse_network

REFERENCE_POINT = dict(load_multiplier=0.1, pv_fraction=0.85, v0=1.005)


def random_feeder(rng: np.random.Generator, n: int, n_control: int | None = None, load_scale: float = 0.05) -> dict:
    """Random radial feeder document with unit impedance base (ohm == p.u.).

    Bus 0 is the slack; bus k attaches to a uniformly chosen earlier bus.
    """
    lines = [
        {"from": int(rng.integers(0, k)), "to": k, "r_ohm": float(rng.uniform(0.005, 0.05)), "x_ohm": float(rng.uniform(0.005, 0.05))}
        for k in range(1, n + 1)
    ]
    loads = [{"bus": k, "peak_mva": float(rng.uniform(0, load_scale)), "pf": float(rng.uniform(0.8, 1.0))} for k in range(1, n + 1)]
    n_control = n if n_control is None else n_control
    chosen = sorted(rng.choice(np.arange(1, n + 1), size=n_control, replace=False).tolist())
    inverters = []
    for k in chosen:
        s = float(rng.uniform(0.05, 0.3))
        inverters.append({"bus": k, "nameplate_mw": s, "p_operating_mw": float(rng.uniform(0, 0.9)) * s})
    return {
        "schema": "voltflow-network/1",
        "base": {"v_base_kv": 1.0, "s_base_kva": 1000.0},
        "slack": {"id": 0, "v0_pu": float(rng.uniform(0.98, 1.04))},
        "lines": lines,
        "loads": loads,
        "inverters": inverters,
    }


def random_network(rng, n, n_control=None, load_scale=0.05):
    return parse_network(random_feeder(rng, n, n_control, load_scale))


def random_controller(rng, network) -> ControllerSet:
    curves = {}
    for b in network.control_buses:
        q = network.bus(b).inverter.q_limit
        curves[b] = DroopCurve(float(rng.uniform(1, 40)), 1.0, float(rng.uniform(0, 0.05)), -q, q)
    return ControllerSet(curves)


@pytest.fixture(scope="session")
def sce42():
    return load_sce42()


@pytest.fixture(scope="session")
def reference_network(sce42):
    return sce42.with_load_multiplier(REFERENCE_POINT["load_multiplier"]).with_pv_fraction(REFERENCE_POINT["pv_fraction"]).with_v0(REFERENCE_POINT["v0"])


@pytest.fixture
def example_curve():
    return DroopCurve(alpha=10.0, v_nom=1.0, delta=0.04, q_min=-0.5, q_max=0.5)


# --- acceptance reporting -------------------------------------------------

_ACCEPTANCE: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    entry = _ACCEPTANCE.setdefault(number, {"title": title, "ok": True})
    entry["ok"] &= rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        entry = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if entry['ok'] else 'FAIL'}  {entry['title']}")
