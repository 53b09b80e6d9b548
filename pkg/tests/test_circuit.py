import math
from importlib import resources

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from emckt.circuit import (
    FixedPortVoltage, MnaSystem, NewtonConfig, bdf_coefficients, diode_current, load_netlist,
    modulated_gaussian, newton_solve_step, parse_netlist, parse_value, relative_residual,
    run_transient, solve_dc,
)
from emckt.errors import CircuitTopologyError, InvalidArgument, NonlinearFailure, ParseError

DATA = resources.files("emckt") / "data"


def test_parse_value():
    assert parse_value("16.308n") == pytest.approx(16.308e-9, rel=1e-15)
    assert parse_value("1meg") == 1e6
    assert parse_value("2.5k") == 2500.0
    assert parse_value("1M") == 1e-3  # SPICE convention: m/M is milli
    assert parse_value("10pF") == pytest.approx(10e-12)
    assert parse_value("-3e2") == -300.0
    with pytest.raises(ValueError):
        parse_value("abc")


def test_minimal_netlist():
    net = parse_netlist("V1 1 0 dc 1\nR1 1 0 50\n")
    assert net.nodes == ["1"] and len(net.elements) == 2
    assert net.element("R1").value == 50.0
    assert net.element("V1").waveform(1e-9) == 1.0


def test_both_element_forms_and_comments():
    text = """* title line
    .nodes a b
    R R1 a b 1k   # trailing comment
    Rload b 0 2k
    V VS a 0 sine f=1G amp=0.5
    .end
    R9 a 0 1
    """
    net = parse_netlist(text)
    assert [e.name for e in net.elements] == ["R1", "Rload", "VS"]
    w = net.element("VS").waveform
    assert w.kind == "sine" and w.f0 == 1e9 and w.amplitude == 0.5
    assert w(0.0) == 0.0 and w(0.25e-9) == pytest.approx(0.5)


def test_chebyshev_deck():
    net = load_netlist(DATA / "chebyshev.cir")
    vals = {e.name: e.value for e in net.elements}
    assert vals["RS"] == 50.0
    assert [vals["C1"], vals["C2"], vals["C3"]] == pytest.approx([9.05e-12, 13.48e-12, 9.05e-12])
    assert [vals["L1"], vals["L2"]] == pytest.approx([16.308e-9, 16.308e-9])
    assert [p.params["port"] for p in net.ports] == [1]
    assert net.is_linear


def test_mixer_deck():
    net = load_netlist(DATA / "mixer.cir")
    d = net.element("D1").params
    assert d == pytest.approx({"is": 2e-9, "n": 2.0, "vt": 25.6e-3})
    assert net.element("VB").waveform(1.0) == 0.7
    assert net.element("VRF").waveform.f0 == 900e6 and net.element("VLO").waveform.f0 == 800e6
    assert not net.is_linear


@pytest.mark.parametrize("text,line", [
    ("V1 1 0 dc 1\nQ1 1 0 5\n", 2),
    ("V1 1 0 dc 1\nR1 1 2 5\n", 2),  # node 2 dangling
    ("V1 1 2 dc 1\nR1 1 2 5\n", None),  # no ground
    (".nodes 1\nV1 1 0 dc 1\nR1 1 3 5\nR2 3 0 1\n", 3),  # undeclared
    ("V1 1 0 dc 1\nR1 1 0 -5\n", 2),
    ("V1 1 0 dc 1\nR1 1 0 5\nR1 1 0 5\n", 3),
    ("V1 1 0 dc 1\nP1 1 0 5\n", 2),
    ("", None),
])
def test_parse_errors(text, line):
    with pytest.raises(ParseError) as info:
        parse_netlist(text)
    assert info.value.line == line
    assert info.value.exit_code == 2


def test_gauss_waveform():
    w = modulated_gaussian(1.5e9, 0.5e9)
    assert w.sigma == pytest.approx(3 / (2 * math.pi * 0.5e9))
    assert w.delay == pytest.approx(6 * w.sigma)
    assert abs(w(0.0)) < 1.6e-8
    assert w(w.delay) == 1.0
    assert w.f_max == 2e9


def test_diode_values():
    assert diode_current(0.0, 2e-9, 2.0, 25.6e-3) == (0.0, pytest.approx(2e-9 / (2 * 25.6e-3)))
    mpmath.mp.dps = 40
    ref = 2e-9 * (mpmath.e ** (mpmath.mpf("0.7") / (2 * mpmath.mpf("0.0256"))) - 1)
    i, _ = diode_current(0.7, 2e-9, 2.0, 25.6e-3)
    assert i == pytest.approx(float(ref), rel=1e-13)
    assert i == pytest.approx(1.733e-3, rel=1e-3)
    assert diode_current(-5.0, 2e-9, 2.0, 25.6e-3)[0] == pytest.approx(-2e-9, rel=1e-12)
    with pytest.raises(InvalidArgument):
        diode_current(0.1, 0.0, 2.0, 0.0256)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3.0, 5.0))
def test_diode_derivative_and_clamp_continuity(v):
    h = 1e-7
    i0, g = diode_current(v, 2e-9, 2.0, 25.6e-3)
    ip, _ = diode_current(v + h, 2e-9, 2.0, 25.6e-3)
    im, _ = diode_current(v - h, 2e-9, 2.0, 25.6e-3)
    assert (ip - im) / (2 * h) == pytest.approx(g, rel=1e-5, abs=1e-12)
    assert g > 0 and ip >= i0 >= im


def test_bdf_stencil():
    assert bdf_coefficients(2, 0.5) == pytest.approx((3.0, -4.0, 1.0))
    dt = 1e-3
    c = bdf_coefficients(2, dt)
    t = 0.3
    # exact for quadratics
    f = lambda s: 2 * s * s - s + 1  # noqa: E731
    assert sum(ci * f(t - k * dt) for k, ci in enumerate(c)) == pytest.approx(4 * t - 1, rel=1e-9)
    with pytest.raises(InvalidArgument):
        bdf_coefficients(3, dt)


def test_divider_one_step():
    net = parse_netlist("V1 1 0 dc 10\nR1 1 2 3k\nR2 2 0 1k\n")
    mna = MnaSystem(net, 1e-9)
    x, its = newton_solve_step(mna)
    assert its == 1
    assert x[net.node("2")] == pytest.approx(2.5, rel=1e-14)
    assert x[mna.branch["V1"]] == pytest.approx(-2.5e-3, rel=1e-14)


def test_rc_step_response():
    tau = 50 * 1e-12
    net = parse_netlist("V1 1 0 dc 1\nR1 1 2 50\nC1 2 0 1p\n")
    mna = MnaSystem(net, tau / 50)
    X, its = run_transient(mna, 500)
    t = np.arange(501) * mna.dt
    v = X[:, net.node("2")]
    err = np.max(np.abs(v - (1 - np.exp(-t / tau))))
    assert err <= 5e-3
    assert set(its) == {1}


def test_singular_topology():
    net = parse_netlist("V1 1 0 dc 1\nV2 1 0 dc 2\n")
    with pytest.raises(CircuitTopologyError):
        newton_solve_step(MnaSystem(net, 1e-9))


def _diode_dc_deck():
    return parse_netlist("V1 1 0 dc 5\nR1 1 2 1k\nD1 2 0 is=2n n=2 vt=25.6m\n")


def test_diode_dc_vs_bisection():
    net = _diode_dc_deck()
    mna = MnaSystem(net, 1e-9)
    x, its = solve_dc(mna, t=1e-9)
    v = x[net.node("2")]

    def f(u):
        return diode_current(u, 2e-9, 2.0, 25.6e-3)[0] - (5 - u) / 1000

    ref = brentq(f, 0.0, 5.0, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    assert abs(v - ref) <= 1e-12
    assert its <= 60


def test_newton_quadratic_convergence():
    net = _diode_dc_deck()
    mna = MnaSystem(net, 1e-9)
    x_star, _ = solve_dc(mna, t=1e-9)
    mna.begin_step(1, dc=True)
    x = x_star.copy()
    x[net.node("2")] += 0.02
    errs = []
    for _ in range(4):
        F, J, _ = mna.residual(x)
        x = x - np.linalg.solve(J, F)
        errs.append(abs(x[net.node("2")] - x_star[net.node("2")]))
    e = [v for v in errs if v > 1e-13]
    assert len(e) >= 2
    for a, b in zip(e, e[1:]):
        assert b <= 10.0 * a * a / 0.02 + 1e-15  # error squares each step


def _mixer():
    return load_netlist(DATA / "mixer.cir")


def test_mixer_step_converges():
    net = _mixer()
    mna = MnaSystem(net, 1.0 / (30 * 2e9))
    worst = 0
    for _ in range(40):
        x, its = newton_solve_step(mna, contract=FixedPortVoltage(mna))
        mna.commit(x)
        worst = max(worst, its)
    assert worst <= 10


def test_kcl_at_every_step():
    net = _mixer()
    mna = MnaSystem(net, 1.0 / (30 * 2e9))
    for _ in range(60):
        x, _ = newton_solve_step(mna, contract=FixedPortVoltage(mna))
        mna.commit(x)
        cur = mna.element_currents(x)
        big = max(abs(v) for v in cur.values())
        for k in range(len(net.nodes)):
            total = sum(cur[e.name] * ((e.n1 == k) - (e.n2 == k)) for e in net.elements)
            assert abs(total) <= 1e-10 * big


def test_linear_superposition():
    deck = "VA 1 0 sine 1G 1\nR1 1 2 50\nC1 2 0 2p\nL1 2 3 5n\nIB 3 0 {}\nR2 3 0 100\n"
    runs = {}
    for key, src in (("a", "dc 0"), ("b", "gauss 1G 1G 0.02"), ("ab", "gauss 1G 1G 0.02")):
        text = deck.format(src)
        if key == "b":
            text = text.replace("sine 1G 1", "dc 0")
        runs[key] = run_transient(MnaSystem(parse_netlist(text), 2e-11), 200)[0]
    diff = runs["ab"] - runs["a"] - runs["b"]
    assert np.max(np.abs(diff)) <= 1e-12 * np.max(np.abs(runs["ab"]))


def test_nonlinear_failure_reported():
    net = _diode_dc_deck()
    mna = MnaSystem(net, 1e-9)
    with pytest.raises(NonlinearFailure) as info:
        solve_dc(mna, config=NewtonConfig(max_iter=2), t=1e-9)
    assert info.value.iterations == 2 and info.value.residual > 0


def test_relative_residual():
    assert relative_residual(np.array([1e-3, 0.0]), np.array([1.0, 0.0])) == pytest.approx(1e-3)
    assert relative_residual(np.array([]), np.array([])) == 0.0
