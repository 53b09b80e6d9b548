import numpy as np
import pytest

from emckt.circuit import MnaSystem, parse_netlist, run_transient
from emckt.errors import InvalidArgument
from emckt.postprocess import (
    conversion_efficiency, dft, port_admittance_and_s, rectifier_efficiency, relative_l2, s_from_y,
    write_spectrum_csv,
)


def test_dft_constant():
    x = np.full(40, 3.0)
    assert dft(x, 0.5, [0.0])[0] == pytest.approx(3.0 * 40 * 0.5)


def test_dft_tone_single_bin():
    n, dt = 256, 1e-10
    f_bin = np.arange(n) / (n * dt)
    x = np.cos(2 * np.pi * f_bin[10] * np.arange(n) * dt)
    X = np.abs(dft(x, dt, f_bin[: n // 2]))
    assert np.argmax(X) == 10
    others = np.delete(X, 10)
    assert others.max() <= 1e-10 * X[10]


def test_dft_fft_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(64)
    dt = 2e-11
    f = np.fft.fftfreq(64, dt)
    ref = dt * np.fft.fft(x)
    got = dft(x, dt, f)
    assert np.max(np.abs(got - ref)) <= 1e-12 * np.max(np.abs(ref))


def test_dft_errors():
    with pytest.raises(InvalidArgument):
        dft([], 1.0, [1.0])
    with pytest.raises(InvalidArgument):
        dft([1.0], 0.0, [1.0])


def test_matched_and_open_loads():
    V = np.array([1.0 + 1j, 2.0, -0.5j])
    Y, S, valid = port_admittance_and_s(V, V / 50.0)
    assert valid.all()
    assert np.allclose(Y, 0.02) and np.allclose(S, 0.0, atol=1e-15)
    Y, S, _ = port_admittance_and_s(V, np.zeros(3))
    assert np.allclose(Y, 0.0) and np.allclose(S, 1.0)


def test_floor_flags_points():
    V = np.array([1.0, 1e-12, 0.5])
    Y, S, valid = port_admittance_and_s(V, V * 0.02)
    assert valid.tolist() == [True, False, True]
    assert np.isnan(Y[1]) and np.isnan(S[1])
    with pytest.raises(InvalidArgument):
        port_admittance_and_s(V, V[:2])


def test_s_from_y_matrix():
    Y = np.array([[0.02, 0.0], [0.0, 0.01]])
    S = s_from_y(Y)
    assert np.allclose(S, np.diag([0.0, 1 / 3]))


def test_series_rc_admittance():
    R, C = 50.0, 1e-12
    f_max = 2e9
    dt = 1.0 / (100 * f_max)  # BDF2 phase error (w dt)^2/3 stays below 0.05% in band
    net = parse_netlist(f"V VS 1 0 gauss f0=1G fbw=1G\nR R1 1 2 {R}\nC C1 2 0 {C}\n")
    mna = MnaSystem(net, dt)
    X, _ = run_transient(mna, 4000)
    v = X[:, net.node("1")]
    i = -X[:, mna.branch["VS"]]
    f = np.linspace(0.5e9, 1.5e9, 21)
    Y, _, valid = port_admittance_and_s(dft(v, dt, f), dft(i, dt, f))
    w = 2 * np.pi * f
    ref = 1j * w * C / (1 + 1j * w * R * C)
    assert valid.all()
    assert np.max(np.abs(Y / ref - 1)) <= 5e-3


def test_efficiency_bounds():
    assert conversion_efficiency(0.0, 2.0) == 0.0
    assert conversion_efficiency(2.0, 2.0) == 100.0
    with pytest.raises(InvalidArgument):
        conversion_efficiency(1.0, 0.0)


def test_rectifier_sweep_unimodal():
    loads = [50.0, 300.0, 1e3, 5e3, 30e3]
    eta = [rectifier_efficiency(r)[0] for r in loads]
    assert all(0 < e < 100 for e in eta)
    peak = int(np.argmax(eta))
    assert 0 < peak < len(loads) - 1
    assert all(a < b for a, b in zip(eta[:peak], eta[1:peak + 1]))
    assert all(a > b for a, b in zip(eta[peak:], eta[peak + 1:]))


def test_relative_l2_and_csv(tmp_path):
    assert relative_l2([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert relative_l2([3.0, 4.0], [3.0, 4.5]) == pytest.approx(0.1)
    assert relative_l2([0.0], [0.0]) == 0.0
    assert relative_l2([0.0], [1.0]) == float("inf")
    p = tmp_path / "s.csv"
    write_spectrum_csv(p, [1e9, 2e9], [1 + 2j, -0.5j])
    assert p.read_text().splitlines() == ["f_Hz,re,im", "1000000000.0,1.0,2.0", "2000000000.0,-0.0,-0.5"]
