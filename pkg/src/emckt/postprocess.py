"""Frequency-domain post-processing of port waveforms."""

from __future__ import annotations

import csv

import numpy as np

from .errors import InvalidArgument

Z0_DEFAULT = 50.0


def dft(x, dt, freqs):
    """Direct-sum DTFT ``X(f) = dt * sum_n x[n] exp(-2j pi f n dt)`` (no window)."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise InvalidArgument("cannot transform an empty series")
    if not dt > 0:
        raise InvalidArgument("sample spacing must be positive")
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    n = np.arange(x.size)
    out = np.empty(freqs.size, dtype=complex)
    # chunked to keep the phase matrix small for long series
    for lo in range(0, freqs.size, 64):
        f = freqs[lo:lo + 64]
        out[lo:lo + 64] = np.exp(-2j * np.pi * np.outer(f, n) * dt) @ x
    return dt * out


dft_postprocess = dft


def s_from_y(Y, z0=Z0_DEFAULT):
    """Scattering matrix from an admittance matrix (``(..., N, N)`` or scalar)."""
    Y = np.asarray(Y, dtype=complex)
    if Y.ndim < 2:
        return (1.0 - z0 * Y) / (1.0 + z0 * Y)
    eye = np.eye(Y.shape[-1])
    return np.linalg.solve((eye + z0 * Y).swapaxes(-1, -2), (eye - z0 * Y).swapaxes(-1, -2)).swapaxes(-1, -2)


def port_admittance_and_s(V, I, z0=Z0_DEFAULT, floor=1e-9):
    """One-port ``Y = I/V`` and ``S11``; points where ``|V|`` is below
    ``floor * max|V|`` are flagged and returned as NaN.

    Returns ``(Y, S, valid)``.
    """
    V = np.asarray(V, dtype=complex)
    I = np.asarray(I, dtype=complex)
    if V.shape != I.shape:
        raise InvalidArgument("voltage and current spectra must share a grid")
    ref = np.max(np.abs(V)) if V.size else 0.0
    valid = np.abs(V) > floor * ref if ref > 0 else np.zeros(V.shape, dtype=bool)
    Y = np.full(V.shape, np.nan + 0j)
    Y[valid] = I[valid] / V[valid]
    S = np.full(V.shape, np.nan + 0j)
    S[valid] = s_from_y(Y[valid], z0)
    return Y, S, valid


def conversion_efficiency(p_dc, p_source):
    """Rectifier efficiency in percent."""
    if p_source <= 0:
        raise InvalidArgument("source power must be positive")
    if p_dc < 0:
        raise InvalidArgument("output power must be non-negative")
    return 100.0 * p_dc / p_source


def rectifier_efficiency(r_load, amplitude=1.0, freq=900e6, c_filter=10e-12, r_source=50.0,
                         periods=40, steps_per_period=60, average_periods=10):
    """Half-wave rectifier (Shockley diode, 10 pF filter, resistive load).

    Returns ``(eta_percent, p_dc, p_in)`` averaged over the last
    ``average_periods`` periods; ``p_in`` is the mean power entering the
    rectifier after the source resistance.
    """
    from .circuit import MnaSystem, parse_netlist, run_transient

    deck = (
        f"VS 1 0 sine {freq!r} {amplitude!r}\n"
        f"RS 1 2 {r_source!r}\n"
        "D1 2 3 is=2n n=2 vt=25.6m\n"
        f"CF 3 0 {c_filter!r}\n"
        f"RL 3 0 {float(r_load)!r}\n"
    )
    nl = parse_netlist(deck)
    dt = 1.0 / (freq * steps_per_period)
    mna = MnaSystem(nl, dt)
    n = periods * steps_per_period
    X, _ = run_transient(mna, n)
    tail = slice(n + 1 - average_periods * steps_per_period, n + 1)
    v_in = X[tail, nl.node("2")]
    v_out = X[tail, nl.node("3")]
    i_src = -X[tail, mna.branch["VS"]]  # current delivered by the source
    p_in = float(np.mean(v_in * i_src))
    p_dc = float(np.mean(v_out) ** 2 / r_load)
    return conversion_efficiency(p_dc, p_in), p_dc, p_in


def write_spectrum_csv(path, freqs, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["f_Hz", "re", "im"])
        for f, v in zip(freqs, values):
            w.writerow([repr(float(f)), repr(float(np.real(v))), repr(float(np.imag(v)))])


def relative_l2(a, b):
    """``||a - b|| / ||a||`` over all samples (0 when both vanish)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    den = np.linalg.norm(a)
    num = np.linalg.norm(a - b)
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return float(num / den)
