"""Port impulse extraction, archive I/O and convolution replay.

Driving port q with the unit hat current at step ``t_delta`` and recording
every port voltage gives ``G[k, q, l] = V_k(t_delta + l)``. Because the field
march is linear and time invariant and the trapezoid load is exactly linear in
the hat coefficients, any port current history then yields

    V_k(i) = sum_q sum_{j <= i} G[k, q, i - j] I_q(j)

which the replay solve uses as the port contract of the circuit.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .circuit import NewtonConfig, ReplayContract, newton_solve_step
from .coupling import TransientResult, impress_current, read_port_voltage
from .errors import ConfigurationError, CorruptArchive, HorizonExceeded, InvalidArgument

log = logging.getLogger(__name__)

MAGIC = b"EMPX"
VERSION = 1
_HEADER = struct.Struct("<4sIIIdI")


@dataclass
class ImpulseArchive:
    dt: float
    t_delta: int
    port_ids: tuple
    labels: tuple
    G: np.ndarray  # (Np, Np, Nt): G[k, q, lag]
    gmres_iters: int = 0

    @property
    def n_ports(self):
        return len(self.port_ids)

    @property
    def horizon(self):
        return self.G.shape[2]

    @property
    def g0(self):
        return self.G[:, :, 0]


def _hat_response(stepper, cmap, q_index, t_delta, n_lags):
    state = stepper.initial_state()
    unit = np.zeros(cmap.n_ports)
    unit[q_index] = 1.0
    f_unit = impress_current(cmap, unit)
    out = np.zeros((cmap.n_ports, n_lags))
    iters = 0
    zero = np.zeros_like(f_unit)
    for i in range(1, t_delta + n_lags):
        f_prev = f_unit if i - 1 == t_delta else zero
        f_now = f_unit if i == t_delta else zero
        state = stepper.step(state, 0.5 * (f_prev + f_now))
        iters += state.iterations
        if i >= t_delta:
            out[:, i - t_delta] = read_port_voltage(cmap, state.e)
    return out, iters


def extract(stepper, cmap, n_lags, t_delta=2, workers=1):
    """Build the impulse archive by one field march per port.

    Ports are independent, so ``workers > 1`` runs them concurrently; the
    result does not depend on the number of workers.
    """
    if t_delta < 2:
        raise InvalidArgument("t_delta must be at least 2")
    if n_lags < 1:
        raise InvalidArgument("the horizon must be at least one step")
    n_ports = cmap.n_ports
    G = np.zeros((n_ports, n_ports, n_lags))
    jobs = range(n_ports)
    run = lambda q: _hat_response(stepper, cmap, q, t_delta, n_lags)  # noqa: E731
    if workers > 1 and n_ports > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(q) for q in jobs]
    total = 0
    for q, (resp, iters) in enumerate(results):
        G[:, q, :] = resp
        total += iters
    log.info("extracted %d ports x %d lags (%d GMRES iterations)", n_ports, n_lags, total)
    return ImpulseArchive(stepper.dt, t_delta, tuple(cmap.port_ids), tuple(cmap.labels), G, total)


def reconstruct_port_voltage(archive, currents):
    """Direct convolution of a current history ``(n+1, Np)`` (row 0 is t = 0)."""
    currents = np.asarray(currents, dtype=float)
    if currents.ndim == 1:
        currents = currents[:, None]
    n = currents.shape[0] - 1
    if currents.shape[1] != archive.n_ports:
        raise InvalidArgument("current history has the wrong number of ports")
    if n >= archive.horizon:
        raise HorizonExceeded(f"{n} steps requested but the archive holds lags 0..{archive.horizon - 1}")
    V = np.zeros_like(currents)
    for i in range(n + 1):
        lags = archive.G[:, :, : i + 1]  # lag l pairs with I[i - l]
        V[i] = np.einsum("kql,lq->k", lags, currents[i::-1])
    return V


def replay_transient_solve(archive, mna, n_steps, newton=NewtonConfig(), callback=None):
    """March the circuit alone with the archive as the port contract."""
    if not np.isclose(archive.dt, mna.dt, rtol=1e-12, atol=0.0):
        raise ConfigurationError(f"archive dt {archive.dt!r} differs from circuit dt {mna.dt!r}")
    missing = [q for q in mna.port_ids if q not in archive.port_ids]
    if missing:
        raise ConfigurationError(f"archive has no data for EM ports {missing}")
    if n_steps >= archive.horizon:
        raise HorizonExceeded(
            f"{n_steps} steps requested but the archive holds lags 0..{archive.horizon - 1}"
        )
    sel = [archive.port_ids.index(q) for q in mna.port_ids]
    G = archive.G[np.ix_(sel, sel)]
    rows = [mna.port_rows[q] for q in mna.port_ids]
    n_ports = len(sel)
    N = mna.size
    V = np.zeros((n_steps + 1, n_ports))
    I = np.zeros((n_steps + 1, n_ports))
    X = np.zeros((n_steps + 1, N))
    X[0] = mna.solution
    I[0] = X[0][rows]
    newton_iters = []
    for i in range(1, n_steps + 1):
        hist = np.einsum("kql,lq->k", G[:, :, 1:i + 1], I[i - 1::-1]) if n_ports else np.zeros(0)
        contract = ReplayContract(mna, G[:, :, 0], hist)
        x, it = newton_solve_step(mna, None, contract, newton)
        mna.commit(x)
        X[i] = x
        I[i] = x[rows]
        V[i] = G[:, :, 0] @ I[i] + hist
        newton_iters.append(it)
        if callback is not None:
            callback(i)
    return TransientResult(mna.dt, tuple(mna.port_ids), V, I, X, newton_iters,
                           [0] * n_steps, tuple(mna.netlist.nodes))


# ------------------------------------------------------------------- I/O

def write_archive(archive, path):
    """Little-endian binary: header, port table, G (port-major, lag-minor), SHA-256."""
    G = np.ascontiguousarray(archive.G, dtype="<f8")
    parts = [_HEADER.pack(MAGIC, VERSION, archive.n_ports, archive.horizon,
                          float(archive.dt), int(archive.t_delta))]
    for q, label in zip(archive.port_ids, archive.labels):
        raw = str(label).encode("utf-8")
        parts.append(struct.pack("<iH", int(q), len(raw)) + raw)
    parts.append(G.tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())


def read_archive(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size + 32:
        raise CorruptArchive("archive is truncated")
    body, digest = data[:-32], data[-32:]
    magic, version, n_ports, n_lags, dt, t_delta = _HEADER.unpack_from(body, 0)
    if magic != MAGIC:
        raise CorruptArchive("not an impulse archive (bad magic)")
    if version != VERSION:
        raise CorruptArchive(f"unsupported archive version {version}")
    if hashlib.sha256(body).digest() != digest:
        raise CorruptArchive("checksum mismatch")
    off = _HEADER.size
    ids, labels = [], []
    for _ in range(n_ports):
        q, ln = struct.unpack_from("<iH", body, off)
        off += 6
        labels.append(body[off: off + ln].decode("utf-8"))
        off += ln
        ids.append(q)
    expected = n_ports * n_ports * n_lags * 8
    if len(body) - off != expected:
        raise CorruptArchive("archive payload has the wrong length")
    G = np.frombuffer(body, dtype="<f8", count=n_ports * n_ports * n_lags, offset=off)
    G = G.reshape(n_ports, n_ports, n_lags).astype(float)
    return ImpulseArchive(dt, t_delta, tuple(ids), tuple(labels), G)
