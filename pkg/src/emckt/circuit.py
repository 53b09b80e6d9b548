"""Transient modified nodal analysis.

Unknown vector layout: non-ground node voltages (in order of first
appearance), then one branch current per voltage source, inductor and EM port
(in element order). Every branch current flows from ``n+`` through the
element to ``n-``. Node rows hold the sum of currents *leaving* the node.

Reactive elements use p-th order backward differentiation (backward
Lagrange), p = 2 by default, reduced to the available history at startup.
The circuit starts from the all-zero state at t = 0.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CircuitTopologyError, InvalidArgument, NonlinearFailure, ParseError

GROUND_NAMES = ("0", "gnd", "GND")
EXP_CLAMP = 40.0

_SUFFIXES = {
    "f": 1e-15, "p": 1e-12, "n": 1e-9, "u": 1e-6, "m": 1e-3,
    "k": 1e3, "meg": 1e6, "g": 1e9, "t": 1e12,
}
_NUM_RE = re.compile(r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)(meg|[fpnumkgt])?[a-zA-Z]*$", re.I)


def parse_value(token):
    """Parse a number with an optional SI suffix (``16.308n``, ``1meg``, ``50``)."""
    m = _NUM_RE.match(token.strip())
    if not m:
        raise ValueError(f"not a number: {token!r}")
    value = float(m.group(1))
    suffix = m.group(2)
    if suffix:
        value *= _SUFFIXES[suffix.lower()]
    return value


# ---------------------------------------------------------------- waveforms

@dataclass(frozen=True)
class Waveform:
    kind: str  # "dc" | "sine" | "gauss"
    amplitude: float = 1.0
    f0: float = 0.0
    f_bw: float = 0.0
    delay: float = 0.0
    phase: float = 0.0

    @property
    def sigma(self):
        return 3.0 / (2.0 * math.pi * self.f_bw)

    @property
    def f_max(self):
        if self.kind == "gauss":
            return self.f0 + self.f_bw
        return self.f0

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "dc":
            return np.where(t > 0, self.amplitude, 0.0) if t.ndim else (self.amplitude if t > 0 else 0.0)
        if self.kind == "sine":
            out = self.amplitude * np.sin(2 * math.pi * self.f0 * t + self.phase)
            return np.where(t > 0, out, 0.0)
        if self.kind == "gauss":
            tau = t - self.delay
            return self.amplitude * np.cos(2 * math.pi * self.f0 * tau) * np.exp(-tau**2 / (2 * self.sigma**2))
        raise InvalidArgument(f"unknown waveform kind {self.kind!r}")


def modulated_gaussian(f0, f_bw, amplitude=1.0, delay=None):
    """cos(2 pi f0 t) exp(-t^2 / 2 sigma^2), sigma = 3 / (2 pi f_bw), delayed.

    The default delay of 6 sigma keeps |v(0)| below 1.6e-8 of the peak.
    """
    if f_bw <= 0:
        raise InvalidArgument("bandwidth must be positive")
    sigma = 3.0 / (2.0 * math.pi * f_bw)
    return Waveform("gauss", amplitude, f0, f_bw, 6.0 * sigma if delay is None else delay)


def _kv(tokens):
    pos, kw = [], {}
    for tok in tokens:
        if "=" in tok:
            k, v = tok.split("=", 1)
            kw[k.lower()] = v
        else:
            pos.append(tok)
    return pos, kw


def parse_waveform(tokens):
    if not tokens:
        raise ValueError("missing source value")
    head = tokens[0].lower()
    pos, kw = _kv(tokens[1:])
    if head == "dc":
        amp = kw.get("v", pos[0] if pos else None)
        if amp is None:
            raise ValueError("dc source needs a value")
        return Waveform("dc", parse_value(amp))
    if head in ("sine", "sin"):
        names = ("f", "amp", "phase")
        vals = dict(zip(names, pos))
        vals.update({k: v for k, v in kw.items() if k in names})
        if "f" not in vals:
            raise ValueError("sine source needs a frequency")
        return Waveform("sine", parse_value(vals.get("amp", "1")), parse_value(vals["f"]),
                        phase=parse_value(vals.get("phase", "0")))
    if head in ("gauss", "mgauss"):
        names = ("f0", "fbw", "amp", "delay")
        vals = dict(zip(names, pos))
        vals.update({k: v for k, v in kw.items() if k in names})
        if "f0" not in vals or "fbw" not in vals:
            raise ValueError("gauss source needs f0 and fbw")
        delay = parse_value(vals["delay"]) if "delay" in vals else None
        return modulated_gaussian(parse_value(vals["f0"]), parse_value(vals["fbw"]),
                                  parse_value(vals.get("amp", "1")), delay)
    return Waveform("dc", parse_value(tokens[0]))


# ------------------------------------------------------------------ netlist

KINDS = ("R", "L", "C", "V", "I", "D", "P", "DD")


@dataclass
class Element:
    kind: str
    name: str
    n1: int  # node index, -1 for ground
    n2: int
    value: float = 0.0
    waveform: Waveform | None = None
    params: dict = field(default_factory=dict)
    line: int = 0


@dataclass
class Netlist:
    nodes: list
    elements: list
    base_dir: Path | None = None

    @property
    def ports(self):
        return [e for e in self.elements if e.kind == "P"]

    def element(self, name):
        for e in self.elements:
            if e.name == name:
                return e
        raise KeyError(name)

    def node(self, name):
        return self.nodes.index(str(name))

    @property
    def is_linear(self):
        return not any(e.kind in ("D", "DD") for e in self.elements)


def parse_netlist(text, base_dir=None):
    """Parse the line-oriented netlist grammar; see the README for the syntax."""
    nodes, elements = [], []
    declared = None
    seen_ground = False
    names = set()

    def node_index(tok, lineno):
        nonlocal seen_ground
        if tok in GROUND_NAMES:
            seen_ground = True
            return -1
        if declared is not None and tok not in declared:
            raise ParseError(f"node {tok!r} is not declared", lineno)
        if tok not in nodes:
            nodes.append(tok)
        return nodes.index(tok)

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith("*"):
            continue
        tokens = line.split()
        head = tokens[0]
        if head.lower() == ".end":
            break
        if head.lower() == ".nodes":
            declared = set(tokens[1:])
            continue
        if head.startswith("."):
            raise ParseError(f"unknown directive {head!r}", lineno)
        if head.upper() in KINDS and len(tokens) > 1:
            kind, name, rest = head.upper(), tokens[1], tokens[2:]
        else:
            kind = "DD" if head.upper().startswith("DD") else head[0].upper()
            name, rest = head, tokens[1:]
        if kind not in KINDS:
            raise ParseError(f"unknown element kind {head!r}", lineno)
        if name in names:
            raise ParseError(f"duplicate element name {name!r}", lineno)
        names.add(name)
        if len(rest) < 2:
            raise ParseError(f"{name}: expected two nodes", lineno)
        n1, n2 = node_index(rest[0], lineno), node_index(rest[1], lineno)
        args = rest[2:]
        el = Element(kind, name, n1, n2, line=lineno)
        try:
            if kind in ("R", "L", "C"):
                if len(args) != 1:
                    raise ValueError("expected exactly one value")
                el.value = parse_value(args[0])
                if el.value <= 0:
                    raise ValueError("value must be positive")
            elif kind in ("V", "I"):
                el.waveform = parse_waveform(args)
            elif kind == "D":
                _, kw = _kv(args)
                el.params = {
                    "is": parse_value(kw.get("is", "2n")),
                    "n": parse_value(kw.get("n", "2.0")),
                    "vt": parse_value(kw.get("vt", "25.6m")),
                }
            elif kind == "P":
                _, kw = _kv(args)
                if "port" not in kw:
                    raise ValueError("EM port needs port=<id>")
                el.params = {"port": int(kw["port"])}
            elif kind == "DD":
                _, kw = _kv(args)
                if "file" not in kw:
                    raise ValueError("drift-diffusion element needs file=<path>")
                el.params = {"file": kw["file"]}
        except ValueError as exc:
            raise ParseError(f"{name}: {exc}", lineno) from None
        elements.append(el)

    if not elements:
        raise ParseError("netlist has no elements")
    if not seen_ground:
        raise ParseError("netlist has no ground node (0)")
    degree = np.zeros(len(nodes), dtype=int)
    for el in elements:
        for n in (el.n1, el.n2):
            if n >= 0:
                degree[n] += 1
    for i, d in enumerate(degree):
        if d < 2:
            el = next(e for e in elements if i in (e.n1, e.n2))
            raise ParseError(f"node {nodes[i]!r} is dangling (one connection)", el.line)
    ports = [e.params["port"] for e in elements if e.kind == "P"]
    if len(set(ports)) != len(ports):
        raise ParseError("an EM port id is used twice")
    return Netlist(nodes, elements, Path(base_dir) if base_dir else None)


def load_netlist(path):
    path = Path(path)
    return parse_netlist(path.read_text(), base_dir=path.parent)


# ---------------------------------------------------------------- devices

def diode_current(v, i_s, n, v_t):
    """Shockley diode current and its exact derivative.

    The exponent is clamped at ``EXP_CLAMP`` and continued linearly beyond.
    """
    if i_s <= 0 or n <= 0 or v_t <= 0:
        raise InvalidArgument("diode parameters must be positive")
    nvt = n * v_t
    x = v / nvt
    if x > EXP_CLAMP:
        ec = math.exp(EXP_CLAMP)
        return i_s * (ec * (1.0 + (x - EXP_CLAMP)) - 1.0), i_s * ec / nvt
    ex = math.exp(x)
    return i_s * (ex - 1.0), i_s * ex / nvt


def bdf_coefficients(order, dt):
    """Backward-differentiation weights: dx/dt ~ sum_k c_k x_{n-k}."""
    if order == 1:
        c = (1.0, -1.0)
    elif order == 2:
        c = (1.5, -2.0, 0.5)
    else:
        raise InvalidArgument("only orders 1 and 2 are supported")
    return tuple(ci / dt for ci in c)


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-12
    max_iter: int = 60
    max_halvings: int = 4


class MnaSystem:
    """Stamps and history for one netlist at a fixed time step."""

    def __init__(self, netlist, dt, order=2, devices=None):
        if not dt > 0:
            raise InvalidArgument("time step must be positive")
        self.netlist = netlist
        self.dt = float(dt)
        self.order = int(order)
        self.n_nodes = len(netlist.nodes)
        self.branch = {}
        k = self.n_nodes
        for el in netlist.elements:
            if el.kind in ("V", "L", "P"):
                self.branch[el.name] = k
                k += 1
        self.size = k
        self.port_rows = {
            el.params["port"]: self.branch[el.name] for el in netlist.elements if el.kind == "P"
        }
        self.port_ids = sorted(self.port_rows)
        self.devices = devices or {}
        for el in netlist.elements:
            if el.kind == "DD" and el.name not in self.devices:
                from .device_dd import load_device, port_adapter

                path = Path(el.params["file"])
                if not path.is_absolute() and netlist.base_dir is not None:
                    path = netlist.base_dir / path
                self.devices[el.name] = port_adapter(load_device(path))
        self.history = [np.zeros(self.size)]
        self.step_index = 0
        self.time = 0.0
        self._prepared = None

    @property
    def is_linear(self):
        return self.netlist.is_linear

    def reset(self):
        self.history = [np.zeros(self.size)]
        self.step_index = 0
        self.time = 0.0
        for dev in self.devices.values():
            dev.reset()

    def begin_step(self, i=None, dc=False):
        """Prepare the linear stamps for step ``i`` (default: next step)."""
        i = self.step_index + 1 if i is None else i
        t = i * self.dt
        p = min(self.order, len(self.history))
        coef = bdf_coefficients(p, self.dt) if not dc else (0.0,)
        hist = self.history[::-1][:p]  # x_{n-1}, x_{n-2}, ...

        N = self.size
        G = np.zeros((N, N))
        S = np.zeros((N, N))  # |stamp| for row scaling
        rhs = np.zeros(N)
        srhs = np.zeros(N)

        def stamp(r, c, v):
            if r >= 0 and c >= 0:
                G[r, c] += v
                S[r, c] += abs(v)

        def source(r, v):
            if r >= 0:
                rhs[r] += v
                srhs[r] += abs(v)

        for el in self.netlist.elements:
            a, b = el.n1, el.n2
            if el.kind == "R":
                g = 1.0 / el.value
                stamp(a, a, g); stamp(b, b, g); stamp(a, b, -g); stamp(b, a, -g)
            elif el.kind == "C":
                if dc:
                    continue
                g = el.value * coef[0]
                stamp(a, a, g); stamp(b, b, g); stamp(a, b, -g); stamp(b, a, -g)
                ih = sum(el.value * c * _vdiff(x, a, b) for c, x in zip(coef[1:], hist))
                source(a, -ih); source(b, ih)
            elif el.kind == "L":
                k = self.branch[el.name]
                stamp(a, k, 1.0); stamp(b, k, -1.0)
                stamp(k, a, 1.0); stamp(k, b, -1.0)
                if not dc:
                    stamp(k, k, -el.value * coef[0])
                    vh = sum(el.value * c * x[k] for c, x in zip(coef[1:], hist))
                    source(k, vh)
            elif el.kind == "V":
                k = self.branch[el.name]
                stamp(a, k, 1.0); stamp(b, k, -1.0)
                stamp(k, a, 1.0); stamp(k, b, -1.0)
                source(k, float(el.waveform(t)))
            elif el.kind == "I":
                cur = float(el.waveform(t))
                source(a, -cur); source(b, cur)
            elif el.kind == "P":
                k = self.branch[el.name]
                stamp(a, k, 1.0); stamp(b, k, -1.0)
                stamp(k, a, 1.0); stamp(k, b, -1.0)
        self._prepared = (i, t, G, S, rhs, srhs, dc)
        return t

    def residual(self, x):
        """Return ``(F, J, scale)`` at iterate ``x`` for the prepared step.

        EM-port branch rows hold ``v(n+) - v(n-)``; the caller adds the port
        contract. ``scale`` is the per-row sum of |terms| (for relative tests).
        """
        if self._prepared is None:
            raise RuntimeError("begin_step() must be called first")
        i, t, G, S, rhs, srhs, dc = self._prepared
        F = G @ x - rhs
        J = G.copy()
        scale = np.abs(S) @ np.abs(x) + srhs
        for el in self.netlist.elements:
            if el.kind not in ("D", "DD"):
                continue
            a, b = el.n1, el.n2
            v = _vdiff(x, a, b)
            if el.kind == "D":
                cur, g = diode_current(v, el.params["is"], el.params["n"], el.params["vt"])
            else:
                cur, g = self.devices[el.name].evaluate(v, self.dt)
            for r, s in ((a, 1.0), (b, -1.0)):
                if r < 0:
                    continue
                F[r] += s * cur
                scale[r] += abs(cur)
                if a >= 0:
                    J[r, a] += s * g
                if b >= 0:
                    J[r, b] -= s * g
        return F, J, scale

    def commit(self, x):
        """Accept ``x`` as the solution of the prepared step."""
        i, t, *_ = self._prepared
        for el in self.netlist.elements:
            if el.kind == "DD":
                self.devices[el.name].commit(_vdiff(x, el.n1, el.n2), self.dt)
        self.history.append(np.array(x, dtype=float))
        if len(self.history) > self.order + 1:
            self.history.pop(0)
        self.step_index = i
        self.time = t
        self._prepared = None

    @property
    def solution(self):
        return self.history[-1]

    def element_currents(self, x, x_hist=None):
        """Branch current of every element (n+ -> n-) at the committed step."""
        i, *_ = (self.step_index,)
        hist = list(self.history[:-1][::-1]) if x_hist is None else x_hist
        p = min(self.order, len(hist))
        coef = bdf_coefficients(p, self.dt) if p else (0.0,)
        xs = [x] + hist[:p]
        out = {}
        for el in self.netlist.elements:
            a, b = el.n1, el.n2
            v = _vdiff(x, a, b)
            if el.kind == "R":
                out[el.name] = v / el.value
            elif el.kind == "C":
                out[el.name] = el.value * sum(c * _vdiff(xx, a, b) for c, xx in zip(coef, xs))
            elif el.kind in ("L", "V", "P"):
                out[el.name] = x[self.branch[el.name]]
            elif el.kind == "I":
                out[el.name] = float(el.waveform(self.step_index * self.dt))
            elif el.kind == "D":
                out[el.name] = diode_current(v, el.params["is"], el.params["n"], el.params["vt"])[0]
            elif el.kind == "DD":
                out[el.name] = self.devices[el.name].last_current
        return out

    def node_voltage(self, x, name):
        idx = self.netlist.node(name)
        return x[idx]


def _vdiff(x, a, b):
    return (x[a] if a >= 0 else 0.0) - (x[b] if b >= 0 else 0.0)


# ------------------------------------------------------------ port contracts

class ReplayContract:
    """Port rows: v(n+) - v(n-) - G0 I = history (convolution replay)."""

    def __init__(self, mna, g0, hist):
        self.rows = [mna.port_rows[q] for q in mna.port_ids]
        self.g0 = np.asarray(g0, dtype=float)
        self.hist = np.asarray(hist, dtype=float)

    def apply(self, x, F, J, scale):
        rows = self.rows
        cur = x[rows]
        F[rows] -= self.g0 @ cur + self.hist
        scale[rows] += np.abs(self.g0) @ np.abs(cur) + np.abs(self.hist)
        J[np.ix_(rows, rows)] -= self.g0


class FixedPortVoltage:
    """Port rows pinned to given voltages (used for stand-alone circuit tests)."""

    def __init__(self, mna, voltages=None):
        self.rows = [mna.port_rows[q] for q in mna.port_ids]
        self.v = np.zeros(len(self.rows)) if voltages is None else np.asarray(voltages, float)

    def apply(self, x, F, J, scale):
        F[self.rows] -= self.v
        scale[self.rows] += np.abs(self.v)


def assemble_step(mna, t_index=None, contract=None, x=None):
    """Linearised system ``J dx = -F`` for the next step about iterate ``x``."""
    if mna._prepared is None or (t_index is not None and mna._prepared[0] != t_index):
        mna.begin_step(t_index)
    x = mna.solution.copy() if x is None else x
    F, J, scale = mna.residual(x)
    if contract is not None:
        contract.apply(x, F, J, scale)
    return F, J, scale


def relative_residual(F, scale):
    if not len(F):
        return 0.0
    floor = max(float(np.max(scale)) * 1e-30, 1e-300)
    return float(np.max(np.abs(F) / np.maximum(scale, floor)))


def _solve_dense(J, rhs):
    try:
        dx = np.linalg.solve(J, rhs)
    except np.linalg.LinAlgError:
        raise CircuitTopologyError("singular MNA matrix (floating node or source loop?)") from None
    if not np.all(np.isfinite(dx)):
        raise CircuitTopologyError("singular MNA matrix (non-finite update)")
    return dx


def newton_solve_step(mna, t_index=None, contract=None, config=NewtonConfig(), dc=False, x0=None):
    """Solve the next step; returns ``(x, iterations)`` without committing.

    Linear netlists take exactly one solve. Nonlinear ones iterate with
    update halving (up to ``max_halvings``) while the residual grows, and stop
    once the componentwise relative residual or the relative update falls
    below ``config.tol``.
    """
    mna.begin_step(t_index, dc=dc)
    x = mna.solution.copy() if x0 is None else np.array(x0, dtype=float)

    def evaluate(xx):
        F, J, scale = mna.residual(xx)
        if contract is not None:
            contract.apply(xx, F, J, scale)
        return F, J, scale

    F, J, scale = evaluate(x)
    if mna.is_linear:
        return x + _solve_dense(J, -F), 1

    res = relative_residual(F, scale)
    for it in range(1, config.max_iter + 1):
        if res <= config.tol:
            return x, it - 1
        dx = _solve_dense(J, -F)
        lam = 1.0
        for _ in range(config.max_halvings + 1):
            x_try = x + lam * dx
            F_try, J_try, s_try = evaluate(x_try)
            res_try = relative_residual(F_try, s_try)
            if res_try <= max(res, config.tol) or lam < 2.0 ** -config.max_halvings:
                break
            lam *= 0.5
        x, F, J, scale, res = x_try, F_try, J_try, s_try, res_try
        if lam == 1.0 and np.max(np.abs(dx)) <= config.tol * max(np.max(np.abs(x)), 1e-300):
            return x, it
    raise NonlinearFailure("Newton did not converge", residual=res, iterations=config.max_iter,
                           step=mna._prepared[0] if mna._prepared else None)


def run_transient(mna, n_steps, contract_factory=None, config=NewtonConfig()):
    """March a stand-alone circuit; returns solution array ``(n_steps+1, N)``
    and per-step Newton iteration counts."""
    out = [mna.solution.copy()]
    iters = []
    for _ in range(n_steps):
        contract = contract_factory(mna) if contract_factory else None
        x, it = newton_solve_step(mna, None, contract, config)
        mna.commit(x)
        out.append(x)
        iters.append(it)
    return np.array(out), iters


def solve_dc(mna, contract=None, config=NewtonConfig(max_iter=200, max_halvings=4), t=None):
    """DC operating point: capacitors open, inductors shorted, sources at ``t``."""
    idx = None if t is None else int(round(t / mna.dt))
    x, it = newton_solve_step(mna, idx, contract, config, dc=True, x0=np.zeros(mna.size))
    mna._prepared = None
    return x, it
