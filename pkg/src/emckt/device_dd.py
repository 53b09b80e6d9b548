"""One-dimensional drift-diffusion diode (Poisson + electron/hole continuity).

Box-method discretisation on a 1D grid with Scharfetter-Gummel fluxes and
backward Euler in time. ``psi`` is the electrostatic potential referenced to
the intrinsic level, so at equilibrium ``n = ni exp(psi/VT)`` and
``p = ni exp(-psi/VT)``. Field is ``E = -dpsi/dx``.

Contacts: x = 0 is a Schottky contact (fixed surface densities set by the
barrier height) carrying the applied voltage; x = L is ohmic and grounded.
The terminal current is the total (conduction + displacement) current in +x
through the first cell face, i.e. the current entering the anode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, InvalidArgument, NonlinearFailure
from .pml import EPS0

Q = 1.602176634e-19
_MAX_STEP = 5.0  # per Newton update, in VT units / log-density units


def bernoulli(x):
    """B(x) = x / (exp(x) - 1), with the series near zero."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 1e-3
    xs = x[small]
    out[small] = 1.0 - xs / 2.0 + xs**2 / 12.0 - xs**4 / 720.0
    xl = x[~small]
    out[~small] = xl / np.expm1(xl)
    return out


def bernoulli_prime(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 1e-3
    xs = x[small]
    out[small] = -0.5 + xs / 6.0 - xs**3 / 180.0
    xl = x[~small]
    em = np.expm1(xl)
    # d/dx [x/(e^x - 1)] = (e^x - 1 - x e^x) / (e^x - 1)^2
    out[~small] = (em - xl * (em + 1.0)) / em**2
    return out


@dataclass(frozen=True)
class DDDevice:
    x: np.ndarray  # node positions (m), strictly increasing
    doping: np.ndarray  # donors - acceptors per node (m^-3)
    area: float = 1e-9
    eps_r: float = 11.7
    ni: float = 1.5e16
    mu_n: float = 0.14
    mu_p: float = 0.045
    vsat_n: float = 1e5
    vsat_p: float = 1e5
    tau_n: float = 1e-7
    tau_p: float = 1e-7
    vt: float = 0.025852
    nc: float = 2.8e25
    phi_b: float = 0.6
    left_contact: str = "schottky"

    def __post_init__(self):
        if len(self.x) < 3 or np.any(np.diff(self.x) <= 0):
            raise InvalidArgument("device grid must be strictly increasing with >= 3 nodes")
        if len(self.doping) != len(self.x):
            raise InvalidArgument("doping must be given per node")
        for name in ("area", "eps_r", "ni", "mu_n", "mu_p", "vsat_n", "vsat_p", "tau_n", "tau_p", "vt", "nc"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"device parameter {name} must be positive")
        if self.left_contact not in ("schottky", "ohmic"):
            raise InvalidArgument(f"unknown contact type {self.left_contact!r}")

    @property
    def length(self):
        return float(self.x[-1] - self.x[0])

    @property
    def eps(self):
        return self.eps_r * EPS0

    @property
    def h(self):
        return np.diff(self.x)

    @property
    def volumes(self):
        h = self.h
        v = np.zeros(len(self.x))
        v[:-1] += 0.5 * h
        v[1:] += 0.5 * h
        return v

    def mobility(self, e_field):
        """Field-dependent mobilities ``mu0 / (1 + mu0 |E| / vsat)`` and d/dE."""
        out = []
        for mu0, vs in ((self.mu_n, self.vsat_n), (self.mu_p, self.vsat_p)):
            den = 1.0 + mu0 * abs(e_field) / vs
            out.append((mu0 / den, -mu0 * mu0 / vs * math.copysign(1.0, e_field) / den**2 if e_field else 0.0))
        return out

    def ohmic_densities(self, N):
        half = 0.5 * N
        root = math.sqrt(half * half + self.ni**2)
        n = half + root if N >= 0 else self.ni**2 / (root - half)
        return n, self.ni**2 / n

    def contact_values(self):
        """Equilibrium (psi, n, p) at the two contacts."""
        out = []
        for side, N in ((0, self.doping[0]), (1, self.doping[-1])):
            if side == 0 and self.left_contact == "schottky":
                n = self.nc * math.exp(-self.phi_b / self.vt)
                p = self.ni**2 / n
            else:
                n, p = self.ohmic_densities(N)
            out.append((self.vt * math.log(n / self.ni), n, p))
        return out


@dataclass
class DDState:
    psi: np.ndarray
    n: np.ndarray
    p: np.ndarray
    current: float = 0.0
    time: float = 0.0
    voltage: float = 0.0
    iterations: int = 0

    def copy(self):
        return replace(self, psi=self.psi.copy(), n=self.n.copy(), p=self.p.copy())


def uniform_device(length=1e-6, cells=200, nd=1e23, **kw):
    x = np.linspace(0.0, length, cells + 1)
    return DDDevice(x=x, doping=np.full(cells + 1, float(nd)), **kw)


_FLOAT_KEYS = ("area", "eps_r", "ni", "mu_n", "mu_p", "vsat_n", "vsat_p", "tau_n", "tau_p",
               "vt", "nc", "phi_b")


def load_device(path):
    """Read a ``key = value`` device description.

    Recognised keys: ``length``, ``cells``, ``nd`` (uniform doping) or
    ``doping`` (``x0:x1:value`` segments, comma separated), ``left_contact``
    and any of the float fields of :class:`DDDevice`.
    """
    from .circuit import parse_value

    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read device file {path}: {exc}") from None
    kv = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        kv[k.lower()] = v
    try:
        length = parse_value(kv.pop("length", "1u"))
        cells = int(kv.pop("cells", "200"))
        x = np.linspace(0.0, length, cells + 1)
        doping = np.full(cells + 1, parse_value(kv.pop("nd", "0")))
        if "doping" in kv:
            doping[:] = 0.0
            for seg in kv.pop("doping").split(","):
                x0, x1, val = (parse_value(s) for s in seg.strip().split(":"))
                doping[(x >= x0 - 1e-15) & (x <= x1 + 1e-15)] = val
        params = {k: parse_value(kv.pop(k)) for k in _FLOAT_KEYS if k in kv}
        left = kv.pop("left_contact", "schottky").lower()
    except ValueError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    if kv:
        raise ConfigurationError(f"{path}: unknown keys {sorted(kv)}")
    return DDDevice(x=x, doping=doping, left_contact=left, **params)


# ------------------------------------------------------------ equilibrium

def solve_equilibrium(device, tol=1e-13, max_iter=200):
    """Nonlinear Poisson with Boltzmann carriers; returns the zero-bias state."""
    d = device
    vt, ni = d.vt, d.ni
    (psi0, n0, p0), (psiL, nL, pL) = d.contact_values()
    psi = vt * np.arcsinh(d.doping / (2.0 * ni))
    psi[0], psi[-1] = psi0, psiL
    h = d.h
    vol = d.volumes
    m = len(psi)
    history = []
    for it in range(max_iter):
        u = psi / vt
        n = ni * np.exp(u)
        p = ni * np.exp(-u)
        F = np.zeros(m)
        flux = d.eps * np.diff(psi) / h
        F[1:-1] = flux[1:] - flux[:-1] + Q * vol[1:-1] * (p[1:-1] - n[1:-1] + d.doping[1:-1])
        diag = -d.eps / h[1:] - d.eps / h[:-1] - Q * vol[1:-1] * (p[1:-1] + n[1:-1]) / vt
        J = sp.diags([d.eps / h[1:-1], diag, d.eps / h[1:-1]], [-1, 0, 1], format="csc")
        dpsi = spla.spsolve(J, -F[1:-1])
        # logarithmic damping keeps the exponentials in range
        dpsi = np.sign(dpsi) * vt * np.log1p(np.abs(dpsi) / vt)
        psi[1:-1] += dpsi
        step = float(np.max(np.abs(dpsi))) / vt
        history.append(step)
        if step <= tol:
            u = psi / vt
            return DDState(psi, ni * np.exp(u), ni * np.exp(-u))
    raise NonlinearFailure(f"equilibrium Poisson did not converge (updates {history[-5:]})",
                           residual=history[-1], iterations=max_iter)


# -------------------------------------------------------------- transient

@dataclass
class _Faces:
    fn: np.ndarray  # electron particle flux Jn/q (+x)
    fp: np.ndarray  # hole flux Jp/q (+x)
    # derivatives w.r.t. (psi_i, psi_{i+1}, c_i, c_{i+1}) for each face
    dn: tuple
    dp: tuple


def _face_fluxes(d, psi, n, p, mu_n, mu_p):
    h = d.h
    delta = np.diff(psi) / d.vt
    bp, bm = bernoulli(delta), bernoulli(-delta)
    dbp, dbm = bernoulli_prime(delta), -bernoulli_prime(-delta)  # d/d(delta)
    cn = mu_n * d.vt / h
    cp = mu_p * d.vt / h
    fn = cn * (n[1:] * bp - n[:-1] * bm)
    fp = cp * (p[:-1] * bp - p[1:] * bm)
    dfn_dd = cn * (n[1:] * dbp - n[:-1] * dbm)
    dfp_dd = cp * (p[:-1] * dbp - p[1:] * dbm)
    dn = (-dfn_dd / d.vt, dfn_dd / d.vt, -cn * bm, cn * bp)
    dp = (-dfp_dd / d.vt, dfp_dd / d.vt, cp * bp, -cp * bm)
    return _Faces(fn, fp, dn, dp)


def _residual(d, u_psi, u_n, u_p, old, dt, mu_n, mu_p):
    """Full-node residual and Jacobian (all 3*(M+1) columns, interior rows).

    Row/column layout is node-interleaved: (psi, n, p) per node.
    """
    m = len(d.x)
    h = d.h
    vol = d.volumes
    faces = _face_fluxes(d, u_psi, u_n, u_p, mu_n, mu_p)
    ni2 = d.ni**2
    den = d.tau_p * (u_n + d.ni) + d.tau_n * (u_p + d.ni)
    R = (u_n * u_p - ni2) / den
    dR_dn = (u_p - R * d.tau_p) / den
    dR_dp = (u_n - R * d.tau_n) / den

    F = np.zeros(3 * m)
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    # these arrays hold per-mobility flux sums, needed for d/dV of the mobility
    Fn_mu = np.zeros(3 * m)
    Fp_mu = np.zeros(3 * m)
    I = np.arange(1, m - 1)
    ip, ni_, pp = 3 * I, 3 * I + 1, 3 * I + 2
    eps_flux = d.eps * np.diff(u_psi) / h
    F[ip] = eps_flux[I] - eps_flux[I - 1] + Q * vol[I] * (u_p[I] - u_n[I] + d.doping[I])
    add(ip, 3 * (I - 1), d.eps / h[I - 1])
    add(ip, 3 * (I + 1), d.eps / h[I])
    add(ip, 3 * I, -d.eps / h[I] - d.eps / h[I - 1])
    add(ip, 3 * I + 1, -Q * vol[I])
    add(ip, 3 * I + 2, Q * vol[I])

    # electrons: vol dn/dt - (fn_{i+1/2} - fn_{i-1/2}) + vol R = 0
    F[ni_] = vol[I] * ((u_n[I] - old.n[I]) / dt + R[I]) - (faces.fn[I] - faces.fn[I - 1])
    Fn_mu[ni_] = -(faces.fn[I] - faces.fn[I - 1]) / mu_n
    add(ni_, 3 * I + 1, vol[I] * (1.0 / dt + dR_dn[I]))
    add(ni_, 3 * I + 2, vol[I] * dR_dp[I])
    # holes: vol dp/dt + (fp_{i+1/2} - fp_{i-1/2}) + vol R = 0
    F[pp] = vol[I] * ((u_p[I] - old.p[I]) / dt + R[I]) + (faces.fp[I] - faces.fp[I - 1])
    Fp_mu[pp] = (faces.fp[I] - faces.fp[I - 1]) / mu_p
    add(pp, 3 * I + 2, vol[I] * (1.0 / dt + dR_dp[I]))
    add(pp, 3 * I + 1, vol[I] * dR_dn[I])

    # face contributions: face k joins nodes k, k+1
    for sgn, face_idx in ((-1.0, I), (1.0, I - 1)):
        # sgn = -1 for the right face (i+1/2) of node i, +1 for the left face
        a, b = face_idx, face_idx + 1
        dn = tuple(arr[face_idx] for arr in faces.dn)
        dp = tuple(arr[face_idx] for arr in faces.dp)
        add(ni_, 3 * a, sgn * dn[0]); add(ni_, 3 * b, sgn * dn[1])
        add(ni_, 3 * a + 1, sgn * dn[2]); add(ni_, 3 * b + 1, sgn * dn[3])
        add(pp, 3 * a, -sgn * dp[0]); add(pp, 3 * b, -sgn * dp[1])
        add(pp, 3 * a + 2, -sgn * dp[2]); add(pp, 3 * b + 2, -sgn * dp[3])

    J = sp.csr_matrix(
        (np.concatenate([np.broadcast_to(v, np.shape(r)) for r, v in zip(rows, vals)]),
         (np.concatenate(rows), np.concatenate(cols))),
        shape=(3 * m, 3 * m),
    )
    return F, J, faces, Fn_mu, Fp_mu


def _terminal_current(d, psi, faces, old, dt, face=0):
    """Total current in +x through ``face`` (conduction + displacement), amperes."""
    h = d.h[face]
    disp = -d.eps * ((psi[face + 1] - psi[face]) - (old.psi[face + 1] - old.psi[face])) / (h * dt)
    return d.area * (Q * (faces.fn[face] + faces.fp[face]) + disp)


def _boundary(d, state, voltage):
    (psi0, n0, p0), (psiL, nL, pL) = d.contact_values()
    state.psi[0], state.n[0], state.p[0] = psi0 + voltage, n0, p0
    state.psi[-1], state.n[-1], state.p[-1] = psiL, nL, pL


def _solve_step(d, old, dt, voltage, guess=None, tol=1e-11, max_iter=80):
    """Newton on the coupled (psi, n, p) system; returns (state, dI/dV)."""
    if not dt > 0:
        raise InvalidArgument("device time step must be positive")
    m = len(d.x)
    st = (guess or old).copy()
    _boundary(d, st, voltage)
    e_port = voltage / d.length
    (mu_n, dmun), (mu_p, dmup) = d.mobility(e_port)
    interior = np.arange(3, 3 * (m - 1))
    vt = d.vt
    for it in range(1, max_iter + 1):
        F, J, faces, _, _ = _residual(d, st.psi, st.n, st.p, old, dt, mu_n, mu_p)
        Ji = J[interior][:, interior]
        # scale columns by the variable magnitude and rows by their largest entry
        colscale = np.empty(len(interior))
        colscale[0::3] = vt
        colscale[1::3] = st.n[1:-1]
        colscale[2::3] = st.p[1:-1]
        Js = Ji @ sp.diags(colscale)
        rs = 1.0 / np.maximum(abs(Js).max(axis=1).toarray().ravel(), 1e-300)
        Js = sp.diags(rs) @ Js
        dz = spla.spsolve(Js.tocsc(), -rs * F[interior])
        if not np.all(np.isfinite(dz)):
            raise NonlinearFailure("singular device Jacobian", iterations=it)
        step = float(np.max(np.abs(dz)))
        if it == 1 and step <= tol:
            # guess already converged; a roundoff-sized update would only add noise
            break
        # carrier updates act on log-densities (positivity for free); each
        # component is clamped on its own so one stiff entry cannot stall the rest
        clipped = np.clip(dz, -_MAX_STEP, _MAX_STEP)
        st.psi[1:-1] += vt * clipped[0::3]
        st.n[1:-1] *= np.exp(clipped[1::3])
        st.p[1:-1] *= np.exp(clipped[2::3])
        if step <= tol:
            break
    else:
        raise NonlinearFailure("drift-diffusion Newton did not converge",
                               residual=float(np.max(np.abs(dz))), iterations=max_iter)

    F, J, faces, Fn_mu, Fp_mu = _residual(d, st.psi, st.n, st.p, old, dt, mu_n, mu_p)
    st.current = _terminal_current(d, st.psi, faces, old, dt)
    st.time = old.time + dt
    st.voltage = voltage
    st.iterations = it

    # implicit derivative: J_ii du/dV = -(dF/dpsi0 + dF/dmu dmu/dV)
    dFdV = np.asarray(J[:, 0].todense()).ravel() + (Fn_mu * dmun + Fp_mu * dmup) / d.length
    du = spla.spsolve(J[interior][:, interior].tocsc(), -dFdV[interior])
    full = np.zeros(3 * m)
    full[interior] = du
    full[0] = 1.0  # psi0 moves one-for-one with the applied voltage
    dpsi = full[0::3]
    dn = full[1::3]
    dp = full[2::3]
    dfn = faces.dn[0][0] * dpsi[0] + faces.dn[1][0] * dpsi[1] + faces.dn[2][0] * dn[0] + faces.dn[3][0] * dn[1]
    dfp = faces.dp[0][0] * dpsi[0] + faces.dp[1][0] * dpsi[1] + faces.dp[2][0] * dp[0] + faces.dp[3][0] * dp[1]
    dfn += faces.fn[0] / mu_n * dmun / d.length
    dfp += faces.fp[0] / mu_p * dmup / d.length
    ddisp = -d.eps * (dpsi[1] - dpsi[0]) / (d.h[0] * dt)
    dIdV = d.area * (Q * (dfn + dfp) + ddisp)
    return st, float(dIdV)


def transient_step(device, state, dt, e_port, guess=None):
    """Backward-Euler step with the lumped port field ``e_port`` (V/m).

    The applied voltage is ``e_port * length``; the field also sets the
    mobility argument (the device is treated as lumped at the port).
    """
    st, _ = _solve_step(device, state, dt, e_port * device.length, guess)
    return st


def contact_currents(device, old, new, dt):
    """Conduction currents (+x) at both contact faces and the charge rate.

    Discrete conservation: ``I_left - I_right == dQ/dt`` with
    ``Q = q A sum_i vol_i (p - n + N)`` over interior nodes.
    """
    d = device
    e_port = new.voltage / d.length
    (mu_n, _), (mu_p, _) = d.mobility(e_port)
    faces = _face_fluxes(d, new.psi, new.n, new.p, mu_n, mu_p)
    i_left = d.area * Q * (faces.fn[0] + faces.fp[0])
    i_right = d.area * Q * (faces.fn[-1] + faces.fp[-1])
    vol = d.volumes[1:-1]
    dq = d.area * Q * np.sum(vol * ((new.p - new.n)[1:-1] - (old.p - old.n)[1:-1])) / dt
    total_left = _terminal_current(d, new.psi, faces, old, dt, 0)
    total_right = _terminal_current(d, new.psi, faces, old, dt, len(d.h) - 1)
    return {"left": i_left, "right": i_right, "charge_rate": dq,
            "total_left": total_left, "total_right": total_right}


class DDPortAdapter:
    """Two-terminal contract used by the circuit: ``evaluate(v, dt) -> (I, dI/dV)``.

    ``evaluate`` may be called many times per step (Newton); ``commit``
    accepts the converged voltage and advances the device state.
    """

    def __init__(self, device):
        self.device = device
        self.equilibrium = solve_equilibrium(device)
        self.state = self.equilibrium.copy()
        self._trial = None
        self.last_current = 0.0
        self.total_iterations = 0

    def reset(self):
        self.state = self.equilibrium.copy()
        self._trial = None
        self.last_current = 0.0

    def evaluate(self, v, dt):
        if self._trial is not None and self._trial[0] == (v, dt):
            _, st, g = self._trial
            return st.current, g
        guess = self._trial[1] if self._trial is not None else None
        st, g = _solve_step(self.device, self.state, dt, float(v), guess)
        self.total_iterations += st.iterations
        self._trial = ((v, dt), st, g)
        return st.current, g

    def commit(self, v, dt):
        self.evaluate(v, dt)
        self.state = self._trial[1]
        self.last_current = self.state.current
        self._trial = None


def port_adapter(device):
    return DDPortAdapter(device)
