"""EM port coupling and the monolithic field-circuit transient solve.

A port is a signed edge chain from terminal A to terminal B. Its voltage is
``V = c . e`` with ``c`` the +-1 chain vector, and the current ``I`` entering
the circuit's ``n+`` node side of the port element enters the field equation
as the edge load ``c I``. With these signs the field energy grows by ``V I``,
so the port is a passive element from the circuit's point of view.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .circuit import NewtonConfig, relative_residual
from .errors import ConfigurationError, NonlinearFailure, SolverFailure
from .mesh import whitney_edge_line_integral
from .solver import GmresConfig, gmres_solve

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CouplingMap:
    port_ids: tuple
    labels: tuple
    full: sp.csr_matrix  # (Np, n_edges)
    free: sp.csr_matrix  # (Np, n_free)

    @property
    def n_ports(self):
        return len(self.port_ids)

    def index(self, port_id):
        return self.port_ids.index(port_id)

    def entries(self, port_id):
        """``[(edge, coefficient), ...]`` for one port."""
        row = self.full.getrow(self.index(port_id))
        return list(zip(row.indices.tolist(), row.data.tolist()))


def build_coupling(system, ports):
    """Chain vectors for ``ports`` (``PortSpec`` list) on a ``MixedSystem``."""
    ports = sorted(ports, key=lambda p: p.port_id)
    ids = [p.port_id for p in ports]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate port id")
    pec = np.zeros(system.n_edges, dtype=bool)
    pec[system.pec] = True
    rows, cols, vals = [], [], []
    for r, p in enumerate(ports):
        if not p.edges:
            raise ConfigurationError(f"port {p.port_id} has no edges")
        for eid, s in p.edges:
            if pec[eid]:
                raise ConfigurationError(
                    f"port {p.port_id} uses edge {eid}, which lies on a PEC boundary"
                )
            rows.append(r)
            cols.append(eid)
            # tangential line integral of the edge's own basis function (= 1)
            vals.append(float(s) * whitney_edge_line_integral(system.mesh, eid, eid))
    full = sp.csr_matrix((vals, (rows, cols)), shape=(len(ports), system.n_edges))
    free = full[:, system.free].tocsr()
    labels = tuple(p.label or f"port{p.port_id}" for p in ports)
    return CouplingMap(tuple(ids), labels, full, free)


def impress_current(cmap, currents):
    """Full-length edge load ``sum_q c_q I_q``."""
    return cmap.full.T @ np.asarray(currents, dtype=float)


def read_port_voltage(cmap, e):
    """Port voltages ``c_q . e`` from a full-length edge vector."""
    return cmap.full @ np.asarray(e, dtype=float)


@dataclass
class TransientResult:
    dt: float
    port_ids: tuple
    V: np.ndarray  # (n+1, Np)
    I: np.ndarray  # (n+1, Np)
    X: np.ndarray  # (n+1, N_ckt) circuit unknowns
    newton_iters: list = field(default_factory=list)
    gmres_iters: list = field(default_factory=list)
    nodes: tuple = ()

    @property
    def n_steps(self):
        return self.V.shape[0] - 1

    @property
    def times(self):
        return np.arange(self.V.shape[0]) * self.dt

    def node_voltage(self, name):
        return self.X[:, self.nodes.index(str(name))]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "time_s", "port_id", "V", "I", "newton_iters", "gmres_iters"])
            for i in range(self.V.shape[0]):
                nit = self.newton_iters[i - 1] if i else 0
                git = self.gmres_iters[i - 1] if i else 0
                for k, q in enumerate(self.port_ids):
                    w.writerow([i, repr(i * self.dt), q, repr(float(self.V[i, k])),
                                repr(float(self.I[i, k])), nit, git])


def _check_ports(cmap, mna):
    missing = [q for q in mna.port_ids if q not in cmap.port_ids]
    if missing:
        raise ConfigurationError(f"netlist refers to EM ports {missing} that are not defined")
    return [cmap.index(q) for q in mna.port_ids]


def coupled_transient_solve(stepper, cmap, mna, n_steps, newton=NewtonConfig(), gmres=None, state=None,
                            callback=None):
    """March fields and circuit together with a block Newton method.

    Every Newton iteration solves the full linearised block system
    (field rows, circuit rows) with right-preconditioned GMRES on
    row-equilibrated rows. Linear netlists take exactly one iteration per step.
    ``callback(n)`` runs after every accepted step (used for timing).
    """
    gmres = gmres or stepper.gmres
    sel = _check_ports(cmap, mna)
    Cp = cmap.free[sel]  # (Np_ckt, n_free), netlist port order
    port_rows = np.array([mna.port_rows[q] for q in mna.port_ids], dtype=np.int64)
    n_free = len(stepper.system.free)
    N = mna.size
    A = stepper.A
    state = stepper.initial_state() if state is None else state

    # constant off-diagonal blocks
    sel_cols = sp.csr_matrix(
        (np.ones(len(port_rows)), (np.arange(len(port_rows)), port_rows)), shape=(len(port_rows), N)
    )
    B_em = (-0.5 * (Cp.T @ sel_cols)).tocsr()  # field rows, circuit columns
    B_ck = (-(sel_cols.T @ Cp)).tocsr()  # circuit rows, field columns
    A_abs_rowmax = abs(A).max(axis=1).toarray().ravel()
    Bem_rowmax = abs(B_em).max(axis=1).toarray().ravel() if B_em.nnz else np.zeros(n_free)
    em_scale = 1.0 / np.maximum(A_abs_rowmax, Bem_rowmax)
    em_dinv = 1.0 / (em_scale * A.diagonal())
    Bck_rowmax = abs(B_ck).max(axis=1).toarray().ravel()

    n_ports = len(port_rows)
    V = np.zeros((n_steps + 1, n_ports))
    I = np.zeros((n_steps + 1, n_ports))
    X = np.zeros((n_steps + 1, N))
    X[0] = mna.solution
    newton_iters, gmres_iters = [], []
    gmres_floor = 100.0 * gmres.tol

    for n in range(1, n_steps + 1):
        i_prev = mna.solution[port_rows]
        load = np.zeros(stepper.system.n_edges)
        if n_ports:
            load = 0.5 * (cmap.full[sel].T @ i_prev)
        rhs, hist_e, hist_b = stepper.assemble_rhs(state, load)
        mna.begin_step()
        e = state.e[stepper.system.free].copy()
        x = mna.solution.copy()

        def residual(e_, x_):
            F, J, scale = mna.residual(x_)
            F[port_rows] -= Cp @ e_
            scale[port_rows] += np.abs(Cp) @ np.abs(e_)
            R = A @ e_ + B_em @ x_ - rhs
            return R, F, J, scale

        R, F, J, scale = residual(e, x)
        res = relative_residual(F, scale)
        it_newton, it_gmres = 0, 0
        converged = False
        while not converged:
            if it_newton >= newton.max_iter:
                raise NonlinearFailure("coupled Newton did not converge", residual=res,
                                       iterations=it_newton, step=n)
            ck_scale = 1.0 / np.maximum(np.abs(J).max(axis=1), Bck_rowmax)
            K = sp.bmat([[A, B_em], [B_ck, sp.csr_matrix(J)]], format="csr")
            D = np.concatenate([em_scale, ck_scale])
            K = sp.diags(D) @ K
            lu = sla.lu_factor(ck_scale[:, None] * J)

            def precond(v, lu=lu):
                out = np.empty_like(v)
                out[:n_free] = em_dinv * v[:n_free]
                out[n_free:] = sla.lu_solve(lu, v[n_free:])
                return out

            b = -D * np.concatenate([R, F])
            try:
                sol = gmres_solve(K, b, gmres, precond=precond)
            except SolverFailure as exc:
                raise SolverFailure("coupled update failed", residual=exc.residual,
                                    iterations=exc.iterations, step=n) from exc
            it_newton += 1
            it_gmres += sol.iterations
            de, dx = sol.x[:n_free], sol.x[n_free:]
            if mna.is_linear:
                e, x = e + de, x + dx
                break
            lam = 1.0
            for _ in range(newton.max_halvings + 1):
                e_try, x_try = e + lam * de, x + lam * dx
                R_t, F_t, J_t, s_t = residual(e_try, x_try)
                res_t = relative_residual(F_t, s_t)
                if res_t <= max(res, newton.tol) or lam < 2.0 ** -newton.max_halvings:
                    break
                lam *= 0.5
            e, x, R, F, J, scale, res = e_try, x_try, R_t, F_t, J_t, s_t, res_t
            step_rel = np.max(np.abs(dx)) / max(np.max(np.abs(x)), 1e-300)
            converged = res <= newton.tol or (lam == 1.0 and step_rel <= max(newton.tol, gmres_floor))

        state = stepper.finish_step(state, e, hist_e, hist_b, it_gmres, 0.0)
        mna.commit(x)
        X[n] = x
        I[n] = x[port_rows]
        V[n] = Cp @ e
        newton_iters.append(it_newton)
        gmres_iters.append(it_gmres)
        if callback is not None:
            callback(n)
    return TransientResult(stepper.dt, tuple(mna.port_ids), V, I, X, newton_iters, gmres_iters,
                           tuple(mna.netlist.nodes))
