"""Mixed E-B finite elements on Whitney edge/face spaces and implicit marching.

Semi-discrete system (``f`` is the impressed port load, positive when a port
current delivers power to the field)::

    db/dt = -C e
    M_e de/dt = C^T M_f b + f

Time stepping is the trapezoidal (average-acceleration) one-step map, i.e.
Newmark with gamma = 1/2, beta = 1/4 on the equivalent second-order form.
Eliminating ``b^{n+1}`` leaves one SPD solve per step::

    (M_e/dt + dt/4 K) e^{n+1} = (M_e/dt - dt/4 K) e^n + C^T M_f b^n + f_avg,

with ``K = C^T M_f C``. PML regions add kernel terms to both mass operators
(see :mod:`emckt.pml`); with zero conductivity they vanish identically.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import pml as pmlmod
from .errors import AssemblyError, InvalidArgument, SolverFailure
from .mesh import LOCAL_EDGES, LOCAL_FACES
from .pml import EPS0, MU0
from .solver import GmresConfig, gmres_solve

log = logging.getLogger(__name__)

NEWMARK_GAMMA = 0.5
NEWMARK_BETA = 0.25


@dataclass(frozen=True)
class Materials:
    eps_r: tuple = (1.0,)
    mu_r: tuple = (1.0,)

    def per_tet(self, material_ids):
        eps_r = np.asarray(self.eps_r, dtype=float)
        mu_r = np.asarray(self.mu_r, dtype=float)
        if material_ids.size and material_ids.max() >= min(len(eps_r), len(mu_r)):
            raise InvalidArgument("material id without eps_r/mu_r entry")
        if np.any(eps_r <= 0) or np.any(mu_r <= 0):
            raise InvalidArgument("eps_r and mu_r must be positive")
        return EPS0 * eps_r[material_ids], 1.0 / (MU0 * mu_r[material_ids])


VACUUM = Materials()


def _delta_table(pairs_a, pairs_b):
    return 1.0 + (pairs_a[:, None] == pairs_b[None, :])


def local_whitney_matrices(mesh):
    """Per-tet, per-Cartesian-direction Whitney mass integrals (no material).

    Returns ``(edge, face)`` of shapes ``(T, 3, 6, 6)`` and ``(T, 3, 4, 4)``;
    summing over the direction axis gives the usual mass matrices.
    """
    vol, g = mesh.geometry()
    a, b = LOCAL_EDGES[:, 0], LOCAL_EDGES[:, 1]
    ga, gb = g[:, a, :], g[:, b, :]
    k1, k2 = _delta_table(a, a), _delta_table(a, b)
    k3, k4 = _delta_table(b, a), _delta_table(b, b)
    edge = (
        k1[None, None] * np.einsum("tid,tjd->tdij", gb, gb)
        - k2[None, None] * np.einsum("tid,tjd->tdij", gb, ga)
        - k3[None, None] * np.einsum("tid,tjd->tdij", ga, gb)
        + k4[None, None] * np.einsum("tid,tjd->tdij", ga, ga)
    )
    edge *= (vol / 20.0)[:, None, None, None]

    y = np.zeros((mesh.n_tets, 4, 4, 3))
    for f, (i, j, k) in enumerate(LOCAL_FACES):
        y[:, f, i] = 2.0 * np.cross(g[:, j], g[:, k])
        y[:, f, j] = 2.0 * np.cross(g[:, k], g[:, i])
        y[:, f, k] = 2.0 * np.cross(g[:, i], g[:, j])
    p = (1.0 + np.eye(4)) / 20.0
    face = np.einsum("tfvd,vw,tgwd->tdfg", y, p, y) * vol[:, None, None, None]
    return edge, face


def _scatter(local, dofs, weights, n):
    """Assemble ``sum_t weights[t] * local[t]`` into an ``n x n`` CSR matrix."""
    nl = dofs.shape[1]
    rows = np.repeat(dofs, nl, axis=1).ravel()
    cols = np.tile(dofs, (1, nl)).ravel()
    vals = (local * weights[:, None, None]).ravel()
    m = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


def _symmetrize(m):
    return ((m + m.T) * 0.5).tocsr()


@dataclass(eq=False)
class MixedSystem:
    mesh: object
    M_e: sp.csr_matrix
    M_f: sp.csr_matrix
    C: sp.csr_matrix
    pec: np.ndarray
    free: np.ndarray
    eps: np.ndarray  # per tet, F/m
    mu_inv: np.ndarray  # per tet, m/H
    local_edge: np.ndarray = field(repr=False, default=None)
    local_face: np.ndarray = field(repr=False, default=None)

    @property
    def n_edges(self):
        return self.M_e.shape[0]

    @property
    def n_faces(self):
        return self.M_f.shape[0]

    @property
    def n_free(self):
        return len(self.free)


def assemble_mixed_system(mesh, materials=VACUUM, pec_mask=None):
    """Assemble edge/face mass matrices and the curl incidence.

    Raises :class:`AssemblyError` if any element mass matrix is not SPD.
    """
    eps, mu_inv = materials.per_tet(mesh.materials)
    edge_dir, face_dir = local_whitney_matrices(mesh)
    edge_loc = edge_dir.sum(axis=1)
    face_loc = face_dir.sum(axis=1)

    min_e = np.linalg.eigvalsh(edge_loc).min(axis=1) / np.abs(np.trace(edge_loc, axis1=1, axis2=2))
    min_f = np.linalg.eigvalsh(face_loc).min(axis=1) / np.abs(np.trace(face_loc, axis1=1, axis2=2))
    if np.any(min_e <= 1e-14) or np.any(min_f <= 1e-14):
        bad = int(np.argmin(np.minimum(min_e, min_f)))
        raise AssemblyError(f"element mass matrix is not SPD (tet {bad}); check mesh quality")

    M_e = _symmetrize(_scatter(edge_loc, mesh.tet_edges, eps, mesh.n_edges))
    M_f = _symmetrize(_scatter(face_loc, mesh.tet_faces, mu_inv, mesh.n_faces))
    if pec_mask is None:
        pec_mask = np.zeros(mesh.n_edges, dtype=bool)
    pec_mask = np.asarray(pec_mask, dtype=bool)
    if pec_mask.shape != (mesh.n_edges,):
        raise InvalidArgument("PEC mask length must equal the edge count")
    C = mesh.curl_incidence.astype(float).tocsr()
    return MixedSystem(
        mesh=mesh,
        M_e=M_e,
        M_f=M_f,
        C=C,
        pec=pec_mask.copy(),
        free=np.flatnonzero(~pec_mask),
        eps=eps,
        mu_inv=mu_inv,
        local_edge=edge_dir,
        local_face=face_dir,
    )


def field_energy(system, state):
    """0.5 (e^T M_e e + b^T M_f b), in joules."""
    e, b = state.e, state.b
    return 0.5 * float(e @ (system.M_e @ e) + b @ (system.M_f @ b))


def hat(t, dt):
    """Piecewise-linear temporal representation function N(t)."""
    return np.maximum(0.0, 1.0 - np.abs(np.asarray(t, dtype=float)) / dt)


@dataclass(frozen=True)
class TimeBasis:
    dt: float
    gamma: float = NEWMARK_GAMMA
    beta: float = NEWMARK_BETA

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidArgument("time step must be positive")
        if (self.gamma, self.beta) != (NEWMARK_GAMMA, NEWMARK_BETA):
            raise InvalidArgument("only the gamma=1/2, beta=1/4 member is supported")

    def representation(self, t):
        return hat(t, self.dt)


@dataclass
class FieldState:
    e: np.ndarray
    b: np.ndarray
    step: int = 0
    conv_e: list = field(default_factory=list)
    conv_b: list = field(default_factory=list)
    iterations: int = 0
    residual: float = 0.0

    def copy(self):
        return FieldState(
            self.e.copy(), self.b.copy(), self.step,
            [tuple(a.copy() for a in acc) for acc in self.conv_e],
            [tuple(a.copy() for a in acc) for acc in self.conv_b],
            self.iterations, self.residual,
        )


@dataclass
class _KernelGroup:
    rate: float
    power: int
    weights: pmlmod.StepWeights
    aux_weights: pmlmod.StepWeights
    Q: sp.csr_matrix  # columns restricted to support
    support: np.ndarray


class MixedStepper:
    """Trapezoidal marching for a MixedSystem at a fixed time step.

    The system matrix is SPD and fixed; each step performs one GMRES solve.
    """

    def __init__(self, system, dt, profile=None, gmres=GmresConfig()):
        self.system = system
        self.basis = TimeBasis(dt)
        self.dt = dt
        self.gmres = gmres
        free = system.free
        self.C_f = system.C[:, free].tocsr()
        self.Ct = self.C_f.T.tocsr()
        Me = system.M_e[free][:, free].tocsr()
        self.Me = Me

        M_delta = sp.csr_matrix((len(free), len(free)))
        Mf_tilde = system.M_f
        self.e_groups, self.b_groups = [], []
        if profile is not None:
            M_delta, self.e_groups, self.b_groups, Mf_tilde = self._pml_operators(profile)
        M_alpha = M_delta
        for g in self.e_groups:
            M_alpha = M_alpha + g.weights.w_new * self._expand(g, len(free))
        self.M_delta = M_delta.tocsr()
        self.M_alpha = M_alpha.tocsr()
        self.Mf_tilde = Mf_tilde.tocsr()

        A = Me / dt + 0.5 * self.M_alpha + (dt / 4.0) * (self.Ct @ self.Mf_tilde @ self.C_f)
        A = _symmetrize(A)
        A.sum_duplicates()
        A.sort_indices()
        self.A = A
        d = A.diagonal()
        self._dinv = 1.0 / d if gmres.jacobi else None

    @staticmethod
    def _expand(group, n):
        Q = group.Q.tocoo()
        return sp.csr_matrix((Q.data, (Q.row, group.support[Q.col])), shape=(Q.shape[0], n))

    def _pml_operators(self, profile):
        system = self.system
        mesh = system.mesh
        centroids = mesh.vertices[mesh.tets].mean(axis=1)
        sig = profile.sigma(centroids) / EPS0  # (T, 3), units 1/s
        in_pml = np.any(sig > 0, axis=1)
        # stretch-tensor entry d is s_p s_q / s_d with {p, q} the other two axes
        others = ((1, 2), (0, 2), (0, 1))

        nfree = len(system.free)
        edge_map = -np.ones(system.n_edges, dtype=np.int64)
        edge_map[system.free] = np.arange(nfree)
        alpha = np.zeros((mesh.n_tets, 3))
        groups_e, groups_b = {}, {}
        cache = {}
        for t in np.flatnonzero(in_pml):
            for d in range(3):
                p, q = others[d]
                key = (sig[t, p], sig[t, q], sig[t, d])
                if key not in cache:
                    cache[key] = pmlmod.derive_kernels(*key)
                l1, l2 = cache[key]
                alpha[t, d] = l1.delta
                for term in l1.terms:
                    gk = (d, _rate_key(term.rate), term.power)
                    groups_e.setdefault(gk, []).append((t, term.amplitude, term.rate))
                for term in l2.terms:
                    gk = (d, _rate_key(term.rate), term.power)
                    groups_b.setdefault(gk, []).append((t, term.amplitude, term.rate))

        Me_full_alpha = sp.csr_matrix((system.n_edges, system.n_edges))
        for d in range(3):
            w = alpha[:, d] * system.eps
            if np.any(w != 0):
                Me_full_alpha = Me_full_alpha + _scatter(
                    system.local_edge[:, d], mesh.tet_edges, w, system.n_edges
                )
        M_alpha = Me_full_alpha[system.free][:, system.free].tocsr()

        def build(groups, local, dofs, material, n, restrict):
            out = []
            for (d, _, power), members in sorted(groups.items()):
                tets = np.array([m[0] for m in members])
                amps = np.array([m[1] for m in members])
                rate = float(np.mean([m[2] for m in members]))
                Q = _scatter(local[tets, d], dofs[tets], amps * material[tets], n)
                if restrict is not None:
                    Q = Q[restrict][:, restrict]
                Q = Q.tocsc()
                support = np.flatnonzero(np.diff(Q.indptr) > 0)
                Qs = Q[:, support].tocsr()
                out.append(_KernelGroup(
                    rate, power,
                    pmlmod.step_weights(rate, power, self.dt),
                    pmlmod.step_weights(rate, 0, self.dt),
                    Qs, support,
                ))
            return out

        e_groups = build(groups_e, system.local_edge, mesh.tet_edges, system.eps,
                         system.n_edges, system.free)
        b_groups = build(groups_b, system.local_face, mesh.tet_faces, system.mu_inv,
                         system.n_faces, None)
        Mf_tilde = system.M_f.copy()
        for g in b_groups:
            Mf_tilde = Mf_tilde + g.weights.w_new * self._expand(g, system.n_faces)
        log.debug("PML: %d electric and %d magnetic kernel groups", len(e_groups), len(b_groups))
        return M_alpha, e_groups, b_groups, Mf_tilde

    def initial_state(self, e=None, b=None):
        sys_ = self.system
        e = np.zeros(sys_.n_edges) if e is None else np.array(e, dtype=float)
        b = np.zeros(sys_.n_faces) if b is None else np.array(b, dtype=float)
        e[sys_.pec] = 0.0
        conv_e = [(np.zeros(len(g.support)), np.zeros(len(g.support))) for g in self.e_groups]
        conv_b = [(np.zeros(len(g.support)), np.zeros(len(g.support))) for g in self.b_groups]
        return FieldState(e, b, 0, conv_e, conv_b)

    def _precond(self, v):
        return self._dinv * v

    @staticmethod
    def _history(groups, accs, x_old):
        hist = []
        for g, (acc, aux) in zip(groups, accs):
            w = g.weights
            h = w.decay * acc + w.w_old * x_old[g.support]
            if g.power == 1:
                h = h + w.shift * aux
            hist.append(h)
        return hist

    @staticmethod
    def _advance(groups, accs, hist, x_old, x_new):
        out = []
        for g, (acc, aux), h in zip(groups, accs, hist):
            new_acc = h + g.weights.w_new * x_new[g.support]
            if g.power == 1:
                aw = g.aux_weights
                aux = aw.decay * aux + aw.w_new * x_new[g.support] + aw.w_old * x_old[g.support]
            out.append((new_acc, aux))
        return out

    def assemble_rhs(self, state, load):
        """Right-hand side of the step system; also returns the kernel histories."""
        free = self.system.free
        e = state.e[free]
        b = state.b
        dt = self.dt

        hist_e = self._history(self.e_groups, state.conv_e, e)
        hist_b = self._history(self.b_groups, state.conv_b, b)

        P_now = self.M_delta @ e
        for g, (acc, _) in zip(self.e_groups, state.conv_e):
            P_now = P_now + g.Q @ acc
        H_now = self.system.M_f @ b
        for g, (acc, _) in zip(self.b_groups, state.conv_b):
            H_now = H_now + g.Q @ acc

        rhs = (self.Me @ e) / dt - 0.5 * P_now
        for g, h in zip(self.e_groups, hist_e):
            rhs -= 0.5 * (g.Q @ h)
        H_next_known = self.Mf_tilde @ (b - 0.5 * dt * (self.C_f @ e))
        for g, h in zip(self.b_groups, hist_b):
            H_next_known = H_next_known + g.Q @ h
        rhs += 0.5 * (self.Ct @ (H_now + H_next_known))
        if load is not None:
            rhs += np.asarray(load, dtype=float)[free]
        return rhs, hist_e, hist_b

    def finish_step(self, state, e_new_free, hist_e, hist_b, iterations=0, residual=0.0):
        free = self.system.free
        e_old = state.e[free]
        b_new = state.b - 0.5 * self.dt * (self.C_f @ (e_old + e_new_free))
        e_full = np.zeros(self.system.n_edges)
        e_full[free] = e_new_free
        conv_e = self._advance(self.e_groups, state.conv_e, hist_e, e_old, e_new_free)
        conv_b = self._advance(self.b_groups, state.conv_b, hist_b, state.b, b_new)
        return FieldState(e_full, b_new, state.step + 1, conv_e, conv_b, iterations, residual)

    def step(self, state, load=None):
        rhs, hist_e, hist_b = self.assemble_rhs(state, load)
        precond = self._precond if self._dinv is not None else None
        try:
            res = gmres_solve(self.A, rhs, self.gmres, x0=state.e[self.system.free], precond=precond)
        except SolverFailure as exc:
            raise SolverFailure(
                "field update failed", residual=exc.residual, iterations=exc.iterations,
                step=state.step + 1,
            ) from exc
        return self.finish_step(state, res.x, hist_e, hist_b, res.iterations, res.residual)


def _rate_key(rate):
    return float(f"{rate:.12e}")


def step_fields(stepper, state, rhs=None):
    """Advance ``state`` one step; ``rhs`` is the trapezoid-tested edge load."""
    return stepper.step(state, rhs)


def tested_load(f_prev, f_next):
    """Edge load tested against the step's testing function (trapezoid average)."""
    return 0.5 * (np.asarray(f_prev, dtype=float) + np.asarray(f_next, dtype=float))


class FieldHistoryWriter:
    """CSV time series of selected edge coefficients: ``step, time_s, e_<edge>...``."""

    def __init__(self, path, edges, dt):
        self.edges = np.asarray(edges, dtype=np.int64)
        self.dt = float(dt)
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(["step", "time_s"] + [f"e_{k}" for k in self.edges])

    def record(self, state):
        self._w.writerow([state.step, repr(state.step * self.dt)]
                         + [repr(float(v)) for v in state.e[self.edges]])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
