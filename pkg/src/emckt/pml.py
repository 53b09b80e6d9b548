"""Stretched-coordinate PML: conductivity grading, time-domain kernels and
recursive convolution.

A diagonal entry of the stretch tensor has the form ``s_a s_b / s_c`` with
``s_i = 1 + sigma_i / (j w eps0)``. Writing ``a, b, c`` for ``sigma / eps0``
and ``s = j w``, the two kernels needed by the marching scheme are

    j w s_a s_b / s_c = (s + a)(s + b) / (s + c)
                      = s + (a + b - c) + (c - a)(c - b) / (s + c)

    s_c / (s_a s_b)   = s (s + c) / ((s + a)(s + b))
                      = 1 + a (a - c) / ((b - a)(s + a)) + b (b - c) / ((a - b)(s + b))

(with the repeated-pole form when ``a == b``). Each ``1/(s+r)^(p+1)`` term
becomes ``t^p e^{-r t}`` in time and is applied by recursive convolution
with piecewise-linear sample interpolation inside every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgument

EPS0 = 8.8541878128e-12
MU0 = 1.25663706212e-6
C0 = 1.0 / math.sqrt(EPS0 * MU0)

DECAY_GUARD = 700.0
_SERIES_CUTOFF = 0.1
# poles closer than this (relative) are merged into a repeated pole
POLE_MERGE_RTOL = 1e-8


class ExpTerm(NamedTuple):
    amplitude: float
    rate: float  # 1/s, >= 0; rate 0 is a running integral
    power: int = 0  # kernel is amplitude * t**power * exp(-rate t)


@dataclass(frozen=True)
class KernelDecomposition:
    ddelta: float
    delta: float
    terms: tuple = ()

    def frequency_response(self, omega):
        s = 1j * np.asarray(omega, dtype=float)
        out = self.ddelta * s + self.delta
        for t in self.terms:
            out = out + t.amplitude * math.factorial(t.power) / (s + t.rate) ** (t.power + 1)
        return out

    def impulse_tail(self, t):
        """Regular (non-distributional) part of the kernel at times ``t >= 0``."""
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for term in self.terms:
            out += term.amplitude * t ** term.power * np.exp(-term.rate * t)
        return out

    @property
    def is_identity_like(self):
        return not self.terms and self.delta == 0.0


def derive_kernels(a, b, c):
    """Kernels of ``j w s_a s_b / s_c`` (electric) and ``s_c / (s_a s_b)`` (magnetic).

    ``a, b, c`` are conductivities divided by eps0 (units 1/s).
    """
    a, b, c = float(a), float(b), float(c)
    if min(a, b, c) < 0:
        raise InvalidArgument("stretch parameters must be non-negative")

    l1_terms = []
    amp = (c - a) * (c - b)
    if amp != 0.0:
        l1_terms.append(ExpTerm(amp, c, 0))
    l1 = KernelDecomposition(1.0, a + b - c, tuple(l1_terms))

    l2_terms = []
    scale = max(a, b, 1e-300)
    if abs(a - b) <= POLE_MERGE_RTOL * scale:
        r = 0.5 * (a + b)
        first = c - 2.0 * r
        second = r * (r - c)
        if first != 0.0:
            l2_terms.append(ExpTerm(first, r, 0))
        if second != 0.0:
            l2_terms.append(ExpTerm(second, r, 1))
    else:
        amp_a = a * (a - c) / (b - a)
        amp_b = b * (b - c) / (a - b)
        if amp_a != 0.0:
            l2_terms.append(ExpTerm(amp_a, a, 0))
        if amp_b != 0.0:
            l2_terms.append(ExpTerm(amp_b, b, 0))
    l2 = KernelDecomposition(0.0, 1.0, tuple(l2_terms))
    return l1, l2


def _phi(order, u):
    """phi_k(u) = int_0^1 s^(k-1) exp(-u s) ds for k = 1, 2, 3."""
    if u < _SERIES_CUTOFF:
        total, term = 0.0, 1.0
        for n in range(25):
            total += term / (n + order)
            term *= -u / (n + 1)
        return total
    em = math.exp(-u) if u < DECAY_GUARD + 50 else 0.0
    if order == 1:
        return -math.expm1(-u) / u
    if order == 2:
        return (1.0 - (1.0 + u) * em) / u**2
    if order == 3:
        return (2.0 - (u * u + 2.0 * u + 2.0) * em) / u**3
    raise ValueError(order)


@dataclass(frozen=True)
class StepWeights:
    decay: float  # exp(-rate dt), 0 when fully decayed
    w_new: float  # weight of the end-of-step sample
    w_old: float  # weight of the start-of-step sample
    shift: float  # dt * decay; couples the power-0 accumulator into power-1


def step_weights(rate, power, dt):
    """Exact integrals of ``t^p e^{-rate t}`` against the linear hat pieces."""
    u = rate * dt
    decay = 0.0 if u > DECAY_GUARD else math.exp(-u)
    if power == 0:
        w_old = dt * _phi(2, u)
        w_new = dt * _phi(1, u) - w_old
    elif power == 1:
        w_old = dt * dt * _phi(3, u)
        w_new = dt * dt * _phi(2, u) - w_old
    else:
        raise InvalidArgument("only t^0 and t^1 exponential kernels are supported")
    return StepWeights(decay, w_new, w_old, dt * decay)


@dataclass
class ConvolutionState:
    """Recursive accumulators for one kernel acting on a vector of samples."""

    kernel: KernelDecomposition
    dt: float
    n_dofs: int
    acc: np.ndarray = field(init=False)
    acc_aux: np.ndarray = field(init=False)
    last: np.ndarray = field(init=False)
    weights: list = field(init=False)

    def __post_init__(self):
        nt = len(self.kernel.terms)
        self.acc = np.zeros((nt, self.n_dofs))
        # t e^{-rt} terms also need the plain e^{-rt} convolution of the same rate
        self.acc_aux = np.zeros((nt, self.n_dofs))
        self.last = np.zeros(self.n_dofs)
        self.weights = [
            (step_weights(t.rate, t.power, self.dt), step_weights(t.rate, 0, self.dt))
            for t in self.kernel.terms
        ]


def recursive_convolution_update(state, sample):
    """Advance every accumulator by one step; return ``(state, value)``.

    ``value`` is ``delta * sample + sum_k amplitude_k * acc_k``: the kernel
    convolved with the piecewise-linear sample history, excluding any
    derivative-of-delta part.
    """
    sample = np.asarray(sample, dtype=float).reshape(state.n_dofs)
    value = state.kernel.delta * sample
    for k, term in enumerate(state.kernel.terms):
        w, w0 = state.weights[k]
        if term.power == 1:
            state.acc[k] = (
                w.decay * state.acc[k]
                + w.shift * state.acc_aux[k]
                + w.w_new * sample
                + w.w_old * state.last
            )
            state.acc_aux[k] = w0.decay * state.acc_aux[k] + w0.w_new * sample + w0.w_old * state.last
        else:
            state.acc[k] = w.decay * state.acc[k] + w.w_new * sample + w.w_old * state.last
        value = value + term.amplitude * state.acc[k]
    state.last = sample.copy()
    return state, value


@dataclass(frozen=True)
class StretchProfile:
    """Polynomially graded conductivity on selected faces of a box."""

    bounds: tuple  # ((xmin, ymin, zmin), (xmax, ymax, zmax))
    thickness: float
    order: int
    sigma_max: float
    faces: tuple

    def sigma(self, points):
        """Return ``(N, 3)`` conductivities (S/m) at ``points``."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        lo, hi = (np.asarray(v) for v in self.bounds)
        out = np.zeros_like(points)
        if self.thickness <= 0 or self.sigma_max == 0.0:
            return out
        for name in self.faces:
            axis = "xyz".index(name[0])
            if name.endswith("min"):
                depth = (lo[axis] + self.thickness) - points[:, axis]
            else:
                depth = points[:, axis] - (hi[axis] - self.thickness)
            depth = np.clip(depth / self.thickness, 0.0, 1.0)
            out[:, axis] += self.sigma_max * depth**self.order
        return out


def sigma_max_for(thickness, order, r0):
    if thickness <= 0:
        raise InvalidArgument("PML thickness must be positive")
    if not (0.0 < r0 < 1.0):
        raise InvalidArgument(f"target reflection must lie in (0, 1), got {r0}")
    return -(order + 1) * EPS0 * C0 * math.log(r0) / (2.0 * thickness)


def build_stretch_profile(bounds, thickness, order=3, r0=1e-4, faces=("xmin", "xmax", "ymin", "ymax", "zmin", "zmax"), cell_size=None):
    """Graded profile ``sigma(depth) = sigma_max (depth/d)^m``.

    ``cell_size`` (per axis), when given, is used to check that the layer
    spans an integer number of cells on every enabled face.
    """
    if order < 1:
        raise InvalidArgument("grading order must be >= 1")
    if thickness == 0 and r0 < 1:
        raise InvalidArgument("zero PML thickness cannot reach a reflection below 1")
    if cell_size is not None:
        for name in faces:
            h = cell_size["xyz".index(name[0])]
            ratio = thickness / h
            if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
                raise InvalidArgument(f"PML thickness {thickness} is not a whole number of cells on {name}")
    smax = sigma_max_for(thickness, order, r0)
    return StretchProfile(tuple(map(tuple, bounds)), float(thickness), int(order), smax, tuple(faces))


def normal_reflection(profile, n_quad=64):
    """Normal-incidence round-trip reflection of a PEC-backed layer,
    ``exp(-2/(eps0 c) int_0^d sigma dz)`` by Gauss-Legendre quadrature."""
    x, w = np.polynomial.legendre.leggauss(n_quad)
    z = 0.5 * profile.thickness * (x + 1.0)
    sig = profile.sigma_max * (z / profile.thickness) ** profile.order
    integral = 0.5 * profile.thickness * float(w @ sig)
    return math.exp(-2.0 * integral / (EPS0 * C0))
