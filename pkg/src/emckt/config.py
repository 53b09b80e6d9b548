"""Run configuration (TOML) and the builders that turn it into solver objects.

Every knob has an explicit default listed in ``DEFAULTS``; the README
documents the keys. Relative paths resolve against the config file.
"""

from __future__ import annotations

import copy
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .circuit import MnaSystem, NewtonConfig, load_netlist
from .emfem import Materials, MixedStepper, assemble_mixed_system
from .errors import ConfigurationError, EmcktError
from .mesh import BOX_FACES, box_face_edge_mask, build_box_mesh, read_ascii, resolve_port
from .pml import build_stretch_profile
from .solver import GmresConfig

log = logging.getLogger(__name__)

DEFAULTS = {
    "mesh": {"kind": "box", "cells": [8, 8, 4], "dims": [0.12, 0.12, 0.06], "origin": [0.0, 0.0, 0.0],
             "file": None},
    "materials": {"eps_r": [1.0], "mu_r": [1.0]},
    "boundary": {"pec": list(BOX_FACES)},
    "pml": {"enabled": False, "thickness_cells": 10, "order": 3, "r0": 1e-4,
            **{face: False for face in BOX_FACES}},
    "ports": [],
    "time": {"dt": "auto", "f_max": None, "steps": 2000},
    "circuit": {"netlist": None, "order": 2},
    "solver": {"gmres_tol": 1e-12, "gmres_restart": 60, "gmres_max_iter": 2000,
               "newton_tol": 1e-12, "newton_max_iter": 60, "newton_halvings": 4},
    "archive": {"path": "archive.empx", "t_delta": 2, "workers": 1, "lags": None},
    "output": {"dir": "out", "figures": True, "compare_threshold": 1e-10,
               "f_start": 0.5e9, "f_stop": 4.5e9, "n_freq": 81},
}


def _merge(base, over, where=""):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigurationError(f"unknown config key {where}{k}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigurationError(f"config key {where}{k} must be a table")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    data: dict
    base_dir: Path

    def __getitem__(self, key):
        return self.data[key]

    def path(self, value):
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def gmres(self):
        s = self.data["solver"]
        return GmresConfig(tol=float(s["gmres_tol"]), restart=int(s["gmres_restart"]),
                           max_iter=int(s["gmres_max_iter"]))

    @property
    def newton(self):
        s = self.data["solver"]
        return NewtonConfig(tol=float(s["newton_tol"]), max_iter=int(s["newton_max_iter"]),
                            max_halvings=int(s["newton_halvings"]))

    @property
    def steps(self):
        n = int(self.data["time"]["steps"])
        if n < 1:
            raise ConfigurationError("time.steps must be >= 1")
        return n

    @property
    def lags(self):
        lags = self.data["archive"]["lags"]
        return self.steps + 1 if lags is None else int(lags)


def load_config(path):
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    return config_from_dict(raw, path.parent)


def config_from_dict(raw, base_dir="."):
    data = _merge(DEFAULTS, raw)
    return RunConfig(data, Path(base_dir))


# ---------------------------------------------------------------- builders

def build_mesh(cfg):
    m = cfg["mesh"]
    try:
        if m["kind"] == "box":
            nx, ny, nz = (int(v) for v in m["cells"])
            return build_box_mesh(nx, ny, nz, tuple(map(float, m["dims"])), tuple(map(float, m["origin"])))
        if m["kind"] == "file":
            return read_ascii(cfg.path(m["file"]))
    except EmcktError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad [mesh] section: {exc}") from None
    raise ConfigurationError(f"unknown mesh kind {m['kind']!r}")


def build_em(cfg, mesh=None):
    """Mesh, assembled system, stepper and resolved ports."""
    mesh = mesh or build_mesh(cfg)
    mat = Materials(tuple(map(float, cfg["materials"]["eps_r"])), tuple(map(float, cfg["materials"]["mu_r"])))
    faces = tuple(cfg["boundary"]["pec"])
    unknown = set(faces) - set(BOX_FACES)
    if unknown:
        raise ConfigurationError(f"unknown PEC faces {sorted(unknown)}")
    pec = box_face_edge_mask(mesh, faces) if faces else np.zeros(mesh.n_edges, dtype=bool)
    system = assemble_mixed_system(mesh, mat, pec)
    profile = None
    p = cfg["pml"]
    if p["enabled"]:
        profile = _pml_profile(mesh, p)
    dt = time_step(cfg)
    stepper = MixedStepper(system, dt, profile, cfg.gmres)
    ports = []
    for entry in cfg["ports"]:
        try:
            ports.append(resolve_port(mesh, entry["a"], entry["b"], int(entry["id"]), entry.get("label", "")))
        except KeyError as exc:
            raise ConfigurationError(f"port entry missing {exc}") from None
    return mesh, system, stepper, ports


def _pml_profile(mesh, p):
    faces = tuple(f for f in BOX_FACES if p[f])
    if not faces:
        raise ConfigurationError("pml.enabled is set but no face flag is true")
    if mesh.cell_size is None or mesh.box_bounds is None:
        raise ConfigurationError("PML needs a structured box mesh")
    # one thickness for all faces, so the enabled axes must share a cell size
    sizes = {round(mesh.cell_size["xyz".index(f[0])], 15) for f in faces}
    if len(sizes) != 1:
        raise ConfigurationError("PML faces on axes with different cell sizes are not supported")
    cells = int(p["thickness_cells"])
    if cells < 1:
        raise ConfigurationError("pml.thickness_cells must be >= 1")
    thickness = cells * sizes.pop()
    return build_stretch_profile(mesh.box_bounds, thickness, int(p["order"]), float(p["r0"]), faces,
                                 mesh.cell_size)


def netlist(cfg):
    path = cfg.path(cfg["circuit"]["netlist"])
    if path is None:
        raise ConfigurationError("circuit.netlist is required for this mode")
    if not path.exists():
        raise ConfigurationError(f"netlist {path} not found")
    return load_netlist(path)


def time_step(cfg):
    t = cfg["time"]
    dt = t["dt"]
    if dt == "auto":
        f_max = t["f_max"]
        if f_max is None and cfg["circuit"]["netlist"]:
            f_max = max((e.waveform.f_max for e in netlist(cfg).elements if e.waveform), default=0.0)
        if not f_max:
            raise ConfigurationError("dt = 'auto' needs time.f_max or a netlist with sources")
        return 1.0 / (30.0 * float(f_max))
    try:
        dt = float(dt)
    except (TypeError, ValueError):
        raise ConfigurationError(f"time.dt must be 'auto' or seconds, got {dt!r}") from None
    if not dt > 0:
        raise ConfigurationError("time.dt must be positive")
    return dt


def build_circuit(cfg, dt):
    return MnaSystem(netlist(cfg), dt, int(cfg["circuit"]["order"]))
