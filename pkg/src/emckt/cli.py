"""Command-line front end: ``emckt <mode> --config <path> [--archive <path>] [--out <dir>]``.

Modes: extract, replay, coupled, compare, bench. Exit codes: 0 ok,
2 configuration error, 3 solver failure, 4 equivalence threshold exceeded.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .coupling import build_coupling, coupled_transient_solve
from .errors import EmcktError, EquivalenceFailure
from .portx import extract, read_archive, replay_transient_solve, write_archive
from .postprocess import dft, port_admittance_and_s, relative_l2, write_spectrum_csv

log = logging.getLogger("emckt")

MODES = ("extract", "replay", "coupled", "compare", "bench")


class Report:
    """Delimited ``key = value`` block on stdout."""

    def __init__(self, mode, stream=None):
        self.stream = stream or sys.stdout
        self.mode = mode
        self.items = []

    def add(self, key, value):
        self.items.append((key, value))

    def emit(self):
        print(f"=== emckt {self.mode} ===", file=self.stream)
        for k, v in self.items:
            if isinstance(v, float):
                v = f"{v:.6e}"
            print(f"{k} = {v}", file=self.stream)
        print("=== end ===", file=self.stream)


def _out_dir(args, cfg):
    out = Path(args.out) if args.out else cfg.path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _archive_path(args, cfg):
    return Path(args.archive) if args.archive else cfg.path(cfg["archive"]["path"])


def _freqs(cfg):
    o = cfg["output"]
    return np.linspace(float(o["f_start"]), float(o["f_stop"]), int(o["n_freq"]))


def _spectra(result, cfg, out, prefix, report):
    freqs = _freqs(cfg)
    figures = cfg["output"]["figures"]
    for k, q in enumerate(result.port_ids):
        Vf = dft(result.V[:, k], result.dt, freqs)
        If = dft(result.I[:, k], result.dt, freqs)
        Y, S, valid = port_admittance_and_s(Vf, If)
        write_spectrum_csv(out / f"{prefix}_spectrum_V_port{q}.csv", freqs, Vf)
        write_spectrum_csv(out / f"{prefix}_spectrum_I_port{q}.csv", freqs, If)
        write_spectrum_csv(out / f"{prefix}_spectrum_Y_port{q}.csv", freqs, Y)
        write_spectrum_csv(out / f"{prefix}_spectrum_S11_port{q}.csv", freqs, S)
        report.add(f"{prefix}.port{q}.flagged_frequencies", int(np.count_nonzero(~valid)))
        # port power delivered into the field region, trapezoid in time
        p = result.V[:, k] * result.I[:, k]
        report.add(f"{prefix}.port{q}.energy_J", float(result.dt * (p.sum() - 0.5 * (p[0] + p[-1]))))
        if figures:
            from .plotting import plot_spectrum

            plot_spectrum(freqs, Y, valid, out / f"{prefix}_admittance_port{q}.png", f"port {q}")


def _waveform_outputs(result, cfg, out, prefix, report):
    path = out / f"{prefix}_waveforms.csv"
    result.write_csv(path)
    report.add(f"{prefix}.waveforms", str(path))
    report.add(f"{prefix}.steps", result.n_steps)
    report.add(f"{prefix}.dt_s", result.dt)
    report.add(f"{prefix}.newton_iters_mean", float(np.mean(result.newton_iters)) if result.newton_iters else 0.0)
    for k, q in enumerate(result.port_ids):
        report.add(f"{prefix}.port{q}.max_abs_V", float(np.max(np.abs(result.V[:, k]))))
    _spectra(result, cfg, out, prefix, report)
    if cfg["output"]["figures"]:
        from .plotting import plot_waveforms

        plot_waveforms(result, out / f"{prefix}_waveforms.png", prefix)


def _em(cfg):
    mesh, system, stepper, ports = cfgmod.build_em(cfg)
    cmap = build_coupling(system, ports)
    return stepper, ports, cmap


def run_extract(args, cfg, report):
    stepper, _, cmap = _em(cfg)
    arch = extract(stepper, cmap, cfg.lags, int(cfg["archive"]["t_delta"]), int(cfg["archive"]["workers"]))
    path = _archive_path(args, cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_archive(arch, path)
    report.add("archive", str(path))
    report.add("ports", arch.n_ports)
    report.add("lags", arch.horizon)
    report.add("dt_s", arch.dt)
    report.add("n_em", len(stepper.system.free))
    report.add("gmres_iters_total", arch.gmres_iters)
    return arch


def run_coupled(args, cfg, report, out):
    stepper, _, cmap = _em(cfg)
    mna = cfgmod.build_circuit(cfg, stepper.dt)
    res = coupled_transient_solve(stepper, cmap, mna, cfg.steps, cfg.newton)
    report.add("coupled.gmres_iters_mean", float(np.mean(res.gmres_iters)))
    _waveform_outputs(res, cfg, out, "coupled", report)
    return res


def run_replay(args, cfg, report, out, archive=None):
    if archive is None:
        archive = read_archive(_archive_path(args, cfg))
    dt = cfgmod.time_step(cfg)
    mna = cfgmod.build_circuit(cfg, dt)
    res = replay_transient_solve(archive, mna, cfg.steps, cfg.newton)
    _waveform_outputs(res, cfg, out, "replay", report)
    return res


def run_compare(args, cfg, report, out):
    path = _archive_path(args, cfg)
    if args.archive and path.exists():
        archive = read_archive(path)
        report.add("archive", str(path))
    else:
        stepper, _, cmap = _em(cfg)
        archive = extract(stepper, cmap, cfg.lags, int(cfg["archive"]["t_delta"]),
                          int(cfg["archive"]["workers"]))
        report.add("archive", "extracted in memory")
    coupled = run_coupled(args, cfg, report, out)
    replay = run_replay(args, cfg, report, out, archive)
    err = relative_l2(coupled.V, replay.V)
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "time_s", "port_id", "V_coupled", "V_replay", "abs_diff"])
        for i in range(coupled.V.shape[0]):
            for k, q in enumerate(coupled.port_ids):
                a, b = float(coupled.V[i, k]), float(replay.V[i, k])
                w.writerow([i, repr(i * coupled.dt), q, repr(a), repr(b), repr(abs(a - b))])
    if cfg["output"]["figures"]:
        from .plotting import plot_compare

        plot_compare(coupled, replay, out / "compare.png")
    threshold = float(cfg["output"]["compare_threshold"])
    report.add("relative_l2", err)
    report.add("threshold", threshold)
    report.add("verdict", "PASS" if err <= threshold else "FAIL")
    if not err <= threshold:
        report.emit()
        raise EquivalenceFailure(f"relative L2 {err:.3e} exceeds {threshold:.1e}")


def run_bench(args, cfg, report, out):
    from .bench import run_bench as bench

    _, _, stepper, ports = cfgmod.build_em(cfg)
    rep, coupled, replay, archive = bench(
        stepper, ports, lambda: cfgmod.build_circuit(cfg, stepper.dt), cfg.steps, cfg.newton,
        int(cfg["archive"]["workers"]), int(cfg["archive"]["t_delta"]),
    )
    rep.write_counts(out / "cost_report.csv")
    rep.write_timings(out / "timings.csv")
    for k, v in rep.counts().items():
        report.add(k, v)
    report.add("coupled_s_per_step", rep.coupled_per_step)
    report.add("replay_s_per_step", rep.replay_per_step)
    report.add("extraction_s", rep.extraction_time)
    report.add("speedup", rep.speedup)
    if cfg["output"]["figures"]:
        from .plotting import plot_cumulative

        plot_cumulative(rep.coupled_step_times, rep.replay_step_times, out / "cumulative_time.png",
                        rep.extraction_time)
    return rep


def build_parser():
    p = argparse.ArgumentParser(prog="emckt", description=__doc__.splitlines()[0])
    p.add_argument("mode", choices=MODES)
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--archive", help="impulse archive path (overrides archive.path)")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    report = Report(args.mode)
    try:
        cfg = cfgmod.load_config(args.config)
        if args.mode == "extract":
            run_extract(args, cfg, report)
        else:
            out = _out_dir(args, cfg)
            {"replay": run_replay, "coupled": run_coupled, "compare": run_compare,
             "bench": run_bench}[args.mode](args, cfg, report, out)
    except EquivalenceFailure as exc:
        log.error("kind=%s message=%s", type(exc).__name__, exc)
        return exc.exit_code
    except EmcktError as exc:
        log.error("kind=%s message=%s", type(exc).__name__, exc)
        return exc.exit_code
    report.emit()
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
