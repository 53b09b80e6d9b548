"""Cost accounting for the coupled and port-replay solution paths."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .coupling import build_coupling, coupled_transient_solve
from .portx import extract, replay_transient_solve


@dataclass
class CostReport:
    n_em: int
    n_ckt: int
    n_p: int
    n_t: int
    newton_coupled: float  # mean Newton iterations per step
    gmres_coupled: float  # mean GMRES iterations per step (all Newton iterations)
    gmres_extraction: float  # mean GMRES iterations per extraction step
    newton_replay: float
    # wall clock (seconds); not reproducible, kept out of the counts CSV
    coupled_step_times: list = field(default_factory=list, repr=False)
    replay_step_times: list = field(default_factory=list, repr=False)
    extraction_time: float = 0.0

    @property
    def coupled_per_step(self):
        return float(np.mean(self.coupled_step_times)) if self.coupled_step_times else 0.0

    @property
    def replay_per_step(self):
        return float(np.mean(self.replay_step_times)) if self.replay_step_times else 0.0

    @property
    def speedup(self):
        return self.coupled_per_step / self.replay_per_step if self.replay_per_step else float("inf")

    def counts(self):
        d = asdict(self)
        for k in ("coupled_step_times", "replay_step_times", "extraction_time"):
            d.pop(k)
        return d

    def write_counts(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "value"])
            for k, v in self.counts().items():
                w.writerow([k, repr(v)])

    def write_timings(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "coupled_s", "replay_s", "coupled_cumulative_s", "replay_cumulative_s"])
            cc = np.cumsum(self.coupled_step_times)
            rc = np.cumsum(self.replay_step_times)
            for i in range(len(cc)):
                w.writerow([i + 1, self.coupled_step_times[i], self.replay_step_times[i], cc[i], rc[i]])
            w.writerow(["extraction_total_s", self.extraction_time, "", "", ""])


class _StepClock:
    def __init__(self):
        self.last = time.perf_counter()
        self.times = []

    def __call__(self, _step):
        now = time.perf_counter()
        self.times.append(now - self.last)
        self.last = now


def run_bench(stepper, ports, mna_factory, n_steps, newton, workers=1, t_delta=2):
    """Time coupled, extraction and replay runs on one setup.

    ``mna_factory()`` must return a fresh circuit each call.
    Returns ``(report, coupled_result, replay_result, archive)``.
    """
    cmap = build_coupling(stepper.system, ports)
    clock = _StepClock()
    coupled = coupled_transient_solve(stepper, cmap, mna_factory(), n_steps, newton, callback=clock)
    t0 = time.perf_counter()
    archive = extract(stepper, cmap, n_steps + 1, t_delta=t_delta, workers=workers)
    t_ex = time.perf_counter() - t0
    rclock = _StepClock()
    mna = mna_factory()
    replay = replay_transient_solve(archive, mna, n_steps, newton, callback=rclock)
    n_ext_steps = cmap.n_ports * (t_delta + n_steps)
    report = CostReport(
        n_em=len(stepper.system.free),
        n_ckt=mna.size,
        n_p=cmap.n_ports,
        n_t=n_steps,
        newton_coupled=float(np.mean(coupled.newton_iters)),
        gmres_coupled=float(np.mean(coupled.gmres_iters)),
        gmres_extraction=archive.gmres_iters / max(n_ext_steps, 1),
        newton_replay=float(np.mean(replay.newton_iters)),
        coupled_step_times=clock.times,
        replay_step_times=rclock.times,
        extraction_time=t_ex,
    )
    return report, coupled, replay, archive
