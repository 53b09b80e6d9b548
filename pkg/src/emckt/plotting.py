"""Report figures (PNG, non-interactive backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "lines.linewidth": 1.1,
}
# fixed metadata keeps the PNG bytes reproducible
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def plot_waveforms(result, path, title=""):
    with plt.rc_context(RC):
        fig, (ax_v, ax_i) = plt.subplots(2, 1, sharex=True)
        t_ns = result.times * 1e9
        for k, q in enumerate(result.port_ids):
            ax_v.plot(t_ns, result.V[:, k], label=f"port {q}")
            ax_i.plot(t_ns, result.I[:, k] * 1e3, label=f"port {q}")
        ax_v.set_ylabel("V (V)")
        ax_i.set_ylabel("I (mA)")
        ax_i.set_xlabel("time (ns)")
        ax_v.legend(loc="upper right")
        if title:
            ax_v.set_title(title)
        return _save(fig, path)


def plot_compare(coupled, replay, path):
    with plt.rc_context(RC):
        fig, (ax, ax_e) = plt.subplots(2, 1, sharex=True)
        t_ns = coupled.times * 1e9
        for k, q in enumerate(coupled.port_ids):
            ax.plot(t_ns, coupled.V[:, k], label=f"coupled, port {q}")
            ax.plot(t_ns, replay.V[:, k], "--", label=f"replay, port {q}")
            diff = np.abs(coupled.V[:, k] - replay.V[:, k])
            ax_e.semilogy(t_ns, np.maximum(diff, 1e-300), label=f"port {q}")
        ax.set_ylabel("port voltage (V)")
        ax_e.set_ylabel("|difference| (V)")
        ax_e.set_xlabel("time (ns)")
        ax.legend(loc="upper right")
        return _save(fig, path)


def plot_spectrum(freqs, Y, valid, path, label="port"):
    with plt.rc_context(RC):
        fig, (ax_m, ax_p) = plt.subplots(2, 1, sharex=True)
        f = np.asarray(freqs) * 1e-9
        ax_m.plot(f[valid], np.abs(Y[valid]), label=label)
        ax_p.plot(f[valid], np.degrees(np.angle(Y[valid])))
        ax_m.set_ylabel("|Y| (S)")
        ax_p.set_ylabel("arg Y (deg)")
        ax_p.set_xlabel("frequency (GHz)")
        ax_m.legend(loc="upper right")
        return _save(fig, path)


def plot_cumulative(t_coupled, t_replay, path, t_extract=0.0):
    """Cumulative wall time against step index for both solution paths."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        steps = np.arange(1, len(t_coupled) + 1)
        ax.plot(steps, np.cumsum(t_coupled), label="fully coupled")
        ax.plot(np.arange(1, len(t_replay) + 1), np.cumsum(t_replay), label="port replay")
        if t_extract:
            ax.plot(np.arange(1, len(t_replay) + 1), t_extract + np.cumsum(t_replay), ":",
                    label="replay + extraction")
        ax.set_xlabel("time step")
        ax.set_ylabel("cumulative wall time (s)")
        ax.legend(loc="upper left")
        return _save(fig, path)
