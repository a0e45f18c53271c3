"""Figure rendering: SVG files with byte-stable output.

All figures go through one save path that pins the SVG hash salt and
strips the date metadata, so regenerating a plot from identical data
produces identical bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_RC = {
    "svg.hashsalt": "ctbench",
    "figure.figsize": (6.4, 4.2),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.3,
    "legend.framealpha": 0.9,
}

METHOD_COLORS = {
    "MBIR": "#333333",
    "FBP": "#d62728",
    "DL-MBIR_1": "#1f77b4",
    "DL-MBIR_3": "#2ca02c",
    "DL-MBIR_5": "#9467bd",
}

TRUTH_COLOR = "#999999"


def _color(label):
    return METHOD_COLORS.get(label, "#7f7f7f")


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def psnr_per_slice(report, path, data_range_note=True):
    """One line per method over consecutive test slices (reference skipped)."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        methods = [m for m in report.methods() if m != "MBIR"]
        for method in methods:
            rows = [r for r in report.rows if r[1] == method]
            ax.plot(range(len(rows)), [r[3] for r in rows],
                    color=_color(method), marker="o", markersize=3, label=method)
        ax.set_xlabel("test slice (consecutive)")
        ax.set_ylabel("PSNR vs MBIR [dB]")
        title = "Per-slice PSNR against the MBIR reference"
        if data_range_note:
            title += " (fixed data range)"
        ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def nps_overlay(profiles, path):
    """Radial NPS profiles, one line per method label."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for label, prof in profiles.items():
            ax.plot(prof.bin_centers, prof.power, color=_color(label), label=label)
        ax.set_xlabel("spatial frequency [cycles/mm]")
        ax.set_ylabel("NPS [HU$^2$ mm$^2$]")
        ax.set_title("Radial noise power spectrum (uniform ROI)")
        ax.legend()
        return _save(fig, path)


def profile_overlay(series, path, row_label=""):
    """Line profiles: series maps label -> (positions mm, values HU)."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for label, (pos, vals) in series.items():
            color = TRUTH_COLOR if label == "truth" else _color(label)
            style = "--" if label == "truth" else "-"
            ax.plot(pos, vals, style, color=color, label=label)
        ax.set_xlabel("position [mm]")
        ax.set_ylabel("HU")
        title = "Line profile"
        if row_label:
            title += f" ({row_label})"
        ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def loss_curves(curves, path):
    """Training loss per epoch; curves maps label -> 1D array."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        for label, curve in curves.items():
            ax.semilogy(range(1, len(curve) + 1), curve, label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean training loss [(HU/1000)$^2$]")
        ax.set_title("Training loss")
        ax.legend()
        return _save(fig, path)
