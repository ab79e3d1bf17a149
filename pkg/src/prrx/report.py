"""Figures and a delimited summary from a run or sweep directory."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import qpsk_theory_ber, write_csv  # noqa: E402


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _columns(path: Path) -> dict[str, np.ndarray]:
    header, rows = _read_csv(path)
    out = {}
    for i, name in enumerate(header):
        try:
            out[name] = np.array([float(r[i]) if r[i] != "" else np.nan for r in rows])
        except ValueError:
            out[name] = np.array([r[i] for r in rows])
    return out


def plot_convergence(run_dir: Path) -> Path:
    c = _columns(run_dir / "convergence_summary.csv")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(c["iteration"], c["median_db"], label="median over blocks")
    ax.plot(c["iteration"], c["mean_db"], label="mean over blocks", alpha=0.7)
    ax.axhline(-30, color="k", ls=":", lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean A_err (dB)")
    ax.legend()
    fig.tight_layout()
    path = run_dir / "convergence.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_constellation(run_dir: Path) -> Path:
    c = _columns(run_dir / "constellation.csv")
    pols = np.unique(c["polarization"]).astype(int)
    fig, axes = plt.subplots(1, len(pols), figsize=(3.5 * len(pols), 3.5), squeeze=False)
    for ax, p in zip(axes[0], pols):
        sel = c["polarization"] == p
        ax.plot(c["re"][sel], c["im"][sel], ".", ms=1.5)
        ax.set_title("XY"[p] if len(pols) == 2 else "recovered")
        ax.set_aspect("equal")
        ax.set_xlim(-1.6, 1.6)
        ax.set_ylim(-1.6, 1.6)
    fig.tight_layout()
    path = run_dir / "constellation.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_phase_error(run_dir: Path) -> Path:
    c = _columns(run_dir / "phase_error.csv")
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(c["sample"], c["phase_error_rad"])
    ax.set_xlabel("sample")
    ax.set_ylabel("phase error (rad)")
    ax.set_ylim(-np.pi, np.pi)
    fig.tight_layout()
    path = run_dir / "phase_error.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_channel(run_dir: Path) -> Path:
    c = _columns(run_dir / "channel_response.csv")
    f = c.pop("frequency_hz") / 1e9
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, v in c.items():
        ax.plot(f, v, label="|H_" + name.rsplit("_", 1)[-1] + "|^2")
    ax.set_xlabel("frequency (GHz)")
    ax.set_ylabel("dB")
    ax.legend()
    fig.tight_layout()
    path = run_dir / "channel_response.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_ber_vs_osnr(sweep_dir: Path, baud: float, n_pol: int) -> Path:
    c = _columns(sweep_dir / "ber_vs_osnr.csv")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for pf in np.unique(c["pilot_fraction"]):
        sel = (c["pilot_fraction"] == pf) & (c["ber"] > 0)
        order = np.argsort(c["osnr_db"][sel])
        ax.semilogy(c["osnr_db"][sel][order], c["ber"][sel][order], "o-", label=f"{pf:.0%} pilots")
    grid = np.linspace(np.nanmin(c["osnr_db"]) - 1, np.nanmax(c["osnr_db"]) + 1, 200)
    ax.semilogy(grid, qpsk_theory_ber(grid, baud, n_pol), "k--", label="theory")
    ax.axhline(2e-2, color="gray", ls=":", lw=0.8)
    ax.set_xlabel("OSNR (dB / 0.1 nm)")
    ax.set_ylabel("BER")
    ax.set_ylim(1e-5, 0.5)
    ax.legend()
    fig.tight_layout()
    path = sweep_dir / "ber_vs_osnr.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _flat(prefix: str, obj, out: list):
    if isinstance(obj, dict):
        for k in sorted(obj):
            _flat(f"{prefix}.{k}" if prefix else k, obj[k], out)
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _flat(f"{prefix}[{i}]", v, out)
    else:
        out.append((prefix, "" if obj is None else obj))


def report(directory) -> tuple[list[Path], list[tuple[str, object]]]:
    """Render figures for a run or sweep directory.

    Returns the figure paths and ``(key, value)`` rows, which are also
    written to ``report.csv``.
    """
    d = Path(directory)
    figures: list[Path] = []
    rows: list[tuple[str, object]] = []
    if (d / "sweep.json").exists():
        summary = json.loads((d / "sweep.json").read_text())
        cfg = summary["config"]
        if (d / "ber_vs_osnr.csv").exists():
            figures.append(plot_ber_vs_osnr(d, cfg["tx"]["baud"], cfg["tx"]["n_polarizations"]))
        _flat("", {k: summary[k] for k in ("name", "points", "failed", "osnr_penalty_db_at_2e-2")
                   if k in summary}, rows)
        header, body = _read_csv(d / "summary.csv")
        for r in body:
            for h, v in zip(header[1:], r[1:]):
                rows.append((f"point[{r[0]}].{h}", v))
    elif (d / "manifest.json").exists():
        man = json.loads((d / "manifest.json").read_text())
        for name, fn in (("convergence_summary.csv", plot_convergence),
                         ("constellation.csv", plot_constellation),
                         ("phase_error.csv", plot_phase_error),
                         ("channel_response.csv", plot_channel)):
            if (d / name).exists():
                figures.append(fn(d))
        _flat("", {"name": man["name"], "status": man["status"], "metrics": man["metrics"]}, rows)
    else:
        raise FileNotFoundError(f"{d} holds neither manifest.json nor sweep.json")
    write_csv(d / "report.csv", ["key", "value"], rows)
    return figures, rows
