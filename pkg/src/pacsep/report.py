"""Evaluation and training reports: delimited text plus rendered figures.

Every report path writes machine-readable output (TSV + key-value) and
matplotlib PNGs next to it.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import SdrReport, median_over_tracks
from .training import TrainLog


def write_sdr_report(
    out_dir: str | Path,
    per_source: dict[str, list[SdrReport]],
    frame_seconds: float,
) -> dict[str, float | None]:
    """Write report.tsv / report.kv / figures for per-track SDR reports.

    Returns the per-source median-of-medians in dB.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    medians: dict[str, float | None] = {}
    tsv_lines = []
    kv_lines = [f"frame_seconds = {frame_seconds}"]
    for source, reports in per_source.items():
        med = median_over_tracks(reports)
        medians[source] = med
        frames = sum(r.n_frames for r in reports)
        med_text = f"{med:.4f}" if med is not None else "no-voiced-frames"
        tsv_lines.append(f"{source}\t{med_text}\t{frames}")
        kv_lines.append(f"sdr_median.{source} = {med_text}")
        kv_lines.append(f"frames.{source} = {frames}")
    (out / "report.tsv").write_text("\n".join(tsv_lines) + "\n", encoding="utf-8")
    (out / "report.kv").write_text("\n".join(kv_lines) + "\n", encoding="utf-8")
    _render_sdr_figures(out, per_source, medians, frame_seconds)
    return medians


def _render_sdr_figures(
    out: Path,
    per_source: dict[str, list[SdrReport]],
    medians: dict[str, float | None],
    frame_seconds: float,
) -> None:
    sources = list(per_source)
    fig, axes = plt.subplots(
        len(sources), 1, figsize=(8, 2.4 * len(sources)), squeeze=False, sharex=True
    )
    for ax, source in zip(axes[:, 0], sources):
        for i, rep in enumerate(per_source[source]):
            t = np.arange(rep.n_frames) * frame_seconds
            ax.plot(t, rep.frame_sdr, alpha=0.7, label=f"track {i}")
        ax.set_ylabel(f"{source}\nSDR (dB)")
        ax.grid(True, alpha=0.3)
    axes[-1, 0].set_xlabel("time (s)")
    fig.suptitle("Framewise SDR per source")
    fig.tight_layout()
    fig.savefig(out / "sdr_frames.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    names = [s for s in sources if medians[s] is not None]
    values = [medians[s] for s in names]
    ax.bar(names, values, color="tab:blue")
    ax.set_ylabel("median SDR (dB)")
    ax.set_title("Median of per-track medians")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out / "sdr_summary.png", dpi=120)
    plt.close(fig)


def write_train_report(out_dir: str | Path, log: TrainLog, stage: str) -> None:
    """Loss/accuracy curves and a TSV digest of a training log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps = [r["step"] for r in log.records]
    losses = [r["loss"] for r in log.records]
    lines = ["step\tloss"] + [f"{s}\t{v:.6g}" for s, v in zip(steps, losses)]
    (out / "train_curve.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(steps, losses, lw=0.8, label="train loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(f"{stage} loss")
    ax.grid(True, alpha=0.3)
    if log.validations:
        vsteps = [v["step"] for v in log.validations]
        key = "masked_accuracy" if "masked_accuracy" in log.validations[0] else "l1"
        vvals = [v[key] for v in log.validations]
        ax2 = ax.twinx()
        ax2.plot(vsteps, vvals, "o-", color="tab:orange", label=f"valid {key}")
        ax2.set_ylabel(f"validation {key}")
    fig.tight_layout()
    fig.savefig(out / "train_curve.png", dpi=120)
    plt.close(fig)
