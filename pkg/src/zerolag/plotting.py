"""Matplotlib figures written next to the JSON reports (Agg backend, PNG only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps the PNG bytes stable between runs
_PNG_META = {"Software": None}


def figure_path(report_path, suffix: str) -> Path:
    p = Path(report_path)
    return p.with_name(f"{p.stem}_{suffix}.png")


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_simulation(report: dict, path) -> Path:
    recs = report["records"]
    ticks = [r["tick"] for r in recs]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    ax1.plot(ticks, [r["ms_ssim_compensated"] for r in recs], "o-", label="compensated", ms=3)
    ax1.plot(ticks, [r["ms_ssim_stale"] for r in recs], "s--", label="stale frame", ms=3)
    ax1.set_ylabel("MS-SSIM")
    ax1.legend(loc="lower left")
    ax2.step(ticks, [r["k"] for r in recs], where="mid", label="k")
    ax2.plot(ticks, [r["delay_ms"] for r in recs], alpha=0)  # keeps x-range when records are sparse
    ax2.set_ylabel("horizon k")
    ax2.set_xlabel("display tick")
    fig.suptitle(f"latency compensation ({report['config']['method']}, {report['config']['fps']} fps)")
    return _save(fig, path)


def plot_flops(report: dict, path) -> Path:
    per_k = report["per_k"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([e["k"] for e in per_k], [e["gflops"] for e in per_k], "o-")
    ax.set_xlabel("k")
    ax.set_ylabel("GFLOPs per prediction")
    ax.set_title(f"{report['strategy']} at {report['resolution'][0]}x{report['resolution'][1]}")
    ax.set_ylim(bottom=0)
    return _save(fig, path)


def plot_block_flops(table: list[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = [row["block"] for row in table]
    ax.bar(names, [row["flops_per_c2hw"] for row in table])
    ax.set_ylabel("FLOPs / (c^2 h w)")
    ax.tick_params(axis="x", labelrotation=20)
    return _save(fig, path)


def plot_losses(report: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    log = report["log"]
    if log.get("per_model"):
        for i, sub in enumerate(log["per_model"], start=1):
            ax.plot(range(1, len(sub["epoch_losses"]) + 1), sub["epoch_losses"], label=f"k={i}")
        ax.legend()
    else:
        ax.plot(range(1, len(log["epoch_losses"]) + 1), log["epoch_losses"], "o-")
    ax.set_xlabel("epoch")
    ax.set_ylabel("Laplacian L1 loss")
    ax.set_title(f"training ({log['method']})")
    return _save(fig, path)


def plot_eval(report: dict, path) -> Path:
    frames = report["frames"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(range(len(frames)), [f["ms_ssim"] for f in frames], "o-", ms=3)
    ax.set_xlabel("frame")
    ax.set_ylabel("MS-SSIM")
    ax.set_ylim(top=1.0)
    return _save(fig, path)
