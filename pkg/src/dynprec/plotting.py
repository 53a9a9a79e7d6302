"""PNG figures for the report command (matplotlib, headless)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings in the files, so reruns are byte-identical
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def tokens_per_frame(frames, counts, path, title="Active tokens per frame") -> None:
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(frames, counts, lw=0.8)
    ax.set_xlabel("frame")
    ax.set_ylabel("tokens")
    ax.set_title(title)
    _save(fig, path)


def token_cdf(series: dict[str, tuple[np.ndarray, np.ndarray]], path) -> None:
    """``series`` maps a label to (token counts, cumulative frequency)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, (x, y) in series.items():
        ax.step(x, y, where="post", label=label)
    ax.set_xlabel("tokens per frame")
    ax.set_ylabel("cumulative frequency")
    ax.set_ylim(0, 1.01)
    ax.legend()
    _save(fig, path)


def threshold_trace(frames, thresholds, counts, path) -> None:
    fig, ax = plt.subplots(figsize=(8, 3))
    ax.plot(frames, counts, lw=0.4, color="0.7", label="tokens")
    ax.plot(frames, thresholds, lw=1.2, color="C3", label="threshold")
    ax.set_xlabel("frame")
    ax.legend(loc="upper right")
    _save(fig, path)


def half_ratio_histogram(edges, counts, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", edgecolor="black")
    ax.set_xlabel("share of frames at half precision")
    ax.set_ylabel("utterances")
    _save(fig, path)


def sweep_curve(rows: list[dict], path) -> None:
    targets = [float(r["target"]) for r in rows]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(targets, [100 * float(r["wer"]) for r in rows], "o-", color="C0")
    ax1.set_xlabel("half-precision target")
    ax1.set_ylabel("WER (%)", color="C0")
    ax2 = ax1.twinx()
    ax2.plot(targets, [100 * float(r["am_energy_saving"]) for r in rows], "s--", color="C1")
    ax2.set_ylabel("AM energy saving (%)", color="C1")
    _save(fig, path)
