"""Figures for metrics CSVs: median gradient norm vs rounds and vs uplink bits."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from effadam.experiment import MetricsRow  # noqa: E402


def median_traces(rows: Sequence[MetricsRow]) -> dict[str, dict[str, np.ndarray]]:
    """Per algorithm: rounds, median grad_norm_sq across runs, median uplink bits.

    Runs of one algorithm are truncated to the shortest run.
    """
    runs: dict[str, dict[str, list[MetricsRow]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        runs[r.algo][r.run_id].append(r)
    out = {}
    for algo, by_run in runs.items():
        series = [sorted(v, key=lambda r: r.t) for v in by_run.values()]
        n = min(len(s) for s in series)
        gns = np.array([[r.grad_norm_sq for r in s[:n]] for s in series])
        bits = np.array([[r.uplink_bits_cum for r in s[:n]] for s in series], dtype=float)
        out[algo] = {
            "t": np.array([r.t for r in series[0][:n]]),
            "grad_norm_sq": np.median(gns, axis=0),
            "uplink_bits": np.median(bits, axis=0),
        }
    return out


def render(rows: Sequence[MetricsRow], out_dir, stem: str = "grad_norm") -> list[Path]:
    """Write ``<stem>_iterations.png`` and ``<stem>_bits.png``; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    traces = median_traces(rows)
    paths = []
    for xkey, xlabel, suffix in (("t", "iterations", "iterations"), ("uplink_bits", "uplink bits", "bits")):
        fig, ax = plt.subplots(figsize=(6, 4))
        for algo in sorted(traces):
            tr = traces[algo]
            ax.plot(tr[xkey], tr["grad_norm_sq"], label=algo, linewidth=1.2)
        ax.set_yscale("log")
        if xkey == "uplink_bits":
            ax.set_xscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(r"median $\|\nabla F(x_t)\|^2$")
        ax.legend(fontsize=8)
        ax.grid(True, which="both", alpha=0.3)
        fig.tight_layout()
        path = out_dir / f"{stem}_{suffix}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths
