"""Benchmark report emission: CSV, markdown, histogram data, and figures.

Every report directory gets the delimited results plus rendered matplotlib
charts, so a finished run is readable both by gnuplot/pandas and by eye.
"""

from __future__ import annotations

import math
from pathlib import Path

from .loadgen import RunReport

CSV_HEADER = "framework_mode,batch,users,p50,p95,rps"

# Published-scale numbers the synthetic cost models were calibrated against;
# shown beside the 100-user rows so trend drift is obvious at a glance.
CALIBRATION_TARGETS: dict[tuple[str, int], tuple[float, float, float]] = {
    ("cpu-like", 1): (22.0, 45.0, 450.0),
    ("gpu-like", 1): (28.0, 52.0, 420.0),
    ("gpu-like", 16): (34.0, 60.0, 780.0),
}

HIST_BIN_MS = 2.0


def render_csv(reports: list[RunReport]) -> str:
    lines = [CSV_HEADER]
    for r in reports:
        lines.append(
            f"{r.label},{r.batch},{r.users},{r.p50_ms:.3f},{r.p95_ms:.3f},{r.throughput_rps:.3f}"
        )
    return "\n".join(lines) + "\n"


def render_markdown(reports: list[RunReport]) -> str:
    lines = [
        "# Load test results",
        "",
        "| framework_mode | batch | users | p50 ms | p95 ms | rps | target p50/p95/rps |",
        "|---|---|---|---|---|---|---|",
    ]
    for r in reports:
        target = ""
        if r.users == 100 and (r.label, r.batch) in CALIBRATION_TARGETS:
            t50, t95, trps = CALIBRATION_TARGETS[(r.label, r.batch)]
            target = f"{t50:g} / {t95:g} / {trps:g}"
        lines.append(
            f"| {r.label} | {r.batch} | {r.users} | {r.p50_ms:.1f} | {r.p95_ms:.1f} "
            f"| {r.throughput_rps:.1f} | {target} |"
        )
    lines += [
        "",
        "Targets are the published-scale measurements the synthetic cost models",
        "were calibrated against; expect matching trends, not matching numbers.",
        "",
    ]
    return "\n".join(lines)


def render_histogram_dat(reports: list[RunReport]) -> str:
    """Latency histograms as gnuplot-friendly blocks (one index per run)."""
    blocks = []
    for r in reports:
        ok = sorted(s.latency_ms for s in r.samples if s.outcome == "ok")
        lines = [f"# {r.label} batch={r.batch} users={r.users} (bin_left_ms count)"]
        if ok:
            top = ok[-1]
            bins = max(1, int(math.ceil((top + 1e-9) / HIST_BIN_MS)))
            counts = [0] * bins
            for v in ok:
                counts[min(bins - 1, int(v / HIST_BIN_MS))] += 1
            for b, count in enumerate(counts):
                lines.append(f"{b * HIST_BIN_MS:.1f} {count}")
        blocks.append("\n".join(lines))
    return "\n\n\n".join(blocks) + "\n"


def _render_figures(reports: list[RunReport], out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series: dict[tuple[str, int], list[RunReport]] = {}
    for r in reports:
        series.setdefault((r.label, r.batch), []).append(r)
    for runs in series.values():
        runs.sort(key=lambda r: r.users)

    written = []

    fig, (ax50, ax95) = plt.subplots(1, 2, figsize=(9.0, 3.6), sharex=True)
    for (label, batch), runs in sorted(series.items()):
        users = [r.users for r in runs]
        name = f"{label} B={batch}"
        ax50.plot(users, [r.p50_ms for r in runs], marker="o", label=name)
        ax95.plot(users, [r.p95_ms for r in runs], marker="o", label=name)
    for ax, title in ((ax50, "p50 latency"), (ax95, "p95 latency")):
        ax.set_title(title)
        ax.set_xlabel("concurrent users")
        ax.set_ylabel("ms")
        ax.grid(True, alpha=0.3)
    ax50.legend(fontsize="small")
    fig.tight_layout()
    path = out / "latency.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    for (label, batch), runs in sorted(series.items()):
        ax.plot(
            [r.users for r in runs],
            [r.throughput_rps for r in runs],
            marker="o",
            label=f"{label} B={batch}",
        )
    ax.set_xlabel("concurrent users")
    ax.set_ylabel("ok responses / s")
    ax.set_title("throughput")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    path = out / "throughput.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(path)
    return written


def emit_report(reports: list[RunReport], out_dir: str | Path) -> dict[str, Path]:
    """Write results.csv, results.md, latency_hist.dat, and the charts."""
    if not reports:
        raise ValueError("emit_report requires at least one run report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "csv": out / "results.csv",
        "md": out / "results.md",
        "dat": out / "latency_hist.dat",
    }
    files["csv"].write_text(render_csv(reports), encoding="utf-8")
    files["md"].write_text(render_markdown(reports), encoding="utf-8")
    files["dat"].write_text(render_histogram_dat(reports), encoding="utf-8")
    for i, fig_path in enumerate(_render_figures(reports, out)):
        files[f"figure_{i}"] = fig_path
    return files
