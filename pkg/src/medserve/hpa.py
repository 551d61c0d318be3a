"""Replica autoscaler simulation over an offered-load trace.

The controller law mirrors a utilization-ratio horizontal autoscaler:
inside the tolerance band it holds; outside it requests
ceil(current * utilization / target) clamped to [min, max]. Scale-ups
add capacity only after a readiness delay; scale-downs apply only after
the lower desired value has held for a stabilization window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

TIMELINE_HEADER = "time_s,offered_rps,replicas,utilization,decision"

# Utilization is capped at this value in emitted timelines; a saturated
# fleet cannot report an unbounded measurement.
UTILIZATION_REPORT_CAP = 1.5


@dataclass(frozen=True)
class HPAConfig:
    min_replicas: int = 2
    max_replicas: int = 10
    target_utilization: float = 0.60
    tolerance: float = 0.10
    sync_period_s: float = 15.0
    scale_down_stabilization_s: float = 300.0

    def __post_init__(self) -> None:
        if not 1 <= self.min_replicas <= self.max_replicas:
            raise ValueError("need 1 <= min_replicas <= max_replicas")
        if self.target_utilization <= 0:
            raise ValueError("target_utilization must be positive")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")
        if self.sync_period_s <= 0:
            raise ValueError("sync_period_s must be positive")
        if self.scale_down_stabilization_s < 0:
            raise ValueError("scale_down_stabilization_s must be >= 0")


@dataclass(frozen=True)
class ReplicaPoolModel:
    per_replica_capacity_rps: float
    initial_replicas: int = 2
    readiness_delay_s: float = 10.0

    def __post_init__(self) -> None:
        if self.per_replica_capacity_rps <= 0:
            raise ValueError("per_replica_capacity_rps must be positive")
        if self.initial_replicas < 1:
            raise ValueError("initial_replicas must be >= 1")
        if self.readiness_delay_s < 0:
            raise ValueError("readiness_delay_s must be >= 0")


@dataclass(frozen=True)
class TimelineRow:
    time_s: float
    offered_rps: float
    replicas: int
    utilization: float
    decision: str


def desired_replicas(current: int, observed_util: float, cfg: HPAConfig) -> int:
    """The controller law for one observation."""
    if current < 1:
        raise ValueError("current must be >= 1")
    if observed_util < 0:
        raise ValueError("observed_util must be >= 0")
    ratio = observed_util / cfg.target_utilization
    if abs(ratio - 1.0) <= cfg.tolerance:
        return current
    # Round before ceil so float noise on an exact integer cannot bump it up.
    raw = math.ceil(round(current * ratio, 9))
    return max(cfg.min_replicas, min(cfg.max_replicas, raw))


def offered_at(trace: list[tuple[float, float]], t: float) -> float:
    """Step-function lookup: the most recent trace value at or before t."""
    value = 0.0
    for point_t, rps in trace:
        if point_t <= t:
            value = rps
        else:
            break
    return value


def simulate(
    trace: list[tuple[float, float]],
    pool: ReplicaPoolModel,
    cfg: HPAConfig,
    duration_s: float | None = None,
) -> list[TimelineRow]:
    """Run the controller over the trace at sync-period ticks.

    Bookkeeping model: `ordered` is the controller's target replica count,
    always within [min, max]; scale-ups become ready (add capacity) after
    readiness_delay_s; scale-downs remove capacity immediately.
    """
    if not trace:
        raise ValueError("trace must be non-empty")
    if sorted(t for t, _ in trace) != [t for t, _ in trace]:
        raise ValueError("trace times must be non-decreasing")
    if duration_s is None:
        duration_s = trace[-1][0] + 10 * cfg.sync_period_s

    ordered = max(cfg.min_replicas, min(cfg.max_replicas, pool.initial_replicas))
    pending_up: list[tuple[float, int]] = []  # (ready_at, count)
    ready = ordered
    pending_down: tuple[int, float] | None = None  # (desired, since)

    rows: list[TimelineRow] = []
    t = 0.0
    while t <= duration_s + 1e-9:
        ready += sum(n for ready_at, n in pending_up if ready_at <= t)
        pending_up = [(ready_at, n) for ready_at, n in pending_up if ready_at > t]

        offered = offered_at(trace, t)
        utilization = offered / (ready * pool.per_replica_capacity_rps)
        desired = desired_replicas(ordered, utilization, cfg)

        if desired > ordered:
            pending_down = None
            pending_up.append((t + pool.readiness_delay_s, desired - ordered))
            ordered = desired
            decision = f"up:{desired}"
        elif desired < ordered:
            if pending_down is None or pending_down[0] != desired:
                pending_down = (desired, t)
            if t - pending_down[1] >= cfg.scale_down_stabilization_s:
                removed = ordered - desired
                ordered = desired
                # Drop not-yet-ready replicas first, then ready ones.
                while removed > 0 and pending_up:
                    ready_at, n = pending_up.pop()
                    if n > removed:
                        pending_up.append((ready_at, n - removed))
                        removed = 0
                    else:
                        removed -= n
                ready -= removed
                pending_down = None
                decision = f"down:{desired}"
            else:
                decision = f"pending-down:{desired}"
        else:
            pending_down = None
            decision = "hold"

        rows.append(
            TimelineRow(
                time_s=t,
                offered_rps=offered,
                replicas=ordered,
                utilization=min(utilization, UTILIZATION_REPORT_CAP),
                decision=decision,
            )
        )
        t += cfg.sync_period_s
    return rows


def render_timeline_csv(rows: list[TimelineRow]) -> str:
    lines = [TIMELINE_HEADER]
    for r in rows:
        lines.append(
            f"{r.time_s:g},{r.offered_rps:g},{r.replicas},{r.utilization!r},{r.decision}"
        )
    return "\n".join(lines) + "\n"


def parse_timeline_csv(text: str) -> list[TimelineRow]:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines or lines[0] != TIMELINE_HEADER:
        raise ValueError(f"expected header {TIMELINE_HEADER!r}")
    rows = []
    for line in lines[1:]:
        time_s, offered, replicas, util, decision = line.split(",")
        rows.append(
            TimelineRow(float(time_s), float(offered), int(replicas), float(util), decision)
        )
    return rows


def emit_timeline(rows: list[TimelineRow], path: str | Path) -> Path:
    out = Path(path)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_timeline_csv(rows), encoding="utf-8")
    return out


def plot_timeline(rows: list[TimelineRow], path: str | Path) -> Path:
    """Replica count and observed utilization over time, one PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    times = [r.time_s for r in rows]
    fig, ax = plt.subplots(figsize=(7.0, 3.6))
    ax.step(times, [r.replicas for r in rows], where="post", label="replicas")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("replicas")
    ax.grid(True, alpha=0.3)
    ax2 = ax.twinx()
    ax2.step(
        times,
        [r.utilization for r in rows],
        where="post",
        color="tab:orange",
        label="utilization",
    )
    ax2.set_ylabel("utilization")
    lines, labels = ax.get_legend_handles_labels()
    lines2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(lines + lines2, labels + labels2, fontsize="small", loc="lower right")
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out
