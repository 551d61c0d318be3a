"""Autoscaler law, timeline simulation, and its CSV/plot outputs."""

import random
import subprocess
import sys

import pytest

from medserve.hpa import (
    HPAConfig,
    ReplicaPoolModel,
    TIMELINE_HEADER,
    desired_replicas,
    emit_timeline,
    offered_at,
    parse_timeline_csv,
    plot_timeline,
    render_timeline_csv,
    simulate,
)
from oracles import hpa_replicas


# -- controller law ----------------------------------------------------------------

def test_desired_replicas_frozen_examples():
    cfg = HPAConfig()  # target 0.60, tolerance 0.10, bounds [2, 10]
    assert desired_replicas(2, 0.60, cfg) == 2  # on target: hold
    assert desired_replicas(2, 1.20, cfg) == 4  # ratio 2.0: double
    assert desired_replicas(8, 0.90, cfg) == 10  # wants 12, clamps to max


def test_desired_replicas_tolerance_band_is_inclusive():
    assert desired_replicas(4, 0.64, HPAConfig()) == 4  # ratio 1.067, inside 0.10
    assert desired_replicas(4, 0.70, HPAConfig()) == 5  # ratio 1.167, outside

    # exactly-representable edge values so the boundary comparison is exact
    cfg = HPAConfig(target_utilization=0.5, tolerance=0.25)
    assert desired_replicas(4, 0.625, cfg) == 4  # ratio 1.25, on the upper edge
    assert desired_replicas(4, 0.375, cfg) == 4  # ratio 0.75, on the lower edge
    assert desired_replicas(4, 0.63, cfg) == 6  # ratio 1.26: ceil(5.04)
    assert desired_replicas(4, 0.37, cfg) == 3  # ratio 0.74: ceil(2.96)


def test_desired_replicas_rounds_before_ceiling():
    # 2.1 / 0.7 lands a hair above 3.0 in floats; a bare ceil would give 4
    cfg = HPAConfig(min_replicas=1, max_replicas=100, target_utilization=0.7)
    assert desired_replicas(1, 2.1, cfg) == 3


def test_desired_replicas_clamps_to_bounds():
    cfg = HPAConfig()
    assert desired_replicas(5, 0.0, cfg) == 2  # idle fleet still keeps the floor
    assert desired_replicas(9, 6.0, cfg) == 10


def test_desired_replicas_input_validation():
    cfg = HPAConfig()
    with pytest.raises(ValueError):
        desired_replicas(0, 0.5, cfg)
    with pytest.raises(ValueError):
        desired_replicas(2, -0.1, cfg)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"min_replicas": 5, "max_replicas": 2},
        {"min_replicas": 0},
        {"target_utilization": 0.0},
        {"tolerance": -0.1},
        {"sync_period_s": 0.0},
        {"scale_down_stabilization_s": -1.0},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        HPAConfig(**kwargs)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"per_replica_capacity_rps": 0.0},
        {"per_replica_capacity_rps": 100.0, "initial_replicas": 0},
        {"per_replica_capacity_rps": 100.0, "readiness_delay_s": -1.0},
    ],
)
def test_pool_validation(kwargs):
    with pytest.raises(ValueError):
        ReplicaPoolModel(**kwargs)


def test_offered_at_is_a_step_function():
    trace = [(10.0, 100.0), (60.0, 400.0)]
    assert offered_at(trace, 0.0) == 0.0
    assert offered_at(trace, 10.0) == 100.0
    assert offered_at(trace, 59.9) == 100.0
    assert offered_at(trace, 60.0) == 400.0
    assert offered_at(trace, 1e9) == 400.0


# -- simulation timelines ------------------------------------------------------------

def test_step_trace_converges_and_holds():
    # 100 -> 400 rps at t=60 against 100 rps replicas: 400/(0.6*100) wants 7
    rows = simulate(
        [(0.0, 100.0), (60.0, 400.0)],
        ReplicaPoolModel(per_replica_capacity_rps=100.0, initial_replicas=2),
        HPAConfig(),
        duration_s=600.0,
    )
    assert [r.time_s for r in rows[:5]] == [0.0, 15.0, 30.0, 45.0, 60.0]
    assert all(r.replicas == 2 and r.decision == "hold" for r in rows[:4])

    step = rows[4]
    assert step.decision == "up:7"
    assert step.replicas == 7
    assert step.utilization == 1.5  # true value is 2.0; report caps saturation

    assert all(r.replicas == 7 and r.decision == "hold" for r in rows[5:])


def test_scale_down_waits_for_stabilization_and_respects_floor():
    rows = simulate(
        [(0.0, 400.0), (100.0, 50.0)],
        ReplicaPoolModel(per_replica_capacity_rps=100.0, initial_replicas=2),
        HPAConfig(),
        duration_s=450.0,
    )
    by_time = {r.time_s: r for r in rows}
    assert by_time[0.0].decision == "up:7"
    assert by_time[105.0].decision == "pending-down:2"
    # the order stays in force for the whole stabilization window
    assert all(by_time[t].replicas == 7 for t in range(105, 405, 15))
    assert by_time[405.0].decision == "down:2"
    assert by_time[405.0].replicas == 2
    assert by_time[420.0].decision == "hold"
    assert all(r.replicas >= 2 for r in rows)


def test_pending_scale_down_timer_resets_when_target_moves():
    cfg = HPAConfig(
        min_replicas=1,
        max_replicas=20,
        target_utilization=0.5,
        tolerance=0.0,
        sync_period_s=10.0,
        scale_down_stabilization_s=30.0,
    )
    pool = ReplicaPoolModel(
        per_replica_capacity_rps=10.0, initial_replicas=10, readiness_delay_s=0.0
    )
    rows = simulate([(0.0, 30.0), (20.0, 20.0)], pool, cfg, duration_s=50.0)
    assert [r.decision for r in rows] == [
        "pending-down:6",
        "pending-down:6",
        "pending-down:4",  # new lower target restarts the clock
        "pending-down:4",
        "pending-down:4",
        "down:4",
    ]
    assert [r.replicas for r in rows] == [10, 10, 10, 10, 10, 4]


def test_simulate_rejects_bad_traces():
    pool = ReplicaPoolModel(per_replica_capacity_rps=100.0)
    with pytest.raises(ValueError):
        simulate([], pool, HPAConfig())
    with pytest.raises(ValueError):
        simulate([(10.0, 1.0), (5.0, 2.0)], pool, HPAConfig())


def test_simulate_matches_reference_on_random_traces():
    rng = random.Random(0x5CA1E)
    for _ in range(100):
        capacity = rng.choice([50.0, 100.0, 200.0])
        initial = rng.randint(1, 6)
        readiness = rng.choice([0.0, 10.0, 30.0])
        min_r = rng.randint(1, 3)
        max_r = min_r + rng.randint(1, 12)
        target = rng.choice([0.5, 0.6, 0.75])
        tolerance = rng.choice([0.0, 0.1, 0.2])
        sync = rng.choice([5.0, 15.0])
        stab = rng.choice([0.0, 30.0, 120.0])
        trace = [(0.0, rng.uniform(0.0, 1200.0))] + [
            (t, rng.uniform(0.0, 1200.0))
            for t in sorted(rng.uniform(0.0, 400.0) for _ in range(rng.randint(1, 8)))
        ]
        cfg = HPAConfig(min_r, max_r, target, tolerance, sync, stab)
        pool = ReplicaPoolModel(capacity, initial, readiness)

        rows = simulate(trace, pool, cfg, duration_s=450.0)
        expected = hpa_replicas(
            trace, capacity, initial, readiness,
            min_r, max_r, target, tolerance, sync, stab, 450.0,
        )
        assert [r.replicas for r in rows] == expected, (
            f"capacity={capacity} initial={initial} readiness={readiness} "
            f"bounds=[{min_r},{max_r}] target={target} tol={tolerance} "
            f"sync={sync} stab={stab} trace={trace}"
        )


# -- timeline files ------------------------------------------------------------------

def step_rows():
    return simulate(
        [(0.0, 100.0), (60.0, 400.0)],
        ReplicaPoolModel(per_replica_capacity_rps=100.0, initial_replicas=2),
        HPAConfig(),
        duration_s=150.0,
    )


def test_timeline_csv_round_trip():
    rows = step_rows()
    text = render_timeline_csv(rows)
    assert text.splitlines()[0] == TIMELINE_HEADER == "time_s,offered_rps,replicas,utilization,decision"
    assert parse_timeline_csv(text) == rows


def test_timeline_csv_rejects_wrong_header():
    with pytest.raises(ValueError, match="header"):
        parse_timeline_csv("nope\n1,2,3,4,hold\n")


def test_emit_timeline_and_plot(tmp_path):
    rows = step_rows()
    csv_path = emit_timeline(rows, tmp_path / "out" / "timeline.csv")
    assert csv_path.read_text(encoding="utf-8").startswith(TIMELINE_HEADER)
    png_path = plot_timeline(rows, tmp_path / "out" / "timeline.png")
    assert png_path.stat().st_size > 0


def test_hpasim_cli_writes_timeline_and_plot(tmp_path):
    trace = tmp_path / "trace.csv"
    trace.write_text("time_s,offered_rps\n0,100\n60,400\n", encoding="utf-8")
    out = tmp_path / "timeline.csv"
    plot = tmp_path / "timeline.png"
    proc = subprocess.run(
        [
            sys.executable, "-m", "medserve", "hpasim",
            "--trace", str(trace),
            "--capacity-rps", "100",
            "--duration", "150",
            "--out", str(out),
            "--plot", str(plot),
        ],
        capture_output=True,
        text=True,
        timeout=60,
    )
    assert proc.returncode == 0, proc.stderr
    rows = parse_timeline_csv(out.read_text(encoding="utf-8"))
    assert rows == step_rows()
    assert plot.stat().st_size > 0
