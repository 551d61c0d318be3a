"""Benchmark matrix: serving configurations crossed with user counts.

Each cell launches a fresh server subprocess with its own registry and batch
policy, sweeps the configured user counts against it, and contributes one
report row per (cell, users) pair. The default matrix is three cells, so a
full run yields nine rows.
"""

from __future__ import annotations

import asyncio
import json
import re
import subprocess
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

from .loadgen import LoadgenError, LoadProfile, RunReport, run_closed_loop
from .report import emit_report
from .runtime import COST_MODELS, write_model_dir

DEFAULT_CORPUS_TEXTS = (
    "patient is stable and improving, vitals good",
    "condition critical, response poor, outlook worse",
    "follow-up shows excellent progress and good recovery",
    "reports painful swelling and declining mobility",
    "no change since last visit",
)


@dataclass(frozen=True)
class MatrixCell:
    framework_mode: str  # cost model name; doubles as the report label
    batch_max_size: int
    batch_max_delay_ms: float
    executors: int = 4


DEFAULT_CELLS = (
    MatrixCell("cpu-like", 1, 0.0),
    MatrixCell("gpu-like", 1, 0.0),
    MatrixCell("gpu-like", 16, 5.0),
)


@dataclass(frozen=True)
class MatrixConfig:
    cells: tuple[MatrixCell, ...] = DEFAULT_CELLS
    users: tuple[int, ...] = (10, 50, 100)
    duration_s: float = 60.0
    warmup_s: float = 5.0
    corpus_texts: tuple[str, ...] = DEFAULT_CORPUS_TEXTS
    model: str = "sentiment"


def default_config_json() -> str:
    cfg = MatrixConfig()
    return json.dumps(
        {
            "users": list(cfg.users),
            "duration_s": cfg.duration_s,
            "warmup_s": cfg.warmup_s,
            "model": cfg.model,
            "corpus_texts": list(cfg.corpus_texts),
            "cells": [
                {
                    "framework_mode": c.framework_mode,
                    "batch_max_size": c.batch_max_size,
                    "batch_max_delay_ms": c.batch_max_delay_ms,
                    "executors": c.executors,
                }
                for c in cfg.cells
            ],
        },
        indent=2,
    )


def load_matrix_config(path: str | Path) -> MatrixConfig:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    cells = tuple(
        MatrixCell(
            framework_mode=c["framework_mode"],
            batch_max_size=int(c["batch_max_size"]),
            batch_max_delay_ms=float(c["batch_max_delay_ms"]),
            executors=int(c.get("executors", 4)),
        )
        for c in raw.get("cells", [])
    ) or DEFAULT_CELLS
    return MatrixConfig(
        cells=cells,
        users=tuple(int(u) for u in raw.get("users", (10, 50, 100))),
        duration_s=float(raw.get("duration_s", 60.0)),
        warmup_s=float(raw.get("warmup_s", 5.0)),
        corpus_texts=tuple(raw.get("corpus_texts", DEFAULT_CORPUS_TEXTS)),
        model=raw.get("model", "sentiment"),
    )


_READY_RE = re.compile(
    r"ready http=([\w.]+):(\d+) rpc=[\w.]+:(\d+) metrics=[\w.]+:(\d+)"
)


class ServerProcess:
    """A server subprocess bound to ephemeral ports, parsed from its ready line."""

    def __init__(self, registry_root: str, config_file: str):
        self.proc = subprocess.Popen(
            [
                sys.executable,
                "-m",
                "medserve",
                "server",
                "--registry",
                registry_root,
                "--config",
                config_file,
                "--port-http",
                "0",
                "--port-rpc",
                "0",
                "--port-metrics",
                "0",
            ],
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            text=True,
        )
        assert self.proc.stdout is not None
        line = self.proc.stdout.readline()
        m = _READY_RE.search(line)
        if not m:
            self.proc.kill()
            rest = self.proc.stdout.read()
            raise LoadgenError(f"server failed to start: {line!r}{rest!r}")
        self.host = m.group(1)
        self.http_port = int(m.group(2))
        self.rpc_port = int(m.group(3))
        self.metrics_port = int(m.group(4))

    def stop(self) -> None:
        self.proc.terminate()
        try:
            self.proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()


def _write_cell_files(workdir: Path, cell: MatrixCell, cfg: MatrixConfig) -> tuple[str, str]:
    base_ms, per_item_ms = COST_MODELS[cell.framework_mode]
    registry = workdir / "registry"
    write_model_dir(
        registry, cfg.model, 1, kind="lexicon", base_ms=base_ms, per_item_ms=per_item_ms
    )
    config_file = workdir / "server.config"
    config_file.write_text(
        "\n".join(
            [
                f"batch.max_size={cell.batch_max_size}",
                f"batch.max_delay_ms={cell.batch_max_delay_ms:g}",
                "batch.max_queue=1024",
                f"executors.count={cell.executors}",
            ]
        )
        + "\n",
        encoding="utf-8",
    )
    return str(registry), str(config_file)


def run_matrix(cfg: MatrixConfig, out_dir: str | Path) -> list[RunReport]:
    """Execute every (cell, users) pair and emit the combined report."""
    corpus = tuple(
        json.dumps({"model": cfg.model, "inputs": [text]}) for text in cfg.corpus_texts
    )
    reports: list[RunReport] = []
    for cell in cfg.cells:
        with tempfile.TemporaryDirectory(prefix="medserve-matrix-") as workdir:
            registry, config_file = _write_cell_files(Path(workdir), cell, cfg)
            server = ServerProcess(registry, config_file)
            try:
                for users in cfg.users:
                    profile = LoadProfile(
                        target=f"http://{server.host}:{server.http_port}/v1/infer",
                        users=users,
                        duration_s=cfg.duration_s,
                        warmup_s=cfg.warmup_s,
                        corpus=corpus,
                        metrics_url=f"http://{server.host}:{server.metrics_port}/metrics",
                        label=cell.framework_mode,
                        batch=cell.batch_max_size,
                    )
                    report = asyncio.run(run_closed_loop(profile))
                    reports.append(report)
                    print(
                        f"{cell.framework_mode} B={cell.batch_max_size} users={users}: "
                        f"p50={report.p50_ms:.1f}ms p95={report.p95_ms:.1f}ms "
                        f"rps={report.throughput_rps:.1f}",
                        flush=True,
                    )
            finally:
                server.stop()
    emit_report(reports, out_dir)
    return reports
