"""Shared helpers for the test suite."""

from __future__ import annotations

import asyncio
import contextlib
import json
import subprocess
import sys
import time
from pathlib import Path

import pytest

from medserve.batching import BatchPolicy
from medserve.httpkit import HttpConnection, HttpServer, Response
from medserve.runtime import write_model_dir
from medserve.server import InferenceServer, ServerConfig


def run(coro):
    """Run a coroutine to completion on a fresh event loop."""
    return asyncio.run(coro)


# One verdict line per acceptance criterion, echoed after the test summary so
# they stay visible without -s. test_acceptance.py appends to this list.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def registry_root(tmp_path):
    """A registry with one lexicon model at version 1 and zero service cost."""
    root = tmp_path / "registry"
    write_model_dir(root, "sentiment", 1)
    return root


def make_server_config(
    registry_root,
    *,
    max_batch_size=4,
    max_queue_delay_ms=2.0,
    max_queue_len=1024,
    executors=2,
) -> ServerConfig:
    return ServerConfig(
        registry_root=str(registry_root),
        http_port=0,
        rpc_port=0,
        metrics_port=0,
        policy=BatchPolicy(
            max_batch_size=max_batch_size,
            max_queue_delay_ms=max_queue_delay_ms,
            max_queue_len=max_queue_len,
        ),
        executors=executors,
    )


@contextlib.asynccontextmanager
async def running_server(config: ServerConfig):
    server = InferenceServer(config)
    await server.start()
    try:
        yield server
    finally:
        await server.stop()


async def http_json(
    host: str, port: int, method: str, path: str, obj=None, headers=None
) -> tuple[int, dict]:
    conn = HttpConnection(host, port)
    body = json.dumps(obj).encode("utf-8") if obj is not None else b""
    try:
        status, raw = await conn.request(method, path, body, headers)
    finally:
        conn.close()
    return status, (json.loads(raw.decode("utf-8")) if raw else {})


@contextlib.asynccontextmanager
async def stub_http_server(handler):
    """An in-process HTTP stub bound to an ephemeral port."""
    server = HttpServer(handler, "127.0.0.1", 0)
    await server.start()
    try:
        yield server
    finally:
        await server.stop()


def make_ok_stub(delay_s: float = 0.0, body: dict | None = None):
    """Handler answering 200 everywhere after a fixed delay."""
    payload = json.dumps(body or {"outputs": [{"label": "neutral", "score": 0.0}]}).encode()

    async def handler(request):
        if delay_s > 0 and not request.path.startswith("/health"):
            await asyncio.sleep(delay_s)
        return Response(body=payload)

    return handler


class ServerProc:
    """A medserve server subprocess on ephemeral ports, for cross-process runs."""

    def __init__(self, registry: Path, config_lines: list[str], tmp: Path):
        cfg = tmp / "server.config"
        cfg.write_text("\n".join(config_lines) + "\n", encoding="utf-8")
        self.proc = subprocess.Popen(
            [
                sys.executable, "-m", "medserve", "server",
                "--registry", str(registry), "--config", str(cfg),
                "--port-http", "0", "--port-rpc", "0", "--port-metrics", "0",
            ],
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            text=True,
        )
        deadline = time.time() + 15
        line = ""
        while time.time() < deadline:
            line = self.proc.stdout.readline()
            if "ready" in line:
                break
        parts = dict(
            kv.split("=", 1) for kv in line.strip().split() if "=" in kv
        )
        self.http_host, self.http_port = self._split(parts["http"])
        _, self.rpc_port = self._split(parts["rpc"])
        _, self.metrics_port = self._split(parts["metrics"])

    @staticmethod
    def _split(hostport: str) -> tuple[str, int]:
        host, _, port = hostport.rpartition(":")
        return host, int(port)

    def stop(self):
        self.proc.terminate()
        try:
            self.proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait()
