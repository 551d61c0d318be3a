"""Inference server: HTTP and length-prefixed RPC listeners over one batcher.

Both listeners funnel into the same admission path, so outputs are identical
regardless of protocol. Each (model, version) pair gets its own batching
engine; a registry reload swaps the snapshot atomically and in-flight
requests keep the engine and descriptor they started with, which is what
makes version rollover invisible to clients.
"""

from __future__ import annotations

import asyncio
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import phi
from .batching import BatchEngine, BatchPolicy, QueueFullError, ShutdownError
from .httpkit import (
    FrameError,
    HttpServer,
    Request,
    Response,
    encode_frame,
    read_frame,
)
from .metrics import Metrics
from .runtime import (
    ModelDescriptor,
    ModelRegistry,
    RegistryError,
    infer_batch,
    load_registry,
)

MAX_INPUT_BYTES = 16 * 1024

# Outcome -> (HTTP status, RPC status). RPC codes: 0 ok, 3 bad request,
# 4 not found, 14 unavailable, 13 internal.
_OUTCOME_CODES = {
    "ok": (200, 0),
    "bad_request": (400, 3),
    "not_found": (404, 4),
    "overload": (503, 14),
    "internal": (500, 13),
}

_REQUEST_FIELDS = {"model", "version", "inputs"}


@dataclass
class ServerConfig:
    registry_root: str
    host: str = "127.0.0.1"
    http_port: int = 8000
    rpc_port: int = 8001
    metrics_port: int = 8002
    policy: BatchPolicy = field(default_factory=BatchPolicy)
    executors: int = 2
    admin_reload: bool = True


def load_server_config(path: str | Path, registry_root: str, **overrides) -> ServerConfig:
    """Build a ServerConfig from a flat key=value file plus overrides."""
    raw: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        raw[key.strip()] = value.strip()
    policy = BatchPolicy(
        max_batch_size=int(raw.get("batch.max_size", "1")),
        max_queue_delay_ms=float(raw.get("batch.max_delay_ms", "5")),
        max_queue_len=int(raw.get("batch.max_queue", "1024")),
    )
    cfg = ServerConfig(
        registry_root=registry_root,
        policy=policy,
        executors=int(raw.get("executors.count", "2")),
        **overrides,
    )
    return cfg


class RequestRejected(Exception):
    def __init__(self, outcome: str, message: str, model: str = "unknown"):
        super().__init__(message)
        self.outcome = outcome
        self.model = model


def validate_infer_request(obj: dict) -> tuple[str, int | None, list[str]]:
    """Enforce the wire schema strictly; unknown fields are rejected."""
    unknown = set(obj) - _REQUEST_FIELDS
    if unknown:
        raise RequestRejected(
            "bad_request", f"unknown fields: {sorted(unknown)}"
        )
    model = obj.get("model")
    if not isinstance(model, str) or not model:
        raise RequestRejected("bad_request", "model must be a non-empty string")
    version = obj.get("version")
    if version is not None:
        if not isinstance(version, int) or isinstance(version, bool) or version < 1:
            raise RequestRejected(
                "bad_request", "version must be a positive integer", model
            )
    inputs = obj.get("inputs")
    if not isinstance(inputs, list) or not inputs:
        raise RequestRejected(
            "bad_request", "inputs must be a non-empty list of strings", model
        )
    for i, item in enumerate(inputs):
        if not isinstance(item, str):
            raise RequestRejected("bad_request", f"inputs[{i}] is not a string", model)
        if len(item.encode("utf-8")) > MAX_INPUT_BYTES:
            raise RequestRejected(
                "bad_request", f"inputs[{i}] exceeds {MAX_INPUT_BYTES} bytes", model
            )
    return model, version, inputs


class InferenceServer:
    def __init__(self, config: ServerConfig):
        self.config = config
        self.metrics = Metrics()
        self.registry: ModelRegistry | None = None
        self._engines: dict[tuple[str, int], BatchEngine] = {}
        self._http = HttpServer(self._handle_http, config.host, config.http_port)
        self._metrics_http = HttpServer(
            self._handle_metrics_http, config.host, config.metrics_port
        )
        self._rpc_server: asyncio.base_events.Server | None = None
        self.live = False
        self._stopping = False

    # -- lifecycle ----------------------------------------------------------

    @property
    def http_port(self) -> int:
        return self._http.port

    @property
    def metrics_port(self) -> int:
        return self._metrics_http.port

    @property
    def rpc_port(self) -> int:
        if self._rpc_server is None:
            return self.config.rpc_port
        return self._rpc_server.sockets[0].getsockname()[1]

    @property
    def ready(self) -> bool:
        return (
            self.live
            and not self._stopping
            and self.registry is not None
            and bool(self.registry.latest)
        )

    async def start(self) -> None:
        await self._http.start()
        await self._metrics_http.start()
        self._rpc_server = await asyncio.start_server(
            self._serve_rpc_connection, self.config.host, self.config.rpc_port
        )
        self.live = True
        try:
            self.registry = load_registry(self.config.registry_root)
        except RegistryError:
            self.registry = None  # listeners stay up; readiness stays false
        if self.registry is not None:
            for name in self.registry.latest:
                self._preregister_metrics(name)

    async def stop(self) -> None:
        self._stopping = True
        await self._http.stop()
        await self._metrics_http.stop()
        if self._rpc_server is not None:
            self._rpc_server.close()
            await self._rpc_server.wait_closed()
            self._rpc_server = None
        for engine in list(self._engines.values()):
            await engine.stop()
        self._engines.clear()
        self.live = False

    def _preregister_metrics(self, model: str) -> None:
        for outcome in _OUTCOME_CODES:
            self.metrics.ensure(
                "inference_requests_total", {"model": model, "outcome": outcome}
            )
        self.metrics.ensure("inference_batches_total", {"model": model})
        self.metrics.ensure("inference_batch_size_sum", {"model": model})
        self.metrics.ensure("inference_queue_depth", {"model": model})
        self.metrics.ensure("inference_latency_ms_sum", {"model": model})
        self.metrics.ensure("inference_latency_ms_count", {"model": model})

    # -- core admission path -----------------------------------------------

    def _engine_for(self, desc: ModelDescriptor) -> BatchEngine:
        key = (desc.name, desc.version)
        engine = self._engines.get(key)
        if engine is None:

            async def run(batch_inputs: list) -> list:
                return await infer_batch(desc, batch_inputs)

            def on_batch(size: int, model: str = desc.name) -> None:
                self.metrics.add("inference_batches_total", {"model": model})
                self.metrics.add("inference_batch_size_sum", {"model": model}, size)

            engine = BatchEngine(
                self.config.policy,
                run,
                self.config.executors,
                on_batch=on_batch,
            )
            self._engines[key] = engine
            asyncio.get_running_loop().create_task(engine.start())
        return engine

    async def handle_infer(self, obj: dict) -> dict:
        """Validate, resolve, batch, and score; raises RequestRejected."""
        model_name, version, inputs = validate_infer_request(obj)
        registry = self.registry
        if registry is None:
            raise RequestRejected("overload", "registry not loaded", model_name)
        desc = registry.resolve(model_name, version)
        if desc is None:
            raise RequestRejected(
                "not_found",
                f"model {model_name!r} version {version or 'latest'} not found",
                model_name,
            )
        payloads = [phi.normalize(text, desc.max_seq_len).tokens for text in inputs]
        engine = self._engine_for(desc)
        try:
            futures = engine.enqueue_many([list(p) for p in payloads])
        except QueueFullError as exc:
            raise RequestRejected("overload", str(exc), model_name) from exc
        except ShutdownError as exc:
            raise RequestRejected("overload", str(exc), model_name) from exc
        try:
            results = await asyncio.gather(*futures)
        except ShutdownError as exc:
            raise RequestRejected("overload", str(exc), model_name) from exc
        except Exception as exc:
            raise RequestRejected(
                "internal", f"{type(exc).__name__}: {exc}", model_name
            ) from exc
        return {
            "outputs": [
                {"label": r.output.label, "score": r.output.score} for r in results
            ],
            "model_version": desc.version,
            "server_timing_ms": {
                "queue_wait": max(r.queue_wait_ms for r in results),
                "execution": max(r.execution_ms for r in results),
            },
        }

    async def _infer_with_accounting(self, obj: dict) -> tuple[str, dict]:
        """Run one admitted request and settle its metrics exactly once."""
        started = time.perf_counter()
        try:
            payload = await self.handle_infer(obj)
        except RequestRejected as exc:
            self.metrics.add(
                "inference_requests_total",
                {"model": exc.model, "outcome": exc.outcome},
            )
            return exc.outcome, {"error": exc.outcome, "message": str(exc)}
        model = obj["model"]  # validated by handle_infer
        elapsed_ms = (time.perf_counter() - started) * 1000.0
        self.metrics.add(
            "inference_requests_total", {"model": model, "outcome": "ok"}
        )
        self.metrics.add("inference_latency_ms_sum", {"model": model}, elapsed_ms)
        self.metrics.add("inference_latency_ms_count", {"model": model})
        return "ok", payload

    # -- HTTP listener -------------------------------------------------------

    async def _handle_http(self, request: Request) -> Response:
        if request.method == "GET" and request.path in ("/health/live", "/health/ready"):
            return self._health_response(request.path)
        if request.method == "POST" and request.path == "/v1/infer":
            try:
                obj = request.json()
            except ValueError as exc:
                self.metrics.add(
                    "inference_requests_total",
                    {"model": "unknown", "outcome": "bad_request"},
                )
                return Response.error(400, "bad_request", str(exc))
            outcome, payload = await self._infer_with_accounting(obj)
            status = _OUTCOME_CODES[outcome][0]
            return Response.json(payload, status=status)
        if request.method == "POST" and request.path == "/v1/admin/reload":
            return await self._handle_reload()
        return Response.error(404, "not_found", f"no route {request.method} {request.path}")

    def _health_response(self, path: str) -> Response:
        if path == "/health/live":
            status = 200 if self.live else 503
            return Response.json({"live": self.live}, status=status)
        models_ready = {}
        if self.registry is not None:
            models_ready = {name: True for name in sorted(self.registry.latest)}
        ready = self.ready
        return Response.json(
            {"ready": ready, "models_ready": models_ready},
            status=200 if ready else 503,
        )

    async def _handle_reload(self) -> Response:
        if not self.config.admin_reload:
            return Response.error(404, "not_found", "admin reload disabled")
        old = self.registry
        root = old.root if old is not None else self.config.registry_root
        try:
            new = load_registry(root)
        except RegistryError as exc:
            return Response.error(500, "reload_failed", str(exc))
        self.registry = new  # atomic swap; old snapshot keeps serving in-flight work
        for name in new.latest:
            self._preregister_metrics(name)
        return Response.json(
            {
                "old": dict(old.latest) if old is not None else {},
                "new": dict(new.latest),
                "warnings": list(new.warnings),
            }
        )

    # -- metrics listener ----------------------------------------------------

    async def _handle_metrics_http(self, request: Request) -> Response:
        if request.method == "GET" and request.path == "/metrics":
            depths: dict[str, int] = {}
            for (name, _version), engine in self._engines.items():
                depths[name] = depths.get(name, 0) + engine.queue_depth
            for model, depth in depths.items():
                self.metrics.set("inference_queue_depth", {"model": model}, depth)
            return Response(body=self.metrics.render().encode("utf-8"), content_type="text/plain")
        return Response.error(404, "not_found", f"no route {request.method} {request.path}")

    # -- RPC listener ----------------------------------------------------------

    async def _serve_rpc_connection(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter
    ) -> None:
        try:
            while True:
                try:
                    frame = await read_frame(reader)
                except FrameError as exc:
                    writer.write(encode_frame(self._rpc_error(3, str(exc))))
                    await writer.drain()
                    break
                except asyncio.IncompleteReadError:
                    writer.write(encode_frame(self._rpc_error(3, "truncated frame")))
                    await writer.drain()
                    break
                if frame is None:
                    break
                if not frame:
                    writer.write(encode_frame(self._rpc_error(3, "zero-length frame")))
                    await writer.drain()
                    continue
                try:
                    obj = json.loads(frame.decode("utf-8"))
                    if not isinstance(obj, dict):
                        raise ValueError("frame must be a JSON object")
                except (ValueError, UnicodeDecodeError) as exc:
                    self.metrics.add(
                        "inference_requests_total",
                        {"model": "unknown", "outcome": "bad_request"},
                    )
                    writer.write(encode_frame(self._rpc_error(3, f"bad frame: {exc}")))
                    await writer.drain()
                    continue
                outcome, payload = await self._infer_with_accounting(obj)
                payload["status"] = _OUTCOME_CODES[outcome][1]
                writer.write(encode_frame(json.dumps(payload).encode("utf-8")))
                await writer.drain()
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass

    @staticmethod
    def _rpc_error(status: int, message: str) -> bytes:
        return json.dumps({"status": status, "message": message}).encode("utf-8")


async def run_server(config: ServerConfig, *, ready_line: bool = True) -> InferenceServer:
    server = InferenceServer(config)
    await server.start()
    if ready_line:
        print(
            f"medserve-server ready "
            f"http={config.host}:{server.http_port} "
            f"rpc={config.host}:{server.rpc_port} "
            f"metrics={config.host}:{server.metrics_port}",
            flush=True,
        )
    return server
