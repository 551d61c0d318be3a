"""Authenticating gateway in front of the inference server.

Request pipeline: bearer-token check, content-kind routing, identifier
scrubbing plus normalization (in-process or via the remote preprocess
service), then a retried forward to the inference server. Retries happen
only for connect failures and per-try timeouts; once any application
response arrives it is returned as-is. Request bodies are never logged.
"""

from __future__ import annotations

import asyncio
import json
import os
import time
from dataclasses import dataclass, field

from . import phi
from .httpkit import ClientError, HttpConnection, HttpServer, Request, Response
from .tokens import AUTH_KEY_ENV, TokenError, verify_token

MAX_TEXT_BYTES = 16 * 1024

_ANALYZE_FIELDS = {"content_kind", "text"}


class GatewayError(Exception):
    """Forwarding failure; category is 'timeout' or 'upstream_unavailable'."""

    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 2
    per_try_timeout_ms: float = 2000.0
    total_timeout_ms: float = 5000.0
    backoff_ms: float = 50.0

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if min(self.per_try_timeout_ms, self.total_timeout_ms) <= 0:
            raise ValueError("timeouts must be positive")
        if self.backoff_ms < 0:
            raise ValueError("backoff_ms must be >= 0")


async def forward_with_retries(attempt, policy: RetryPolicy):
    """Run `attempt` under the retry policy and return its response.

    `attempt` must raise ClientError/OSError for transport failures; any
    return value counts as an application response and ends the retries.
    A total-deadline exhaustion raises GatewayError('timeout'); running out
    of retries raises GatewayError('upstream_unavailable').
    """
    start = time.perf_counter()
    total_s = policy.total_timeout_ms / 1000.0
    tries = 0
    while True:
        remaining = total_s - (time.perf_counter() - start)
        if remaining <= 0:
            raise GatewayError("timeout", "total deadline exhausted")
        budget = min(policy.per_try_timeout_ms / 1000.0, remaining)
        tries += 1
        try:
            return await asyncio.wait_for(attempt(), budget)
        except (ClientError, OSError, asyncio.TimeoutError) as exc:
            if time.perf_counter() - start >= total_s:
                raise GatewayError("timeout", "total deadline exhausted") from exc
            if tries > policy.max_retries:
                raise GatewayError(
                    "upstream_unavailable",
                    f"upstream failed after {tries} attempts: {exc}",
                ) from exc
            if policy.backoff_ms:
                await asyncio.sleep(policy.backoff_ms / 1000.0)


class ConnectionPool:
    """Bounded pool of persistent upstream connections."""

    def __init__(self, host: str, port: int, limit: int = 128):
        self.host = host
        self.port = port
        self._idle: list[HttpConnection] = []
        self._slots = asyncio.Semaphore(limit)

    async def request(
        self, method: str, path: str, body: bytes, headers: dict[str, str] | None = None
    ) -> tuple[int, bytes]:
        async with self._slots:
            conn = self._idle.pop() if self._idle else HttpConnection(self.host, self.port)
            try:
                result = await conn.request(method, path, body, headers)
            except BaseException:
                conn.close()  # a timed-out or broken connection is not reusable
                raise
            self._idle.append(conn)
            return result


@dataclass
class GatewayConfig:
    upstream_host: str
    upstream_port: int
    host: str = "127.0.0.1"
    listen_port: int = 9000
    model: str = "sentiment"
    phi_mode: str = "inline"  # or "remote"
    phi_host: str = "127.0.0.1"
    phi_port: int = 9100
    max_seq_len: int = phi.DEFAULT_MAX_SEQ_LEN
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    auth_key: bytes = b""

    def __post_init__(self) -> None:
        if self.phi_mode not in ("inline", "remote"):
            raise ValueError("phi_mode must be 'inline' or 'remote'")
        if not self.auth_key:
            env = os.environ.get(AUTH_KEY_ENV, "")
            if not env:
                raise ValueError(f"auth key required: set {AUTH_KEY_ENV} or pass auth_key")
            self.auth_key = env.encode("utf-8")


class Gateway:
    def __init__(self, config: GatewayConfig):
        self.config = config
        self._http = HttpServer(self._handle, config.host, config.listen_port)
        self._upstream = ConnectionPool(config.upstream_host, config.upstream_port)
        self._phi_pool = ConnectionPool(config.phi_host, config.phi_port)
        self.live = False

    @property
    def port(self) -> int:
        return self._http.port

    async def start(self) -> None:
        await self._http.start()
        self.live = True

    async def stop(self) -> None:
        await self._http.stop()
        self.live = False

    async def _handle(self, request: Request) -> Response:
        if request.method == "GET" and request.path == "/health/live":
            return Response.json({"live": self.live}, status=200 if self.live else 503)
        if request.method == "GET" and request.path == "/health/ready":
            return Response.json({"ready": self.live}, status=200 if self.live else 503)
        if request.method == "POST" and request.path == "/v1/analyze":
            return await self._handle_analyze(request)
        return Response.error(404, "not_found", f"no route {request.method} {request.path}")

    async def _handle_analyze(self, request: Request) -> Response:
        t0 = time.perf_counter()

        auth = request.headers.get("authorization", "")
        if not auth.startswith("Bearer "):
            return Response.error(401, "malformed", "missing bearer token")
        try:
            verify_token(auth[len("Bearer ") :], self.config.auth_key)
        except TokenError as exc:
            status = 403 if exc.category == "forbidden" else 401
            return Response.error(status, exc.category, str(exc))
        t_auth = time.perf_counter()

        try:
            obj = request.json()
        except ValueError as exc:
            return Response.error(400, "bad_request", str(exc))
        unknown = set(obj) - _ANALYZE_FIELDS
        if unknown:
            return Response.error(400, "bad_request", f"unknown fields: {sorted(unknown)}")
        kind = obj.get("content_kind")
        if kind == "image":
            return Response.error(501, "not_implemented", "image analysis is not available")
        if kind != "text":
            return Response.error(400, "bad_request", "content_kind must be 'text' or 'image'")
        text = obj.get("text")
        if not isinstance(text, str):
            return Response.error(400, "bad_request", "text must be a string")
        if len(text.encode("utf-8")) > MAX_TEXT_BYTES:
            return Response.error(400, "bad_request", f"text exceeds {MAX_TEXT_BYTES} bytes")

        try:
            tokens, span_count = await self._preprocess(text)
        except GatewayError as exc:
            return Response.error(502, exc.category, str(exc))
        t_phi = time.perf_counter()

        upstream_body = json.dumps(
            {"model": self.config.model, "inputs": [" ".join(tokens)]}
        ).encode("utf-8")

        async def attempt() -> tuple[int, bytes]:
            return await self._upstream.request("POST", "/v1/infer", upstream_body)

        try:
            status, body = await forward_with_retries(attempt, self.config.retry)
        except GatewayError as exc:
            code = 504 if exc.category == "timeout" else 502
            return Response.error(code, exc.category, str(exc))
        t_done = time.perf_counter()

        try:
            payload = json.loads(body.decode("utf-8"))
            if not isinstance(payload, dict):
                raise ValueError("not an object")
        except (ValueError, UnicodeDecodeError):
            return Response.error(502, "upstream_unavailable", "unparsable upstream response")
        payload["phi_spans_removed"] = span_count
        payload["gateway_timing_ms"] = {
            "auth": (t_auth - t0) * 1000.0,
            "phi": (t_phi - t_auth) * 1000.0,
            "upstream": (t_done - t_phi) * 1000.0,
            "total": (time.perf_counter() - t0) * 1000.0,
        }
        return Response.json(payload, status=status)

    async def _preprocess(self, text: str) -> tuple[list[str], int]:
        """Scrub and tokenize, locally or via the preprocess service."""
        if self.config.phi_mode == "inline":
            result = phi.preprocess(text, self.config.max_seq_len)
            return result["tokens"], len(result["spans"])

        async def attempt() -> tuple[int, bytes]:
            return await self._phi_pool.request(
                "POST", "/v1/preprocess", json.dumps({"text": text}).encode("utf-8")
            )

        try:
            status, body = await forward_with_retries(attempt, self.config.retry)
        except GatewayError as exc:
            raise GatewayError("upstream_unavailable", f"preprocess service: {exc}") from exc
        if status != 200:
            raise GatewayError("upstream_unavailable", f"preprocess service returned {status}")
        result = json.loads(body.decode("utf-8"))
        return result["tokens"], len(result["spans"])
