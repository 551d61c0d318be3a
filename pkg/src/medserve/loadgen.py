"""Closed-loop load generation against the serving stack.

Each virtual user owns one persistent connection and loops send, await,
record with zero think time, so offered load adapts to observed latency.
Latency percentiles use the nearest-rank rule on post-warmup samples.
"""

from __future__ import annotations

import asyncio
import json
import math
import time
from dataclasses import dataclass, field
from urllib.parse import urlsplit

from .httpkit import ClientError, HttpConnection, encode_frame, read_frame
from .metrics import parse_exposition


class LoadgenError(Exception):
    """Startup or configuration failure; no report was produced."""


_HTTP_OUTCOMES = {
    200: "ok",
    400: "bad_request",
    401: "unauthorized",
    403: "forbidden",
    404: "not_found",
    500: "internal",
    501: "not_implemented",
    502: "upstream_unavailable",
    503: "overload",
    504: "timeout",
}

_RPC_OUTCOMES = {0: "ok", 3: "bad_request", 4: "not_found", 13: "internal", 14: "overload"}


@dataclass(frozen=True)
class LatencySample:
    sent_at_s: float  # offset from run start
    latency_ms: float
    outcome: str


@dataclass(frozen=True)
class LoadProfile:
    target: str  # http://host:port/path for http, host:port for rpc
    users: int
    duration_s: float = 60.0
    warmup_s: float = 5.0
    protocol: str = "http"
    corpus: tuple[str, ...] = ()  # one JSON request body per entry
    token: str | None = None
    metrics_url: str | None = None
    health_url: str | None = None  # readiness endpoint; required for rpc targets
    label: str = "run"
    batch: int = 1

    def __post_init__(self) -> None:
        if self.users < 1:
            raise ValueError("users must be >= 1")
        if not 0 <= self.warmup_s < self.duration_s:
            raise ValueError("need 0 <= warmup_s < duration_s")
        if self.protocol not in ("http", "rpc"):
            raise ValueError("protocol must be 'http' or 'rpc'")
        if not self.corpus:
            raise ValueError("corpus must be non-empty")


@dataclass
class RunReport:
    label: str
    users: int
    batch: int
    duration_s: float
    warmup_s: float
    p50_ms: float
    p95_ms: float
    throughput_rps: float
    outcome_counts: dict[str, int]
    mean_batch_size: float | None = None
    samples: list[LatencySample] = field(default_factory=list, repr=False)


def compute_percentile(samples: list[float], q: float) -> float:
    """Nearest-rank percentile: element at 1-based index ceil(q*N) of the sort."""
    if not samples:
        raise ValueError("percentile of an empty sample set is undefined")
    if not 0.0 < q < 1.0:
        raise ValueError("q must be strictly between 0 and 1")
    ordered = sorted(samples)
    rank = max(1, math.ceil(q * len(ordered)))
    return ordered[rank - 1]


def _split_target(profile: LoadProfile) -> tuple[str, int, str]:
    """Return (host, port, path) for the profile's target."""
    if profile.protocol == "rpc":
        host, _, port = profile.target.rpartition(":")
        host = host or "127.0.0.1"
        return host, int(port), ""
    parts = urlsplit(profile.target)
    if parts.scheme != "http" or not parts.hostname or not parts.port:
        raise LoadgenError(f"target must look like http://host:port/path, got {profile.target!r}")
    return parts.hostname, parts.port, parts.path or "/v1/infer"


async def wait_until_ready(host: str, port: int, timeout_s: float = 30.0) -> None:
    """Poll GET /health/ready until it answers 200."""
    deadline = time.perf_counter() + timeout_s
    last = "no response"
    while time.perf_counter() < deadline:
        conn = HttpConnection(host, port)
        try:
            status, _ = await asyncio.wait_for(conn.request("GET", "/health/ready"), 2.0)
            if status == 200:
                return
            last = f"status {status}"
        except (ClientError, asyncio.TimeoutError) as exc:
            last = str(exc)
        finally:
            conn.close()
        await asyncio.sleep(0.05)
    raise LoadgenError(f"target {host}:{port} not ready after {timeout_s:.0f}s: {last}")


async def _http_user(
    uid: int,
    profile: LoadProfile,
    host: str,
    port: int,
    path: str,
    t0: float,
    stop_at: float,
    samples: list[LatencySample],
) -> None:
    conn = HttpConnection(host, port)
    headers = {"authorization": f"Bearer {profile.token}"} if profile.token else None
    bodies = [body.encode("utf-8") for body in profile.corpus]
    i = uid  # stagger corpus position across users
    while True:
        now = time.perf_counter()
        if now >= stop_at:
            break
        body = bodies[i % len(bodies)]
        i += 1
        sent = now
        try:
            status, _ = await asyncio.wait_for(
                conn.request("POST", path, body, headers), stop_at - now + 10.0
            )
            outcome = _HTTP_OUTCOMES.get(status, f"http_{status}")
        except (ClientError, asyncio.TimeoutError, OSError):
            conn.close()
            outcome = "error"
        samples.append(
            LatencySample(sent - t0, (time.perf_counter() - sent) * 1000.0, outcome)
        )
    conn.close()


async def _rpc_user(
    uid: int,
    profile: LoadProfile,
    host: str,
    port: int,
    t0: float,
    stop_at: float,
    samples: list[LatencySample],
) -> None:
    reader = writer = None
    bodies = [body.encode("utf-8") for body in profile.corpus]
    i = uid
    while True:
        now = time.perf_counter()
        if now >= stop_at:
            break
        body = bodies[i % len(bodies)]
        i += 1
        sent = now
        try:
            if writer is None:
                reader, writer = await asyncio.open_connection(host, port)
            writer.write(encode_frame(body))
            await writer.drain()
            frame = await asyncio.wait_for(read_frame(reader), stop_at - now + 10.0)
            if frame is None:
                raise ClientError("connection closed")
            status = json.loads(frame.decode("utf-8")).get("status", -1)
            outcome = _RPC_OUTCOMES.get(status, f"rpc_{status}")
        except (ClientError, asyncio.TimeoutError, OSError, ValueError, asyncio.IncompleteReadError):
            if writer is not None:
                writer.close()
            reader = writer = None
            outcome = "error"
        samples.append(
            LatencySample(sent - t0, (time.perf_counter() - sent) * 1000.0, outcome)
        )
    if writer is not None:
        writer.close()


async def _scrape_batch_stats(metrics_url: str) -> tuple[float, float]:
    """Return (batches_total, batch_size_sum) summed across models."""
    parts = urlsplit(metrics_url)
    status, body = await HttpConnection(parts.hostname, parts.port).request(
        "GET", parts.path or "/metrics"
    )
    if status != 200:
        raise LoadgenError(f"metrics scrape returned {status}")
    series = parse_exposition(body.decode("utf-8"))
    batches = sum(v for (name, _), v in series.items() if name == "inference_batches_total")
    size_sum = sum(v for (name, _), v in series.items() if name == "inference_batch_size_sum")
    return batches, size_sum


async def run_closed_loop(profile: LoadProfile) -> RunReport:
    """Drive the target with `users` concurrent loops and summarize the run."""
    host, port, path = _split_target(profile)
    if profile.health_url:
        health = urlsplit(profile.health_url)
        if not health.hostname or not health.port:
            raise LoadgenError(f"health_url must look like http://host:port, got {profile.health_url!r}")
        await wait_until_ready(health.hostname, health.port)
    elif profile.protocol == "http":
        await wait_until_ready(host, port)
    # A bare rpc target has no HTTP side to poll; the user loops reconnect anyway.

    before = (0.0, 0.0)
    if profile.metrics_url:
        before = await _scrape_batch_stats(profile.metrics_url)

    samples: list[LatencySample] = []
    t0 = time.perf_counter()
    stop_at = t0 + profile.duration_s
    if profile.protocol == "http":
        users = [
            _http_user(u, profile, host, port, path, t0, stop_at, samples)
            for u in range(profile.users)
        ]
    else:
        users = [
            _rpc_user(u, profile, host, port, t0, stop_at, samples)
            for u in range(profile.users)
        ]
    await asyncio.gather(*users)

    mean_batch_size = None
    if profile.metrics_url:
        after = await _scrape_batch_stats(profile.metrics_url)
        batches = after[0] - before[0]
        if batches > 0:
            mean_batch_size = (after[1] - before[1]) / batches

    return summarize(profile, samples, mean_batch_size)


def summarize(
    profile: LoadProfile,
    samples: list[LatencySample],
    mean_batch_size: float | None = None,
) -> RunReport:
    measured = [s for s in samples if s.sent_at_s >= profile.warmup_s]
    outcome_counts: dict[str, int] = {}
    for s in measured:
        outcome_counts[s.outcome] = outcome_counts.get(s.outcome, 0) + 1
    ok_latencies = [s.latency_ms for s in measured if s.outcome == "ok"]
    if not ok_latencies:
        raise LoadgenError(
            f"no successful post-warmup samples (outcomes: {outcome_counts})"
        )
    p50 = compute_percentile(ok_latencies, 0.50)
    p95 = compute_percentile(ok_latencies, 0.95)
    assert p50 <= p95, "percentile ordering violated"
    window = profile.duration_s - profile.warmup_s
    return RunReport(
        label=profile.label,
        users=profile.users,
        batch=profile.batch,
        duration_s=profile.duration_s,
        warmup_s=profile.warmup_s,
        p50_ms=p50,
        p95_ms=p95,
        throughput_rps=len(ok_latencies) / window,
        outcome_counts=outcome_counts,
        mean_batch_size=mean_batch_size,
        samples=measured,
    )


def load_corpus(path: str) -> tuple[str, ...]:
    """Read a corpus file: one JSON request body per non-empty line."""
    bodies = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                json.loads(line)
            except ValueError as exc:
                raise LoadgenError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
            bodies.append(line)
    if not bodies:
        raise LoadgenError(f"{path}: corpus is empty")
    return tuple(bodies)
