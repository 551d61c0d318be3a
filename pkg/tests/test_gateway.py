"""Gateway pipeline: auth, routing, scrubbing, forwarding, retries."""

import asyncio
import contextlib
import json
import time

import pytest

from conftest import http_json, make_server_config, registry_root, run, running_server
from medserve.gateway import (
    Gateway,
    GatewayConfig,
    GatewayError,
    RetryPolicy,
    forward_with_retries,
)
from medserve.httpkit import ClientError, HttpServer, Response
from medserve.phi_service import PhiService
from medserve.tokens import sign_token

KEY = b"gateway-test-key"


def make_token(scope="infer", ttl=600, key=KEY):
    return sign_token(key, "tester", scope, int(time.time()) + ttl)


def auth_header(token=None):
    return {"authorization": f"Bearer {token or make_token()}"}


def gw_config(upstream_port, **kwargs):
    return GatewayConfig(
        upstream_host="127.0.0.1",
        upstream_port=upstream_port,
        listen_port=0,
        auth_key=KEY,
        **kwargs,
    )


@contextlib.asynccontextmanager
async def running_gateway(config):
    gw = Gateway(config)
    await gw.start()
    try:
        yield gw
    finally:
        await gw.stop()


@contextlib.asynccontextmanager
async def recording_upstream(reply=None, status=200):
    """HTTP stub that records request bodies byte for byte."""
    bodies = []
    payload = reply if reply is not None else {
        "outputs": [{"label": "neutral", "score": 0.0}],
        "model_version": 1,
    }

    async def handler(request):
        bodies.append(request.body)
        return Response.json(payload, status=status)

    server = HttpServer(handler, "127.0.0.1", 0)
    await server.start()
    try:
        yield server, bodies
    finally:
        await server.stop()


class TcpCounter:
    """Raw listener that counts accepted connections and never replies."""

    def __init__(self):
        self.connections = 0
        self._server = None
        self._open = []

    async def __aenter__(self):
        async def on_conn(reader, writer):
            self.connections += 1
            self._open.append(writer)
            await asyncio.sleep(3600)  # stall: read nothing, reply never

        self._server = await asyncio.start_server(on_conn, "127.0.0.1", 0)
        self.port = self._server.sockets[0].getsockname()[1]
        return self

    async def __aexit__(self, *exc):
        for writer in self._open:
            writer.close()
        self._server.close()
        await self._server.wait_closed()


def analyze(gw, body, headers):
    return http_json("127.0.0.1", gw.port, "POST", "/v1/analyze", body, headers)


TEXT_BODY = {"content_kind": "text", "text": "patient recovering, feeling good"}


# -- auth happens before any upstream contact -----------------------------------

def test_auth_rejections_never_touch_upstream():
    async def scenario():
        async with TcpCounter() as upstream:
            async with running_gateway(gw_config(upstream.port)) as gw:
                results = {}
                results["missing"] = await analyze(gw, TEXT_BODY, {})
                results["not_bearer"] = await analyze(
                    gw, TEXT_BODY, {"authorization": "Basic abc"}
                )
                results["malformed"] = await analyze(
                    gw, TEXT_BODY, auth_header("x.y")
                )
                results["bad_signature"] = await analyze(
                    gw, TEXT_BODY, auth_header(make_token(key=b"wrong-key"))
                )
                results["expired"] = await analyze(
                    gw, TEXT_BODY, auth_header(make_token(ttl=-60))
                )
                results["forbidden"] = await analyze(
                    gw, TEXT_BODY, auth_header(make_token(scope="read only"))
                )
            return results, upstream.connections

    results, connections = run(scenario())
    assert connections == 0
    assert results["missing"][0] == 401
    assert results["missing"][1]["error"] == "malformed"
    assert results["not_bearer"][0] == 401
    assert results["malformed"] == (401, results["malformed"][1])
    assert results["malformed"][1]["error"] == "malformed"
    assert results["bad_signature"][0] == 401
    assert results["bad_signature"][1]["error"] == "bad_signature"
    assert results["expired"][0] == 401
    assert results["expired"][1]["error"] == "expired"
    assert results["forbidden"][0] == 403
    assert results["forbidden"][1]["error"] == "forbidden"


def test_invalid_bodies_never_touch_upstream():
    async def scenario():
        async with TcpCounter() as upstream:
            async with running_gateway(gw_config(upstream.port)) as gw:
                results = {}
                results["image"] = await analyze(
                    gw, {"content_kind": "image", "text": "x"}, auth_header()
                )
                results["unknown_kind"] = await analyze(
                    gw, {"content_kind": "audio", "text": "x"}, auth_header()
                )
                results["no_kind"] = await analyze(gw, {"text": "x"}, auth_header())
                results["bad_text"] = await analyze(
                    gw, {"content_kind": "text", "text": 5}, auth_header()
                )
                results["extra_field"] = await analyze(
                    gw,
                    {"content_kind": "text", "text": "x", "mode": "fast"},
                    auth_header(),
                )
                results["oversize"] = await analyze(
                    gw,
                    {"content_kind": "text", "text": "y" * (16 * 1024 + 1)},
                    auth_header(),
                )
            return results, upstream.connections

    results, connections = run(scenario())
    assert connections == 0
    assert results["image"][0] == 501
    assert results["image"][1]["error"] == "not_implemented"
    assert results["unknown_kind"][0] == 400
    assert results["no_kind"][0] == 400
    assert results["bad_text"][0] == 400
    assert results["extra_field"][0] == 400
    assert results["oversize"][0] == 400


# -- scrubbing on the forward path ----------------------------------------------

def test_no_identifiers_reach_upstream_inline():
    body = {
        "content_kind": "text",
        "text": "SSN 123-45-6789, MRN#99887766, mail a@b.co, good recovery",
    }

    async def scenario():
        async with recording_upstream() as (upstream, bodies):
            async with running_gateway(gw_config(upstream.port)) as gw:
                status, payload = await analyze(gw, body, auth_header())
            return status, payload, bodies

    status, payload, bodies = run(scenario())
    assert status == 200
    assert len(bodies) == 1
    raw = bodies[0]
    assert b"123-45-6789" not in raw
    assert b"123" not in raw  # not even fragments of the identifiers
    assert b"99887766" not in raw
    assert b"a@b.co" not in raw
    forwarded = json.loads(raw.decode())
    assert forwarded["model"] == "sentiment"
    # the MRN rule swallows its own prefix; the SSN rule replaces only
    # the digits, so the standalone word stays
    assert forwarded["inputs"] == ["ssn ssn mrn mail email good recovery"]
    assert payload["phi_spans_removed"] == 3
    assert set(payload["gateway_timing_ms"]) == {"auth", "phi", "upstream", "total"}


def test_remote_phi_mode_forwards_scrubbed_tokens():
    body = {"content_kind": "text", "text": "MRN 12345678 feeling good 1/2/03"}

    async def scenario():
        phi_svc = PhiService(port=0)
        await phi_svc.start()
        try:
            async with recording_upstream() as (upstream, bodies):
                config = gw_config(
                    upstream.port, phi_mode="remote", phi_port=phi_svc.port
                )
                async with running_gateway(config) as gw:
                    status, payload = await analyze(gw, body, auth_header())
                return status, payload, bodies
        finally:
            await phi_svc.stop()

    status, payload, bodies = run(scenario())
    assert status == 200
    assert payload["phi_spans_removed"] == 2
    forwarded = json.loads(bodies[0].decode())
    assert forwarded["inputs"] == ["mrn feeling good date"]


def test_remote_phi_service_down_maps_to_502():
    async def scenario():
        async with recording_upstream() as (upstream, bodies):
            config = gw_config(
                upstream.port,
                phi_mode="remote",
                phi_port=1,  # nothing listens there
                retry=RetryPolicy(max_retries=1, per_try_timeout_ms=200, total_timeout_ms=500, backoff_ms=0),
            )
            async with running_gateway(config) as gw:
                status, payload = await analyze(gw, TEXT_BODY, auth_header())
            return status, payload, bodies

    status, payload, bodies = run(scenario())
    assert status == 502
    assert payload["error"] == "upstream_unavailable"
    assert bodies == []  # never forwarded


# -- forwarding and retries -------------------------------------------------------

def test_upstream_response_passes_through():
    reply = {
        "outputs": [{"label": "positive", "score": 0.5}],
        "model_version": 7,
        "extra": "kept",
    }

    async def scenario():
        async with recording_upstream(reply=reply) as (upstream, _):
            async with running_gateway(gw_config(upstream.port)) as gw:
                return await analyze(gw, TEXT_BODY, auth_header())

    status, payload = run(scenario())
    assert status == 200
    assert payload["model_version"] == 7
    assert payload["extra"] == "kept"
    assert payload["outputs"] == reply["outputs"]


def test_upstream_app_errors_are_not_retried():
    reply = {"error": "overload", "message": "queue at capacity (1024)"}

    async def scenario():
        async with recording_upstream(reply=reply, status=503) as (upstream, bodies):
            async with running_gateway(gw_config(upstream.port)) as gw:
                status, payload = await analyze(gw, TEXT_BODY, auth_header())
            return status, payload, len(bodies)

    status, payload, calls = run(scenario())
    assert status == 503
    assert payload["error"] == "overload"
    assert calls == 1  # an application response ends the retry loop


def test_stalled_upstream_times_out_with_three_attempts():
    retry = RetryPolicy(
        max_retries=5, per_try_timeout_ms=50.0, total_timeout_ms=120.0, backoff_ms=0.0
    )

    async def scenario():
        async with TcpCounter() as upstream:
            async with running_gateway(gw_config(upstream.port, retry=retry)) as gw:
                t0 = time.perf_counter()
                status, payload = await analyze(gw, TEXT_BODY, auth_header())
                elapsed_ms = (time.perf_counter() - t0) * 1000.0
            return status, payload, elapsed_ms, upstream.connections

    status, payload, elapsed_ms, connections = run(scenario())
    assert status == 504
    assert payload["error"] == "timeout"
    # 50 + 50 + remaining 20: the third try is cut by the total deadline
    assert connections == 3
    assert 100.0 <= elapsed_ms <= 170.0


def test_connection_refused_exhausts_retries_to_502():
    retry = RetryPolicy(
        max_retries=2, per_try_timeout_ms=200.0, total_timeout_ms=2000.0, backoff_ms=0.0
    )

    async def scenario():
        async with running_gateway(gw_config(upstream_port=1, retry=retry)) as gw:
            return await analyze(gw, TEXT_BODY, auth_header())

    status, payload = run(scenario())
    assert status == 502
    assert payload["error"] == "upstream_unavailable"


def test_transport_failure_after_accept_retries_and_counts():
    accepted = []

    async def scenario():
        async def slam(reader, writer):
            accepted.append(1)
            writer.close()  # accept then drop without an HTTP response

        server = await asyncio.start_server(slam, "127.0.0.1", 0)
        port = server.sockets[0].getsockname()[1]
        retry = RetryPolicy(
            max_retries=2, per_try_timeout_ms=500.0, total_timeout_ms=5000.0, backoff_ms=0.0
        )
        try:
            async with running_gateway(gw_config(port, retry=retry)) as gw:
                return await analyze(gw, TEXT_BODY, auth_header())
        finally:
            server.close()
            await server.wait_closed()

    status, payload = run(scenario())
    assert status == 502
    assert payload["error"] == "upstream_unavailable"
    assert len(accepted) == 3  # initial try plus two retries


def test_forward_with_retries_unit():
    async def scenario():
        calls = []

        async def flaky():
            calls.append(1)
            if len(calls) < 3:
                raise ClientError("boom")
            return ("ok", 200)

        policy = RetryPolicy(max_retries=2, per_try_timeout_ms=100, total_timeout_ms=1000, backoff_ms=0)
        result = await forward_with_retries(flaky, policy)

        async def always_down():
            raise ClientError("down")

        with pytest.raises(GatewayError) as exc_info:
            await forward_with_retries(always_down, policy)
        return result, len(calls), exc_info.value.category

    result, calls, category = run(scenario())
    assert result == ("ok", 200)
    assert calls == 3
    assert category == "upstream_unavailable"


# -- end to end against the real server -------------------------------------------

def test_end_to_end_analyze(registry_root):
    body = {
        "content_kind": "text",
        "text": "Patient MRN#12345678 recovering well, feeling good, SSN 123-45-6789.",
    }

    async def scenario():
        async with running_server(make_server_config(registry_root)) as server:
            async with running_gateway(gw_config(server.http_port)) as gw:
                health = await http_json("127.0.0.1", gw.port, "GET", "/health/ready")
                result = await analyze(gw, body, auth_header())
                return health, result

    health, (status, payload) = run(scenario())
    assert health[0] == 200
    assert status == 200
    assert payload["model_version"] == 1
    assert payload["outputs"][0]["label"] == "positive"
    assert payload["phi_spans_removed"] == 2
    assert payload["gateway_timing_ms"]["total"] > 0


def test_gateway_requires_auth_key(monkeypatch):
    monkeypatch.delenv("GW_AUTH_KEY", raising=False)
    with pytest.raises(ValueError):
        GatewayConfig(upstream_host="127.0.0.1", upstream_port=1)
    monkeypatch.setenv("GW_AUTH_KEY", "from-env")
    config = GatewayConfig(upstream_host="127.0.0.1", upstream_port=1)
    assert config.auth_key == b"from-env"
