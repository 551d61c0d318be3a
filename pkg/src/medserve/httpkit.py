"""Minimal asyncio HTTP/1.1 plumbing shared by every service in the stack.

Supports exactly what the stack needs: keep-alive connections, Content-Length
framed bodies, JSON helpers, and a 4-byte big-endian length-prefixed framing
for the RPC listener. No chunked encoding, no TLS, no compression.
"""

from __future__ import annotations

import asyncio
import json
import struct
from dataclasses import dataclass, field
from typing import Awaitable, Callable

MAX_HEADER_BYTES = 16 * 1024
MAX_BODY_BYTES = 4 * 1024 * 1024
MAX_FRAME_BYTES = 1024 * 1024

_REASONS = {
    200: "OK",
    400: "Bad Request",
    401: "Unauthorized",
    403: "Forbidden",
    404: "Not Found",
    500: "Internal Server Error",
    501: "Not Implemented",
    502: "Bad Gateway",
    503: "Service Unavailable",
    504: "Gateway Timeout",
}


class ProtocolError(Exception):
    """Malformed HTTP on the wire; the connection is closed after replying."""


@dataclass
class Request:
    method: str
    path: str
    headers: dict[str, str]
    body: bytes

    def json(self) -> dict:
        try:
            obj = json.loads(self.body.decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise ValueError(f"body is not valid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise ValueError("body must be a JSON object")
        return obj


@dataclass
class Response:
    status: int = 200
    body: bytes = b""
    content_type: str = "application/json"
    headers: dict[str, str] = field(default_factory=dict)

    @classmethod
    def json(cls, obj: dict, status: int = 200) -> "Response":
        return cls(status=status, body=json.dumps(obj).encode("utf-8"))

    @classmethod
    def error(cls, status: int, code: str, message: str) -> "Response":
        return cls.json({"error": code, "message": message}, status=status)


Handler = Callable[[Request], Awaitable[Response]]


async def _read_request(reader: asyncio.StreamReader) -> Request | None:
    try:
        line = await reader.readuntil(b"\r\n")
    except asyncio.IncompleteReadError as exc:
        if not exc.partial:
            return None  # clean close between requests
        raise ProtocolError("truncated request line") from exc
    except asyncio.LimitOverrunError as exc:
        raise ProtocolError("request line too long") from exc
    parts = line.decode("latin-1").strip().split(" ")
    if len(parts) != 3:
        raise ProtocolError(f"malformed request line: {line!r}")
    method, target, _version = parts

    headers: dict[str, str] = {}
    total = len(line)
    while True:
        try:
            line = await reader.readuntil(b"\r\n")
        except (asyncio.IncompleteReadError, asyncio.LimitOverrunError) as exc:
            raise ProtocolError("truncated headers") from exc
        total += len(line)
        if total > MAX_HEADER_BYTES:
            raise ProtocolError("headers too large")
        if line == b"\r\n":
            break
        name, sep, value = line.decode("latin-1").partition(":")
        if not sep:
            raise ProtocolError(f"malformed header line: {line!r}")
        headers[name.strip().lower()] = value.strip()

    body = b""
    if "content-length" in headers:
        try:
            length = int(headers["content-length"])
        except ValueError as exc:
            raise ProtocolError("bad content-length") from exc
        if length < 0 or length > MAX_BODY_BYTES:
            raise ProtocolError("content-length out of range")
        try:
            body = await reader.readexactly(length)
        except asyncio.IncompleteReadError as exc:
            raise ProtocolError("truncated body") from exc
    return Request(method=method, path=target, headers=headers, body=body)


def _encode_response(resp: Response, *, close: bool) -> bytes:
    reason = _REASONS.get(resp.status, "Unknown")
    head = [f"HTTP/1.1 {resp.status} {reason}"]
    head.append(f"content-type: {resp.content_type}")
    head.append(f"content-length: {len(resp.body)}")
    for key, value in resp.headers.items():
        head.append(f"{key}: {value}")
    if close:
        head.append("connection: close")
    return ("\r\n".join(head) + "\r\n\r\n").encode("latin-1") + resp.body


class HttpServer:
    """Keep-alive HTTP server around a single async handler."""

    def __init__(self, handler: Handler, host: str = "127.0.0.1", port: int = 0):
        self._handler = handler
        self.host = host
        self.port = port
        self._server: asyncio.base_events.Server | None = None

    async def start(self) -> None:
        self._server = await asyncio.start_server(
            self._serve_connection, self.host, self.port, limit=MAX_HEADER_BYTES
        )
        self.port = self._server.sockets[0].getsockname()[1]

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None

    async def _serve_connection(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter
    ) -> None:
        try:
            while True:
                try:
                    request = await _read_request(reader)
                except ProtocolError as exc:
                    writer.write(
                        _encode_response(
                            Response.error(400, "bad_request", str(exc)), close=True
                        )
                    )
                    await writer.drain()
                    break
                if request is None:
                    break
                try:
                    response = await self._handler(request)
                except Exception as exc:  # handler bug; don't kill the server
                    response = Response.error(500, "internal", f"{type(exc).__name__}: {exc}")
                close = request.headers.get("connection", "").lower() == "close"
                writer.write(_encode_response(response, close=close))
                await writer.drain()
                if close:
                    break
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass


class ClientError(Exception):
    """Transport-level client failure (connect, reset, truncation)."""


class HttpConnection:
    """One persistent client connection; callers reconnect by calling again."""

    def __init__(self, host: str, port: int):
        self.host = host
        self.port = port
        self._reader: asyncio.StreamReader | None = None
        self._writer: asyncio.StreamWriter | None = None

    @property
    def connected(self) -> bool:
        return self._writer is not None

    async def _connect(self) -> None:
        try:
            self._reader, self._writer = await asyncio.open_connection(
                self.host, self.port, limit=MAX_HEADER_BYTES
            )
        except OSError as exc:
            raise ClientError(f"connect to {self.host}:{self.port} failed: {exc}") from exc

    def close(self) -> None:
        if self._writer is not None:
            self._writer.close()
        self._reader = None
        self._writer = None

    async def request(
        self,
        method: str,
        path: str,
        body: bytes = b"",
        headers: dict[str, str] | None = None,
    ) -> tuple[int, bytes]:
        if self._writer is None:
            await self._connect()
        assert self._reader is not None and self._writer is not None
        head = [
            f"{method} {path} HTTP/1.1",
            f"host: {self.host}:{self.port}",
            f"content-length: {len(body)}",
        ]
        if body:
            head.append("content-type: application/json")
        for key, value in (headers or {}).items():
            head.append(f"{key}: {value}")
        payload = ("\r\n".join(head) + "\r\n\r\n").encode("latin-1") + body
        try:
            self._writer.write(payload)
            await self._writer.drain()
            status, resp_headers = await self._read_head()
            length = int(resp_headers.get("content-length", "0"))
            resp_body = await self._reader.readexactly(length) if length else b""
            if resp_headers.get("connection", "").lower() == "close":
                self.close()
            return status, resp_body
        except (ConnectionError, asyncio.IncompleteReadError, OSError) as exc:
            self.close()
            raise ClientError(f"request failed: {exc}") from exc

    async def _read_head(self) -> tuple[int, dict[str, str]]:
        assert self._reader is not None
        status_line = await self._reader.readuntil(b"\r\n")
        parts = status_line.decode("latin-1").split(" ", 2)
        try:
            status = int(parts[1])
        except (IndexError, ValueError) as exc:
            raise ClientError(f"malformed status line: {status_line!r}") from exc
        headers: dict[str, str] = {}
        while True:
            line = await self._reader.readuntil(b"\r\n")
            if line == b"\r\n":
                return status, headers
            name, sep, value = line.decode("latin-1").partition(":")
            if sep:
                headers[name.strip().lower()] = value.strip()


async def request_once(
    host: str,
    port: int,
    method: str,
    path: str,
    body: bytes = b"",
    headers: dict[str, str] | None = None,
    timeout: float = 10.0,
) -> tuple[int, bytes]:
    """One-shot request on a fresh connection; convenience for probes and tests."""
    conn = HttpConnection(host, port)
    try:
        return await asyncio.wait_for(conn.request(method, path, body, headers), timeout)
    finally:
        conn.close()


# ---------------------------------------------------------------------------
# Length-prefixed framing: 4-byte big-endian payload size, then the payload.

class FrameError(Exception):
    """Oversize or malformed frame; the connection must be closed."""


def encode_frame(payload: bytes) -> bytes:
    if len(payload) > MAX_FRAME_BYTES:
        raise FrameError(f"frame of {len(payload)} bytes exceeds {MAX_FRAME_BYTES}")
    return struct.pack(">I", len(payload)) + payload


async def read_frame(reader: asyncio.StreamReader) -> bytes | None:
    """Read one frame; None on clean EOF before a prefix.

    Raises FrameError for an oversize prefix and IncompleteReadError for a
    truncated payload, so callers can tell the cases apart.
    """
    try:
        prefix = await reader.readexactly(4)
    except asyncio.IncompleteReadError as exc:
        if not exc.partial:
            return None
        raise
    (length,) = struct.unpack(">I", prefix)
    if length > MAX_FRAME_BYTES:
        raise FrameError(f"declared frame of {length} bytes exceeds {MAX_FRAME_BYTES}")
    return await reader.readexactly(length)
