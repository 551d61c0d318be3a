"""Standalone preprocess service exposing scrub+normalize over HTTP."""

from __future__ import annotations

from . import phi
from .httpkit import HttpServer, Request, Response

_PREPROCESS_FIELDS = {"text"}


class PhiService:
    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 9100,
        max_seq_len: int = phi.DEFAULT_MAX_SEQ_LEN,
    ):
        self.max_seq_len = max_seq_len
        self._http = HttpServer(self._handle, host, port)
        self.ready = False

    @property
    def port(self) -> int:
        return self._http.port

    async def start(self) -> None:
        await self._http.start()
        self.ready = True

    async def stop(self) -> None:
        self.ready = False
        await self._http.stop()

    async def _handle(self, request: Request) -> Response:
        if request.method == "GET" and request.path == "/health/live":
            return Response.json({"live": True})
        if request.method == "GET" and request.path == "/health/ready":
            return Response.json({"ready": self.ready}, status=200 if self.ready else 503)
        if request.method == "POST" and request.path == "/v1/preprocess":
            try:
                obj = request.json()
            except ValueError as exc:
                return Response.error(400, "bad_request", str(exc))
            unknown = set(obj) - _PREPROCESS_FIELDS
            if unknown:
                return Response.error(
                    400, "bad_request", f"unknown fields: {sorted(unknown)}"
                )
            text = obj.get("text")
            if not isinstance(text, str):
                return Response.error(400, "bad_request", "text must be a string")
            if len(text.encode("utf-8")) > phi.MAX_TEXT_BYTES:
                return Response.error(
                    400, "bad_request", f"text exceeds {phi.MAX_TEXT_BYTES} bytes"
                )
            return Response.json(phi.preprocess(text, self.max_seq_len))
        return Response.error(404, "not_found", f"no route {request.method} {request.path}")
