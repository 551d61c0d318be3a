"""Shared-key bearer tokens for the gateway.

A token is three dot-separated unpadded base64url segments: a fixed header,
a claims payload, and an HMAC-SHA256 signature over ``header.payload``.
Verification is ordered: structure, then signature, then expiry, then scope,
and reports the first failure only.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import json
import time

AUTH_KEY_ENV = "GW_AUTH_KEY"
REQUIRED_SCOPE = "infer"

_HEADER = {"alg": "HS256", "typ": "token"}


class TokenError(Exception):
    """Verification failure; category is one of
    malformed / bad_signature / expired / forbidden."""

    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _b64encode(raw: bytes) -> str:
    return base64.urlsafe_b64encode(raw).rstrip(b"=").decode("ascii")


def _b64decode(segment: str) -> bytes:
    pad = "=" * (-len(segment) % 4)
    return base64.urlsafe_b64decode(segment + pad)


def sign_token(key: bytes, sub: str, scope: str, exp: int) -> str:
    """Mint a signed token; exp is an absolute unix timestamp in seconds."""
    header = _b64encode(json.dumps(_HEADER, separators=(",", ":")).encode())
    payload = _b64encode(
        json.dumps({"sub": sub, "scope": scope, "exp": exp}, separators=(",", ":")).encode()
    )
    signing_input = f"{header}.{payload}".encode("ascii")
    sig = hmac.new(key, signing_input, hashlib.sha256).digest()
    return f"{header}.{payload}.{_b64encode(sig)}"


def verify_token(token: str, key: bytes, now: float | None = None) -> dict:
    """Return the claims of a valid token or raise TokenError."""
    if now is None:
        now = time.time()

    parts = token.split(".")
    if len(parts) != 3:
        raise TokenError("malformed", "token must have exactly three segments")
    try:
        header_raw = _b64decode(parts[0])
        payload_raw = _b64decode(parts[1])
        sig = _b64decode(parts[2])
    except (binascii.Error, ValueError) as exc:
        raise TokenError("malformed", f"segment is not base64url: {exc}") from exc
    try:
        header = json.loads(header_raw)
        claims = json.loads(payload_raw)
    except (ValueError, UnicodeDecodeError) as exc:
        raise TokenError("malformed", "header or payload is not JSON") from exc
    if not isinstance(header, dict) or not isinstance(claims, dict):
        raise TokenError("malformed", "header and payload must be JSON objects")
    if header.get("alg") != "HS256":
        raise TokenError("malformed", "unsupported alg")
    exp = claims.get("exp")
    if not isinstance(exp, (int, float)) or isinstance(exp, bool):
        raise TokenError("malformed", "exp claim missing or not numeric")
    if not isinstance(claims.get("scope"), str):
        raise TokenError("malformed", "scope claim missing or not a string")

    signing_input = f"{parts[0]}.{parts[1]}".encode("ascii")
    expected = hmac.new(key, signing_input, hashlib.sha256).digest()
    if not hmac.compare_digest(sig, expected):
        raise TokenError("bad_signature", "signature mismatch")

    if exp <= now:
        raise TokenError("expired", "token expired")
    if REQUIRED_SCOPE not in claims["scope"].split():
        raise TokenError("forbidden", f"scope lacks {REQUIRED_SCOPE!r}")
    return claims
