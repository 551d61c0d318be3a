"""De-identification and text normalization for the clinical text path.

Scrub rules run against the UTF-8 byte form of the input so span offsets are
byte offsets into the original text, stable across any later re-encoding.
Every pattern is ASCII-only, so replacements always splice at character
boundaries and the scrubbed output stays valid UTF-8.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

# Rule order doubles as the tie-break order when two matches start at the
# same offset with the same length.
SCRUB_RULES: list[tuple[str, re.Pattern[bytes]]] = [
    ("SSN", re.compile(rb"\b\d{3}-\d{2}-\d{4}\b")),
    ("PHONE", re.compile(rb"\b(\+1[ -]?)?(\(\d{3}\)|\d{3})[ -]?\d{3}[ -]?\d{4}\b")),
    ("EMAIL", re.compile(rb"\b[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}\b")),
    ("DATE", re.compile(rb"\b\d{4}-\d{2}-\d{2}\b|\b\d{1,2}/\d{1,2}/\d{2,4}\b")),
    ("MRN", re.compile(rb"\bMRN[:# ]?\d{5,10}\b")),
]

_CATEGORY_RANK = {name: i for i, (name, _) in enumerate(SCRUB_RULES)}

_TOKEN_RE = re.compile(r"[a-z0-9]+")

MAX_TEXT_BYTES = 16 * 1024
DEFAULT_MAX_SEQ_LEN = 128


@dataclass(frozen=True)
class ScrubSpan:
    """Half-open byte range [start, end) in the original text, per category."""

    start: int
    end: int
    category: str


@dataclass(frozen=True)
class NormalizedInput:
    tokens: tuple[str, ...]
    original_length: int
    truncated: bool


def deidentify(text: str) -> tuple[str, list[ScrubSpan]]:
    """Replace every rule match with its [CATEGORY] placeholder.

    Overlaps resolve leftmost-first, then longest, then by rule order.
    Placeholders contain no digits or '@', so no rule can match scrubbed
    output and the operation is idempotent.
    """
    raw = text.encode("utf-8")
    candidates: list[tuple[int, int, int, int]] = []
    for rank, (name, pattern) in enumerate(SCRUB_RULES):
        for m in pattern.finditer(raw):
            candidates.append((m.start(), -(m.end() - m.start()), rank, m.end()))
    candidates.sort()

    spans: list[ScrubSpan] = []
    last_end = 0
    for start, neg_len, rank, end in candidates:
        if start < last_end:
            continue
        spans.append(ScrubSpan(start, end, SCRUB_RULES[rank][0]))
        last_end = end

    pieces: list[bytes] = []
    cursor = 0
    for span in spans:
        pieces.append(raw[cursor : span.start])
        pieces.append(b"[" + span.category.encode("ascii") + b"]")
        cursor = span.end
    pieces.append(raw[cursor:])
    return b"".join(pieces).decode("utf-8"), spans


def normalize(text: str, max_seq_len: int = DEFAULT_MAX_SEQ_LEN) -> NormalizedInput:
    """Lowercase, split on non-alphanumeric runs, truncate to max_seq_len tokens."""
    if max_seq_len < 1:
        raise ValueError("max_seq_len must be >= 1")
    tokens = _TOKEN_RE.findall(text.lower())
    truncated = len(tokens) > max_seq_len
    return NormalizedInput(
        tokens=tuple(tokens[:max_seq_len]),
        original_length=len(text),
        truncated=truncated,
    )


def preprocess(text: str, max_seq_len: int = DEFAULT_MAX_SEQ_LEN) -> dict:
    """deidentify then normalize; the JSON-shaped result served by the service."""
    scrubbed, spans = deidentify(text)
    norm = normalize(scrubbed, max_seq_len)
    return {
        "scrubbed": scrubbed,
        "spans": [
            {"start": s.start, "end": s.end, "category": s.category} for s in spans
        ],
        "tokens": list(norm.tokens),
    }
