"""Model registry and the lexicon scoring runtime.

Models live on disk under ``<root>/<name>/<version>/model.config`` where
``version`` is a positive integer directory name.  A registry load produces
an immutable snapshot; reloading produces a fresh snapshot and never mutates
the old one, which is what lets the server swap registries under load.
"""

from __future__ import annotations

import asyncio
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

MODEL_KINDS = ("lexicon", "synthetic-echo")

# Service-time calibrations used by the benchmark matrix.  gpu-like has a
# high fixed cost and a small marginal per-item cost, so batching pays off;
# cpu-like is the opposite and models a process that scales with items.
COST_MODELS = {
    "gpu-like": (25.0, 0.5),
    "cpu-like": (2.0, 18.0),
}

_NAME_RE = re.compile(r"^[a-z0-9_-]+$")


class RegistryError(Exception):
    """Raised when a registry root cannot be read at all."""


@dataclass(frozen=True)
class CostModel:
    """Injected service time: a batch of b items costs base_ms + b * per_item_ms."""

    base_ms: float
    per_item_ms: float

    def __post_init__(self) -> None:
        if self.base_ms < 0 or self.per_item_ms < 0:
            raise ValueError("cost model terms must be non-negative")

    def batch_ms(self, batch_size: int) -> float:
        return self.base_ms + batch_size * self.per_item_ms


@dataclass(frozen=True)
class ModelDescriptor:
    name: str
    version: int
    kind: str
    cost: CostModel
    max_seq_len: int
    lexicon_path: str | None = None
    lexicon: dict[str, int] | None = field(default=None, repr=False)


@dataclass(frozen=True)
class SentimentOutput:
    label: str
    score: float
    model_version: int


@dataclass(frozen=True)
class ModelRegistry:
    """One immutable snapshot of the on-disk model tree."""

    root: str
    entries: dict[tuple[str, int], ModelDescriptor]
    latest: dict[str, int]
    warnings: tuple[str, ...] = ()

    def resolve(self, name: str, version: int | None = None) -> ModelDescriptor | None:
        if version is None:
            version = self.latest.get(name)
            if version is None:
                return None
        return self.entries.get((name, version))


def parse_lexicon(path: Path) -> dict[str, int]:
    """Parse a tab-separated token/polarity file; duplicate tokens: last wins."""
    table: dict[str, int] = {}
    text = path.read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        token, sep, value = line.partition("\t")
        if not sep or not token:
            raise ValueError(f"{path}:{lineno}: expected token<TAB>polarity")
        table[token.lower()] = int(value.strip())
    return table


def _parse_config(path: Path) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        pairs[key.strip()] = value.strip()
    return pairs


def _load_descriptor(name: str, version: int, vdir: Path) -> ModelDescriptor:
    cfg = _parse_config(vdir / "model.config")
    kind = cfg.get("kind", "")
    if kind not in MODEL_KINDS:
        raise ValueError(f"{vdir}: unknown kind {kind!r}")
    cost = CostModel(float(cfg.get("base_ms", "0")), float(cfg.get("per_item_ms", "0")))
    max_seq_len = int(cfg.get("max_seq_len", "128"))
    if max_seq_len < 1:
        raise ValueError(f"{vdir}: max_seq_len must be >= 1")
    lexicon_path = None
    lexicon = None
    if kind == "lexicon":
        rel = cfg.get("lexicon")
        if not rel:
            raise ValueError(f"{vdir}: lexicon kind requires a lexicon= path")
        lexicon_path = str(vdir / rel)
        lexicon = parse_lexicon(vdir / rel)
    return ModelDescriptor(
        name=name,
        version=version,
        kind=kind,
        cost=cost,
        max_seq_len=max_seq_len,
        lexicon_path=lexicon_path,
        lexicon=lexicon,
    )


def load_registry(root: str | os.PathLike[str]) -> ModelRegistry:
    """Scan a registry root and return a snapshot of every loadable model version.

    Malformed names, non-numeric version directories, and unparsable or
    incomplete model configs become warnings on the snapshot rather than
    failures; an unreadable root raises RegistryError.
    """
    rootp = Path(root)
    try:
        names = sorted(p for p in rootp.iterdir() if p.is_dir())
    except OSError as exc:
        raise RegistryError(f"registry root unreadable: {rootp}: {exc}") from exc

    entries: dict[tuple[str, int], ModelDescriptor] = {}
    latest: dict[str, int] = {}
    warnings: list[str] = []
    for namedir in names:
        name = namedir.name
        if not _NAME_RE.match(name):
            warnings.append(f"skipping model dir with invalid name: {name!r}")
            continue
        for vdir in sorted(namedir.iterdir()):
            if not vdir.is_dir():
                continue
            if not vdir.name.isdigit() or int(vdir.name) < 1:
                warnings.append(f"{name}: skipping non-numeric version dir {vdir.name!r}")
                continue
            version = int(vdir.name)
            try:
                entries[(name, version)] = _load_descriptor(name, version, vdir)
            except (OSError, ValueError) as exc:
                warnings.append(f"{name}/{version}: {exc}")
                continue
            if version > latest.get(name, 0):
                latest[name] = version
    return ModelRegistry(
        root=str(rootp), entries=entries, latest=latest, warnings=tuple(warnings)
    )


def reload_registry(old: ModelRegistry) -> ModelRegistry:
    """Rescan the same root; the old snapshot stays valid for in-flight work."""
    return load_registry(old.root)


def score_tokens(lexicon: dict[str, int] | None, tokens: list[str]) -> tuple[str, float]:
    """Sum lexicon polarities over the tokens and reduce to a label and score.

    score is |sum| normalized by the token count and clamped to [0, 1];
    it is exactly 0 iff the label is neutral.
    """
    table = lexicon or {}
    s = sum(table.get(tok, 0) for tok in tokens)
    if s > 0:
        label = "positive"
    elif s < 0:
        label = "negative"
    else:
        return "neutral", 0.0
    return label, min(1.0, abs(s) / max(1, len(tokens)))


async def infer_batch(
    model: ModelDescriptor, inputs: list[list[str]]
) -> list[SentimentOutput]:
    """Score a batch of tokenized inputs after injecting the model's service time.

    The injected delay is a function of the batch size only, which is the whole
    point: it makes batch formation observable in wall-clock measurements.
    """
    if not inputs:
        raise ValueError("infer_batch requires a non-empty batch")
    delay = model.cost.batch_ms(len(inputs)) / 1000.0
    if delay > 0:
        await asyncio.sleep(delay)
    return [
        SentimentOutput(*score_tokens(model.lexicon, toks), model_version=model.version)
        for toks in inputs
    ]


def infer_batch_sync(model: ModelDescriptor, inputs: list[list[str]]) -> list[SentimentOutput]:
    """Blocking variant of infer_batch for callers without an event loop."""
    if not inputs:
        raise ValueError("infer_batch requires a non-empty batch")
    delay = model.cost.batch_ms(len(inputs)) / 1000.0
    if delay > 0:
        time.sleep(delay)
    return [
        SentimentOutput(*score_tokens(model.lexicon, toks), model_version=model.version)
        for toks in inputs
    ]


DEMO_LEXICON = {
    "good": 1,
    "great": 2,
    "improved": 1,
    "stable": 1,
    "excellent": 2,
    "recovering": 1,
    "bad": -1,
    "worse": -2,
    "poor": -1,
    "critical": -2,
    "declining": -1,
    "painful": -1,
}


def write_model_dir(
    root: str | os.PathLike[str],
    name: str,
    version: int,
    *,
    kind: str = "lexicon",
    base_ms: float = 0.0,
    per_item_ms: float = 0.0,
    max_seq_len: int = 128,
    lexicon: dict[str, int] | None = None,
) -> Path:
    """Write one model version directory; used by the benchmark matrix and tests."""
    vdir = Path(root) / name / str(version)
    vdir.mkdir(parents=True, exist_ok=True)
    lines = [
        f"kind={kind}",
        f"base_ms={base_ms:g}",
        f"per_item_ms={per_item_ms:g}",
        f"max_seq_len={max_seq_len}",
    ]
    if kind == "lexicon":
        table = DEMO_LEXICON if lexicon is None else lexicon
        lex_lines = [f"{tok}\t{pol}" for tok, pol in table.items()]
        (vdir / "lexicon.tsv").write_text("\n".join(lex_lines) + "\n", encoding="utf-8")
        lines.append("lexicon=lexicon.tsv")
    (vdir / "model.config").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return vdir
