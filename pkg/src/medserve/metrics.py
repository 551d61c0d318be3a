"""Tiny labeled counter/gauge store with a text exposition format.

Rendered lines look like ``name{label="value"} 3`` with labels sorted by
key, one series per line, counters first in registration order.
"""

from __future__ import annotations

from collections import OrderedDict


def _series_key(labels: dict[str, str]) -> tuple[tuple[str, str], ...]:
    return tuple(sorted(labels.items()))


class Metrics:
    def __init__(self) -> None:
        self._values: "OrderedDict[tuple[str, tuple[tuple[str, str], ...]], float]" = (
            OrderedDict()
        )

    def ensure(self, name: str, labels: dict[str, str]) -> None:
        """Pre-register a series at 0 so it renders before first use."""
        self._values.setdefault((name, _series_key(labels)), 0.0)

    def add(self, name: str, labels: dict[str, str], value: float = 1.0) -> None:
        key = (name, _series_key(labels))
        self._values[key] = self._values.get(key, 0.0) + value

    def set(self, name: str, labels: dict[str, str], value: float) -> None:
        self._values[(name, _series_key(labels))] = value

    def get(self, name: str, labels: dict[str, str]) -> float:
        return self._values.get((name, _series_key(labels)), 0.0)

    def sum(self, name: str) -> float:
        return sum(v for (n, _), v in self._values.items() if n == name)

    def render(self) -> str:
        lines = []
        for (name, labels), value in self._values.items():
            label_text = ",".join(f'{k}="{v}"' for k, v in labels)
            if value == int(value):
                rendered = str(int(value))
            else:
                rendered = repr(value)
            lines.append(f"{name}{{{label_text}}} {rendered}" if label_text else f"{name} {rendered}")
        return "\n".join(lines) + "\n"


def parse_exposition(text: str) -> dict[tuple[str, tuple[tuple[str, str], ...]], float]:
    """Parse render() output back into a series map; used by scrapers and tests."""
    out: dict[tuple[str, tuple[tuple[str, str], ...]], float] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        head, _, value = line.rpartition(" ")
        if "{" in head:
            name, _, rest = head.partition("{")
            rest = rest.rstrip("}")
            labels = []
            if rest:
                for part in rest.split(","):
                    k, _, v = part.partition("=")
                    labels.append((k, v.strip('"')))
            out[(name, tuple(sorted(labels)))] = float(value)
        else:
            out[(head, ())] = float(value)
    return out
