"""The system grid compared by ``run-all``.

Ids follow the usual numbering of the comparison table: 2 is the plain
x-vector, 3 adds the pair network, 4 adds the triplet loss, 5/6 are joint with
two weightings, 8 is joint scored on embedding B, 9/10 are score fusions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import ConfigError


@dataclass(frozen=True)
class SystemSpec:
    id: str
    kind: str  # baseline | simnet | triplet | joint | fusion
    description: str
    beta: float | None = None  # None -> take the configured value
    gamma: float | None = None
    layer: str = "A"
    fuse: tuple[str, ...] = ()

    @property
    def name(self) -> str:
        return f"sys{self.id}"

    @property
    def trained(self) -> bool:
        return self.kind != "fusion"


GRID: dict[str, SystemSpec] = {s.id: s for s in (
    SystemSpec("2", "baseline", "x-vector, softmax only"),
    SystemSpec("3", "simnet", "x-vector + similarity network"),
    SystemSpec("4", "triplet", "x-vector + triplet loss"),
    SystemSpec("5", "joint", "joint, beta=0.1 gamma=0.3", beta=0.1, gamma=0.3),
    SystemSpec("6", "joint", "joint, beta=0.3 gamma=0.1", beta=0.3, gamma=0.1),
    SystemSpec("8", "joint", "joint, beta=0.3 gamma=0.1, embedding B", beta=0.3, gamma=0.1, layer="B"),
    SystemSpec("9", "fusion", "fusion of 2 and 4", fuse=("2", "4")),
    SystemSpec("10", "fusion", "fusion of 3 and 4", fuse=("3", "4")),
)}


def _norm(token: str) -> str:
    t = token.strip().lower()
    return t[3:] if t.startswith("sys") else t


def parse_systems(tokens: Sequence[str]) -> list[SystemSpec]:
    """Resolve ids like ``2`` or ``sys2``; fusion members are pulled in automatically."""
    wanted: list[str] = []
    for tok in tokens:
        sid = _norm(tok)
        if sid not in GRID:
            raise ConfigError(f"unknown system {tok!r}; known: {', '.join(GRID)}")
        for dep in GRID[sid].fuse + (sid,):
            if dep not in wanted:
                wanted.append(dep)
    if not wanted:
        raise ConfigError("no systems selected")
    order = list(GRID)
    return [GRID[s] for s in sorted(wanted, key=order.index)]


def get_system(token: str) -> SystemSpec:
    sid = _norm(token)
    if sid not in GRID:
        raise ConfigError(f"unknown system {token!r}; known: {', '.join(GRID)}")
    return GRID[sid]
