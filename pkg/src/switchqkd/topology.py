"""Node and link identifiers, the bar/cross mapping, and the switch fabric state machine."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Union


class Role(enum.Enum):
    ALICE = "A"
    BOB = "B"


@dataclass(frozen=True, order=True)
class NodeId:
    role: Role
    index: int

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError(f"node index must be positive, got {self.index}")

    def __str__(self) -> str:
        return f"{self.role.value}{self.index}"

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        m = re.fullmatch(r"([AB])(\d+)", text.strip())
        if not m:
            raise ValueError(f"not a node id: {text!r}")
        return cls(Role(m.group(1)), int(m.group(2)))


def alice(i: int) -> NodeId:
    return NodeId(Role.ALICE, i)


def bob(i: int) -> NodeId:
    return NodeId(Role.BOB, i)


_REFERENCE_NAMES = {(1, 1): "L1", (2, 2): "L2", (1, 2): "L3", (2, 1): "L4"}
_REFERENCE_PAIRS = {v: k for k, v in _REFERENCE_NAMES.items()}


@dataclass(frozen=True, order=True)
class LinkId:
    """An Alice-Bob pairing.  The four reference links print as L1..L4."""

    alice_index: int
    bob_index: int

    @property
    def alice(self) -> NodeId:
        return alice(self.alice_index)

    @property
    def bob(self) -> NodeId:
        return bob(self.bob_index)

    @property
    def name(self) -> str:
        return _REFERENCE_NAMES.get(
            (self.alice_index, self.bob_index), f"A{self.alice_index}-B{self.bob_index}"
        )

    def __str__(self) -> str:
        return self.name

    @classmethod
    def parse(cls, text: str) -> "LinkId":
        text = text.strip()
        if text in _REFERENCE_PAIRS:
            return cls(*_REFERENCE_PAIRS[text])
        m = re.fullmatch(r"A(\d+)-B(\d+)", text)
        if not m:
            raise ValueError(f"not a link id: {text!r}")
        return cls(int(m.group(1)), int(m.group(2)))


L1 = LinkId(1, 1)
L2 = LinkId(2, 2)
L3 = LinkId(1, 2)
L4 = LinkId(2, 1)
REFERENCE_LINKS = (L1, L2, L3, L4)


class SwitchConfiguration(enum.Enum):
    BAR = "bar"
    CROSS = "cross"

    @property
    def other(self) -> "SwitchConfiguration":
        return SwitchConfiguration.CROSS if self is SwitchConfiguration.BAR else SwitchConfiguration.BAR

    def __str__(self) -> str:
        return self.value


BAR = SwitchConfiguration.BAR
CROSS = SwitchConfiguration.CROSS


def links_for(config: SwitchConfiguration, n: int = 2) -> tuple[tuple[LinkId, NodeId, NodeId], ...]:
    """Links live under ``config`` in an n x n fabric, as (link, alice, bob) triples.

    Bar pairs Ai with Bi; cross pairs Ai with B(i+1), wrapping around.
    """
    if n < 1:
        return ()
    out = []
    for i in range(1, n + 1):
        j = i if config is BAR else i % n + 1
        link = LinkId(i, j)
        out.append((link, link.alice, link.bob))
    return tuple(out)


def link_ids_for(config: SwitchConfiguration, n: int = 2) -> tuple[LinkId, ...]:
    return tuple(t[0] for t in links_for(config, n))


def config_of(link: LinkId, n: int = 2) -> SwitchConfiguration:
    """Inverse of :func:`links_for`."""
    for config in SwitchConfiguration:
        if link in link_ids_for(config, n):
            return config
    raise ValueError(f"{link} is not live under any configuration of a {n}x{n} fabric")


def psk_requirement(n_alice: int, n_bob: int) -> int:
    """Pre-shared keys needed so every Alice-Bob pairing can authenticate once."""
    if n_alice < 0 or n_bob < 0:
        raise ValueError("node counts must be non-negative")
    return n_alice * n_bob


def pba_requirement(n_nodes: int) -> int:
    """PUF authenticators needed: one per node."""
    if n_nodes < 0:
        raise ValueError("node count must be non-negative")
    return n_nodes


# -- fabric state machine ---------------------------------------------------


@dataclass(frozen=True)
class Stable:
    config: SwitchConfiguration


@dataclass(frozen=True)
class Switching:
    source: SwitchConfiguration
    target: SwitchConfiguration
    started_at: float

    def __post_init__(self) -> None:
        if self.source is self.target:
            raise ValueError("switching requires distinct source and target")


FabricState = Union[Stable, Switching]


class FabricStateError(RuntimeError):
    pass


class SwitchFabric:
    """Holds the live fabric state and only permits the legal transitions.

    Stable(x) -> Switching(x, y) via :meth:`begin`, then Switching(x, y) ->
    Stable(y) via :meth:`complete`.  :meth:`revert` (Switching(x, y) ->
    Stable(x)) exists for aborted switches.
    """

    def __init__(self, initial: SwitchConfiguration = BAR) -> None:
        self.state: FabricState = Stable(initial)

    @property
    def stable(self) -> bool:
        return isinstance(self.state, Stable)

    @property
    def config(self) -> SwitchConfiguration | None:
        return self.state.config if isinstance(self.state, Stable) else None

    def begin(self, target: SwitchConfiguration, now: float) -> Switching:
        if not isinstance(self.state, Stable):
            raise FabricStateError(f"cannot begin a switch while {self.state}")
        if self.state.config is target:
            raise FabricStateError(f"fabric already in {target}")
        self.state = Switching(self.state.config, target, now)
        return self.state

    def complete(self) -> Stable:
        if not isinstance(self.state, Switching):
            raise FabricStateError(f"no switch in progress ({self.state})")
        self.state = Stable(self.state.target)
        return self.state

    def revert(self) -> Stable:
        if not isinstance(self.state, Switching):
            raise FabricStateError(f"no switch in progress ({self.state})")
        self.state = Stable(self.state.source)
        return self.state
