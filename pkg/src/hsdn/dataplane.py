"""Per-node forwarding pipeline: flow tables, tag stacks and packets."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

ANY = None


class _Absent:
    """Matches a packet whose tag stack is empty."""
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self) -> str:
        return "ABSENT"

    def __reduce__(self):
        return (_Absent, ())


ABSENT = _Absent()


@dataclass(frozen=True, order=True)
class DetourLabel:
    """Tag naming the link a detouring packet must avoid."""
    a: int
    b: int

    def __str__(self) -> str:
        return f"detour({self.a}-{self.b})"


Tag = Union[int, DetourLabel]


@dataclass(frozen=True)
class Prefix:
    """Binary prefix over fixed-width node ids, e.g. ``1**`` for width 3."""
    value: int
    length: int
    width: int

    def matches(self, node_id: int) -> bool:
        shift = self.width - self.length
        return (node_id >> shift) == self.value

    def covered(self) -> range:
        shift = self.width - self.length
        return range(self.value << shift, (self.value + 1) << shift)

    def __str__(self) -> str:
        bits = format(self.value, f"0{self.length}b") if self.length else ""
        return bits + "*" * (self.width - self.length)


DstMatch = Union[int, Prefix, None]


@dataclass(frozen=True)
class Match:
    dst: DstMatch = ANY
    top_tag: object = ANY

    def fits(self, dst: int, top: Optional[Tag]) -> bool:
        d = self.dst
        if d is not None:
            if isinstance(d, Prefix):
                if not d.matches(dst):
                    return False
            elif d != dst:
                return False
        t = self.top_tag
        if t is None:
            return True
        if t is ABSENT:
            return top is None
        return top == t


@dataclass(frozen=True)
class StatePred:
    """True when the local link ``(node, neighbor)`` is believed down (or up)."""
    node: int
    neighbor: int
    down: bool = True

    def holds(self, link_down: Callable[[int, int], bool]) -> bool:
        return link_down(self.node, self.neighbor) == self.down

    def __str__(self) -> str:
        return f"link {self.node}-{self.neighbor} {'down' if self.down else 'up'}"


@dataclass(frozen=True)
class Forward:
    neighbor: int


@dataclass(frozen=True)
class PopTag:
    pass


@dataclass(frozen=True)
class PushTag:
    tag: Tag


@dataclass(frozen=True)
class Drop:
    cause: str = "rule"


Action = Union[Forward, PopTag, PushTag, Drop]

RULE_KINDS = ("primary", "backup", "detour")


@dataclass(frozen=True)
class FlowRule:
    priority: int
    match: Match
    actions: tuple
    kind: str = "primary"
    origin: str = "controller"
    state_pred: Optional[StatePred] = None
    rule_id: int = -1

    def __post_init__(self):
        if self.priority < 0:
            raise ValueError("priority must be >= 0")
        if self.kind not in RULE_KINDS:
            raise ValueError(f"unknown rule kind {self.kind!r}")
        if self.kind == "backup" and self.state_pred is None:
            raise ValueError("backup rules must carry a state predicate")
        if sum(isinstance(a, Forward) for a in self.actions) > 1:
            raise ValueError("at most one forward action per rule")

    @property
    def key(self) -> tuple:
        """Identity of the match slot this rule occupies (for replacement)."""
        return (self.priority, self.match, self.state_pred, self.kind)

    def with_id(self, rule_id: int) -> "FlowRule":
        return FlowRule(self.priority, self.match, self.actions, self.kind,
                        self.origin, self.state_pred, rule_id)

    def same_behavior(self, other: "FlowRule") -> bool:
        return (self.key == other.key and self.actions == other.actions
                and self.origin == other.origin)

    def forward_target(self) -> Optional[int]:
        for a in self.actions:
            if isinstance(a, Forward):
                return a.neighbor
        return None

    def describe(self) -> dict:
        return {
            "id": self.rule_id,
            "priority": self.priority,
            "dst": _fmt_dst(self.match.dst),
            "top_tag": _fmt_tag(self.match.top_tag),
            "pred": str(self.state_pred) if self.state_pred else None,
            "actions": [_fmt_action(a) for a in self.actions],
            "kind": self.kind,
            "origin": self.origin,
        }


def _fmt_dst(d: DstMatch) -> str:
    return "*" if d is None else str(d)


def _fmt_tag(t: object) -> str:
    if t is None:
        return "*"
    if t is ABSENT:
        return "none"
    return str(t)


def _fmt_action(a: Action) -> str:
    if isinstance(a, Forward):
        return f"fwd({a.neighbor})"
    if isinstance(a, PopTag):
        return "pop"
    if isinstance(a, PushTag):
        return f"push({a.tag})"
    return f"drop({a.cause})"


class TableOverflow(Exception):
    pass


class FlowTable:
    """Priority-ordered rule table of one node, ordered by (priority desc, rule id)."""

    def __init__(self, node: int, capacity: int = 1024):
        self.node = node
        self.capacity = capacity
        self.rules: dict[int, FlowRule] = {}
        self._ordered: Optional[list[FlowRule]] = None
        self.overflows = 0
        self.high_water = 0

    def __len__(self) -> int:
        return len(self.rules)

    def install(self, rule: FlowRule) -> bool:
        if rule.rule_id < 0:
            raise ValueError("rule needs an id before installation")
        if rule.rule_id not in self.rules and len(self.rules) >= self.capacity:
            self.overflows += 1
            return False
        self.rules[rule.rule_id] = rule
        self._ordered = None
        self.high_water = max(self.high_water, len(self.rules))
        return True

    def remove(self, rule_id: int) -> Optional[FlowRule]:
        rule = self.rules.pop(rule_id, None)
        if rule is not None:
            self._ordered = None
        return rule

    def ordered(self) -> list[FlowRule]:
        if self._ordered is None:
            self._ordered = sorted(self.rules.values(),
                                   key=lambda r: (-r.priority, r.rule_id))
        return self._ordered

    def lookup(self, dst: int, top: Optional[Tag],
               link_down: Callable[[int, int], bool]) -> Optional[FlowRule]:
        for rule in self.ordered():
            if not rule.match.fits(dst, top):
                continue
            if rule.state_pred is not None and not rule.state_pred.holds(link_down):
                continue
            return rule
        return None

    def dump(self) -> str:
        """Structured text dump, one JSON object per rule in match order."""
        lines = [json.dumps(r.describe(), sort_keys=True) for r in self.ordered()]
        return "\n".join(lines) + ("\n" if lines else "")


# --------------------------------------------------------------------------
# packets

class TagOverflow(Exception):
    pass


@dataclass
class TagStack:
    entries: list = field(default_factory=list)
    max_depth: int = 1

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def top(self) -> Optional[Tag]:
        return self.entries[0] if self.entries else None

    def push(self, tag: Tag) -> None:
        if len(self.entries) >= self.max_depth:
            raise TagOverflow(f"tag stack depth {self.max_depth} exceeded")
        self.entries.insert(0, tag)

    def pop(self) -> Tag:
        return self.entries.pop(0)


@dataclass
class Packet:
    id: int
    src: int
    dst: int
    tags: TagStack
    created_at: int = 0
    hop_count: int = 0
    epoch: int = 0
    path_log: list = field(default_factory=list)
    status: str = "in-flight"       # in-flight | delivered | dropped
    cause: str = ""

    def log(self, node: int, rule_ids: tuple) -> None:
        self.path_log.append((node, len(self.tags), rule_ids))

    def links(self) -> list[tuple[int, int]]:
        nodes = [p[0] for p in self.path_log]
        return [(a, b) for a, b in zip(nodes, nodes[1:])]


@dataclass
class Decision:
    """Result of one forwarding step at a node."""
    kind: str                       # deliver | forward | drop | miss
    next_hop: Optional[int] = None
    cause: str = ""
    rule_ids: tuple = ()


MAX_RESUBMIT = 4


def forward_step(table: FlowTable, packet: Packet,
                 link_down: Callable[[int, int], bool], ttl: int,
                 ingress_cluster: Optional[int] = None) -> Decision:
    """Apply the node's pipeline to ``packet`` and say what happens next.

    Rules whose actions end without a forward or drop are treated as
    rewrite-and-resubmit (tag push/pop followed by another lookup).  Pops
    the front tag once at cluster ingress when ``ingress_cluster`` matches.
    """
    node = table.node
    used: list[int] = []
    if ingress_cluster is not None and packet.tags.top == ingress_cluster:
        packet.tags.pop()
    if node == packet.dst:
        packet.log(node, ())
        return Decision("deliver")
    for _ in range(MAX_RESUBMIT):
        rule = table.lookup(packet.dst, packet.tags.top, link_down)
        if rule is None:
            packet.log(node, tuple(used))
            return Decision("miss", cause="table-miss", rule_ids=tuple(used))
        used.append(rule.rule_id)
        target = None
        for action in rule.actions:
            if isinstance(action, PopTag):
                if packet.tags.entries:
                    packet.tags.pop()
            elif isinstance(action, PushTag):
                try:
                    packet.tags.push(action.tag)
                except TagOverflow:
                    packet.log(node, tuple(used))
                    return Decision("drop", cause="tag-overflow", rule_ids=tuple(used))
            elif isinstance(action, Drop):
                packet.log(node, tuple(used))
                return Decision("drop", cause=action.cause, rule_ids=tuple(used))
            elif isinstance(action, Forward):
                target = action.neighbor
        if target is not None:
            packet.log(node, tuple(used))
            packet.hop_count += 1
            if packet.hop_count > ttl:
                return Decision("drop", cause="ttl", rule_ids=tuple(used))
            return Decision("forward", next_hop=target, rule_ids=tuple(used))
    packet.log(node, tuple(used))
    return Decision("drop", cause="resubmit-limit", rule_ids=tuple(used))
