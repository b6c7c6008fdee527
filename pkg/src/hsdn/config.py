"""Scenario configuration: JSON parsing, validation and serialization."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union

from .kernel import MS, S, LatencyDist, LinkAttr, Topology

METHODS = ("pure-sdn", "pure-distributed", "migration", "cluster", "backup")
METHOD_ALIASES = {"pure-dist": "pure-distributed"}


class ConfigError(Exception):
    """Carries every validation problem found, not just the first."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def normalize_method(name: str) -> str:
    return METHOD_ALIASES.get(name, name)


# name -> (type, min, max, nullable); bounds inclusive, None = unbounded
KNOB_SPECS: dict[str, tuple] = {
    "heartbeat_period_us": (int, 1, None, False),
    "detect_k": (int, 1, None, False),
    "keepalive_period_us": (int, 1, None, False),
    "keepalive_misses": (int, 1, None, False),
    "stability_window_us": (int, 0, None, False),
    "discovery_round_us": (int, 0, None, False),
    "pre_execution": (bool, None, None, False),
    "sync_period_us": (int, 0, None, False),
    "sync_scope_hops": (int, 1, None, True),
    "cluster_size": (int, 1, None, False),
    "backup_budget": (int, 0, None, True),
    "tag_depth": (int, 1, None, True),
    "ttl": (int, 1, None, True),
    "a_proc_us": (int, 0, None, False),
    "c_proc_us": (int, 0, None, False),
    "t_install_us": (int, 0, None, False),
    "rto_us": (int, 1, None, True),
    "max_retries": (int, 0, None, False),
    "table_capacity": (int, 1, None, False),
    "horizon_us": (int, 1, None, False),
    "trials": (int, 0, None, False),
    "traffic_interval_us": (int, 0, None, False),
    "recluster_period_us": (int, 0, None, False),
    "recluster_threshold": (float, 0.0, 1.0, True),
    "compress": (bool, None, None, False),
}


@dataclass
class Knobs:
    heartbeat_period_us: int = 100 * MS
    detect_k: int = 3
    keepalive_period_us: int = 1 * S
    keepalive_misses: int = 3
    stability_window_us: int = 5 * S
    discovery_round_us: int = 2 * S
    pre_execution: bool = True
    sync_period_us: int = 1 * S
    sync_scope_hops: Optional[int] = None
    cluster_size: int = 3
    backup_budget: Optional[int] = None
    tag_depth: Optional[int] = None
    ttl: Optional[int] = None
    a_proc_us: int = 2 * MS
    c_proc_us: int = 1 * MS
    t_install_us: int = 1 * MS
    rto_us: Optional[int] = None
    max_retries: int = 3
    table_capacity: int = 1024
    horizon_us: int = 30 * S
    trials: int = 0
    traffic_interval_us: int = 0
    recluster_period_us: int = 0
    recluster_threshold: Optional[float] = None
    compress: bool = False


DEFAULT_CONTROL_LATENCY = LatencyDist.lognormal(20 * MS, 0.5, 1 * MS, 500 * MS)
DEFAULT_DATA_LATENCY = LatencyDist.constant(2 * MS)


@dataclass
class LinkSpec:
    a: int
    b: int
    latency: LatencyDist = DEFAULT_DATA_LATENCY
    loss: float = 0.0
    up: bool = True


@dataclass
class EventSpec:
    t_us: int
    type: str                     # link | control | recluster
    link: Optional[tuple] = None
    node: Union[int, str, None] = None
    state: Optional[str] = None

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"t_us": self.t_us, "type": self.type}
        if self.link is not None:
            d["link"] = list(self.link)
        if self.node is not None:
            d["node"] = self.node
        if self.state is not None:
            d["state"] = self.state
        return d


@dataclass
class ScenarioConfig:
    name: str
    nodes: list[int]
    links: list[LinkSpec]
    method: str = "pure-sdn"
    seed: int = 0
    demands: Union[str, list] = "all"
    events: list[EventSpec] = field(default_factory=list)
    control_latency: LatencyDist = DEFAULT_CONTROL_LATENCY
    control_loss: float = 0.05
    knobs: Knobs = field(default_factory=Knobs)

    # -- derived views -----------------------------------------------------
    def demand_list(self) -> list[tuple[int, int]]:
        if self.demands == "all":
            return [(s, d) for s in sorted(self.nodes) for d in sorted(self.nodes) if s != d]
        return [tuple(p) for p in self.demands]

    def build_topology(self) -> Topology:
        topo = Topology()
        for n in sorted(self.nodes):
            topo.add_node(n)
        for ls in self.links:
            topo.add_link(ls.a, ls.b, LinkAttr(ls.latency, ls.loss, ls.up, "data"))
        for n in sorted(self.nodes):
            topo.control[n] = LinkAttr(self.control_latency, self.control_loss, True, "control")
        return topo

    def with_method(self, method: str) -> "ScenarioConfig":
        c = copy.deepcopy(self)
        c.method = normalize_method(method)
        return c

    def with_knobs(self, **kw) -> "ScenarioConfig":
        c = copy.deepcopy(self)
        for k, v in kw.items():
            if not hasattr(c.knobs, k):
                raise KeyError(k)
            setattr(c.knobs, k, v)
        return c

    def topology_signature(self) -> tuple:
        return (tuple(sorted(self.nodes)),
                tuple(sorted((min(l.a, l.b), max(l.a, l.b)) for l in self.links)))

    # -- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "method": self.method,
            "seed": self.seed,
            "nodes": sorted(self.nodes),
            "links": [{"a": l.a, "b": l.b, "latency": l.latency.to_dict(),
                       "loss": l.loss, "up": l.up} for l in self.links],
            "control": {"latency": self.control_latency.to_dict(), "loss": self.control_loss},
            "demands": self.demands if self.demands == "all" else [list(p) for p in self.demands],
            "events": [e.to_dict() for e in self.events],
            "knobs": asdict(self.knobs),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


TOP_KEYS = {"name", "method", "seed", "nodes", "links", "control", "demands",
            "events", "knobs"}
REQUIRED_KEYS = {"nodes", "links"}


def _check_latency(d: Any, where: str, errors: list[str]) -> Optional[LatencyDist]:
    if not isinstance(d, dict):
        errors.append(f"{where}: latency must be an object")
        return None
    allowed = {"constant": {"kind", "value_us"},
               "uniform": {"kind", "low_us", "high_us"},
               "lognormal": {"kind", "median_us", "sigma", "low_us", "high_us"}}
    kind = d.get("kind", "constant")
    if kind not in allowed:
        errors.append(f"{where}.kind: unknown latency distribution {kind!r}")
        return None
    for k in sorted(set(d) - allowed[kind]):
        errors.append(f"{where}.{k}: unknown key")
    try:
        return LatencyDist.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        errors.append(f"{where}: invalid latency ({exc})")
        return None


def _check_prob(v: Any, where: str, errors: list[str], allow_one: bool = False) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        errors.append(f"{where}: must be a number")
        return 0.0
    if not (0.0 <= v < 1.0 or (allow_one and v == 1.0)):
        errors.append(f"{where}: {v} outside [0, 1)")
    return float(v)


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def config_from_dict(raw: Any) -> ScenarioConfig:
    """Validate a decoded JSON document; raises ConfigError listing every problem."""
    errors: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a JSON object"])
    for k in sorted(set(raw) - TOP_KEYS):
        errors.append(f"{k}: unknown key")
    for k in sorted(REQUIRED_KEYS - set(raw)):
        errors.append(f"{k}: missing required field")

    name = raw.get("name", "scenario")
    if not isinstance(name, str):
        errors.append("name: must be a string")

    method = normalize_method(raw.get("method", "pure-sdn"))
    if method not in METHODS:
        errors.append(f"method: {method!r} not one of {', '.join(METHODS)}")

    seed = raw.get("seed", 0)
    if not _is_int(seed) or seed < 0 or seed >= 2 ** 64:
        errors.append("seed: must be an unsigned 64-bit integer")
        seed = 0

    nodes = raw.get("nodes", [])
    if not isinstance(nodes, list) or not all(_is_int(n) and n >= 0 for n in nodes):
        errors.append("nodes: must be a list of non-negative integers")
        nodes = []
    elif len(set(nodes)) != len(nodes):
        errors.append("nodes: duplicate ids")
    node_set = set(nodes)

    links: list[LinkSpec] = []
    seen_links: set = set()
    raw_links = raw.get("links", [])
    if not isinstance(raw_links, list):
        errors.append("links: must be a list")
        raw_links = []
    for i, l in enumerate(raw_links):
        where = f"links[{i}]"
        if not isinstance(l, dict):
            errors.append(f"{where}: must be an object")
            continue
        for k in sorted(set(l) - {"a", "b", "latency", "loss", "up"}):
            errors.append(f"{where}.{k}: unknown key")
        a, b = l.get("a"), l.get("b")
        if not (_is_int(a) and _is_int(b)):
            errors.append(f"{where}: endpoints a, b must be integers")
            continue
        if a == b:
            errors.append(f"{where}: self-loop on node {a}")
        for n in (a, b):
            if n not in node_set:
                errors.append(f"{where}: unknown node {n}")
        key = (min(a, b), max(a, b))
        if key in seen_links:
            errors.append(f"{where}: duplicate link {key[0]}-{key[1]}")
        seen_links.add(key)
        lat = _check_latency(l["latency"], f"{where}.latency", errors) if "latency" in l \
            else DEFAULT_DATA_LATENCY
        loss = _check_prob(l.get("loss", 0.0), f"{where}.loss", errors)
        up = l.get("up", True)
        if not isinstance(up, bool):
            errors.append(f"{where}.up: must be a boolean")
        links.append(LinkSpec(a, b, lat or DEFAULT_DATA_LATENCY, loss, bool(up)))

    control = raw.get("control", {})
    control_latency = DEFAULT_CONTROL_LATENCY
    control_loss = 0.05
    if not isinstance(control, dict):
        errors.append("control: must be an object")
    else:
        for k in sorted(set(control) - {"latency", "loss"}):
            errors.append(f"control.{k}: unknown key")
        if "latency" in control:
            control_latency = _check_latency(control["latency"], "control.latency",
                                             errors) or DEFAULT_CONTROL_LATENCY
        if "loss" in control:
            control_loss = _check_prob(control["loss"], "control.loss", errors, allow_one=True)

    demands = raw.get("demands", "all")
    if demands != "all":
        if not isinstance(demands, list):
            errors.append('demands: must be "all" or a list of [src, dst] pairs')
            demands = "all"
        else:
            for i, p in enumerate(demands):
                if not (isinstance(p, list) and len(p) == 2 and all(_is_int(x) for x in p)):
                    errors.append(f"demands[{i}]: must be a [src, dst] pair")
                    continue
                if p[0] == p[1]:
                    errors.append(f"demands[{i}]: src equals dst")
                for n in p:
                    if n not in node_set:
                        errors.append(f"demands[{i}]: unknown node {n}")
            demands = [tuple(p) for p in demands if isinstance(p, list)]

    events: list[EventSpec] = []
    raw_events = raw.get("events", [])
    if not isinstance(raw_events, list):
        errors.append("events: must be a list")
        raw_events = []
    for i, e in enumerate(raw_events):
        where = f"events[{i}]"
        if not isinstance(e, dict):
            errors.append(f"{where}: must be an object")
            continue
        for k in sorted(set(e) - {"t_us", "type", "link", "node", "state"}):
            errors.append(f"{where}.{k}: unknown key")
        t = e.get("t_us")
        if not _is_int(t) or t < 0:
            errors.append(f"{where}.t_us: must be a non-negative integer")
            t = 0
        etype = e.get("type")
        state = e.get("state")
        if etype == "link":
            link = e.get("link")
            if not (isinstance(link, list) and len(link) == 2 and all(_is_int(x) for x in link)):
                errors.append(f"{where}.link: must be a [a, b] pair")
                continue
            if (min(link), max(link)) not in seen_links:
                errors.append(f"{where}.link: unknown link {link[0]}-{link[1]}")
            if state not in ("up", "down"):
                errors.append(f"{where}.state: must be 'up' or 'down'")
            events.append(EventSpec(t, "link", link=tuple(link), state=state))
        elif etype == "control":
            node = e.get("node", "all")
            if node != "all" and node not in node_set:
                errors.append(f"{where}.node: unknown node {node!r}")
            if state not in ("up", "down"):
                errors.append(f"{where}.state: must be 'up' or 'down'")
            events.append(EventSpec(t, "control", node=node, state=state))
        elif etype == "recluster":
            events.append(EventSpec(t, "recluster"))
        else:
            errors.append(f"{where}.type: must be link, control or recluster")

    knobs = Knobs()
    raw_knobs = raw.get("knobs", {})
    if not isinstance(raw_knobs, dict):
        errors.append("knobs: must be an object")
        raw_knobs = {}
    for k, v in sorted(raw_knobs.items()):
        spec = KNOB_SPECS.get(k)
        if spec is None:
            errors.append(f"knobs.{k}: unknown key")
            continue
        typ, lo, hi, nullable = spec
        if v is None:
            if not nullable:
                errors.append(f"knobs.{k}: may not be null")
            else:
                setattr(knobs, k, None)
            continue
        if typ is bool:
            ok = isinstance(v, bool)
        elif typ is int:
            ok = _is_int(v)
        else:
            ok = isinstance(v, (int, float)) and not isinstance(v, bool)
        if not ok:
            errors.append(f"knobs.{k}: must be {typ.__name__}")
            continue
        if lo is not None and v < lo:
            errors.append(f"knobs.{k}: {v} below minimum {lo}")
            continue
        if hi is not None and v > hi:
            errors.append(f"knobs.{k}: {v} above maximum {hi}")
            continue
        setattr(knobs, k, typ(v))
    if nodes and knobs.cluster_size > len(nodes):
        errors.append(f"knobs.cluster_size: {knobs.cluster_size} exceeds node count {len(nodes)}")

    if errors:
        raise ConfigError(errors)
    return ScenarioConfig(name=name, nodes=sorted(nodes), links=links, method=method,
                          seed=seed, demands=demands, events=events,
                          control_latency=control_latency, control_loss=control_loss,
                          knobs=knobs)


def parse_config(path: Union[str, Path]) -> ScenarioConfig:
    """Load a scenario from a JSON file, or a built-in scenario by name."""
    from .scenario import BUILTIN_SCENARIOS, builtin

    p = Path(path)
    if not p.exists() and str(path) in BUILTIN_SCENARIOS:
        return builtin(str(path))
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError([f"{path}: cannot read ({exc.strerror})"]) from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
    return config_from_dict(raw)


def knob_names() -> list[str]:
    return [f.name for f in fields(Knobs)]
