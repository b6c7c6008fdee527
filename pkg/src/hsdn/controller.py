"""Centralized control plane: route computation, cluster routing, boundary
reconciliation, backup-rule placement and wildcard compression."""
from __future__ import annotations

import itertools
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Mapping, Optional

from .clustering import Overlay, Partition, overlay_graph, partition, recluster
from .dataplane import (ABSENT, DetourLabel, Drop, FlowRule, Forward, Match, Prefix,
                        PushTag, StatePred)
from .routing import Adjacency, bfs_distances, components, next_hops, shortest_path, without_link

if TYPE_CHECKING:
    from .network import Network

PRIO_PRIMARY = 10
PRIO_DETOUR = 15
PRIO_BACKUP = 20
PRIO_CLUSTER_TAG = 20
PRIO_CLUSTER_PUSH = 25
PRIO_LOCAL_OVERRIDE = 30

MSG_KINDS = ("RuleInstall", "RuleRemove", "LinkReport", "MissReport", "MigrateCmd",
             "ResyncCmd", "ClusterRouteReply", "Keepalive")

_msg_ids = itertools.count()


@dataclass
class ControlMsg:
    kind: str
    payload: dict
    msg_id: int = -1
    retry_count: int = 0
    src: object = None
    dst: object = None

    def __post_init__(self):
        if self.kind not in MSG_KINDS:
            raise ValueError(f"unknown control message kind {self.kind!r}")

    def to_record(self) -> dict:
        return {"kind": self.kind, "msg_id": self.msg_id, "retry_count": self.retry_count,
                "src": self.src, "dst": self.dst, "payload": _jsonable(self.payload)}

    def dumps(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in sorted(x.items(), key=lambda kv: str(kv[0]))}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, FlowRule):
        return x.describe()
    if isinstance(x, Partition):
        return x.describe()
    if isinstance(x, (int, float, str, bool)) or x is None:
        return x
    return str(x)


# --------------------------------------------------------------------------
# route computation

@dataclass
class RouteSet:
    """Next hop per (node, dst); ``None`` means install a drop rule."""
    routes: dict[int, dict[int, Optional[int]]]
    unreachable: list[tuple[int, int]] = field(default_factory=list)

    def next_hop(self, node: int, dst: int) -> Optional[int]:
        return self.routes.get(node, {}).get(dst)

    def path(self, src: int, dst: int) -> Optional[list[int]]:
        path = [src]
        while path[-1] != dst:
            hop = self.next_hop(path[-1], dst)
            if hop is None or hop in path:
                return None
            path.append(hop)
        return path


def compute_paths(adj: Adjacency, demands: Iterable[tuple[int, int]]) -> RouteSet:
    """Hop-count shortest-path next hops for every node on each demand's path."""
    routes: dict[int, dict[int, Optional[int]]] = defaultdict(dict)
    unreachable = []
    trees: dict[int, dict[int, int]] = {}
    for src, dst in demands:
        tree = trees.get(dst)
        if tree is None:
            tree = trees[dst] = next_hops(adj, dst)
        if src not in tree:
            routes[src][dst] = None
            unreachable.append((src, dst))
            continue
        u = src
        while u != dst:
            routes[u][dst] = tree[u]
            u = tree[u]
    return RouteSet(dict(routes), unreachable)


def routes_to_rules(routes: RouteSet, priority: int = PRIO_PRIMARY,
                    origin: str = "controller") -> dict[int, list[FlowRule]]:
    out: dict[int, list[FlowRule]] = {}
    for node in sorted(routes.routes):
        rules = []
        for dst in sorted(routes.routes[node]):
            hop = routes.routes[node][dst]
            action = Forward(hop) if hop is not None else Drop("unreachable")
            rules.append(FlowRule(priority, Match(dst=dst), (action,), origin=origin))
        out[node] = rules
    return out


class NoClusterRoute(Exception):
    pass


def compute_cluster_sequence(src: int, dst: int, part: Partition,
                             overlay: Overlay) -> list[int]:
    """Clusters a packet from ``src`` must cross to reach ``dst``, front first.

    Shortest path over the overlay with lowest-id tie-breaking; the source's
    own cluster is excluded, so co-clustered pairs get an empty sequence.
    """
    cs, cd = part.cluster_of(src), part.cluster_of(dst)
    if cs == cd:
        return []
    path = shortest_path(overlay.adj, cs, cd)
    if path is None:
        raise NoClusterRoute(f"cluster {cd} unreachable from {cs}")
    return path[1:]


def push_actions(seq: list[int]) -> tuple:
    return tuple(PushTag(c) for c in reversed(seq))


# --------------------------------------------------------------------------
# boundary reconciliation for migrated regions

@dataclass
class Reconciliation:
    routes: RouteSet
    regions: list[frozenset]
    advertised: dict[frozenset, frozenset]
    violations: list[str]


def reconcile_boundary(adj: Adjacency, dsts: Iterable[int], migrated: Iterable[int],
                       advertised: Optional[Mapping[frozenset, Iterable[int]]] = None
                       ) -> Reconciliation:
    """SDN routes for a network where some nodes run the distributed protocol.

    Each connected migrated region is contracted to one vertex that may
    terminate traffic but never carries transit.  Traffic for an
    advertised in-region destination is steered to the region; adjacent
    SDN nodes hand it to their lowest-id border neighbor.  Everything else
    is routed around all regions, or dropped if that is impossible.
    """
    migrated = set(migrated)
    sdn = sorted(set(adj) - migrated)
    regions = [frozenset(c) for c in components(adj, migrated)]
    region_of = {n: r for r in regions for n in r}
    if advertised is None:
        adv = {r: frozenset(r) for r in regions}
    else:
        adv = {r: frozenset(advertised.get(r, ())) for r in regions}
    sdn_adj = {u: [v for v in adj[u] if v not in migrated] for u in sdn}
    routes: dict[int, dict[int, Optional[int]]] = {u: {} for u in sdn}
    unreachable = []
    for dst in sorted(set(dsts)):
        region = region_of.get(dst)
        if region is not None and dst in adv[region]:
            # sink is the region; SDN nodes adjacent to it enter at their lowest-id border neighbor
            entry = {u: min(v for v in adj[u] if v in region)
                     for u in sdn if any(v in region for v in adj[u])}
            dist = bfs_distances(sdn_adj, entry)
            for u in sdn:
                if u in entry:
                    routes[u][dst] = entry[u]
                elif u in dist:
                    routes[u][dst] = min(v for v in sdn_adj[u] if dist.get(v, -1) == dist[u] - 1)
                else:
                    routes[u][dst] = None
                    unreachable.append((u, dst))
        elif region is not None:
            for u in sdn:
                routes[u][dst] = None
                unreachable.append((u, dst))
        else:
            tree = next_hops(sdn_adj, dst)
            for u in sdn:
                if u == dst:
                    continue
                routes[u][dst] = tree.get(u)
                if u not in tree:
                    unreachable.append((u, dst))
    rs = RouteSet(routes, unreachable)
    return Reconciliation(rs, regions, adv, check_boundary(rs, region_of, adv))


def check_boundary(routes: RouteSet, region_of: Mapping[int, frozenset],
                   advertised: Mapping[frozenset, frozenset]) -> list[str]:
    """SDN rules forwarding into a region for a destination it does not advertise."""
    bad = []
    for u, table in sorted(routes.routes.items()):
        for dst, hop in sorted(table.items()):
            if hop is None or hop not in region_of:
                continue
            if dst not in advertised[region_of[hop]]:
                bad.append(f"node {u} forwards dst {dst} into region via {hop}")
    return bad


# --------------------------------------------------------------------------
# backup rules

@dataclass
class BackupCandidate:
    node: int
    link: tuple[int, int]
    neighbor: int
    dst: int
    flows: list[tuple[int, int]]
    alt_path: list[int]
    needs_detour: bool

    @property
    def count(self) -> int:
        return len(self.flows)

    def sort_key(self) -> tuple:
        return (-self.count, self.link, self.dst)


@dataclass
class BackupPlan:
    budget: Optional[int]
    rules: dict[int, list[FlowRule]] = field(default_factory=dict)
    detours: dict[int, list[FlowRule]] = field(default_factory=dict)
    coverage: dict[tuple[int, int], set] = field(default_factory=dict)
    selected: list[BackupCandidate] = field(default_factory=list)
    uncoverable: list[tuple[int, tuple[int, int], int]] = field(default_factory=list)
    candidates: list[BackupCandidate] = field(default_factory=list)

    @property
    def covered_demands(self) -> int:
        return sum(c.count for c in self.selected)

    def covers(self, node: int, neighbor: int) -> bool:
        return any(r.state_pred.neighbor == neighbor for r in self.rules.get(node, ()))


def backup_candidates(adj: Adjacency, demands: Iterable[tuple[int, int]],
                      routes: Optional[RouteSet] = None
                      ) -> tuple[list[BackupCandidate], list]:
    demands = list(demands)
    if routes is None:
        routes = compute_paths(adj, demands)
    flows: dict[tuple[int, int, int], list] = defaultdict(list)
    for src, dst in demands:
        path = routes.path(src, dst)
        if path is None:
            continue
        for u, v in zip(path, path[1:]):
            flows[(u, v, dst)].append((src, dst))
    cands, uncoverable = [], []
    for (u, v, dst), fl in sorted(flows.items()):
        link = (min(u, v), max(u, v))
        alt = shortest_path(without_link(adj, u, v), u, dst)
        if alt is None:
            uncoverable.append((u, link, dst))
            continue
        # plain forward suffices when the alternate's own primary route avoids the failed link
        p = routes.path(alt[1], dst) if alt[1] != dst else [dst]
        avoids = p is not None and all(
            (min(a, b), max(a, b)) != link for a, b in zip(p, p[1:]))
        cands.append(BackupCandidate(u, link, v, dst, sorted(fl), alt, not avoids))
    return cands, uncoverable


def compute_backup_rules(adj: Adjacency, demands: Iterable[tuple[int, int]],
                         budget: Optional[int], routes: Optional[RouteSet] = None
                         ) -> BackupPlan:
    """Budgeted placement of link-state-conditioned backup rules.

    Candidates are (node, incident link, destination) triples whose primary
    next hop uses the link; each node keeps up to ``budget`` of them, taking
    the most flows protected first (ties: lower link, then lower dst).
    When the alternate neighbor would route back over the failed link, the
    backup pushes a detour tag and detour rules pin the alternate path.
    """
    if budget is not None and budget < 0:
        raise ValueError("budget must be >= 0")
    cands, uncoverable = backup_candidates(adj, demands, routes)
    plan = BackupPlan(budget, uncoverable=uncoverable, candidates=cands)
    by_node: dict[int, list[BackupCandidate]] = defaultdict(list)
    for c in cands:
        by_node[c.node].append(c)
    detour_seen: set = set()
    for node in sorted(by_node):
        chosen = sorted(by_node[node], key=BackupCandidate.sort_key)
        if budget is not None:
            chosen = chosen[:budget]
        rules = []
        for c in sorted(chosen, key=lambda c: (c.link, c.dst)):
            pred = StatePred(node, c.neighbor, down=True)
            hop = c.alt_path[1]
            if c.needs_detour:
                label = DetourLabel(*c.link)
                actions = (PushTag(label), Forward(hop))
                for x, y in zip(c.alt_path[1:-1], c.alt_path[2:]):
                    key = (x, c.dst, label)
                    if key in detour_seen:
                        continue
                    detour_seen.add(key)
                    plan.detours.setdefault(x, []).append(
                        FlowRule(PRIO_DETOUR, Match(dst=c.dst, top_tag=label),
                                 (Forward(y),), kind="detour"))
            else:
                actions = (Forward(hop),)
            # untagged only: a detouring packet must keep following its detour
            rules.append(FlowRule(PRIO_BACKUP, Match(dst=c.dst, top_tag=ABSENT), actions,
                                  kind="backup", state_pred=pred))
            plan.coverage.setdefault(c.link, set()).add((node, c.dst))
            plan.selected.append(c)
        if rules:
            plan.rules[node] = rules
    return plan


# --------------------------------------------------------------------------
# wildcard compression

def prefix_cover(ids: set[int], width: int) -> list[Prefix]:
    """Maximal aligned binary-prefix blocks lying entirely inside ``ids``."""
    out: list[Prefix] = []

    def walk(value: int, length: int) -> None:
        block = Prefix(value, length, width).covered()
        inside = sum(1 for x in block if x in ids)
        if inside == 0:
            return
        if inside == len(block):
            out.append(Prefix(value, length, width))
            return
        walk(value << 1, length + 1)
        walk((value << 1) | 1, length + 1)

    walk(0, 0)
    return out


def id_width(max_id: int) -> int:
    return max(1, int(max_id).bit_length())


def compress_rules(rules: list[FlowRule], width: int) -> list[FlowRule]:
    """Merge exact-destination rules with identical behavior into prefix rules.

    A destination matched by more than one rule at the same priority
    (different behavior, or any non-exact rule) is left exact, so the
    winner of every lookup is unchanged.  Output rule ids are renumbered
    in the order of the originals they replace.
    """
    exact = [r for r in rules if isinstance(r.match.dst, int)]
    other = [r for r in rules if not isinstance(r.match.dst, int)]
    groups: dict[tuple, list[FlowRule]] = defaultdict(list)
    for r in exact:
        groups[(r.priority, r.match.top_tag, r.state_pred, r.actions, r.kind, r.origin)].append(r)

    level_dsts: dict[int, dict[int, int]] = defaultdict(lambda: defaultdict(int))
    for key, members in groups.items():
        for d in {r.match.dst for r in members}:
            level_dsts[key[0]][d] += 1
    wild_by_prio: dict[int, list[FlowRule]] = defaultdict(list)
    for r in other:
        wild_by_prio[r.priority].append(r)

    out: list[tuple[int, FlowRule]] = [(r.rule_id, r) for r in other]
    for key, members in groups.items():
        prio, top, pred, actions, kind, origin = key
        mergeable, pinned = set(), []
        for r in members:
            d = r.match.dst
            shadowed = any(w.match.dst is None or w.match.dst.matches(d)
                           for w in wild_by_prio[prio])
            if level_dsts[prio][d] > 1 or shadowed or d >= (1 << width):
                pinned.append(r)
            else:
                mergeable.add(d)
        for r in pinned:
            out.append((r.rule_id, r))
        if not mergeable:
            continue
        first = min(r.rule_id for r in members if r.match.dst in mergeable)
        for p in prefix_cover(mergeable, width):
            dst = p.value if p.length == width else p
            out.append((first, FlowRule(prio, Match(dst=dst, top_tag=top), actions,
                                        kind, origin, pred)))
    out.sort(key=lambda pair: (pair[0], str(pair[1].match.dst)))
    return [r.with_id(i) for i, (_, r) in enumerate(out)]


# --------------------------------------------------------------------------
# the controller entity

class Controller:
    """Control-plane process inside a running :class:`~hsdn.network.Network`."""

    def __init__(self, net: "Network"):
        self.net = net
        self.view = net.topo.copy()             # believed global view
        self.installed: dict[int, dict[tuple, FlowRule]] = {n: {} for n in net.nodes}
        self.busy_until = 0
        self.migrated: set[int] = set()
        self.keepalive_misses: dict[int, int] = {n: 0 for n in net.nodes}
        self.reachable_since: dict[int, Optional[int]] = {n: 0 for n in net.nodes}
        self.resync_pending: set[int] = set()
        self.partition: Optional[Partition] = None
        self.baseline_adj: Optional[dict] = None
        self.backup_plan: Optional[BackupPlan] = None
        self.reclusters = 0

    # -- desired state -------------------------------------------------------
    def believed_adj(self) -> dict[int, list[int]]:
        return self.view.adjacency(up_only=True)

    def desired_rules(self) -> dict[int, list[FlowRule]]:
        net = self.net
        adj = self.believed_adj()
        method = net.method
        if method in ("pure-sdn", "backup"):
            routes = compute_paths(adj, net.demands)
            rules = routes_to_rules(routes)
            if method == "backup":
                plan = compute_backup_rules(adj, net.demands, net.knobs.backup_budget, routes)
                self.backup_plan = plan
                for n, rs in plan.rules.items():
                    rules.setdefault(n, []).extend(rs)
                for n, rs in plan.detours.items():
                    rules.setdefault(n, []).extend(rs)
        elif method == "migration":
            if self.migrated:
                rec = reconcile_boundary(adj, sorted({d for _, d in net.demands}),
                                         self.migrated)
                if rec.violations:
                    raise AssertionError("; ".join(rec.violations))
                routes = rec.routes
            else:
                routes = compute_paths(adj, net.demands)
            rules = routes_to_rules(routes)
        elif method == "cluster":
            rules = self.cluster_push_rules(adj)
        else:
            rules = {}
        if net.knobs.compress:
            width = id_width(max(net.nodes))
            rules = {n: compress_rules([r.with_id(i) for i, r in enumerate(rs)], width)
                     for n, rs in rules.items()}
        return {n: rules.get(n, []) for n in net.nodes}

    def cluster_push_rules(self, adj: Adjacency) -> dict[int, list[FlowRule]]:
        part = self.partition
        overlay = overlay_graph(part, adj)
        out: dict[int, list[FlowRule]] = defaultdict(list)
        for src, dst in self.net.demands:
            if part.cluster_of(src) == part.cluster_of(dst):
                continue
            try:
                seq = compute_cluster_sequence(src, dst, part, overlay)
                actions = push_actions(seq)
            except NoClusterRoute:
                actions = (Drop("no-cluster-route"),)
            out[src].append(FlowRule(PRIO_CLUSTER_PUSH, Match(dst=dst, top_tag=ABSENT), actions))
        return out

    def stack_for(self, node: int, dst: int) -> Optional[list[int]]:
        part = self.partition
        try:
            return compute_cluster_sequence(node, dst, part,
                                            overlay_graph(part, self.believed_adj()))
        except NoClusterRoute:
            return None

    # -- bootstrap -----------------------------------------------------------
    def bootstrap(self) -> None:
        """Pre-provision every node before time zero (no channel latency)."""
        net = self.net
        if net.method == "cluster":
            self.partition = partition(self.believed_adj(), net.knobs.cluster_size)
            self.baseline_adj = self.believed_adj()
            for n in net.nodes:
                net.agents[n].adopt_partition(self.partition)
            net.log_partition(self.partition)
        desired = self.desired_rules()
        for n in net.nodes:
            added = net.install_now(n, desired[n])
            self.installed[n] = {r.key: r for r in added}
            if net.method == "backup":
                net.agents[n].stored_backups = [r for r in added if r.kind == "backup"]
        if net.method == "migration":
            self._schedule_keepalives()
        if net.method == "cluster" and net.knobs.recluster_period_us > 0:
            period = net.knobs.recluster_period_us
            net.sim.schedule(period, "timer", self._periodic_recluster, {"recluster": "periodic"})

    # -- message handling ----------------------------------------------------
    def receive(self, msg: ControlMsg, delivery) -> None:
        """Queue a message; messages are processed one at a time, c_proc each."""
        net = self.net
        start = max(net.sim.now, self.busy_until)
        done = start + net.knobs.c_proc_us
        self.busy_until = done
        arrival = net.sim.now
        net.sim.schedule(done, "timer", lambda: self._process(msg, delivery, arrival),
                         {"controller": msg.kind, "from": msg.src})

    def _process(self, msg: ControlMsg, delivery, arrival: int) -> None:
        if msg.kind == "LinkReport":
            self.handle_link_report(msg, delivery, arrival)
        elif msg.kind == "MissReport":
            if msg.payload.get("retag"):
                self._answer_retag(msg)
            else:
                self.net.metrics.misses_reported += 1

    def handle_link_report(self, msg: ControlMsg, delivery, arrival: int) -> None:
        net = self.net
        changed = []
        for a, b, up in msg.payload["links"]:
            if not self.view.has_link(a, b):
                continue
            if self.view.link(a, b).up != up:
                self.view.set_link_state(a, b, up)
                changed.append((min(a, b), max(a, b), up))
        chain = {
            "links": [[a, b] for a, b, _ in msg.payload["links"]],
            "reporter": msg.src,
            "report_first_send": delivery.first_send,
            "report_last_send": delivery.last_send,
            "report_arrival": arrival,
            "compute_done": net.sim.now,
        }
        if not changed:
            net.sim.mark("report-idempotent", node=msg.src)
            net.note_controller_reaction(chain, set())
            return
        if net.method == "cluster":
            self._maybe_recluster_on_threshold()
        touched = self.push_updates(chain)
        net.note_controller_reaction(chain, touched)

    def push_updates(self, chain: Optional[dict] = None) -> set[int]:
        """Send rule deltas to every reachable SDN node whose desired rules changed."""
        net = self.net
        desired = self.desired_rules()
        touched = set()
        for n in net.nodes:
            if n in self.migrated:
                continue
            want = {r.key: r for r in desired[n]}
            have = self.installed[n]
            removes = [have[k].rule_id for k in sorted(have, key=repr) if k not in want]
            adds = [want[k] for k in sorted(want, key=repr)
                    if k not in have or not have[k].same_behavior(want[k])]
            removes += [have[k].rule_id for k in sorted(have, key=repr)
                        if k in want and not have[k].same_behavior(want[k])]
            if not adds and not removes:
                continue
            adds = [r.with_id(net.new_rule_id()) for r in adds]
            for k in list(have):
                if k not in want or not have[k].same_behavior(want[k]):
                    del have[k]
            for r in adds:
                have[r.key] = r
            touched.add(n)
            msg = ControlMsg("RuleInstall", {"add": adds, "remove": sorted(removes),
                                             "chain": chain}, src="controller", dst=n)
            net.send_to_node(n, msg)
        return touched

    # -- migration -------------------------------------------------------------
    def _schedule_keepalives(self) -> None:
        net = self.net
        period = net.knobs.keepalive_period_us

        def tick() -> None:
            for n in net.nodes:
                self._send_keepalive(n)
            net.sim.schedule_in(period, "timer", tick, {"controller": "keepalive"})

        net.sim.schedule(0, "timer", tick, {"controller": "keepalive"})

    def _send_keepalive(self, n: int) -> None:
        net = self.net
        msg = ControlMsg("Keepalive", {}, src="controller", dst=n)

        def ok(_rec) -> None:
            self.keepalive_misses[n] = 0
            if self.reachable_since[n] is None:
                self.reachable_since[n] = net.sim.now
            if (n in self.migrated and n not in self.resync_pending
                    and net.sim.now - self.reachable_since[n] >= net.knobs.stability_window_us):
                self._resync(n)

        def lost(_rec) -> None:
            self.keepalive_misses[n] += 1
            self.reachable_since[n] = None
            if (self.keepalive_misses[n] >= net.knobs.keepalive_misses
                    and n not in self.migrated):
                self.migrated.add(n)
                self.resync_pending.discard(n)
                net.sim.mark("controller-marks-migrated", node=n)
                self.reconcile()

        net.send_to_node(n, msg, on_delivered=ok, on_lost=lost, retries=0)

    def reconcile(self) -> None:
        """Re-derive SDN rules around the current migrated set."""
        self.net.metrics.reconciliations += 1
        self.push_updates({"reconcile": sorted(self.migrated)})

    def _resync(self, n: int) -> None:
        net = self.net
        self.resync_pending.add(n)
        self.migrated.discard(n)
        desired = {r.key: r for r in self.desired_rules()[n]}
        adds = [r.with_id(net.new_rule_id()) for _, r in sorted(desired.items(), key=repr)]
        removes = sorted(r.rule_id for r in self.installed[n].values())
        self.installed[n] = {r.key: r for r in adds}
        msg = ControlMsg("ResyncCmd", {"add": adds, "remove": removes},
                         src="controller", dst=n)

        def done(_rec) -> None:
            self.resync_pending.discard(n)

        def lost(_rec) -> None:
            self.resync_pending.discard(n)
            self.migrated.add(n)

        net.send_to_node(n, msg, on_delivered=done, on_lost=lost)
        self.reconcile()

    # -- clustering --------------------------------------------------------------
    def _periodic_recluster(self) -> None:
        net = self.net
        self.do_recluster()
        net.sim.schedule_in(net.knobs.recluster_period_us, "timer", self._periodic_recluster,
                            {"recluster": "periodic"})

    def _maybe_recluster_on_threshold(self) -> None:
        from .clustering import ReclusterPolicy
        pol = ReclusterPolicy(threshold=self.net.knobs.recluster_threshold)
        if pol.threshold_exceeded(self.partition, self.baseline_adj, self.believed_adj()):
            self.do_recluster()

    def do_recluster(self) -> None:
        net = self.net
        adj = self.believed_adj()
        self.partition = recluster(self.partition, adj)
        self.baseline_adj = adj
        self.reclusters += 1
        net.log_partition(self.partition)
        desired = self.desired_rules()
        for n in net.nodes:
            have = self.installed[n]
            want = {r.key: r for r in desired[n]}
            adds = [r.with_id(net.new_rule_id()) for _, r in sorted(want.items(), key=repr)]
            removes = sorted(r.rule_id for r in have.values())
            self.installed[n] = {r.key: r for r in adds}
            msg = ControlMsg("ClusterRouteReply",
                             {"partition": self.partition, "add": adds, "remove": removes},
                             src="controller", dst=n)
            net.send_to_node(n, msg)

    def _answer_retag(self, msg: ControlMsg) -> None:
        node, dst, pid = msg.src, msg.payload["dst"], msg.payload["packet"]
        stack = self.stack_for(node, dst)
        reply = ControlMsg("ClusterRouteReply",
                           {"retag": pid, "stack": stack, "epoch": self.partition.epoch},
                           src="controller", dst=node)
        self.net.send_to_node(node, reply)
