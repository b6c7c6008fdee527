"""Per-node local agent: heartbeats, link-state sync, local routing, the
SDN/distributed migration state machine and backup activation."""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import TYPE_CHECKING, Optional

from .controller import PRIO_CLUSTER_TAG, PRIO_LOCAL_OVERRIDE, PRIO_PRIMARY, ControlMsg
from .dataplane import Drop, FlowRule, Forward, Match, Prefix
from .routing import bfs_distances, components, next_hops, restrict

if TYPE_CHECKING:
    from .clustering import Partition
    from .network import Network


class Mode(str, Enum):
    SDN = "SDN"
    MIGRATING = "MIGRATING"
    DISTRIBUTED = "DISTRIBUTED"


LEGAL_TRANSITIONS = {
    (Mode.SDN, Mode.MIGRATING),
    (Mode.MIGRATING, Mode.DISTRIBUTED),
    (Mode.DISTRIBUTED, Mode.SDN),
}


@dataclass(frozen=True)
class MigrationState:
    mode: Mode = Mode.SDN
    last_keepalive: int = 0
    migrating_since: Optional[int] = None


@dataclass(frozen=True)
class MigrationTimers:
    keepalive_period: int
    misses: int
    pre_execution: bool = True
    discovery_round: int = 0


def controller_alive(state: MigrationState, now: int, timers: MigrationTimers) -> bool:
    return now - state.last_keepalive < timers.misses * timers.keepalive_period


def migration_step(state: MigrationState, event: str, now: int,
                   timers: MigrationTimers) -> MigrationState:
    """Advance the migration state machine by one event.

    Events: ``keepalive`` (controller keepalive received), ``tick``
    (periodic keepalive-timeout check), ``lsdb-ready`` (warm link-state
    database available), ``resync`` (ResyncCmd received).
    """
    if event == "keepalive":
        return replace(state, last_keepalive=now)
    if event == "tick":
        if state.mode is Mode.SDN and not controller_alive(state, now, timers):
            return replace(state, mode=Mode.MIGRATING, migrating_since=now)
        return state
    if event == "lsdb-ready":
        if state.mode is Mode.MIGRATING:
            return replace(state, mode=Mode.DISTRIBUTED)
        return state
    if event == "resync":
        if state.mode is Mode.DISTRIBUTED and controller_alive(state, now, timers):
            return replace(state, mode=Mode.SDN, migrating_since=None)
        return state
    raise ValueError(f"unknown migration event {event!r}")


def lsdb_ready_delay(timers: MigrationTimers) -> int:
    return 0 if timers.pre_execution else timers.discovery_round


@dataclass(frozen=True)
class Lsa:
    origin: int
    seq: int
    links: tuple            # ((neighbor, up), ...)
    mode: str


@dataclass(frozen=True)
class Heartbeat:
    sender: int
    link: tuple
    send_time: int
    seq: int


class Agent:
    """Local control logic of one node."""

    def __init__(self, net: "Network", node: int):
        self.net = net
        self.node = node
        k = net.knobs
        self.tau = k.heartbeat_period_us
        self.k = k.detect_k
        self.potential = net.topo.neighbors(node, up_only=False)
        self.last_rx: dict[int, int] = {}
        self.believed_up: dict[int, bool] = {}
        for nbr in self.potential:
            if net.topo.link(node, nbr).up:
                self.last_rx[nbr] = 0
                self.believed_up[nbr] = True
        self.hb_seq: dict[int, int] = {}
        self.phase = net.sim.rng(f"phase/{node}").randrange(self.tau)
        self.timers = MigrationTimers(k.keepalive_period_us, k.keepalive_misses,
                                      k.pre_execution, k.discovery_round_us)
        method = net.method
        initial = Mode.DISTRIBUTED if method in ("pure-distributed", "cluster") else Mode.SDN
        self.mstate = MigrationState(mode=initial)
        self.mode_history: list[tuple[int, Mode]] = [(0, initial)]
        self.lsdb: dict[int, tuple[Lsa, int]] = {}
        self.lsa_seq = 0
        self.syncing = False
        self.stored_backups: list[FlowRule] = []
        self.local: dict[tuple, FlowRule] = {}
        self.partition: Optional["Partition"] = None
        self.cluster_id: Optional[int] = None
        self.epoch = 0
        self._compute_pending = False
        self.reported_down: set[int] = set()

    @property
    def mode(self) -> Mode:
        return self.mstate.mode

    def _set_state(self, new: MigrationState) -> None:
        if new.mode is not self.mstate.mode:
            self.mode_history.append((self.net.sim.now, new.mode))
            self.net.sim.mark("mode", node=self.node, mode=new.mode.value)
        self.mstate = new

    # -- bootstrap -------------------------------------------------------------
    def bootstrap(self) -> None:
        net = self.net
        method = net.method
        net.sim.schedule(self.phase, "timer", self._heartbeat_tick, {"hb-tick": self.node})
        wants_sync = method in ("pure-distributed", "cluster", "backup") or (
            method == "migration" and self.timers.pre_execution)
        if wants_sync:
            self.warm_lsdb()
            self.start_sync()
        if method in ("pure-distributed", "cluster"):
            added = net.install_now(self.node, self.desired_local_rules())
            self.local = {r.key: r for r in added}
        if method == "migration":
            phase = net.sim.rng(f"keepalive-phase/{self.node}").randrange(
                self.timers.keepalive_period)
            net.sim.schedule(phase, "timer", self._keepalive_tick, {"ka-check": self.node})

    def warm_lsdb(self) -> None:
        topo = self.net.topo
        for o in sorted(topo.nodes):
            links = tuple((n, topo.link(o, n).up) for n in topo.neighbors(o, up_only=False))
            mode = self.net.agents[o].mode.value if o in self.net.agents else self.mode.value
            self.lsdb[o] = (Lsa(o, 0, links, mode), 0)

    def start_sync(self) -> None:
        sigma = self.net.knobs.sync_period_us
        if self.syncing:
            return
        self.syncing = True
        if sigma > 0:
            phase = self.net.sim.rng(f"sync-phase/{self.node}").randrange(sigma)
            self.net.sim.schedule_in(phase, "timer", self._sync_tick, {"sync": self.node})

    # -- heartbeats ------------------------------------------------------------
    def _heartbeat_tick(self) -> None:
        self.emit_heartbeats()
        self.check_liveness(self.net.sim.now)
        self.net.sim.schedule_in(self.tau, "timer", self._heartbeat_tick, {"hb-tick": self.node})

    def emit_heartbeats(self) -> list[Heartbeat]:
        """One heartbeat per interface; the fabric drops it if the link is down."""
        net = self.net
        sent = []
        for nbr in self.potential:
            seq = self.hb_seq.get(nbr, 0)
            self.hb_seq[nbr] = seq + 1
            hb = Heartbeat(self.node, (self.node, nbr), net.sim.now, seq)
            sent.append(hb)
            net.metrics.count_message("heartbeat")
            net.fabric.transmit(self.node, nbr,
                                lambda nbr=nbr, hb=hb: net.agents[nbr].on_heartbeat(hb),
                                net.metrics.heartbeat_dropped,
                                {"hb": [self.node, nbr]} if net.trace_heartbeats else None)
        return sent

    def on_heartbeat(self, hb: Heartbeat) -> None:
        sender = hb.sender
        self.last_rx[sender] = self.net.sim.now
        if not self.believed_up.get(sender, False):
            self.believed_up[sender] = True
            self.on_link_change(sender, True)

    def check_liveness(self, t: int) -> list[int]:
        """Declare down every neighbor silent for at least k heartbeat periods."""
        limit = self.k * self.tau
        down = [nbr for nbr in sorted(self.believed_up)
                if self.believed_up[nbr] and t - self.last_rx[nbr] >= limit]
        for nbr in down:
            self.believed_up[nbr] = False
        for nbr in down:
            self.on_link_change(nbr, False)
        return down

    def believes_down(self, node: int, nbr: int) -> bool:
        return not self.believed_up.get(nbr, False)

    # -- reacting to local link changes ---------------------------------------------
    def on_link_change(self, nbr: int, up: bool) -> None:
        net = self.net
        net.sim.mark("link-belief", node=self.node, neighbor=nbr, up=up)
        if not up:
            net.note_detection(self.node, nbr)
        link = [(self.node, nbr, up)]
        method = net.method
        if method == "pure-sdn":
            self.report(link, recovery=not up)
        elif method == "backup":
            if self.syncing:
                self.originate()
            if not up:
                if self.backup_covers(nbr):
                    net.note_local_activation(self.node, nbr)
                else:
                    net.metrics.incident("uncovered-failure", node=self.node, neighbor=nbr)
                    self.reported_down.add(nbr)
                    self.report(link, recovery=True)
            elif nbr in self.reported_down:
                self.reported_down.discard(nbr)
                self.report(link, recovery=False)
        elif method == "migration":
            if self.syncing:
                self.originate()
            if self.mode is Mode.DISTRIBUTED:
                self.schedule_recompute()
            else:
                self.report(link, recovery=not up)
        elif method == "cluster":
            self.originate()
            self.schedule_recompute()
            # the controller only has to act when the overlay loses an edge
            other = self.partition.membership.get(nbr)
            lost_edge = (not up and other is not None and other != self.cluster_id
                         and not self.cluster_reaches(other))
            self.report(link, recovery=lost_edge)
        else:  # pure-distributed
            self.originate()
            self.schedule_recompute()

    def report(self, links: list, recovery: bool) -> None:
        net = self.net
        msg = ControlMsg("LinkReport", {"links": [list(l) for l in links],
                                        "detected_at": net.sim.now}, src=self.node,
                         dst="controller")
        if recovery:
            for a, b, up in links:
                if not up:
                    net.note_report(a, b)
        net.send_to_controller(self.node, msg)

    # -- backup rules --------------------------------------------------------------
    def backup_covers(self, nbr: int) -> bool:
        """Whether stored backups protect every destination routed over ``nbr``."""
        nodes = self.net.nodes
        table = self.net.tables[self.node]
        needed: set[int] = set()
        protected: set[int] = set()
        for r in table.rules.values():
            if r.kind == "primary" and r.forward_target() == nbr and r.match.top_tag is None:
                needed |= _dst_set(r.match.dst, nodes)
            elif (r.kind == "backup" and r.state_pred is not None
                  and r.state_pred.neighbor == nbr):
                protected |= _dst_set(r.match.dst, nodes)
        return needed <= protected

    def activate_backup(self, nbr: int) -> bool:
        """Backups take effect through their predicates; nothing to write."""
        return self.backup_covers(nbr)

    # -- link-state synchronization -------------------------------------------------
    def _sync_tick(self) -> None:
        net = self.net
        self.expire_lsdb()
        self.originate()
        net.sim.schedule_in(net.knobs.sync_period_us, "timer", self._sync_tick,
                            {"sync": self.node})

    def _scope_ttl(self) -> Optional[int]:
        return self.net.knobs.sync_scope_hops

    def own_lsa(self) -> Lsa:
        links = tuple((n, self.believed_up.get(n, False)) for n in self.potential)
        return Lsa(self.node, self.lsa_seq, links, self.mode.value)

    def originate(self) -> None:
        self.lsa_seq += 1
        entry = self.own_lsa()
        self.lsdb[self.node] = (entry, self.net.sim.now)
        self._flood(entry, self._scope_ttl(), None)

    def _in_scope(self, nbr: int) -> bool:
        if self.net.method == "cluster" and self.partition is not None:
            return self.partition.membership.get(nbr) == self.cluster_id
        return True

    def _flood(self, entry: Lsa, ttl: Optional[int], exclude: Optional[int]) -> None:
        net = self.net
        for nbr in self.potential:
            if nbr == exclude or not self.believed_up.get(nbr, False) or not self._in_scope(nbr):
                continue
            net.metrics.count_message("lsa")
            net.fabric.transmit(self.node, nbr,
                                lambda nbr=nbr: net.agents[nbr].on_lsa(entry, ttl, self.node),
                                net.metrics.lsa_dropped,
                                {"lsa": [entry.origin, entry.seq, self.node, nbr]})

    def on_lsa(self, entry: Lsa, ttl: Optional[int], sender: int) -> None:
        if entry.origin == self.node or not self._in_scope(sender):
            return
        cur = self.lsdb.get(entry.origin)
        if cur is not None and cur[0].seq >= entry.seq:
            return
        self.lsdb[entry.origin] = (entry, self.net.sim.now)
        self.lsdb_changed()
        nxt = None if ttl is None else ttl - 1
        if nxt is None or nxt >= 1:
            self._flood(entry, nxt, sender)

    def expire_lsdb(self) -> None:
        knobs = self.net.knobs
        if knobs.sync_period_us <= 0:
            return
        hops = knobs.sync_scope_hops or len(self.net.nodes)
        hops = min(hops, len(self.net.nodes))
        horizon = 3 * knobs.sync_period_us * hops
        now = self.net.sim.now
        stale = [o for o, (_, rx) in self.lsdb.items() if o != self.node and now - rx > horizon]
        for o in stale:
            del self.lsdb[o]
        if stale:
            self.lsdb_changed()

    def lsdb_changed(self) -> None:
        method = self.net.method
        if method in ("pure-distributed", "cluster") or (
                method == "migration" and self.mode is Mode.DISTRIBUTED):
            self.schedule_recompute()

    def lsdb_adjacency(self) -> dict[int, list[int]]:
        """Believed graph: an edge is up if its endpoints' advertisements agree."""
        self.lsdb[self.node] = (self.own_lsa(), self.net.sim.now)
        claims: dict[int, dict[int, bool]] = {o: dict(e.links) for o, (e, _) in self.lsdb.items()}
        adj: dict[int, set[int]] = {o: set() for o in claims}
        for o, links in claims.items():
            for n, up in links.items():
                if not up:
                    continue
                # a live endpoint's "down" vetoes the edge; out-of-scope entries may be stale
                if claims.get(n, {}).get(o) is False and self._in_scope(n):
                    continue
                adj[o].add(n)
                adj.setdefault(n, set()).add(o)
        return {u: sorted(vs) for u, vs in sorted(adj.items())}

    def potential_adjacency(self) -> dict[int, list[int]]:
        """Every advertised link regardless of state."""
        adj: dict[int, set[int]] = {o: set() for o in self.lsdb}
        for o, (e, _) in self.lsdb.items():
            for n, _up in e.links:
                adj[o].add(n)
                adj.setdefault(n, set()).add(o)
        return {u: sorted(vs) for u, vs in sorted(adj.items())}

    # -- local route computation -------------------------------------------------------
    def schedule_recompute(self) -> None:
        if self._compute_pending:
            return
        self._compute_pending = True
        self.net.sim.schedule_in(self.net.knobs.a_proc_us, "timer", self._recompute,
                                 {"recompute": self.node})

    def _recompute(self) -> None:
        self._compute_pending = False
        self.local_recompute()

    def local_recompute(self) -> None:
        """Install the rules the node's own link-state view calls for."""
        net = self.net
        computed_at = net.sim.now
        want = {r.key: r for r in self.desired_local_rules()}
        have = self.local
        removes = sorted(have[k].rule_id for k in have
                         if k not in want or not have[k].same_behavior(want[k]))
        adds = [want[k] for k in sorted(want, key=repr)
                if k not in have or not have[k].same_behavior(want[k])]
        if not adds and not removes:
            net.note_local_effective(self.node, computed_at, computed_at)
            return
        adds = [r.with_id(net.new_rule_id()) for r in adds]
        for k in list(have):
            if k not in want or not have[k].same_behavior(want[k]):
                del have[k]
        for r in adds:
            have[r.key] = r
        net.install_later(self.node, adds, removes,
                          on_applied=lambda t: net.note_local_effective(self.node, computed_at, t))

    def desired_local_rules(self) -> list[FlowRule]:
        method = self.net.method
        if method == "pure-distributed":
            return self._shortest_path_rules(self.lsdb_adjacency(), self.net.nodes, PRIO_PRIMARY)
        if method == "cluster":
            return self._cluster_rules()
        if method == "migration" and self.mode is Mode.DISTRIBUTED:
            return self._region_rules()
        return []

    def _shortest_path_rules(self, adj: dict, dsts, priority: int) -> list[FlowRule]:
        rules = []
        for d in sorted(dsts):
            if d == self.node:
                continue
            hop = next_hops(adj, d).get(self.node) if d in adj else None
            action = Forward(hop) if hop is not None else Drop("no-route")
            rules.append(FlowRule(priority, Match(dst=d), (action,), origin="local-agent"))
        return rules

    def _cluster_rules(self) -> list[FlowRule]:
        part = self.partition
        members = part.members(self.cluster_id)
        adj = self.lsdb_adjacency()
        intra = restrict(adj, members)
        rules = self._shortest_path_rules(intra, members, PRIO_PRIMARY)
        for cid in sorted(part.clusters):
            if cid == self.cluster_id:
                continue
            other = part.members(cid)
            targets = [m for m in sorted(members) if any(v in other for v in adj.get(m, ()))]
            if self.node in targets:
                action = Forward(min(v for v in adj[self.node] if v in other))
            else:
                dist = bfs_distances(intra, targets)
                if self.node in dist:
                    d0 = dist[self.node]
                    action = Forward(min(v for v in intra[self.node] if dist.get(v, -1) == d0 - 1))
                else:
                    action = Drop("no-cluster-route")
            rules.append(FlowRule(PRIO_CLUSTER_TAG, Match(top_tag=cid), (action,),
                                  origin="local-agent"))
        return rules

    def cluster_reaches(self, cid: int) -> bool:
        """Whether any member of this node's cluster still links into ``cid``."""
        adj = self.lsdb_adjacency()
        other = self.partition.members(cid)
        return any(v in other for m in self.partition.members(self.cluster_id)
                   for v in adj.get(m, ()))

    def region(self, adj: Optional[dict] = None) -> set[int]:
        """Connected set of distributed-mode nodes containing this node."""
        adj = adj if adj is not None else self.lsdb_adjacency()
        dist_nodes = {self.node} | {o for o, (e, _) in self.lsdb.items()
                                    if e.mode == Mode.DISTRIBUTED.value}
        for comp in components(adj, dist_nodes & set(adj)):
            if self.node in comp:
                return set(comp)
        return {self.node}

    def _region_rules(self) -> list[FlowRule]:
        adj = self.lsdb_adjacency()
        region = self.region(adj)
        radj = restrict(adj, region)
        rules = self._shortest_path_rules(radj, region, PRIO_LOCAL_OVERRIDE)
        # the controller only learns of region-internal failures once the region
        # rejoins, so a detached piece must not bounce traffic off the SDN side
        for o in sorted(self.region(self.potential_adjacency()) - region):
            rules.append(FlowRule(PRIO_LOCAL_OVERRIDE, Match(dst=o), (Drop("no-route"),),
                                  origin="local-agent"))
        exits = [r for r in sorted(region) if any(v not in region for v in adj.get(r, ()))]
        if self.node in exits:
            action = Forward(min(v for v in adj[self.node] if v not in region))
        else:
            dist = bfs_distances(radj, exits)
            if self.node in dist:
                d0 = dist[self.node]
                action = Forward(min(v for v in radj[self.node] if dist.get(v, -1) == d0 - 1))
            else:
                action = Drop("no-egress")
        rules.append(FlowRule(PRIO_LOCAL_OVERRIDE - 1, Match(), (action,), origin="local-agent"))
        return rules

    # -- migration ---------------------------------------------------------------------
    def _keepalive_tick(self) -> None:
        net = self.net
        before = self.mode
        self._set_state(migration_step(self.mstate, "tick", net.sim.now, self.timers))
        if before is Mode.SDN and self.mode is Mode.MIGRATING:
            self._begin_migration()
        net.sim.schedule_in(self.timers.keepalive_period, "timer", self._keepalive_tick,
                            {"ka-check": self.node})

    def _begin_migration(self) -> None:
        net = self.net
        if not self.timers.pre_execution:
            self.warm_own_only()
            self.start_sync()
            self.originate()
        delay = lsdb_ready_delay(self.timers)
        if delay == 0:
            self._lsdb_ready()
        else:
            net.sim.schedule_in(delay, "timer", self._lsdb_ready, {"lsdb-ready": self.node})

    def warm_own_only(self) -> None:
        self.lsdb[self.node] = (self.own_lsa(), self.net.sim.now)

    def _lsdb_ready(self) -> None:
        before = self.mode
        self._set_state(migration_step(self.mstate, "lsdb-ready", self.net.sim.now, self.timers))
        if before is Mode.MIGRATING and self.mode is Mode.DISTRIBUTED:
            self.originate()
            self.schedule_recompute()

    def on_control(self, msg: ControlMsg, delivery) -> None:
        net = self.net
        kind = msg.kind
        if kind == "Keepalive":
            self._set_state(migration_step(self.mstate, "keepalive", net.sim.now, self.timers))
        elif kind == "RuleInstall":
            chain = msg.payload.get("chain")
            net.install_later(self.node, msg.payload["add"], msg.payload["remove"],
                              on_applied=lambda t: net.note_controller_install(
                                  self.node, chain, delivery, t))
            if net.method == "backup":
                self._refresh_backups(msg.payload["add"], msg.payload["remove"])
        elif kind == "ResyncCmd":
            self._on_resync(msg)
        elif kind == "ClusterRouteReply":
            if "retag" in msg.payload:
                net.finish_retag(self.node, msg.payload)
            else:
                self.adopt_partition(msg.payload["partition"])
                net.install_later(self.node, msg.payload["add"], msg.payload["remove"])

    def _refresh_backups(self, adds, removes) -> None:
        gone = set(removes)
        self.stored_backups = [r for r in self.stored_backups if r.rule_id not in gone]
        self.stored_backups += [r for r in adds if r.kind == "backup"]

    def _on_resync(self, msg: ControlMsg) -> None:
        net = self.net
        if self.mode is not Mode.DISTRIBUTED or not controller_alive(
                self.mstate, net.sim.now, self.timers):
            net.sim.mark("resync-ignored", node=self.node)
            return

        def installed(_t: int) -> None:
            self._set_state(migration_step(self.mstate, "resync", net.sim.now, self.timers))
            if self.mode is not Mode.SDN:
                return
            stale = sorted(r.rule_id for r in self.local.values())
            self.local = {}
            # make-before-break: controller rules are live before local ones go
            net.install_later(self.node, [], stale)
            if self.syncing:
                self.originate()
            links = [(self.node, n, self.believed_up.get(n, False)) for n in self.potential]
            self.report(links, recovery=False)

        net.install_later(self.node, msg.payload["add"], msg.payload["remove"],
                          on_applied=installed)

    # -- clustering ------------------------------------------------------------------------
    def adopt_partition(self, part: "Partition") -> None:
        self.partition = part
        self.cluster_id = part.cluster_of(self.node)
        self.epoch = part.epoch
        if self.net.started:
            self.originate()
            self.schedule_recompute()


def _dst_set(dst, nodes) -> set[int]:
    if dst is None:
        return set(nodes)
    if isinstance(dst, Prefix):
        return {n for n in nodes if dst.matches(n)}
    return {dst}
