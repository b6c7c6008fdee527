"""One simulated network: topology, data plane, agents and controller wired
onto a single event loop, plus the per-run metrics and delay measurement."""
from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional

from .agent import Agent, Mode
from .config import ScenarioConfig
from .controller import ControlMsg, Controller
from .dataplane import FlowRule, FlowTable, Packet, TagStack, forward_step
from .kernel import Fabric, Simulator, link_key

FATAL_INCIDENTS = ("unreconfigured-node",)


@dataclass
class Metrics:
    generated: int = 0
    delivered: int = 0
    dropped: Counter = field(default_factory=Counter)
    messages: Counter = field(default_factory=Counter)
    incidents: list = field(default_factory=list)
    misses_reported: int = 0
    reconciliations: int = 0
    retags: int = 0

    def count_message(self, kind: str) -> None:
        self.messages[kind] += 1

    def heartbeat_dropped(self, cause: str) -> None:
        pass

    def lsa_dropped(self, cause: str) -> None:
        pass

    def incident(self, kind: str, **fields) -> None:
        self.incidents.append(dict(fields, kind=kind))

    @property
    def control_messages(self) -> int:
        return sum(v for k, v in self.messages.items() if k not in ("heartbeat", "lsa"))


@dataclass
class DelaySample:
    """Reaction delay of one failure, measured at its first detecting node."""
    trial: int
    method: str
    delay_us: int
    signal_up: int = 0
    compute: int = 0
    signal_down: int = 0
    install: int = 0
    retries: int = 0
    link: tuple = ()
    node: int = -1
    detected_at: int = 0

    COLUMNS = ("trial", "method", "delay_us", "signal_up_us", "compute_us",
               "signal_down_us", "install_us", "retries_us")

    @property
    def components(self) -> tuple:
        return (self.signal_up, self.compute, self.signal_down, self.install, self.retries)

    def row(self) -> list:
        return [self.trial, self.method, self.delay_us, *self.components]


@dataclass
class FailureRecord:
    link: tuple
    failed_at: int
    restored_at: Optional[int] = None
    detections: dict = field(default_factory=dict)
    first: Optional[int] = None
    detected_at: Optional[int] = None
    path: str = "local"                 # local | backup | controller
    controller_involved: bool = False
    awaiting_install: bool = False
    sample: Optional[DelaySample] = None

    @property
    def handled_locally(self) -> bool:
        return self.first is not None and not self.controller_involved


@dataclass
class RunReport:
    method: str
    seed: int
    end_time: int
    generated: int
    delivered: int
    dropped: dict
    in_flight: int
    anomalies: list
    messages: dict
    incidents: list
    high_water: dict
    overflows: int
    samples: list
    censored: list
    failures: list
    reconciliations: int
    misses_reported: int
    retags: int
    partitions: list

    @property
    def conserved(self) -> bool:
        return self.generated == self.delivered + sum(self.dropped.values()) + self.in_flight

    @property
    def delivery_ratio(self) -> float:
        return self.delivered / self.generated if self.generated else 1.0

    @property
    def locality(self) -> float:
        detected = [f for f in self.failures if f.first is not None]
        if not detected:
            return 1.0
        return sum(f.handled_locally for f in detected) / len(detected)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "end_time_us": self.end_time,
            "packets": {"generated": self.generated, "delivered": self.delivered,
                        "dropped": dict(sorted(self.dropped.items())),
                        "in_flight": self.in_flight},
            "anomalies": self.anomalies,
            "messages": dict(sorted(self.messages.items())),
            "incidents": self.incidents,
            "rule_high_water": {str(n): v for n, v in sorted(self.high_water.items())},
            "table_overflows": self.overflows,
            "samples": len(self.samples),
            "censored": [{"link": list(f.link), "failed_at_us": f.failed_at}
                         for f in self.censored],
            "failures": [{"link": list(f.link), "failed_at_us": f.failed_at,
                          "first_detector": f.first, "detected_at_us": f.detected_at,
                          "handled_locally": f.handled_locally} for f in self.failures],
            "reconciliations": self.reconciliations,
            "misses_reported": self.misses_reported,
            "retags": self.retags,
            "partitions": self.partitions,
        }


class Network:
    """A configured scenario ready to run on its own simulator."""

    def __init__(self, cfg: ScenarioConfig, seed: Optional[int] = None, trial: int = 0,
                 record_trace: bool = True, trace_heartbeats: bool = False):
        self.cfg = cfg
        self.method = cfg.method
        self.knobs = cfg.knobs
        self.seed = cfg.seed if seed is None else seed
        self.trial = trial
        self.sim = Simulator(self.seed, record_trace)
        self.topo = cfg.build_topology()
        self.fabric = Fabric(self.sim, self.topo)
        self.nodes = sorted(cfg.nodes)
        self.demands = cfg.demand_list()
        self.metrics = Metrics()
        self.trace_heartbeats = trace_heartbeats
        self.ttl = self.knobs.ttl or 2 * len(self.nodes)
        self.tables = {n: FlowTable(n, self.knobs.table_capacity) for n in self.nodes}
        self._rule_ids = itertools.count()
        self._msg_ids = itertools.count()
        self._pkt_ids = itertools.count()
        self.packets: list[Packet] = []
        self.live: dict[int, Packet] = {}
        self.parked: dict[int, Packet] = {}
        self.failures: list[FailureRecord] = []
        self.open_failures: dict[tuple, FailureRecord] = {}
        self.samples: list[DelaySample] = []
        self.partitions: list[dict] = []
        self.started = False
        self.stop_when_sampled = False
        self._expected_failures = 0
        self.agents: dict[int, Agent] = {}
        for n in self.nodes:
            self.agents[n] = Agent(self, n)
        self.controller = Controller(self)

    # -- setup -------------------------------------------------------------------
    @property
    def tag_depth(self) -> int:
        if self.knobs.tag_depth is not None:
            return self.knobs.tag_depth
        part = self.controller.partition
        return max(1, len(part) if part is not None else 1)

    def new_rule_id(self) -> int:
        return next(self._rule_ids)

    def start(self) -> None:
        if self.started:
            return
        self.controller.bootstrap()
        for n in self.nodes:
            self.agents[n].bootstrap()
        for ev in self.cfg.events:
            self._schedule_event(ev)
        if self.knobs.traffic_interval_us > 0:
            self._schedule_traffic(self.knobs.traffic_interval_us)
        self.started = True

    def _schedule_event(self, ev) -> None:
        if ev.type == "link":
            a, b = ev.link
            up = ev.state == "up"
            if not up:
                self._expected_failures += 1
            self.fabric.schedule_link_event(a, b, up, ev.t_us,
                                            after=lambda: self._true_link_change(a, b, up))
        elif ev.type == "control":
            targets = self.nodes if ev.node == "all" else [ev.node]
            up = ev.state == "up"

            def fire() -> None:
                for n in targets:
                    self.topo.set_control_state(n, up)

            self.sim.schedule(ev.t_us, "link-change", fire,
                              {"control": ev.node, "up": up})
        elif ev.type == "recluster":
            def fire() -> None:
                if self.method == "cluster":
                    self.controller.do_recluster()
                else:
                    self.sim.mark("recluster-ignored", method=self.method)

            self.sim.schedule(ev.t_us, "timer", fire, {"recluster": "scheduled"})

    def _schedule_traffic(self, interval: int) -> None:
        rng = self.sim.rng("traffic-phase")
        horizon = self.knobs.horizon_us
        for src, dst in self.demands:
            phase = rng.randrange(interval)

            def emit(src=src, dst=dst) -> None:
                self.send_packet(src, dst)
                if self.sim.now + interval <= horizon:
                    self.sim.schedule_in(interval, "timer", emit)

            if phase <= horizon:
                self.sim.schedule(phase, "timer", emit)

    def _true_link_change(self, a: int, b: int, up: bool) -> None:
        key = link_key(a, b)
        if up:
            rec = self.open_failures.pop(key, None)
            if rec is not None:
                rec.restored_at = self.sim.now
        else:
            rec = FailureRecord(key, self.sim.now)
            self.failures.append(rec)
            self.open_failures[key] = rec

    # -- rule installation ---------------------------------------------------------
    def _install(self, n: int, rule: FlowRule) -> Optional[FlowRule]:
        if rule.rule_id < 0:
            rule = rule.with_id(self.new_rule_id())
        if not self.tables[n].install(rule):
            self.metrics.incident("table-overflow", node=n, rule=rule.rule_id)
            return None
        return rule

    def install_now(self, n: int, rules: list[FlowRule]) -> list[FlowRule]:
        out = []
        for r in rules:
            done = self._install(n, r)
            if done is not None:
                out.append(done)
        return out

    def install_later(self, n: int, adds: list[FlowRule], removes: list[int],
                      on_applied: Optional[Callable[[int], None]] = None) -> None:
        """Apply a rule delta after the install latency; additions go in first."""
        def apply() -> None:
            for r in adds:
                self._install(n, r)
            for rid in removes:
                self.tables[n].remove(rid)
            if on_applied is not None:
                on_applied(self.sim.now)

        self.sim.schedule_in(self.knobs.t_install_us, "timer", apply,
                             {"install": n, "add": len(adds), "remove": len(removes)})

    # -- control channel -------------------------------------------------------------
    @property
    def rto(self) -> int:
        return self.knobs.rto_us or 3 * self.cfg.control_latency.median

    def _send(self, node: int, msg: ControlMsg, on_deliver, on_fail, retries: int) -> None:
        msg.msg_id = next(self._msg_ids)
        attempts = itertools.count()

        def on_attempt() -> None:
            msg.retry_count = next(attempts)
            self.metrics.count_message(msg.kind)

        self.fabric.deliver_control(node, on_deliver, on_fail, self.rto, retries,
                                    {"msg": msg.kind, "id": msg.msg_id, "node": node},
                                    on_attempt)

    def send_to_node(self, n: int, msg: ControlMsg, on_delivered=None, on_lost=None,
                     retries: Optional[int] = None) -> None:
        def deliver(rec) -> None:
            self.agents[n].on_control(msg, rec)
            if on_delivered is not None:
                on_delivered(rec)

        def fail(rec) -> None:
            if msg.kind != "Keepalive":
                self.metrics.incident("unreconfigured-node", node=n, msg=msg.kind,
                                      msg_id=msg.msg_id)
            if on_lost is not None:
                on_lost(rec)

        self._send(n, msg, deliver, fail,
                   self.knobs.max_retries if retries is None else retries)

    def send_to_controller(self, n: int, msg: ControlMsg) -> None:
        def fail(rec) -> None:
            self.metrics.incident("report-undeliverable", node=n, msg=msg.kind,
                                  msg_id=msg.msg_id)

        self._send(n, msg, lambda rec: self.controller.receive(msg, rec), fail,
                   self.knobs.max_retries)

    # -- packets -------------------------------------------------------------------------
    def send_packet(self, src: int, dst: int) -> Packet:
        agent = self.agents[src]
        pkt = Packet(next(self._pkt_ids), src, dst, TagStack([], self.tag_depth),
                     created_at=self.sim.now, epoch=agent.epoch)
        self.metrics.generated += 1
        self.packets.append(pkt)
        self.live[pkt.id] = pkt
        self._process(src, pkt, None)
        return pkt

    def inject_at(self, t: int, src: int, dst: int) -> None:
        self.sim.schedule(t, "timer", lambda: self.send_packet(src, dst),
                          {"inject": [src, dst]})

    def _finish(self, pkt: Packet, status: str, cause: str = "") -> None:
        pkt.status = status
        pkt.cause = cause
        self.live.pop(pkt.id, None)
        if status == "delivered":
            self.metrics.delivered += 1
        else:
            self.metrics.dropped[cause] += 1

    def _process(self, node: int, pkt: Packet, prev: Optional[int]) -> None:
        agent = self.agents[node]
        ingress = None
        if self.method == "cluster" and agent.partition is not None:
            if pkt.tags.entries and pkt.epoch != agent.epoch:
                self._park(node, pkt)
                return
            pkt.epoch = agent.epoch
            if prev is not None and agent.partition.membership.get(prev) != agent.cluster_id:
                ingress = agent.cluster_id
        dec = forward_step(self.tables[node], pkt, agent.believes_down, self.ttl, ingress)
        if dec.kind == "deliver":
            self._finish(pkt, "delivered")
        elif dec.kind == "forward":
            nxt = dec.next_hop
            self.fabric.transmit(node, nxt, lambda: self._process(nxt, pkt, node),
                                 lambda cause: self._finish(pkt, "dropped", cause),
                                 {"pkt": pkt.id, "hop": [node, nxt]})
        elif dec.kind == "drop":
            self._finish(pkt, "dropped", dec.cause)
        else:
            if self.method == "pure-sdn":
                self._finish(pkt, "dropped", "table-miss")
                self.send_to_controller(node, ControlMsg(
                    "MissReport", {"dst": pkt.dst, "packet": pkt.id}, src=node,
                    dst="controller"))
            elif agent.mode is Mode.SDN and self.method != "cluster":
                self._finish(pkt, "dropped", "table-miss")
            else:
                self._finish(pkt, "dropped", "dead-end")

    def _park(self, node: int, pkt: Packet) -> None:
        """Hold an old-epoch tagged packet until the controller re-tags it."""
        self.metrics.retags += 1
        self.parked[pkt.id] = pkt
        self.send_to_controller(node, ControlMsg(
            "MissReport", {"retag": True, "dst": pkt.dst, "packet": pkt.id},
            src=node, dst="controller"))

    def finish_retag(self, node: int, payload: dict) -> None:
        pkt = self.parked.pop(payload["retag"], None)
        if pkt is None:
            return
        stack = payload["stack"]
        if stack is None:
            pkt.log(node, ())
            self._finish(pkt, "dropped", "no-cluster-route")
            return
        pkt.tags.entries = list(stack)
        pkt.epoch = payload["epoch"]
        self._process(node, pkt, node)

    # -- measurement hooks ------------------------------------------------------------------
    def _record_for(self, node: int, nbr: int) -> Optional[FailureRecord]:
        return self.open_failures.get(link_key(node, nbr))

    def note_detection(self, node: int, nbr: int) -> None:
        rec = self._record_for(node, nbr)
        now = self.sim.now
        if rec is None:
            self.sim.mark("false-detection", node=node, neighbor=nbr)
            return
        rec.detections.setdefault(node, now)
        if rec.first is None:
            rec.first = node
            rec.detected_at = now
            self.sim.mark("detection", node=node, neighbor=nbr, failed_at=rec.failed_at)

    def note_report(self, a: int, b: int) -> None:
        rec = self._record_for(a, b)
        if rec is None:
            return
        rec.controller_involved = True
        if rec.first == a and rec.sample is None:
            rec.path = "controller"

    def note_local_activation(self, node: int, nbr: int) -> None:
        rec = self._record_for(node, nbr)
        if rec is None or rec.first != node or rec.sample is not None:
            return
        rec.path = "backup"
        self._complete(rec, DelaySample(self.trial, self.method, 0))

    def note_local_effective(self, node: int, computed_at: int, applied_at: int) -> None:
        for rec in list(self.open_failures.values()):
            if (rec.first == node and rec.sample is None and rec.path == "local"
                    and computed_at >= rec.detected_at):
                total = applied_at - rec.detected_at
                self._complete(rec, DelaySample(
                    self.trial, self.method, total, compute=computed_at - rec.detected_at,
                    install=applied_at - computed_at))

    def _chain_records(self, chain: Optional[dict]) -> list[FailureRecord]:
        if not chain or "links" not in chain:
            return []
        out = []
        for a, b in chain["links"]:
            rec = self._record_for(a, b)
            if rec is not None and rec.sample is None and rec.path == "controller":
                out.append(rec)
        return out

    def note_controller_reaction(self, chain: dict, touched: set) -> None:
        for rec in self._chain_records(chain):
            if rec.first in touched:
                rec.awaiting_install = True
            elif chain["reporter"] == rec.first and not rec.awaiting_install:
                self._complete(rec, self._chain_sample(rec, chain, None, chain["compute_done"]))

    def note_controller_install(self, node: int, chain: Optional[dict], delivery,
                                applied_at: int) -> None:
        for rec in self._chain_records(chain):
            if rec.first == node:
                self._complete(rec, self._chain_sample(rec, chain, delivery, applied_at))

    def _chain_sample(self, rec: FailureRecord, chain: dict, delivery,
                      applied_at: int) -> DelaySample:
        det = rec.detected_at
        t_r, t_s = chain["report_first_send"], chain["report_last_send"]
        t_a, t_c = chain["report_arrival"], chain["compute_done"]
        retries = t_s - t_r
        signal_down = install = 0
        if delivery is not None:
            retries += delivery.last_send - t_c
            signal_down = delivery.delivered_at - delivery.last_send
            install = applied_at - delivery.delivered_at
        return DelaySample(self.trial, self.method, applied_at - det,
                           signal_up=t_a - det - (t_s - t_r), compute=t_c - t_a,
                           signal_down=signal_down, install=install, retries=retries)

    def _complete(self, rec: FailureRecord, sample: DelaySample) -> None:
        sample.link = rec.link
        sample.node = rec.first
        sample.detected_at = rec.detected_at
        rec.sample = sample
        self.samples.append(sample)
        self.sim.mark("sample", link=list(rec.link), node=rec.first, delay_us=sample.delay_us,
                      path=rec.path)
        if (self.stop_when_sampled and self._expected_failures
                and sum(f.sample is not None for f in self.failures) >= self._expected_failures):
            self.sim.stop()

    def log_partition(self, part) -> None:
        d = part.describe()
        self.partitions.append(d)
        self.sim.mark("partition", **d)

    # -- running ---------------------------------------------------------------------------
    def run(self, until: Optional[int] = None, stop_when_sampled: bool = False) -> RunReport:
        self.start()
        self.stop_when_sampled = stop_when_sampled
        self.sim.run_until(self.knobs.horizon_us if until is None else until)
        return self.report()

    def report(self) -> RunReport:
        from .scenario import detect_loops

        censored = [f for f in self.failures if f.sample is None]
        return RunReport(
            method=self.method, seed=self.seed, end_time=self.sim.now,
            generated=self.metrics.generated, delivered=self.metrics.delivered,
            dropped=dict(self.metrics.dropped), in_flight=len(self.live),
            anomalies=detect_loops(self.packets), messages=dict(self.metrics.messages),
            incidents=list(self.metrics.incidents),
            high_water={n: t.high_water for n, t in self.tables.items()},
            overflows=sum(t.overflows for t in self.tables.values()),
            samples=list(self.samples), censored=censored, failures=list(self.failures),
            reconciliations=self.metrics.reconciliations,
            misses_reported=self.metrics.misses_reported, retags=self.metrics.retags,
            partitions=list(self.partitions))
