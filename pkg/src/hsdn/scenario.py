"""Built-in scenarios, trial batches, delay statistics, loop detection and
the plain-text artifacts a run leaves on disk."""
from __future__ import annotations

import io
import json
import math
import random
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .config import (METHODS, ConfigError, EventSpec, Knobs, LinkSpec, ScenarioConfig,
                     normalize_method)
from .kernel import MS, S, LatencyDist, derive_seed
from .network import DelaySample, Network, RunReport

BUILTIN_SCENARIOS = ("prototype", "line6", "triangle", "grid12-fuzz")


def _links(pairs: Iterable[tuple[int, int]]) -> list[LinkSpec]:
    return [LinkSpec(a, b) for a, b in pairs]


def grid_edges(rows: int, cols: int, first: int = 0) -> list[tuple[int, int]]:
    edges = []
    for r in range(rows):
        for c in range(cols):
            n = first + r * cols + c
            if c + 1 < cols:
                edges.append((n, n + 1))
            if r + 1 < rows:
                edges.append((n, n + cols))
    return edges


def builtin(name: str) -> ScenarioConfig:
    """A fresh copy of a named scenario."""
    if name == "prototype":
        # hub phone 1 with phones 2 and 3 linked to it and to each other
        return ScenarioConfig(
            name="prototype", nodes=[1, 2, 3], links=_links([(1, 2), (1, 3), (2, 3)]),
            method="pure-sdn", events=[EventSpec(10 * S, "link", link=(2, 3), state="down")],
            knobs=Knobs(trials=200))
    if name == "line6":
        return ScenarioConfig(
            name="line6", nodes=list(range(1, 7)),
            links=_links((i, i + 1) for i in range(1, 6)), method="cluster",
            knobs=Knobs(cluster_size=3, horizon_us=10 * S))
    if name == "triangle":
        return ScenarioConfig(
            name="triangle", nodes=[1, 2, 3], links=_links([(1, 2), (2, 3), (1, 3)]),
            method="backup", demands=[(1, 2)],
            events=[EventSpec(5 * S, "link", link=(1, 2), state="down")],
            knobs=Knobs(backup_budget=1, horizon_us=10 * S))
    if name == "grid12-fuzz":
        return ScenarioConfig(
            name="grid12-fuzz", nodes=list(range(12)), links=_links(grid_edges(3, 4)),
            method="migration", control_latency=LatencyDist.constant(5 * MS), control_loss=0.0,
            knobs=Knobs(heartbeat_period_us=100 * MS, keepalive_period_us=100 * MS,
                        keepalive_misses=3, stability_window_us=300 * MS,
                        discovery_round_us=200 * MS, horizon_us=7 * S, cluster_size=4))
    raise ConfigError([f"unknown built-in scenario {name!r}"])


def line6_failure_schedule(start: int = 1 * S, spacing: int = 2 * S) -> list[EventSpec]:
    """Each line6 link fails once and comes back before the next one fails."""
    events = []
    t = start
    for a in range(1, 6):
        events.append(EventSpec(t, "link", link=(a, a + 1), state="down"))
        events.append(EventSpec(t + spacing // 2, "link", link=(a, a + 1), state="up"))
        t += spacing
    return events


def config_from_graph(nodes: Sequence[int], edges: Iterable[tuple[int, int]],
                      method: str = "pure-sdn", seed: int = 0, name: str = "graph",
                      **knobs) -> ScenarioConfig:
    cfg = ScenarioConfig(name=name, nodes=sorted(nodes), links=_links(edges),
                         method=normalize_method(method), seed=seed)
    for k, v in knobs.items():
        setattr(cfg.knobs, k, v)
    return cfg


# --------------------------------------------------------------------------
# random topologies

def random_connected_graph(rng: random.Random, n: int, extra: float = 0.3
                           ) -> list[tuple[int, int]]:
    """Random spanning tree on ``0..n-1`` plus each other pair with probability ``extra``."""
    order = list(range(n))
    rng.shuffle(order)
    edges = set()
    for i in range(1, n):
        a, b = order[i], order[rng.randrange(i)]
        edges.add((min(a, b), max(a, b)))
    for a in range(n):
        for b in range(a + 1, n):
            if (a, b) not in edges and rng.random() < extra:
                edges.add((a, b))
    return sorted(edges)


def is_biconnected(n: int, edges: Sequence[tuple[int, int]]) -> bool:
    """No single link removal disconnects the graph (2-edge-connected)."""
    from .routing import components

    def adj_without(skip):
        adj = {u: [] for u in range(n)}
        for e in edges:
            if e != skip:
                adj[e[0]].append(e[1])
                adj[e[1]].append(e[0])
        return adj

    if len(components(adj_without(None))) != 1:
        return False
    return all(len(components(adj_without(e))) == 1 for e in edges)


def random_biconnected_graph(rng: random.Random, n: int, extra: float = 0.2
                             ) -> list[tuple[int, int]]:
    """Random Hamiltonian cycle plus random chords; always 2-edge-connected."""
    order = list(range(n))
    rng.shuffle(order)
    edges = {(min(order[i], order[(i + 1) % n]), max(order[i], order[(i + 1) % n]))
             for i in range(n)}
    for a in range(n):
        for b in range(a + 1, n):
            if rng.random() < extra:
                edges.add((a, b))
    return sorted(edges)


def random_waypoint_events(n: int, horizon: int, seed: int, area: float = 100.0,
                           radio_range: float = 40.0, speed: float = 5.0,
                           step: int = 100 * MS) -> tuple[list[LinkSpec], list[EventSpec]]:
    """Links among ``n`` nodes moving by random waypoint, flipped on range crossings.

    Every pair gets a link whose initial state is whether the two start in
    range; an event is emitted each sampled instant the relation changes.
    """
    rng = random.Random(derive_seed(seed, "waypoint"))
    pos = [(rng.uniform(0, area), rng.uniform(0, area)) for _ in range(n)]
    goal = [(rng.uniform(0, area), rng.uniform(0, area)) for _ in range(n)]
    dt = step / S

    def in_range(i, j):
        return math.dist(pos[i], pos[j]) <= radio_range

    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    state = {p: in_range(*p) for p in pairs}
    links = [LinkSpec(i, j, up=state[(i, j)]) for i, j in pairs]
    events = []
    for t in range(step, horizon + 1, step):
        for i in range(n):
            (x, y), (gx, gy) = pos[i], goal[i]
            d = math.hypot(gx - x, gy - y)
            move = speed * dt
            if d <= move:
                pos[i] = goal[i]
                goal[i] = (rng.uniform(0, area), rng.uniform(0, area))
            else:
                pos[i] = (x + (gx - x) * move / d, y + (gy - y) * move / d)
        for p in pairs:
            now = in_range(*p)
            if now != state[p]:
                state[p] = now
                events.append(EventSpec(t, "link", link=p, state="up" if now else "down"))
    return links, events


# --------------------------------------------------------------------------
# loop detection

def detect_loops(packets: Iterable) -> list[dict]:
    """Routing anomalies: (node, stack-length) revisits, TTL expiries, dead ends.

    At most one record per packet, the loop taking precedence.
    """
    out = []
    for pkt in packets:
        seen: dict[tuple, int] = {}
        loop = None
        for i, (node, depth, _) in enumerate(pkt.path_log):
            key = (node, depth)
            if key in seen:
                loop = (seen[key], i)
                break
            seen[key] = i
        if loop is not None:
            i, j = loop
            rules = sorted({r for _, _, rs in pkt.path_log[i:j] for r in rs})
            out.append({"kind": "loop", "packet": pkt.id, "src": pkt.src, "dst": pkt.dst,
                        "cycle": [n for n, _, _ in pkt.path_log[i:j + 1]], "rules": rules})
        elif pkt.cause == "ttl":
            out.append({"kind": "ttl", "packet": pkt.id, "src": pkt.src, "dst": pkt.dst,
                        "rules": sorted({r for _, _, rs in pkt.path_log for r in rs})})
        elif pkt.cause == "dead-end":
            node = pkt.path_log[-1][0] if pkt.path_log else pkt.src
            out.append({"kind": "dead-end", "packet": pkt.id, "src": pkt.src,
                        "dst": pkt.dst, "node": node,
                        "rules": sorted({r for _, _, rs in pkt.path_log for r in rs})})
    return out


# --------------------------------------------------------------------------
# trials and statistics

@dataclass
class TrialBatch:
    method: str
    samples: list[DelaySample]
    censored: list[int] = field(default_factory=list)

    @property
    def delays(self) -> list[int]:
        return sorted(s.delay_us for s in self.samples)


def trial_seed(seed: int, trial: int) -> int:
    return derive_seed(seed, f"trial/{trial}")


def run_one_trial(cfg: ScenarioConfig, trial: int) -> tuple[int, list[DelaySample], bool]:
    net = Network(cfg, seed=trial_seed(cfg.seed, trial), trial=trial, record_trace=False)
    rep = net.run(stop_when_sampled=True)
    return trial, rep.samples, bool(rep.censored)


def _trial_job(args):
    return run_one_trial(*args)


def run_trials(cfg: ScenarioConfig, n: int, jobs: int = 1) -> TrialBatch:
    """``n`` independent trials with per-trial derived seeds; order-independent."""
    if n < 1:
        raise ValueError("need at least one trial")
    args = [(cfg, i) for i in range(n)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_trial_job, args, chunksize=max(1, n // (4 * jobs))))
    else:
        results = [run_one_trial(c, i) for c, i in args]
    results.sort(key=lambda r: r[0])
    samples, censored = [], []
    for trial, ss, cens in results:
        samples.extend(ss)
        if cens:
            censored.append(trial)
    return TrialBatch(cfg.method, samples, censored)


def quantile(sorted_values: Sequence[int], q: float) -> int:
    """Smallest value whose empirical CDF reaches ``q``."""
    if not sorted_values:
        raise ValueError("no samples")
    k = max(1, math.ceil(q * len(sorted_values) - 1e-9))
    return sorted_values[min(k, len(sorted_values)) - 1]


def cdf_table(delays: Sequence[int]) -> list[tuple[int, float]]:
    """Empirical quantiles at 1% resolution: rows of (delay_us, cumulative_fraction)."""
    xs = sorted(delays)
    if not xs:
        return []
    return [(quantile(xs, p / 100), p / 100) for p in range(1, 101)]


def dominates(better: Sequence[int], worse: Sequence[int]) -> bool:
    """True when ``better``'s empirical CDF is at least ``worse``'s at every percentile."""
    a, b = sorted(better), sorted(worse)
    return all(quantile(a, p / 100) <= quantile(b, p / 100) for p in range(1, 101))


def summarize(delays: Sequence[int]) -> dict:
    xs = sorted(delays)
    if not xs:
        return {"n": 0, "mean_us": None, "var_us2": None, "p50_us": None, "p95_us": None,
                "p99_us": None}
    return {"n": len(xs), "mean_us": statistics.fmean(xs), "var_us2": statistics.pvariance(xs),
            "p50_us": quantile(xs, 0.50), "p95_us": quantile(xs, 0.95),
            "p99_us": quantile(xs, 0.99)}


# --------------------------------------------------------------------------
# comparison

def compare(cfgs: Sequence[ScenarioConfig], methods: Sequence[str], trials: Optional[int] = None,
            jobs: int = 1) -> list[dict]:
    """One summary row per method; every config must share one topology."""
    methods = [normalize_method(m) for m in methods]
    if len(methods) < 2:
        raise ConfigError(["compare needs at least two methods"])
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError([f"unknown method {m!r}" for m in bad])
    if len({c.topology_signature() for c in cfgs}) > 1:
        raise ConfigError(["configs describe different topologies"])
    base = cfgs[0]
    rows = []
    for m in methods:
        cfg = base.with_method(m)
        if m == "cluster" and cfg.knobs.cluster_size > len(cfg.nodes):
            cfg.knobs.cluster_size = len(cfg.nodes)
        n = trials if trials is not None else max(1, cfg.knobs.trials)
        batch = run_trials(cfg, n, jobs)
        rep = Network(cfg, record_trace=False).run()
        row = {"method": m, **summarize(batch.delays), "censored": len(batch.censored),
               "delivery_ratio": rep.delivery_ratio,
               "messages": sum(rep.messages.values()),
               "rule_occupancy": max(rep.high_water.values(), default=0)}
        rows.append(row)
    return rows


COMPARE_COLUMNS = ("method", "n", "mean_us", "var_us2", "p50_us", "p95_us", "p99_us",
                   "censored", "delivery_ratio", "messages", "rule_occupancy")


# --------------------------------------------------------------------------
# artifact text

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def samples_csv(samples: Sequence[DelaySample]) -> str:
    buf = io.StringIO()
    buf.write(",".join(DelaySample.COLUMNS) + "\n")
    for s in sorted(samples, key=lambda s: (s.trial, s.detected_at, s.link)):
        buf.write(",".join(_fmt(v) for v in s.row()) + "\n")
    return buf.getvalue()


def cdf_text(delays: Sequence[int]) -> str:
    lines = ["delay_us,cumulative_fraction"]
    lines += [f"{d},{f:.2f}" for d, f in cdf_table(delays)]
    return "\n".join(lines) + "\n"


def compare_csv(rows: Sequence[dict]) -> str:
    lines = [",".join(COMPARE_COLUMNS)]
    for r in rows:
        lines.append(",".join(_fmt(r.get(c)) for c in COMPARE_COLUMNS))
    return "\n".join(lines) + "\n"


def trace_jsonl(trace: Sequence[tuple]) -> str:
    out = []
    for t, seq, kind, detail in trace:
        out.append(json.dumps({"t_us": t, "seq": seq, "kind": kind, "detail": detail},
                              sort_keys=True, default=str))
    return "\n".join(out) + ("\n" if out else "")


def report_json(rep: RunReport, batch: Optional[TrialBatch] = None) -> str:
    d = rep.to_dict()
    if batch is not None:
        d["trials"] = {"method": batch.method, **summarize(batch.delays),
                       "censored_trials": batch.censored}
    return json.dumps(d, indent=2, sort_keys=True, default=str) + "\n"


# --------------------------------------------------------------------------
# fuzzing mixed operation

def fuzz_config(seed: int) -> ScenarioConfig:
    """grid12-fuzz with a random schedule of failures plus migrations or reclusterings.

    Even seeds exercise protocol migration, odd seeds the cluster method.
    Each step is followed by a quiet period and then one probe packet per
    ordered node pair, so probes see the reconciled state.
    """
    cfg = builtin("grid12-fuzz")
    cfg.seed = seed
    cfg.method = "migration" if seed % 2 == 0 else "cluster"
    rng = random.Random(derive_seed(seed, "fuzz-schedule"))
    links = [(l.a, l.b) for l in cfg.links]
    down: set = set()
    off: set = set()
    events: list[EventSpec] = []
    step = 1500 * MS
    steps = 4
    for i in range(steps):
        t = (i + 1) * step - 1000 * MS
        choice = rng.random()
        if cfg.method == "migration" and choice < 0.5:
            if off and rng.random() < 0.4:
                n = rng.choice(sorted(off))
                off.discard(n)
                events.append(EventSpec(t, "control", node=n, state="up"))
            else:
                n = rng.choice([x for x in cfg.nodes if x not in off])
                off.add(n)
                events.append(EventSpec(t, "control", node=n, state="down"))
        elif cfg.method == "cluster" and choice < 0.35:
            events.append(EventSpec(t, "recluster"))
        else:
            if down and rng.random() < 0.3:
                l = rng.choice(sorted(down))
                down.discard(l)
                events.append(EventSpec(t, "link", link=l, state="up"))
            else:
                l = rng.choice([x for x in links if x not in down])
                down.add(l)
                events.append(EventSpec(t, "link", link=l, state="down"))
    cfg.events = events
    cfg.knobs.horizon_us = steps * step + 200 * MS
    return cfg


def probe_times(cfg: ScenarioConfig) -> list[int]:
    step = 1500 * MS
    n = cfg.knobs.horizon_us // step
    return [(i + 1) * step for i in range(n)]


def fuzz_run(seed: int) -> RunReport:
    cfg = fuzz_config(seed)
    net = Network(cfg, record_trace=False)
    net.start()
    for t in probe_times(cfg):
        for src, dst in net.demands:
            net.inject_at(t, src, dst)
    return net.run()
