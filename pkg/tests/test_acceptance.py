"""End-to-end acceptance checks, one test per criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary prints a
PASS/FAIL line per criterion with its measured numbers.
"""
import random
import statistics
import time

import pytest

from hsdn.config import EventSpec
from hsdn.controller import backup_candidates, compress_rules, compute_backup_rules
from hsdn.dataplane import Drop, FlowRule, Forward, Match, StatePred
from hsdn.kernel import MS, S
from hsdn.network import Network
from hsdn.scenario import (builtin, config_from_graph, dominates, fuzz_config, fuzz_run,
                           line6_failure_schedule, random_biconnected_graph,
                           random_connected_graph, report_json, run_trials, trace_jsonl)

import oracles


@pytest.fixture
def record(record_property):
    def rec(crit, detail):
        record_property("criterion", crit)
        record_property("detail", detail)
    return rec


def all_pairs(nodes):
    return [(s, d) for s in nodes for d in nodes if s != d]


def walk_tables(net, src, dst):
    """Node sequence a packet takes through the installed tables right now."""
    pkt = net.send_packet(src, dst)
    net.sim.run_until(net.sim.now + 1 * S)
    assert pkt.status == "delivered", (src, dst, pkt.cause)
    return [n for n, _, _ in pkt.path_log]


def link_set(path):
    return {(min(a, b), max(a, b)) for a, b in zip(path, path[1:])}


# 1 ------------------------------------------------------------------------------

def test_criterion_1_hybrid_beats_pure_sdn(record):
    t0 = time.perf_counter()
    cfg = builtin("prototype")
    sdn = run_trials(cfg, 200)
    hyb = run_trials(cfg.with_method("backup"), 200)
    elapsed = time.perf_counter() - t0
    a, b = sdn.delays, hyb.delays
    m_sdn, m_hyb = statistics.fmean(a), statistics.fmean(b)
    v_sdn, v_hyb = statistics.pvariance(a), statistics.pvariance(b)
    record(1, f"n={len(a)}/{len(b)} mean {m_sdn / 1000:.2f}ms vs {m_hyb / 1000:.2f}ms, "
              f"var {v_sdn / 1e6:.1f}ms^2 vs {v_hyb / 1e6:.1f}ms^2, {elapsed:.1f}s")
    assert len(a) == len(b) == 200
    assert m_hyb <= 0.5 * m_sdn
    assert v_hyb < v_sdn
    assert dominates(b, a)
    assert elapsed < 10


# 2 ------------------------------------------------------------------------------

def test_criterion_2_installed_paths_match_oracle(record):
    t0 = time.perf_counter()
    checked = 0
    for seed in range(100):
        rng = random.Random(seed)
        n = rng.randint(2, 10)
        edges = random_connected_graph(rng, n)
        adj = oracles.adjacency(range(n), edges)
        cfg = config_from_graph(range(n), edges, "pure-sdn", seed=seed)
        net = Network(cfg, record_trace=False)
        net.start()
        for s, d in all_pairs(range(n)):
            assert walk_tables(net, s, d) == oracles.best_path(adj, s, d)
            checked += 1
    elapsed = time.perf_counter() - t0
    record(2, f"{checked} demands on 100 graphs, {elapsed:.1f}s")
    assert elapsed < 30


# 3 ------------------------------------------------------------------------------

def _traversals(cfg):
    net = Network(cfg, record_trace=False)
    net.run(until=1 * S)
    return {(s, d): link_set(walk_tables(net, s, d)) for s, d in cfg.demand_list()}


def _degenerate_mismatches(cfg):
    n = len(cfg.nodes)
    single = cfg.with_method("cluster").with_knobs(cluster_size=1)
    whole = cfg.with_method("cluster").with_knobs(cluster_size=n)
    bad = 0
    bad += _traversals(single) != _traversals(cfg.with_method("pure-sdn"))
    bad += _traversals(whole) != _traversals(cfg.with_method("pure-distributed"))
    return bad


def test_criterion_3_degenerate_cluster_sizes(record):
    graphs = [builtin("line6")]
    for seed in range(20):
        rng = random.Random(1000 + seed)
        n = rng.randint(2, 10)
        graphs.append(config_from_graph(range(n), random_connected_graph(rng, n),
                                        seed=seed))
    bad = sum(_degenerate_mismatches(g) for g in graphs)
    record(3, f"{len(graphs)} graphs, {bad} mismatching comparisons")
    assert bad == 0


# 4 ------------------------------------------------------------------------------

def test_criterion_4_fuzz_loop_freedom(record):
    t0 = time.perf_counter()
    dirty, probes = [], 0
    for seed in range(1000):
        rep = fuzz_run(seed)
        probes += rep.generated
        if rep.anomalies or not rep.conserved:
            dirty.append(seed)
    elapsed = time.perf_counter() - t0
    record(4, f"1000 schedules, {probes} probes, {len(dirty)} with anomalies, "
              f"{elapsed:.0f}s")
    assert dirty == []
    assert elapsed < 300


# 5 ------------------------------------------------------------------------------

def test_criterion_5_backup_coverage(record):
    sent = delivered = reports = failures = 0
    for seed in range(20):
        rng = random.Random(seed)
        n = rng.randint(3, 10)
        edges = random_biconnected_graph(rng, n)
        for a, b in edges:
            cfg = config_from_graph(range(n), edges, "backup", seed=seed,
                                    backup_budget=None, horizon_us=3 * S)
            cfg.events = [EventSpec(1 * S, "link", link=(a, b), state="down")]
            net = Network(cfg, record_trace=False)
            net.start()
            net.sim.run_until(1 * S)
            before = net.metrics.control_messages
            while len(net.failures[0].detections) < 2:
                net.sim.run_until(net.sim.now + 1 * MS)
            pkts = [net.send_packet(s, d) for s, d in all_pairs(range(n))]
            net.sim.run_until(net.sim.now + 1 * S)
            failures += 1
            sent += len(pkts)
            delivered += sum(p.status == "delivered" for p in pkts)
            reports += net.metrics.control_messages - before
    record(5, f"{failures} failures, {delivered}/{sent} delivered, "
              f"{reports} controller messages")
    assert delivered == sent
    assert reports == 0


# 6 ------------------------------------------------------------------------------

def _per_node_counts(adj, demands):
    cands, _ = backup_candidates(adj, demands)
    per_node: dict = {}
    for c in cands:
        per_node.setdefault(c.node, []).append(c.count)
    return per_node


def test_criterion_6_budget_monotone_and_optimal(record):
    graphs = [({1: [2, 3], 2: [1, 3], 3: [1, 2]}, [(1, 2)])]
    for seed in range(10):
        rng = random.Random(2000 + seed)
        n = rng.randint(3, 6) if seed < 5 else rng.randint(7, 10)
        adj = {u: sorted(v) for u, v in
               oracles.adjacency(range(n), random_connected_graph(rng, n)).items()}
        graphs.append((adj, all_pairs(range(n))))
    gaps = []
    for adj, demands in graphs:
        covered = [compute_backup_rules(adj, demands, b).covered_demands for b in range(6)]
        assert covered == sorted(covered)
        per_node = _per_node_counts(adj, demands)
        for b in range(6):
            best = oracles.optimal_coverage(per_node, b)
            if b <= 2 and len(adj) <= 6:
                assert covered[b] == best
            gaps.append(best - covered[b])
    record(6, f"{len(graphs)} graphs, B=0..5, max greedy gap {max(gaps)}")


# 7 ------------------------------------------------------------------------------

def _random_table(rng):
    dsts = rng.sample(range(32), rng.randint(1, 32))
    rules = []
    for i, d in enumerate(dsts):
        pred = StatePred(0, 1) if rng.random() < 0.2 else None
        action = rng.choice([Forward(1), Forward(2), Forward(3), Drop("x")])
        rules.append(FlowRule(rng.choice([10, 10, 20]), Match(dst=d), (action,),
                              kind="backup" if pred else "primary", state_pred=pred,
                              rule_id=i))
    return rules


def test_criterion_7_compression_sound(record):
    before = after = 0
    for seed in range(200):
        rules = _random_table(random.Random(seed))
        out = compress_rules(rules, 5)
        assert len(out) <= len(rules)
        for down in (lambda a, b: False, lambda a, b: True):
            for d in range(32):
                assert oracles.table_decision(out, d, down=down) == \
                    oracles.table_decision(rules, d, down=down)
        before += len(rules)
        after += len(out)
    record(7, f"200 tables, {before} rules -> {after}")


# 8 ------------------------------------------------------------------------------

def _artifacts(cfg):
    net = Network(cfg)
    rep = net.run()
    return trace_jsonl(net.sim.trace) + report_json(rep), rep


def test_criterion_8_determinism_and_conservation(record):
    cfgs = []
    for name in ("prototype", "line6", "triangle", "grid12-fuzz"):
        cfg = builtin(name)
        cfg.knobs.traffic_interval_us = 250 * MS
        cfg.knobs.horizon_us = min(cfg.knobs.horizon_us, 12 * S)
        cfgs.append(cfg)
    cfgs.append(builtin("prototype").with_method("backup"))
    line = builtin("line6")
    line.events = line6_failure_schedule()
    line.knobs.traffic_interval_us = 100 * MS
    cfgs.append(line)
    cfgs += [fuzz_config(s) for s in range(4)]
    packets = 0
    for cfg in cfgs:
        a, rep = _artifacts(cfg)
        b, _ = _artifacts(cfg)
        assert a == b, cfg.name
        assert rep.generated == rep.delivered + sum(rep.dropped.values()) + rep.in_flight
        packets += rep.generated
    batch_a = run_trials(builtin("prototype"), 5)
    batch_b = run_trials(builtin("prototype"), 5)
    assert [s.row() for s in batch_a.samples] == [s.row() for s in batch_b.samples]
    record(8, f"{len(cfgs)} scenarios twice, {packets} packets conserved")


# 9 ------------------------------------------------------------------------------

def _lsas(sigma):
    cfg = builtin("line6")
    cfg.knobs.sync_period_us = sigma
    return Network(cfg, record_trace=False).run().messages.get("lsa", 0)


def _locality(size):
    cfg = builtin("line6")
    cfg.knobs.cluster_size = size
    cfg.events = line6_failure_schedule()
    return Network(cfg, record_trace=False).run().locality


def test_criterion_9_tradeoff_knobs(record):
    full, half = _lsas(1 * S), _lsas(500 * MS)
    loc = [_locality(s) for s in (1, 2, 3, 6)]
    record(9, f"LSAs {full} -> {half} when sigma halves; locality s=1,2,3,6: "
              + ", ".join(f"{v:.2f}" for v in loc))
    assert half >= 2 * full - 1
    assert loc == sorted(loc)
