import random
from pathlib import Path

from hypothesis import given, settings, strategies as st

import oracles
from hsdn.clustering import overlay_graph, partition
from hsdn.config import Knobs
from hsdn.controller import (ControlMsg, backup_candidates, compress_rules, compute_backup_rules,
                             compute_cluster_sequence, compute_paths, prefix_cover,
                             reconcile_boundary, routes_to_rules)
from hsdn.dataplane import Drop, FlowRule, Forward, Match, PushTag, StatePred
from hsdn.kernel import MS, S, LatencyDist
from hsdn.network import Network
from hsdn.routing import without_link
from hsdn.scenario import builtin, config_from_graph, detect_loops, random_connected_graph

GOLDEN = Path(__file__).parent / "golden"
PROTO = {1: [2, 3], 2: [1, 3], 3: [1, 2]}


def all_pairs(nodes):
    return [(s, d) for s in nodes for d in nodes if s != d]


def test_prototype_direct_path():
    rs = compute_paths(PROTO, [(2, 3)])
    assert rs.path(2, 3) == [2, 3]


def test_prototype_path_after_link_loss():
    rs = compute_paths(without_link(PROTO, 2, 3), [(2, 3)])
    assert rs.path(2, 3) == [2, 1, 3]


def test_unreachable_gets_drop_rule():
    rs = compute_paths({1: [], 2: []}, [(1, 2)])
    rules = routes_to_rules(rs)
    assert rules[1][0].actions == (Drop("unreachable"),)
    assert rs.unreachable == [(1, 2)]


def test_paths_match_brute_force_on_random_graphs():
    for seed in range(10):
        rng = random.Random(seed)
        n = rng.randint(2, 10)
        edges = random_connected_graph(rng, n)
        adj = oracles.adjacency(range(n), edges)
        rs = compute_paths({u: sorted(v) for u, v in adj.items()}, all_pairs(range(n)))
        for s, d in all_pairs(range(n)):
            assert rs.path(s, d) == oracles.best_path(adj, s, d)


def _sdn_prototype(**knobs):
    cfg = builtin("prototype")
    cfg.control_latency = LatencyDist.constant(10 * MS)
    cfg.control_loss = 0.0
    for k, v in knobs.items():
        setattr(cfg.knobs, k, v)
    return cfg


def test_link_report_replaces_one_rule_at_each_endpoint():
    net = Network(_sdn_prototype())
    rep = net.run(until=11 * S)
    installs = [m for m in net.sim.trace if m[2] == "timer" and m[3] and "install" in m[3]]
    per_node = {d[3]["install"]: (d[3]["add"], d[3]["remove"]) for d in installs}
    assert per_node == {2: (1, 1), 3: (1, 1)}
    assert net.tables[2].lookup(3, None, lambda a, b: False).forward_target() == 1
    assert net.tables[3].lookup(2, None, lambda a, b: False).forward_target() == 1
    assert rep.messages["RuleInstall"] == 2


def test_known_state_report_is_idempotent():
    net = Network(_sdn_prototype())
    net.start()
    before = dict(net.metrics.messages)
    net.send_to_controller(2, ControlMsg("LinkReport", {"links": [[2, 3, True]]}, src=2))
    net.sim.run_until(1 * S)
    assert net.metrics.messages.get("RuleInstall", 0) == before.get("RuleInstall", 0)


def test_reaction_delay_hand_trace():
    # 10ms up + 1ms compute + 10ms down + 1ms install
    net = Network(_sdn_prototype())
    rep = net.run(stop_when_sampled=True)
    (s,) = rep.samples
    assert s.delay_us == 22 * MS
    assert s.components == (10 * MS, 1 * MS, 10 * MS, 1 * MS, 0)


def test_retransmission_counted_in_retries():
    cfg = _sdn_prototype(rto_us=60 * MS)
    net = Network(cfg)
    net.start()
    net.topo.control[2].up = False
    net.topo.control[3].up = False
    net.sim.schedule(10 * S + 350 * MS, "timer", lambda: [net.topo.set_control_state(n, True)
                                                          for n in (2, 3)])
    rep = net.run(stop_when_sampled=True)
    (s,) = rep.samples
    assert s.retries > 0
    assert sum(s.components) == s.delay_us


# -- cluster sequences -------------------------------------------------------------

LINE6 = {i: [j for j in (i - 1, i + 1) if 1 <= j <= 6] for i in range(1, 7)}


def test_line6_sequence():
    part = partition(LINE6, 3)
    ov = overlay_graph(part, LINE6)
    assert compute_cluster_sequence(1, 6, part, ov) == [part.cluster_of(6)]
    assert compute_cluster_sequence(1, 3, part, ov) == []


def test_cluster_sequences_match_enumeration():
    for seed in range(10):
        rng = random.Random(seed)
        n = rng.randint(3, 9)
        adj = {u: sorted(v) for u, v in
               oracles.adjacency(range(n), random_connected_graph(rng, n)).items()}
        part = partition(adj, rng.randint(1, n))
        ov = overlay_graph(part, adj)
        for s, d in all_pairs(range(n)):
            assert compute_cluster_sequence(s, d, part, ov) == \
                oracles.best_cluster_sequence(part.membership, adj, s, d)


def test_singleton_sequences_follow_sdn_paths():
    part = partition(PROTO, 1)
    ov = overlay_graph(part, PROTO)
    rs = compute_paths(PROTO, all_pairs([1, 2, 3]))
    for s, d in all_pairs([1, 2, 3]):
        seq = compute_cluster_sequence(s, d, part, ov)
        assert [min(part.members(c)) for c in seq] == rs.path(s, d)[1:]


# -- boundary reconciliation --------------------------------------------------------

def test_reconcile_line_forwards_into_region():
    adj = {0: [1], 1: [0, 2], 2: [1]}
    rec = reconcile_boundary(adj, [2], {1, 2})
    assert rec.routes.next_hop(0, 2) == 1 and not rec.violations


def test_reconcile_region_without_advertisement_routes_around():
    # square 0-1-2-3-0 plus region {4} hanging off 0 and 2
    adj = {0: [1, 3, 4], 1: [0, 2], 2: [1, 3, 4], 3: [0, 2], 4: [0, 2]}
    rec = reconcile_boundary(adj, [2, 4], {4}, advertised={frozenset({4}): []})
    assert rec.routes.next_hop(0, 4) is None
    assert rec.routes.next_hop(0, 2) == 1
    assert not rec.violations
    # oracle: shortest path on the graph with the region removed
    plain = {u: [v for v in vs if v != 4] for u, vs in adj.items() if u != 4}
    assert rec.routes.path(0, 2) == oracles.best_path(
        {u: set(v) for u, v in plain.items()}, 0, 2)


def _ping_pong_net(reconciled: bool):
    # s=0 (SDN), m=1 (distributed), t=2; the region routes dst 2 back to s
    cfg = config_from_graph([0, 1, 2], [(0, 1), (0, 2), (1, 2)], "migration")
    net = Network(cfg)
    net.start()
    for n in net.nodes:
        for rid in list(net.tables[n].rules):
            net.tables[n].remove(rid)
    net.install_now(1, [FlowRule(30, Match(dst=2), (Forward(0),), origin="local-agent")])
    if reconciled:
        net.fabric.apply_link_event(1, 2, False)
        rec = reconcile_boundary(net.topo.adjacency(), [2], {1})
        hop = rec.routes.next_hop(0, 2)
    else:
        hop = 1
    net.install_now(0, [FlowRule(10, Match(dst=2), (Forward(hop),))])
    net.send_packet(0, 2)
    net.sim.run_until(1 * S)
    return detect_loops(net.packets)


def test_ping_pong_caught_then_fixed_by_reconcile():
    before = _ping_pong_net(False)
    assert len(before) == 1 and before[0]["kind"] == "loop"
    assert _ping_pong_net(True) == []


# -- backup placement ----------------------------------------------------------------

TRI = {1: [2, 3], 2: [1, 3], 3: [1, 2]}


def test_triangle_backup():
    plan = compute_backup_rules(TRI, [(1, 2)], 1)
    (r,) = plan.rules[1]
    assert r.state_pred == StatePred(1, 2) and r.forward_target() == 3
    assert r.priority > 10


def test_budget_prefers_busier_link():
    # hub 0: link 0-4 carries three demands toward 4, link 0-5 one toward 5
    adj = {0: [1, 2, 3, 4, 5, 6], 1: [0], 2: [0], 3: [0], 4: [0, 6], 5: [0, 6], 6: [0, 4, 5]}
    demands = [(1, 4), (2, 4), (3, 4), (1, 5)]
    plan = compute_backup_rules(adj, demands, 1)
    cands, _ = backup_candidates(adj, demands)
    per_node = {}
    for c in cands:
        per_node.setdefault(c.node, []).append(c.count)
    assert plan.covered_demands == oracles.optimal_coverage(per_node, 1)
    assert plan.rules[0][0].state_pred.neighbor == 4 and plan.covered_demands == 3


def test_zero_budget_is_empty():
    plan = compute_backup_rules(TRI, [(1, 2)], 0)
    assert plan.rules == {} and plan.coverage == {}


def test_uncoverable_candidates_listed():
    plan = compute_backup_rules({1: [2], 2: [1]}, [(1, 2)], None)
    assert plan.uncoverable == [(1, (1, 2), 2)] and not plan.rules


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 4))
def test_budget_never_exceeded(seed, budget):
    rng = random.Random(seed)
    n = rng.randint(3, 8)
    adj = {u: sorted(v) for u, v in
           oracles.adjacency(range(n), random_connected_graph(rng, n)).items()}
    plan = compute_backup_rules(adj, all_pairs(range(n)), budget)
    for node, rules in plan.rules.items():
        assert len(rules) <= budget
        for r in rules:
            assert r.state_pred.node == node and r.state_pred.neighbor in adj[node]


# -- compression ----------------------------------------------------------------------

def _fwd_rules(dsts, hop, start=0):
    return [FlowRule(10, Match(dst=d), (Forward(hop),), rule_id=start + i)
            for i, d in enumerate(dsts)]


def test_full_block_becomes_one_prefix():
    (r,) = compress_rules(_fwd_rules([4, 5, 6, 7], 1), 3)
    assert str(r.match.dst) == "1**"


def test_partial_block_needs_two_rules():
    out = compress_rules(_fwd_rules([4, 5, 6], 1), 3)
    # a full-length prefix stays an exact match: 110 is dst 6
    assert sorted(str(r.match.dst) for r in out) == ["10*", "6"]


def test_prefix_cover_is_exact():
    assert sorted(str(p) for p in prefix_cover({0, 1, 2, 3, 5}, 3)) == ["0**", "101"]


@st.composite
def rule_tables(draw):
    width = 5
    n = draw(st.integers(1, 32))
    dsts = draw(st.lists(st.integers(0, 31), min_size=1, max_size=n, unique=True))
    rules = []
    for i, d in enumerate(dsts):
        prio = draw(st.sampled_from([10, 10, 20]))
        action = draw(st.sampled_from([Forward(1), Forward(2), Drop("x")]))
        pred = draw(st.sampled_from([None, None, StatePred(0, 1)]))
        kind = "backup" if pred is not None else "primary"
        rules.append(FlowRule(prio, Match(dst=d), (action,), kind=kind, state_pred=pred,
                              rule_id=i))
    if draw(st.booleans()):
        rules.append(FlowRule(10, Match(), (Drop("default"),), rule_id=len(rules)))
    return width, rules


@settings(max_examples=100, deadline=None)
@given(rule_tables())
def test_compression_sound_on_every_destination(table):
    width, rules = table
    out = compress_rules(rules, width)
    assert len(out) <= len(rules)
    for down in (lambda a, b: False, lambda a, b: True):
        for d in range(1 << width):
            assert oracles.table_decision(out, d, down=down) == \
                oracles.table_decision(rules, d, down=down)


def test_control_message_schema_golden():
    adds = [FlowRule(10, Match(dst=3), (Forward(1),), rule_id=4),
            FlowRule(25, Match(dst=6), (PushTag(1),), rule_id=5)]
    msg = ControlMsg("RuleInstall", {"add": adds, "remove": [2]}, msg_id=7, src="controller",
                     dst=2)
    report = ControlMsg("LinkReport", {"links": [[2, 3, False]], "detected_at": 1000},
                        msg_id=8, src=2, dst="controller")
    text = msg.dumps() + "\n" + report.dumps() + "\n"
    assert text == (GOLDEN / "control_msgs.jsonl").read_text()


def test_unknown_message_kind_rejected():
    import pytest
    with pytest.raises(ValueError):
        ControlMsg("Gossip", {})


def test_controller_view_lags_truth_until_report():
    cfg = _sdn_prototype()
    net = Network(cfg)
    net.run(until=10 * S + 1)
    assert not net.topo.link(2, 3).up and net.controller.view.link(2, 3).up
    net.sim.run_until(11 * S)
    assert not net.controller.view.link(2, 3).up


def test_knob_defaults_for_retransmission():
    cfg = builtin("prototype")
    assert Network(cfg).rto == 3 * cfg.control_latency.median
    assert Knobs().max_retries == 3
