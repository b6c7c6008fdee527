"""Partitioning nodes into routing clusters and the overlay graph between them."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .routing import Adjacency, components


@dataclass
class Partition:
    clusters: dict[int, frozenset]
    borders: dict[int, frozenset] = field(default_factory=dict)
    epoch: int = 0
    size: int = 1
    disconnected: bool = False

    def __post_init__(self):
        self.membership = {n: cid for cid, ns in self.clusters.items() for n in ns}

    def cluster_of(self, node: int) -> int:
        return self.membership[node]

    def members(self, cid: int) -> frozenset:
        return self.clusters[cid]

    def __len__(self) -> int:
        return len(self.clusters)

    def describe(self) -> dict:
        return {
            "epoch": self.epoch,
            "size": self.size,
            "clusters": {str(c): sorted(ns) for c, ns in sorted(self.clusters.items())},
            "borders": {str(c): sorted([list(b) for b in bs])
                        for c, bs in sorted(self.borders.items())},
        }


@dataclass
class Overlay:
    adj: dict[int, list[int]]
    borders: dict[int, frozenset]


def partition(adj: Adjacency, size: int, epoch: int = 0) -> Partition:
    """Grow clusters breadth-first from the lowest-id unassigned node.

    Every cluster has at most ``size`` nodes and induces a connected
    subgraph; ``size=1`` gives singletons and ``size=len(adj)`` on a
    connected graph gives one cluster.
    """
    if size < 1:
        raise ValueError("cluster size must be >= 1")
    unassigned = set(adj)
    clusters: dict[int, frozenset] = {}
    for seed in sorted(adj):
        if seed not in unassigned:
            continue
        members = [seed]
        unassigned.discard(seed)
        queue = deque([seed])
        while queue and len(members) < size:
            u = queue.popleft()
            for v in adj[u]:
                if v in unassigned and len(members) < size:
                    unassigned.discard(v)
                    members.append(v)
                    queue.append(v)
        clusters[len(clusters)] = frozenset(members)
    part = Partition(clusters, epoch=epoch, size=size,
                     disconnected=len(components(adj)) > 1)
    part.borders = overlay_graph(part, adj).borders
    return part


def overlay_graph(part: Partition, adj: Adjacency) -> Overlay:
    """Clusters as vertices; an edge wherever some up link joins two clusters."""
    edges: dict[int, set[int]] = {cid: set() for cid in part.clusters}
    borders: dict[int, set] = {cid: set() for cid in part.clusters}
    for u in adj:
        cu = part.membership.get(u)
        if cu is None:
            continue
        for v in adj[u]:
            cv = part.membership.get(v)
            if cv is None or cv == cu:
                continue
            edges[cu].add(cv)
            borders[cu].add((u, cv))
    return Overlay({c: sorted(vs) for c, vs in sorted(edges.items())},
                   {c: frozenset(bs) for c, bs in borders.items()})


def validate_partition(part: Partition, adj: Adjacency) -> list[str]:
    """Invariant violations: disjoint cover, intra-cluster connectivity, true borders."""
    problems = []
    seen: dict[int, int] = {}
    for cid, ns in part.clusters.items():
        for n in ns:
            if n in seen:
                problems.append(f"node {n} in clusters {seen[n]} and {cid}")
            seen[n] = cid
        if len(components(adj, ns)) > 1:
            problems.append(f"cluster {cid} not connected")
    missing = set(adj) - set(seen)
    if missing:
        problems.append(f"uncovered nodes {sorted(missing)}")
    for cid, bs in part.borders.items():
        for node, other in bs:
            if not any(part.membership.get(v) == other for v in adj.get(node, ())):
                problems.append(f"border ({node}->{other}) has no link")
    return problems


def intra_links(part: Partition, adj: Adjacency) -> dict[int, set]:
    out: dict[int, set] = {cid: set() for cid in part.clusters}
    for u in adj:
        cu = part.membership.get(u)
        for v in adj[u]:
            if u < v and part.membership.get(v) == cu and cu is not None:
                out[cu].add((u, v))
    return out


@dataclass
class ReclusterPolicy:
    """When to re-partition: every ``period`` µs and/or when a cluster lost
    more than ``threshold`` of its internal links since the last epoch."""
    period: int = 0
    threshold: Optional[float] = None

    def periodic_times(self, horizon: int) -> list[int]:
        if self.period <= 0:
            return []
        return list(range(self.period, horizon + 1, self.period))

    def threshold_exceeded(self, part: Partition, baseline: Adjacency,
                           current: Adjacency) -> bool:
        if self.threshold is None:
            return False
        before = intra_links(part, baseline)
        after = intra_links(part, current)
        for cid, links in before.items():
            if not links:
                continue
            lost = len(links - after[cid])
            if lost / len(links) > self.threshold:
                return True
        return False


def recluster(part: Partition, adj: Adjacency) -> Partition:
    """Re-partition the current view with the same target size, next epoch."""
    return partition(adj, part.size, epoch=part.epoch + 1)
