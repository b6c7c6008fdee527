"""Hop-count routing on adjacency maps with lowest-id tie-breaking."""
from __future__ import annotations

from collections import deque
from typing import Iterable, Mapping, Optional, Sequence

Adjacency = Mapping[int, Sequence[int]]


def bfs_distances(adj: Adjacency, targets: Iterable[int]) -> dict[int, int]:
    """Hop distance from every reachable node to the nearest of ``targets``."""
    dist: dict[int, int] = {}
    queue: deque[int] = deque()
    for t in sorted(set(targets)):
        if t in adj:
            dist[t] = 0
            queue.append(t)
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def next_hops(adj: Adjacency, dst: int) -> dict[int, int]:
    """Next hop toward ``dst`` for every node that can reach it.

    Picks the lowest-id neighbor one hop closer, so following next hops
    from any node traces a simple shortest path.
    """
    dist = bfs_distances(adj, [dst])
    hops = {}
    for u, du in dist.items():
        if u == dst:
            continue
        hops[u] = min(v for v in adj[u] if dist.get(v, -1) == du - 1)
    return hops


def shortest_path(adj: Adjacency, src: int, dst: int) -> Optional[list[int]]:
    if src == dst:
        return [src]
    hops = next_hops(adj, dst)
    if src not in hops:
        return None
    path = [src]
    while path[-1] != dst:
        path.append(hops[path[-1]])
    return path


def restrict(adj: Adjacency, keep: Iterable[int]) -> dict[int, list[int]]:
    """Induced sub-adjacency on ``keep``."""
    keep = set(keep)
    return {u: [v for v in adj[u] if v in keep] for u in sorted(keep) if u in adj}


def without_link(adj: Adjacency, a: int, b: int) -> dict[int, list[int]]:
    out = {u: list(vs) for u, vs in adj.items()}
    if a in out:
        out[a] = [v for v in out[a] if v != b]
    if b in out:
        out[b] = [v for v in out[b] if v != a]
    return out


def components(adj: Adjacency, nodes: Optional[Iterable[int]] = None) -> list[list[int]]:
    """Connected components (each sorted), ordered by their lowest id."""
    pool = sorted(adj if nodes is None else nodes)
    allowed = set(pool)
    seen: set[int] = set()
    out = []
    for s in pool:
        if s in seen:
            continue
        comp = []
        queue = deque([s])
        seen.add(s)
        while queue:
            u = queue.popleft()
            comp.append(u)
            for v in adj[u]:
                if v in allowed and v not in seen:
                    seen.add(v)
                    queue.append(v)
        out.append(sorted(comp))
    return out
