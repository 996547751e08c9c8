"""Upper bound on exactly-reconstructible entries via bipartite matching.

Every (input, output) pair is a constraint; every trainable edge can be tuned
to satisfy at most one constraint whose paths it lies on.  The size of a
maximum matching between the two sides bounds how many target entries a
topology can hit exactly.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .topology import Topology, reachability

__all__ = ["ConstraintGraph", "build_constraint_graph", "max_matching", "hopcroft_karp"]


def _backward_reach(t: Topology) -> list[np.ndarray]:
    """``back[l][m, o]`` iff neuron ``m`` of layer ``l`` reaches output ``o``."""
    back = [np.eye(t.n_out, dtype=bool)]
    for mask in reversed(t.masks()):
        back.append((mask.T.astype(np.float64) @ back[-1]) > 0)
    return back[::-1]


@dataclass
class ConstraintGraph:
    """Constraints (input, output) against trainable edges.

    ``edges`` holds ``(layer, index)`` ids into the topology.  Adjacency rows
    are built on first access from two reachability tables, so memory stays
    at ``(n_in + n_out) * |edges|`` until rows are requested.
    """

    constraints: list[tuple[int, int]]
    edges: list[tuple[int, int]]
    excluded: int
    _src_reach: np.ndarray  # (n_in, |edges|): input reaches edge source
    _dst_reach: np.ndarray  # (|edges|, n_out): edge destination reaches output

    def neighbors(self, c: int) -> np.ndarray:
        return self.adjacency[c]

    @cached_property
    def adjacency(self) -> list[np.ndarray]:
        return [np.flatnonzero(self._src_reach[i] & self._dst_reach[:, o])
                for i, o in self.constraints]


def build_constraint_graph(t: Topology) -> ConstraintGraph:
    fwd = reachability(t)
    back = _backward_reach(t)
    edges, src_cols, dst_rows = [], [], []
    for l, layer in enumerate(t.layers):
        idx = np.flatnonzero(layer.trainable)
        edges.extend((l, int(e)) for e in idx)
        src_cols.append(fwd[l][:, layer.src[idx]])
        dst_rows.append(back[l + 1][layer.dst[idx], :])
    src_reach = np.concatenate(src_cols, axis=1) if edges else np.zeros((t.n_in, 0), bool)
    dst_reach = np.concatenate(dst_rows, axis=0) if edges else np.zeros((0, t.n_out), bool)
    # a pair is a constraint iff some trainable edge lies on one of its paths
    covered = (src_reach.astype(np.float64) @ dst_reach.astype(np.float64)) > 0
    constraints = [(int(i), int(o)) for i, o in zip(*np.nonzero(covered))]
    excluded = t.n_in * t.n_out - len(constraints)
    return ConstraintGraph(constraints, edges, excluded, src_reach, dst_reach)


def hopcroft_karp(n_left: int, n_right: int, adjacency) -> int:
    """Maximum-cardinality matching size of a bipartite graph.

    ``adjacency[u]`` lists right vertices adjacent to left vertex ``u``.
    """
    match_l = [-1] * n_left
    match_r = [-1] * n_right
    adj = [list(map(int, a)) for a in adjacency]

    # greedy start; Hopcroft-Karp phases only fix what it misses
    size = 0
    for u in range(n_left):
        for v in adj[u]:
            if match_r[v] == -1:
                match_l[u], match_r[v] = v, u
                size += 1
                break

    inf = n_left + 1
    while True:
        dist = [inf] * n_left
        queue = deque()
        for u in range(n_left):
            if match_l[u] == -1:
                dist[u] = 0
                queue.append(u)
        found = inf
        while queue:
            u = queue.popleft()
            if dist[u] >= found:
                continue
            for v in adj[u]:
                w = match_r[v]
                if w == -1:
                    found = min(found, dist[u] + 1)
                elif dist[w] == inf:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        if found == inf:
            return size

        # iterative DFS along the BFS layering
        ptr = [0] * n_left
        for root in range(n_left):
            if match_l[root] != -1:
                continue
            stack = [root]
            while stack:
                u = stack[-1]
                advanced = False
                while ptr[u] < len(adj[u]):
                    v = adj[u][ptr[u]]
                    ptr[u] += 1
                    w = match_r[v]
                    if w == -1:
                        if dist[u] + 1 != found:
                            continue
                        # augment along the stack
                        for x in reversed(stack):
                            prev = match_l[x]
                            match_l[x], match_r[v] = v, x
                            v = prev
                        size += 1
                        stack = []
                        advanced = True
                        break
                    if dist[w] == dist[u] + 1:
                        stack.append(w)
                        advanced = True
                        break
                if not advanced:
                    dist[u] = inf
                    stack.pop()


def max_matching(g: ConstraintGraph) -> int:
    return hopcroft_karp(len(g.constraints), len(g.edges), g.adjacency)
