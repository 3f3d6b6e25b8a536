"""Topological bifurcation analysis over a reference rollout: TTC-derived
risk graphs per physical timestep, weighted clique enumeration, and temporal
scores that select the candidate adversary set."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .world import AgentState

__all__ = [
    "RiskGraph",
    "BifurcationScores",
    "ttc_surrogate",
    "edge_weight",
    "build_graph",
    "top_cliques",
    "temporal_scores",
    "dump_graphs_csv",
    "dump_scores_csv",
]


@dataclass(frozen=True)
class RiskGraph:
    """Undirected interaction graph at one physical timestep. Edges are
    stored once per unordered pair (i < j) with weight >= the build threshold."""

    timestep: int
    nodes: tuple[int, ...]
    edges: dict  # {(i, j): w} with i < j

    def neighbors(self, i: int) -> set[int]:
        out = set()
        for (a, b) in self.edges:
            if a == i:
                out.add(b)
            elif b == i:
                out.add(a)
        return out

    def weight(self, i: int, j: int) -> float:
        return self.edges[(min(i, j), max(i, j))]


@dataclass(frozen=True)
class BifurcationScores:
    """Per-agent temporal clique-occurrence counts and the ranked Top-K set."""

    scores: dict  # {agent_id: count}
    s_top: tuple[int, ...]
    requested_k: int = 0

    @property
    def truncated(self) -> bool:
        return len(self.s_top) < self.requested_k


def ttc_surrogate(a: AgentState, b: AgentState, tau_max: float) -> float:
    """Capped time-to-collision estimate from radial closing speed.

    Uses the center distance minus the safety radius (half the summed
    lengths); diverging or non-closing pairs return tau_max, coincident
    centers return 0.
    """
    if tau_max <= 0:
        raise ValueError("tau_max must be > 0")
    r = b.position - a.position
    dist = float(np.linalg.norm(r))
    if dist < 1e-6:
        return 0.0
    v = b.velocity - a.velocity
    closing = -float(r @ v) / dist
    if closing <= 1e-6:
        return tau_max
    r_safe = 0.5 * (a.length + b.length)
    return min(tau_max, max(0.0, (dist - r_safe) / closing))


def edge_weight(ttc: float, tau_max: float, beta: float) -> float:
    """Logistic risk weight sigma((tau_max - ttc) / beta) in [0, 1]."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    return float(expit((tau_max - ttc) / beta))


def build_graph(states: list[AgentState], timestep: int = 0, tau_max: float = 5.0,
                beta: float = 1.0, eps_w: float = 0.5) -> RiskGraph:
    """Risk graph over one joint state; keeps exactly the pairs whose weight
    clears eps_w."""
    if not 0.0 < eps_w < 1.0:
        raise ValueError("eps_w must be in (0, 1)")
    nodes = tuple(sorted(s.agent_id for s in states))
    by_id = {s.agent_id: s for s in states}
    edges = {}
    for i, j in itertools.combinations(nodes, 2):
        w = edge_weight(ttc_surrogate(by_id[i], by_id[j], tau_max), tau_max, beta)
        if w >= eps_w:
            edges[(i, j)] = w
    return RiskGraph(timestep=timestep, nodes=nodes, edges=edges)


def _maximal_cliques(adj: dict) -> list[frozenset]:
    """Bron-Kerbosch with pivoting over an adjacency-set mapping."""
    cliques = []

    def expand(r: set, p: set, x: set):
        if not p and not x:
            cliques.append(frozenset(r))
            return
        pivot = max(p | x, key=lambda u: len(adj[u] & p))
        for v in sorted(p - adj[pivot]):
            expand(r | {v}, p & adj[v], x & adj[v])
            p = p - {v}
            x = x | {v}

    expand(set(), set(adj), set())
    return cliques


def _clique_weight(g: RiskGraph, clique) -> float:
    return sum(g.weight(i, j) for i, j in itertools.combinations(sorted(clique), 2))


def top_cliques(g: RiskGraph, k_clique: int = 3, m_top: int = 3) -> list[tuple[int, ...]]:
    """The m_top heaviest cliques of size k_clique, by total pair weight.

    Sizes fall back from k_clique down to 2 when no clique of the requested
    size exists. Ties break lexicographically on the sorted node tuple.
    """
    if k_clique < 2:
        raise ValueError("k_clique must be >= 2")
    if not g.edges:
        return []
    adj = {n: set() for n in g.nodes}
    for (i, j) in g.edges:
        adj[i].add(j)
        adj[j].add(i)
    adj = {n: s for n, s in adj.items() if s}
    maximal = _maximal_cliques(adj)
    for size in range(k_clique, 1, -1):
        found = set()
        for mc in maximal:
            if len(mc) >= size:
                for sub in itertools.combinations(sorted(mc), size):
                    found.add(sub)
        if found:
            ranked = sorted(found, key=lambda c: (-_clique_weight(g, c), c))
            return ranked[:m_top]
    return []


def temporal_scores(graphs: list[RiskGraph], k_clique: int = 3, m_top: int = 3,
                    k_top: int = 4, ego_id: int | None = None) -> BifurcationScores:
    """Accumulate per-agent occurrences across every timestep's top cliques
    and rank the candidates (ego excluded, ties by ascending id)."""
    if not graphs:
        raise ValueError("need at least one graph")
    counts: dict[int, int] = {}
    for g in graphs:
        for n in g.nodes:
            counts.setdefault(n, 0)
        for clique in top_cliques(g, k_clique=k_clique, m_top=m_top):
            for agent in clique:
                counts[agent] += 1
    candidates = [a for a, f in counts.items() if f > 0 and a != ego_id]
    candidates.sort(key=lambda a: (-counts[a], a))
    return BifurcationScores(scores=dict(sorted(counts.items())),
                             s_top=tuple(candidates[:k_top]), requested_k=k_top)


def dump_graphs_csv(graphs: list[RiskGraph], path, tau_max: float = 5.0,
                    beta: float = 1.0) -> None:
    """Per-edge CSV (h, i, j, ttc, w); ttc is recovered from the stored weight."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["h", "i", "j", "ttc", "w"])
        for g in graphs:
            for (i, j), w in sorted(g.edges.items()):
                ttc = tau_max - beta * float(np.log(w / (1.0 - w))) if 0 < w < 1 else 0.0
                writer.writerow([g.timestep, i, j, repr(ttc), repr(w)])


def dump_scores_csv(scores: BifurcationScores, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["agent_id", "f"])
        for agent, f in scores.scores.items():
            writer.writerow([agent, f])
