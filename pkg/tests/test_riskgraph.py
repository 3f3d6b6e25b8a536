import itertools
import math

import numpy as np
import pytest

from advscene.riskgraph import (RiskGraph, build_graph, edge_weight,
                                temporal_scores, top_cliques, ttc_surrogate)
from advscene.world import AgentState


def agent(x, y, heading=0.0, speed=0.0, agent_id=0, length=4.5):
    return AgentState(position=[x, y], heading=heading, speed=speed,
                      agent_id=agent_id, length=length)


class TestTtcSurrogate:
    def test_closing_head_gap(self):
        a = agent(0, 0, speed=10, agent_id=0, length=4.5)
        b = agent(20, 0, speed=0, agent_id=1, length=3.5)
        # r_safe = (4.5 + 3.5) / 2 = 4; (20 - 4) / 10
        assert ttc_surrogate(a, b, tau_max=5.0) == pytest.approx(1.6)

    def test_diverging_pair_hits_cap(self):
        a = agent(0, 0, heading=math.pi, speed=5, agent_id=0)
        b = agent(20, 0, heading=0.0, speed=5, agent_id=1)
        assert ttc_surrogate(a, b, tau_max=5.0) == 5.0

    def test_coincident_positions(self):
        a = agent(0, 0, agent_id=0)
        b = agent(0, 0, agent_id=1)
        assert ttc_surrogate(a, b, tau_max=5.0) == 0.0


class TestEdgeWeight:
    def test_at_cap_is_half(self):
        assert edge_weight(5.0, 5.0, 1.0) == pytest.approx(0.5)

    def test_logistic_values(self):
        assert edge_weight(3.0, 5.0, 1.0) == pytest.approx(0.8807970779778823)
        assert edge_weight(7.0, 5.0, 1.0) == pytest.approx(0.11920292202211755)

    def test_strictly_decreasing_in_ttc(self):
        ttcs = np.linspace(0, 10, 50)
        ws = [edge_weight(t, 5.0, 1.0) for t in ttcs]
        assert all(b < a for a, b in zip(ws, ws[1:]))


class TestBuildGraph:
    def test_single_agent_empty(self):
        g = build_graph([agent(0, 0, agent_id=3)])
        assert g.edges == {} and g.nodes == (3,)

    def test_diverging_below_threshold(self):
        # all pairs at the cap: weight exactly 0.5, below eps_w = 0.6
        states = [agent(0, 0, heading=math.pi, speed=5, agent_id=0),
                  agent(30, 0, heading=0, speed=5, agent_id=1)]
        g = build_graph(states, eps_w=0.6)
        assert g.edges == {}

    def test_head_on_single_edge(self):
        states = [agent(0, 0, heading=0, speed=8, agent_id=0),
                  agent(10, 0, heading=math.pi, speed=8, agent_id=1)]
        g = build_graph(states, tau_max=5.0, beta=1.0, eps_w=0.5)
        assert set(g.edges) == {(0, 1)}
        ttc = ttc_surrogate(states[0], states[1], 5.0)
        assert g.edges[(0, 1)] == pytest.approx(edge_weight(ttc, 5.0, 1.0))

    def test_keeps_exactly_thresholded_pairs(self):
        rng = np.random.default_rng(0)
        states = [agent(*rng.uniform(0, 40, 2), heading=rng.uniform(-3, 3),
                        speed=rng.uniform(0, 12), agent_id=i) for i in range(6)]
        g = build_graph(states, eps_w=0.55)
        for i, j in itertools.combinations(range(6), 2):
            w = edge_weight(ttc_surrogate(states[i], states[j], 5.0), 5.0, 1.0)
            assert ((i, j) in g.edges) == (w >= 0.55)


def graph_from_weights(weights, nodes=None):
    edges = {(min(i, j), max(i, j)): w for (i, j), w in weights.items()}
    if nodes is None:
        nodes = sorted({n for e in edges for n in e})
    return RiskGraph(timestep=0, nodes=tuple(nodes), edges=edges)


def brute_force_top(g, k, m):
    """Exhaustive subset enumeration oracle for graphs with few nodes."""
    for size in range(k, 1, -1):
        found = []
        for combo in itertools.combinations(sorted(g.nodes), size):
            if all((min(a, b), max(a, b)) in g.edges
                   for a, b in itertools.combinations(combo, 2)):
                w = sum(g.edges[(min(a, b), max(a, b))]
                        for a, b in itertools.combinations(combo, 2))
                found.append((combo, w))
        if found:
            found.sort(key=lambda t: (-t[1], t[0]))
            return [c for c, _ in found[:m]]
    return []


class TestTopCliques:
    def test_triangle_weight(self):
        g = graph_from_weights({(0, 1): 0.9, (1, 2): 0.9, (0, 2): 0.9})
        out = top_cliques(g, k_clique=3, m_top=1)
        assert out == [(0, 1, 2)]
        # W sums the three unordered pairs: 2.7
        from advscene.riskgraph import _clique_weight
        assert _clique_weight(g, out[0]) == pytest.approx(2.7)

    def test_edgeless_graph(self):
        g = RiskGraph(timestep=0, nodes=(0, 1, 2), edges={})
        assert top_cliques(g) == []

    def test_two_disjoint_triangles(self):
        w = {}
        w.update({(0, 1): 0.9, (1, 2): 0.9, (0, 2): 0.9})
        w.update({(3, 4): 0.5, (4, 5): 0.5, (3, 5): 0.5})
        g = graph_from_weights(w)
        assert top_cliques(g, k_clique=3, m_top=1) == [(0, 1, 2)]

    def test_fallback_to_smaller_cliques(self):
        g = graph_from_weights({(0, 1): 0.8, (2, 3): 0.9})
        assert top_cliques(g, k_clique=3, m_top=2) == [(2, 3), (0, 1)]

    def test_matches_brute_force_on_random_graphs(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            n = int(rng.integers(2, 9))
            p = rng.uniform(0.2, 0.9)
            weights = {}
            for i, j in itertools.combinations(range(n), 2):
                if rng.random() < p:
                    weights[(i, j)] = float(np.round(rng.uniform(0.5, 1.0), 3))
            g = graph_from_weights(weights, nodes=range(n))
            k = int(rng.integers(2, 5))
            m = int(rng.integers(1, 4))
            assert top_cliques(g, k_clique=k, m_top=m) == brute_force_top(g, k, m)

    def test_ranking_invariant_under_uniform_scaling(self):
        rng = np.random.default_rng(6)
        weights = {(i, j): float(rng.uniform(0.5, 1.0))
                   for i, j in itertools.combinations(range(7), 2) if rng.random() < 0.6}
        g1 = graph_from_weights(weights, nodes=range(7))
        g2 = graph_from_weights({e: 2.0 * w for e, w in weights.items()}, nodes=range(7))
        assert top_cliques(g1, 3, 3) == top_cliques(g2, 3, 3)


class TestTemporalScores:
    def test_hand_counted_scores(self):
        g0 = graph_from_weights({(1, 2): 0.9, (2, 3): 0.9, (1, 3): 0.9}, nodes=(1, 2, 3, 4))
        g1 = graph_from_weights({(2, 3): 0.9, (3, 4): 0.9, (2, 4): 0.9}, nodes=(1, 2, 3, 4))
        scores = temporal_scores([g0, g1], k_clique=3, m_top=1, k_top=4)
        assert scores.scores == {1: 1, 2: 2, 3: 2, 4: 1}
        assert scores.s_top == (2, 3, 1, 4)

    def test_no_cliques_anywhere(self):
        g = RiskGraph(timestep=0, nodes=(0, 1), edges={})
        scores = temporal_scores([g], k_top=2)
        assert all(v == 0 for v in scores.scores.values())
        assert scores.s_top == ()
        assert scores.truncated

    def test_tie_broken_by_lower_id(self):
        g = graph_from_weights({(5, 7): 0.9}, nodes=(5, 7))
        scores = temporal_scores([g], k_clique=2, m_top=1, k_top=1)
        assert scores.s_top == (5,)

    def test_ego_excluded(self):
        g = graph_from_weights({(0, 1): 0.9, (1, 2): 0.9, (0, 2): 0.9})
        scores = temporal_scores([g], k_top=3, ego_id=0)
        assert 0 not in scores.s_top
        assert scores.scores[0] > 0  # still counted, just excluded from the set

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        graphs = []
        for t in range(5):
            weights = {(i, j): float(rng.uniform(0.5, 1.0))
                       for i, j in itertools.combinations(range(6), 2) if rng.random() < 0.5}
            graphs.append(graph_from_weights(weights, nodes=range(6)))
        a = temporal_scores(graphs, k_top=3)
        b = temporal_scores(graphs, k_top=3)
        assert a.s_top == b.s_top and a.scores == b.scores
