"""Adversary targeting: rule-based semantic feasibility filtering of the
topological candidates, construction of the causal interaction skeleton
(initiators -> intermediaries -> proximal attacker -> ego), the per-agent
block mask, and the coarse lane-graph anchor configuration."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .world import JointTrajectory, LaneGraphMap, Scene

__all__ = [
    "FeasibilityMask",
    "Skeleton",
    "semantic_filter",
    "build_skeleton",
    "make_anchor",
    "skeleton_to_json",
]

REASONS = ("off_drivable", "no_lane_association", "no_route_conflict",
           "static_non_blocking", "accepted")


@dataclass(frozen=True)
class FeasibilityMask:
    """Per-candidate accept/reject flags with one reason each."""

    flags: dict  # {agent_id: bool}
    reasons: dict  # {agent_id: str}

    @property
    def accepted(self) -> tuple[int, ...]:
        return tuple(sorted(a for a, ok in self.flags.items() if ok))


@dataclass(frozen=True)
class Skeleton:
    """Causal adversary chain plus its latent block mask and anchor state.

    `chain` holds directed (attacker, target) agent-id pairs; exactly one
    edge targets the ego. `mask` is a 0/1 vector over scene agent indices,
    set on coalition agents' latent blocks. `anchor_positions` is the clean
    skeleton-consistent configuration for every agent, (N, H, 2) meters.
    """

    coalition: tuple[int, ...]
    c_near: tuple[int, ...]
    c_far: tuple[int, ...]
    chain: tuple[tuple[int, int], ...]
    mask: np.ndarray
    anchor_positions: np.ndarray
    reference: JointTrajectory
    ego_id: int
    anchor_index: int | None = None
    coarse: bool = False
    dropped_edges: tuple[tuple[int, int], ...] = ()
    rejections: dict = field(default_factory=dict)

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=float)
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        anchor = np.asarray(self.anchor_positions, dtype=float)
        anchor.setflags(write=False)
        object.__setattr__(self, "anchor_positions", anchor)

    @property
    def ego_ref(self) -> np.ndarray:
        return self.reference.positions


def _min_dist_to_path(points: np.ndarray, path: np.ndarray) -> float:
    """min over points of the distance to the polyline through `path`."""
    seg_a = path[:-1]
    seg_d = path[1:] - path[:-1]
    len2 = np.maximum(np.einsum("ij,ij->i", seg_d, seg_d), 1e-12)
    rel = points[:, None, :] - seg_a[None]
    t = np.clip(np.einsum("psk,sk->ps", rel, seg_d) / len2, 0.0, 1.0)
    foot = seg_a[None] + t[..., None] * seg_d[None]
    return float(np.linalg.norm(points[:, None, :] - foot, axis=2).min())


def _ego_adjacent_lanes(scene: Scene) -> set[int]:
    lane_id, _, _, _ = scene.map.nearest_lane(scene.ego.position)
    return {lane_id, *scene.map.lane(lane_id).neighbors}


def semantic_filter(s_top, scene: Scene, ref: JointTrajectory,
                    d_conflict: float = 15.0, lane_slack: float = 0.5,
                    v_static: float = 0.5, block_ahead: float = 10.0) -> FeasibilityMask:
    """Rule-based feasibility projection over the candidate set.

    A candidate is accepted iff (a) it starts on the drivable region with a
    clear lane association, (b) its reference path conflicts with the ego's
    route (proximity within d_conflict, or a shared/neighboring lane), and
    (c) it is dynamically relevant: moving, or parked directly ahead of the
    ego on its lane within block_ahead meters.
    """
    id_to_idx = {a.agent_id: i for i, a in enumerate(scene.agents)}
    ego = scene.ego
    ego_lane, ego_s, _, _ = scene.map.nearest_lane(ego.position)
    ego_adj = _ego_adjacent_lanes(scene)
    ego_path = ref.positions[scene.ego_index]
    flags, reasons = {}, {}
    for agent_id in sorted(s_top):
        idx = id_to_idx[agent_id]
        start = ref.positions[idx, 0]  # initial position as the rollout recorded it
        lane_id, s_along, lateral, _ = scene.map.nearest_lane(start)
        offroad, _ = scene.map.offroad_distance_batch(start[None])
        if offroad[0] > 0:
            flags[agent_id], reasons[agent_id] = False, "off_drivable"
            continue
        half_w = scene.map.lane(lane_id).width / 2.0
        if lateral > half_w + lane_slack:
            flags[agent_id], reasons[agent_id] = False, "no_lane_association"
            continue
        path = ref.positions[idx]
        conflict = (
            _min_dist_to_path(path, ego_path) <= d_conflict
            or lane_id in ego_adj
        )
        if not conflict:
            flags[agent_id], reasons[agent_id] = False, "no_route_conflict"
            continue
        kin_speed = float(np.linalg.norm(np.diff(path, axis=0), axis=1).mean()) / scene.dt_phys
        blocking = (
            lane_id == ego_lane and 0.0 < (s_along - ego_s) <= block_ahead
        )
        if kin_speed < v_static and not blocking:
            flags[agent_id], reasons[agent_id] = False, "static_non_blocking"
            continue
        flags[agent_id], reasons[agent_id] = True, "accepted"
    return FeasibilityMask(flags=flags, reasons=reasons)


def _longitudinal_headway(scene: Scene, pos_a: np.ndarray, pos_b: np.ndarray) -> float | None:
    """Arclength separation along a shared corridor: same lane, a
    successor-connected route, or parallel lanes close enough that one
    position projects onto the other's lane (lateral within 10 m). None when
    no such relation exists."""
    lane_a, s_a, _, _ = scene.map.nearest_lane(pos_a)
    lane_b, s_b, _, _ = scene.map.nearest_lane(pos_b)
    if lane_a == lane_b:
        return abs(s_a - s_b)
    route = scene.map.lane_route(lane_a, lane_b)
    if route is not None:
        dist = scene.map.lane(route[0]).length - s_a
        for mid in route[1:-1]:
            dist += scene.map.lane(mid).length
        return dist + s_b
    route = scene.map.lane_route(lane_b, lane_a)
    if route is not None:
        dist = scene.map.lane(route[0]).length - s_b
        for mid in route[1:-1]:
            dist += scene.map.lane(mid).length
        return dist + s_a
    s_proj, lateral = scene.map.lane(lane_a).project(pos_b)
    if lateral <= 10.0 and 0.0 < s_proj < scene.map.lane(lane_a).length:
        return abs(s_proj - s_a)
    return None


def build_skeleton(s, scene: Scene, ref: JointTrajectory, k_near: int = 1,
                   k_far: int = 1, tau_dist: float = 25.0,
                   tau_long: float = 30.0, rejections: dict | None = None,
                   v_max: float = 15.0, kappa_max: float = 0.2) -> Skeleton:
    """Partition the accepted set into proximal attackers and distal
    initiators and wire the directed influence chain ending at the ego.

    Distal initiators attach through at most one intermediary; every
    consecutive pair in the chain must sit within tau_long longitudinal
    headway along shared/successor lanes, otherwise the coalition falls
    back to the proximal set with direct ego-targeting edges.
    """
    s = sorted(s)
    if not s:
        raise ValueError("no feasible adversaries")
    id_to_idx = {a.agent_id: i for i, a in enumerate(scene.agents)}
    ego = scene.ego
    dist = {i: float(np.linalg.norm(scene.agents[id_to_idx[i]].position - ego.position)) for i in s}
    by_near = sorted(s, key=lambda i: (dist[i], i))
    c_near = tuple(by_near[:k_near])
    proximal = c_near[0]  # single ego-targeting attacker

    ego_adj = _ego_adjacent_lanes(scene)
    s_far_pool = []
    for i in s:
        if i in c_near or dist[i] <= tau_dist:
            continue
        lane_id, _, _, _ = scene.map.nearest_lane(scene.agents[id_to_idx[i]].position)
        if lane_id in ego_adj:
            continue
        s_far_pool.append(i)
    c_far = tuple(sorted(sorted(s_far_pool, key=lambda i: (-dist[i], i))[:k_far]))

    def headway_ok(a: int, b: int) -> bool:
        pa = scene.agents[id_to_idx[a]].position
        pb = ego.position if b == ego.agent_id else scene.agents[id_to_idx[b]].position
        h = _longitudinal_headway(scene, pa, pb)
        return h is not None and h <= tau_long

    chain: list[tuple[int, int]] = []
    coalition = set(c_near)
    kept_far = []
    intermediates = [i for i in s if i not in c_near and i not in c_far]
    if headway_ok(proximal, ego.agent_id):
        for f in c_far:
            if headway_ok(f, proximal):
                chain.append((f, proximal))
                kept_far.append(f)
                continue
            viable = [m for m in intermediates
                      if m not in coalition and headway_ok(f, m) and headway_ok(m, proximal)]
            if viable:
                mid_pos = {m: scene.agents[id_to_idx[m]].position for m in viable}
                f_pos = scene.agents[id_to_idx[f]].position
                n_pos = scene.agents[id_to_idx[proximal]].position
                best = min(viable, key=lambda m: (
                    float(np.linalg.norm(f_pos - mid_pos[m]) + np.linalg.norm(mid_pos[m] - n_pos)), m))
                chain.append((f, best))
                chain.append((best, proximal))
                coalition.add(best)
                kept_far.append(f)
    coalition |= set(kept_far)
    for other in c_near[1:]:
        chain.append((other, proximal))
    chain.append((proximal, ego.agent_id))

    mask = np.zeros(scene.num_agents)
    for i in sorted(coalition):
        mask[id_to_idx[i]] = 1.0

    skel = Skeleton(
        coalition=tuple(sorted(coalition)),
        c_near=c_near,
        c_far=tuple(kept_far),
        chain=tuple(chain),
        mask=mask,
        anchor_positions=ref.positions,  # placeholder until make_anchor runs
        reference=ref,
        ego_id=ego.agent_id,
        rejections=dict(rejections or {}),
    )
    anchor, coarse, dropped = _plan_anchor(skel, scene, v_max=v_max, kappa_max=kappa_max)
    return Skeleton(
        coalition=skel.coalition, c_near=skel.c_near, c_far=skel.c_far,
        chain=skel.chain, mask=skel.mask, anchor_positions=anchor,
        reference=ref, ego_id=ego.agent_id, coarse=coarse,
        dropped_edges=dropped, rejections=skel.rejections,
    )


def make_anchor(skel: Skeleton, scene: Scene, v_max: float = 15.0,
                kappa_max: float = 0.2) -> np.ndarray:
    """Clean anchor configuration (N, H, 2): coalition agents re-aimed at
    rendezvous points on their targets' reference paths via the lane-graph
    planner; all other agents keep their reference trajectories."""
    anchor, _, _ = _plan_anchor(skel, scene, v_max=v_max, kappa_max=kappa_max)
    return anchor


def _candidate_routes(scene: Scene, lane_id: int) -> list[list[int]]:
    """Own-lane successor chain plus one lane change into each neighbor."""

    def chase(start: int) -> list[int]:
        route = [start]
        seen = {start}
        lane = scene.map.lane(start)
        while lane.successors:
            nxt = min(lane.successors)
            if nxt in seen:
                break
            route.append(nxt)
            seen.add(nxt)
            lane = scene.map.lane(nxt)
        return route

    routes = [chase(lane_id)]
    for nb in sorted(scene.map.lane(lane_id).neighbors):
        routes.append([lane_id] + chase(nb))
    return routes


def _route_path(scene: Scene, route: list[int], s0: float, kappa_max: float,
                step: float = 0.5, total: float = 260.0) -> np.ndarray:
    """Dense polyline along a route starting at arclength s0 on route[0].

    A route of the form [lane, neighbor, ...] encodes a lane change from
    the first lane into its neighbor, blended with a smoothstep lateral
    profile sized so curvature stays within kappa_max.
    """
    dists = np.arange(0.0, total, step)
    lane0 = scene.map.lane(route[0])
    if len(route) >= 2 and route[1] in lane0.neighbors:
        nb = scene.map.lane(route[1])
        nb_s, nb_lat = nb.project(lane0.point_at(s0))
        if nb_lat > 8.0:  # neighbor does not run alongside here
            return None
        own, _ = scene.map.walk(route[0], s0, dists)
        tgt, _ = scene.map.walk(route[1], nb_s, dists, route=route[1:])
        gap = float(np.linalg.norm(own[0] - tgt[0]))
        lead = 2.0
        span = max(6.0, math.sqrt(6.0 * max(gap, 0.5) / (0.8 * kappa_max)))
        u = np.clip((dists - lead) / span, 0.0, 1.0)
        w = u * u * (3.0 - 2.0 * u)
        return own * (1.0 - w[:, None]) + tgt * w[:, None]
    path, _ = scene.map.walk(route[0], s0, dists, route=route)
    return path


def _plan_edge(scene: Scene, start: np.ndarray, target_path: np.ndarray,
               kappa_max: float, tol: float = 4.0, step: float = 0.5):
    """Best on-network path from `start` toward the target's future path.

    Scans every candidate route for the (timestep, route point) pair of
    closest approach, preferring rendezvous near the horizon midpoint among
    near-equal distances. Returns (dense polyline, arclength to the
    rendezvous, rendezvous step) or None when nothing passes within `tol`.
    """
    lane_id, s0, _, _ = scene.map.nearest_lane(start)
    horizon = target_path.shape[0]
    h_mid = horizon // 2
    best = None
    for route in _candidate_routes(scene, lane_id):
        path = _route_path(scene, route, s0, kappa_max, step=step)
        if path is None:
            continue
        d = np.linalg.norm(target_path[:, None, :] - path[None, :, :], axis=2)  # (H, P)
        per_h = d.min(axis=1)
        score = per_h + 0.02 * np.abs(np.arange(horizon) - h_mid)
        score[:2] = np.inf  # rendezvous needs at least two steps of lead time
        h_star = int(np.argmin(score))
        if per_h[h_star] <= tol:
            j_star = int(np.argmin(d[h_star]))
            arc = _cumulative_arclength(path)
            cand = (float(score[h_star]), path, float(arc[j_star]), h_star)
            if best is None or cand[0] < best[0]:
                best = cand
    if best is None:
        return None
    return best[1], best[2], best[3]


def _cumulative_arclength(path: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def _march(path: np.ndarray, speed: float, dt: float, horizon: int) -> np.ndarray:
    """Walk the dense polyline at constant arc speed, one sample per step."""
    arc = _cumulative_arclength(path)
    want = np.clip(np.arange(horizon) * speed * dt, 0.0, arc[-1])
    x = np.interp(want, arc, path[:, 0])
    y = np.interp(want, arc, path[:, 1])
    return np.stack([x, y], axis=1)


def _plan_anchor(skel: Skeleton, scene: Scene, v_max: float, kappa_max: float):
    ref = skel.reference.positions
    horizon = ref.shape[1]
    dt = scene.dt_phys
    h_mid = horizon // 2
    id_to_idx = {a.agent_id: i for i, a in enumerate(scene.agents)}
    anchor = ref.copy()
    dropped = []
    planned_any = False
    for attacker, target in skel.chain:
        a_idx = id_to_idx[attacker]
        t_idx = scene.ego_index if target == skel.ego_id else id_to_idx[target]
        start = scene.agents[a_idx].position
        plan = _plan_edge(scene, start, ref[t_idx], kappa_max)
        if plan is None:
            dropped.append((attacker, target))
            continue
        path, arc_to_q, h_star = plan
        speed = min(v_max, arc_to_q / max(h_star * dt, 1e-9))
        anchor[a_idx] = _march(path, speed, dt, horizon)
        planned_any = True
    coarse = False
    if not planned_any and skel.chain:
        # no lane route anywhere: straight-line interpolation, flagged coarse
        coarse = True
        for attacker, target in skel.chain:
            a_idx = id_to_idx[attacker]
            t_idx = scene.ego_index if target == skel.ego_id else id_to_idx[target]
            q_star = ref[t_idx, h_mid]
            start = scene.agents[a_idx].position
            gap = q_star - start
            need = float(np.linalg.norm(gap)) / max(h_mid * dt, 1e-9)
            speed = min(v_max, need)
            direction = gap / max(float(np.linalg.norm(gap)), 1e-9)
            steps = np.arange(horizon)[:, None] * speed * dt
            anchor[a_idx] = start[None] + direction[None] * steps
        dropped = []
    return anchor, coarse, tuple(dropped)


def skeleton_to_json(skel: Skeleton) -> dict:
    return {
        "coalition": list(skel.coalition),
        "chain": [[int(a), int(b)] for a, b in skel.chain],
        "mask": [int(v) for v in skel.mask],
        "anchor_index": skel.anchor_index,
        "coarse": bool(skel.coarse),
        "rejections": {str(k): v for k, v in sorted(skel.rejections.items())},
    }


def dump_skeleton(skel: Skeleton, path) -> None:
    with open(path, "w") as fh:
        json.dump(skeleton_to_json(skel), fh, indent=1)
