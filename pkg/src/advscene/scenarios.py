"""Synthetic scene templates (straight road, merge, four-way crossing) with
randomized agent placement, and nominal lane-following rollouts used both to
fit the trajectory prior and as the realism reference set."""

from __future__ import annotations

import hashlib
import math
import warnings

import numpy as np

from .world import (AgentState, JointTrajectory, Lane, LaneGraphMap, Scene,
                    oriented_box_overlap)

__all__ = [
    "TEMPLATES",
    "make_scene",
    "generate_scenes",
    "nominal_rollouts",
    "stable_seed",
]

TEMPLATES = ("straight-2lane", "merge", "4way-intersection")


def stable_seed(*parts) -> int:
    """Machine-independent 64-bit seed derived from string/int parts."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _straight_map() -> LaneGraphMap:
    def line(y):
        return np.array([[0.0, y], [240.0, y]])

    return LaneGraphMap([
        Lane(lane_id=0, centerline=line(0.0), width=4.0, neighbors=(1,)),
        Lane(lane_id=1, centerline=line(4.0), width=4.0, neighbors=(0, 2)),
        Lane(lane_id=2, centerline=line(8.0), width=4.0, neighbors=(1,)),
    ])


def _merge_map() -> LaneGraphMap:
    xs = np.linspace(10.0, 130.0, 14)
    u = (xs - xs[0]) / (xs[-1] - xs[0])
    ys = 7.0 * (1.0 - u * u * (3.0 - 2.0 * u))
    ramp = np.stack([xs, ys], axis=1)
    return LaneGraphMap([
        Lane(lane_id=0, centerline=np.array([[0.0, 0.0], [130.0, 0.0]]), width=4.0,
             successors=(1,), neighbors=(3,)),
        Lane(lane_id=1, centerline=np.array([[130.0, 0.0], [260.0, 0.0]]), width=4.0,
             neighbors=(3,)),
        Lane(lane_id=2, centerline=ramp, width=4.0, successors=(1,)),
        Lane(lane_id=3, centerline=np.array([[0.0, 4.0], [260.0, 4.0]]), width=4.0,
             neighbors=(0, 1)),
    ])


def _intersection_map() -> LaneGraphMap:
    return LaneGraphMap([
        Lane(lane_id=0, centerline=np.array([[-90.0, 0.0], [90.0, 0.0]]), width=4.0,
             neighbors=(2,)),
        Lane(lane_id=1, centerline=np.array([[0.0, -90.0], [0.0, 90.0]]), width=4.0,
             neighbors=(3,)),
        Lane(lane_id=2, centerline=np.array([[-90.0, 4.0], [90.0, 4.0]]), width=4.0,
             neighbors=(0,)),
        Lane(lane_id=3, centerline=np.array([[4.0, -90.0], [4.0, 90.0]]), width=4.0,
             neighbors=(1,)),
    ])


_MAP_BUILDERS = {
    "straight-2lane": _straight_map,
    "merge": _merge_map,
    "4way-intersection": _intersection_map,
}


def _agent_on_lane(lane_map: LaneGraphMap, lane_id: int, s: float, speed: float,
                   agent_id: int, is_ego: bool = False) -> AgentState:
    lane = lane_map.lane(lane_id)
    s = float(np.clip(s, 0.0, lane.length))
    pos = lane.point_at(s)
    return AgentState(position=pos, heading=lane.heading_at(s), speed=max(0.0, speed),
                      agent_id=agent_id, is_ego=is_ego)


def _placement_ok(agents: list[AgentState], candidate: AgentState) -> bool:
    inflated = candidate.replace(length=candidate.length + 2.0, width=candidate.width + 1.0)
    for other in agents:
        if oriented_box_overlap(inflated, other):
            return False
    return True


def _spawn(lane_map, agents, rng, lane_id, s, speed, agent_id, tries=50):
    """First non-overlapping placement near the requested arclength, or None."""
    for attempt in range(tries):
        jitter = 0.0 if attempt == 0 else rng.uniform(-8.0, 8.0)
        cand = _agent_on_lane(lane_map, lane_id, s + jitter, speed, agent_id)
        if _placement_ok(agents, cand):
            return cand
    return None


def make_scene(template: str, seed: int, horizon_steps: int = 40,
               dt_phys: float = 0.1, scene_id: str = "") -> Scene | None:
    """One randomized scene from a template, or None when placement fails.

    Every template places the ego, one or two proximal interactors, distal
    agents on a non-adjacent lane, and sometimes a parked vehicle.
    """
    if template not in _MAP_BUILDERS:
        raise ValueError(f"unknown template {template!r}; choose from {TEMPLATES}")
    rng = np.random.default_rng(seed)
    lane_map = _MAP_BUILDERS[template]()

    for _ in range(1000):
        agents: list[AgentState] = []
        next_id = 0

        def add(lane_id, s, speed, is_ego=False):
            nonlocal next_id
            cand = _spawn(lane_map, agents, rng, lane_id, s, speed, next_id)
            if cand is None:
                return False
            if is_ego:
                cand = cand.replace(is_ego=True)
            agents.append(cand)
            next_id += 1
            return True

        ok = True
        if template == "straight-2lane":
            ego_s = rng.uniform(25.0, 45.0)
            ok &= add(0, ego_s, rng.uniform(6.0, 10.0), is_ego=True)
            ok &= add(int(rng.integers(0, 2)), ego_s + rng.uniform(14.0, 30.0), rng.uniform(3.0, 8.0))
            ok &= add(1, ego_s + rng.uniform(-20.0, -4.0), rng.uniform(5.0, 10.0))
            ok &= add(2, ego_s + rng.uniform(30.0, 55.0), rng.uniform(4.0, 9.0))
            if rng.random() < 0.5:
                ok &= add(2, ego_s + rng.uniform(-5.0, 25.0), 0.0)
            if rng.random() < 0.5:
                ok &= add(1, ego_s + rng.uniform(25.0, 45.0), rng.uniform(4.0, 9.0))
        elif template == "merge":
            ego_s = rng.uniform(35.0, 60.0)
            ramp = lane_map.lane(2)
            ok &= add(0, ego_s, rng.uniform(6.0, 10.0), is_ego=True)
            merge_eta = (130.0 - ego_s) / 8.0  # rough ego arrival time at the merge
            ramp_s = np.clip(ramp.length - merge_eta * rng.uniform(5.0, 9.0), 5.0, ramp.length - 10.0)
            ok &= add(2, float(ramp_s), rng.uniform(5.0, 9.0))
            ok &= add(3, ego_s + rng.uniform(-15.0, 15.0), rng.uniform(5.0, 10.0))
            ok &= add(2, float(max(ramp_s - rng.uniform(28.0, 45.0), 2.0)), rng.uniform(4.0, 8.0))
            if rng.random() < 0.5:
                ok &= add(3, ego_s + rng.uniform(25.0, 45.0), 0.0)
        else:  # 4way-intersection
            ego_x = rng.uniform(-26.0, -14.0)
            ego_s = ego_x + 90.0
            ego_speed = rng.uniform(6.0, 10.0)
            ok &= add(0, ego_s, ego_speed, is_ego=True)
            eta_center = (90.0 - ego_s) / max(ego_speed, 1.0)
            for lane_id in (1, 3):
                speed = rng.uniform(5.0, 9.0)
                # mistimed by design: the crosser clears the box early or late
                factor = rng.uniform(0.35, 0.65) if rng.random() < 0.5 else rng.uniform(1.4, 1.9)
                ok &= add(lane_id, 90.0 - speed * eta_center * factor, speed)
            ok &= add(1, 90.0 - rng.uniform(38.0, 60.0), rng.uniform(4.0, 8.0))
            if rng.random() < 0.4:
                ok &= add(2, ego_s + rng.uniform(10.0, 35.0), 0.0)
        if not ok:
            continue
        ego_index = next(i for i, a in enumerate(agents) if a.is_ego)
        return Scene(map=lane_map, agents=tuple(agents), ego_index=ego_index,
                     horizon_steps=horizon_steps, dt_phys=dt_phys,
                     scene_id=scene_id or f"{template}-{seed}")
    warnings.warn(f"unsatisfiable placement for template {template}, seed {seed}")
    return None


def generate_scenes(template: str, count: int, seed: int, horizon_steps: int = 40,
                    dt_phys: float = 0.1) -> list[Scene]:
    scenes = []
    for i in range(count):
        scene = make_scene(template, stable_seed(template, seed, i),
                           horizon_steps=horizon_steps, dt_phys=dt_phys,
                           scene_id=f"{template}-{seed}-{i:03d}")
        if scene is not None:
            scenes.append(scene)
    return scenes


def _lane_clear(scene: Scene, agent_idx: int, target_lane: int, speed: float) -> bool:
    """Occupancy check for a nominal lane change: no other vehicle projected
    within a 14 m longitudinal window of the changer on the target lane."""
    lane = scene.map.lane(target_lane)
    s_self, _ = lane.project(scene.agents[agent_idx].position)
    horizon_t = scene.horizon_steps * scene.dt_phys
    for j, other in enumerate(scene.agents):
        if j == agent_idx:
            continue
        lane_j, _, _, _ = scene.map.nearest_lane(other.position)
        if lane_j != target_lane and target_lane not in scene.map.lane(lane_j).neighbors:
            continue
        s_other, lat = lane.project(other.position)
        if lat > lane.width:
            continue
        # compare projected arclengths over the horizon at constant speeds
        for frac in (0.0, 0.5, 1.0):
            t = frac * horizon_t
            if abs((s_other + other.speed * t) - (s_self + speed * t)) < 14.0:
                return False
    return True


def nominal_rollouts(scene: Scene, count: int, seed: int,
                     lane_change_prob: float = 0.3) -> list[JointTrajectory]:
    """Seeded lane-following rollouts of every agent independently: jittered
    constant speed along the lane with occasional smooth lane changes into
    unoccupied neighbor lanes. Parked agents stay put. Used to fit the prior
    and as the realism reference."""
    rng = np.random.default_rng(seed)
    h = scene.horizon_steps
    dt = scene.dt_phys
    steps = np.arange(h)
    out = []
    for _ in range(count):
        positions = np.zeros((scene.num_agents, h, 2))
        for i, agent in enumerate(scene.agents):
            lane_id, s0, lat0, lane_head = scene.map.nearest_lane(agent.position)
            # signed lateral offset from the centerline
            lane_pt = scene.map.lane(lane_id).point_at(s0)
            normal = np.array([-math.sin(lane_head), math.cos(lane_head)])
            offset0 = float((agent.position - lane_pt) @ normal)
            if agent.speed < 0.1:
                positions[i] = agent.position[None, :]
                continue
            speed = agent.speed * float(np.clip(rng.normal(1.0, 0.12), 0.4, 1.5))
            # smooth longitudinal dynamics: low-pass filtered acceleration noise
            accel = np.zeros(h)
            for t in range(1, h):
                accel[t] = 0.9 * accel[t - 1] + 0.4 * rng.normal()
            speeds = np.maximum(speed + np.cumsum(accel) * dt, 0.0)
            dists = np.concatenate([[0.0], np.cumsum(speeds[:-1]) * dt])
            center, headings = scene.map.walk(lane_id, s0, dists)
            # in-lane wander: slow lateral drift around the initial offset
            drift = np.zeros(h)
            for t in range(1, h):
                drift[t] = 0.95 * drift[t - 1] + 0.05 * rng.normal()
            offsets = np.clip(offset0 + rng.normal(0.0, 0.1) + np.cumsum(drift) * dt,
                              -1.2, 1.2)
            lane = scene.map.lane(lane_id)
            if lane.neighbors and rng.random() < lane_change_prob:
                options = []
                for nb_id in lane.neighbors:
                    nb_s, nb_lat = scene.map.lane(nb_id).project(agent.position)
                    if nb_lat <= 8.0 and _lane_clear(scene, i, nb_id, speed):
                        options.append((nb_id, nb_s))
                if options:
                    nb_id, nb_s = options[int(rng.integers(len(options)))]
                    nb_center, _ = scene.map.walk(nb_id, nb_s, dists)
                    start = rng.uniform(0.1, 0.4) * h
                    span = max(2.4 / dt, 12.0)
                    u = np.clip((steps - start) / span, 0.0, 1.0)
                    blend = u * u * (3.0 - 2.0 * u)
                    center = center * (1.0 - blend[:, None]) + nb_center * blend[:, None]
            normals = np.stack([-np.sin(headings), np.cos(headings)], axis=1)
            positions[i] = center + offsets[:, None] * normals
        out.append(JointTrajectory(positions=positions))
    return out
