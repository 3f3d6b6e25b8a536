"""Closed-loop episode execution: black-box ego policies (IDM car-following
and a rule-based lane-graph controller), environment agents replaying
synthesized trajectories through a unicycle tracker, and event detection
for collisions and off-road excursions."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .world import (AgentState, JointTrajectory, Scene, oriented_box_overlap,
                    wrap_angle)

__all__ = [
    "EgoPolicyParams",
    "Event",
    "Rollout",
    "idm_accel",
    "lane_graph_act",
    "idm_act",
    "ego_policy_action",
    "run_closed_loop",
    "detect_offroad_runs",
    "rollout_to_json",
]

OFFROAD_MARGIN = 0.25  # m beyond the corridor edge
OFFROAD_DEBOUNCE = 3  # consecutive steps
STEER_MAX = 0.5  # rad

# env-agent waypoint tracker limits
ENV_TURN_RATE = 2.5  # rad/s
ENV_ACCEL = 4.5  # m/s^2
ENV_BRAKE = 8.0  # m/s^2, braking tracks harder than acceleration
ENV_SPEED_CAP = 30.0  # m/s
ENV_LAT_ACCEL = 6.0  # m/s^2, bounds turn rate at speed


@dataclass(frozen=True)
class EgoPolicyParams:
    """Parameter vector for the black-box ego controllers."""

    variant: str = "idm"  # "idm" | "lane_graph"
    # IDM
    v0: float = 12.0  # desired speed
    T_h: float = 1.5  # time headway
    s0: float = 2.0  # minimum gap
    a: float = 2.0  # max accel
    b: float = 2.5  # comfortable decel
    # lane-graph
    target_speed: float = 12.0
    steer_gain: float = 1.0
    lookahead: float = 14.0
    brake_ttc: float = 2.0
    # shared
    b_max: float = 6.0  # hard braking bound

    def __post_init__(self):
        if self.variant not in ("idm", "lane_graph"):
            raise ValueError(f"unknown policy variant {self.variant!r}")
        for name in ("v0", "T_h", "s0", "a", "b", "target_speed", "steer_gain",
                     "lookahead", "brake_ttc", "b_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")

    # --- parameter-vector view used by the curriculum search ---

    def param_names(self) -> tuple[str, ...]:
        if self.variant == "idm":
            return ("v0", "T_h", "s0", "a", "b")
        return ("target_speed", "steer_gain", "lookahead", "brake_ttc")

    def get_vector(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in self.param_names()])

    def with_vector(self, vec: np.ndarray) -> "EgoPolicyParams":
        return replace(self, **dict(zip(self.param_names(), (float(v) for v in vec))))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        table = {
            "v0": (2.0, 25.0), "T_h": (0.5, 3.5), "s0": (0.5, 6.0),
            "a": (0.5, 4.0), "b": (0.5, 5.0),
            "target_speed": (2.0, 25.0), "steer_gain": (0.2, 3.0),
            "lookahead": (3.0, 20.0), "brake_ttc": (0.5, 4.0),
        }
        lo, hi = zip(*(table[n] for n in self.param_names()))
        return np.array(lo), np.array(hi)


@dataclass(frozen=True)
class Event:
    step: int
    kind: str  # collision_front | collision_side | collision_rear | offroad
    participants: tuple[int, ...]


@dataclass(frozen=True)
class Rollout:
    """One executed episode. Arrays cover steps 0..terminated_at inclusive."""

    positions: np.ndarray  # (T, N, 2)
    headings: np.ndarray  # (T, N)
    speeds: np.ndarray  # (T, N)
    ego_actions: np.ndarray  # (T, 2) commanded (accel, steering)
    ego_accels: np.ndarray  # (T,) realized dv/dt
    events: tuple[Event, ...]
    terminated_at: int
    ego_index: int
    agent_ids: tuple[int, ...]
    lengths: np.ndarray
    widths: np.ndarray
    dt: float
    scenario_id: str = ""
    seed: int | None = None
    policy_notes: tuple[str, ...] = ()
    valid: bool = True

    @property
    def num_steps(self) -> int:
        return self.positions.shape[0]

    @property
    def collision_event(self) -> Event | None:
        for ev in self.events:
            if ev.kind.startswith("collision"):
                return ev
        return None

    @property
    def collided(self) -> bool:
        return self.collision_event is not None

    @property
    def impact_class(self) -> str | None:
        ev = self.collision_event
        return ev.kind.removeprefix("collision_") if ev else None

    def agent_states(self, step: int) -> list[AgentState]:
        return [
            AgentState(
                position=self.positions[step, i], heading=float(self.headings[step, i]),
                speed=float(self.speeds[step, i]), length=float(self.lengths[i]),
                width=float(self.widths[i]), agent_id=self.agent_ids[i],
                is_ego=(i == self.ego_index),
            )
            for i in range(len(self.agent_ids))
        ]


def idm_accel(v: float, gap: float, dv: float, p: EgoPolicyParams) -> float:
    """Intelligent Driver Model acceleration.

    v is the follower speed, gap the net bumper distance (clamped at 0.1 m)
    and dv = v_follower - v_leader. Output is clamped to [-b_max, a].
    """
    gap = max(gap, 0.1)
    s_star = p.s0 + max(0.0, v * p.T_h + v * dv / (2.0 * math.sqrt(p.a * p.b)))
    accel = p.a * (1.0 - (v / p.v0) ** 4 - (s_star / gap) ** 2)
    return float(np.clip(accel, -p.b_max, p.a))


def _lane_frame_neighbors(scene: Scene, ego: AgentState, others: list[AgentState],
                          lane_id: int, s_ego: float, max_ahead: float = 60.0):
    """Agents laterally associated with the ego's lane and ahead of it,
    as (arclength gap, agent) pairs sorted by gap."""
    lane = scene.map.lane(lane_id)
    found = []
    for other in others:
        s, lat = lane.project(other.position)
        if lat > lane.width / 2.0 + 0.3:
            continue
        ahead = s - s_ego
        if 0.0 < ahead <= max_ahead:
            found.append((ahead, other))
    found.sort(key=lambda t: t[0])
    return found


def _pure_pursuit_steer(ego: AgentState, target: np.ndarray, lookahead: float,
                        gain: float) -> float:
    to_target = target - ego.position
    alpha = wrap_angle(math.atan2(to_target[1], to_target[0]) - ego.heading)
    wheelbase = 0.6 * ego.length
    curvature = 2.0 * math.sin(alpha) / max(lookahead, 1e-3)
    return float(np.clip(gain * math.atan(wheelbase * curvature), -STEER_MAX, STEER_MAX))


def idm_act(ego: AgentState, scene: Scene, others: list[AgentState],
            p: EgoPolicyParams) -> tuple[float, float]:
    """IDM longitudinal control with lane-keeping pure-pursuit steering."""
    lane_id, s_ego, _, _ = scene.map.nearest_lane(ego.position)
    ahead = _lane_frame_neighbors(scene, ego, others, lane_id, s_ego)
    if ahead:
        gap_center, leader = ahead[0]
        gap = gap_center - 0.5 * (ego.length + leader.length)
        accel = idm_accel(ego.speed, gap, ego.speed - leader.speed, p)
    else:
        accel = float(np.clip(p.a * (1.0 - (ego.speed / p.v0) ** 4), -p.b_max, p.a))
    target, _ = scene.map.walk(lane_id, s_ego, np.array([p.lookahead]))
    steering = _pure_pursuit_steer(ego, target[0], p.lookahead, 1.0)
    return accel, steering


def lane_graph_act(ego: AgentState, scene: Scene, others: list[AgentState],
                   p: EgoPolicyParams, notes: list | None = None) -> tuple[float, float]:
    """Rule-based lane follower: pure-pursuit steering to a lookahead point,
    proportional speed tracking, and emergency braking when the minimum TTC
    to any agent ahead on the lane drops below the brake threshold."""
    from .riskgraph import ttc_surrogate

    lane_id, s_ego, lateral, _ = scene.map.nearest_lane(ego.position)
    offroad = lateral - scene.map.lane(lane_id).width / 2.0
    if offroad > 0:
        if notes is not None:
            notes.append("ego_off_lane_coast")
        return -1.0, 0.0
    target, _ = scene.map.walk(lane_id, s_ego, np.array([p.lookahead]))
    steering = _pure_pursuit_steer(ego, target[0], p.lookahead, p.steer_gain)
    accel = float(np.clip(0.8 * (p.target_speed - ego.speed), -p.b, p.a))
    ahead = _lane_frame_neighbors(scene, ego, others, lane_id, s_ego)
    if ahead:
        min_ttc = min(ttc_surrogate(ego, other, tau_max=10.0) for _, other in ahead)
        if min_ttc < p.brake_ttc:
            accel = -p.b_max
    return accel, steering


def ego_policy_action(ego: AgentState, scene: Scene, others: list[AgentState],
                      p: EgoPolicyParams, notes: list | None = None) -> tuple[float, float]:
    if p.variant == "idm":
        return idm_act(ego, scene, others, p)
    return lane_graph_act(ego, scene, others, p, notes=notes)


def _classify_impact(ego: AgentState, other: AgentState) -> str:
    normal = other.position - ego.position
    ang = abs(wrap_angle(math.atan2(normal[1], normal[0]) - ego.heading))
    if ang <= math.pi / 4.0:
        return "front"
    if ang >= 3.0 * math.pi / 4.0:
        return "rear"
    return "side"


def detect_offroad_runs(positions: np.ndarray, scene: Scene,
                        margin: float = OFFROAD_MARGIN,
                        debounce: int = OFFROAD_DEBOUNCE) -> list[tuple[int, int]]:
    """(step, agent_index) of each confirmed off-road excursion: distance
    beyond the corridor by more than `margin` for `debounce` consecutive steps.
    One event per agent per excursion, logged at the confirming step."""
    t, n, _ = positions.shape
    d, _ = scene.map.offroad_distance_batch(positions.reshape(t * n, 2))
    off = (d.reshape(t, n) > margin)
    events = []
    run = np.zeros(n, dtype=int)
    for step in range(t):
        run = np.where(off[step], run + 1, 0)
        for i in np.nonzero(run == debounce)[0]:
            events.append((step, int(i)))
    return events


def run_closed_loop(scene: Scene, env_traj: JointTrajectory, policy: EgoPolicyParams,
                    dt: float | None = None, replan_every: int = 10,
                    scenario_id: str = "", seed: int | None = None) -> Rollout:
    """Execute one episode: environment agents track the synthesized
    trajectory waypoints (unicycle), the ego integrates a kinematic bicycle
    under the black-box policy queried every `replan_every` steps. The
    episode ends at the first ego collision or after the scene horizon."""
    dt = scene.dt_phys if dt is None else dt
    horizon = scene.horizon_steps
    n = scene.num_agents
    if env_traj.positions.shape[0] != n or env_traj.positions.shape[1] < horizon:
        raise ValueError("env_traj must cover every agent over the full horizon")

    ids = tuple(a.agent_id for a in scene.agents)
    lengths = np.array([a.length for a in scene.agents])
    widths = np.array([a.width for a in scene.agents])
    ego_idx = scene.ego_index

    pos = np.array([a.position for a in scene.agents], dtype=float)
    head = np.array([a.heading for a in scene.agents], dtype=float)
    spd = np.array([a.speed for a in scene.agents], dtype=float)

    positions = np.zeros((horizon, n, 2))
    headings = np.zeros((horizon, n))
    speeds = np.zeros((horizon, n))
    ego_actions = np.zeros((horizon, 2))
    ego_accels = np.zeros(horizon)
    events: list[Event] = []
    notes: list[str] = []
    valid = True
    terminated_at = horizon - 1
    held_action = (0.0, 0.0)

    def state_of(i: int) -> AgentState:
        return AgentState(position=pos[i], heading=float(head[i]), speed=float(spd[i]),
                          length=float(lengths[i]), width=float(widths[i]),
                          agent_id=ids[i], is_ego=(i == ego_idx))

    steps_done = 0
    for step in range(horizon):
        positions[step], headings[step], speeds[step] = pos, head, spd
        steps_done = step + 1

        ego_state = state_of(ego_idx)
        collided = False
        for i in range(n):
            if i == ego_idx:
                continue
            other = state_of(i)
            if oriented_box_overlap(ego_state, other):
                impact = _classify_impact(ego_state, other)
                events.append(Event(step=step, kind=f"collision_{impact}",
                                    participants=(ids[ego_idx], ids[i])))
                terminated_at = step
                collided = True
                break
        if collided:
            break

        if step % replan_every == 0:
            others = [state_of(i) for i in range(n) if i != ego_idx]
            held_action = ego_policy_action(ego_state, scene, others, policy, notes=notes)
        accel_cmd, steer_cmd = held_action
        ego_actions[step] = (accel_cmd, steer_cmd)

        # ego: kinematic bicycle
        wheelbase = 0.6 * lengths[ego_idx]
        v_old = spd[ego_idx]
        new_pos = pos[ego_idx] + v_old * dt * np.array([math.cos(head[ego_idx]),
                                                        math.sin(head[ego_idx])])
        new_head = wrap_angle(head[ego_idx] + v_old * math.tan(steer_cmd) / wheelbase * dt)
        new_spd = max(0.0, v_old + accel_cmd * dt)
        ego_accels[step] = (new_spd - v_old) / dt
        if not (np.all(np.isfinite(new_pos)) and math.isfinite(new_head) and math.isfinite(new_spd)):
            valid = False
            terminated_at = step
            break

        # environment agents: limited unicycle pursuit of a two-step carrot,
        # arriving over two steps so on-track following is jerk-free
        last_wp = env_traj.positions.shape[1] - 1
        wp = env_traj.positions[:, min(step + 2, last_wp)]
        for i in range(n):
            if i == ego_idx:
                continue
            to_wp = wp[i] - pos[i]
            dist = float(np.linalg.norm(to_wp))
            forward = float(to_wp @ np.array([math.cos(head[i]), math.sin(head[i])]))
            if dist < 0.3 or forward < 0.0:
                # carrot reached or behind: brake in place, hold heading
                want_speed = 0.0
            else:
                want = math.atan2(to_wp[1], to_wp[0])
                rate = min(ENV_TURN_RATE, ENV_LAT_ACCEL / max(spd[i], 1.0))
                turn = np.clip(wrap_angle(want - head[i]), -rate * dt, rate * dt)
                head[i] = wrap_angle(head[i] + turn)
                horizon_left = max(min(step + 2, last_wp) - step, 1)
                nxt = env_traj.positions[i, min(step + 1, last_wp)]
                cur = env_traj.positions[i, min(step, last_wp)]
                v_local = float(np.linalg.norm(nxt - cur)) / dt
                want_speed = min(dist / (horizon_left * dt), v_local + 4.0, ENV_SPEED_CAP)
            spd[i] = max(0.0, spd[i] + float(np.clip(want_speed - spd[i], -ENV_BRAKE * dt, ENV_ACCEL * dt)))
            pos[i] = pos[i] + spd[i] * dt * np.array([math.cos(head[i]), math.sin(head[i])])

        pos[ego_idx], head[ego_idx], spd[ego_idx] = new_pos, new_head, new_spd

    positions = positions[:steps_done]
    headings = headings[:steps_done]
    speeds = speeds[:steps_done]
    ego_actions = ego_actions[:steps_done]
    ego_accels = ego_accels[:steps_done]
    for step, i in detect_offroad_runs(positions, scene):
        events.append(Event(step=step, kind="offroad", participants=(ids[i],)))
    events.sort(key=lambda e: (e.step, e.kind, e.participants))

    return Rollout(
        positions=positions, headings=headings, speeds=speeds,
        ego_actions=ego_actions, ego_accels=ego_accels, events=tuple(events),
        terminated_at=terminated_at, ego_index=ego_idx, agent_ids=ids,
        lengths=lengths, widths=widths, dt=dt, scenario_id=scenario_id,
        seed=seed, policy_notes=tuple(notes), valid=valid,
    )


def rollout_to_json(rollout: Rollout) -> dict:
    return {
        "scenario_id": rollout.scenario_id,
        "seed": rollout.seed,
        "terminated_at": rollout.terminated_at,
        "valid": rollout.valid,
        "agent_ids": list(rollout.agent_ids),
        "ego_index": rollout.ego_index,
        "dt": rollout.dt,
        "events": [
            {"step": e.step, "kind": e.kind, "participants": list(e.participants)}
            for e in rollout.events
        ],
        "positions": rollout.positions.tolist(),
        "headings": rollout.headings.tolist(),
        "speeds": rollout.speeds.tolist(),
        "ego_actions": rollout.ego_actions.tolist(),
    }


def save_rollout(rollout: Rollout, path) -> None:
    with open(path, "w") as fh:
        json.dump(rollout_to_json(rollout), fh)
