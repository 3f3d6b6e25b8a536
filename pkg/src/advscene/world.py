"""Domain types for agents, lane-graph maps and trajectories, plus the 2D
geometry kernel (oriented-box collision, corridor containment, kinematics)
shared by every other module.

All types are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AgentState",
    "Lane",
    "LaneGraphMap",
    "Scene",
    "JointTrajectory",
    "Kinematics",
    "wrap_angle",
    "oriented_box_overlap",
    "oriented_box_distance",
    "signed_offroad_distance",
    "offroad_distance_batch",
    "derive_kinematics",
    "scene_to_json",
    "scene_from_json",
    "load_scene",
    "save_scene",
]


def wrap_angle(theta: float | np.ndarray) -> float | np.ndarray:
    """Normalize an angle to (-pi, pi]."""
    wrapped = -np.mod(-np.asarray(theta) + np.pi, 2.0 * np.pi) + np.pi
    if np.isscalar(theta) or np.ndim(theta) == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True)
class AgentState:
    """Pose and footprint of one vehicle at an instant."""

    position: np.ndarray  # (2,) meters
    heading: float  # radians in (-pi, pi]
    speed: float  # m/s, >= 0
    length: float = 4.5
    width: float = 2.0
    agent_id: int = 0
    is_ego: bool = False

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float).reshape(2)
        pos.setflags(write=False)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))
        if self.speed < 0:
            raise ValueError(f"speed must be >= 0, got {self.speed}")
        if self.length <= 0 or self.width <= 0:
            raise ValueError("length and width must be > 0")
        if self.agent_id < 0:
            raise ValueError("agent_id must be >= 0")

    @property
    def velocity(self) -> np.ndarray:
        return self.speed * np.array([math.cos(self.heading), math.sin(self.heading)])

    def corners(self) -> np.ndarray:
        """The four footprint corners, (4, 2), counterclockwise."""
        return _box_corners(self.position, self.heading, self.length, self.width)

    def replace(self, **kw) -> "AgentState":
        fields = dict(
            position=self.position, heading=self.heading, speed=self.speed,
            length=self.length, width=self.width, agent_id=self.agent_id,
            is_ego=self.is_ego,
        )
        fields.update(kw)
        return AgentState(**fields)


@dataclass(frozen=True)
class Lane:
    """A constant-width lane corridor around a polyline centerline."""

    lane_id: int
    centerline: np.ndarray  # (P, 2) meters, P >= 2
    width: float
    successors: tuple[int, ...] = ()
    neighbors: tuple[int, ...] = ()

    def __post_init__(self):
        pts = np.asarray(self.centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError("centerline must be (P, 2) with P >= 2")
        pts.setflags(write=False)
        object.__setattr__(self, "centerline", pts)
        if self.width <= 0:
            raise ValueError("lane width must be > 0")
        object.__setattr__(self, "successors", tuple(int(s) for s in self.successors))
        object.__setattr__(self, "neighbors", tuple(int(n) for n in self.neighbors))
        seg = np.diff(pts, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        if np.any(seg_len <= 0):
            raise ValueError("centerline has zero-length segments")
        arclen = np.concatenate([[0.0], np.cumsum(seg_len)])
        arclen.setflags(write=False)
        object.__setattr__(self, "_arclength", arclen)

    @property
    def length(self) -> float:
        return float(self._arclength[-1])

    def point_at(self, s: float | np.ndarray) -> np.ndarray:
        """Centerline point(s) at arclength s (clamped to the lane)."""
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.length)
        idx = np.clip(np.searchsorted(self._arclength, s, side="right") - 1, 0,
                      len(self._arclength) - 2)
        s0 = self._arclength[idx]
        seg = self.centerline[idx + 1] - self.centerline[idx]
        seg_len = self._arclength[idx + 1] - s0
        t = ((s - s0) / seg_len)[..., None] if np.ndim(s) else (s - s0) / seg_len
        return self.centerline[idx] + t * seg

    def heading_at(self, s: float) -> float:
        s = float(np.clip(s, 0.0, self.length))
        idx = int(np.clip(np.searchsorted(self._arclength, s, side="right") - 1, 0,
                          len(self._arclength) - 2))
        seg = self.centerline[idx + 1] - self.centerline[idx]
        return math.atan2(seg[1], seg[0])

    def project(self, point: np.ndarray) -> tuple[float, float]:
        """(arclength, lateral distance) of the closest centerline point."""
        p = np.asarray(point, dtype=float)
        a = self.centerline[:-1]
        d = self.centerline[1:] - a
        len2 = np.einsum("ij,ij->i", d, d)
        t = np.clip(np.einsum("j,ij->i", p, d) - np.einsum("ij,ij->i", a, d), 0.0, len2) / len2
        foot = a + t[:, None] * d
        dist = np.linalg.norm(p[None] - foot, axis=1)
        j = int(np.argmin(dist))
        s = float(self._arclength[j] + t[j] * math.sqrt(len2[j]))
        return s, float(dist[j])


class LaneGraphMap:
    """Lane corridors plus successor/neighbor adjacency.

    The drivable region is the union of the lane corridors (points within
    width/2 lateral distance of a centerline).
    """

    def __init__(self, lanes: list[Lane]):
        if not lanes:
            raise ValueError("map needs at least one lane")
        self.lanes: tuple[Lane, ...] = tuple(lanes)
        self._by_id = {lane.lane_id: lane for lane in self.lanes}
        if len(self._by_id) != len(self.lanes):
            raise ValueError("duplicate lane ids")
        for lane in self.lanes:
            for ref in lane.successors + lane.neighbors:
                if ref not in self._by_id:
                    raise ValueError(f"lane {lane.lane_id} references unknown lane {ref}")
        self._build_segment_index()

    def _build_segment_index(self):
        starts, deltas, half_w, seg_lane, seg_s0 = [], [], [], [], []
        for lane in self.lanes:
            pts = lane.centerline
            starts.append(pts[:-1])
            deltas.append(pts[1:] - pts[:-1])
            n = pts.shape[0] - 1
            half_w.append(np.full(n, lane.width / 2.0))
            seg_lane.append(np.full(n, lane.lane_id, dtype=int))
            seg_s0.append(lane._arclength[:-1])
        self._seg_a = np.concatenate(starts)
        self._seg_d = np.concatenate(deltas)
        self._seg_len2 = np.einsum("ij,ij->i", self._seg_d, self._seg_d)
        self._seg_half_w = np.concatenate(half_w)
        self._seg_lane = np.concatenate(seg_lane)
        self._seg_s0 = np.concatenate(seg_s0)

    def lane(self, lane_id: int) -> Lane:
        return self._by_id[lane_id]

    @property
    def lane_ids(self) -> list[int]:
        return [lane.lane_id for lane in self.lanes]

    def _closest_segments(self, points: np.ndarray):
        """Per point: distance to every segment, reduced over the best one."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        rel = p[:, None, :] - self._seg_a[None, :, :]  # (P, S, 2)
        t = np.einsum("psk,sk->ps", rel, self._seg_d) / self._seg_len2
        t = np.clip(t, 0.0, 1.0)
        foot = self._seg_a[None] + t[..., None] * self._seg_d[None]
        diff = p[:, None, :] - foot
        dist = np.linalg.norm(diff, axis=2)  # centerline distance per segment
        signed = dist - self._seg_half_w[None, :]
        best = np.argmin(signed, axis=1)
        rows = np.arange(p.shape[0])
        return best, signed[rows, best], dist[rows, best], diff[rows, best], t[rows, best]

    def offroad_distance_batch(self, points: np.ndarray):
        """Signed distance to the drivable region for many points at once.

        Returns (dist, grad): dist (P,) is <= 0 inside the region, > 0
        outside; grad (P, 2) is the a.e. gradient of dist w.r.t. the point.
        """
        best, signed, center_dist, diff, _ = self._closest_segments(points)
        grad = np.zeros_like(np.atleast_2d(points), dtype=float)
        ok = center_dist > 1e-12
        grad[ok] = diff[ok] / center_dist[ok, None]
        return signed, grad

    def nearest_lane(self, point: np.ndarray):
        """(lane_id, arclength, lateral_offset, lane_heading) of the closest lane."""
        best, signed, center_dist, _, t = self._closest_segments(np.asarray(point))
        seg = int(best[0])
        lane_id = int(self._seg_lane[seg])
        s = float(self._seg_s0[seg] + t[0] * math.sqrt(self._seg_len2[seg]))
        d = self._seg_d[seg]
        heading = math.atan2(d[1], d[0])
        return lane_id, s, float(center_dist[0]), heading

    def lane_route(self, start_id: int, goal_id: int, max_hops: int = 8):
        """Successor-chain route from start lane to goal lane, or None."""
        if start_id == goal_id:
            return [start_id]
        frontier = [(start_id, [start_id])]
        seen = {start_id}
        for _ in range(max_hops):
            nxt = []
            for lane_id, path in frontier:
                for suc in sorted(self.lane(lane_id).successors):
                    if suc in seen:
                        continue
                    if suc == goal_id:
                        return path + [suc]
                    seen.add(suc)
                    nxt.append((suc, path + [suc]))
            frontier = nxt
            if not frontier:
                break
        return None

    def walk(self, lane_id: int, s0: float, distances: np.ndarray,
             route: list[int] | None = None):
        """Positions and headings at arclengths s0 + distances along the lane,
        continuing into successor lanes past the end.

        Successor choice follows `route` when given, otherwise the
        lowest-id successor. Past the last lane the walk extrapolates
        straight along the final heading.
        """
        distances = np.asarray(distances, dtype=float)
        out_p = np.zeros(distances.shape + (2,))
        out_h = np.zeros(distances.shape)
        order = np.argsort(distances, kind="stable")
        lane = self.lane(lane_id)
        route_pos = 0
        base = -s0  # walked distance at lane start
        for idx in order:
            target = distances[idx]
            while target > base + lane.length:
                nxt = None
                if route and route_pos + 1 < len(route):
                    nxt = route[route_pos + 1]
                    route_pos += 1
                elif lane.successors:
                    nxt = min(lane.successors)
                if nxt is None:
                    break
                base += lane.length
                lane = self.lane(nxt)
            s = target - base
            if s <= lane.length:
                out_p[idx] = lane.point_at(s)
                out_h[idx] = lane.heading_at(s)
            else:  # straight extrapolation past the network
                h = lane.heading_at(lane.length)
                end = lane.point_at(lane.length)
                out_p[idx] = end + (s - lane.length) * np.array([math.cos(h), math.sin(h)])
                out_h[idx] = h
        return out_p, out_h


@dataclass(frozen=True)
class Scene:
    """Initial conditions for one episode: map, agents, horizon."""

    map: LaneGraphMap
    agents: tuple[AgentState, ...]
    ego_index: int
    horizon_steps: int
    dt_phys: float
    scene_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(self.agents))
        if self.horizon_steps < 2:
            raise ValueError("horizon_steps must be >= 2")
        if self.dt_phys <= 0:
            raise ValueError("dt_phys must be > 0")
        flags = [i for i, a in enumerate(self.agents) if a.is_ego]
        if flags != [self.ego_index]:
            raise ValueError("exactly one agent must be flagged is_ego, at ego_index")
        pos = np.array([a.position for a in self.agents])
        dist, _ = self.map.offroad_distance_batch(pos)
        if np.any(dist > 1e-9):
            bad = [self.agents[i].agent_id for i in np.nonzero(dist > 1e-9)[0]]
            raise ValueError(f"agents {bad} start outside the drivable region")

    @property
    def ego(self) -> AgentState:
        return self.agents[self.ego_index]

    @property
    def num_agents(self) -> int:
        return len(self.agents)


@dataclass(frozen=True)
class JointTrajectory:
    """Joint future positions of all agents: (N, H, 2) meters."""

    positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 3 or pos.shape[2] != 2:
            raise ValueError("positions must be (N, H, 2)")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def num_agents(self) -> int:
        return self.positions.shape[0]

    @property
    def horizon(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True)
class Kinematics:
    """Finite-difference speed/heading/acceleration series, each (N, H)."""

    speeds: np.ndarray
    headings: np.ndarray
    accels: np.ndarray
    velocities: np.ndarray = field(repr=False, default=None)


def _central_diff(series: np.ndarray, dt: float) -> np.ndarray:
    """d/dt along axis 1: central interior, one-sided at the ends."""
    out = np.empty_like(series, dtype=float)
    out[:, 1:-1] = (series[:, 2:] - series[:, :-2]) / (2.0 * dt)
    out[:, 0] = (series[:, 1] - series[:, 0]) / dt
    out[:, -1] = (series[:, -1] - series[:, -2]) / dt
    return out


def derive_kinematics(traj: JointTrajectory, dt: float,
                      initial_headings: np.ndarray | None = None) -> Kinematics:
    """Speeds, headings and accelerations from a position grid.

    Velocities use central differences at interior steps and one-sided
    differences at the ends. Headings follow the displacement direction and
    are held from the previous step when the local displacement is below
    1e-6 m (stationary vehicles keep their initial heading).
    """
    pos = traj.positions
    n, h = pos.shape[:2]
    if h < 2:
        raise ValueError("need at least 2 steps to derive kinematics")
    vel = np.stack([_central_diff(pos[..., 0], dt), _central_diff(pos[..., 1], dt)], axis=-1)
    speeds = np.linalg.norm(vel, axis=-1)

    headings = np.zeros((n, h))
    disp = vel * dt  # displacement scale for the 1e-6 m hold rule
    moving = np.linalg.norm(disp, axis=-1) >= 1e-6
    raw = np.arctan2(vel[..., 1], vel[..., 0])
    prev = np.zeros(n) if initial_headings is None else np.asarray(initial_headings, float).copy()
    for step in range(h):
        sel = moving[:, step]
        headings[sel, step] = raw[sel, step]
        headings[~sel, step] = prev[~sel]
        prev = headings[:, step]

    accels = _central_diff(speeds, dt)
    return Kinematics(speeds=speeds, headings=headings, accels=accels, velocities=vel)


# ---------------------------------------------------------------------------
# Oriented-box geometry


def _box_corners(center: np.ndarray, heading: float, length: float, width: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    rot = np.array([[c, -s], [s, c]])
    half = np.array([
        [length / 2, width / 2],
        [-length / 2, width / 2],
        [-length / 2, -width / 2],
        [length / 2, -width / 2],
    ])
    return np.asarray(center) + half @ rot.T


def _sat_gap(ca: np.ndarray, cb: np.ndarray) -> float:
    """Largest separation over the 8 candidate axes; <= 0 means overlap."""
    gap = -np.inf
    for corners in (ca, cb):
        edges = np.roll(corners, -1, axis=0) - corners
        axes = np.stack([-edges[:, 1], edges[:, 0]], axis=1)
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        pa = ca @ axes.T
        pb = cb @ axes.T
        sep = np.maximum(pb.min(axis=0) - pa.max(axis=0), pa.min(axis=0) - pb.max(axis=0))
        gap = max(gap, sep.max())
    return float(gap)


def oriented_box_overlap(a: AgentState, b: AgentState) -> bool:
    """Exact separating-axis intersection test for two vehicle footprints."""
    return _sat_gap(a.corners(), b.corners()) <= 0.0


def _segment_segment_distance(p1, p2, q1, q2) -> float:
    d1 = p2 - p1
    d2 = q2 - q1
    r = p1 - q1
    a = d1 @ d1
    e = d2 @ d2
    f = d2 @ r
    eps = 1e-12
    if a <= eps and e <= eps:
        return float(np.linalg.norm(r))
    if a <= eps:
        s, t = 0.0, np.clip(f / e, 0.0, 1.0)
    else:
        c = d1 @ r
        if e <= eps:
            t, s = 0.0, np.clip(-c / a, 0.0, 1.0)
        else:
            b = d1 @ d2
            denom = a * e - b * b
            s = np.clip((b * f - c * e) / denom, 0.0, 1.0) if denom > eps else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t, s = 0.0, np.clip(-c / a, 0.0, 1.0)
            elif t > 1.0:
                t, s = 1.0, np.clip((b - c) / a, 0.0, 1.0)
    closest1 = p1 + s * d1
    closest2 = q1 + t * d2
    return float(np.linalg.norm(closest1 - closest2))


def oriented_box_distance(a: AgentState, b: AgentState) -> float:
    """Euclidean separation between two footprints; 0 when they overlap."""
    ca, cb = a.corners(), b.corners()
    if _sat_gap(ca, cb) <= 0.0:
        return 0.0
    best = np.inf
    for i in range(4):
        p1, p2 = ca[i], ca[(i + 1) % 4]
        for j in range(4):
            best = min(best, _segment_segment_distance(p1, p2, cb[j], cb[(j + 1) % 4]))
    return best


def signed_offroad_distance(p: np.ndarray, lane_map: LaneGraphMap) -> float:
    """<= 0 inside the drivable region (negated depth), > 0 outside."""
    dist, _ = lane_map.offroad_distance_batch(np.asarray(p, dtype=float)[None, :])
    return float(dist[0])


def offroad_distance_batch(points: np.ndarray, lane_map: LaneGraphMap):
    return lane_map.offroad_distance_batch(points)


# ---------------------------------------------------------------------------
# Scene JSON serialization (bit-exact round trip)


def scene_to_json(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "map": {
            "lanes": [
                {
                    "id": lane.lane_id,
                    "centerline": [[float(x), float(y)] for x, y in lane.centerline],
                    "width": float(lane.width),
                    "successors": list(lane.successors),
                    "neighbors": list(lane.neighbors),
                }
                for lane in scene.map.lanes
            ]
        },
        "agents": [
            {
                "id": a.agent_id,
                "x": float(a.position[0]),
                "y": float(a.position[1]),
                "heading": float(a.heading),
                "speed": float(a.speed),
                "length": float(a.length),
                "width": float(a.width),
                "is_ego": bool(a.is_ego),
            }
            for a in scene.agents
        ],
        "horizon_steps": int(scene.horizon_steps),
        "dt_phys": float(scene.dt_phys),
    }


def scene_from_json(doc: dict) -> Scene:
    lanes = [
        Lane(
            lane_id=int(entry["id"]),
            centerline=np.array(entry["centerline"], dtype=float),
            width=float(entry["width"]),
            successors=tuple(entry.get("successors", ())),
            neighbors=tuple(entry.get("neighbors", ())),
        )
        for entry in doc["map"]["lanes"]
    ]
    agents = []
    ego_index = -1
    for i, entry in enumerate(doc["agents"]):
        if entry["is_ego"]:
            ego_index = i
        agents.append(AgentState(
            position=np.array([entry["x"], entry["y"]]),
            heading=float(entry["heading"]),
            speed=float(entry["speed"]),
            length=float(entry["length"]),
            width=float(entry["width"]),
            agent_id=int(entry["id"]),
            is_ego=bool(entry["is_ego"]),
        ))
    return Scene(
        map=LaneGraphMap(lanes),
        agents=tuple(agents),
        ego_index=ego_index,
        horizon_steps=int(doc["horizon_steps"]),
        dt_phys=float(doc["dt_phys"]),
        scene_id=str(doc.get("scene_id", "")),
    )


def save_scene(scene: Scene, path) -> None:
    with open(path, "w") as fh:
        json.dump(scene_to_json(scene), fh, indent=1)


def load_scene(path) -> Scene:
    with open(path) as fh:
        return scene_from_json(json.load(fh))
