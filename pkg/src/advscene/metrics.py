"""Evaluation metrics over rollout batches: safety criticality (collision
failure rate, distance-to-collision, impact severity, TTC cost, evasive
effort) and realism/validity (off-road rate, Wasserstein transport fidelity)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from .riskgraph import ttc_surrogate
from .simloop import Rollout
from .world import JointTrajectory, derive_kinematics, oriented_box_distance

__all__ = [
    "MetricsReport",
    "wasserstein_1d",
    "safety_metrics",
    "validity_metrics",
    "episode_ttc_cost",
    "realism_score",
    "realism_from_w1",
    "evaluate_batch",
    "kinematic_stats",
    "report_to_row",
    "write_report_csv",
]

TTC_CRIT = 3.0  # s


@dataclass
class MetricsReport:
    cfr: float = 0.0
    min_dtc: float = 0.0
    rel_vel: float | None = None  # absent when no episode collided
    rir: float = 0.0
    front_rate: float = 0.0
    side_rate: float = 0.0
    rear_rate: float = 0.0
    ttc_cost: float = 0.0
    m_acc: float = 0.0
    aor: float | None = None
    real: float | None = None
    episodes: int = 0
    kl_mean: float | None = None
    skipped_scenes: int = 0


def wasserstein_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact 1-D W1 between empirical distributions.

    For equal sizes this reduces to the mean absolute difference of order
    statistics; the general case integrates |F_a - F_b| over the pooled
    support.
    """
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("need non-empty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    values = np.concatenate([a, b])
    values.sort(kind="mergesort")
    deltas = np.diff(values)
    cdf_a = np.searchsorted(a, values[:-1], side="right") / a.size
    cdf_b = np.searchsorted(b, values[:-1], side="right") / b.size
    return float(np.sum(np.abs(cdf_a - cdf_b) * deltas))


def _min_ego_footprint_distance(rollout: Rollout, step: int) -> float:
    states = rollout.agent_states(step)
    ego = states[rollout.ego_index]
    ego_rad = 0.5 * math.hypot(ego.length, ego.width)
    best = np.inf
    for i, other in enumerate(states):
        if i == rollout.ego_index:
            continue
        lower = (float(np.linalg.norm(other.position - ego.position))
                 - ego_rad - 0.5 * math.hypot(other.length, other.width))
        if lower >= best:
            continue
        best = min(best, oriented_box_distance(ego, other))
    return float(best)


def episode_ttc_cost(rollout: Rollout) -> float:
    costs = []
    for step in range(rollout.num_steps):
        states = rollout.agent_states(step)
        ego = states[rollout.ego_index]
        ttcs = [ttc_surrogate(ego, o, tau_max=2.0 * TTC_CRIT)
                for i, o in enumerate(states) if i != rollout.ego_index]
        if not ttcs:
            costs.append(0.0)
            continue
        costs.append(max(0.0, (TTC_CRIT - min(ttcs)) / TTC_CRIT))
    return float(np.mean(costs))


def safety_metrics(batch: list[Rollout]) -> MetricsReport:
    """CFR, MinDTC, RelVel, impact-class rates, TTC cost and mean |accel|."""
    if not batch:
        raise ValueError("empty batch")
    n = len(batch)
    collisions = [r for r in batch if r.collided]
    cfr = len(collisions) / n

    dtcs = []
    for r in batch:
        if r.collided:
            dtcs.append(0.0)
        else:
            dtcs.append(min(_min_ego_footprint_distance(r, s) for s in range(r.num_steps)))
    rel_vels = []
    impact = {"front": 0, "side": 0, "rear": 0}
    for r in collisions:
        ev = r.collision_event
        impact[r.impact_class] += 1
        states = r.agent_states(ev.step)
        ego = states[r.ego_index]
        other_idx = r.agent_ids.index(ev.participants[1])
        rel_vels.append(float(np.linalg.norm(ego.velocity - states[other_idx].velocity)))

    return MetricsReport(
        cfr=cfr,
        min_dtc=float(np.mean(dtcs)),
        rel_vel=float(np.mean(rel_vels)) if rel_vels else None,
        rir=impact["rear"] / n,
        front_rate=impact["front"] / n,
        side_rate=impact["side"] / n,
        rear_rate=impact["rear"] / n,
        ttc_cost=float(np.mean([episode_ttc_cost(r) for r in batch])),
        m_acc=float(np.mean([np.mean(np.abs(r.ego_accels)) for r in batch])),
        episodes=n,
    )


def validity_metrics(batch: list[Rollout], scene=None) -> float:
    """All-Off-Road rate: fraction of episodes with a confirmed off-road
    excursion event (recorded by the simulator's debounced detector)."""
    if not batch:
        raise ValueError("empty batch")
    off = sum(1 for r in batch if any(e.kind == "offroad" for e in r.events))
    return off / len(batch)


def kinematic_stats(positions: np.ndarray, dt: float) -> dict:
    """Pooled speed / longitudinal accel / lateral accel samples from a
    position grid (N, H, 2). One estimator shared by sim and reference sides."""
    traj = JointTrajectory(positions=np.asarray(positions, dtype=float))
    kin = derive_kinematics(traj, dt)
    dheads = np.diff(kin.headings, axis=1)
    dheads = np.arctan2(np.sin(dheads), np.cos(dheads))  # wrap to (-pi, pi]
    yaw_rate = dheads / dt
    lat = kin.speeds[:, :-1] * yaw_rate
    return {
        "speed": kin.speeds.ravel(),
        "long_accel": kin.accels.ravel(),
        "lat_accel": lat.ravel(),
    }


def realism_from_w1(w1_values, scales) -> float:
    """The fidelity map exp(-mean(W1/scale)); scales are floored at 1e-3."""
    ratios = [w / max(s, 1e-3) for w, s in zip(w1_values, scales)]
    return float(np.exp(-np.mean(ratios)))


def realism_score(batch: list[Rollout], reference: list[JointTrajectory]) -> float:
    """Transport fidelity in (0, 1]: exp(-mean_sigma W1_sigma / s_sigma),
    where s_sigma is the reference interquartile range (floored at 1e-3)."""
    if not batch or not reference:
        raise ValueError("need non-empty batch and reference sets")
    sim = {"speed": [], "long_accel": [], "lat_accel": []}
    for r in batch:
        if r.num_steps < 2:
            continue
        stats = kinematic_stats(r.positions.transpose(1, 0, 2), r.dt)
        for key, arr in stats.items():
            sim[key].append(arr)
    ref = {"speed": [], "long_accel": [], "lat_accel": []}
    dt_ref = batch[0].dt
    for traj in reference:
        stats = kinematic_stats(traj.positions, dt_ref)
        for key, arr in stats.items():
            ref[key].append(arr)
    w1s, scales = [], []
    for key in ("speed", "long_accel", "lat_accel"):
        s = np.concatenate(sim[key])
        t = np.concatenate(ref[key])
        q75, q25 = np.percentile(t, [75, 25])
        w1s.append(wasserstein_1d(s, t))
        scales.append(q75 - q25)
    return realism_from_w1(w1s, scales)


def evaluate_batch(batch: list[Rollout], reference: list[JointTrajectory] | None = None,
                   scene=None) -> MetricsReport:
    report = safety_metrics(batch)
    report.aor = validity_metrics(batch, scene)
    if reference:
        report.real = realism_score(batch, reference)
    return report


REPORT_COLUMNS = [
    ("REAL", "real"), ("CFR", "cfr"), ("AOR", "aor"), ("RelVel", "rel_vel"),
    ("TTC-C", "ttc_cost"), ("RIR", "rir"), ("Front-col", "front_rate"),
    ("Side-col", "side_rate"), ("Rear-col", "rear_rate"),
    ("MinDTC", "min_dtc"), ("mAcc", "m_acc"), ("KL", "kl_mean"),
    ("episodes", "episodes"),
]


def report_to_row(report: MetricsReport, **extra) -> dict:
    row = dict(extra)
    for col, attr in REPORT_COLUMNS:
        value = getattr(report, attr)
        row[col] = "" if value is None else repr(value) if isinstance(value, float) else value
    return row


def write_report_csv(rows: list[dict], path) -> None:
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def write_report_json(report: MetricsReport, path, **extra) -> None:
    doc = dict(extra)
    doc.update(asdict(report))
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
