"""Evolutionary curriculum: rounds of adversarial synthesis against the
current ego policy, an adversarial experience buffer, cross-entropy search
over the policy parameters, and before/after evaluation on disjoint
tuning/held-out scene splits."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .metrics import MetricsReport, evaluate_batch, episode_ttc_cost
from .pipeline import PipelineConfig, prepare_scene, run_cell
from .scenarios import stable_seed
from .simloop import EgoPolicyParams, Rollout, run_closed_loop
from .world import JointTrajectory, Scene

__all__ = [
    "CurriculumConfig",
    "BufferEntry",
    "AdversarialBuffer",
    "run_round",
    "update_policy",
    "buffer_objective",
    "evaluate_policy",
    "run_curriculum",
    "CurriculumResult",
]


@dataclass(frozen=True)
class CurriculumConfig:
    rounds: int = 3
    eta_schedule: tuple[float, ...] = (0.5, 1.0, 2.0)
    seeds_per_scene: int = 2
    update_enabled: bool = True
    # cross-entropy search
    population: int = 8
    elite_frac: float = 0.25
    cem_iters: int = 3
    cem_sigma: float = 0.2  # initial std as a fraction of each bound span
    # objective weights
    w_collision: float = 1.0
    w_ttc: float = 0.3
    w_accel: float = 0.05
    # final evaluation protocol
    eval_etas: tuple[float, ...] = (2.0, 3.0)
    eval_seeds: int = 3
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    base_seed: int = 0

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if len(self.eta_schedule) < self.rounds:
            raise ValueError("eta schedule shorter than the round count")
        etas = self.eta_schedule
        if any(e < 0 for e in etas) or any(b < a for a, b in zip(etas, etas[1:])):
            raise ValueError("eta schedule must be non-negative and non-decreasing")
        if not 0.0 < self.elite_frac <= 0.5:
            raise ValueError("elite_frac must be in (0, 0.5]")
        if self.population < 4:
            raise ValueError("population must be >= 4")


@dataclass
class BufferEntry:
    round_index: int
    scene: Scene
    policy: EgoPolicyParams
    env_traj: JointTrajectory
    rollout: Rollout
    skeleton: object
    eta: float
    seed: int
    kl_total: float


class AdversarialBuffer:
    """Round-tagged adversarial experiences; every entry's rollout was
    produced against the policy recorded on it."""

    def __init__(self):
        self.entries: list[BufferEntry] = []

    def add(self, entry: BufferEntry) -> None:
        self.entries.append(entry)

    def for_round(self, r: int) -> list[BufferEntry]:
        return [e for e in self.entries if e.round_index == r]

    def scene_ids(self) -> set:
        return {e.scene.scene_id for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)


def run_round(r: int, policy: EgoPolicyParams, scenes: list[Scene],
              cfg: CurriculumConfig) -> tuple[AdversarialBuffer, MetricsReport, int]:
    """One curriculum round: per scene, re-derive the reference rollout,
    risk graphs and skeleton against the current policy, synthesize at the
    scheduled intensity, and execute closed loop. Scenes with no feasible
    adversaries are skipped and counted."""
    eta = cfg.eta_schedule[r] if r < len(cfg.eta_schedule) else cfg.eta_schedule[-1]
    buffer = AdversarialBuffer()
    rollouts, references, kls = [], [], []
    skipped = 0
    for scene in scenes:
        bundle = prepare_scene(scene, policy, cfg.pipeline,
                               base_seed=stable_seed("round", cfg.base_seed, r))
        if bundle.skeleton is None:
            skipped += 1
            continue
        references.extend(bundle.reference_rollouts[:8])
        for s in range(cfg.seeds_per_scene):
            cell = run_cell(bundle, policy, eta=eta,
                            seed=stable_seed("cell", cfg.base_seed, r, s) % (2**31),
                            cfg=cfg.pipeline)
            buffer.add(BufferEntry(
                round_index=r, scene=scene, policy=policy,
                env_traj=cell.synthesis.trajectory, rollout=cell.rollout,
                skeleton=cell.skeleton, eta=eta, seed=cell.seed,
                kl_total=cell.synthesis.ledger.total,
            ))
            rollouts.append(cell.rollout)
            kls.append(cell.synthesis.ledger.total)
    if not rollouts:
        raise ValueError("every scene in the round was skipped")
    report = evaluate_batch(rollouts, references)
    report.kl_mean = float(np.mean(kls))
    report.skipped_scenes = skipped
    return buffer, report, skipped


def buffer_objective(policy: EgoPolicyParams, entries: list[BufferEntry],
               cfg: CurriculumConfig) -> float:
    """Mean closed-loop cost of a candidate policy re-simulated against the
    buffer's frozen adversarial trajectories."""
    costs = []
    for e in entries:
        rollout = run_closed_loop(e.scene, e.env_traj, policy,
                                  replan_every=cfg.pipeline.replan_every,
                                  scenario_id=e.scene.scene_id, seed=e.seed)
        if not rollout.valid:
            return float("nan")
        costs.append(
            cfg.w_collision * float(rollout.collided)
            + cfg.w_ttc * episode_ttc_cost(rollout)
            + cfg.w_accel * float(np.mean(np.abs(rollout.ego_accels)))
        )
    return float(np.mean(costs))


def update_policy(policy: EgoPolicyParams, entries: list[BufferEntry],
                  cfg: CurriculumConfig, rng: np.random.Generator) -> EgoPolicyParams:
    """Cross-entropy search over the policy parameter vector on the frozen
    buffer. Never returns a candidate scoring worse than the incumbent."""
    if not entries:
        raise ValueError("empty buffer")
    lo, hi = policy.bounds()
    mean = policy.get_vector().astype(float)
    sigma = cfg.cem_sigma * (hi - lo)
    incumbent_j = buffer_objective(policy, entries, cfg)
    best_vec, best_j = None, incumbent_j
    any_valid = False
    for _ in range(cfg.cem_iters):
        pop = np.clip(mean + sigma * rng.standard_normal((cfg.population, mean.size)), lo, hi)
        scores = np.array([buffer_objective(policy.with_vector(v), entries, cfg) for v in pop])
        valid = np.isfinite(scores)
        if not valid.any():
            continue
        any_valid = True
        order = np.argsort(np.where(valid, scores, np.inf), kind="stable")
        n_elite = max(1, int(round(cfg.population * cfg.elite_frac)))
        elites = pop[order[:n_elite]]
        if scores[order[0]] < best_j:
            best_j = float(scores[order[0]])
            best_vec = pop[order[0]].copy()
        mean = elites.mean(axis=0)
        sigma = elites.std(axis=0) + 1e-9
    if not any_valid and cfg.cem_iters > 0:
        warnings.warn("all candidate policies produced invalid rollouts; keeping incumbent")
        return policy
    if best_vec is None or best_j >= incumbent_j - 1e-9:
        return policy
    return policy.with_vector(best_vec)


def evaluate_policy(policy: EgoPolicyParams, scenes: list[Scene],
                    cfg: CurriculumConfig, tag: str) -> dict:
    """Fresh adversarial evaluation of a policy: the full pipeline is re-run
    against it (re-targeted reference, skeleton, synthesis) per eta."""
    out = {}
    for eta in cfg.eval_etas:
        rollouts, references = [], []
        for scene in scenes:
            bundle = prepare_scene(scene, policy, cfg.pipeline,
                                   base_seed=stable_seed("eval", cfg.base_seed, tag))
            if bundle.skeleton is None:
                continue
            references.extend(bundle.reference_rollouts[:8])
            for s in range(cfg.eval_seeds):
                cell = run_cell(bundle, policy, eta=eta,
                                seed=stable_seed("evalcell", cfg.base_seed, tag, s) % (2**31),
                                cfg=cfg.pipeline)
                rollouts.append(cell.rollout)
        if rollouts:
            out[eta] = evaluate_batch(rollouts, references)
    return out


@dataclass
class CurriculumResult:
    final_policy: EgoPolicyParams
    round_reports: list[MetricsReport]
    initial_eval: dict  # {"tuning": {eta: report}, "heldout": {...}}
    final_eval: dict
    buffer: AdversarialBuffer
    policies: list[EgoPolicyParams]
    heldout_ids: set = field(default_factory=set)

    def gain_rows(self) -> list[dict]:
        """Percentage change after the curriculum, per split and eta:
        negative is improvement for every column."""
        rows = []
        for split in sorted(self.initial_eval):
            for eta in sorted(self.initial_eval[split]):
                before = self.initial_eval[split][eta]
                after = self.final_eval[split].get(eta)
                if after is None:
                    continue

                def gain(b, a):
                    return 100.0 * (a - b) / abs(b) if b else (0.0 if not a else float("inf"))

                rows.append({
                    "split": split,
                    "eta": eta,
                    "failure_rate_gain": gain(before.cfr, after.cfr),
                    "min_dtc_gain": gain(before.min_dtc, after.min_dtc),
                    "ttc_cost_gain": gain(before.ttc_cost, after.ttc_cost),
                    "m_acc_gain": gain(before.m_acc, after.m_acc),
                    "cfr_before": before.cfr, "cfr_after": after.cfr,
                })
        return rows


def run_curriculum(cfg: CurriculumConfig, tuning_scenes: list[Scene],
                   heldout_scenes: list[Scene],
                   policy0: EgoPolicyParams) -> CurriculumResult:
    """Alternate synthesis rounds and policy updates on the tuning split,
    then evaluate the initial and final policies on both splits. Held-out
    scenes never contribute to an update."""
    tuning_ids = {s.scene_id for s in tuning_scenes}
    heldout_ids = {s.scene_id for s in heldout_scenes}
    if tuning_ids & heldout_ids:
        raise ValueError("tuning and held-out scene ids overlap")

    initial_eval = {
        "tuning": evaluate_policy(policy0, tuning_scenes, cfg, "tuning"),
        "heldout": evaluate_policy(policy0, heldout_scenes, cfg, "heldout"),
    }
    policy = policy0
    policies = [policy0]
    buffer = AdversarialBuffer()
    reports = []
    rng = np.random.default_rng(stable_seed("cem", cfg.base_seed))
    for r in range(cfg.rounds):
        round_buffer, report, _ = run_round(r, policy, tuning_scenes, cfg)
        for entry in round_buffer.entries:
            buffer.add(entry)
        reports.append(report)
        if cfg.update_enabled:
            policy = update_policy(policy, round_buffer.entries, cfg, rng)
            policies.append(policy)
    assert not (buffer.scene_ids() & heldout_ids), "held-out scenes leaked into updates"

    final_eval = {
        "tuning": evaluate_policy(policy, tuning_scenes, cfg, "tuning"),
        "heldout": evaluate_policy(policy, heldout_scenes, cfg, "heldout"),
    }
    return CurriculumResult(final_policy=policy, round_reports=reports,
                            initial_eval=initial_eval, final_eval=final_eval,
                            buffer=buffer, policies=policies, heldout_ids=heldout_ids)
