"""Per-scene orchestration: fit the scene prior, run the ego-policy
reference rollout, derive the risk graphs and interaction skeleton, then
synthesize controlled trajectories and execute them in closed loop."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import riskgraph as rg
from .control import GuidanceConfig, SynthesisResult, synthesize
from .prior import TrajectoryGmm, VpSchedule, fit_prior
from .scenarios import nominal_rollouts, stable_seed
from .simloop import EgoPolicyParams, Rollout, run_closed_loop
from .targeting import Skeleton, build_skeleton, semantic_filter
from .world import JointTrajectory, Scene, derive_kinematics

__all__ = [
    "PipelineConfig",
    "SceneBundle",
    "CellResult",
    "prepare_scene",
    "select_support",
    "run_cell",
    "rollout_to_trajectory",
]


@dataclass(frozen=True)
class PipelineConfig:
    """Everything the per-scene pipeline needs besides the scene itself."""

    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    diffusion_steps: int = 64
    prior_components: int = 3
    prior_rollouts: int = 40
    # risk graph
    tau_max: float = 5.0
    beta_w: float = 1.0
    eps_w: float = 0.5
    k_clique: int = 3
    m_top: int = 3
    k_top: int = 4
    # skeleton
    k_near: int = 1
    k_far: int = 1
    tau_dist: float = 25.0
    tau_long: float = 30.0
    plan_v_max: float = 15.0
    plan_kappa_max: float = 0.2
    # simulation
    replan_every: int = 10
    # support selection: topo_feas | topo_only | random_k
    support_mode: str = "topo_feas"

    def __post_init__(self):
        if self.support_mode not in ("topo_feas", "topo_only", "random_k"):
            raise ValueError(f"unknown support mode {self.support_mode!r}")


@dataclass
class SceneBundle:
    """Cached per-scene state shared by every (eta, seed) cell."""

    scene: Scene
    prior: TrajectoryGmm
    sched: VpSchedule
    reference_rollouts: list[JointTrajectory]
    ref_rollout: Rollout
    ref_traj: JointTrajectory
    skeleton: Skeleton | None
    scores: rg.BifurcationScores | None
    skip_reason: str | None = None


@dataclass
class CellResult:
    rollout: Rollout
    synthesis: SynthesisResult
    skeleton: Skeleton
    eta: float
    seed: int


def rollout_to_trajectory(rollout: Rollout, horizon: int) -> JointTrajectory:
    """Rollout states as an (N, H, 2) grid, holding the last position when
    the episode ended early."""
    pos = rollout.positions.transpose(1, 0, 2)  # (N, T, 2)
    t = pos.shape[1]
    if t < horizon:
        pad = np.repeat(pos[:, -1:, :], horizon - t, axis=1)
        pos = np.concatenate([pos, pad], axis=1)
    return JointTrajectory(positions=pos[:, :horizon])


def select_support(bundle_scene: Scene, ref_traj: JointTrajectory,
                   scores: rg.BifurcationScores, cfg: PipelineConfig,
                   seed: int):
    """The support set S under the configured selection mode, plus the
    feasibility rejections for reporting."""
    if cfg.support_mode == "random_k":
        rng = np.random.default_rng(stable_seed("random_support", seed))
        pool = [a.agent_id for a in bundle_scene.agents if not a.is_ego]
        k = min(cfg.k_top, len(pool))
        return sorted(rng.choice(pool, size=k, replace=False).tolist()), {}
    s_top = list(scores.s_top)
    if cfg.support_mode == "topo_only":
        return s_top, {}
    mask = semantic_filter(s_top, bundle_scene, ref_traj)
    accepted = [a for a in s_top if mask.flags.get(a, False)]  # S_top intersect F
    return accepted, dict(mask.reasons)


def prepare_scene(scene: Scene, policy: EgoPolicyParams, cfg: PipelineConfig,
                  base_seed: int) -> SceneBundle:
    """Fit the prior, run the reference rollout under the current policy,
    score the risk graphs and build the skeleton. A scene with no feasible
    adversaries comes back with skip_reason set."""
    prior_seed = stable_seed("prior", scene.scene_id, base_seed)
    refs = nominal_rollouts(scene, cfg.prior_rollouts, prior_seed)
    prior = fit_prior(refs, cfg.prior_components, seed=prior_seed)
    sched = VpSchedule(K=cfg.diffusion_steps)

    env_ref = refs[0]  # seeded nominal draw drives the reference episode
    ref_rollout = run_closed_loop(scene, env_ref, policy,
                                  replan_every=cfg.replan_every,
                                  scenario_id=scene.scene_id)
    ref_traj = rollout_to_trajectory(ref_rollout, scene.horizon_steps)

    kin = derive_kinematics(ref_traj, scene.dt_phys,
                            initial_headings=np.array([a.heading for a in scene.agents]))
    graphs = []
    for step in range(0, scene.horizon_steps, 2):  # every other step is enough
        states = [
            a.replace(position=ref_traj.positions[i, step],
                      heading=float(kin.headings[i, step]),
                      speed=float(kin.speeds[i, step]))
            for i, a in enumerate(scene.agents)
        ]
        graphs.append(rg.build_graph(states, timestep=step, tau_max=cfg.tau_max,
                                     beta=cfg.beta_w, eps_w=cfg.eps_w))
    scores = rg.temporal_scores(graphs, k_clique=cfg.k_clique, m_top=cfg.m_top,
                                k_top=cfg.k_top, ego_id=scene.ego.agent_id)

    support, rejections = select_support(scene, ref_traj, scores, cfg, base_seed)
    if not support:
        return SceneBundle(scene=scene, prior=prior, sched=sched,
                           reference_rollouts=refs, ref_rollout=ref_rollout,
                           ref_traj=ref_traj, skeleton=None, scores=scores,
                           skip_reason="no feasible adversaries")
    skeleton = build_skeleton(support, scene, ref_traj, k_near=cfg.k_near,
                              k_far=cfg.k_far, tau_dist=cfg.tau_dist,
                              tau_long=cfg.tau_long, rejections=rejections,
                              v_max=cfg.plan_v_max, kappa_max=cfg.plan_kappa_max)
    return SceneBundle(scene=scene, prior=prior, sched=sched,
                       reference_rollouts=refs, ref_rollout=ref_rollout,
                       ref_traj=ref_traj, skeleton=skeleton, scores=scores)


def run_cell(bundle: SceneBundle, policy: EgoPolicyParams, eta: float, seed: int,
             cfg: PipelineConfig, anchoring: bool | None = None) -> CellResult:
    """Synthesize at the given intensity and execute the closed loop."""
    if bundle.skeleton is None:
        raise ValueError(f"scene {bundle.scene.scene_id} has no skeleton ({bundle.skip_reason})")
    guidance = replace(cfg.guidance, eta=float(eta))
    if anchoring is not None:
        guidance = replace(guidance, anchoring=anchoring)
    rng = np.random.default_rng(stable_seed("synth", bundle.scene.scene_id, eta, seed))
    synthesis = synthesize(bundle.scene, bundle.prior, bundle.sched, bundle.skeleton,
                           guidance, rng, seed=seed)
    rollout = run_closed_loop(bundle.scene, synthesis.trajectory, policy,
                              replan_every=cfg.replan_every,
                              scenario_id=bundle.scene.scene_id, seed=seed)
    return CellResult(rollout=rollout, synthesis=synthesis, skeleton=bundle.skeleton,
                      eta=float(eta), seed=seed)
