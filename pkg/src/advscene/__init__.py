"""Closed-loop adversarial traffic scenario synthesis.

A variance-preserving diffusion prior over joint agent trajectories is
steered by sparse, transport-regularized drift control toward collision
interactions with a black-box ego policy. Adversary selection runs on
TTC-derived risk graphs; synthesized scenarios execute in a 2D closed-loop
simulator, and outcomes feed an evolutionary curriculum that hardens the
ego policy.
"""

from .control import GuidanceConfig, KlLedger, synthesize
from .curriculum import CurriculumConfig, run_curriculum
from .metrics import MetricsReport, evaluate_batch
from .pipeline import PipelineConfig, prepare_scene, run_cell
from .prior import GaussianMixture, TrajectoryGmm, VpSchedule, fit_prior
from .riskgraph import build_graph, temporal_scores, top_cliques
from .scenarios import generate_scenes, make_scene, nominal_rollouts
from .simloop import EgoPolicyParams, Rollout, run_closed_loop
from .targeting import Skeleton, build_skeleton, make_anchor, semantic_filter
from .world import AgentState, JointTrajectory, Lane, LaneGraphMap, Scene

__version__ = "0.1.0"
