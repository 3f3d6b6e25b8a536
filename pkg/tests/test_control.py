import math

import numpy as np
import pytest

from advscene.control import (GuidanceConfig, KlLedger, anchor_inject,
                              guided_drift, reverse_step, synthesize,
                              v_adv, v_adv_grad, v_feas, v_feas_grad)
from advscene.prior import (AgentPrior, GaussianMixture, TrajectoryGmm,
                            VpSchedule)
from advscene.targeting import Skeleton
from advscene.world import (AgentState, JointTrajectory, Lane, LaneGraphMap,
                            Scene)


def two_lane_scene(num_agents=2, horizon=12, dt=0.1):
    lanes = [
        Lane(lane_id=0, centerline=[[-50.0, 0.0], [300.0, 0.0]], width=4.0, neighbors=(1,)),
        Lane(lane_id=1, centerline=[[-50.0, 4.0], [300.0, 4.0]], width=4.0, neighbors=(0,)),
    ]
    agents = [AgentState(position=[10.0 * i + 5.0, 4.0 * (i % 2)], heading=0.0,
                         speed=8.0, agent_id=i, is_ego=(i == 0))
              for i in range(num_agents)]
    return Scene(map=LaneGraphMap(lanes), agents=tuple(agents), ego_index=0,
                 horizon_steps=horizon, dt_phys=dt, scene_id="ctl")


def lane_following_positions(scene, speed=8.0):
    h = scene.horizon_steps
    t = np.arange(h) * scene.dt_phys
    pos = np.zeros((scene.num_agents, h, 2))
    for i, a in enumerate(scene.agents):
        pos[i, :, 0] = a.position[0] + speed * t
        pos[i, :, 1] = a.position[1]
    return pos


def simple_skeleton(scene, ref_positions, coalition=(1,)):
    mask = np.zeros(scene.num_agents)
    for c in coalition:
        mask[c] = 1.0
    chain = tuple((c, scene.ego.agent_id) for c in coalition)
    ref = JointTrajectory(positions=ref_positions)
    return Skeleton(coalition=tuple(coalition), c_near=tuple(coalition), c_far=(),
                    chain=chain, mask=mask, anchor_positions=ref_positions,
                    reference=ref, ego_id=scene.ego.agent_id)


def smooth_prior(scene, spread=1.0):
    """Analytic per-agent prior centered on lane following, scalar codec."""
    pos = lane_following_positions(scene)
    agents = []
    d = 2 * scene.horizon_steps
    for i in range(scene.num_agents):
        gmm = GaussianMixture(weights=[1.0], means=[np.zeros(d)],
                              var_diag=[np.full(d, 1.0)])
        agents.append(AgentPrior.scalar(pos[i].reshape(-1), spread, gmm))
    return TrajectoryGmm(agents, scene.horizon_steps)


class TestVFeas:
    def test_all_within_limits_zero(self):
        scene = two_lane_scene()
        cost = v_feas(lane_following_positions(scene), scene, GuidanceConfig())
        assert cost == 0.0

    def test_one_meter_offroad_unit_cost(self):
        scene = two_lane_scene(num_agents=1)
        pos = lane_following_positions(scene, speed=0.0)
        pos[0, 5, 1] = 7.0  # 1 m beyond the outer corridor edge at y = 6
        cfg = GuidanceConfig(w_offroad=1.0, w_speed=0.0, w_accel=0.0)
        assert v_feas(pos, scene, cfg) == pytest.approx(1.0)

    def test_speed_hinge(self):
        scene = two_lane_scene(num_agents=1)
        pos = lane_following_positions(scene, speed=17.0)
        cfg = GuidanceConfig(w_offroad=0.0, w_speed=1.0, w_accel=0.0, v_limit=15.0)
        # every interior step is 2 m/s over the limit
        expected = scene.horizon_steps * (17.0 - 15.0) ** 2
        assert v_feas(pos, scene, cfg) == pytest.approx(expected)

    def test_gradient_matches_finite_differences(self):
        scene = two_lane_scene(num_agents=2, horizon=8)
        cfg = GuidanceConfig(w_offroad=0.7, w_speed=0.3, w_accel=0.1,
                             v_limit=6.0, a_limit=2.0)
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(100):
            pos = lane_following_positions(scene) + rng.normal(0, 1.5, (2, 8, 2))
            _, grad = v_feas_grad(pos, scene, cfg)
            h = 1e-6
            idx = (int(rng.integers(2)), int(rng.integers(8)), int(rng.integers(2)))
            bump = np.zeros_like(pos)
            bump[idx] = h
            fd = (v_feas(pos + bump, scene, cfg) - v_feas(pos - bump, scene, cfg)) / (2 * h)
            scale = max(1.0, abs(fd))
            worst = max(worst, abs(grad[idx] - fd) / scale)
        assert worst < 1e-4


class TestVAdv:
    def test_inside_goal_zero(self):
        scene = two_lane_scene()
        pos = lane_following_positions(scene)
        pos[1] = pos[0] + np.array([1.0, 0.0])  # already within d_goal
        skel = simple_skeleton(scene, lane_following_positions(scene))
        assert v_adv(pos, skel, scene, d_goal=2.0) == 0.0

    def test_constant_gap_squared_hinge(self):
        scene = two_lane_scene()
        ref = lane_following_positions(scene)
        skel = simple_skeleton(scene, ref)
        pos = ref.copy()
        pos[1] = ref[0] + np.array([0.0, 10.0])  # constant 10 m gap to ego ref
        assert v_adv(pos, skel, scene, d_goal=2.0) == pytest.approx(64.0)

    def test_gradient_matches_finite_differences(self):
        scene = two_lane_scene(num_agents=3, horizon=8)
        ref = lane_following_positions(scene)
        skel = simple_skeleton(scene, ref, coalition=(1, 2))
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(100):
            pos = ref + rng.normal(0, 2.0, ref.shape)
            _, grad = v_adv_grad(pos, skel, scene, d_goal=2.0)
            h = 1e-6
            idx = (int(rng.integers(1, 3)), int(rng.integers(8)), int(rng.integers(2)))
            bump = np.zeros_like(pos)
            bump[idx] = h
            fd = (v_adv(pos + bump, skel, scene) - v_adv(pos - bump, skel, scene)) / (2 * h)
            scale = max(1.0, abs(fd))
            worst = max(worst, abs(grad[idx] - fd) / scale)
        assert worst < 1e-3

    def test_ego_edge_uses_reference_not_latent(self):
        scene = two_lane_scene()
        ref = lane_following_positions(scene)
        skel = simple_skeleton(scene, ref)
        pos = ref.copy()
        pos[0] += 100.0  # moving the ego's latent block must not matter
        _, grad = v_adv_grad(pos, skel, scene)
        assert np.all(grad[0] == 0.0)


class TestGuidedDrift:
    def setup_method(self):
        self.scene = two_lane_scene(num_agents=3, horizon=10)
        self.prior = smooth_prior(self.scene)
        self.sched = VpSchedule(K=32)
        ref = lane_following_positions(self.scene)
        self.skel = simple_skeleton(self.scene, ref, coalition=(1,))

    def test_zero_gain_feasible_gives_zero_control(self):
        cfg = GuidanceConfig(eta=0.0)
        ledger = KlLedger()
        x = self.prior.encode(lane_following_positions(self.scene))
        u = guided_drift(x, 5, self.prior, self.sched, self.skel, self.scene, cfg,
                         ledger=ledger)
        assert np.all(u == 0.0)
        assert ledger.total == 0.0

    def test_non_coalition_blocks_exactly_zero(self):
        cfg = GuidanceConfig(eta=2.0, w_offroad=0.0, w_speed=0.0, w_accel=0.0)
        rng = np.random.default_rng(2)
        x = rng.normal(0, 1, self.prior.latent_dim)
        u = guided_drift(x, 10, self.prior, self.sched, self.skel, self.scene, cfg)
        d = self.prior.block_dim
        assert np.all(u[:d] == 0.0)  # ego block
        assert np.all(u[2 * d:] == 0.0)  # non-coalition agent block
        assert np.any(u[d:2 * d] != 0.0)

    def test_doubling_eta_doubles_adversarial_component(self):
        rng = np.random.default_rng(3)
        x = rng.normal(0, 1, self.prior.latent_dim)
        for adv_clip in (None, 3.0):
            us = {}
            for eta in (0.0, 1.0, 2.0):
                cfg = GuidanceConfig(eta=eta, clip_norm=None, adv_clip=adv_clip)
                us[eta] = guided_drift(x, 10, self.prior, self.sched, self.skel,
                                       self.scene, cfg)
            adv1 = us[1.0] - us[0.0]
            adv2 = us[2.0] - us[0.0]
            assert np.allclose(adv2, 2.0 * adv1, atol=1e-12)

    def test_clip_bounds_norm(self):
        cfg = GuidanceConfig(eta=50.0, clip_norm=1.0, adv_clip=None)
        rng = np.random.default_rng(4)
        x = rng.normal(0, 1, self.prior.latent_dim)
        u = guided_drift(x, 10, self.prior, self.sched, self.skel, self.scene, cfg)
        assert np.linalg.norm(u) <= 1.0 + 1e-12

    def test_rejects_pure_noise_index(self):
        cfg = GuidanceConfig()
        # harsh schedule whose terminal gamma_bar sits below the guidance floor
        sched = VpSchedule(K=64, beta_min=0.25, beta_max=0.25)
        assert sched.gamma_bar[-1] <= 1e-6
        x = np.zeros(self.prior.latent_dim)
        with pytest.raises(ValueError):
            guided_drift(x, 64, self.prior, sched, self.skel, self.scene, cfg)


class DegenerateSchedule:
    """f = 0, g = 0 stub: a reverse step must leave the state unchanged."""

    dt = 0.5
    gamma_bar = np.ones(4)

    def drift(self, x, k):
        return np.zeros_like(x)

    def g_squared(self, k):
        return 0.0


class TestReverseStep:
    def test_degenerate_step_is_identity(self):
        gmm = GaussianMixture(weights=[1.0], means=[[0.0, 0.0]], var_diag=[[1.0, 1.0]])
        prior = TrajectoryGmm([AgentPrior.scalar(np.zeros(2), 1.0, gmm)], horizon=1)
        x = np.array([1.0, -2.0])
        out = reverse_step(x, 1, np.zeros(2), prior, DegenerateSchedule(),
                           np.random.default_rng(0))
        assert np.array_equal(out, x)

    def test_fixed_seed_bit_identical(self):
        gmm = GaussianMixture(weights=[1.0], means=[[0.0]], var_diag=[[1.0]])
        prior = TrajectoryGmm([AgentPrior.scalar(np.zeros(1), 1.0, gmm)], horizon=1)
        sched = VpSchedule(K=16)
        x = np.array([0.3])
        a = reverse_step(x, 8, np.zeros(1), prior, sched, np.random.default_rng(9))
        b = reverse_step(x, 8, np.zeros(1), prior, sched, np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_rejects_k_zero(self):
        gmm = GaussianMixture(weights=[1.0], means=[[0.0]], var_diag=[[1.0]])
        prior = TrajectoryGmm([AgentPrior.scalar(np.zeros(1), 1.0, gmm)], horizon=1)
        with pytest.raises(ValueError):
            reverse_step(np.zeros(1), 0, np.zeros(1), prior, VpSchedule(K=16),
                         np.random.default_rng(0))

    def test_full_reverse_matches_prior_mean(self):
        # analytic Gaussian prior: terminal sample mean within 3 SE
        mu, var = 1.5, 0.49
        gmm = GaussianMixture(weights=[1.0], means=[[mu]], var_diag=[[var]])
        sched = VpSchedule(K=150)
        rng = np.random.default_rng(5)
        n = 10_000
        x = rng.standard_normal((n, 1))
        for k in range(sched.K, 0, -1):
            x = reverse_step(x, k, 0.0, gmm, sched, rng)
        se = math.sqrt(var / n)
        assert abs(x.mean() - mu) < 3 * se + 0.01  # small discretization slack
        assert abs(x.var() - var) < 4 * var * math.sqrt(2.0 / n) + 0.01


class TestAnchorInject:
    def test_alpha_one_eps_zero(self):
        sched = VpSchedule(K=64)
        k_a = 20
        x_tilde = np.array([2.0, -1.0, 0.5])
        out = anchor_inject(np.full(3, 9.9), x_tilde, 1.0, k_a, sched,
                            np.random.default_rng(0), eps=np.zeros(3))
        assert np.allclose(out, math.sqrt(sched.gamma_bar[k_a]) * x_tilde, atol=1e-15)

    def test_alpha_zero_is_identity(self):
        sched = VpSchedule(K=64)
        x = np.array([1.0, 2.0])
        out = anchor_inject(x, np.array([5.0, 5.0]), 0.0, 10, sched,
                            np.random.default_rng(0))
        assert np.array_equal(out, x)

    def test_midpoint_blend(self):
        sched = VpSchedule(K=64)
        k_a = 10
        gb = sched.gamma_bar[k_a]
        x_tilde = np.array([2.0 / math.sqrt(gb)])  # projects to exactly 2.0
        out = anchor_inject(np.array([0.0]), x_tilde, 0.5, k_a, sched,
                            np.random.default_rng(0), eps=np.zeros(1))
        assert np.allclose(out, [1.0], atol=1e-12)

    def test_anchor_index_bounds(self):
        sched = VpSchedule(K=64)
        with pytest.raises(ValueError):
            anchor_inject(np.zeros(1), np.zeros(1), 0.5, 0, sched, np.random.default_rng(0))
        with pytest.raises(ValueError):
            anchor_inject(np.zeros(1), np.zeros(1), 0.5, 64, sched, np.random.default_rng(0))


class TestKlLedger:
    def test_girsanov_constant_control_identity(self):
        # constant beta schedule => constant g; ledger equals T c / (2 g^2)
        k_steps = 64
        sched = VpSchedule(K=k_steps, beta_min=0.01, beta_max=0.01)
        g2 = sched.g_squared(1)
        u = np.array([0.3, -0.4])  # |u|^2 = 0.25
        ledger = KlLedger()
        for k in range(k_steps, 0, -1):
            ledger.add(k, u, sched)
        expected = 1.0 * 0.25 / (2.0 * g2)
        assert abs(ledger.total - expected) < 1e-9

    def test_zero_iff_no_control(self):
        sched = VpSchedule(K=16)
        ledger = KlLedger()
        for k in range(16, 0, -1):
            ledger.add(k, np.zeros(3), sched)
        assert ledger.total == 0.0
        ledger.add(5, np.array([1e-3]), sched)
        assert ledger.total > 0.0

    def test_sampled_path_log_ratio_matches_ledger(self):
        # 1-D OU prior (single Gaussian), constant control; the realized
        # Girsanov log-ratio along controlled paths, computed from the
        # recorded transitions, matches the ledger in expectation
        gmm = GaussianMixture(weights=[1.0], means=[[0.8]], var_diag=[[1.0]])
        sched = VpSchedule(K=64)
        rng = np.random.default_rng(6)
        n = 10_000
        u = 0.8
        x = rng.standard_normal((n, 1))
        ledger = KlLedger()
        log_ratio = np.zeros(n)
        for k in range(sched.K, 0, -1):
            ledger.add(k, np.full(1, u), sched)
            gb = sched.gamma_bar[k]
            drift0 = sched.drift(x, k) - sched.g_squared(k) * gmm.score_at(x, gb)
            m0 = x + drift0 * (-sched.dt)
            mu_ctrl = m0 + u * (-sched.dt)
            sigma2 = sched.g_squared(k) * sched.dt
            x_next = mu_ctrl + math.sqrt(sigma2) * rng.standard_normal((n, 1))
            log_ratio += (-(x_next - mu_ctrl) ** 2 + (x_next - m0) ** 2)[:, 0] / (2 * sigma2)
            x = x_next
        assert abs(log_ratio.mean() - ledger.total) < 0.05 * ledger.total


class TestSynthesize:
    def setup_method(self):
        self.scene = two_lane_scene(num_agents=3, horizon=10)
        self.prior = smooth_prior(self.scene, spread=0.5)
        self.sched = VpSchedule(K=48)
        ref = lane_following_positions(self.scene)
        self.skel = simple_skeleton(self.scene, ref, coalition=(1,))

    def test_same_seed_identical(self):
        cfg = GuidanceConfig(eta=1.0)
        a = synthesize(self.scene, self.prior, self.sched, self.skel, cfg,
                       np.random.default_rng(3))
        b = synthesize(self.scene, self.prior, self.sched, self.skel, cfg,
                       np.random.default_rng(3))
        assert np.array_equal(a.trajectory.positions, b.trajectory.positions)
        assert a.ledger.total == b.ledger.total

    def test_anchor_applied_once(self):
        cfg = GuidanceConfig(eta=0.0, anchoring=True, anchor_frac=0.3)
        res = synthesize(self.scene, self.prior, self.sched, self.skel, cfg,
                         np.random.default_rng(4))
        assert res.anchor_applied

    def test_zero_control_matches_prior_moments(self):
        # eta 0, anchoring off, potentials quiet: samples behave like the prior
        cfg = GuidanceConfig(eta=0.0, anchoring=False,
                             w_offroad=0.0, w_speed=0.0, w_accel=0.0)
        rng = np.random.default_rng(5)
        lat = []
        for i in range(300):
            res = synthesize(self.scene, self.prior, self.sched, self.skel, cfg, rng)
            lat.append(res.trajectory.positions[1, -1, 1])
            assert res.ledger.total == 0.0
        lat = np.array(lat)
        # agent 1 terminal lateral: prior is N(4.0, 0.5^2) in meters
        assert abs(lat.mean() - 4.0) < 3 * 0.5 / math.sqrt(len(lat)) + 0.02
        assert abs(lat.std() - 0.5) < 0.1

    def test_masking_locality_bit_exact(self):
        # zero feasibility weights isolate the masked adversarial term:
        # non-coalition agents are bit-identical between eta 0 and eta > 0
        base = GuidanceConfig(eta=0.0, anchoring=False, w_offroad=0.0,
                              w_speed=0.0, w_accel=0.0)
        hot = GuidanceConfig(eta=2.5, anchoring=False, w_offroad=0.0,
                             w_speed=0.0, w_accel=0.0)
        a = synthesize(self.scene, self.prior, self.sched, self.skel, base,
                       np.random.default_rng(7))
        b = synthesize(self.scene, self.prior, self.sched, self.skel, hot,
                       np.random.default_rng(7))
        assert np.array_equal(a.trajectory.positions[0], b.trajectory.positions[0])
        assert np.array_equal(a.trajectory.positions[2], b.trajectory.positions[2])
        assert not np.array_equal(a.trajectory.positions[1], b.trajectory.positions[1])

    def test_report_schema(self):
        cfg = GuidanceConfig(eta=1.0)
        res = synthesize(self.scene, self.prior, self.sched, self.skel, cfg,
                         np.random.default_rng(8), seed=123)
        doc = res.report(cfg, self.sched)
        assert doc["seed"] == 123 and doc["eta"] == 1.0
        assert doc["k_a"] == cfg.resolve_anchor_index(self.sched)
        assert len(doc["per_step"]) == self.sched.K
        assert doc["kl_total"] == pytest.approx(sum(p["kl_inc"] for p in doc["per_step"]))
