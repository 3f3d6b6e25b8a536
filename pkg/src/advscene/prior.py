"""Nominal trajectory prior: a variance-preserving diffusion schedule paired
with an exactly scorable Gaussian-mixture model over joint future trajectories.

The mixture factorizes across agents. Each agent's flattened trajectory
(R^{2H}) is affinely normalized (offset/scale) into latent units in which the
mixture is fitted, so reverse-time sampling can start from N(0, I).
Scores, denoised predictions and denoiser Jacobians are all analytic.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "VpSchedule",
    "GaussianMixture",
    "AgentPrior",
    "TrajectoryGmm",
    "fit_gmm",
    "fit_prior",
    "score",
    "forward_project",
    "denoised_prediction",
    "prior_to_json",
    "prior_from_json",
]

VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class VpSchedule:
    """Variance-preserving noise schedule on K discrete indices over t in [0, 1].

    beta[k] is the per-step noise increment at index k (k = 0..K, linear from
    beta_min to beta_max); gamma_bar[k] is the cumulative product of (1 - beta_j)
    for j <= k. Defaults scale the usual discrete range (1e-4, 0.02) at
    K = 1000 by 1000/K so the terminal marginal stays close to N(0, I) for
    any K.
    """

    K: int
    beta_min: float = None
    beta_max: float = None

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        b0 = 0.1 / self.K if self.beta_min is None else float(self.beta_min)
        # default clamped for very small K, where 20/K would leave (0, 1)
        b1 = min(20.0 / self.K, 0.5) if self.beta_max is None else float(self.beta_max)
        object.__setattr__(self, "beta_min", b0)
        object.__setattr__(self, "beta_max", b1)
        k = np.arange(self.K + 1)
        beta = b0 + (k / self.K) * (b1 - b0)
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("all beta_k must lie in (0, 1)")
        gamma_bar = np.cumprod(1.0 - beta)
        beta.setflags(write=False)
        gamma_bar.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "gamma_bar", gamma_bar)

    @property
    def dt(self) -> float:
        """Magnitude of one reverse step in diffusion time (T = 1)."""
        return 1.0 / self.K

    def g_squared(self, k: int) -> float:
        """Squared diffusion coefficient per unit diffusion time at index k."""
        return float(self.K * self.beta[k])

    def drift(self, x: np.ndarray, k: int) -> np.ndarray:
        """Forward drift f(x, t_k) = -0.5 * beta(t_k) * x per unit time."""
        return -0.5 * self.K * self.beta[k] * x


@dataclass(frozen=True)
class GaussianMixture:
    """Diagonal-covariance Gaussian mixture over R^D with analytic noised
    marginals: under the VP kernel at cumulative product g, component m
    becomes N(sqrt(g) * mu_m, g * var_m + (1 - g) I)."""

    weights: np.ndarray  # (M,)
    means: np.ndarray  # (M, D)
    var_diag: np.ndarray  # (M, D)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        var = np.atleast_2d(np.asarray(self.var_diag, dtype=float))
        if not (w.shape[0] == mu.shape[0] == var.shape[0]):
            raise ValueError("component count mismatch")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be >= 0 and sum to 1")
        if np.any(var <= 0):
            raise ValueError("covariance diagonals must be > 0")
        for arr in (w, mu, var):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "var_diag", var)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _noised_params(self, gamma_bar: float):
        g = float(gamma_bar)
        return math.sqrt(g) * self.means, g * self.var_diag + (1.0 - g)

    def _component_logpdf(self, x: np.ndarray, gamma_bar: float) -> np.ndarray:
        """(..., M) log density of each noised component at x (..., D)."""
        m, v = self._noised_params(gamma_bar)
        x = np.asarray(x, dtype=float)
        diff = x[..., None, :] - m  # (..., M, D)
        quad = np.sum(diff * diff / v, axis=-1)
        norm = np.sum(np.log(2.0 * np.pi * v), axis=-1)
        return -0.5 * (quad + norm) + np.log(self.weights)

    def logpdf(self, x: np.ndarray, gamma_bar: float = 1.0) -> np.ndarray:
        return logsumexp(self._component_logpdf(x, gamma_bar), axis=-1)

    def score_at(self, x: np.ndarray, gamma_bar: float = 1.0) -> np.ndarray:
        """Exact gradient of log p_k at x, stable via log-sum-exp."""
        m, v = self._noised_params(gamma_bar)
        x = np.asarray(x, dtype=float)
        comp = self._component_logpdf(x, gamma_bar)
        resp = np.exp(comp - logsumexp(comp, axis=-1, keepdims=True))  # (..., M)
        per = (m - x[..., None, :]) / v  # (..., M, D)
        return np.sum(resp[..., None] * per, axis=-2)

    def hessian_at(self, x: np.ndarray, gamma_bar: float = 1.0) -> np.ndarray:
        """Exact (D, D) Hessian of log p_k at a single point x (D,)."""
        m, v = self._noised_params(gamma_bar)
        x = np.asarray(x, dtype=float).reshape(-1)
        comp = self._component_logpdf(x, gamma_bar)
        resp = np.exp(comp - logsumexp(comp))
        per = (m - x) / v  # (M, D)
        s = resp @ per
        h = np.einsum("m,mi,mj->ij", resp, per, per) - np.outer(s, s)
        h -= np.diag(resp @ (1.0 / v))
        return h

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comps = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[comps] + eps * np.sqrt(self.var_diag[comps])

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def variance(self) -> np.ndarray:
        """Marginal per-dimension variance of the mixture."""
        second = self.weights @ (self.var_diag + self.means**2)
        return second - self.mean() ** 2


def _dct_matrix(h: int) -> np.ndarray:
    """Orthonormal DCT-II synthesis matrix: series = matrix @ coefficients."""
    from scipy.fft import idct

    return idct(np.eye(h), axis=0, norm="ortho")


def _assemble_dct_codec(sx: np.ndarray, sy: np.ndarray):
    """Decode/encode matrices for the interleaved (x0,y0,x1,y1,...) layout
    with per-channel DCT bases scaled per coefficient."""
    h = sx.shape[0]
    synth = _dct_matrix(h)
    basis = np.zeros((2 * h, 2 * h))
    basis[0::2, :h] = synth * sx[None, :]
    basis[1::2, h:] = synth * sy[None, :]
    inv = np.zeros((2 * h, 2 * h))
    inv[:h, 0::2] = synth.T / sx[:, None]
    inv[h:, 1::2] = synth.T / sy[:, None]
    return basis, inv


@dataclass(frozen=True)
class AgentPrior:
    """One agent's mixture plus its affine latent codec: raw = basis @ z + offset.

    The basis whitens the mixture's coordinates; with the DCT codec the
    diagonal-covariance mixture captures smooth trajectory correlations.
    """

    offset: np.ndarray  # (D,)
    basis: np.ndarray  # (D, D) decode matrix
    inv_basis: np.ndarray  # (D, D)
    gmm: GaussianMixture
    codec: dict = field(default_factory=lambda: {"kind": "dense"})

    def __post_init__(self):
        off = np.asarray(self.offset, dtype=float).reshape(-1)
        basis = np.asarray(self.basis, dtype=float)
        inv = np.asarray(self.inv_basis, dtype=float)
        d = off.shape[0]
        if basis.shape != (d, d) or inv.shape != (d, d):
            raise ValueError("basis must be (D, D) matching the offset")
        for arr in (off, basis, inv):
            arr.setflags(write=False)
        object.__setattr__(self, "offset", off)
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "inv_basis", inv)

    @classmethod
    def scalar(cls, offset: np.ndarray, scale: float, gmm: GaussianMixture) -> "AgentPrior":
        """Convenience codec: raw = z * scale + offset."""
        if scale <= 0:
            raise ValueError("scale must be > 0")
        d = np.asarray(offset).reshape(-1).shape[0]
        eye = np.eye(d)
        return cls(offset=offset, basis=scale * eye, inv_basis=eye / scale, gmm=gmm,
                   codec={"kind": "scalar", "scale": float(scale)})

    @classmethod
    def dct(cls, offset: np.ndarray, sx: np.ndarray, sy: np.ndarray,
            gmm: GaussianMixture) -> "AgentPrior":
        basis, inv = _assemble_dct_codec(np.asarray(sx, float), np.asarray(sy, float))
        return cls(offset=offset, basis=basis, inv_basis=inv, gmm=gmm,
                   codec={"kind": "dct", "sx": [float(v) for v in sx],
                          "sy": [float(v) for v in sy]})


class TrajectoryGmm:
    """Per-agent Gaussian-mixture prior over flattened trajectories.

    The joint density factorizes across agents; the flat latent concatenates
    each agent's R^{2H} block in agent order.
    """

    def __init__(self, agent_priors: list[AgentPrior], horizon: int):
        if not agent_priors:
            raise ValueError("need at least one agent prior")
        dims = {p.gmm.dim for p in agent_priors}
        if len(dims) != 1:
            raise ValueError("all agents must share one block dimension")
        self.agents: tuple[AgentPrior, ...] = tuple(agent_priors)
        self.horizon = int(horizon)
        self.block_dim = dims.pop()
        self.clamp_events = 0

    @property
    def num_agents(self) -> int:
        return len(self.agents)

    @property
    def latent_dim(self) -> int:
        return self.num_agents * self.block_dim

    def _blocks(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x.reshape(x.shape[:-1] + (self.num_agents, self.block_dim))

    def score_at(self, x: np.ndarray, gamma_bar: float = 1.0) -> np.ndarray:
        blocks = self._blocks(x)
        out = np.empty_like(blocks)
        for i, ap in enumerate(self.agents):
            out[..., i, :] = ap.gmm.score_at(blocks[..., i, :], gamma_bar)
        return out.reshape(np.asarray(x).shape)

    def logpdf(self, x: np.ndarray, gamma_bar: float = 1.0) -> np.ndarray:
        blocks = self._blocks(x)
        total = 0.0
        for i, ap in enumerate(self.agents):
            total = total + ap.gmm.logpdf(blocks[..., i, :], gamma_bar)
        return total

    def sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        cols = [ap.gmm.sample(rng, n) for ap in self.agents]
        return np.concatenate(cols, axis=-1)

    def decode(self, x: np.ndarray) -> np.ndarray:
        """Latent vector -> positions (N, H, 2) in meters."""
        blocks = self._blocks(x)
        out = np.empty((self.num_agents, self.horizon, 2))
        for i, ap in enumerate(self.agents):
            out[i] = (ap.basis @ blocks[i] + ap.offset).reshape(self.horizon, 2)
        return out

    def encode(self, positions: np.ndarray) -> np.ndarray:
        """Positions (N, H, 2) -> flat latent vector."""
        pos = np.asarray(positions, dtype=float)
        if pos.shape != (self.num_agents, self.horizon, 2):
            raise ValueError(f"expected positions {(self.num_agents, self.horizon, 2)}, got {pos.shape}")
        cols = [
            ap.inv_basis @ (pos[i].reshape(-1) - ap.offset)
            for i, ap in enumerate(self.agents)
        ]
        return np.concatenate(cols)


# ---------------------------------------------------------------------------
# EM fitting


def _kmeans_pp_init(data: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centers = [data[rng.integers(n)]]
    for _ in range(1, m):
        d2 = np.min(
            np.sum((data[:, None, :] - np.array(centers)[None]) ** 2, axis=-1), axis=1
        )
        total = d2.sum()
        if total <= 0:
            centers.append(data[rng.integers(n)])
            continue
        centers.append(data[rng.choice(n, p=d2 / total)])
    return np.array(centers)


def fit_gmm(data: np.ndarray, m: int, rng: np.random.Generator,
            max_iter: int = 100, tol: float = 1e-6) -> tuple[GaussianMixture, int]:
    """EM fit of a diagonal-covariance mixture; deterministic given rng state.

    Returns the mixture and the number of covariance entries clamped at the
    1e-8 floor. The mean log-likelihood is non-decreasing across iterations.
    """
    data = np.asarray(data, dtype=float)
    n, d = data.shape
    if n < m:
        raise ValueError("need at least one sample per component")
    means = _kmeans_pp_init(data, m, rng)
    var = np.tile(np.maximum(data.var(axis=0), VAR_FLOOR), (m, 1))
    weights = np.full(m, 1.0 / m)
    clamped = 0
    prev_ll = -np.inf
    for _ in range(max_iter):
        # E step
        diff = data[:, None, :] - means[None]
        log_comp = -0.5 * (
            np.sum(diff * diff / var[None], axis=-1)
            + np.sum(np.log(2.0 * np.pi * var), axis=-1)[None]
        ) + np.log(weights)[None]
        log_norm = logsumexp(log_comp, axis=1, keepdims=True)
        resp = np.exp(log_comp - log_norm)
        ll = float(np.mean(log_norm))
        # M step
        nk = resp.sum(axis=0) + 1e-300
        weights = nk / n
        means = (resp.T @ data) / nk[:, None]
        second = (resp.T @ (data * data)) / nk[:, None]
        var = second - means**2
        low = var < VAR_FLOOR
        clamped += int(low.sum())
        var = np.maximum(var, VAR_FLOOR)
        if ll - prev_ll < tol and np.isfinite(prev_ll):
            break
        prev_ll = ll
    weights = weights / weights.sum()
    return GaussianMixture(weights=weights, means=means, var_diag=var), clamped


def fit_prior(rollouts: list, m: int, seed: int = 0, coeff_floor: float = 0.02) -> TrajectoryGmm:
    """Fit the per-agent trajectory mixture from nominal rollouts.

    Each agent's trajectories are mapped into per-channel DCT coefficients
    scaled by their empirical spread (floored at coeff_floor meters), and a
    diagonal-covariance mixture is EM-fitted in those whitened coordinates.
    Requires at least 10*m rollouts, all with the same horizon. Degenerate
    covariance entries are clamped at 1e-8 and reported via a warning.
    """
    if len(rollouts) < 10 * m:
        raise ValueError(f"need >= {10 * m} rollouts to fit {m} components, got {len(rollouts)}")
    shapes = {r.positions.shape for r in rollouts}
    if len(shapes) != 1:
        raise ValueError("all rollouts must share one (N, H) shape")
    n_agents, horizon, _ = shapes.pop()
    rng = np.random.default_rng(seed)
    stack = np.stack([r.positions for r in rollouts])  # (R, N, H, 2)
    synth = _dct_matrix(horizon)
    agent_priors = []
    total_clamped = 0
    for i in range(n_agents):
        flat = stack[:, i].reshape(len(rollouts), 2 * horizon)
        offset = flat.mean(axis=0)
        centered = flat - offset
        cx = centered[:, 0::2] @ synth  # (R, H) DCT coefficients per channel
        cy = centered[:, 1::2] @ synth
        sx = np.maximum(cx.std(axis=0), coeff_floor)
        sy = np.maximum(cy.std(axis=0), coeff_floor)
        z = np.concatenate([cx / sx, cy / sy], axis=1)
        gmm, clamped = fit_gmm(z, m, rng)
        total_clamped += clamped
        agent_priors.append(AgentPrior.dct(offset=offset, sx=sx, sy=sy, gmm=gmm))
    prior = TrajectoryGmm(agent_priors, horizon)
    prior.clamp_events = total_clamped
    if total_clamped:
        warnings.warn(f"{total_clamped} covariance entries clamped at {VAR_FLOOR}")
    return prior


# ---------------------------------------------------------------------------
# Diffusion operations


def score(x: np.ndarray, k: int, prior, sched: VpSchedule) -> np.ndarray:
    """Exact gradient of the noised log marginal at diffusion index k."""
    if not 0 <= k <= sched.K:
        raise ValueError(f"diffusion index {k} outside [0, {sched.K}]")
    return prior.score_at(x, sched.gamma_bar[k])


def forward_project(x0: np.ndarray, k_a: int, eps: np.ndarray, sched: VpSchedule) -> np.ndarray:
    """Project a clean latent to index k_a: sqrt(gbar) x0 + sqrt(1 - gbar) eps."""
    if not 0 <= k_a <= sched.K:
        raise ValueError(f"diffusion index {k_a} outside [0, {sched.K}]")
    g = sched.gamma_bar[k_a]
    return math.sqrt(g) * np.asarray(x0, float) + math.sqrt(1.0 - g) * np.asarray(eps, float)


def denoised_prediction(x: np.ndarray, k: int, prior, sched: VpSchedule) -> np.ndarray:
    """Posterior-mean estimate of the clean latent from a noised one
    (x + (1 - gbar) * score) / sqrt(gbar). Exact for this analytic prior."""
    g = sched.gamma_bar[k] if 0 <= k <= sched.K else None
    if g is None or g <= 1e-6:
        raise ValueError("denoised prediction needs gamma_bar > 1e-6")
    return (np.asarray(x, float) + (1.0 - g) * prior.score_at(x, g)) / math.sqrt(g)


# ---------------------------------------------------------------------------
# Serialization (exact round trip)


def prior_to_json(prior: TrajectoryGmm, sched: VpSchedule | None = None) -> dict:
    doc = {
        "H": prior.horizon,
        "N": prior.num_agents,
        "agents": [
            {
                "offset": [float(v) for v in ap.offset],
                "codec": (ap.codec if ap.codec.get("kind") != "dense"
                          else {"kind": "dense", "basis": [[float(v) for v in row] for row in ap.basis],
                                "inv_basis": [[float(v) for v in row] for row in ap.inv_basis]}),
                "M": ap.gmm.n_components,
                "components": [
                    {
                        "weight": float(ap.gmm.weights[m]),
                        "mean": [float(v) for v in ap.gmm.means[m]],
                        "var_diag": [float(v) for v in ap.gmm.var_diag[m]],
                    }
                    for m in range(ap.gmm.n_components)
                ],
            }
            for ap in prior.agents
        ],
    }
    if sched is not None:
        doc["schedule"] = {"K": sched.K, "beta_min": sched.beta_min, "beta_max": sched.beta_max}
    return doc


def prior_from_json(doc: dict) -> tuple[TrajectoryGmm, VpSchedule | None]:
    agent_priors = []
    for entry in doc["agents"]:
        comps = entry["components"]
        gmm = GaussianMixture(
            weights=np.array([c["weight"] for c in comps]),
            means=np.array([c["mean"] for c in comps]),
            var_diag=np.array([c["var_diag"] for c in comps]),
        )
        offset = np.array(entry["offset"])
        codec = entry["codec"]
        if codec["kind"] == "scalar":
            ap = AgentPrior.scalar(offset, codec["scale"], gmm)
        elif codec["kind"] == "dct":
            ap = AgentPrior.dct(offset, np.array(codec["sx"]), np.array(codec["sy"]), gmm)
        else:
            ap = AgentPrior(offset=offset, basis=np.array(codec["basis"]),
                            inv_basis=np.array(codec["inv_basis"]), gmm=gmm)
        agent_priors.append(ap)
    prior = TrajectoryGmm(agent_priors, int(doc["H"]))
    sched = None
    if "schedule" in doc:
        s = doc["schedule"]
        sched = VpSchedule(K=int(s["K"]), beta_min=s["beta_min"], beta_max=s["beta_max"])
    return prior, sched
