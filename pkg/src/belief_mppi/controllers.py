"""Sampling-based receding-horizon controllers behind one interface.

Three variants share the exponentially-weighted control update:
  * "mppi"  - deterministic rollouts, no safety shield;
  * "smppi" - deterministic rollouts plus a discrete CBF violation penalty;
  * "bss"   - Monte-Carlo belief rollouts with the penalty evaluated on the
              belief-space track DCBF, so chance constraints are respected
              under process noise.
"""

from dataclasses import dataclass, field

import numpy as np

from . import streams
from .belief import (
    CovSubset,
    DEFAULT_SUBSET,
    VehicleBeliefContext,
    gaussian_cloud,
    propagate_mc_batch,
    propagate_particles_batch,
)
from .constraints import (
    SafetyParams,
    allocate_budget,
    backoff_gaussian,
    penalty_values,
    track_dcbf_values,
)
from .dynamics import (
    CONTROL_DIM,
    IDX_EY,
    IDX_VX,
    NoiseModel,
    Track,
    VehicleParams,
    psd_factor,
    step_array,
)

CONTROLLER_KINDS = ("mppi", "smppi", "bss")


class AllRolloutsInvalid(RuntimeError):
    """Every sampled trajectory left the frame / produced a non-finite cost."""


@dataclass(frozen=True)
class ControlBounds:
    delta_max: float = 0.35
    throttle_min: float = -1.0
    throttle_max: float = 1.0

    def __post_init__(self):
        if self.delta_max <= 0.0 or self.throttle_max <= self.throttle_min:
            raise ValueError("invalid control bounds")

    @property
    def lower(self):
        return np.array([-self.delta_max, self.throttle_min])

    @property
    def upper(self):
        return np.array([self.delta_max, self.throttle_max])

    def clamp(self, u):
        return np.clip(u, self.lower, self.upper)


@dataclass(eq=False)
class MppiConfig:
    kind: str = "bss"
    samples: int = 256          # M sampled control sequences
    horizon: int = 20           # K steps
    temperature: float = 1.0    # lambda
    control_cost_weight: float = 0.1  # gamma
    sigma_eps: np.ndarray = None      # control sampling covariance (2x2)
    bounds: ControlBounds = field(default_factory=ControlBounds)
    inner_samples: int = 16     # N, belief propagation samples (bss only)
    # Keep the particle cloud across horizon steps instead of re-projecting
    # onto a Gaussian each step (preserves non-Gaussianity).
    persist_particles: bool = False

    def __post_init__(self):
        if self.kind not in CONTROLLER_KINDS:
            raise ValueError(f"unknown controller kind {self.kind!r}")
        if self.samples < 1 or self.horizon < 1:
            raise ValueError("samples and horizon must be >= 1")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be > 0")
        if self.kind == "bss" and self.inner_samples < 2:
            raise ValueError("bss controller needs inner_samples >= 2")
        if self.sigma_eps is None:
            self.sigma_eps = np.diag([0.15**2, 0.35**2])
        sig = np.atleast_2d(np.asarray(self.sigma_eps, dtype=float))
        if sig.shape == (1, CONTROL_DIM):
            sig = np.diag(sig[0])
        if sig.shape != (CONTROL_DIM, CONTROL_DIM):
            raise ValueError("sigma_eps must be a 2x2 covariance or a diagonal pair")
        # PSD is enough: a zero covariance degenerates to the nominal plan and
        # the control-cost term then uses the pseudo-inverse.
        psd_factor(sig)
        self.sigma_eps = sig
        self.precision = np.linalg.pinv(sig)


@dataclass(eq=False)
class CostSpec:
    """State-dependent running cost: quadratic tracking + collision indicator
    + (for shielded controllers) the safety-condition violation cost."""

    q_diag: np.ndarray = None
    v_goal: float = 6.0
    obstacle_penalty: float = 10000.0   # added per step outside the lane
    terminal_scale: float = 1.0         # phi(x) = scale * q(x)
    safety: SafetyParams = field(default_factory=SafetyParams)
    backoff: float = None  # nu; default: gaussian quantile at 0.05 split over 2 bounds
    # Optional covariance-aware running-cost hook for belief rollouts:
    # called as hook(means (M,8), sigma_y (M,)) -> (M,) extra cost per step.
    # Must be picklable (module level) to survive worker processes.
    belief_stage_cost: callable = None

    def __post_init__(self):
        if self.q_diag is None:
            self.q_diag = np.array([6.0, 0.0, 0.02, 0.0, 0.0, 0.2, 0.1, 0.0])
        if self.backoff is None:
            self.backoff = backoff_gaussian(allocate_budget(0.05, 2)[0])
        self.q_diag = np.asarray(self.q_diag, dtype=float)
        if self.q_diag.shape != (8,) or np.any(self.q_diag < 0.0):
            raise ValueError("q_diag must be 8 nonnegative weights")
        if self.obstacle_penalty < 0.0:
            raise ValueError("obstacle_penalty must be >= 0")

    def goal_state(self):
        g = np.zeros(8)
        g[IDX_VX] = self.v_goal
        return g


@dataclass
class ControlPlan:
    controls: np.ndarray  # (K, 2)

    def __post_init__(self):
        self.controls = np.asarray(self.controls, dtype=float)
        if self.controls.ndim != 2 or self.controls.shape[1] != CONTROL_DIM:
            raise ValueError("plan must have shape (K, 2)")

    @classmethod
    def zeros(cls, horizon: int):
        return cls(np.zeros((horizon, CONTROL_DIM)))

    def shifted(self):
        """Warm start: drop the executed entry, repeat the final one."""
        return ControlPlan(np.concatenate([self.controls[1:], self.controls[-1:]]))


@dataclass
class RolloutBatch:
    controls: np.ndarray       # (M, K, 2) clamped samples fed to the dynamics
    perturbations: np.ndarray  # (M, K, 2) raw (unclamped) epsilon draws
    costs: np.ndarray = None   # (M,), +inf marks invalid rollouts


def sample_controls(plan: ControlPlan, sigma_eps, n_samples: int, rng,
                    bounds: ControlBounds) -> RolloutBatch:
    """Perturb the nominal plan with N(0, sigma_eps) noise, clamped to bounds.

    The raw perturbations are kept: the trajectory cost charges the
    unclamped control against the sampling covariance.
    """
    k = plan.controls.shape[0]
    factor = psd_factor(np.atleast_2d(np.asarray(sigma_eps, dtype=float)))
    eps = rng.standard_normal((n_samples, k, CONTROL_DIM)) @ factor.T
    u = bounds.clamp(plan.controls[None, :, :] + eps)
    return RolloutBatch(controls=u, perturbations=eps)


def mppi_weights(costs, temperature: float):
    """Exponential utility weights with min-cost baseline subtraction."""
    costs = np.asarray(costs, dtype=float)
    finite = np.isfinite(costs)
    if not finite.any():
        raise AllRolloutsInvalid("no rollout produced a finite cost")
    baseline = costs[finite].min()
    return np.exp(-(costs - baseline) / temperature)


def mppi_update(batch: RolloutBatch, temperature: float, bounds: ControlBounds) -> ControlPlan:
    """Cost-weighted average of the sampled control sequences."""
    w = mppi_weights(batch.costs, temperature)
    v = np.einsum("m,mkc->kc", w, batch.controls) / w.sum()
    return ControlPlan(bounds.clamp(v))


@dataclass(eq=False)
class RolloutContext:
    """Read-only bundle shared by all rollouts of one control iteration."""

    model: VehicleParams   # controller-side model (coarse step, Euler)
    track: Track
    cost: CostSpec
    noise: NoiseModel = None
    subset: CovSubset = field(default_factory=lambda: DEFAULT_SUBSET)

    def __post_init__(self):
        if self.noise is None:
            self.noise = NoiseModel(np.zeros((3, 3)))

    def belief_context(self):
        return VehicleBeliefContext(self.model, self.track, self.noise, self.subset)


def stage_cost_values(x, cost: CostSpec, half_width: float):
    """q(x): quadratic tracking error plus the lane-violation indicator."""
    dx = x - cost.goal_state()
    quad = np.square(dx) @ cost.q_diag
    outside = np.abs(x[..., IDX_EY]) > half_width
    return quad + cost.obstacle_penalty * outside


def control_cost_values(nominal, perturbations, precision, weight: float):
    """Sum over steps of gamma * v_k' P (v_k + eps_k^m), per sample."""
    if weight == 0.0:
        return np.zeros(perturbations.shape[0])
    u_raw = nominal[None, :, :] + perturbations
    return weight * np.einsum("kc,cd,mkd->m", nominal, precision, u_raw)


def _finite_or_zero(x):
    bad = ~np.isfinite(x)
    if bad.any():
        x = np.where(bad, 0.0, x)
    return x


def rollout_mppi(x0, batch: RolloutBatch, nominal, ctx: RolloutContext,
                 precision=None, cost_weight: float = 0.0):
    """Deterministic-dynamics trajectory costs (terminal + running + control)."""
    return _rollout("mppi", np.asarray(x0, dtype=float), None, batch, nominal, ctx,
                    precision, cost_weight)


def rollout_smppi(x0, batch: RolloutBatch, nominal, ctx: RolloutContext,
                  precision=None, cost_weight: float = 0.0):
    """rollout_mppi plus the shield penalty on the deterministic track DCBF."""
    return _rollout("smppi", np.asarray(x0, dtype=float), None, batch, nominal, ctx,
                    precision, cost_weight)


def rollout_bss(mean0, cov0, batch: RolloutBatch, nominal, ctx: RolloutContext,
                rng, inner_samples: int, precision=None, cost_weight: float = 0.0,
                persist_particles: bool = False):
    """Belief-space trajectory costs with Monte-Carlo moment propagation."""
    return _rollout("bss", np.asarray(mean0, dtype=float),
                    np.asarray(cov0, dtype=float), batch, nominal, ctx,
                    precision, cost_weight, rng, inner_samples, persist_particles)


def _rollout(kind, x0, cov0, batch, nominal, ctx, precision, cost_weight,
             rng=None, inner_samples=0, persist_particles=False):
    m, k_horizon, _ = batch.controls.shape
    u = batch.controls
    half_width = ctx.track.half_width
    safety = ctx.cost.safety
    nu = ctx.cost.backoff
    shielded = kind in ("smppi", "bss")

    if precision is None:
        precision = np.zeros((CONTROL_DIM, CONTROL_DIM))
    total = control_cost_values(np.asarray(nominal, dtype=float),
                                batch.perturbations, precision, cost_weight)
    dead = np.zeros(m, dtype=bool)

    if kind == "bss":
        if rng is None or inner_samples < 2:
            raise ValueError("bss rollouts need an rng and inner_samples >= 2")
        bctx = ctx.belief_context()
        p_ey = ctx.subset.position(IDX_EY)
        t = len(ctx.subset)
        means = np.repeat(x0[None, :], m, axis=0)
        covs = np.repeat(cov0[None, :, :], m, axis=0)
        # One draw covers the whole horizon (state perturbations + process noise).
        z_all = rng.standard_normal(
            (k_horizon, m, inner_samples, t + bctx.noise_dim)
        )
        cloud = None
        if persist_particles:
            cloud = gaussian_cloud(means, covs, z_all[0][:, :, :t],
                                   ctx.subset.indices)
        sigma_y = np.sqrt(np.clip(covs[:, p_ey, p_ey], 0.0, None))
        h_cur = track_dcbf_values(means[:, IDX_EY], sigma_y, half_width, nu)
        h_prev = h_cur
        hook = ctx.cost.belief_stage_cost
        for k in range(k_horizon):
            total += stage_cost_values(means, ctx.cost, half_width)
            if hook is not None:
                total += hook(means, sigma_y)
            if k > 0:
                total += penalty_values(h_cur, h_prev, safety)
            if persist_particles:
                means, covs, ok, cloud = propagate_particles_batch(
                    cloud, u[:, k], inner_samples, rng, bctx, normals=z_all[k]
                )
            else:
                means, covs, ok = propagate_mc_batch(
                    means, covs, u[:, k], inner_samples, rng, bctx,
                    normals=z_all[k]
                )
            means = _finite_or_zero(means)
            covs = _finite_or_zero(covs)
            dead |= ~ok
            sigma_y = np.sqrt(np.clip(covs[:, p_ey, p_ey], 0.0, None))
            h_prev, h_cur = h_cur, track_dcbf_values(
                means[:, IDX_EY], sigma_y, half_width, nu
            )
        total += ctx.cost.terminal_scale * stage_cost_values(means, ctx.cost, half_width)
        total += penalty_values(h_cur, h_prev, safety)
    else:
        x = np.repeat(x0[None, :], m, axis=0)
        if shielded:
            h_cur = track_dcbf_values(x[:, IDX_EY], 0.0, half_width, nu)
            h_prev = h_cur
        for k in range(k_horizon):
            total += stage_cost_values(x, ctx.cost, half_width)
            if shielded and k > 0:
                total += penalty_values(h_cur, h_prev, safety)
            x, ok = step_array(x, u[:, k], None, ctx.model, ctx.track)
            x = _finite_or_zero(x)
            dead |= ~ok
            if shielded:
                h_prev, h_cur = h_cur, track_dcbf_values(
                    x[:, IDX_EY], 0.0, half_width, nu
                )
        total += ctx.cost.terminal_scale * stage_cost_values(x, ctx.cost, half_width)
        if shielded:
            total += penalty_values(h_cur, h_prev, safety)

    total[dead] = np.inf
    return total


class Controller:
    """Receding-horizon sampling controller with deterministic substreams.

    Each control iteration draws its control perturbations (and, for the
    belief-space variant, its propagation samples) from substreams keyed by
    (seed, *run_path, domain, iteration), so closed-loop runs are exactly
    reproducible regardless of scheduling or worker count.
    """

    def __init__(self, config: MppiConfig, cost: CostSpec, model: VehicleParams,
                 track: Track, noise: NoiseModel = None, subset: CovSubset = None,
                 seed: int = 0, run_path=()):
        self.config = config
        self.ctx = RolloutContext(
            model=model,
            track=track,
            cost=cost,
            noise=noise,
            subset=subset if subset is not None else DEFAULT_SUBSET,
        )
        self.seed = int(seed)
        self.run_path = tuple(int(p) for p in run_path)
        self.plan = ControlPlan.zeros(config.horizon)
        self.iteration = 0
        t = len(self.ctx.subset)
        self._zero_cov = np.zeros((t, t))

    def _stream(self, domain):
        return streams.substream(self.seed, *self.run_path, domain, self.iteration)

    def control_step(self, state, cov=None):
        """One receding-horizon iteration.

        state: current (8,) state array (the mean, for the belief variant);
        cov: tracked-subset covariance for the belief variant, defaulting to
        zero (perfectly known current state).
        Returns (applied_control (2,), next_plan) and advances the warm start.
        """
        cfg = self.config
        x0 = np.asarray(state, dtype=float)
        rng_ctrl = self._stream(streams.DOMAIN_CONTROL)
        batch = sample_controls(self.plan, cfg.sigma_eps, cfg.samples, rng_ctrl,
                                cfg.bounds)
        nominal = self.plan.controls

        if cfg.kind == "bss":
            cov0 = self._zero_cov if cov is None else np.asarray(cov, dtype=float)
            batch.costs = rollout_bss(
                x0, cov0, batch, nominal, self.ctx,
                rng=self._stream(streams.DOMAIN_BELIEF),
                inner_samples=cfg.inner_samples,
                precision=cfg.precision, cost_weight=cfg.control_cost_weight,
                persist_particles=cfg.persist_particles,
            )
        elif cfg.kind == "smppi":
            batch.costs = rollout_smppi(x0, batch, nominal, self.ctx,
                                        precision=cfg.precision,
                                        cost_weight=cfg.control_cost_weight)
        else:
            batch.costs = rollout_mppi(x0, batch, nominal, self.ctx,
                                       precision=cfg.precision,
                                       cost_weight=cfg.control_cost_weight)

        optimized = mppi_update(batch, cfg.temperature, cfg.bounds)
        self.plan = optimized.shifted()
        self.iteration += 1
        return optimized.controls[0].copy(), self.plan
