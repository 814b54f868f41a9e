"""Belief-space states (mean + covariance) and their propagation.

The covariance is tracked over a configurable subset of state components;
propagation draws state samples and process noise, pushes them through the
dynamics and re-estimates the first two moments (Gaussian re-projection).
"""

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .dynamics import (
    IDX_EPSI,
    IDX_EY,
    IDX_S,
    IDX_VY,
    IDX_YAW_RATE,
    FactorizationFailure,
    NoiseModel,
    Track,
    VehicleParams,
    curvature,
    psd_factor,
    sample_noise,
    step_array,
)


class DegenerateSamples(RuntimeError):
    """All (or all but one) propagated samples were non-finite."""


class DimensionMismatch(ValueError):
    pass


class UntrackedComponent(ValueError):
    """Requested state component is not part of the tracked covariance subset."""


@dataclass(frozen=True)
class CovSubset:
    """Ordered state-component indices whose covariance is tracked."""

    indices: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx):
            raise ValueError("covariance subset indices must be unique")
        if any(i < 0 for i in idx):
            raise ValueError("covariance subset indices must be >= 0")
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.indices)

    def position(self, state_index: int) -> int:
        try:
            return self.indices.index(state_index)
        except ValueError:
            raise UntrackedComponent(
                f"state component {state_index} is not tracked"
            ) from None


DEFAULT_SUBSET = CovSubset((IDX_VY, IDX_YAW_RATE, IDX_EPSI, IDX_EY))


def full_subset(dim: int) -> CovSubset:
    return CovSubset(tuple(range(dim)))


@dataclass
class BeliefState:
    """Gaussian summary of the state distribution over a tracked subset."""

    mean: np.ndarray
    cov: np.ndarray
    subset: CovSubset = None

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if self.subset is None:
            self.subset = full_subset(self.mean.size)
        if max(self.subset.indices) >= self.mean.size:
            raise DimensionMismatch("subset index exceeds state dimension")
        t = len(self.subset)
        if self.cov.shape != (t, t):
            raise DimensionMismatch(
                f"covariance shape {self.cov.shape} does not match subset size {t}"
            )
        self.cov = 0.5 * (self.cov + self.cov.T)

    def validate(self, tol: float = 1e-10):
        w = np.linalg.eigvalsh(self.cov)
        if w.min() < -tol:
            raise FactorizationFailure(f"belief covariance eigenvalue {w.min():.3e} < -{tol:g}")
        return self


@dataclass
class AugmentedBeliefState:
    """Two consecutive beliefs: z = (current z_hat_k, previous z_hat_{k-1})."""

    current: BeliefState
    previous: BeliefState


def augment(current: BeliefState, previous: BeliefState = None) -> AugmentedBeliefState:
    """Pair consecutive beliefs; at k=0 the previous belief defaults to the current one."""
    return AugmentedBeliefState(current, previous if previous is not None else current)


def lateral_std(belief: BeliefState) -> float:
    """Standard deviation of the lateral offset; tiny negative variances clamp to 0."""
    p = belief.subset.position(IDX_EY)
    var = float(belief.cov[p, p])
    if var < -1e-10:
        raise FactorizationFailure(f"lateral variance {var:.3e} below -1e-10")
    return float(np.sqrt(max(var, 0.0)))


@dataclass(eq=False)
class VehicleBeliefContext:
    """Dynamics + process-noise bundle used by Monte-Carlo belief propagation."""

    params: VehicleParams
    track: Track
    noise: NoiseModel
    subset: CovSubset = field(default_factory=lambda: DEFAULT_SUBSET)

    def apply(self, x, u, w):
        return step_array(x, u, w, self.params, self.track, self.noise.channels)

    def sample_noise(self, rng, size):
        return sample_noise(rng, self.noise, size)

    @property
    def noise_dim(self):
        return len(self.noise.channels)

    def noise_from_normals(self, z):
        return z @ self.noise.factor.T


@dataclass(eq=False)
class LinearBeliefContext:
    """x+ = A x + B u + w with Gaussian w; exercised by the propagation oracle tests."""

    a: np.ndarray
    b: np.ndarray
    noise_cov: np.ndarray

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=float))
        self.b = np.atleast_2d(np.asarray(self.b, dtype=float))
        self.noise_cov = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        self._factor = psd_factor(self.noise_cov)

    def apply(self, x, u, w):
        x1 = x @ self.a.T + np.asarray(u, dtype=float) @ self.b.T + w
        return x1, np.ones(x1.shape[:-1], dtype=bool)

    def sample_noise(self, rng, size):
        shape = tuple(np.atleast_1d(size)) + (self.noise_cov.shape[0],)
        return rng.standard_normal(shape) @ self._factor.T

    @property
    def noise_dim(self):
        return self.noise_cov.shape[0]

    def noise_from_normals(self, z):
        return z @ self._factor.T


def propagate_mc(belief: BeliefState, control, n_samples: int, rng, ctx) -> BeliefState:
    """One Monte-Carlo propagation step of the belief.

    Draws `n_samples` states from the belief (restricted to the tracked
    subset), one independent process-noise realization per sample, pushes
    each through the dynamics and returns the empirical mean and unbiased
    covariance. Deterministic for a fixed generator state.
    """
    if n_samples < 2:
        raise ValueError("propagate_mc needs n_samples >= 2")
    idx = list(belief.subset.indices)
    factor = psd_factor(belief.cov)
    z = rng.standard_normal((n_samples, len(idx)))
    x = np.tile(belief.mean, (n_samples, 1))
    x[:, idx] += z @ factor.T
    w = ctx.sample_noise(rng, (n_samples,))
    x1, ok = ctx.apply(x, np.asarray(control, dtype=float), w)
    ok = ok & np.all(np.isfinite(x1), axis=-1)
    if np.count_nonzero(ok) < 2:
        raise DegenerateSamples("fewer than two finite propagated samples")
    xv = x1[ok]
    # Reduce along the contiguous axis: pairwise summation keeps a degenerate
    # (zero-spread) belief collapsed exactly for power-of-two sample counts.
    mean = np.ascontiguousarray(xv.T).mean(axis=1)
    dev = xv[:, idx] - mean[idx]
    cov = dev.T @ dev / (xv.shape[0] - 1)
    return BeliefState(mean, 0.5 * (cov + cov.T), belief.subset)


def propagate_linear(belief: BeliefState, a, b, u, noise_cov) -> BeliefState:
    """Exact linear-Gaussian propagation: mean <- A m + B u, cov <- A S A' + W."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    noise_cov = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    d = belief.mean.size
    if len(belief.subset) != d:
        raise DimensionMismatch("propagate_linear requires a full covariance subset")
    if a.shape != (d, d) or noise_cov.shape != (d, d):
        raise DimensionMismatch("A / noise covariance shape mismatch")
    if b.shape[0] != d or b.shape[1] != u.size:
        raise DimensionMismatch("B / input shape mismatch")
    mean = a @ belief.mean + b @ u
    cov = a @ belief.cov @ a.T + noise_cov
    return BeliefState(mean, 0.5 * (cov + cov.T), belief.subset)


def psd_factor_batch(covs: np.ndarray) -> np.ndarray:
    """Batched lower-triangular PSD factors; see _psd_chol_kernel."""
    covs = np.ascontiguousarray(np.asarray(covs, dtype=float))
    out = np.empty_like(covs)
    _psd_chol_kernel(covs, out)
    return out


@numba.njit(cache=True)
def _psd_chol_kernel(covs, out):
    # Cholesky with zero-pivot clamping: exact for singular (e.g. all-zero)
    # covariances, tolerant of small negative roundoff eigenvalues.
    m, t, _ = covs.shape
    for i in range(m):
        for r in range(t):
            for c in range(t):
                out[i, r, c] = 0.0
        for c in range(t):
            acc = covs[i, c, c]
            for k in range(c):
                acc -= out[i, c, k] * out[i, c, k]
            if acc <= 1e-300:
                continue  # column stays zero: degenerate direction
            piv = math.sqrt(acc)
            out[i, c, c] = piv
            for r in range(c + 1, t):
                acc = covs[i, r, c]
                for k in range(c):
                    acc -= out[i, r, k] * out[i, c, k]
                out[i, r, c] = acc / piv


@numba.njit(cache=True)
def _build_samples_kernel(means, factors, z, idx, out):
    # out[m, n] = means[m] with the tracked subset perturbed by factors @ z.
    m, n, t = z.shape
    d = means.shape[1]
    for i in range(m):
        for j in range(n):
            for c in range(d):
                out[i, j, c] = means[i, c]
            for a in range(t):
                acc = 0.0
                for b in range(t):
                    acc += factors[i, a, b] * z[i, j, b]
                out[i, j, idx[a]] += acc


@numba.njit(cache=True)
def _moments_kernel(x1, idx, buf, mean_out, cov_out):
    # Mean via pairwise (tree) summation: a zero-spread batch collapses back
    # onto its mean bit-exactly for power-of-two sample counts. Covariance is
    # the unbiased estimate over the tracked subset, accumulated in fixed order.
    m, n, d = x1.shape
    t = idx.shape[0]
    for i in range(m):
        for c in range(d):
            for j in range(n):
                buf[j] = x1[i, j, c]
            width = n
            while width > 1:
                half = width // 2
                for j in range(half):
                    buf[j] = buf[2 * j] + buf[2 * j + 1]
                if width % 2 == 1:
                    buf[half] = buf[width - 1]
                    width = half + 1
                else:
                    width = half
            mean_out[i, c] = buf[0] / n
        for a in range(t):
            for b in range(a, t):
                acc = 0.0
                ca = idx[a]
                cb = idx[b]
                ma = mean_out[i, ca]
                mb = mean_out[i, cb]
                for j in range(n):
                    acc += (x1[i, j, ca] - ma) * (x1[i, j, cb] - mb)
                val = acc / (n - 1)
                cov_out[i, a, b] = val
                cov_out[i, b, a] = val


def propagate_mc_batch(means, covs, controls, n_samples, rng, ctx,
                       normals=None):
    """Vectorized propagate_mc over a batch of M beliefs sharing one context.

    means: (M, d); covs: (M, t, t); controls: (M, n_u). Returns
    (means', covs', ok) where ok flags beliefs whose propagated mean is
    finite and still inside the curvilinear frame (when applicable).
    `normals` optionally supplies the (M, N, t + noise_dim) standard-normal
    block (state perturbations first) so a caller can draw a whole horizon
    in one request.
    """
    means = np.ascontiguousarray(np.asarray(means, dtype=float))
    m, d = means.shape
    idx = np.array(ctx.subset.indices if hasattr(ctx, "subset") else range(d),
                   dtype=np.int64)
    t = idx.shape[0]
    factors = psd_factor_batch(covs)
    if normals is None:
        normals = rng.standard_normal((m, n_samples, t + ctx.noise_dim))
    z = np.ascontiguousarray(normals[:, :, :t])
    x = np.empty((m, n_samples, d))
    _build_samples_kernel(means, factors, z, idx, x)
    mean1, cov1, ok, _ = _propagate_particles(x, controls, normals[:, :, t:],
                                              idx, ctx)
    return mean1, cov1, ok


def gaussian_cloud(means, covs, z, idx=None):
    """Per-belief particle cloud: means (M,d) + factors(covs) @ z (M,N,t)."""
    means = np.ascontiguousarray(np.asarray(means, dtype=float))
    m, d = means.shape
    if idx is None:
        idx = np.arange(covs.shape[-1], dtype=np.int64)
    factors = psd_factor_batch(covs)
    x = np.empty((m, z.shape[1], d))
    _build_samples_kernel(means, factors, np.ascontiguousarray(z),
                          np.asarray(idx, dtype=np.int64), x)
    return x


def propagate_particles_batch(particles, controls, n_samples, rng, ctx,
                              normals=None):
    """Persistent-particle variant: advances an existing (M, N, d) cloud.

    Skips the Gaussian re-projection of propagate_mc_batch, preserving
    non-Gaussianity across steps. Returns (means', covs', ok, particles').
    """
    m = particles.shape[0]
    d = particles.shape[2]
    idx = np.array(ctx.subset.indices if hasattr(ctx, "subset") else range(d),
                   dtype=np.int64)
    t = idx.shape[0]
    if normals is None:
        normals = rng.standard_normal((m, n_samples, t + ctx.noise_dim))
    return _propagate_particles(particles, controls, normals[:, :, t:], idx, ctx)


def _propagate_particles(x, controls, noise_normals, idx, ctx):
    w = ctx.noise_from_normals(noise_normals)
    x1, ok_samples = ctx.apply(x, np.asarray(controls, dtype=float)[:, None, :], w)
    m, n_samples, d = x1.shape
    mean1 = np.empty((m, d))
    cov1 = np.empty((m, idx.shape[0], idx.shape[0]))
    x1 = np.ascontiguousarray(x1)
    _moments_kernel(x1, idx, np.empty(n_samples), mean1, cov1)
    ok = np.all(np.isfinite(mean1), axis=-1) & np.all(np.isfinite(cov1), axis=(-1, -2))
    if isinstance(ctx, VehicleBeliefContext):
        kap = curvature(ctx.track, mean1[:, IDX_S])
        ok &= (1.0 - kap * mean1[:, IDX_EY]) > 0.0
    return mean1, cov1, ok, x1
