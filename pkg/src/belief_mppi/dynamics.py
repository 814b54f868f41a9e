"""Planar single-track vehicle with Pacejka tires in a road-aligned frame.

State layout (index constants below): longitudinal/lateral velocity, yaw
rate, front/rear wheel speed, heading error, lateral offset and arc-length
position relative to a closed track centerline. All propagation functions
have a batched array core (`step_array`) used by the sampling controllers
and a typed scalar wrapper (`step`).
"""

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numba
import numpy as np

G = 9.81

# State vector layout.
IDX_VX = 0
IDX_VY = 1
IDX_YAW_RATE = 2
IDX_OMEGA_F = 3
IDX_OMEGA_R = 4
IDX_EPSI = 5
IDX_EY = 6
IDX_S = 7
STATE_DIM = 8

# Control vector layout.
IDX_STEER = 0
IDX_THROTTLE = 1
CONTROL_DIM = 2

DEFAULT_NOISE_CHANNELS = (IDX_VX, IDX_VY, IDX_YAW_RATE)

# Peak axle force for the default 22 kg platform: mu * m * g / 2 at the
# dirt-like mu = 0.7, which puts the 6 m/s reference speed at the cornering
# grip limit of the default circuit.
_DEFAULT_PEAK = 0.7 * 22.0 * G / 2.0


class CurvilinearSingularity(RuntimeError):
    """State left the validity region of the road-aligned frame (1 - kappa*e_y <= 0)."""


class OpenLoop(ValueError):
    """Track segment list does not close the loop."""


class FactorizationFailure(ValueError):
    """Covariance is not positive semidefinite within tolerance."""


@dataclass(frozen=True)
class VehicleParams:
    """Physical and numerical parameters of the single-track model."""

    mass: float = 22.0
    inertia_z: float = 1.2
    lf: float = 0.25
    lr: float = 0.25
    wheel_radius: float = 0.095
    wheel_inertia: float = 0.25
    # Pacejka magic-formula coefficients, lateral (slip angle) per axle.
    b_lat_front: float = 4.0
    c_lat_front: float = 1.3
    b_lat_rear: float = 4.0
    c_lat_rear: float = 1.3
    # Longitudinal (slip ratio) shape; softer stiffness keeps the wheel-speed
    # dynamics stable under the coarse controller timestep.
    b_long_front: float = 2.0
    c_long_front: float = 1.3
    b_long_rear: float = 2.0
    c_long_rear: float = 1.3
    # Friction-ellipse peak forces (double as the magic-formula D factors).
    peak_fx_front: float = _DEFAULT_PEAK
    peak_fy_front: float = _DEFAULT_PEAK
    peak_fx_rear: float = _DEFAULT_PEAK
    peak_fy_rear: float = _DEFAULT_PEAK
    drive_gain: float = 8.0
    roll_resist: float = 0.015
    dt: float = 0.05
    integrator: str = "euler"
    v_floor: float = 0.3

    def __post_init__(self):
        positive = (
            "mass", "inertia_z", "lf", "lr", "wheel_radius", "wheel_inertia",
            "peak_fx_front", "peak_fy_front", "peak_fx_rear", "peak_fy_rear",
            "dt", "v_floor",
        )
        for name in positive:
            if getattr(self, name) <= 0.0:
                raise ValueError(f"VehicleParams.{name} must be > 0")
        if self.roll_resist < 0.0:
            raise ValueError("VehicleParams.roll_resist must be >= 0")
        if self.integrator not in ("euler", "rk4"):
            raise ValueError(f"unknown integrator {self.integrator!r}")

    @property
    def wheelbase(self):
        return self.lf + self.lr


@dataclass
class VehicleState:
    """Single-track state in the road-aligned frame."""

    vx: float = 0.0
    vy: float = 0.0
    yaw_rate: float = 0.0
    omega_f: float = 0.0
    omega_r: float = 0.0
    e_psi: float = 0.0
    e_y: float = 0.0
    s: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.vx, self.vy, self.yaw_rate, self.omega_f, self.omega_r,
             self.e_psi, self.e_y, self.s],
            dtype=float,
        )

    @classmethod
    def from_array(cls, x) -> "VehicleState":
        x = np.asarray(x, dtype=float)
        return cls(*(float(v) for v in x))

    @classmethod
    def rolling(cls, vx: float, params: VehicleParams, **kwargs) -> "VehicleState":
        """State moving at `vx` with wheels matched to the ground speed."""
        omega = vx / params.wheel_radius
        return cls(vx=vx, omega_f=omega, omega_r=omega, **kwargs)


@dataclass
class ControlInput:
    delta: float = 0.0
    throttle: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.delta, self.throttle], dtype=float)

    @classmethod
    def from_array(cls, u) -> "ControlInput":
        u = np.asarray(u, dtype=float)
        return cls(float(u[0]), float(u[1]))


@dataclass(eq=False)
class Track:
    """Closed (or open) centerline sampled as (arc length, signed curvature).

    Samples live on [0, length); curvature between samples is interpolated
    linearly and wraps around the closing gap on closed tracks.
    """

    s: np.ndarray
    kappa: np.ndarray
    half_width: float
    closed: bool = True
    length: float = 0.0

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        self.kappa = np.asarray(self.kappa, dtype=float)
        if self.s.ndim != 1 or self.s.shape != self.kappa.shape or self.s.size < 2:
            raise ValueError("track needs matching 1-d s/kappa arrays with >= 2 samples")
        if self.s[0] != 0.0 or np.any(np.diff(self.s) <= 0.0):
            raise ValueError("track s samples must start at 0 and be strictly increasing")
        if self.half_width <= 0.0:
            raise ValueError("track half_width must be > 0")
        if self.length <= self.s[-1] and self.closed:
            raise ValueError("closed track length must exceed the last sample position")
        if not self.closed and self.length < self.s[-1]:
            raise ValueError("track length shorter than sampled range")
        if self.closed:
            total = self.turn_integral()
            if abs(abs(total) - 2.0 * math.pi) > 1e-6:
                raise ValueError(
                    f"closed track curvature integral {total:.9f} is not +-2*pi"
                )

    def turn_integral(self) -> float:
        """Integral of the curvature interpolant over one full loop."""
        total = float(np.trapezoid(self.kappa, self.s))
        if self.closed:
            total += (self.length - self.s[-1]) * 0.5 * (self.kappa[-1] + self.kappa[0])
        return total

    def wrap(self, s):
        if self.closed:
            return np.mod(s, self.length)
        return np.clip(s, 0.0, self.length)


def curvature(track: Track, s):
    """Signed curvature at (wrapped) arc length s; piecewise linear in s."""
    sw = track.wrap(np.asarray(s, dtype=float))
    if track.closed:
        out = np.interp(sw, track.s, track.kappa, period=track.length)
    else:
        out = np.interp(sw, track.s, track.kappa)
    return out if np.ndim(s) else float(out)


def make_test_track(segments, half_width: float, spacing: float = 0.5) -> Track:
    """Build a closed track from (length, curvature) segments.

    The loop must close (sum of length*curvature = +-2*pi within 1e-6);
    curvatures are rescaled by at most that tolerance so that the densified
    interpolant closes exactly.
    """
    segments = [(float(l), float(k)) for l, k in segments]
    if not segments:
        raise OpenLoop("empty segment list")
    if any(l <= 0.0 for l, _ in segments):
        raise OpenLoop("segment lengths must be > 0")
    turn = math.fsum(l * k for l, k in segments)
    if abs(abs(turn) - 2.0 * math.pi) > 1e-6:
        raise OpenLoop(f"segments do not close the loop: integral kappa ds = {turn:.9f}")

    s_pts, k_pts = [], []
    s0 = 0.0
    for length, kap in segments:
        n = max(1, math.ceil(length / spacing))
        for j in range(n):
            s_pts.append(s0 + j * length / n)
            k_pts.append(kap)
        s0 += length
    total_len = s0

    s_arr = np.array(s_pts)
    k_arr = np.array(k_pts, dtype=float)
    # Close the piecewise-linear interpolant exactly: the densified profile
    # ramps across segment boundaries, so its integral differs from the
    # segment sum by O(spacing); rescale onto the target winding.
    interp_turn = float(np.trapezoid(k_arr, s_arr)) + (total_len - s_arr[-1]) * 0.5 * (
        k_arr[-1] + k_arr[0]
    )
    target = math.copysign(2.0 * math.pi, turn)
    k_arr *= target / interp_turn
    return Track(s=s_arr, kappa=k_arr, half_width=float(half_width), closed=True,
                 length=total_len)


def save_track(track: Track, path):
    with open(path, "w") as fh:
        fh.write(
            f"# length={track.length!r} half_width={track.half_width!r} "
            f"closed={1 if track.closed else 0}\n"
        )
        for sj, kj in zip(track.s, track.kappa):
            fh.write(f"{float(sj)!r} {float(kj)!r}\n")


def load_track(path) -> Track:
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("#"):
            raise ValueError(f"{path}: missing track header line")
        meta = dict(item.split("=", 1) for item in header[1:].split())
        rows = [line.split() for line in fh if line.strip()]
    data = np.array([[float(a), float(b)] for a, b in rows])
    return Track(
        s=data[:, 0],
        kappa=data[:, 1],
        half_width=float(meta["half_width"]),
        closed=bool(int(meta["closed"])),
        length=float(meta["length"]),
    )


@dataclass(eq=False)
class NoiseModel:
    """Additive Gaussian process noise on a subset of state channels."""

    cov: np.ndarray
    channels: tuple = DEFAULT_NOISE_CHANNELS
    kind: str = "gaussian"
    _factor: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if self.cov.shape != (len(self.channels), len(self.channels)):
            raise ValueError("noise covariance shape does not match channel count")
        if self.kind != "gaussian":
            raise ValueError(f"unsupported noise distribution {self.kind!r}")

    @property
    def factor(self) -> np.ndarray:
        if self._factor is None:
            self._factor = psd_factor(self.cov)
        return self._factor

    @property
    def is_zero(self) -> bool:
        return not np.any(self.cov)


def psd_factor(cov: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """F with F @ F.T = cov, clamping eigenvalues in [-tol, 0) to zero."""
    cov = np.asarray(cov, dtype=float)
    sym = 0.5 * (cov + cov.T)
    if not np.allclose(cov, cov.T, atol=tol, rtol=0.0):
        raise FactorizationFailure("covariance is not symmetric")
    if not np.any(sym):
        return np.zeros_like(sym)
    w, v = np.linalg.eigh(sym)
    if w.min() < -tol:
        raise FactorizationFailure(f"covariance has eigenvalue {w.min():.3e} < -{tol:g}")
    return v * np.sqrt(np.clip(w, 0.0, None))


def sample_noise(rng: np.random.Generator, model: NoiseModel, size=None) -> np.ndarray:
    """Draw N(0, cov) disturbances; shape = (*size, channels)."""
    n = len(model.channels)
    shape = (n,) if size is None else tuple(np.atleast_1d(size)) + (n,)
    z = rng.standard_normal(shape)
    return z @ model.factor.T


@lru_cache(maxsize=64)
def _phys_vector(params: VehicleParams) -> np.ndarray:
    """Parameter scalars packed for the numba kernels."""
    p = params
    return np.array([
        p.mass, p.inertia_z, p.lf, p.lr, p.wheel_radius, p.wheel_inertia,
        p.b_lat_front, p.c_lat_front, p.b_lat_rear, p.c_lat_rear,
        p.b_long_front, p.c_long_front, p.b_long_rear, p.c_long_rear,
        p.peak_fx_front, p.peak_fy_front, p.peak_fx_rear, p.peak_fy_rear,
        p.drive_gain, p.roll_resist, p.v_floor,
        p.mass * G * p.lr / p.wheelbase,  # static front axle load
        p.mass * G * p.lf / p.wheelbase,  # static rear axle load
    ])


@numba.njit(cache=True, inline="always")
def _curv_scalar(s, s_nodes, k_nodes, length, closed):
    if closed:
        sw = s % length
    else:
        sw = min(max(s, 0.0), length)
    n = s_nodes.shape[0]
    if closed and sw >= s_nodes[n - 1]:
        x0 = s_nodes[n - 1]
        x1 = length
        y0 = k_nodes[n - 1]
        y1 = k_nodes[0]
    else:
        lo = 0
        hi = n - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if s_nodes[mid] <= sw:
                lo = mid
            else:
                hi = mid - 1
        if lo >= n - 1:
            return k_nodes[n - 1]
        x0 = s_nodes[lo]
        x1 = s_nodes[lo + 1]
        y0 = k_nodes[lo]
        y1 = k_nodes[lo + 1]
    if x1 == x0:
        return y0
    return y0 + (y1 - y0) * (sw - x0) / (x1 - x0)


@numba.njit(cache=True, inline="always")
def _tire_row(vx, vy, r, wf, wr, delta, p):
    # Low-speed regularization: floor |vx| while keeping its sign.
    if vx >= 0.0:
        vx_eff = max(vx, p[20])
    else:
        vx_eff = min(vx, -p[20])
    denom = abs(vx_eff)

    alpha_f = delta - math.atan2(vy + p[2] * r, vx_eff)
    alpha_r = -math.atan2(vy - p[3] * r, vx_eff)
    sigma_f = (wf * p[4] - vx) / denom
    sigma_r = (wr * p[4] - vx) / denom

    fyf0 = p[15] * math.sin(p[7] * math.atan(p[6] * alpha_f))
    fyr0 = p[17] * math.sin(p[9] * math.atan(p[8] * alpha_r))
    fxf = p[14] * math.sin(p[11] * math.atan(p[10] * sigma_f))
    fxr = p[16] * math.sin(p[13] * math.atan(p[12] * sigma_r))

    # Combined slip: longitudinal demand has priority, lateral capacity
    # shrinks so the resultant stays inside the friction ellipse.
    fyf = fyf0 * math.sqrt(max(1.0 - (fxf / p[14]) ** 2, 0.0))
    fyr = fyr0 * math.sqrt(max(1.0 - (fxr / p[16]) ** 2, 0.0))
    return fxf, fyf, fxr, fyr


@numba.njit(cache=True, inline="always")
def _derivs_row(x, i, u0, u1, p, s_nodes, k_nodes, length, closed, dx):
    vx = x[i, 0]
    vy = x[i, 1]
    r = x[i, 2]
    wf = x[i, 3]
    wr = x[i, 4]
    e_psi = x[i, 5]
    e_y = x[i, 6]
    s = x[i, 7]

    fxf, fyf, fxr, fyr = _tire_row(vx, vy, r, wf, wr, u0, p)
    cos_d = math.cos(u0)
    sin_d = math.sin(u0)
    fxf_body = fxf * cos_d - fyf * sin_d
    fyf_body = fxf * sin_d + fyf * cos_d

    dx[i, 0] = (fxf_body + fxr) / p[0] + vy * r
    dx[i, 1] = (fyf_body + fyr) / p[0] - vx * r
    dx[i, 2] = (p[2] * fyf_body - p[3] * fyr) / p[1]

    # Wheel torque balance; rolling resistance opposes the spin smoothly.
    spin_f = math.tanh(wf * p[4] / 0.1)
    spin_r = math.tanh(wr * p[4] / 0.1)
    dx[i, 3] = (-p[4] * fxf - p[19] * p[21] * p[4] * spin_f) / p[5]
    dx[i, 4] = (p[18] * u1 - p[4] * fxr - p[19] * p[22] * p[4] * spin_r) / p[5]

    kappa = _curv_scalar(s, s_nodes, k_nodes, length, closed)
    frame = 1.0 - kappa * e_y
    ok = frame > 0.0
    if frame < 1e-3:
        frame = 1e-3

    cos_e = math.cos(e_psi)
    sin_e = math.sin(e_psi)
    ds = (vx * cos_e - vy * sin_e) / frame
    dx[i, 7] = ds
    dx[i, 6] = vx * sin_e + vy * cos_e
    dx[i, 5] = r - kappa * ds
    return ok


@numba.njit(cache=True)
def _derivs_kernel(x, u, p, s_nodes, k_nodes, length, closed, dx, ok):
    for i in range(x.shape[0]):
        ok[i] = _derivs_row(x, i, u[i, 0], u[i, 1], p, s_nodes, k_nodes,
                            length, closed, dx)


@numba.njit(cache=True)
def _step_kernel(x, u, p, s_nodes, k_nodes, length, closed, dt, rk4, out, ok):
    n = x.shape[0]
    two_pi = 2.0 * math.pi
    stage = np.empty((1, 8))
    k1 = np.empty((1, 8))
    k2 = np.empty((1, 8))
    k3 = np.empty((1, 8))
    k4 = np.empty((1, 8))
    for i in range(n):
        good = True
        if rk4:
            for c in range(8):
                stage[0, c] = x[i, c]
            good = _derivs_row(stage, 0, u[i, 0], u[i, 1], p, s_nodes, k_nodes,
                               length, closed, k1) and good
            for c in range(8):
                stage[0, c] = x[i, c] + 0.5 * dt * k1[0, c]
            good = _derivs_row(stage, 0, u[i, 0], u[i, 1], p, s_nodes, k_nodes,
                               length, closed, k2) and good
            for c in range(8):
                stage[0, c] = x[i, c] + 0.5 * dt * k2[0, c]
            good = _derivs_row(stage, 0, u[i, 0], u[i, 1], p, s_nodes, k_nodes,
                               length, closed, k3) and good
            for c in range(8):
                stage[0, c] = x[i, c] + dt * k3[0, c]
            good = _derivs_row(stage, 0, u[i, 0], u[i, 1], p, s_nodes, k_nodes,
                               length, closed, k4) and good
            for c in range(8):
                out[i, c] = x[i, c] + (dt / 6.0) * (
                    k1[0, c] + 2.0 * k2[0, c] + 2.0 * k3[0, c] + k4[0, c]
                )
        else:
            for c in range(8):
                stage[0, c] = x[i, c]
            good = _derivs_row(stage, 0, u[i, 0], u[i, 1], p, s_nodes, k_nodes,
                               length, closed, k1)
            for c in range(8):
                out[i, c] = x[i, c] + dt * k1[0, c]
        out[i, 5] = math.pi - (math.pi - out[i, 5]) % two_pi
        if closed:
            out[i, 7] = out[i, 7] % length
        elif out[i, 7] < 0.0:
            out[i, 7] = 0.0
        elif out[i, 7] > length:
            out[i, 7] = length
        for c in range(8):
            if not math.isfinite(out[i, c]):
                good = False
                out[i, c] = 0.0
        ok[i] = good


def tire_forces(state: VehicleState, control: ControlInput, params: VehicleParams):
    """Per-axle (Fx, Fy) in the wheel frame, friction-ellipse limited.

    Returns ((fx_front, fy_front), (fx_rear, fy_rear)).
    """
    fxf, fyf, fxr, fyr = _tire_forces_arrays(
        state.as_array()[None, :], control.as_array()[None, :], params
    )
    return (float(fxf[0]), float(fyf[0])), (float(fxr[0]), float(fyr[0]))


@numba.njit(cache=True)
def _tire_kernel(x, u, p, out):
    for i in range(x.shape[0]):
        fxf, fyf, fxr, fyr = _tire_row(x[i, 0], x[i, 1], x[i, 2], x[i, 3],
                                       x[i, 4], u[i, 0], p)
        out[i, 0] = fxf
        out[i, 1] = fyf
        out[i, 2] = fxr
        out[i, 3] = fyr


def _tire_forces_arrays(x, u, p: VehicleParams):
    """Vectorized per-axle tire forces; returns (fxf, fyf, fxr, fyr)."""
    x = np.ascontiguousarray(np.asarray(x, dtype=float).reshape(-1, STATE_DIM))
    u = np.ascontiguousarray(np.asarray(u, dtype=float).reshape(-1, CONTROL_DIM))
    out = np.empty((x.shape[0], 4))
    _tire_kernel(x, u, _phys_vector(p), out)
    return out[:, 0], out[:, 1], out[:, 2], out[:, 3]


def _derivatives(x, u, p: VehicleParams, track: Track):
    """Time derivative of the batched state; returns (dx, frame_ok)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    xf = np.ascontiguousarray(np.broadcast_to(x, batch + (STATE_DIM,))).reshape(-1, STATE_DIM)
    uf = np.ascontiguousarray(np.broadcast_to(u, batch + (CONTROL_DIM,))).reshape(-1, CONTROL_DIM)
    dx = np.empty_like(xf)
    ok = np.empty(xf.shape[0], dtype=np.bool_)
    _derivs_kernel(xf, uf, _phys_vector(p), track.s, track.kappa,
                   track.length, track.closed, dx, ok)
    return dx.reshape(batch + (STATE_DIM,)), ok.reshape(batch)


def wrap_angle(angle):
    """Wrap onto (-pi, pi]."""
    return np.pi - np.mod(np.pi - angle, 2.0 * np.pi)


def step_array(x, u, noise, params: VehicleParams, track: Track,
               noise_channels=DEFAULT_NOISE_CHANNELS):
    """Batched propagation over params.dt; returns (x_next, valid_mask).

    `noise` is added to `noise_channels` after integration; pass None or 0
    for the deterministic model. Invalid entries (curvilinear singularity at
    any integration stage, or a non-finite result) are flagged False in the
    mask and their non-finite components zeroed.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    xf = np.ascontiguousarray(np.broadcast_to(x, batch + (STATE_DIM,))).reshape(-1, STATE_DIM)
    uf = np.ascontiguousarray(np.broadcast_to(u, batch + (CONTROL_DIM,))).reshape(-1, CONTROL_DIM)
    out = np.empty_like(xf)
    ok = np.empty(xf.shape[0], dtype=np.bool_)
    _step_kernel(xf, uf, _phys_vector(params), track.s, track.kappa,
                 track.length, track.closed, params.dt,
                 params.integrator == "rk4", out, ok)
    out = out.reshape(batch + (STATE_DIM,))
    ok = ok.reshape(batch)
    if noise is not None and np.any(noise):
        out[..., list(noise_channels)] += noise
    return out, ok


def step(state: VehicleState, control: ControlInput, noise, params: VehicleParams,
         track: Track, noise_channels=DEFAULT_NOISE_CHANNELS) -> VehicleState:
    """Single-state propagation; raises CurvilinearSingularity when the frame degenerates."""
    x_next, ok = step_array(state.as_array(), control.as_array(), noise, params, track,
                            noise_channels)
    if not bool(ok):
        raise CurvilinearSingularity(
            f"state left the curvilinear frame validity region at s={state.s:.2f}"
        )
    return VehicleState.from_array(x_next)


def with_timestep(params: VehicleParams, dt: float, integrator: str) -> VehicleParams:
    return replace(params, dt=dt, integrator=integrator)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(12)


class TrackFrame:
    """Global-frame embedding of a track centerline, for logging and plots.

    Poses are integrated from the curvature interpolant with fixed-order
    Gauss-Legendre quadrature so that forward and inverse conversions are
    mutually consistent to well below 1e-9 m.
    """

    def __init__(self, track: Track):
        self.track = track
        s = track.s
        kap = track.kappa
        if track.closed:
            s = np.append(s, track.length)
            kap = np.append(kap, track.kappa[0])
        self._s = s
        self._kappa = kap
        # Heading at nodes: exact integral of the piecewise-linear curvature.
        dtheta = np.diff(s) * 0.5 * (kap[:-1] + kap[1:])
        self._theta = np.concatenate([[0.0], np.cumsum(dtheta)])
        xs = [0.0]
        ys = [0.0]
        for j in range(len(s) - 1):
            dx, dy = self._segment_quad(j, s[j + 1])
            xs.append(xs[-1] + dx)
            ys.append(ys[-1] + dy)
        self._x = np.array(xs)
        self._y = np.array(ys)

    def _segment_quad(self, j, s_to):
        """Integrate (cos theta, sin theta) over [s_j, s_to] within segment j."""
        s0 = self._s[j]
        h = self._s[j + 1] - s0
        half = 0.5 * (s_to - s0)
        sig = s0 + half * (_GL_NODES + 1.0)
        d = sig - s0
        slope = (self._kappa[j + 1] - self._kappa[j]) / h
        theta = self._theta[j] + self._kappa[j] * d + 0.5 * slope * d * d
        w = _GL_WEIGHTS * half
        return float(np.dot(w, np.cos(theta))), float(np.dot(w, np.sin(theta)))

    def pose(self, s):
        """Centerline (x, y, heading) at arc length s (wrapped on closed tracks)."""
        sw = float(self.track.wrap(s))
        j = int(np.searchsorted(self._s, sw, side="right") - 1)
        j = min(max(j, 0), len(self._s) - 2)
        d = sw - self._s[j]
        h = self._s[j + 1] - self._s[j]
        slope = (self._kappa[j + 1] - self._kappa[j]) / h
        theta = self._theta[j] + self._kappa[j] * d + 0.5 * slope * d * d
        dx, dy = self._segment_quad(j, sw)
        return self._x[j] + dx, self._y[j] + dy, theta

    def to_global(self, s, e_y, e_psi):
        """(s, e_y, e_psi) -> (x, y, heading)."""
        cx, cy, theta = self.pose(s)
        return (
            cx - e_y * math.sin(theta),
            cy + e_y * math.cos(theta),
            theta + e_psi,
        )

    def to_curvilinear(self, x, y, heading, s_hint=None):
        """Project a global pose back onto the centerline.

        Newton iteration on the tangency condition; `s_hint` selects the
        branch when the point is near the cut line of a closed track.
        """
        if s_hint is None:
            d2 = (self._x - x) ** 2 + (self._y - y) ** 2
            s_est = float(self._s[int(np.argmin(d2))])
        else:
            s_est = float(self.track.wrap(s_hint))
        L = self.track.length
        for _ in range(60):
            cx, cy, theta = self.pose(s_est)
            tx, ty = math.cos(theta), math.sin(theta)
            px, py = x - cx, y - cy
            g = px * tx + py * ty
            e_y = -px * ty + py * tx
            kap = curvature(self.track, s_est)
            dg = -1.0 + kap * e_y
            if dg >= -1e-12:
                dg = -1.0
            step_s = -g / dg
            s_est = s_est + np.clip(step_s, -1.0, 1.0)
            if self.track.closed:
                s_est = float(np.mod(s_est, L))
            else:
                s_est = float(np.clip(s_est, 0.0, L))
            if abs(g) < 1e-13:
                break
        cx, cy, theta = self.pose(s_est)
        tx, ty = math.cos(theta), math.sin(theta)
        e_y = -(x - cx) * ty + (y - cy) * tx
        return s_est, float(e_y), float(wrap_angle(heading - theta))
