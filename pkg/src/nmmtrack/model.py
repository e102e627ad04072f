"""Jansen-Rit neural mass model in augmented state-space form.

The augmented state ``xi`` has 15 entries: five synaptic channels, each a
``(v, z)`` pair (membrane potential in mV and its derivative in mV/s), followed
by the parameter block ``theta = [u, alpha_pe, alpha_pi, alpha_ip, alpha_ep]``.

Channels are named ``<post><pre>``:

======  =========================================  ==============  =============
name    synapse                                    time constant   driven by
======  =========================================  ==============  =============
``pe``  excitatory interneurons -> pyramidal       ``tau_e``       phi(v_ep)
``pi``  inhibitory interneurons -> pyramidal       ``tau_i``       phi(v_ip)
``ep``  pyramidal -> excitatory interneurons       ``tau_e``       phi(v_p)
``ip``  pyramidal -> inhibitory interneurons       ``tau_e``       phi(v_p)
``pu``  external input -> pyramidal                ``tau_e``       u (no sigmoid)
======  =========================================  ==============  =============

with ``v_p = v_pe + v_pi + v_pu`` the pyramidal membrane potential, which is
also the observed quantity.  Inhibition is carried by the sign of ``alpha_pi``
(negative by convention); the adjacency matrix holds only zeros and ones.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigurationError, IntegrationDivergence

CHANNELS = ("pe", "pi", "ep", "ip", "pu")
PARAM_NAMES = ("u", "alpha_pe", "alpha_pi", "alpha_ip", "alpha_ep")
STATE_NAMES = tuple(f"{kind}_{ch}" for ch in CHANNELS for kind in ("v", "z"))
AUG_NAMES = STATE_NAMES + PARAM_NAMES
TARGET_NAMES = AUG_NAMES + ("tau_e", "tau_i")

N_STATE = len(STATE_NAMES)
N_AUG = len(AUG_NAMES)
N_TARGET = len(TARGET_NAMES)

# reference time constants at which the default gains are quoted
TAU_E_REF = 0.01
TAU_I_REF = 0.02


@dataclass(frozen=True)
class StateLayout:
    """Index contract for the augmented state; every module goes through it."""

    channels: tuple = CHANNELS
    n_state: int = N_STATE
    n_aug: int = N_AUG
    n_target: int = N_TARGET
    # v / z rows of each channel inside the state block
    v_index: tuple = (0, 2, 4, 6, 8)
    z_index: tuple = (1, 3, 5, 7, 9)
    u_index: int = 10
    # augmented index of the gain driving channels pe, pi, ep, ip
    gain_index: tuple = (11, 12, 14, 13)
    param_index: tuple = (10, 11, 12, 13, 14)
    alpha_index: tuple = (11, 12, 13, 14)
    tau_index: tuple = (15, 16)
    # v rows summed into the pyramidal membrane potential
    pyramidal_index: tuple = (0, 2, 8)
    # presynaptic v rows feeding the sigmoid of channels pe, pi, ep, ip
    presynaptic: tuple = ((4,), (6,), (0, 2, 8), (0, 2, 8))
    # 0 -> tau_e, 1 -> tau_i for each channel
    tau_kind: tuple = (0, 1, 0, 0, 0)

    def channel_taus(self, tau_e, tau_i):
        """Per-channel time constants, broadcasting over leading axes."""
        tau_e = np.asarray(tau_e, dtype=float)
        tau_i = np.asarray(tau_i, dtype=float)
        return np.stack([tau_i if k else tau_e for k in self.tau_kind], axis=-1)

    def observation_row(self, width=N_STATE):
        h = np.zeros(width)
        h[list(self.pyramidal_index)] = 1.0
        return h


LAYOUT = StateLayout()


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters of the model.

    ``q_process`` is the per-step std of the noise added to each ``z`` row and
    ``q_param`` the per-step std of the random walk on ``theta``.
    """

    tau_e: float = 0.01
    tau_i: float = 0.02
    alpha_pe: float = 1800.0
    alpha_pi: float = -10000.0
    alpha_ip: float = 1500.0
    alpha_ep: float = 1000.0
    u: float = 3000.0
    v0: float = 6.0
    sigma_s: float = 3.0
    dt: float = 1.0 / 400.0
    q_process: float = math.sqrt(1e-3)
    q_param: float = 0.0
    r_obs: float = 1.0

    def __post_init__(self):
        for name in ("tau_e", "tau_i"):
            tau = getattr(self, name)
            if not (0.005 <= tau <= 0.1):
                raise ConfigurationError(f"{name}={tau} outside [0.005, 0.1] s")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if not self.sigma_s > 0:
            raise ConfigurationError("sigma_s must be positive")
        if self.r_obs < 0 or self.q_process < 0 or self.q_param < 0:
            raise ConfigurationError("noise levels must be non-negative")
        values = [getattr(self, f.name) for f in dataclasses.fields(self)]
        if not all(math.isfinite(v) for v in values):
            raise ConfigurationError("ModelParams contains a non-finite value")

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.u, self.alpha_pe, self.alpha_pi, self.alpha_ip, self.alpha_ep])

    def replace(self, **changes) -> "ModelParams":
        return dataclasses.replace(self, **changes)

    def with_time_constants(self, tau_e, tau_i, scale_input=False) -> "ModelParams":
        """Move to new time constants keeping every ``alpha * tau`` product fixed.

        The kernel integral ``alpha * tau`` sets the static gain of a synapse, so
        this changes the dynamics but not the fixed-point structure.  With
        ``scale_input`` the input is rescaled the same way (``u * tau_e`` fixed).
        """
        re = self.tau_e / tau_e
        ri = self.tau_i / tau_i
        return self.replace(
            tau_e=tau_e,
            tau_i=tau_i,
            alpha_pe=self.alpha_pe * re,
            alpha_pi=self.alpha_pi * ri,
            alpha_ip=self.alpha_ip * re,
            alpha_ep=self.alpha_ep * re,
            u=self.u * re if scale_input else self.u,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown ModelParams keys: {sorted(unknown)}")
        return cls(**data)


def sigmoid(v, v0=6.0, sigma_s=3.0):
    """Firing rate ``0.5 * (erf((v - v0) / sigma_s) + 1)``."""
    if not sigma_s > 0:
        raise ValueError("sigma_s must be positive")
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("sigmoid received a non-finite membrane potential")
    out = _phi(v, v0, sigma_s)
    return float(out) if out.ndim == 0 else out


def _phi(v, v0, sigma_s):
    return 0.5 * (erf((v - v0) / sigma_s) + 1.0)


def build_matrices(p: ModelParams):
    """Continuous-time matrices ``(A, B, C, H)`` with ``dx/dt = A x + B r``.

    ``r`` holds the four sigmoid outputs ``phi(C x)`` followed by ``u``; row
    ``pu`` of ``C`` is zero because that channel bypasses the sigmoid.
    """
    taus = LAYOUT.channel_taus(p.tau_e, p.tau_i)
    A = np.zeros((N_STATE, N_STATE))
    for c, tau in enumerate(taus):
        iv, iz = LAYOUT.v_index[c], LAYOUT.z_index[c]
        A[iv, iz] = 1.0
        A[iz, iv] = -1.0 / tau**2
        A[iz, iz] = -2.0 / tau
    gains = [p.alpha_pe, p.alpha_pi, p.alpha_ep, p.alpha_ip, 1.0]
    B = np.zeros((N_STATE, len(CHANNELS)))
    for c, (g, tau) in enumerate(zip(gains, taus)):
        B[LAYOUT.z_index[c], c] = g / tau
    C = np.zeros((len(CHANNELS), N_STATE))
    for c, rows in enumerate(LAYOUT.presynaptic):
        C[c, list(rows)] = 1.0
    H = LAYOUT.observation_row()
    return A, B, C, H


def _rates(xi, v0, sigma_s, sigmoid_fn=_phi):
    """Channel drives ``[phi(v_ep), phi(v_ip), phi(v_p), phi(v_p), u]``."""
    v_p = xi[..., 0] + xi[..., 2] + xi[..., 8]
    s_p = sigmoid_fn(v_p, v0, sigma_s)
    return np.stack(
        [sigmoid_fn(xi[..., 4], v0, sigma_s), sigmoid_fn(xi[..., 6], v0, sigma_s), s_p, s_p, xi[..., 10]],
        axis=-1,
    )


def _channel_gains(xi):
    g = xi[..., [11, 12, 14, 13]]
    return np.concatenate([g, np.ones(g.shape[:-1] + (1,))], axis=-1)


def one_step(xi, tau_e, tau_i, v0, sigma_s, dt, sigmoid_fn=_phi):
    """Noise-free Euler map on the augmented state (parameters held fixed).

    Broadcasts over leading axes of ``xi``; ``tau_e``/``tau_i`` may be arrays
    matching those axes.
    """
    xi = np.asarray(xi, dtype=float)
    taus = LAYOUT.channel_taus(tau_e, tau_i)
    v = xi[..., 0:10:2]
    z = xi[..., 1:10:2]
    drive = _channel_gains(xi) * _rates(xi, v0, sigma_s, sigmoid_fn) / taus
    dz = drive - 2.0 * z / taus - v / taus**2
    out = xi.copy()
    out[..., 0:10:2] = v + dt * z
    out[..., 1:10:2] = z + dt * dz
    return out


def step(xi, p: ModelParams, noise=None, sigmoid_fn=_phi):
    """Advance one Euler step; gains and ``u`` come from ``xi``, not ``p``.

    ``noise`` is an additive draw ``W`` of the same shape as ``xi``.
    """
    out = one_step(xi, p.tau_e, p.tau_i, p.v0, p.sigma_s, p.dt, sigmoid_fn)
    if noise is not None:
        out = out + noise
    _check_finite(out)
    return out


def _check_finite(xi, step_index=None):
    bad = ~np.isfinite(xi)
    if bad.any():
        idx = int(np.argwhere(bad)[0][-1])
        name = AUG_NAMES[idx]
        where = f" at step {step_index}" if step_index is not None else ""
        raise IntegrationDivergence(f"non-finite value in {name}{where}", channel=name, step=step_index)


@dataclass(frozen=True)
class ParamSchedule:
    """Per-sample parameter values for time-varying simulations."""

    tau_e: np.ndarray
    tau_i: np.ndarray
    theta: np.ndarray  # (n, 5)

    def __len__(self):
        return len(self.tau_e)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n, 15)
    observations: np.ndarray  # (n,)
    tau: np.ndarray  # (n, 2) columns tau_e, tau_i
    params: ModelParams = field(default_factory=ModelParams)
    seed: int | None = None

    def __post_init__(self):
        n = len(self.times)
        if not (len(self.states) == len(self.observations) == len(self.tau) == n):
            raise ValueError("trajectory fields have unequal lengths")

    def __len__(self):
        return len(self.times)

    @property
    def dt(self):
        return self.params.dt

    def targets(self) -> np.ndarray:
        """``(n, 17)`` augmented state followed by ``tau_e, tau_i``."""
        return np.hstack([self.states, self.tau])

    def clean_observation(self) -> np.ndarray:
        return self.states[:, list(LAYOUT.pyramidal_index)].sum(axis=1)

    def slice(self, start, stop) -> "Trajectory":
        return Trajectory(
            self.times[start:stop], self.states[start:stop], self.observations[start:stop],
            self.tau[start:stop], self.params, self.seed,
        )

    def to_csv(self, path):
        """Write columnar CSV plus a ``.json`` sidecar with params and seed."""
        path = Path(path)
        header = ["time", "y", *AUG_NAMES, "tau_e", "tau_i"]
        table = np.column_stack([self.times, self.observations, self.states, self.tau])
        np.savetxt(path, table, delimiter=",", header=",".join(header), comments="", fmt="%.17g")
        meta = {"params": self.params.to_dict(), "seed": self.seed, "dt": self.params.dt}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        path = Path(path)
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        meta = json.loads(path.with_suffix(".json").read_text())
        return cls(
            times=table[:, 0], observations=table[:, 1], states=table[:, 2:17], tau=table[:, 17:19],
            params=ModelParams.from_dict(meta["params"]), seed=meta["seed"],
        )


def initial_state(p: ModelParams) -> np.ndarray:
    xi = np.zeros(N_AUG)
    xi[10:] = p.theta
    return xi


def simulate(p: ModelParams, duration: float, seed=0, *, transient=1.0, schedule: ParamSchedule | None = None,
             x0=None, sigmoid_fn=_phi) -> Trajectory:
    """Simulate ``duration`` seconds after discarding ``transient`` seconds.

    With a ``schedule`` the parameter block, ``tau_e`` and ``tau_i`` follow it
    sample by sample (its first entry is held during the transient) and the
    random walk on ``theta`` is switched off.
    """
    n_keep = int(round(duration / p.dt))
    if n_keep < 1:
        raise ConfigurationError("duration must be at least one step")
    if schedule is not None and len(schedule) != n_keep:
        raise ConfigurationError("schedule length must equal the number of kept samples")
    traj = simulate_batch([p], duration, [seed], transient=transient, schedule=schedule, x0=x0,
                          on_divergence="raise", sigmoid_fn=sigmoid_fn)[0]
    return traj


def simulate_batch(params: Sequence[ModelParams], duration: float, seeds: Sequence, *, transient=1.0,
                   schedule: ParamSchedule | None = None, x0=None, on_divergence="mask", sigmoid_fn=_phi):
    """Vectorised simulation of several parameter sets sharing ``dt``, ``v0``, ``sigma_s``.

    Each member draws its noise from its own generator seeded by ``seeds[k]``, so
    results do not depend on how members are batched.  With
    ``on_divergence="mask"`` diverged members come back as ``None``.
    """
    if len(params) != len(seeds):
        raise ValueError("one seed per parameter set required")
    p0 = params[0]
    for p in params[1:]:
        if (p.dt, p.v0, p.sigma_s) != (p0.dt, p0.v0, p0.sigma_s):
            raise ConfigurationError("batched members must share dt, v0 and sigma_s")
    dt = p0.dt
    n_batch = len(params)
    n_keep = int(round(duration / dt))
    n_skip = int(round(transient / dt))
    n_total = n_skip + n_keep

    tau_e = np.array([p.tau_e for p in params])
    tau_i = np.array([p.tau_i for p in params])
    q_state = np.array([p.q_process for p in params])[:, None]
    q_param = np.array([p.q_param for p in params])[:, None]
    r_obs = np.array([p.r_obs for p in params])

    # noise is drawn up front from per-member generators
    rngs = [np.random.default_rng(s) for s in seeds]
    w_state = np.stack([g.standard_normal((n_total, 5)) for g in rngs], axis=1)
    w_param = np.stack([g.standard_normal((n_total, 5)) for g in rngs], axis=1)
    w_obs = np.stack([g.standard_normal(n_keep) for g in rngs], axis=1)

    xi = np.stack([initial_state(p) for p in params])
    if x0 is not None:
        xi[:, :N_STATE] = np.asarray(x0, dtype=float)[..., :N_STATE]
    if schedule is not None:
        xi[:, 10:] = schedule.theta[0]

    states = np.empty((n_keep, n_batch, N_AUG))
    taus = np.empty((n_keep, n_batch, 2))
    alive = np.ones(n_batch, dtype=bool)
    te, ti = tau_e, tau_i
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_total):
            j = k - n_skip
            if schedule is not None:
                jj = max(j, 0)
                te = np.full(n_batch, schedule.tau_e[jj])
                ti = np.full(n_batch, schedule.tau_i[jj])
                xi[:, 10:] = schedule.theta[jj]
            if j >= 0:
                states[j] = xi
                taus[j, :, 0] = te
                taus[j, :, 1] = ti
            if k == n_total - 1:
                break
            nxt = one_step(xi, te, ti, p0.v0, p0.sigma_s, dt, sigmoid_fn)
            nxt[:, 1:10:2] += q_state * w_state[k]
            if schedule is None:
                nxt[:, 10:] += q_param * w_param[k]
            finite = np.isfinite(nxt).all(axis=1)
            if not finite.all():
                if on_divergence == "raise":
                    _check_finite(nxt, step_index=k)
                alive &= finite
                nxt[~finite] = 0.0
            xi = nxt

    h = LAYOUT.observation_row(N_AUG)
    times = np.arange(n_keep) * dt
    out = []
    for b in range(n_batch):
        if not alive[b]:
            out.append(None)
            continue
        st = states[:, b]
        y = st @ h + r_obs[b] * w_obs[:, b]
        out.append(Trajectory(times, st, y, taus[:, b], params[b], seeds[b]))
    return out
