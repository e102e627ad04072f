"""Analytic nonlinear Kalman filter on the augmented state.

The prediction uses closed-form Gaussian expectations of the erf sigmoid.  For
a jointly Gaussian pair ``(g, V)`` Stein's identity gives

    E[g phi(V)] = E[g] E[phi(V)] + Cov(g, V) E[phi'(V)]

so the mean of the Euler map is propagated exactly.  The covariance is
propagated by statistical linearisation: the Jacobian of the map is replaced by
its expectation under the current belief (see :func:`expected_jacobian`).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FilterDivergence
from .model import LAYOUT, N_AUG, N_STATE, TAU_E_REF, TAU_I_REF, ModelParams, Trajectory, build_matrices
from .tracks import EstimateTrack

log = logging.getLogger(__name__)

_SQRT_PI = math.sqrt(math.pi)
# beyond this magnitude the belief is treated as diverged
DIVERGENCE_BOUND = 1e9


def gaussian_sigmoid_moments(mu_v, var_v, cov_xv=None, v0=6.0, sigma_s=3.0):
    """Moments of ``phi(V)`` for ``V ~ N(mu_v, var_v)``.

    Returns
    -------
    e_phi : float
        ``E[phi(V)]``.
    cov : ndarray or None
        ``Cov(X, phi(V)) = Cov(X, V) E[phi'(V)]`` for the supplied ``cov_xv``.
    """
    if var_v < 0:
        raise ValueError("var_v must be non-negative")
    e_phi, e_dphi, _ = _erf_moments(mu_v, var_v, v0, sigma_s)
    cov = None if cov_xv is None else np.asarray(cov_xv, dtype=float) * e_dphi
    return e_phi, cov


def _erf_moments(mu, var, v0, sigma_s):
    """``E[phi], E[phi'], E[phi'']`` under ``N(mu, var)``."""
    s2 = sigma_s * sigma_s + 2.0 * var
    d = mu - v0
    e_phi = 0.5 * (1.0 + math.erf(d / math.sqrt(s2)))
    e_dphi = math.exp(-d * d / s2) / (_SQRT_PI * math.sqrt(s2))
    return e_phi, e_dphi, -2.0 * d / s2 * e_dphi


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        n = self.mean.shape[0]
        if self.cov.shape != (n, n):
            raise ValueError("covariance shape does not match the mean")

    def std(self):
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


def nearest_pd(M, eps=None):
    """Clip eigenvalues at ``1e-9 * trace / dim`` and re-symmetrise."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise FilterDivergence("non-finite covariance cannot be repaired")
    S = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(S)
    if eps is None:
        eps = 1e-9 * abs(np.trace(S)) / S.shape[0]
        if eps == 0:
            eps = 1e-12
    if w.min() >= eps:
        return S
    w = np.maximum(w, eps)
    out = (V * w) @ V.T
    return 0.5 * (out + out.T)


def _ensure_psd(P, step=None):
    """Repair only when a clearly negative eigenvalue shows up.

    Exactly singular but PSD matrices (for example zero rows of unobserved,
    uncorrelated coordinates) pass through untouched.
    """
    P = 0.5 * (P + P.T)
    scale = max(np.abs(np.diag(P)).max(), 1e-300)
    if not np.all(np.isfinite(P)):
        raise FilterDivergence(f"non-finite covariance at step {step}", step=step)
    if np.linalg.eigvalsh(P)[0] < -1e-8 * scale:
        log.debug("repairing covariance at step %s", step)
        P = nearest_pd(P)
    return P


def default_process_cov(q_state=1e-3, q_param=1e-5):
    """Diagonal ``Q``: ``q_state`` on the ``z`` rows, ``q_param`` on ``theta``."""
    q = np.zeros(N_AUG)
    q[list(LAYOUT.z_index)] = q_state
    q[list(LAYOUT.param_index)] = q_param
    return np.diag(q)


def estimate_obs_variance(y):
    """Fallback ``R``: half the variance of the first difference."""
    y = np.asarray(y, dtype=float)
    if y.size < 3:
        raise ValueError("need at least 3 samples to estimate R")
    return float(np.var(np.diff(y)) / 2.0)


def initial_cov(theta, v_std=10.0, z_std=500.0, param_frac=0.1):
    """Broad state prior and a parameter prior of ``param_frac * |theta|``."""
    d = np.zeros(N_AUG)
    d[list(LAYOUT.v_index)] = v_std**2
    d[list(LAYOUT.z_index)] = z_std**2
    d[list(LAYOUT.param_index)] = (param_frac * np.abs(theta)) ** 2
    return np.diag(d)


@dataclass
class AkfConfig:
    init_belief: GaussianBelief
    Q: np.ndarray = field(default_factory=default_process_cov)
    R: float = 1.0
    tau_e: float = TAU_E_REF
    tau_i: float = TAU_I_REF
    v0: float = 6.0
    sigma_s: float = 3.0
    dt: float = 1.0 / 400.0

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        if not self.R > 0:
            raise ValueError("R must be positive")
        if self.Q.shape != (N_AUG, N_AUG) or np.linalg.eigvalsh(0.5 * (self.Q + self.Q.T))[0] < -1e-12:
            raise ValueError("Q must be a 15x15 PSD matrix")
        self._A = _state_transition(self.tau_e, self.tau_i)

    @classmethod
    def perfect(cls, traj: Trajectory, **kw):
        """Start at the true initial state with the true time constants."""
        p = traj.params
        mean = traj.states[0].copy()
        belief = GaussianBelief(mean, initial_cov(mean[10:]))
        return cls(belief, R=max(p.r_obs**2, 1e-12), tau_e=float(traj.tau[0, 0]), tau_i=float(traj.tau[0, 1]),
                   v0=p.v0, sigma_s=p.sigma_s, dt=p.dt, **kw)

    @classmethod
    def fixed(cls, base: ModelParams | None = None, R=None, y=None, **kw):
        """Default parameter point, zero initial state, reference time constants."""
        base = ModelParams() if base is None else base
        mean = np.zeros(N_AUG)
        mean[10:] = base.theta
        belief = GaussianBelief(mean, initial_cov(mean[10:]))
        if R is None:
            R = base.r_obs**2 if y is None else estimate_obs_variance(y)
        return cls(belief, R=R, tau_e=TAU_E_REF, tau_i=TAU_I_REF, v0=base.v0, sigma_s=base.sigma_s,
                   dt=base.dt, **kw)


def _state_transition(tau_e, tau_i):
    A, _, _, _ = build_matrices(ModelParams(tau_e=tau_e, tau_i=tau_i))
    J = np.zeros((N_AUG, N_AUG))
    J[:N_STATE, :N_STATE] = A
    # pu is driven linearly by u with unit gain
    J[LAYOUT.z_index[4], LAYOUT.u_index] = 1.0 / tau_e
    return J


def _sigmoid_terms(mean, cov, cfg: AkfConfig):
    """Expected drive and expected Jacobian rows of the four sigmoid channels."""
    taus = LAYOUT.channel_taus(cfg.tau_e, cfg.tau_i)
    drive = np.zeros(N_AUG)
    jac = np.zeros((N_AUG, N_AUG))
    for c in range(4):
        rows = list(LAYOUT.presynaptic[c])
        g = LAYOUT.gain_index[c]
        iz = LAYOUT.z_index[c]
        mu_v = mean[rows].sum()
        var_v = max(cov[np.ix_(rows, rows)].sum(), 0.0)
        cov_gv = cov[g, rows].sum()
        e0, e1, e2 = _erf_moments(mu_v, var_v, cfg.v0, cfg.sigma_s)
        drive[iz] = (mean[g] * e0 + cov_gv * e1) / taus[c]
        jac[iz, g] += e0 / taus[c]
        jac[iz, rows] += (mean[g] * e1 + cov_gv * e2) / taus[c]
    return drive, jac


def expected_jacobian(belief: GaussianBelief, cfg: AkfConfig):
    """``E[d f / d xi]`` of the continuous-time vector field under the belief."""
    _, jac = _sigmoid_terms(belief.mean, belief.cov, cfg)
    return cfg._A + jac


def predict(belief: GaussianBelief, cfg: AkfConfig, step=None) -> GaussianBelief:
    drive, jac = _sigmoid_terms(belief.mean, belief.cov, cfg)
    mean = belief.mean + cfg.dt * (cfg._A @ belief.mean + drive)
    F = np.eye(N_AUG) + cfg.dt * (cfg._A + jac)
    cov = F @ belief.cov @ F.T + cfg.Q
    cov = _ensure_psd(cov, step)
    return GaussianBelief(mean, cov)


def observation_row():
    return LAYOUT.observation_row(N_AUG)


def update(prior: GaussianBelief, y, cfg: AkfConfig, step=None, H=None):
    """Kalman update; returns ``(posterior, innovation)``."""
    H = observation_row() if H is None else H
    innov = float(y - H @ prior.mean)
    PH = prior.cov @ H
    S = float(H @ PH + cfg.R)
    if not (math.isfinite(innov) and math.isfinite(S)) or S <= 0:
        raise FilterDivergence(f"invalid innovation at step {step}", step=step)
    K = PH / S
    mean = prior.mean + K * innov
    cov = prior.cov - np.outer(K, PH)
    cov = _ensure_psd(cov, step)
    return GaussianBelief(mean, cov), innov


def run_akf(observations, cfg: AkfConfig, times=None) -> EstimateTrack:
    """Filter a whole recording.

    Divergence does not raise: the track is truncated at the failing step and
    ``diverged_at`` records it.
    """
    y = np.asarray(observations, dtype=float)
    if y.ndim != 1 or y.size == 0:
        raise ValueError("observations must be a non-empty 1-D sequence")
    n = y.size
    times = np.arange(n) * cfg.dt if times is None else np.asarray(times)
    H = observation_row()
    means = np.empty((n, N_AUG))
    stds = np.empty((n, N_AUG))
    innov = np.empty(n)
    belief = cfg.init_belief
    diverged_at = None
    for t in range(n):
        try:
            prior = belief if t == 0 else predict(belief, cfg, t)
            belief, innov[t] = update(prior, y[t], cfg, t, H)
            if not np.all(np.abs(belief.mean) < DIVERGENCE_BOUND):
                raise FilterDivergence(f"state estimate exploded at step {t}", step=t)
        except (FilterDivergence, np.linalg.LinAlgError) as exc:
            log.warning("filter diverged at step %d: %s", t, exc)
            diverged_at = t
            break
        means[t] = belief.mean
        stds[t] = belief.std()
    m = n if diverged_at is None else diverged_at
    tau = np.tile([cfg.tau_e, cfg.tau_i], (m, 1))
    return EstimateTrack(
        times=times[:m], y=y[:m], y_hat=means[:m] @ H, mean=np.hstack([means[:m], tau]),
        std=np.hstack([stds[:m], np.zeros((m, 2))]), innovation=innov[:m], method="akf",
        diverged_at=diverged_at,
    )
