"""Physics-informed training loss and its exact gradient w.r.t. the predictions.

All three terms live in standardized space.  With ``P`` the predicted and ``Y``
the true standardized targets (17 columns), ``o`` the standardized observation
and ``X = P * sigma + mu`` the predictions in physical units:

term 1
    mean over timesteps and 18 components of ``(Y - P)^2`` and ``(o - y_hat)^2``
    where ``y_hat`` is the standardized pyramidal potential read from ``X``.
term 2
    mean of ``D^2`` with ``D_t = P_t - S(f(X_{t-1}))``: ``f`` is the Euler map of
    the model (time constants taken from the prediction itself, parameters held)
    and ``S`` standardizes.
term 3
    ``k`` times the mean of ``s_j D_{t,j}^2`` over the four connectivity gains,
    where ``s_j`` is the within-window standard deviation of the predicted gain.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from ..errors import NumericalError
from ..model import LAYOUT, N_AUG, N_TARGET, one_step

_SQRT_PI = np.sqrt(np.pi)
TAU_CLIP = (0.005, 0.1)
GAIN_COLS = np.array(LAYOUT.alpha_index)


@dataclass(frozen=True)
class PhysicsConstants:
    v0: float = 6.0
    sigma_s: float = 3.0
    dt: float = 1.0 / 400.0


@dataclass
class LossTerms:
    total: float
    term1: float
    term2: float
    term3: float

    def as_dict(self):
        return {"total": self.total, "term1": self.term1, "term2": self.term2, "term3": self.term3}


def _batched(a, ndim):
    a = np.asarray(a, dtype=float)
    return (a[None], True) if a.ndim == ndim - 1 else (a, False)


def model_map(X, const: PhysicsConstants):
    """Euler map on 17-column physical targets; time constants pass through."""
    tau = np.clip(X[..., 15:17], *TAU_CLIP)
    out = np.empty_like(X)
    out[..., :N_AUG] = one_step(X[..., :N_AUG], tau[..., 0], tau[..., 1], const.v0, const.sigma_s, const.dt)
    out[..., N_AUG:] = X[..., N_AUG:]
    return out


def _model_map_vjp(X, G, const: PhysicsConstants):
    """``G @ J`` for the Jacobian ``J`` of :func:`model_map` at ``X``."""
    dt, v0, ss = const.dt, const.v0, const.sigma_s
    raw_tau = X[..., 15:17]
    tau_pair = np.clip(raw_tau, *TAU_CLIP)
    taus = LAYOUT.channel_taus(tau_pair[..., 0], tau_pair[..., 1])  # (..., 5)
    gX = G.copy()  # identity part of every row
    v = X[..., 0:10:2]
    z = X[..., 1:10:2]
    Gv = G[..., 0:10:2]
    Gz = G[..., 1:10:2]
    gains = np.concatenate([X[..., list(LAYOUT.gain_index)], np.ones(X.shape[:-1] + (1,))], axis=-1)
    v_p = X[..., 0] + X[..., 2] + X[..., 8]
    pres = np.stack([X[..., 4], X[..., 6], v_p, v_p], axis=-1)
    rates = np.concatenate([0.5 * (erf((pres - v0) / ss) + 1.0), X[..., 10:11]], axis=-1)
    drates = np.exp(-((pres - v0) / ss) ** 2) / (_SQRT_PI * ss)
    # v' = v + dt z
    gX[..., 1:10:2] += dt * Gv
    # z' = z + dt (g r / tau - 2 z / tau - v / tau^2)
    gX[..., 1:10:2] += Gz * (-2.0 * dt / taus)
    gX[..., 0:10:2] += Gz * (-dt / taus**2)
    w = Gz * dt / taus  # (..., 5)
    gX[..., list(LAYOUT.gain_index)] += w[..., :4] * rates[..., :4]
    gX[..., LAYOUT.u_index] += w[..., 4]
    chain = w[..., :4] * gains[..., :4] * drates  # d/d presynaptic potential
    gX[..., 4] += chain[..., 0]
    gX[..., 6] += chain[..., 1]
    vp_grad = chain[..., 2] + chain[..., 3]
    for r in LAYOUT.pyramidal_index:
        gX[..., r] += vp_grad
    dtau = Gz * dt * (-gains * rates / taus**2 + 2.0 * z / taus**2 + 2.0 * v / taus**3)
    kinds = np.array(LAYOUT.tau_kind)
    tau_grad = np.stack([dtau[..., kinds == 0].sum(-1), dtau[..., kinds == 1].sum(-1)], axis=-1)
    inside = (raw_tau >= TAU_CLIP[0]) & (raw_tau <= TAU_CLIP[1])
    gX[..., 15:17] += tau_grad * inside
    return gX


def _observation_std(P, stats):
    idx = list(LAYOUT.pyramidal_index)
    phys = (P[..., idx] * stats.target_std[idx] + stats.target_mean[idx]).sum(-1)
    return (phys - stats.obs_mean) / stats.obs_std


def physics_loss(pred, truth, obs, stats, k=0.1, const=PhysicsConstants(), return_grad=False, weight=1.0):
    """Loss averaged over windows; optionally ``dL/dpred`` as well.

    Parameters
    ----------
    pred, truth : array ``(T, 17)`` or ``(B, T, 17)``
    obs : array ``(T,)`` or ``(B, T)``
    stats : Standardizer
        Training-split statistics.
    k : float
        Weight of the gain-variability term.
    weight : float
        Multiplier on the two model-consistency terms (1 gives the plain sum).
    """
    P, single = _batched(pred, 3)
    Y, _ = _batched(truth, 3)
    o, _ = _batched(np.asarray(obs, dtype=float).reshape(np.shape(truth)[:-1]), 2)
    if P.shape != Y.shape or P.shape[-1] != N_TARGET or o.shape != P.shape[:-1]:
        raise ValueError("pred, truth and obs are misaligned")
    B, T, _ = P.shape
    mu, sd = stats.target_mean, stats.target_std

    # term 1
    e = Y - P
    r = o - _observation_std(P, stats)
    n1 = T * (N_TARGET + 1)
    t1 = ((e**2).sum(axis=(1, 2)) + (r**2).sum(axis=1)) / n1

    # term 2 and 3 (need at least two timesteps)
    if T > 1:
        X = P * sd + mu
        M = (model_map(X[:, :-1], const) - mu) / sd
        D = P[:, 1:] - M
        n2 = (T - 1) * N_TARGET
        t2 = (D**2).sum(axis=(1, 2)) / n2
        Pg = P[..., GAIN_COLS]
        s = Pg.std(axis=1)  # (B, 4)
        Dg2 = (D[..., GAIN_COLS] ** 2).sum(axis=1)  # (B, 4)
        t3 = k * (s * Dg2).sum(axis=1) / n2
        t2, t3 = weight * t2, weight * t3
    else:
        t2 = np.zeros(B)
        t3 = np.zeros(B)

    terms = LossTerms(float(np.mean(t1 + t2 + t3)), float(t1.mean()), float(t2.mean()), float(t3.mean()))
    for name, val in terms.as_dict().items():
        if not np.isfinite(val):
            raise NumericalError(f"non-finite loss in {name}")
    if not return_grad:
        return terms

    grad = -2.0 * e / n1
    idx = list(LAYOUT.pyramidal_index)
    grad[..., idx] += (-2.0 * r / n1)[..., None] * (sd[idx] / stats.obs_std)
    if T > 1:
        gD = 2.0 * weight * D / n2
        gD[..., GAIN_COLS] += 2.0 * weight * k * s[:, None, :] * D[..., GAIN_COLS] / n2
        grad[:, 1:] += gD
        grad[:, :-1] -= _model_map_vjp(X[:, :-1], gD / sd, const) * sd
        safe = np.where(s > 0, s, 1.0)
        coef = np.where(s > 0, weight * k * Dg2 / n2, 0.0)  # dL/ds
        grad[..., GAIN_COLS] += coef[:, None, :] * (Pg - Pg.mean(axis=1, keepdims=True)) / (T * safe[:, None, :])
    grad /= B
    return terms, (grad[0] if single else grad)
