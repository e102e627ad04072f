"""Apply a trained network to recordings of any length."""
from __future__ import annotations

import numpy as np

from ..datagen import WINDOW, Standardizer
from ..model import LAYOUT
from ..tracks import EstimateTrack
from .network import LstmWeights, forward

# per-recording std floor for flat input
STD_FLOOR = 1e-6


def standardize_recording(y, stats: Standardizer, scaling="recording"):
    """``recording``: z-score with the recording's own mean/std (amplitude free).
    ``dataset``: use the training observation statistics (simulated data only)."""
    y = np.asarray(y, dtype=float)
    if scaling == "recording":
        return (y - y.mean()) / max(float(y.std()), STD_FLOOR)
    if scaling == "dataset":
        return stats.obs(y)
    raise ValueError(f"unknown scaling {scaling!r}")


def predict_standardized(x, w: LstmWeights, window=WINDOW, batch=256):
    """Non-overlapping windows; the tail shorter than ``window`` is run as-is."""
    x = np.asarray(x, dtype=float)
    n = x.size
    n_full = n // window
    out = np.empty((n, w.n_out))
    full = x[: n_full * window].reshape(n_full, window).astype(w.dtype)
    for s in range(0, n_full, batch):
        y = forward(full[s:s + batch, :, None], w, keep_cache=False)[0]
        out[s * window:(s + len(y)) * window] = y.reshape(-1, w.n_out)
    if n_full * window < n:
        tail = x[n_full * window:].astype(w.dtype)
        out[n_full * window:] = forward(tail[None, :, None], w, keep_cache=False)[0][0]
    return out


def infer(recording, w: LstmWeights, stats: Standardizer, scaling="recording", dt=1.0 / 400.0,
          window=WINDOW) -> EstimateTrack:
    y = np.asarray(recording, dtype=float).ravel()
    if y.size < 1:
        raise ValueError("recording must contain at least one sample")
    z = standardize_recording(y, stats, scaling)
    pred = predict_standardized(z, w, window)
    mean = stats.targets_inverse(pred)
    y_hat = mean[:, list(LAYOUT.pyramidal_index)].sum(axis=1)
    track = EstimateTrack(np.arange(y.size) * dt, y, y_hat, mean, method="lstm")
    track.meta["standardized"] = pred
    return track
