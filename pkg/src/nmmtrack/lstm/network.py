"""Two-layer bidirectional LSTM with a per-timestep linear readout, in numpy.

Gate blocks are stacked in the order (input, forget, output, candidate) along
the last axis of every weight matrix::

    a_t = x_t @ Wx + h_{t-1} @ Wh + b
    i, f, o = sigmoid(a[:H]), sigmoid(a[H:2H]), sigmoid(a[2H:3H])
    g = tanh(a[3H:])
    c_t = f * c_{t-1} + i * g
    h_t = o * tanh(c_t)

The backward direction runs the same recurrence on the time-reversed input and
its outputs are flipped back before being concatenated with the forward ones.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..errors import FormatVersionError, NumericalError

WEIGHTS_FORMAT = "nmmtrack-lstm/1"
DIRECTIONS = ("fwd", "bwd")


def _names(n_layers):
    out = []
    for layer in range(1, n_layers + 1):
        for d in DIRECTIONS:
            out += [f"l{layer}_{d}_Wx", f"l{layer}_{d}_Wh", f"l{layer}_{d}_b"]
    return out + ["out_W", "out_b"]


class LstmWeights:
    """Named parameter blocks plus the architecture that fixes their shapes."""

    def __init__(self, params: dict, hidden=(128, 32), n_in=1, n_out=17):
        self.hidden = tuple(int(h) for h in hidden)
        self.n_in = int(n_in)
        self.n_out = int(n_out)
        self.params = {k: np.asarray(params[k]) for k in _names(len(self.hidden))}
        self._check()

    def expected_shapes(self):
        shapes = {}
        d_in = self.n_in
        for layer, H in enumerate(self.hidden, start=1):
            for d in DIRECTIONS:
                shapes[f"l{layer}_{d}_Wx"] = (d_in, 4 * H)
                shapes[f"l{layer}_{d}_Wh"] = (H, 4 * H)
                shapes[f"l{layer}_{d}_b"] = (4 * H,)
            d_in = 2 * H
        shapes["out_W"] = (d_in, self.n_out)
        shapes["out_b"] = (self.n_out,)
        return shapes

    def _check(self):
        for name, shape in self.expected_shapes().items():
            arr = self.params[name]
            if arr.shape != shape:
                raise FormatVersionError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite values in {name}")

    @classmethod
    def init(cls, seed=0, hidden=(128, 32), n_in=1, n_out=17, dtype=np.float64):
        """Uniform in +-1/sqrt(fan_in) per gate block, forget bias +1."""
        rng = np.random.default_rng(seed)
        shell = cls.__new__(cls)
        shell.hidden, shell.n_in, shell.n_out = tuple(hidden), n_in, n_out
        params = {}
        for name, shape in shell.expected_shapes().items():
            if name.endswith("_b") and name.startswith("l"):
                H = shape[0] // 4
                b = np.zeros(shape)
                b[H:2 * H] = 1.0
                params[name] = b.astype(dtype)
                continue
            if name == "out_b":
                params[name] = np.zeros(shape, dtype=dtype)
                continue
            fan_in = shape[0]
            if name.endswith("_Wx") or name.endswith("_Wh"):
                # recurrent and input weights both feed the same pre-activation
                layer = int(name[1])
                H = shell.hidden[layer - 1]
                d_in = n_in if layer == 1 else 2 * shell.hidden[layer - 2]
                fan_in = d_in + H
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        return cls(params, hidden, n_in, n_out)

    @classmethod
    def zeros_like(cls, other):
        return cls({k: np.zeros_like(v) for k, v in other.params.items()}, other.hidden, other.n_in, other.n_out)

    def copy(self):
        return LstmWeights({k: v.copy() for k, v in self.params.items()}, self.hidden, self.n_in, self.n_out)

    def astype(self, dtype):
        return LstmWeights({k: v.astype(dtype) for k, v in self.params.items()}, self.hidden, self.n_in,
                           self.n_out)

    @property
    def dtype(self):
        return self.params["out_W"].dtype

    def names(self):
        return list(self.params)

    def n_params(self):
        return sum(v.size for v in self.params.values())

    def digest(self):
        h = hashlib.sha256()
        for k in self.names():
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()[:16]

    def save(self, path, stats=None, config=None):
        """``.npz`` container; architecture, stats and config ride along as JSON."""
        meta = {"format": WEIGHTS_FORMAT, "hidden": list(self.hidden), "n_in": self.n_in, "n_out": self.n_out,
                "shapes": {k: list(v.shape) for k, v in self.params.items()},
                "stats": stats.to_dict() if stats is not None else None,
                "config": config,
                "config_hash": hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta)), **self.params)

    @classmethod
    def load(cls, path):
        """Return ``(weights, meta)``."""
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("format") != WEIGHTS_FORMAT:
                raise FormatVersionError(f"weights format {meta.get('format')!r} != {WEIGHTS_FORMAT!r}")
            params = {k: z[k] for k in z.files if k != "__meta__"}
        return cls(params, meta["hidden"], meta["n_in"], meta["n_out"]), meta


def swap_directions(w: LstmWeights) -> LstmWeights:
    """Exchange forward and backward blocks of every layer.

    The input rows of each later layer (and of the readout) are permuted too,
    because they consume the concatenation ``[fwd, bwd]`` of the layer below.
    """
    p = {k: v.copy() for k, v in w.params.items()}
    for layer in range(1, len(w.hidden) + 1):
        for s in ("Wx", "Wh", "b"):
            p[f"l{layer}_fwd_{s}"], p[f"l{layer}_bwd_{s}"] = p[f"l{layer}_bwd_{s}"], p[f"l{layer}_fwd_{s}"]
    for layer in range(2, len(w.hidden) + 2):
        H = w.hidden[layer - 2]
        keys = [f"l{layer}_fwd_Wx", f"l{layer}_bwd_Wx"] if layer <= len(w.hidden) else ["out_W"]
        for k in keys:
            p[k] = np.concatenate([p[k][H:], p[k][:H]], axis=0)
    return LstmWeights(p, w.hidden, w.n_in, w.n_out)


def _sigmoid(a):
    # same function as the logistic, but far cheaper than expit in float32
    return 0.5 * np.tanh(0.5 * a) + 0.5


def _direction_forward(x, Wx, Wh, b):
    """One direction over time-major input ``x`` of shape ``(T, B, D)``."""
    T, B, _ = x.shape
    H = Wh.shape[0]
    xw = x @ Wx + b
    gates = np.empty((T, B, 4 * H), dtype=xw.dtype)
    cells = np.empty((T, B, H), dtype=xw.dtype)
    tanh_c = np.empty((T, B, H), dtype=xw.dtype)
    hs = np.empty((T, B, H), dtype=xw.dtype)
    h = np.zeros((B, H), dtype=xw.dtype)
    c = np.zeros((B, H), dtype=xw.dtype)
    for t in range(T):
        a = xw[t] + h @ Wh
        g = gates[t]
        g[:, :3 * H] = _sigmoid(a[:, :3 * H])
        g[:, 3 * H:] = np.tanh(a[:, 3 * H:])
        c = g[:, H:2 * H] * c + g[:, :H] * g[:, 3 * H:]
        tc = np.tanh(c)
        h = g[:, 2 * H:3 * H] * tc
        cells[t] = c
        tanh_c[t] = tc
        hs[t] = h
    return hs, (x, gates, cells, tanh_c, hs)


def _direction_backward(dhs, cache, Wx, Wh):
    x, gates, cells, tanh_c, hs = cache
    T, B, H = hs.shape
    da = np.empty_like(gates)
    dh_next = np.zeros((B, H), dtype=hs.dtype)
    dc_next = np.zeros((B, H), dtype=hs.dtype)
    zero = np.zeros((B, H), dtype=hs.dtype)
    for t in range(T - 1, -1, -1):
        g = gates[t]
        i, f, o, cand = g[:, :H], g[:, H:2 * H], g[:, 2 * H:3 * H], g[:, 3 * H:]
        tc = tanh_c[t]
        dh = dhs[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        c_prev = cells[t - 1] if t > 0 else zero
        d = da[t]
        d[:, :H] = dc * cand * i * (1.0 - i)
        d[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        d[:, 2 * H:3 * H] = dh * tc * o * (1.0 - o)
        d[:, 3 * H:] = dc * i * (1.0 - cand * cand)
        dc_next = dc * f
        dh_next = d @ Wh.T
    flat = da.reshape(T * B, 4 * H)
    dWh = hs[:-1].reshape((T - 1) * B, H).T @ flat[B:]
    dWx = x.reshape(T * B, -1).T @ flat
    db = flat.sum(axis=0)
    dx = da @ Wx.T
    return dx, dWx, dWh, db


def forward(x, w: LstmWeights, keep_cache=True):
    """Batched forward pass: ``x`` is ``(B, T, n_in)``; returns ``(B, T, n_out)``."""
    inp = np.ascontiguousarray(np.asarray(x, dtype=w.dtype).transpose(1, 0, 2))
    caches = []
    for layer in range(1, len(w.hidden) + 1):
        p = w.params
        hf, cf = _direction_forward(inp, p[f"l{layer}_fwd_Wx"], p[f"l{layer}_fwd_Wh"], p[f"l{layer}_fwd_b"])
        hb, cb = _direction_forward(inp[::-1], p[f"l{layer}_bwd_Wx"], p[f"l{layer}_bwd_Wh"],
                                    p[f"l{layer}_bwd_b"])
        out = np.concatenate([hf, hb[::-1]], axis=-1)
        if not np.all(np.isfinite(out)):
            bad = np.argwhere(~np.isfinite(out))[0]
            raise NumericalError(f"non-finite activation in layer {layer} at timestep {bad[0]}")
        if keep_cache:
            caches.append((cf, cb))
        inp = out
    y = (inp @ w.params["out_W"] + w.params["out_b"]).transpose(1, 0, 2)
    return y, (caches, inp) if keep_cache else None


def backward(dy, cache, w: LstmWeights) -> dict:
    """Gradients of a scalar loss w.r.t. every block, given ``dL/dy`` ``(B, T, n_out)``."""
    caches, top = cache
    grads = {}
    dy = np.ascontiguousarray(np.asarray(dy, dtype=w.dtype).transpose(1, 0, 2))
    T, B, _ = dy.shape
    grads["out_W"] = top.reshape(T * B, -1).T @ dy.reshape(T * B, -1)
    grads["out_b"] = dy.sum(axis=(0, 1))
    dinp = dy @ w.params["out_W"].T
    for layer in range(len(w.hidden), 0, -1):
        H = w.hidden[layer - 1]
        cf, cb = caches[layer - 1]
        p = w.params
        dxf, grads[f"l{layer}_fwd_Wx"], grads[f"l{layer}_fwd_Wh"], grads[f"l{layer}_fwd_b"] = _direction_backward(
            dinp[..., :H], cf, p[f"l{layer}_fwd_Wx"], p[f"l{layer}_fwd_Wh"])
        dxb, grads[f"l{layer}_bwd_Wx"], grads[f"l{layer}_bwd_Wh"], grads[f"l{layer}_bwd_b"] = _direction_backward(
            dinp[::-1, :, H:], cb, p[f"l{layer}_bwd_Wx"], p[f"l{layer}_bwd_Wh"])
        dinp = dxf + dxb[::-1]
    return grads


def lstm_forward(window, w: LstmWeights):
    """Forward pass on one window ``(T,)``/``(T, 1)`` or a batch ``(B, T, 1)``."""
    x = np.asarray(window)
    if x.ndim == 1:
        return forward(x[None, :, None], w, keep_cache=False)[0][0]
    if x.ndim == 2:
        return forward(x[None], w, keep_cache=False)[0][0]
    return forward(x, w, keep_cache=False)[0]
