import math

import numpy as np
import pytest

from nmmtrack.datagen import Dataset, Standardizer
from nmmtrack.errors import ConfigurationError, FormatVersionError
from nmmtrack.lstm.infer import infer, predict_standardized, standardize_recording
from nmmtrack.lstm.loss import (
    GAIN_COLS,
    PhysicsConstants,
    _model_map_vjp,
    model_map,
    physics_loss,
)
from nmmtrack.lstm.network import LstmWeights, backward, forward, lstm_forward, swap_directions
from nmmtrack.lstm.train import Adam, TrainConfig, clip_gradients, evaluate_loss, train
from nmmtrack.model import LAYOUT, ModelParams, one_step, simulate, simulate_batch


@pytest.fixture(scope="module")
def sim_stats():
    """Statistics fitted on a handful of realistic recordings."""
    pairs = [(0.01, 0.02), (0.02, 0.035), (0.035, 0.05), (0.015, 0.06)]
    params = [ModelParams().with_time_constants(te, ti).replace(u=u)
              for (te, ti), u in zip(pairs, (2000.0, 3000.0, 2500.0, 3500.0))]
    trajs = simulate_batch(params, 3.0, seeds=list(range(4)))
    obs = np.concatenate([t.observations for t in trajs])
    tgt = np.concatenate([t.targets() for t in trajs])
    return Standardizer.fit(obs, tgt), trajs


def _sigm(a):
    return 1.0 / (1.0 + math.exp(-a))


# ---------------------------------------------------------------- network

def test_init_shapes_and_forget_bias():
    w = LstmWeights.init(0)
    assert w.params["l1_fwd_Wx"].shape == (1, 512)
    assert w.params["l2_bwd_Wh"].shape == (32, 128)
    assert w.params["out_W"].shape == (64, 17)
    b = w.params["l1_fwd_b"]
    np.testing.assert_array_equal(b[128:256], 1.0)
    np.testing.assert_array_equal(b[:128], 0.0)
    bound = 1.0 / math.sqrt(1 + 128)
    assert np.abs(w.params["l1_fwd_Wh"]).max() <= bound


def test_zero_weights_give_zero_output():
    w = LstmWeights.zeros_like(LstmWeights.init(0, hidden=(5, 3)))
    x = np.random.default_rng(0).normal(size=(2, 9, 1))
    y, _ = forward(x, w)
    np.testing.assert_array_equal(y, 0.0)
    w.params["out_b"][:] = np.arange(17)
    y, _ = forward(x, w)
    np.testing.assert_array_equal(y, np.broadcast_to(np.arange(17.0), y.shape))


def test_three_step_hand_unrolled():
    rng = np.random.default_rng(3)
    H = 2
    w = LstmWeights.init(4, hidden=(H,), n_out=1)
    for v in w.params.values():
        v[...] = rng.normal(size=v.shape)
    x = np.array([0.3, -1.2, 0.7])

    def run(xs, Wx, Wh, b):
        h = [0.0] * H
        c = [0.0] * H
        hs = []
        for xt in xs:
            a = [xt * Wx[0, j] + sum(h[k] * Wh[k, j] for k in range(H)) + b[j] for j in range(4 * H)]
            i = [_sigm(a[j]) for j in range(H)]
            f = [_sigm(a[H + j]) for j in range(H)]
            o = [_sigm(a[2 * H + j]) for j in range(H)]
            g = [math.tanh(a[3 * H + j]) for j in range(H)]
            c = [f[j] * c[j] + i[j] * g[j] for j in range(H)]
            h = [o[j] * math.tanh(c[j]) for j in range(H)]
            hs.append(h)
        return hs

    p = w.params
    hf = run(x, p["l1_fwd_Wx"], p["l1_fwd_Wh"], p["l1_fwd_b"])
    hb = run(x[::-1], p["l1_bwd_Wx"], p["l1_bwd_Wh"], p["l1_bwd_b"])[::-1]
    expect = [sum((hf[t] + hb[t])[k] * p["out_W"][k, 0] for k in range(2 * H)) + p["out_b"][0] for t in range(3)]
    got = lstm_forward(x, w)[:, 0]
    np.testing.assert_allclose(got, expect, rtol=1e-12, atol=1e-14)


def test_time_reversal_with_swapped_directions():
    w = LstmWeights.init(5, hidden=(6, 4))
    x = np.random.default_rng(1).normal(size=(3, 11, 1))
    y, _ = forward(x, w)
    y_rev, _ = forward(x[:, ::-1], swap_directions(w))
    np.testing.assert_allclose(y_rev[:, ::-1], y, rtol=1e-12, atol=1e-13)


def test_lstm_forward_shapes():
    w = LstmWeights.init(0, hidden=(4, 3))
    x = np.zeros(20)
    assert lstm_forward(x, w).shape == (20, 17)
    assert lstm_forward(x[:, None], w).shape == (20, 17)
    assert lstm_forward(np.zeros((2, 20, 1)), w).shape == (2, 20, 17)


def test_network_gradient_finite_difference():
    rng = np.random.default_rng(7)
    w = LstmWeights.init(2, hidden=(6, 4))
    x = rng.normal(size=(2, 8, 1))
    G = rng.normal(size=(2, 8, 17))
    out, cache = forward(x, w)
    grads = backward(G, cache, w)
    h = 1e-6
    for name, v in w.params.items():
        flat = v.reshape(-1)
        idx = rng.choice(flat.size, size=min(20, flat.size), replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            lp = float((forward(x, w, keep_cache=False)[0] * G).sum())
            flat[i] = old - h
            lm = float((forward(x, w, keep_cache=False)[0] * G).sum())
            flat[i] = old
            num = (lp - lm) / (2 * h)
            ana = grads[name].reshape(-1)[i]
            assert abs(ana - num) <= 1e-6 * max(1.0, abs(num)), (name, i, ana, num)


def test_end_to_end_gradient_with_physics_loss(sim_stats):
    stats, trajs = sim_stats
    rng = np.random.default_rng(9)
    w = LstmWeights.init(3, hidden=(5, 3))
    T = 10
    tgt = stats.targets(np.stack([t.targets()[100:100 + T] for t in trajs[:2]]))
    obs = stats.obs(np.stack([t.observations[100:100 + T] for t in trajs[:2]]))
    # start the readout near the truth so the loss is in a realistic regime
    w.params["out_b"][:] = tgt.mean(axis=(0, 1))

    def loss():
        return physics_loss(forward(obs[..., None], w, keep_cache=False)[0], tgt, obs, stats, 0.1).total

    out, cache = forward(obs[..., None], w)
    _, dP = physics_loss(out, tgt, obs, stats, 0.1, return_grad=True)
    grads = backward(dP, cache, w)
    h = 1e-7
    for name, v in w.params.items():
        flat = v.reshape(-1)
        for i in rng.choice(flat.size, size=min(20, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            lp = loss()
            flat[i] = old - h
            lm = loss()
            flat[i] = old
            num = (lp - lm) / (2 * h)
            ana = grads[name].reshape(-1)[i]
            # the loss is O(1e5) here, so round-off limits the difference quotient
            assert abs(ana - num) <= 1e-3 * max(abs(num), 1e-3 * np.abs(grads[name]).max()), (name, ana, num)


# ---------------------------------------------------------------- loss

def test_model_map_matches_one_step(sim_stats):
    _, trajs = sim_stats
    X = trajs[1].targets()[50:60]
    M = model_map(X, PhysicsConstants())
    ref = one_step(X[:, :15], X[:, 15], X[:, 16], 6.0, 3.0, 1 / 400)
    np.testing.assert_allclose(M[:, :15], ref, rtol=1e-14)
    np.testing.assert_array_equal(M[:, 15:], X[:, 15:])


def test_model_map_vjp_matches_finite_difference(sim_stats):
    _, trajs = sim_stats
    rng = np.random.default_rng(1)
    X = trajs[2].targets()[200:205].copy()
    const = PhysicsConstants()
    G = rng.normal(size=X.shape)
    ana = _model_map_vjp(X, G, const)
    for j in range(17):
        h = 1e-6 * max(1.0, np.abs(X[:, j]).max())
        Xp, Xm = X.copy(), X.copy()
        Xp[:, j] += h
        Xm[:, j] -= h
        num = ((model_map(Xp, const) - model_map(Xm, const)) * G).sum(axis=1) / (2 * h)
        np.testing.assert_allclose(ana[:, j], num, rtol=1e-5, atol=1e-6 * np.abs(ana).max())


def test_noise_free_truth_has_zero_consistency_loss():
    p = ModelParams(q_process=0.0, r_obs=0.0)
    traj = simulate(p, 1.0, seed=0)
    Y = traj.targets()
    sd = np.maximum(Y.std(axis=0), 1.0)
    stats = Standardizer(float(traj.observations.mean()), float(traj.observations.std()), Y.mean(axis=0), sd)
    P = stats.targets(Y)
    terms = physics_loss(P, P, stats.obs(traj.observations), stats, 0.1)
    assert terms.term1 == pytest.approx(0.0, abs=1e-20)
    assert terms.term2 < 1e-20
    assert terms.term3 == 0.0


def test_loss_hand_computed_term1():
    stats = Standardizer(0.0, 1.0, np.zeros(17), np.ones(17))
    P = np.zeros((2, 17))
    Y = np.ones((2, 17))
    o = np.array([3.0, 3.0])
    terms = physics_loss(P, Y, o, stats, 0.0)
    assert terms.term1 == pytest.approx((2 * 17 + 2 * 9) / (2 * 18))


def test_k_zero_and_weight(sim_stats):
    stats, trajs = sim_stats
    rng = np.random.default_rng(4)
    Y = stats.targets(trajs[0].targets()[:40])
    o = stats.obs(trajs[0].observations[:40])
    P = Y + 0.05 * rng.normal(size=Y.shape)
    t0 = physics_loss(P, Y, o, stats, 0.0)
    t1 = physics_loss(P, Y, o, stats, 0.1)
    assert t0.term3 == 0.0
    assert t1.term3 > 0.0
    assert t0.term1 == t1.term1 and t0.term2 == t1.term2
    half = physics_loss(P, Y, o, stats, 0.1, weight=0.5)
    assert half.term2 == pytest.approx(0.5 * t1.term2)
    assert half.term3 == pytest.approx(0.5 * t1.term3)
    assert half.term1 == t1.term1


@pytest.mark.parametrize("k,weight", [(0.1, 1.0), (0.0, 1.0), (0.3, 0.25)])
def test_loss_gradient_finite_difference(sim_stats, k, weight):
    stats, trajs = sim_stats
    rng = np.random.default_rng(5)
    Y = stats.targets(np.stack([t.targets()[300:312] for t in trajs[:2]]))
    o = stats.obs(np.stack([t.observations[300:312] for t in trajs[:2]]))
    P = Y + 0.01 * rng.normal(size=Y.shape)
    _, g = physics_loss(P, Y, o, stats, k, return_grad=True, weight=weight)
    h = 1e-7
    flat = P.reshape(-1)
    for i in rng.choice(flat.size, size=60, replace=False):
        old = flat[i]
        flat[i] = old + h
        lp = physics_loss(P, Y, o, stats, k, weight=weight).total
        flat[i] = old - h
        lm = physics_loss(P, Y, o, stats, k, weight=weight).total
        flat[i] = old
        num = (lp - lm) / (2 * h)
        assert abs(g.reshape(-1)[i] - num) <= 1e-4 * max(abs(num), 1e-6 * np.abs(g).max())


def test_term3_uses_population_std():
    stats = Standardizer(0.0, 1.0, np.zeros(17), np.ones(17))
    stats.target_mean[15:] = [0.01, 0.02]
    stats.target_std[15:] = 1e-3
    rng = np.random.default_rng(0)
    P = rng.normal(size=(6, 17)) * 0.1
    o = P[:, list(LAYOUT.pyramidal_index)].sum(axis=1)
    t = physics_loss(P, P, o, stats, 1.0)
    X = P * stats.target_std + stats.target_mean
    D = P[1:] - stats.targets(model_map(X[:-1], PhysicsConstants()))
    s = P[:, GAIN_COLS].std(axis=0)
    expect = (s * (D[:, GAIN_COLS] ** 2).sum(axis=0)).sum() / (5 * 17)
    assert t.term3 == pytest.approx(expect)


def test_loss_rejects_misaligned():
    stats = Standardizer(0.0, 1.0, np.zeros(17), np.ones(17))
    with pytest.raises(ValueError):
        physics_loss(np.zeros((4, 17)), np.zeros((5, 17)), np.zeros(4), stats)


# ---------------------------------------------------------------- serialization

def test_weights_round_trip(tmp_path, sim_stats):
    stats, _ = sim_stats
    w = LstmWeights.init(11, hidden=(4, 3))
    w.save(tmp_path / "w.npz", stats, {"lr": 1e-3})
    w2, meta = LstmWeights.load(tmp_path / "w.npz")
    assert w2.digest() == w.digest()
    assert meta["config"] == {"lr": 1e-3}
    assert Standardizer.from_dict(meta["stats"]).to_dict() == stats.to_dict()
    x = np.random.default_rng(0).normal(size=(1, 13, 1))
    np.testing.assert_array_equal(forward(x, w)[0], forward(x, w2)[0])


def test_weights_reject_wrong_format(tmp_path):
    w = LstmWeights.init(0, hidden=(2, 2))
    np.savez(tmp_path / "bad.npz", __meta__=np.array('{"format": "other/9"}'), **w.params)
    with pytest.raises(FormatVersionError):
        LstmWeights.load(tmp_path / "bad.npz")


def test_weights_reject_wrong_shape():
    w = LstmWeights.init(0, hidden=(2, 2))
    p = dict(w.params)
    p["out_b"] = np.zeros(3)
    with pytest.raises(FormatVersionError):
        LstmWeights(p, (2, 2))


# ---------------------------------------------------------------- training

def _tiny_dataset(stats, trajs, split, start):
    T = 40
    obs, tgt = [], []
    for t in trajs:
        for s in range(start, start + 4 * T, T):
            obs.append(t.observations[s:s + T])
            tgt.append(t.targets()[s:s + T])
    obs = stats.obs(np.array(obs))
    return Dataset(obs, stats.targets(np.array(tgt)), np.zeros((len(obs), 6)), stats, split)


def test_training_is_deterministic_and_reduces_loss(sim_stats):
    stats, trajs = sim_stats
    tr = _tiny_dataset(stats, trajs, "train", 0)
    va = _tiny_dataset(stats, trajs, "val", 400)
    cfg = TrainConfig(max_epochs=3, batch_size=8, hidden=(6, 4), seed=1, dtype="float64", k=0.1,
                      physics_weight=0.0)
    r1 = train(tr, va, cfg)
    r2 = train(tr, va, cfg)
    assert r1.weights.digest() == r2.weights.digest()
    assert [e.val_loss for e in r1.log] == [e.val_loss for e in r2.log]
    assert r1.log[-1].val_loss < r1.log[0].val_loss
    assert r1.log[0].epoch == 0


def test_warmup_schedule():
    cfg = TrainConfig(physics_weight=2.0, warmup_epochs=4)
    assert [cfg.weight_at(e) for e in range(1, 7)] == [0.0, 0.5, 1.0, 1.5, 2.0, 2.0]
    assert TrainConfig().weight_at(1) == 1.0


def test_warmup_epochs_not_selected(sim_stats):
    stats, trajs = sim_stats
    tr = _tiny_dataset(stats, trajs, "train", 0)
    cfg = TrainConfig(max_epochs=3, batch_size=8, hidden=(4, 3), warmup_epochs=2, dtype="float64")
    r = train(tr, tr, cfg)
    assert r.best_epoch == 3


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(k=-1)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"learning_rate": 1})
    cfg = TrainConfig(hidden=[8, 4])
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_clip_gradients():
    g = {"a": np.array([3.0, 4.0]), "b": np.array([0.0])}
    norm = clip_gradients(g, 1.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(g["a"], [0.6, 0.8])


def test_adam_first_step_moves_by_lr():
    w = LstmWeights.init(0, hidden=(2, 2))
    before = w.copy()
    grads = {k: np.ones_like(v) for k, v in w.params.items()}
    Adam(w, 0.01).step(w, grads)
    for k in w.params:
        np.testing.assert_allclose(before.params[k] - w.params[k], 0.01, rtol=1e-6)


def test_evaluate_loss_weights_by_windows(sim_stats):
    stats, trajs = sim_stats
    ds = _tiny_dataset(stats, trajs, "val", 0)
    w = LstmWeights.init(0, hidden=(3, 2))
    full = evaluate_loss(w, ds, 0.1, batch_size=len(ds))
    chunked = evaluate_loss(w, ds, 0.1, batch_size=5)
    np.testing.assert_allclose(full, chunked, rtol=1e-10)


# ---------------------------------------------------------------- inference

def test_recording_scaling_is_amplitude_free(sim_stats):
    stats, trajs = sim_stats
    w = LstmWeights.init(0, hidden=(4, 3))
    y = trajs[0].observations[:1000]
    a = infer(y, w, stats)
    b = infer(250.0 * y + 7.0, w, stats)
    np.testing.assert_allclose(a.meta["standardized"], b.meta["standardized"], rtol=1e-9, atol=1e-12)


def test_flat_input_uses_std_floor(sim_stats):
    stats, _ = sim_stats
    z = standardize_recording(np.full(50, 3.0), stats)
    np.testing.assert_array_equal(z, 0.0)


def test_infer_handles_partial_windows(sim_stats):
    stats, trajs = sim_stats
    w = LstmWeights.init(1, hidden=(4, 3))
    y = trajs[0].observations[:1000]
    track = infer(y, w, stats, scaling="dataset")
    assert len(track) == 1000 and track.mean.shape == (1000, 17)
    z = stats.obs(y)
    np.testing.assert_allclose(track.meta["standardized"][:400], lstm_forward(z[:400], w))
    np.testing.assert_allclose(track.meta["standardized"][800:], lstm_forward(z[800:], w))
    np.testing.assert_allclose(track.y_hat, track.mean[:, [0, 2, 8]].sum(axis=1))


def test_predict_standardized_batches_consistently():
    w = LstmWeights.init(2, hidden=(3, 2))
    x = np.random.default_rng(0).normal(size=4 * 50 + 7)
    np.testing.assert_allclose(predict_standardized(x, w, window=50, batch=1),
                               predict_standardized(x, w, window=50, batch=64), rtol=1e-12)


def test_unknown_scaling(sim_stats):
    with pytest.raises(ValueError):
        standardize_recording(np.zeros(3), sim_stats[0], "global")
