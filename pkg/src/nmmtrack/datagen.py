"""Training corpus generation: input sweep, oscillation gating, windowing, splits."""
from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, FormatVersionError
from .model import N_TARGET, TARGET_NAMES, ModelParams, Trajectory, simulate_batch
from .stats import DEFAULT_ALPHA, detect_oscillation

log = logging.getLogger(__name__)

WINDOW = 400
DATASET_FORMAT = "nmmtrack-dataset/1"
TRAIN_GRID_AXIS = tuple(round(0.01 + 0.005 * k, 4) for k in range(11))
# every 2nd-3rd point of the full axis; contains the default point (0.01, 0.02)
DESK_GRID_AXIS = (0.01, 0.02, 0.035, 0.05, 0.06)


def grid_pairs(axis_e, axis_i=None):
    axis_i = axis_e if axis_i is None else axis_i
    return [(float(te), float(ti)) for te in axis_e for ti in axis_i]


@dataclass
class SweepConfig:
    tau_grid: list = field(default_factory=lambda: grid_pairs(TRAIN_GRID_AXIS))
    u_start: float = 50.0
    u_growth: float = 1.25
    u_floor: float = 5.0
    u_ceiling: float = 1e6
    max_failures: int = 15
    segment_len: int = 800
    record_len: float = 10.0
    transient: float = 1.0
    alpha: float = DEFAULT_ALPHA
    lags: int | None = None
    max_redraws: int = 10
    seed: int = 0
    base: ModelParams = field(default_factory=ModelParams)

    def __post_init__(self):
        self.tau_grid = [(float(a), float(b)) for a, b in self.tau_grid]
        for te, ti in self.tau_grid:
            if not (0.01 - 1e-12 <= te <= 0.06 + 1e-12 and 0.01 - 1e-12 <= ti <= 0.06 + 1e-12):
                raise ConfigurationError(f"time constants ({te}, {ti}) outside [0.01, 0.06]")
        if self.max_failures < 1:
            raise ConfigurationError("max_failures must be >= 1")
        if self.u_growth < 1 or self.u_floor < 0 or (self.u_growth == 1 and self.u_floor == 0):
            raise ConfigurationError("input schedule must be strictly increasing")

    def next_u(self, u):
        """Step grows with ``u``: small increments at low input, large at high."""
        return u * self.u_growth + self.u_floor

    def params_for(self, tau_e, tau_i, u) -> ModelParams:
        return self.base.with_time_constants(tau_e, tau_i).replace(u=float(u))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["base"] = self.base.to_dict()
        d["tau_grid"] = [list(p) for p in self.tau_grid]
        return d

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown SweepConfig keys: {sorted(unknown)}")
        if "base" in data and isinstance(data["base"], dict):
            data["base"] = ModelParams.from_dict(data["base"])
        return cls(**data)


@dataclass(frozen=True)
class InputRange:
    tau_e: float
    tau_i: float
    u_lo: float
    u_hi: float

    def __post_init__(self):
        if self.u_lo > self.u_hi:
            raise ValueError("u_lo must not exceed u_hi")


@dataclass
class SweepResult:
    tau_e: float
    tau_i: float
    tried: list  # (u, oscillating) in sweep order
    range: InputRange | None

    @property
    def increases(self):
        return len(self.tried) - 1


def _pair_key(tau_e, tau_i):
    return [int(round(tau_e * 1e6)), int(round(tau_i * 1e6))]


def gate_inputs(tau_e, tau_i, us, cfg: SweepConfig, seeds) -> np.ndarray:
    """Run the oscillation gate for several inputs at one time-constant pair.

    Gate segments are simulated without process noise: with noise a stable
    fixed point produces coloured noise that the whiteness test would flag.
    Observation noise is kept so a settled fixed point looks Gaussian and white.
    """
    params = [cfg.params_for(tau_e, tau_i, u).replace(q_process=0.0, q_param=0.0) for u in us]
    duration = cfg.segment_len * cfg.base.dt
    trajs = simulate_batch(params, duration, seeds, transient=cfg.transient)
    out = np.zeros(len(us), dtype=bool)
    for k, tr in enumerate(trajs):
        if tr is None:
            log.info("divergence at tau=(%g, %g) u=%g treated as non-oscillatory", tau_e, tau_i, us[k])
            continue
        out[k] = detect_oscillation(tr.observations[: cfg.segment_len], cfg.alpha, cfg.lags)
    return out


def sweep_input(tau_e, tau_i, cfg: SweepConfig, chunk=16) -> SweepResult:
    """Increase the input until oscillation appears and then until it is lost.

    The pair is abandoned after ``max_failures`` consecutive failed increases
    without any success; otherwise the sweep stops after ``max_failures``
    consecutive failures past the last success or at ``u_ceiling``.
    """
    schedule = [cfg.u_start]
    while cfg.next_u(schedule[-1]) <= cfg.u_ceiling:
        schedule.append(cfg.next_u(schedule[-1]))
    key = _pair_key(tau_e, tau_i)
    tried, lo, hi, fails = [], None, None, 0
    k = 0
    while k < len(schedule):
        us = schedule[k:k + chunk]
        ok = gate_inputs(tau_e, tau_i, us, cfg, [[cfg.seed, 0, *key, k + j] for j in range(len(us))])
        stop = False
        for j, u in enumerate(us):
            tried.append((u, bool(ok[j])))
            if ok[j]:
                lo = u if lo is None else lo
                hi, fails = u, 0
            elif k + j > 0:
                fails += 1
            if fails >= cfg.max_failures:
                stop = True
                break
        if stop:
            break
        k += chunk
    rng_ = InputRange(tau_e, tau_i, lo, hi) if lo is not None else None
    if rng_ is None:
        log.info("tau=(%g, %g): no oscillation after %d increases", tau_e, tau_i, len(tried) - 1)
    return SweepResult(tau_e, tau_i, tried, rng_)


def find_input_range(tau_e, tau_i, cfg: SweepConfig) -> InputRange | None:
    return sweep_input(tau_e, tau_i, cfg).range


def sweep_grid(cfg: SweepConfig, pairs=None, workers=1) -> list:
    """Sweep every pair; results are ordered like ``pairs`` for any worker count."""
    pairs = cfg.tau_grid if pairs is None else pairs
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            return list(ex.map(sweep_input, [p[0] for p in pairs], [p[1] for p in pairs], [cfg] * len(pairs)))
    return [sweep_input(te, ti, cfg) for te, ti in pairs]


@dataclass
class Recording:
    """One production simulation with its gate decision."""

    tau_e: float
    tau_i: float
    u: float
    trajectory: Trajectory
    gate_passed: bool


def simulate_recordings(cfg: SweepConfig, ranges, inputs_per_pair, tag=1, duration=None) -> list:
    """Draw ``inputs_per_pair`` inputs uniformly in each range and simulate.

    A recording whose leading gate segment is not oscillatory is redrawn up to
    ``max_redraws`` times and then dropped.
    """
    duration = cfg.record_len if duration is None else duration
    out = []
    for rng_ in ranges:
        if rng_ is None:
            continue
        key = _pair_key(rng_.tau_e, rng_.tau_i)
        done = {}
        pending = list(range(inputs_per_pair))
        for attempt in range(cfg.max_redraws + 1):
            if not pending:
                break
            # members of one batch draw from their own generators, so batching
            # does not change any recording
            seeds = [[cfg.seed, tag, *key, j, attempt] for j in pending]
            us = [float(np.random.default_rng(s).uniform(rng_.u_lo, rng_.u_hi)) for s in seeds]
            params = [cfg.params_for(rng_.tau_e, rng_.tau_i, u) for u in us]
            trajs = simulate_batch(params, duration, seeds, transient=cfg.transient)
            failed = []
            for j, u, tr in zip(pending, us, trajs):
                if tr is not None and detect_oscillation(tr.observations[: cfg.segment_len], cfg.alpha, cfg.lags):
                    done[j] = Recording(rng_.tau_e, rng_.tau_i, u, tr, True)
                else:
                    failed.append(j)
            pending = failed
        for j in pending:
            log.info("dropping input %d at tau=(%g, %g): gate failed", j, rng_.tau_e, rng_.tau_i)
        out.extend(done[j] for j in sorted(done))
    return out


@dataclass
class Standardizer:
    """Per-variable z-scoring statistics computed on the training split."""

    obs_mean: float
    obs_std: float
    target_mean: np.ndarray
    target_std: np.ndarray

    @classmethod
    def fit(cls, obs, targets):
        t = targets.reshape(-1, targets.shape[-1])
        sd = t.std(axis=0)
        if obs.std() == 0 or np.any(sd == 0):
            bad = [TARGET_NAMES[i] for i in np.flatnonzero(sd == 0)]
            raise ConfigurationError(f"zero variance in training split: {bad or ['observation']}")
        return cls(float(obs.mean()), float(obs.std()), t.mean(axis=0), sd)

    def obs(self, y):
        return (np.asarray(y) - self.obs_mean) / self.obs_std

    def targets(self, t):
        return (np.asarray(t) - self.target_mean) / self.target_std

    def obs_inverse(self, y):
        return np.asarray(y) * self.obs_std + self.obs_mean

    def targets_inverse(self, t):
        return np.asarray(t) * self.target_std + self.target_mean

    def to_dict(self):
        return {"obs_mean": self.obs_mean, "obs_std": self.obs_std,
                "target_mean": self.target_mean.tolist(), "target_std": self.target_std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["obs_mean"]), float(d["obs_std"]),
                   np.asarray(d["target_mean"], dtype=float), np.asarray(d["target_std"], dtype=float))


META_COLUMNS = ("tau_e", "tau_i", "u", "recording", "window", "global_index")


@dataclass
class Dataset:
    obs: np.ndarray  # (N, W) standardized
    targets: np.ndarray  # (N, W, 17) standardized
    meta: np.ndarray  # (N, 6) see META_COLUMNS
    stats: Standardizer
    split: str

    def __len__(self):
        return len(self.obs)

    @property
    def global_index(self):
        return self.meta[:, 5].astype(int)

    def raw_obs(self):
        return self.stats.obs_inverse(self.obs)

    def raw_targets(self):
        return self.stats.targets_inverse(self.targets)


@dataclass
class Corpus:
    train: Dataset
    val: Dataset
    test: Dataset
    ranges: list
    config: SweepConfig

    def __iter__(self):
        return iter((self.train, self.val, self.test))

    @property
    def stats(self):
        return self.train.stats


def window_recordings(recordings, windows_per_recording=None, window=WINDOW):
    obs, tgt, meta = [], [], []
    for r_id, rec in enumerate(recordings):
        y = rec.trajectory.observations
        t = rec.trajectory.targets()
        n_win = len(y) // window
        if windows_per_recording is not None:
            n_win = min(n_win, windows_per_recording)
        for w in range(n_win):
            sl = slice(w * window, (w + 1) * window)
            obs.append(y[sl])
            tgt.append(t[sl])
            meta.append([rec.tau_e, rec.tau_i, rec.u, r_id, w, 0])
    if not obs:
        raise ConfigurationError("no windows produced")
    meta = np.asarray(meta, dtype=float)
    meta[:, 5] = np.arange(len(meta))
    return np.asarray(obs), np.asarray(tgt), meta


def split_sizes(n):
    """80:10:10 by floor; the remainder goes to the test split."""
    n_train = 8 * n // 10
    n_val = n // 10
    return n_train, n_val, n - n_train - n_val


def generate_dataset(cfg: SweepConfig, inputs_per_pair=8, windows_per_recording=None, workers=1,
                     sweeps=None) -> Corpus:
    """Sweep, simulate, window, shuffle, split 80:10:10 and standardize."""
    sweeps = sweep_grid(cfg, workers=workers) if sweeps is None else sweeps
    ranges = [s.range for s in sweeps if s.range is not None]
    if not ranges:
        raise ConfigurationError("no time-constant pair produced oscillations")
    recordings = simulate_recordings(cfg, ranges, inputs_per_pair)
    obs, tgt, meta = window_recordings(recordings, windows_per_recording)
    perm = np.random.default_rng([cfg.seed, 2]).permutation(len(obs))
    n_train, n_val, _ = split_sizes(len(obs))
    parts = np.split(perm, [n_train, n_train + n_val])
    stats = Standardizer.fit(obs[parts[0]], tgt[parts[0]])
    splits = [Dataset(stats.obs(obs[ix]), stats.targets(tgt[ix]), meta[ix], stats, name)
              for ix, name in zip(parts, ("train", "val", "test"))]
    return Corpus(*splits, ranges=ranges, config=cfg)


def offgrid_pairs(pairs):
    """Pairs on the midpoints between consecutive training axis values."""
    te_axis = sorted({p[0] for p in pairs})
    ti_axis = sorted({p[1] for p in pairs})
    mid = lambda ax: [round((a + b) / 2, 6) for a, b in zip(ax[:-1], ax[1:])] or list(ax)
    return grid_pairs(mid(te_axis), mid(ti_axis))


def generate_offgrid_testset(cfg: SweepConfig, stats: Standardizer, inputs_per_pair=2,
                             windows_per_recording=None, workers=1) -> Dataset:
    pairs = offgrid_pairs(cfg.tau_grid)
    sweeps = sweep_grid(cfg, pairs, workers=workers)
    ranges = [s.range for s in sweeps if s.range is not None]
    if not ranges:
        raise ConfigurationError("no off-grid pair produced oscillations")
    recordings = simulate_recordings(cfg, ranges, inputs_per_pair, tag=3)
    obs, tgt, meta = window_recordings(recordings, windows_per_recording)
    return Dataset(stats.obs(obs), stats.targets(tgt), meta, stats, "offgrid")


def save_corpus(corpus: Corpus, directory):
    """Directory layout: ``meta.json`` plus ``<split>_{obs,targets,meta}.npy``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": DATASET_FORMAT,
        "version": __version__,
        "config": corpus.config.to_dict(),
        "stats": corpus.stats.to_dict(),
        "ranges": [dataclasses.asdict(r) for r in corpus.ranges],
        "splits": {},
        "layout": {"obs": "windows x time", "targets": "windows x time x variables",
                   "targets_names": list(TARGET_NAMES), "meta_columns": list(META_COLUMNS)},
    }
    for ds in corpus:
        np.save(d / f"{ds.split}_obs.npy", ds.obs)
        np.save(d / f"{ds.split}_targets.npy", ds.targets)
        np.save(d / f"{ds.split}_meta.npy", ds.meta)
        meta["splits"][ds.split] = ds.global_index.tolist()
    (d / "meta.json").write_text(json.dumps(meta, indent=1))


def load_corpus(directory) -> Corpus:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    if meta.get("format") != DATASET_FORMAT:
        raise FormatVersionError(f"dataset format {meta.get('format')!r} != {DATASET_FORMAT!r}")
    stats = Standardizer.from_dict(meta["stats"])
    splits = []
    for name in ("train", "val", "test"):
        ds = Dataset(np.load(d / f"{name}_obs.npy"), np.load(d / f"{name}_targets.npy"),
                     np.load(d / f"{name}_meta.npy"), stats, name)
        if ds.targets.shape[-1] != N_TARGET:
            raise FormatVersionError("target dimension mismatch")
        splits.append(ds)
    ranges = [InputRange(**r) for r in meta["ranges"]]
    return Corpus(*splits, ranges=ranges, config=SweepConfig.from_dict(meta["config"]))
