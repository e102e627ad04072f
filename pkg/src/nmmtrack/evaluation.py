"""Benchmark protocol: standardized RMSE, time-constant grids, noise and
time-varying scenarios, LSTM versus Kalman filter comparisons."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .akf import AkfConfig, run_akf
from .datagen import SweepConfig, simulate_recordings
from .errors import DegenerateSampleError
from .model import LAYOUT, N_AUG, TARGET_NAMES, ModelParams, ParamSchedule, Trajectory, simulate
from .tracks import EstimateTrack

log = logging.getLogger(__name__)

PARAM_VARS = tuple(TARGET_NAMES[i] for i in LAYOUT.param_index)
GAIN_VARS = tuple(TARGET_NAMES[i] for i in LAYOUT.alpha_index)
STATE_VARS = TARGET_NAMES[:10]
METHODS = ("lstm", "akf-perfect", "akf-fixed")
R2_DEFINITION = "R^2 = squared Pearson correlation between truth and prediction, pooled over samples"


def rmse_standardized(truth, pred, sigma):
    """Per-variable ``sqrt(mean(((x - x_hat) / sigma)^2))``; the mean cancels."""
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if truth.shape != pred.shape:
        raise ValueError("truth and prediction differ in shape")
    if np.any(sigma <= 0):
        raise DegenerateSampleError("standardizing std must be positive for every variable")
    return np.sqrt(np.mean(((truth - pred) / sigma) ** 2, axis=0))


def r_squared(truth, pred):
    truth = np.asarray(truth, dtype=float).ravel()
    pred = np.asarray(pred, dtype=float).ravel()
    return float(np.corrcoef(truth, pred)[0, 1] ** 2)


def test_sigma(corpus) -> np.ndarray:
    """Per-variable std of the raw test split (the scale of standardized RMSE)."""
    return corpus.test.raw_targets().reshape(-1, len(TARGET_NAMES)).std(axis=0)


test_sigma.__test__ = False


@dataclass
class RmseReport:
    """Long-format rows ``(method, tau_e, tau_i, u, noise, variable, rmse, n, diverged)``."""

    rows: list = field(default_factory=list)

    COLUMNS = ("method", "tau_e", "tau_i", "u", "noise", "variable", "rmse", "n", "diverged")

    def add(self, method, tau_e, tau_i, u, noise, rmses, n, diverged, variables=TARGET_NAMES):
        for v, r in zip(variables, rmses):
            self.rows.append((method, float(tau_e), float(tau_i), float(u), float(noise), v, float(r), int(n),
                              bool(diverged)))

    def extend(self, other: "RmseReport"):
        self.rows.extend(other.rows)

    def select(self, **kw):
        idx = {c: i for i, c in enumerate(self.COLUMNS)}
        return [r for r in self.rows if all(r[idx[k]] == v for k, v in kw.items())]

    def case_scores(self, method, variables, noise=0.0):
        """Mean RMSE over ``variables`` per case: ``{(tau_e, tau_i, u): (score, diverged)}``."""
        acc = {}
        for r in self.rows:
            if r[0] != method or r[4] != noise or r[5] not in variables:
                continue
            key = (r[1], r[2], r[3])
            acc.setdefault(key, ([], r[8]))[0].append(r[6])
        return {k: (float(np.mean(v)), d) for k, (v, d) in acc.items()}

    def cell_medians(self, method, variables, noise=0.0):
        """Median over inputs of the case score, diverged runs excluded.

        A cell whose runs all diverged maps to NaN (explicit missing marker).
        """
        cells = {}
        for (te, ti, _), (score, diverged) in self.case_scores(method, variables, noise).items():
            cells.setdefault((te, ti), [])
            if not diverged and np.isfinite(score):
                cells[(te, ti)].append(score)
        return {k: (float(np.median(v)) if v else float("nan")) for k, v in cells.items()}

    def to_csv(self, path=None):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(self.COLUMNS)
        for r in sorted(self.rows, key=lambda r: r[:6]):
            wr.writerow([r[0], repr(r[1]), repr(r[2]), repr(r[3]), repr(r[4]), r[5], repr(r[6]), r[7], int(r[8])])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path):
        rep = cls()
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            next(rd)
            for r in rd:
                rep.rows.append((r[0], float(r[1]), float(r[2]), float(r[3]), float(r[4]), r[5], float(r[6]),
                                 int(r[7]), bool(int(r[8]))))
        return rep


@dataclass
class HeatGrid:
    tau_e_axis: np.ndarray
    tau_i_axis: np.ndarray
    cells: np.ndarray  # NaN marks a missing cell
    bounds: tuple = (0.0, 1.0)
    label: str = ""

    @classmethod
    def from_cells(cls, cells: dict, bounds=(0.0, 1.0), label="", axes=None):
        te = np.array(sorted({k[0] for k in cells})) if axes is None else np.asarray(axes[0])
        ti = np.array(sorted({k[1] for k in cells})) if axes is None else np.asarray(axes[1])
        grid = np.full((te.size, ti.size), np.nan)
        for (a, b), v in cells.items():
            grid[np.searchsorted(te, a), np.searchsorted(ti, b)] = v
        return cls(te, ti, grid, bounds, label)

    def value(self, tau_e, tau_i):
        return self.cells[np.searchsorted(self.tau_e_axis, tau_e), np.searchsorted(self.tau_i_axis, tau_i)]

    def __sub__(self, other: "HeatGrid"):
        if not (np.array_equal(self.tau_e_axis, other.tau_e_axis) and np.array_equal(self.tau_i_axis,
                                                                                      other.tau_i_axis)):
            raise ValueError("grids have different axes")
        return HeatGrid(self.tau_e_axis, self.tau_i_axis, self.cells - other.cells, (-1.0, 1.0),
                        f"{self.label} - {other.label}")

    def to_csv(self, path=None):
        """Rows are tau_e, columns tau_i; the first row holds the tau_i axis."""
        lines = [f"# {self.label} bounds={self.bounds[0]},{self.bounds[1]}",
                 "tau_e\\tau_i," + ",".join(repr(float(v)) for v in self.tau_i_axis)]
        for a, row in zip(self.tau_e_axis, self.cells):
            lines.append(repr(float(a)) + "," + ",".join("nan" if np.isnan(v) else repr(float(v)) for v in row))
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def add_observation_noise(recording, fraction, seed=0):
    """Add zero-mean Gaussian noise with std ``fraction * std(recording)``."""
    if fraction < 0:
        raise ValueError("fraction must be non-negative")
    y = np.asarray(recording, dtype=float)
    if fraction == 0:
        return y.copy()
    return y + fraction * y.std() * np.random.default_rng(seed).standard_normal(y.shape)


@dataclass
class EvalCase:
    tau_e: float
    tau_i: float
    u: float
    trajectory: Trajectory


def make_eval_cases(cfg: SweepConfig, ranges, inputs_per_pair=4, duration=5.0, tag=4):
    """Fresh recordings (not drawn from the training windows) for every surviving pair."""
    recs = simulate_recordings(cfg, ranges, inputs_per_pair, tag=tag, duration=duration)
    return [EvalCase(r.tau_e, r.tau_i, r.u, r.trajectory) for r in recs]


def run_method(method, traj: Trajectory, observations=None, weights=None, stats=None, scaling="dataset",
               fixed_base: ModelParams | None = None) -> EstimateTrack:
    y = traj.observations if observations is None else observations
    if method == "lstm":
        from .lstm.infer import infer

        return infer(y, weights, stats, scaling=scaling, dt=traj.dt)
    if method == "akf-perfect":
        return run_akf(y, AkfConfig.perfect(traj))
    if method == "akf-fixed":
        return run_akf(y, AkfConfig.fixed(fixed_base or ModelParams(r_obs=traj.params.r_obs)))
    raise ValueError(f"unknown method {method!r}")


def score_track(track: EstimateTrack, traj: Trajectory, sigma):
    """RMSE per target over the portion of the run the estimator completed."""
    n = len(track)
    if n == 0:
        return np.full(len(TARGET_NAMES), np.nan), 0
    return rmse_standardized(traj.targets()[:n], track.mean, sigma), n


@dataclass
class GridEval:
    report: RmseReport
    tracks: dict = field(default_factory=dict)

    def grid(self, method, variables=PARAM_VARS, noise=0.0, label=None, axes=None):
        cells = self.report.cell_medians(method, variables, noise)
        return HeatGrid.from_cells(cells, (0.0, 1.0), label or method, axes)

    def variable_grids(self, method, noise=0.0):
        grids = {v: self.grid(method, (v,), noise, f"{method}:{v}") for v in TARGET_NAMES}
        grids["pooled"] = self.grid(method, TARGET_NAMES[:N_AUG], noise, f"{method}:pooled")
        return grids

    def difference(self, a="lstm", b="akf-fixed", variables=PARAM_VARS, noise=0.0):
        """``a - b``: positive where ``a`` has the larger error."""
        ga = self.grid(a, variables, noise)
        gb = self.grid(b, variables, noise, axes=(ga.tau_e_axis, ga.tau_i_axis))
        return ga - gb


def track_filename(method, case_index, noise_fraction):
    return f"{method}_case{case_index:04d}_noise{noise_fraction:g}.csv"


def run_grid_eval(cases, methods=METHODS, weights=None, stats=None, sigma=None, noise_fraction=0.0, seed=0,
                  track_dir=None, scaling="dataset") -> GridEval:
    """Evaluate every method on every case.

    With ``track_dir`` each track is written to CSV and the score is computed
    from the file read back, so reports can be rebuilt bit-exactly from the
    persisted tracks.  Tracks already present in ``track_dir`` are reused.
    """
    if sigma is None:
        raise ValueError("sigma (test-set std per variable) is required")
    out = GridEval(RmseReport())
    if track_dir is not None:
        Path(track_dir).mkdir(parents=True, exist_ok=True)
    for k, case in enumerate(cases):
        y = None
        for method in methods:
            path = None if track_dir is None else Path(track_dir) / track_filename(method, k, noise_fraction)
            if path is not None and path.exists():
                track = EstimateTrack.from_csv(path)
            else:
                if y is None and noise_fraction > 0:
                    y = add_observation_noise(case.trajectory.observations, noise_fraction, seed=[seed, k])
                track = run_method(method, case.trajectory, y, weights, stats, scaling)
                if path is not None:
                    track.to_csv(path)
                    track = EstimateTrack.from_csv(path)
            rm, n = score_track(track, case.trajectory, sigma)
            out.report.add(method, case.tau_e, case.tau_i, case.u, noise_fraction, rm, n, track.diverged)
            out.tracks[(method, k, noise_fraction)] = track
    return out


# ----------------------------------------------------------------------------
# time-varying scenario


@dataclass
class Scenario:
    trajectory: Trajectory
    # (label, start, stop) sample ranges: "hold1", "ramp1", "hold2", ...
    segments: list
    held: list  # ModelParams per hold segment


def timevarying_scenario(seed=0, n_segments=3, hold=5.0, ramp=5.0, base: ModelParams | None = None,
                         tau_range=(0.01, 0.06), transient=1.0) -> Scenario:
    """Constant-parameter holds joined by straight-line ramps.

    Time constants of each hold are uniform in ``tau_range``; gains and the
    input follow them through :meth:`ModelParams.with_time_constants` with the
    input rescaled as well, which keeps every hold in the oscillatory regime.
    """
    if n_segments < 2:
        raise ValueError("need at least two segments")
    base = ModelParams() if base is None else base
    rng = np.random.default_rng([seed, 5])
    taus = rng.uniform(*tau_range, size=(n_segments, 2))
    held = [base.with_time_constants(float(te), float(ti), scale_input=True) for te, ti in taus]
    n_hold = int(round(hold / base.dt))
    n_ramp = int(round(ramp / base.dt))
    vec = lambda p: np.array([p.tau_e, p.tau_i, *p.theta])
    pieces, segments, pos = [], [], 0
    for k, p in enumerate(held):
        pieces.append(np.tile(vec(p), (n_hold, 1)))
        segments.append((f"hold{k + 1}", pos, pos + n_hold))
        pos += n_hold
        if k + 1 < n_segments:
            a, b = vec(p), vec(held[k + 1])
            w = (np.arange(1, n_ramp + 1) / (n_ramp + 1))[:, None]
            pieces.append(a + w * (b - a))
            segments.append((f"ramp{k + 1}", pos, pos + n_ramp))
            pos += n_ramp
    path = np.vstack(pieces)
    sched = ParamSchedule(path[:, 0], path[:, 1], path[:, 2:])
    traj = simulate(held[0], path.shape[0] * base.dt, seed=[seed, 6], transient=transient, schedule=sched)
    return Scenario(traj, segments, held)


@dataclass
class TimeVaryingReport:
    whole: dict  # method -> per-variable RMSE array
    segments: dict  # (method, label) -> per-variable RMSE array
    winners: dict  # variable -> method with the lower whole-run RMSE

    def param_score(self, method, label=None, variables=PARAM_VARS):
        idx = [TARGET_NAMES.index(v) for v in variables]
        arr = self.whole[method] if label is None else self.segments[(method, label)]
        return float(np.mean(arr[idx]))

    def to_csv(self, path=None):
        lines = ["method,segment,variable,rmse"]
        for m, arr in sorted(self.whole.items()):
            lines += [f"{m},all,{v},{r!r}" for v, r in zip(TARGET_NAMES, arr.tolist())]
        for (m, lab), arr in sorted(self.segments.items()):
            lines += [f"{m},{lab},{v},{r!r}" for v, r in zip(TARGET_NAMES, arr.tolist())]
        text = "\n".join(lines) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def compare_timevarying(scenario: Scenario, tracks: dict, sigma) -> TimeVaryingReport:
    """Whole-run and per-segment RMSE for each method's track.

    A diverged (truncated) track is scored on the samples it covers; segments
    it never reached get NaN.
    """
    truth = scenario.trajectory.targets()
    whole, segs = {}, {}
    for method, tr in tracks.items():
        n = len(tr)
        whole[method] = rmse_standardized(truth[:n], tr.mean, sigma) if n else np.full(len(TARGET_NAMES), np.nan)
        for label, a, b in scenario.segments:
            b2 = min(b, n)
            segs[(method, label)] = rmse_standardized(truth[a:b2], tr.mean[a:b2], sigma) if b2 > a else \
                np.full(len(TARGET_NAMES), np.nan)
    winners = {}
    for j, v in enumerate(TARGET_NAMES):
        scores = {m: whole[m][j] for m in whole if np.isfinite(whole[m][j])}
        winners[v] = min(scores, key=scores.get) if scores else None
    return TimeVaryingReport(whole, segs, winners)
