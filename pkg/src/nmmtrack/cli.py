"""Command line: ``nmmtrack <subcommand> [options]``.

Every subcommand writes ``resolved_config.json`` and ``seeds.json`` into its
output directory.  Failures exit non-zero and print one JSON line on stderr
with the error category, e.g. ``{"error": "ingest-missing-channel", ...}``.

Exit codes: 2 configuration, 3 ingest, 4 numerical, 5 degenerate sample,
6 format version, 10 malformed header, 11 missing channel, 12 empty file,
1 anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .errors import ConfigurationError, NmmError

log = logging.getLogger("nmmtrack")

PARAM_COLUMNS = ("u", "alpha_pe", "alpha_pi", "alpha_ip", "alpha_ep")


def _common(p):
    p.add_argument("--config", help="JSON run configuration (see resolved_config.json for all keys)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out-dir", required=True, help="directory for all artifacts of this run")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; VALUE is parsed as JSON when possible")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="nmmtrack", description=__doc__.split("\n\n")[0],
                                 formatter_class=argparse.RawDescriptionHelpFormatter,
                                 epilog=__doc__.split("\n\n", 1)[1])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate the model and write trajectory CSVs",
                       description="Errors: config (2) for out-of-range time constants; numeric (4) on divergence.")
    _common(p)
    p.add_argument("--duration", type=float)
    p.add_argument("--tau-e", type=float)
    p.add_argument("--tau-i", type=float)
    p.add_argument("--u", type=float)
    p.add_argument("--n", type=int, dest="n_recordings")

    p = sub.add_parser("datagen", help="input sweep, simulation, windowing and splitting into a dataset",
                       description="Errors: config (2) when no time-constant pair oscillates.")
    _common(p)
    p.add_argument("--grid", help="'desk', 'full' or a JSON list of axis values")
    p.add_argument("--inputs-per-pair", type=int)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("train", help="train the network on a dataset directory",
                       description="Errors: format-version (6) for an incompatible dataset; config (2).")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory written by datagen")
    p.add_argument("--epochs", type=int)
    p.add_argument("--time-budget", type=float, help="wall-clock cap in seconds")
    p.add_argument("--init", help="weights file to start from")

    for name, helptext in (("akf", "run the Kalman filter on a recording"),
                           ("infer", "run a trained network on a recording")):
        p = sub.add_parser(name, help=helptext,
                           description="Errors: ingest (3), malformed header (10), missing channel (11), "
                                       "empty file (12).")
        _common(p)
        p.add_argument("--input", required=True, help="CSV (header row, 't'/'time' column optional) or EDF")
        p.add_argument("--format", choices=("csv", "edf"))
        p.add_argument("--channel", help="channel label (EDF) or column name (CSV)")
        p.add_argument("--sample-rate", type=float, help="rate for CSV files without a time column")
        if name == "akf":
            p.add_argument("--mode", choices=("fixed", "perfect"),
                           help="'perfect' needs a simulated trajectory CSV with its JSON sidecar")
        else:
            p.add_argument("--weights", required=True)
            p.add_argument("--scaling", choices=("recording", "dataset"))

    p = sub.add_parser("eval", help="grid evaluation of LSTM and Kalman filters",
                       description="Re-running on the same output directory reuses persisted tracks and "
                                   "rewrites byte-identical reports.")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)

    p = sub.add_parser("scenario-timevarying", help="piecewise-constant/ramp scenario and method comparison")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory (test-set statistics)")
    p.add_argument("--weights", required=True)
    p.add_argument("--segments", type=int)
    return ap


# ----------------------------------------------------------------------------- helpers

def _resolve(args) -> RunConfig:
    cfg = RunConfig.load(args.config, args.set)
    if args.seed is not None:
        cfg.merge({"seed": args.seed})
    return cfg


def _maybe(cfg, section, **values):
    cfg.merge({section: {k: v for k, v in values.items() if v is not None}})


def _ingest(args, cfg):
    from .ingest import ingest

    _maybe(cfg, "ingest", format=args.format, channel=args.channel, sample_rate=args.sample_rate)
    ing = cfg["ingest"]
    channel = ing["channel"]
    if isinstance(channel, str) and channel.isdigit():
        channel = int(channel)
    return ingest(args.input, ing["format"], channel, ing["sample_rate"])


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")


# ----------------------------------------------------------------------------- subcommands

def cmd_simulate(args, cfg, out):
    from .model import simulate

    _maybe(cfg, "simulate", duration=args.duration, n_recordings=args.n_recordings)
    _maybe(cfg, "model", tau_e=args.tau_e, tau_i=args.tau_i, u=args.u)
    s = cfg["simulate"]
    p = cfg.model_params()
    seeds = {}
    for k in range(s["n_recordings"]):
        seed = [cfg.seed, 7, k]
        traj = simulate(p, s["duration"], seed=seed, transient=s["transient"])
        name = f"trajectory_{k:03d}.csv"
        traj.to_csv(out / name)
        seeds[name] = seed
    return {"recordings": seeds}


def cmd_datagen(args, cfg, out):
    from .datagen import generate_dataset, save_corpus, sweep_grid

    grid = args.grid
    if grid is not None and grid.lstrip().startswith("["):
        grid = json.loads(grid)
    _maybe(cfg, "datagen", grid=grid, inputs_per_pair=args.inputs_per_pair, workers=args.workers)
    dg = cfg["datagen"]
    sweep_cfg = cfg.sweep_config()
    sweeps = sweep_grid(sweep_cfg, workers=dg["workers"])
    with open(out / "sweeps.csv", "w") as fh:
        fh.write("tau_e,tau_i,tried,increases,u_lo,u_hi\n")
        for r in sweeps:
            lo, hi = (r.range.u_lo, r.range.u_hi) if r.range is not None else (float("nan"),) * 2
            fh.write(f"{r.tau_e!r},{r.tau_i!r},{len(r.tried)},{r.increases},{lo!r},{hi!r}\n")
    corpus = generate_dataset(sweep_cfg, dg["inputs_per_pair"], dg["windows_per_recording"], dg["workers"],
                              sweeps=sweeps)
    save_corpus(corpus, out)
    log.info("dataset: %d/%d/%d windows", len(corpus.train), len(corpus.val), len(corpus.test))
    return {"gate": [cfg.seed, 0], "production": [cfg.seed, 1], "shuffle": [cfg.seed, 2]}


def cmd_train(args, cfg, out):
    from .datagen import load_corpus
    from .lstm.network import LstmWeights
    from .lstm.train import train

    _maybe(cfg, "train", max_epochs=args.epochs, time_budget=args.time_budget)
    tc = cfg.train_config()
    corpus = load_corpus(args.data)
    init = LstmWeights.load(args.init)[0] if args.init else None
    res = train(corpus.train, corpus.val, tc, init=init)
    res.weights.save(out / "weights.npz", corpus.stats, tc.to_dict())
    res.write_log(out / "train_log.csv")
    _write_json(out / "train_summary.json", {"best_epoch": res.best_epoch, "stopped": res.stopped,
                                             "digest": res.weights.digest()})
    return {"init_and_shuffle": [tc.seed, 1]}


def cmd_akf(args, cfg, out):
    from .akf import AkfConfig, run_akf
    from .model import Trajectory

    _maybe(cfg, "akf", mode=args.mode)
    a = cfg["akf"]
    if a["mode"] == "perfect":
        traj = Trajectory.from_csv(args.input)
        ac = AkfConfig.perfect(traj, Q=cfg.process_cov())
        y = traj.observations
    else:
        rec = _ingest(args, cfg)
        y = rec.samples
        _write_json(out / "ingest.json", rec.meta)
        R = a["R"] if a["R"] is not None else None
        ac = AkfConfig.fixed(cfg.model_params(), R=R, y=y if R is None else None, Q=cfg.process_cov())
    track = run_akf(y, ac)
    track.to_csv(out / "track.csv")
    if track.diverged:
        log.warning("filter diverged at sample %d; track truncated", track.diverged_at)
    return {}


def stability_summary(track, window_s, dt):
    """Block-wise std of each parameter track (non-overlapping windows)."""
    n = max(int(round(window_s / dt)), 1)
    idx = [list(track.columns()).index(c) - 3 for c in PARAM_COLUMNS]
    rows = []
    for s in range(0, len(track) - n + 1, n):
        block = track.mean[s:s + n, idx]
        rows.append([s * dt, *block.std(axis=0)])
    return np.array(rows).reshape(-1, 1 + len(PARAM_COLUMNS))


def cmd_infer(args, cfg, out):
    from .datagen import Standardizer
    from .lstm.infer import infer
    from .lstm.network import LstmWeights

    _maybe(cfg, "infer", scaling=args.scaling)
    inf = cfg["infer"]
    w, meta = LstmWeights.load(args.weights)
    if meta.get("stats") is None:
        raise ConfigurationError("weights file carries no standardization statistics")
    stats = Standardizer.from_dict(meta["stats"])
    rec = _ingest(args, cfg)
    _write_json(out / "ingest.json", {**rec.meta, "label": rec.label})
    t0 = time.perf_counter()
    track = infer(rec.samples, w, stats, scaling=inf["scaling"], dt=1.0 / rec.sample_rate)
    elapsed = time.perf_counter() - t0
    track.to_csv(out / "track.csv")
    summ = stability_summary(track, inf["stability_window"], 1.0 / rec.sample_rate)
    np.savetxt(out / "stability.csv", summ, delimiter=",", fmt="%.10g", comments="",
               header="t_start," + ",".join(f"std_{c}" for c in PARAM_COLUMNS))
    _write_json(out / "infer_summary.json", {"samples": len(track), "seconds": elapsed,
                                             "weights_digest": w.digest(), "all_finite":
                                             bool(np.all(np.isfinite(track.mean)))})
    return {}


PLOT_STUB = '''"""Render the grid CSVs in this directory (optional; needs matplotlib)."""
import glob

import matplotlib.pyplot as plt
import numpy as np

for path in sorted(glob.glob("*.csv")):
    with open(path) as fh:
        head = fh.readline()
    lo, hi = (float(v) for v in head.split("bounds=")[1].split(","))
    table = np.genfromtxt(path, delimiter=",", skip_header=1)
    ti, te, cells = table[0, 1:], table[1:, 0], table[1:, 1:]
    fig, ax = plt.subplots()
    im = ax.imshow(cells, origin="lower", vmin=lo, vmax=hi, cmap="RdBu_r" if lo < 0 else "viridis")
    ax.set_xticks(range(len(ti)), [f"{v:g}" for v in ti])
    ax.set_yticks(range(len(te)), [f"{v:g}" for v in te])
    ax.set_xlabel("tau_i (s)")
    ax.set_ylabel("tau_e (s)")
    ax.set_title(path[:-4])
    fig.colorbar(im)
    fig.savefig(path[:-4] + ".png", dpi=120)
    plt.close(fig)
'''


def summary_table(report, methods, noises, variables=PARAM_COLUMNS):
    lines = [f"{'method':<14}" + "".join(f"{'noise ' + format(n, 'g'):>14}" for n in noises)]
    for m in methods:
        vals = []
        for n in noises:
            cells = [v for v in report.cell_medians(m, variables, n).values() if np.isfinite(v)]
            vals.append(float(np.median(cells)) if cells else float("nan"))
        lines.append(f"{m:<14}" + "".join(f"{v:>14.4f}" for v in vals))
    return "median over cells of the median-over-inputs parameter RMSE\n" + "\n".join(lines) + "\n"


def cmd_eval(args, cfg, out):
    from .datagen import Standardizer, load_corpus
    from .evaluation import (R2_DEFINITION, EvalCase, RmseReport, make_eval_cases, run_grid_eval,
                             test_sigma)
    from .lstm.network import LstmWeights
    from .model import TARGET_NAMES, Trajectory

    e = cfg["eval"]
    corpus = load_corpus(args.data)
    w, meta = LstmWeights.load(args.weights)
    stats = Standardizer.from_dict(meta["stats"]) if meta.get("stats") else corpus.stats
    sigma = test_sigma(corpus)
    sweep_cfg = corpus.config
    case_dir = out / "cases"
    index_path = case_dir / "index.json"
    if index_path.exists():
        index = json.loads(index_path.read_text())
        cases = [EvalCase(c["tau_e"], c["tau_i"], c["u"], Trajectory.from_csv(case_dir / c["file"]))
                 for c in index]
    else:
        case_dir.mkdir(parents=True, exist_ok=True)
        fresh = make_eval_cases(sweep_cfg, corpus.ranges, e["inputs_per_pair"], e["duration"])
        index = []
        for k, c in enumerate(fresh):
            name = f"case{k:04d}.csv"
            c.trajectory.to_csv(case_dir / name)
            index.append({"tau_e": c.tau_e, "tau_i": c.tau_i, "u": c.u, "file": name})
        _write_json(index_path, index)
        cases = [EvalCase(c["tau_e"], c["tau_i"], c["u"], Trajectory.from_csv(case_dir / c["file"]))
                 for c in index]
    report = RmseReport()
    grids_dir = out / "grids"
    grids_dir.mkdir(exist_ok=True)
    for noise in e["noise_fractions"]:
        ev = run_grid_eval(cases, e["methods"], w, stats, sigma, noise, cfg.seed, out / "tracks", e["scaling"])
        report.extend(ev.report)
        tag = f"noise{noise:g}"
        for m in e["methods"]:
            ev.grid(m, label=f"{m}:params").to_csv(grids_dir / f"{m}_params_{tag}.csv")
            for v, g in ev.variable_grids(m, noise).items():
                g.to_csv(grids_dir / f"{m}_{v}_{tag}.csv")
        if "lstm" in e["methods"]:
            for b in e["methods"]:
                if b != "lstm":
                    ev.difference("lstm", b, noise=noise).to_csv(grids_dir / f"diff_lstm_minus_{b}_{tag}.csv")
    report.to_csv(out / "rmse_report.csv")
    (grids_dir / "plot_grids.py").write_text(PLOT_STUB)
    np.savetxt(out / "test_sigma.csv", sigma[None], delimiter=",", header=",".join(TARGET_NAMES), comments="",
               fmt="%.17g")
    text = summary_table(report, e["methods"], e["noise_fractions"])
    (out / "summary.txt").write_text(text + f"\nstandardizing sigma: test split std per variable\n"
                                     f"{R2_DEFINITION}\n")
    print(text, end="")
    return {"eval_recordings": [sweep_cfg.seed, 4], "noise": [cfg.seed, "case"]}


def cmd_scenario(args, cfg, out):
    from .datagen import Standardizer, load_corpus
    from .evaluation import compare_timevarying, run_method, test_sigma, timevarying_scenario
    from .lstm.network import LstmWeights

    _maybe(cfg, "scenario", n_segments=args.segments)
    sc_cfg = cfg["scenario"]
    corpus = load_corpus(args.data)
    w, meta = LstmWeights.load(args.weights)
    stats = Standardizer.from_dict(meta["stats"]) if meta.get("stats") else corpus.stats
    sc = timevarying_scenario(cfg.seed, sc_cfg["n_segments"], sc_cfg["hold"], sc_cfg["ramp"],
                              base=cfg.model_params())
    sc.trajectory.to_csv(out / "scenario.csv")
    _write_json(out / "segments.json", {"segments": sc.segments, "held": [p.to_dict() for p in sc.held]})
    tracks = {}
    for m in ("lstm", "akf-perfect", "akf-fixed"):
        tr = run_method(m, sc.trajectory, weights=w, stats=stats, scaling=cfg["eval"]["scaling"])
        tr.to_csv(out / f"track_{m}.csv")
        tracks[m] = tr
    rep = compare_timevarying(sc, tracks, test_sigma(corpus))
    rep.to_csv(out / "comparison.csv")
    _write_json(out / "winners.json", rep.winners)
    for m in tracks:
        print(f"{m:<12} whole-run parameter RMSE {rep.param_score(m):.4f}")
    return {"scenario": [cfg.seed, 5], "noise": [cfg.seed, 6]}


COMMANDS = {"simulate": cmd_simulate, "datagen": cmd_datagen, "train": cmd_train, "akf": cmd_akf,
            "infer": cmd_infer, "eval": cmd_eval, "scenario-timevarying": cmd_scenario}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        seeds = COMMANDS[args.command](args, cfg, out)
        cfg.write(out, seeds)
    except NmmError as exc:
        print(json.dumps({"error": exc.category, "exit_code": exc.exit_code, "message": str(exc)}),
              file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # keep the contract: one machine-readable line, non-zero status
        log.debug("unexpected failure", exc_info=True)
        print(json.dumps({"error": "internal", "exit_code": 1, "message": f"{type(exc).__name__}: {exc}"}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
