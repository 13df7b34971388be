"""Command line entry point: ``spdreg <subcommand> ...``.

Subcommands
-----------
synth       write a synthetic benchmark (sessions, events, ground truth)
preprocess  clean RTs, band-pass and epoch sessions into trial files
features    dump FS1/FS2/FS3 matrices per subject
train       fit one (feature set, regressor) model per subject
eval        repeated k-fold evaluation of every cell
sweep       evaluation over a range of F or trial lengths
bench       FS3 training time against training-set size

Inputs are session files (``*.spd`` with an ``.events.csv`` sidecar) or
trial files written by ``preprocess`` (``.trials.csv`` sidecar); ``eval``
and ``sweep`` also accept ``--synthetic N`` to generate subjects in memory.
"""

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, SpdregError
from .features import (FEATURE_SETS, extract_fs1, fit_tangent_model,
                       save_feature_matrix, tangent_features,
                       filtered_covariances, scatter_matrices,
                       band_power_features, write_feature_csv)
from .harness import (REGRESSORS, ExperimentSpec, SubjectData, run_matrix,
                      run_sweep, time_training)
from .io import (read_session, read_trials, write_session, write_trials,
                 write_truth)
from .preprocess import prepare_trials
from .regression import knn_fit, lasso_fit_cv
from .spatial_filter import FilterConfig, apply_filter, train_filter_bank
from .spd import MeanConfig
from .synth import GeneratorConfig, generate_benchmark

log = logging.getLogger("spdreg")

# reference constants reported alongside the timing fit, never asserted
REFERENCE_TIMING = {"intercept_s": 0.0261, "slope_s_per_trial": 0.0030}


def _tomllib():
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    return tomllib


def read_config(path):
    """Parse a TOML or JSON config file into a plain dict."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".json":
            return json.loads(path.read_text())
        with open(path, "rb") as fh:
            return _tomllib().load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _filter_configs(raw):
    out = {}
    for fs, val in raw.items():
        if isinstance(val, dict):
            out[fs] = FilterConfig(int(val["k_classes"]),
                                   int(val["filters_per_class"]))
        else:
            k, f = val
            out[fs] = FilterConfig(int(k), int(f))
    return out


def spec_from_dict(raw):
    """Build an :class:`ExperimentSpec` from config-file keys.

    Recognised keys mirror the ExperimentSpec fields; ``filter_configs`` maps a
    feature set to ``{k_classes, filters_per_class}`` or ``[K, F]``,
    ``sweep`` is ``{axis, values}`` and ``mean`` holds ``tolerance`` and
    ``max_iterations`` for the Karcher mean.
    """
    raw = dict(raw)
    kw = {}
    simple = ("dataset_paths", "feature_sets", "regressors", "folds",
              "repeats", "seed", "trial_length", "shrinkage", "edge_guard",
              "knn_k", "inner_folds", "lambda_grid_size")
    for key in simple:
        if key in raw:
            kw[key] = raw.pop(key)
    if "band" in raw:
        kw["band"] = tuple(float(b) for b in raw.pop("band"))
    if "filter_configs" in raw:
        merged = dict(ExperimentSpec().filter_configs)
        merged.update(_filter_configs(raw.pop("filter_configs")))
        kw["filter_configs"] = merged
    if "sweep" in raw:
        sw = raw.pop("sweep")
        kw["sweep"] = (sw["axis"], tuple(sw["values"]))
    if "mean" in raw:
        kw["mean_cfg"] = MeanConfig(**raw.pop("mean"))
    raw.pop("generator", None)
    if raw:
        raise ConfigError(f"unknown config keys {sorted(raw)}")
    return ExperimentSpec(**kw)


def _csv_list(text):
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _num_list(text):
    return tuple(float(s) for s in _csv_list(text))


def build_spec(args):
    """Config file first, command line flags on top."""
    raw = read_config(args.config) if getattr(args, "config", None) else {}
    spec = spec_from_dict(raw)
    over = {}
    if getattr(args, "inputs", None):
        over["dataset_paths"] = tuple(args.inputs)
    for name in ("seed", "folds", "repeats", "edge_guard", "trial_length"):
        val = getattr(args, name, None)
        if val is not None:
            over[name] = val
    if getattr(args, "feature_sets", None):
        over["feature_sets"] = _csv_list(args.feature_sets)
    if getattr(args, "regressors", None):
        over["regressors"] = _csv_list(args.regressors)
    return replace(spec, **over) if over else spec


def generator_config(args, raw=None):
    kw = dict((raw or {}).get("generator", {}))
    if "corr_band" in kw:
        kw["corr_band"] = tuple(kw["corr_band"])
    for name in ("seed", "coupling"):
        val = getattr(args, name, None)
        if val is not None:
            kw[name] = val
    return GeneratorConfig(**kw)


def _is_trial_file(path):
    path = Path(path)
    return path.with_name(path.stem + ".trials.csv").exists()


def load_inputs(paths, spec):
    """Read sessions or trial files into ``{subject_id: (trials, fs)}``.

    Sessions are grouped by subject so RT cleaning sees every session of a
    subject at once.
    """
    if not paths:
        raise ConfigError("no input files given")
    sessions, out = {}, {}
    for p in paths:
        if _is_trial_file(p):
            trials, fs, sid = read_trials(p)
            prev = out.get(sid, ([], fs))[0]
            out[sid] = (prev + trials, fs)
        else:
            rec = read_session(p)
            sessions.setdefault(rec.subject_id, []).append(rec)
    for sid, recs in sessions.items():
        trials = prepare_trials(recs, spec.trial_length, spec.band)
        prev = out.get(sid, ([], recs[0].sample_rate))[0]
        out[sid] = (prev + trials, recs[0].sample_rate)
    return dict(sorted(out.items()))


def _recordings(args, spec):
    if getattr(args, "synthetic", None):
        raw = read_config(args.config) if args.config else {}
        cfg = generator_config(args, raw)
        return generate_benchmark(cfg, args.synthetic)
    return [read_session(p) for p in spec.dataset_paths]


def _subjects(args, spec):
    if getattr(args, "synthetic", None) or not any(
            _is_trial_file(p) for p in spec.dataset_paths):
        from .harness import load_subjects
        return load_subjects(spec, _recordings(args, spec))
    return [SubjectData.from_trials(sid, trials, fs, spec)
            for sid, (trials, fs) in load_inputs(spec.dataset_paths,
                                                 spec).items()]


def _fmt(x):
    return repr(float(x))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_results(out, result, spec):
    """``results.csv``, ``timing.csv``, predictions, summary and plot data."""
    out = Path(out)
    (out / "predictions").mkdir(parents=True, exist_ok=True)
    rows, timing, per_rep = [], [], []
    for c in result.cells:
        rows.append([c.subject_id, c.feature_set, c.regressor, _fmt(c.rmse),
                     _fmt(c.cc), int(c.degenerate), c.failures, c.error])
        timing.append([c.subject_id, c.feature_set, c.regressor,
                       f"{c.train_time_s:.6f}"])
        per_rep.extend([c.subject_id, c.feature_set, c.regressor, r,
                        _fmt(rm), _fmt(cc)]
                       for r, (rm, cc) in enumerate(c.per_repeat))
        _write_rows(out / "predictions" / f"{c.key}.csv",
                    ["repeat", "trial", "truth", "prediction"],
                    [[r, i, _fmt(t), _fmt(p)] for r, i, t, p in c.predictions])
    _write_rows(out / "results.csv",
                ["subject_id", "feature_set", "regressor", "rmse", "cc",
                 "degenerate", "failed_folds", "error"], rows)
    _write_rows(out / "timing.csv",
                ["subject_id", "feature_set", "regressor", "train_time_s"],
                timing)
    _write_rows(out / "per_repeat.csv",
                ["subject_id", "feature_set", "regressor", "repeat", "rmse",
                 "cc"], per_rep)
    # plot data: per-subject bars and percentage improvements
    means = result.summary["means"]
    bars = [[c.subject_id, c.feature_set, c.regressor, _fmt(c.rmse),
             _fmt(c.cc)] for c in result.cells]
    for key, m in means.items():
        fs, rg = key.split("/")
        bars.append(["mean", fs, rg, _fmt(m["rmse"]), _fmt(m["cc"])])
    _write_rows(out / "per_subject.csv",
                ["subject_id", "feature_set", "regressor", "rmse", "cc"],
                bars)
    _write_rows(out / "improvements.csv",
                ["subject_id", "regressor", "pair", "metric", "percent"],
                [[d["subject_id"], d["regressor"], d["pair"], d["metric"],
                  _fmt(d["percent"])] for d in result.summary["improvements"]])
    summary = dict(result.summary)
    summary["spec"] = _spec_json(spec)
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)


def _spec_json(spec):
    d = asdict(spec)
    d["filter_configs"] = {k: [v.k_classes, v.filters_per_class]
                           for k, v in spec.filter_configs.items()}
    d["psd"] = None if spec.psd is None else asdict(spec.psd)
    return d


def cmd_synth(args):
    raw = read_config(args.config) if args.config else {}
    cfg = generator_config(args, raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for rec, truth in generate_benchmark(cfg, args.n_subjects,
                                         with_truth=True):
        write_session(out / f"{rec.subject_id}.spd", rec)
        write_truth(out / f"{rec.subject_id}.truth.csv", truth)
    with open(out / "generator.json", "w") as fh:
        json.dump(asdict(cfg), fh, indent=2)
    log.info("wrote %d subjects to %s", args.n_subjects, out)
    return 0


def cmd_preprocess(args):
    spec = build_spec(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sid, (trials, fs) in load_inputs(spec.dataset_paths, spec).items():
        write_trials(out / f"{sid}.spd", trials, fs, sid)
        log.info("%s: %d trials", sid, len(trials))
    return 0


def _subject_features(trials, fs_name, spec, sample_rate):
    """Features of every trial; supervised parts fitted on all of them."""
    data = np.stack([t.data for t in trials])
    labels = np.array([t.label for t in trials])
    psd = spec.psd_config(sample_rate)
    if fs_name == "FS1":
        return extract_fs1(data, psd).values, labels, {}
    bank = train_filter_bank(trials, spec.filter_configs[fs_name],
                             spec.shrinkage)
    if fs_name == "FS2":
        return (band_power_features(apply_filter(bank, data), psd), labels,
                {"filter_bank": bank.to_dict()})
    model = fit_tangent_model(trials, bank, spec.mean_cfg, spec.shrinkage,
                              spec.edge_guard)
    scatter, s = scatter_matrices(data, spec.edge_guard)
    covs = filtered_covariances(scatter, s, bank, spec.shrinkage)
    return (tangent_features(covs, model), labels,
            {"filter_bank": bank.to_dict(),
             "reference_mean": model.reference_mean.tolist()})


def cmd_features(args):
    spec = build_spec(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sid, (trials, fs) in load_inputs(spec.dataset_paths, spec).items():
        for fs_name in spec.feature_sets:
            x, y, _ = _subject_features(trials, fs_name, spec, fs)
            stem = out / f"{sid}_{fs_name}"
            if args.format == "csv":
                write_feature_csv(stem.with_suffix(".csv"), fs_name, x, y)
            else:
                save_feature_matrix(stem.with_suffix(".npz"), fs_name, x, y)
            log.info("%s %s: %s", sid, fs_name, x.shape)
    return 0


def cmd_train(args):
    spec = build_spec(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sid, (trials, fs) in load_inputs(spec.dataset_paths, spec).items():
        x, y, params = _subject_features(trials, args.feature_set, spec, fs)
        stem = f"{sid}_{args.feature_set}_{args.regressor}"
        if args.regressor == "lasso":
            model = lasso_fit_cv(x, y, spec.inner_folds,
                                 spec.lambda_grid_size, spec.seed)
        else:
            feat = out / f"{stem}.features.npz"
            save_feature_matrix(feat, args.feature_set, x, y)
            model = knn_fit(x, y, spec.knn_k, source=feat.name,
                            rows=range(len(y)))
        doc = {"subject_id": sid, "feature_set": args.feature_set,
               "model": model.to_dict(), **params}
        with open(out / f"{stem}.json", "w") as fh:
            json.dump(doc, fh)
        log.info("%s: trained %s on %d trials", sid, stem, len(y))
    return 0


def cmd_eval(args):
    spec = build_spec(args)
    result = run_matrix(spec, _subjects(args, spec))
    write_results(args.out, result, spec)
    for key, m in result.summary["means"].items():
        print(f"{key:12s} rmse={m['rmse']:.4f} cc={m['cc']:.4f}")
    failed = result.summary["failed_cells"]
    if failed:
        log.warning("%d cells had numerical failures", len(failed))
    return 1 if failed and args.strict else 0


def cmd_sweep(args):
    spec = build_spec(args)
    if args.axis:
        values = _num_list(args.values)
        if args.axis == "F":
            values = tuple(int(v) for v in values)
        spec = replace(spec, sweep=(args.axis, values))
    if spec.sweep is None:
        raise ConfigError("give --axis/--values or a [sweep] config table")
    rows = run_sweep(spec, _recordings(args, spec), repeats=spec.repeats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = ["axis", "value", "feature_set", "regressor", "rmse", "cc",
              "failed_folds", "failed_subjects"]
    _write_rows(out / "sweep.csv", header,
                [[r["axis"], r["value"], r["feature_set"], r["regressor"],
                  _fmt(r["rmse"]), _fmt(r["cc"]), r["failed_folds"],
                  r["failed_subjects"]] for r in rows])
    failed = any(r["failed_folds"] for r in rows)
    return 1 if failed and args.strict else 0


def cmd_bench(args):
    raw = read_config(args.config) if args.config else {}
    fit = time_training([int(v) for v in _num_list(args.sizes)],
                        gen_cfg=generator_config(args, raw), reps=args.reps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "bench.csv", ["n_trials", "seconds"],
                [[n, f"{t:.6f}"] for n, t in zip(fit.n_values, fit.seconds)])
    with open(out / "bench.json", "w") as fh:
        json.dump({"intercept_s": fit.intercept, "slope_s_per_trial":
                   fit.slope, "r2": fit.r2, "reference": REFERENCE_TIMING},
                  fh, indent=2)
    print(f"t = {fit.intercept:.4f} + {fit.slope:.6f} N  (R^2 = {fit.r2:.4f})")
    return 0


def _common(p, inputs=True):
    if inputs:
        p.add_argument("inputs", nargs="*",
                       help="session or trial files (default: config)")
    p.add_argument("--config", help="TOML or JSON experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")


def _eval_flags(p):
    p.add_argument("--feature-sets", help="comma list, e.g. FS1,FS3")
    p.add_argument("--regressors", help="comma list of lasso,knn")
    p.add_argument("--folds", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--edge-guard", type=float,
                   help="fraction of samples dropped at each trial edge "
                        "before covariance estimation")
    p.add_argument("--trial-length", type=float, help="seconds")
    p.add_argument("--synthetic", type=int, metavar="N",
                   help="evaluate N generated subjects instead of files")
    p.add_argument("--coupling", type=float,
                   help="generator coupling for --synthetic")
    p.add_argument("--strict", action="store_true",
                   help="exit 1 if any cell had a numerical failure")


def build_parser():
    parser = argparse.ArgumentParser(prog="spdreg", description=__doc__,
                                     formatter_class=argparse.
                                     RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic benchmark")
    _common(p, inputs=False)
    p.add_argument("--n-subjects", type=int, default=16)
    p.add_argument("--coupling", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="clean RTs and epoch sessions")
    _common(p)
    p.add_argument("--trial-length", type=float)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("features", help="dump feature matrices")
    _common(p)
    p.add_argument("--feature-sets", default=",".join(FEATURE_SETS))
    p.add_argument("--trial-length", type=float)
    p.add_argument("--edge-guard", type=float)
    p.add_argument("--format", choices=("csv", "npz"), default="csv")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="fit one model per subject")
    _common(p)
    p.add_argument("--feature-set", choices=FEATURE_SETS, default="FS3")
    p.add_argument("--regressor", choices=REGRESSORS, default="lasso")
    p.add_argument("--trial-length", type=float)
    p.add_argument("--edge-guard", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="repeated k-fold evaluation")
    _common(p)
    _eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="evaluate over F or trial length")
    _common(p)
    _eval_flags(p)
    p.add_argument("--axis", choices=("F", "trial_length"))
    p.add_argument("--values", help="comma list of swept values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="FS3 training time versus N")
    _common(p, inputs=False)
    p.add_argument("--sizes", default="100,200,400,800")
    p.add_argument("--reps", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: "
                                            "%(message)s")
    try:
        return args.func(args)
    except (SpdregError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
