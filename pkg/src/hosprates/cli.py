"""Command-line pipeline driver.

Subcommands: ``simulate``, ``fit``, ``report``, ``standardize``,
``classify``, ``compare``, ``calibrate``.  Every run writes a manifest with
the config hash, seeds and input hashes; identical configs reproduce
identical bytes.  Exit codes: 0 success, 1 user error, 2 numerical failure.
"""

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import gibbs, matching, rates, simulate, splines
from .data import (DataError, build_design, design_for, load_dataset,
                   split_by_period, write_hospitals_csv, write_patients_csv)
from .gibbs import ChainConfig, NumericalError
from .models import ModelSpec
from .util import canonical_json, sha256_short, write_csv, write_json


class UserError(ValueError):
    pass


def _file_hash(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()[:16]


def _manifest(out_dir, command, config, inputs, outputs, extra=None):
    payload = {
        "command": command,
        "config": config,
        "config_hash": sha256_short(canonical_json(config)),
        "inputs": {k: _file_hash(v) for k, v in inputs.items()},
        "outputs": sorted(outputs),
    }
    if extra:
        payload.update(extra)
    write_json(os.path.join(out_dir, "manifest.json"), payload)


def _load_model(path) -> ModelSpec:
    if not os.path.exists(path):
        raise UserError(f"model config not found: {path}")
    return ModelSpec.from_json(path)


def _load_data(args):
    for path in (args.patients, args.hospitals):
        if not os.path.exists(path):
            raise UserError(f"input file not found: {path}")
    return load_dataset(args.patients, args.hospitals)


def _outdir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


# ---------------------------------------------------------------------------

def cmd_simulate(args):
    out = _outdir(args)
    cfg_dict = {}
    if args.config:
        with open(args.config) as fh:
            cfg_dict = json.load(fh)
    if "spec" in cfg_dict:
        cfg_dict["spec"] = ModelSpec.from_config(cfg_dict["spec"])
    if "params" in cfg_dict:
        cfg_dict["params"] = tuple((k, v) for k, v in cfg_dict["params"].items())
    cfg = simulate.GeneratorConfig(seed=args.seed, **cfg_dict)
    dataset, truth = simulate.generate(cfg)
    p_path = os.path.join(out, "patients.csv")
    h_path = os.path.join(out, "hospitals.csv")
    write_patients_csv(p_path, dataset)
    write_hospitals_csv(h_path, dataset)
    truth_path = os.path.join(out, "truth.json")
    write_json(truth_path, {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                            for k, v in truth.items()})
    config = {"generator": {k: (v if not isinstance(v, ModelSpec) else v.to_config())
                            for k, v in cfg.__dict__.items()
                            if not callable(v)}, "seed": args.seed}
    _manifest(out, "simulate", config, {}, ["patients.csv", "hospitals.csv", "truth.json"])
    print(f"wrote {dataset.N} patients at {dataset.H} hospitals to {out}")
    return 0


def _chain_config(args):
    return ChainConfig(iterations=args.iterations, burnin=args.burnin,
                       thin=args.thin, seed=args.seed, n_chains=args.chains,
                       delta_step=args.delta_step)


def _fit_once(spec, dataset, args):
    """Fit on the training part (after an optional period split)."""
    if args.cutoff is not None:
        train, _ = split_by_period(dataset, args.cutoff)
    else:
        train = dataset
    bundle = build_design(train, spec)
    chains = gibbs.run_chains(spec, bundle, _chain_config(args), threads=args.threads)
    pooled = gibbs.pool_samples(chains)
    pooled.meta["train_cutoff"] = args.cutoff
    return bundle, pooled


def cmd_fit(args):
    out = _outdir(args)
    spec = _load_model(args.model)
    dataset = _load_data(args)
    bundle, pooled = _fit_once(spec, dataset, args)
    s_path = os.path.join(out, "samples.csv")
    m_path = os.path.join(out, "meta.json")
    gibbs.save_samples(pooled, s_path, m_path)

    print(f"model {spec.name} ({spec.spec_hash()}), train hash {bundle.data_hash}")
    acc = pooled.meta.get("delta_acceptance")
    if acc and any(a is not None for a in acc):
        shown = ", ".join("-" if a is None else f"{a:.3f}" for a in acc)
        print(f"delta acceptance per chain: {shown}")
    print(f"{'parameter':>14s} {'mean':>10s} {'2.5%':>10s} {'97.5%':>10s}")
    for name in sorted(pooled.hyper):
        arr = pooled.hyper[name]
        if arr.ndim > 1:
            continue
        lo, hi = np.quantile(arr, [0.025, 0.975])
        print(f"{name:>14s} {arr.mean():>10.4f} {lo:>10.4f} {hi:>10.4f}")
    for j, name in enumerate(pooled.meta["beta_names"]):
        lo, hi = np.quantile(pooled.beta[:, j], [0.025, 0.975])
        print(f"{'beta.' + name:>14s} {pooled.beta[:, j].mean():>10.4f} {lo:>10.4f} {hi:>10.4f}")

    config = {"model": spec.to_config(), "chain": vars(_chain_config(args)),
              "cutoff": args.cutoff, "seed": args.seed}
    _manifest(out, "fit", config,
              {"patients": args.patients, "hospitals": args.hospitals},
              ["samples.csv", "meta.json"])
    return 0


def _rebuild_fit(args, fit_dir, model_path):
    spec = _load_model(model_path)
    dataset = _load_data(args)
    samples = gibbs.load_samples(os.path.join(fit_dir, "samples.csv"),
                                 os.path.join(fit_dir, "meta.json"))
    cutoff = samples.meta.get("train_cutoff")
    if cutoff is not None:
        train, valid = split_by_period(dataset, cutoff)
    else:
        train, valid = dataset, None
    bundle = build_design(train, spec)
    if bundle.data_hash != samples.meta["data_hash"]:
        raise UserError("fit artifacts do not match these input files (hash mismatch)")
    return spec, dataset, train, valid, bundle, samples


def _smooth_overlay(x, y, n_bins=40, degree=3, knots=8):
    """Penalized-least-squares smooth of binned means with GCV lambda."""
    order = np.argsort(x)
    x, y = x[order], y[order]
    edges = np.quantile(x, np.linspace(0, 1, n_bins + 1))
    mids, means = [], []
    for i in range(n_bins):
        inb = (x >= edges[i]) & (x <= edges[i + 1] if i == n_bins - 1 else x < edges[i + 1])
        if inb.any():
            mids.append(x[inb].mean())
            means.append(y[inb].mean())
    mids = np.array(mids)
    means = np.array(means)
    knots = min(knots, max(1, len(mids) - degree - 2))
    basis, b = splines.build_basis(mids, degree, knots)
    pen = splines.build_penalty(basis.k, 0.0).matrix
    best = None
    for lam in np.logspace(-4, 4, 33):
        a = b.T @ b + lam * pen
        coef = np.linalg.solve(a, b.T @ means)
        hat_tr = np.trace(np.linalg.solve(a, b.T @ b))
        resid = means - b @ coef
        gcv = len(mids) * (resid @ resid) / (len(mids) - hat_tr) ** 2
        if best is None or gcv < best[0]:
            best = (gcv, coef)
    grid = np.linspace(mids.min(), mids.max(), 200)
    return grid, basis.evaluate(grid) @ best[1], mids, means


def _write_report_files(out, report, bundle):
    rates_path = os.path.join(out, "rates.csv")
    write_csv(rates_path, rates.RateReport.CSV_HEADER, report.rows())

    labels = {hid: lab for hid, lab in zip(report.hospital_ids, report.labels)}
    vols = {hid: int(v) for hid, v in zip(report.hospital_ids, report.volume)}
    counts_rows = []
    for stratum in ("all", "lower", "upper"):
        if stratum == "all":
            ids = list(labels)
        else:
            arr = np.array([vols[i] for i in labels], dtype=float)
            cut = np.quantile(arr, 0.25 if stratum == "lower" else 0.75)
            ids = [i for i in labels
                   if (vols[i] <= cut if stratum == "lower" else vols[i] >= cut)]
        row = {lab: 0 for lab in rates.LABELS}
        for i in ids:
            row[labels[i]] += 1
        counts_rows.append([stratum, row["Low"], row["Average"], row["High"],
                            len(ids)])
    counts_path = os.path.join(out, "classification_counts.csv")
    write_csv(counts_path, ["stratum", "low", "average", "high", "total"], counts_rows)

    plot_files = []
    for key in ("P", "IS", "DS"):
        vals = report.stats[key]["mean"]
        grid, smooth, mids, means = _smooth_overlay(np.log1p(bundle.volume.astype(float)),
                                                    np.asarray(vals))
        scatter_path = os.path.join(out, f"plot_{key.lower()}_vs_volume.csv")
        write_csv(scatter_path, ["hospital_id", "volume", "log_volume", "value"],
                  [[hid, int(v), float(lv), float(val)]
                   for hid, v, lv, val in zip(report.hospital_ids, report.volume,
                                              np.log1p(bundle.volume), vals)])
        overlay_path = os.path.join(out, f"plot_{key.lower()}_smooth.csv")
        write_csv(overlay_path, ["log_volume", "smooth_value"],
                  [[float(g), float(s)] for g, s in zip(grid, smooth)])
        plot_files += [os.path.basename(scatter_path), os.path.basename(overlay_path)]
    return ["rates.csv", "classification_counts.csv", *plot_files]


def cmd_report(args):
    out = _outdir(args)
    spec, dataset, train, valid, bundle, samples = _rebuild_fit(args, args.fit, args.model)
    report = rates.summarize(samples, bundle, functional=args.functional,
                             threshold=args.threshold)
    files = _write_report_files(out, report, bundle)
    if args.svg:
        _render_svg(out, report, bundle)
    config = {"model": spec.to_config(), "threshold": args.threshold,
              "functional": args.functional, "seed": args.seed}
    _manifest(out, "report", config,
              {"patients": args.patients, "hospitals": args.hospitals},
              files, extra={"engine": report.meta})
    print(f"wrote rate report for {len(report.hospital_ids)} hospitals to {out}")
    return 0


def cmd_standardize(args):
    out = _outdir(args)
    spec, dataset, train, valid, bundle, samples = _rebuild_fit(args, args.fit, args.model)
    report = rates.summarize(samples, bundle, functional=args.functional,
                             threshold=args.threshold)
    write_csv(os.path.join(out, "rates.csv"), rates.RateReport.CSV_HEADER, report.rows())
    config = {"model": spec.to_config(), "threshold": args.threshold,
              "functional": args.functional, "seed": args.seed}
    _manifest(out, "standardize", config,
              {"patients": args.patients, "hospitals": args.hospitals}, ["rates.csv"])
    print(f"wrote standardized rates to {out}")
    return 0


def cmd_classify(args):
    out = _outdir(args)
    if not os.path.exists(args.rates):
        raise UserError(f"rates file not found: {args.rates}")
    import csv as _csv
    with open(args.rates, newline="") as fh:
        reader = _csv.DictReader(fh)
        rows = list(reader)
    col = args.functional
    labels_rows = []
    counts = {lab: 0 for lab in rates.LABELS}
    for row in rows:
        lo, hi = float(row[f"{col}_lo"]), float(row[f"{col}_hi"])
        lab = "Low" if hi < args.threshold else ("High" if lo > args.threshold
                                                 else "Average")
        counts[lab] += 1
        labels_rows.append([row["hospital_id"], lab])
    write_csv(os.path.join(out, "labels.csv"), ["hospital_id", "class"], labels_rows)
    write_csv(os.path.join(out, "label_counts.csv"), ["low", "average", "high", "total"],
              [[counts["Low"], counts["Average"], counts["High"], len(rows)]])
    config = {"threshold": args.threshold, "functional": args.functional}
    _manifest(out, "classify", config, {"rates": args.rates},
              ["labels.csv", "label_counts.csv"])
    print(f"classified {len(rows)} hospitals "
          f"(Low {counts['Low']}, Average {counts['Average']}, High {counts['High']})")
    return 0


def cmd_compare(args):
    out = _outdir(args)
    spec_a, dataset, train, valid, bundle_a, samples_a = _rebuild_fit(
        args, args.fit_a, args.model_a)
    spec_b, _, _, _, bundle_b, samples_b = _rebuild_fit(args, args.fit_b, args.model_b)
    if valid is None:
        raise UserError("compare needs fits trained with a --cutoff split")
    val_a = design_for(bundle_a, valid, spec_a)
    val_b = design_for(bundle_b, valid, spec_b)
    ll_a = rates.predictive_log_likelihood(samples_a, val_a)
    ll_b = rates.predictive_log_likelihood(samples_b, val_b)
    bf = rates.log_predictive_bayes_factor(samples_a, samples_b, val_a, val_b)
    lines = [
        f"model_a {spec_a.name} ({spec_a.spec_hash()})",
        f"model_b {spec_b.name} ({spec_b.spec_hash()})",
        f"validation_patients {valid.N}",
        f"log_predictive_a {ll_a!r}",
        f"log_predictive_b {ll_b!r}",
        f"log_bayes_factor_a_over_b {bf!r}",
    ]
    with open(os.path.join(out, "bf.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    config = {"model_a": spec_a.to_config(), "model_b": spec_b.to_config(),
              "seed": args.seed}
    _manifest(out, "compare", config,
              {"patients": args.patients, "hospitals": args.hospitals}, ["bf.txt"])
    print("\n".join(lines))
    return 0


def cmd_calibrate(args):
    out = _outdir(args)
    with open(args.study) as fh:
        study_cfg = json.load(fh)
    cohort = matching.CohortDef(
        volume_quantile_le=study_cfg.get("quantile_volume_le"),
        hospital_ids=tuple(study_cfg.get("hospital_ids", ())),
        control_quantile_ge=study_cfg.get("control_quantile_ge"),
        k=study_cfg.get("k", 5),
        caliper_sd=study_cfg.get("caliper_sd", 0.2),
        exact_keys=tuple(study_cfg.get("exact_keys", ())),
    )
    fits = []
    first = None
    for item in args.fits:
        try:
            name, fit_dir, model_path = item.split(":", 2)
        except ValueError:
            raise UserError("--fits entries look like name:fit_dir:model.json") from None
        spec, dataset, train, valid, bundle, samples = _rebuild_fit(args, fit_dir,
                                                                    model_path)
        if valid is None:
            raise UserError("calibrate needs fits trained with a --cutoff split")
        if first is None:
            first = (spec, dataset, train, valid, bundle)
        fits.append((name, spec, samples, bundle))
    spec0, dataset, train, valid, bundle0 = first
    val_bundle = design_for(bundle0, valid, spec0)

    prop = matching.fit_propensity(val_bundle, cohort, valid)
    feats, _ = matching._patient_features(val_bundle)
    logits = prop.logits(feats)
    risk = matching.risk_score(fits[0][2], val_bundle, spec0)
    study = matching.match(val_bundle, valid, cohort, logits, risk)

    balance = matching.balance_table(study, val_bundle, logits, risk)
    write_csv(os.path.join(out, "balance.csv"),
              ["covariate", "treated_mean", "matched_control_mean",
               "all_control_mean", "std_diff_before", "std_diff_after"],
              [[r["covariate"], r["treated_mean"], r["matched_control_mean"],
                r["all_control_mean"], r["std_diff_before"], r["std_diff_after"]]
               for r in balance["rows"]])

    agg_fits = []
    for name, spec, samples, bundle in fits:
        vb = design_for(bundle, valid, spec)
        agg_fits.append((name, samples, vb))
    agg = matching.aggregation_check(study, val_bundle, agg_fits)
    write_csv(os.path.join(out, "aggregation.csv"),
              ["model", "treated", "matched_controls", "all_controls"],
              [[r["model"], r["treated"], r["matched_controls"], r["all_controls"]]
               for r in agg["rows"]])

    config = {"study": study_cfg, "fits": list(args.fits), "seed": args.seed}
    _manifest(out, "calibrate", config,
              {"patients": args.patients, "hospitals": args.hospitals, "study": args.study},
              ["balance.csv", "aggregation.csv"],
              extra={"matching": {"method": study.method, "k": study.k,
                                  "caliper": study.caliper,
                                  "pairs": len(study.pairs),
                                  "dropped": len(study.dropped),
                                  "propensity_ridged": prop.ridged}})
    print(f"matched {len(study.pairs)} treated patients ({study.method}, k={study.k})")
    return 0


def _render_svg(out, report, bundle):
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt
    for key in ("P", "IS", "DS"):
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.scatter(np.log1p(bundle.volume), report.stats[key]["mean"], s=6, alpha=0.5)
        ax.axhline(report.ybar, color="red", lw=1)
        ax.set_xlabel("log(volume + 1)")
        ax.set_ylabel(f"{key} posterior mean")
        fig.savefig(os.path.join(out, f"plot_{key.lower()}_vs_volume.svg"))
        plt.close(fig)


# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)


def _add_data(p):
    p.add_argument("--patients", required=True)
    p.add_argument("--hospitals", required=True)


def _add_chain(p):
    p.add_argument("--iterations", type=int, default=6000)
    p.add_argument("--burnin", type=int, default=1000)
    p.add_argument("--thin", type=int, default=5)
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--delta-step", type=float, default=0.1)
    p.add_argument("--cutoff", type=int, default=None,
                   help="fit on admit periods <= cutoff (rest is validation)")


def build_parser():
    ap = argparse.ArgumentParser(prog="hosprates",
                                 description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic dataset")
    _add_common(p)
    p.add_argument("--config", help="generator config JSON")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run the Gibbs sampler")
    _add_common(p); _add_data(p); _add_chain(p)
    p.add_argument("--model", required=True, help="model config JSON")
    p.set_defaults(func=cmd_fit)

    for name, fn in (("report", cmd_report), ("standardize", cmd_standardize)):
        p = sub.add_parser(name, help="summarize a completed fit")
        _add_common(p); _add_data(p)
        p.add_argument("--model", required=True)
        p.add_argument("--fit", required=True, help="directory from `fit`")
        p.add_argument("--threshold", type=float, default=0.15)
        p.add_argument("--functional", choices=("P", "IS", "DS"), default="DS")
        if name == "report":
            p.add_argument("--svg", action="store_true",
                           help="also render static SVG scatterplots")
        p.set_defaults(func=fn)

    p = sub.add_parser("classify", help="relabel an existing rates.csv")
    _add_common(p)
    p.add_argument("--rates", required=True)
    p.add_argument("--threshold", type=float, default=0.15)
    p.add_argument("--functional", choices=("P", "IS", "DS"), default="DS")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("compare", help="out-of-sample predictive Bayes factor")
    _add_common(p); _add_data(p)
    p.add_argument("--model-a", required=True)
    p.add_argument("--fit-a", required=True)
    p.add_argument("--model-b", required=True)
    p.add_argument("--fit-b", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("calibrate", help="matched-cohort calibration study")
    _add_common(p); _add_data(p)
    p.add_argument("--study", required=True, help="study definition JSON")
    p.add_argument("--fits", nargs="+", required=True,
                   help="entries name:fit_dir:model.json (first drives the risk score)")
    p.set_defaults(func=cmd_calibrate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UserError, DataError, matching.MatchingError, FileNotFoundError,
            json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
