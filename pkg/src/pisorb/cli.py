"""Command-line entry point: ``pisorb <command> [--options]``.

Every command writes its artifacts into ``--out`` together with
``resolved_config.json`` (all options after defaults are applied) and
``versions.json``. Exit codes: 0 success, 1 usage error, 2 data error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .ablation import VariantSpec, make_source_model, run_ablation
from .dataset import (
    DataError,
    FEATURE_NAMES,
    SplitResult,
    compute_vif,
    feature_matrix,
    group_split,
    load_dataset,
    screen_outliers,
    verify_balance,
)
from .explain import ale_curve, explanation_bundle, kernel_shap, shap_ale_agreement, shap_summary
from .isotherm import FitError, FitResult, IsothermParams, ensemble_predict, fit_isotherm, fit_stratified
from .network import DESK_WIDTHS, ModelFileError, NetworkConfig, load_model, save_model
from .trainer import (
    TrainData,
    TrainingAborted,
    default_phases,
    holdout_groups,
    phases_from_json,
    prepare_split,
)
from .ablation import evaluate_metrics, train_variant
from .synthetic import METHANE, SURROGATE, scaled_gas, synthesize, synthesize_noiseless_sips
from .transfer import TransferError, transfer_weights
from .uq import calibration_metrics, fit_temperature, mc_dropout_predict, propagate_joint, reliability_table

log = logging.getLogger("pisorb")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- helpers


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _versions():
    return {"pisorb": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def _prepare_out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    _write_json(out / "resolved_config.json", cfg)
    _write_json(out / "versions.json", _versions())
    return out


def _widths(text):
    try:
        w = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--widths must be comma-separated integers, got {text!r}") from None
    if len(w) != 5 or min(w) < 1:
        raise UsageError("--widths needs five positive integers")
    return w


def _epochs(text):
    try:
        e = tuple(int(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--epochs must be three comma-separated integers, got {text!r}") from None
    if len(e) != 3 or min(e) < 0:
        raise UsageError("--epochs needs three non-negative integers")
    return e


def _load(args):
    return load_dataset(args.data, args.schema)


def _split_for(args, ds):
    if getattr(args, "split", None):
        return SplitResult.load(args.split, ds)
    return group_split(ds, args.test_fraction, seed=args.seed)


def _phases(args):
    if getattr(args, "curriculum", None):
        return phases_from_json(json.loads(Path(args.curriculum).read_text()))
    return default_phases(_epochs(args.epochs))


def _net_config(args):
    return NetworkConfig(hidden_widths=_widths(args.widths), dropout_p=args.dropout, seed=args.seed)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _train_test(args, ds):
    """Training rows are split into fit/validation; test rows are only read
    when the caller evaluates."""
    split = _split_for(args, ds)
    leak = split.leakage(ds)
    if leak > 0:
        raise DataError(f"split leaks {leak:.1%} of test rows into training")
    train, test = prepare_split(ds, split)
    fit, val = holdout_groups(train, args.val_fraction, seed=args.seed)
    return split, fit, val, test


# ---------------------------------------------------------------- commands


def cmd_split(args):
    ds = _load(args)
    out = _prepare_out(args)
    split = group_split(ds, args.test_fraction, seed=args.seed)
    split.save(out / "split.json")
    bal = verify_balance(split, ds)
    vif, collinear = compute_vif(feature_matrix(ds))
    outliers = screen_outliers(ds)
    report = {
        "n_rows": len(ds),
        "n_experiments": len(ds.experiments),
        "rejected": ds.rejected,
        "leakage": split.leakage(ds),
        "balance": bal.to_dict(),
        "balance_compliant": bal.compliant(),
        "vif": {n: {"vif": float(v), "collinear": bool(c)} for n, v, c in zip(FEATURE_NAMES, vif, collinear)},
        "outliers": {"flagged_rows": outliers.flagged_rows, "rate": outliers.rate(len(ds)),
                     "insufficient": outliers.insufficient},
    }
    _write_json(out / "balance.json", report)
    _write_csv(out / "partition.csv", ["row", "experiment_id", "partition", "stratum"],
               [[i, e, p, s] for i, (e, p, s) in enumerate(zip(ds.experiment_id, split.partition, split.stratum))])
    log.info("split: %d train / %d test experiments", len(split.train_experiments), len(split.test_experiments))
    return EXIT_OK


def cmd_fit_isotherms(args):
    ds = _load(args)
    out = _prepare_out(args)
    if args.split:
        ds = ds.subset(SplitResult.load(args.split, ds).partition == "train")
    P, q = ds.pressure, ds.adsorption
    fits = {v: fit_isotherm(v, P, q, seed=args.seed) for v in ("langmuir", "freundlich", "sips")}
    comp = (ds.volatile, ds.moisture)
    comp_fits = {v: fit_isotherm(v, P, q, composition=comp, seed=args.seed) for v in ("comp_langmuir", "comp_sips")}
    strat = fit_stratified(P, q, ds.volatile, variant=args.stratified_variant, seed=args.seed)
    doc = {
        "global": {k: f.to_dict() for k, f in fits.items()},
        "compositional": {k: f.to_dict() for k, f in comp_fits.items()},
        "stratified": {k: (f.to_dict() if f is not None else None) for k, f in strat.items()},
    }
    grid = np.linspace(0.0, float(P.max()), 50)
    try:
        ens = ensemble_predict(fits, grid)
        _write_csv(out / "ensemble.csv", ["pressure", "mean", "structural_variance"],
                   zip(grid.tolist(), ens.mean.tolist(), ens.structural_variance.tolist()))
        doc["ensemble"] = "ensemble.csv"
    except FitError as exc:
        log.warning("ensemble skipped: %s", exc)
        doc["ensemble"] = None
    _write_json(out / "isotherms.json", doc)
    (out / "sips_fit.json").write_text(fits["sips"].to_json() + "\n")
    return EXIT_OK


def _sips_fit(args, fit):
    if getattr(args, "sips_fit", None):
        return FitResult.from_dict(json.loads(Path(args.sips_fit).read_text()))
    return fit_isotherm("sips", fit.pressure, np.expm1(fit.y), seed=args.seed)


def cmd_train(args):
    if args.variant == "transfer" and not args.source_model:
        raise UsageError("--variant transfer requires --source-model")
    ds = _load(args)
    out = _prepare_out(args)
    split, fit, val, test = _train_test(args, ds)
    split.save(out / "split.json")
    cfg = _net_config(args)
    phases = _phases(args)
    tag = args.variant.replace("-", "_")
    sips = _sips_fit(args, fit) if tag != "random_random" else None
    source = load_model(args.source_model) if args.source_model else None
    if tag == "transfer":
        _, manifest, _ = transfer_weights(replace(cfg, seed=args.seed), source)
        manifest.save(out / "transfer_manifest.json")
    try:
        net, rep = train_variant(tag, cfg, phases, fit, val, seed=args.seed, source=source, sips_fit=sips,
                                 max_total_epochs=args.max_epochs)
    except TrainingAborted as exc:
        if exc.report is not None:
            (out / "curriculum.jsonl").write_text(exc.report.to_jsonl())
        if exc.best is not None:
            save_model(exc.best, out / "model_last_finite.json", {"scaler": fit.scaler.to_dict(), "aborted": True})
        raise
    (out / "curriculum.jsonl").write_text(rep.to_jsonl())
    _write_json(out / "summary.json", rep.summary())
    save_model(net, out / "model.json", {"variant": args.variant, "seed": args.seed, "scaler": fit.scaler.to_dict()})
    log.info("evaluation stage: reading test partition (%d rows)", len(test))
    metrics = evaluate_metrics(net.predict(test.X), test.y)
    metrics["convergence_epoch"] = rep.convergence_epoch()
    _write_json(out / "metrics.json", metrics)
    return EXIT_OK


def _model_data(args, ds):
    net, meta, fisher = load_model(args.model)
    if "scaler" not in meta:
        raise DataError(f"{args.model}: model file carries no scaler metadata")
    split, fit, val, test = _train_test(args, ds)
    from .dataset import ScalerState

    scaler = ScalerState.from_dict(meta["scaler"])
    rescale = lambda d: TrainData.from_dataset(ds.subset(np.isin(ds.experiment_id, list(set(d.groups)))), scaler)
    return net, fisher, rescale(fit), rescale(val), rescale(test)


def cmd_uq(args):
    ds = _load(args)
    out = _prepare_out(args)
    net, _, _, val, test = _model_data(args, ds)
    pv = propagate_joint(*mc_dropout_predict(net, val.X, args.n_mc, seed=args.seed))
    tau = fit_temperature(pv, val.y)
    log.info("evaluation stage: reading test partition (%d rows)", len(test))
    pt = propagate_joint(*mc_dropout_predict(net, test.X, args.n_mc, seed=args.seed)).with_tau(tau)
    report = calibration_metrics(pt, test.y).to_dict()
    uncal = calibration_metrics(pt.with_tau(1.0), test.y).to_dict()
    _write_json(out / "uq_report.json", {"calibrated": report, "uncalibrated": uncal, "records": pt.records()})
    _write_csv(out / "reliability.csv", ["nominal", "empirical"],
               [[r["nominal"], r["empirical"]] for r in reliability_table(pt, test.y)])
    return EXIT_OK


def cmd_explain(args):
    ds = _load(args)
    out = _prepare_out(args)
    net, _, fit, _, test = _model_data(args, ds)
    rng = np.random.default_rng(args.seed)
    bg = fit.X[rng.choice(len(fit), size=min(args.background, len(fit)), replace=False)]
    log.info("evaluation stage: reading test partition (%d rows)", len(test))
    X = test.X[: args.max_rows] if args.max_rows else test.X
    shap = kernel_shap(net, X, bg, n_coalitions=args.coalitions, seed=args.seed, exact=args.exact)
    summary = shap_summary(shap)
    curves = [ale_curve(net, fit.X, j, n_bins=args.bins) for j in range(fit.X.shape[1])]
    vif, _ = compute_vif(fit.raw)
    agree = shap_ale_agreement(summary.importance, [c.effect_range for c in curves], FEATURE_NAMES, vif)
    _write_json(out / "explanation.json", explanation_bundle(shap, summary, curves, agree))
    rows = [[FEATURE_NAMES[c.feature], float(e), float(v)] for c in curves for e, v in zip(c.edges, c.values)]
    _write_csv(out / "ale.csv", ["feature", "edge", "value"], rows)
    return EXIT_OK


def cmd_synthesize(args):
    out = _prepare_out(args)
    if args.noiseless:
        params = IsothermParams.sips(*args.sips)
        ds = synthesize_noiseless_sips(params, n_experiments=args.experiments, points=args.points, seed=args.seed)
        generator = {"kind": "shared_sips", "params": params.as_dict()}
    else:
        gas = {"methane": METHANE, "surrogate": SURROGATE}[args.gas]
        if args.scale != 1.0:
            gas = scaled_gas(gas, args.scale)
        ds = synthesize(args.experiments, args.points, seed=args.seed, gas=gas, noise=args.noise)
        generator = {"kind": "sips_family", "gas": gas.__dict__, "noise": args.noise}
    ds.to_csv(out / "data.csv")
    _write_json(out / "generator.json", generator)
    if args.source_model:
        src_ds = synthesize(args.source_experiments, args.points, seed=args.seed + 1000, gas=SURROGATE, prefix="S")
        cfg = NetworkConfig(hidden_widths=_widths(args.widths), seed=args.seed)
        net, meta, fisher = make_source_model(src_ds, cfg, epochs=args.source_epochs, seed=args.seed)
        save_model(net, out / "source_model.json", meta, fisher)
    return EXIT_OK


def cmd_ablate(args):
    ds = _load(args)
    out = _prepare_out(args)
    split, fit, val, test = _train_test(args, ds)
    split.save(out / "split.json")
    source = load_model(args.source_model) if args.source_model else None
    tags = [t.strip().replace("-", "_") for t in args.variants.split(",")]
    if "transfer" in tags and source is None:
        raise UsageError("the transfer variant requires --source-model")
    specs = []
    for t in tags:
        if t.startswith("ensemble"):
            specs.append(VariantSpec(t, k=args.ensemble_size, top_m=args.ensemble_size // 2, seed=args.seed))
        else:
            specs.append(VariantSpec(t, seed=args.seed))
    rep = run_ablation(specs, _net_config(args), _phases(args), fit, val, test, source=source, seed=args.seed,
                       max_total_epochs=args.max_epochs)
    _write_json(out / "ablation.json", rep.to_dict())
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _common(p, data=True, seed=True):
    p.add_argument("--out", required=True, help="output directory")
    if data:
        p.add_argument("--data", required=True, help="measurement CSV")
        p.add_argument("--schema", help="JSON schema sidecar (units, column names)")
    if seed:
        p.add_argument("--seed", type=int, default=0)


def _model_opts(p):
    p.add_argument("--split", help="split JSON from the split command")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--val-fraction", type=float, default=0.1)


def _train_opts(p):
    p.add_argument("--widths", default=",".join(map(str, DESK_WIDTHS)))
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--epochs", default="500,400,300", help="warmup,finetune,full epoch caps")
    p.add_argument("--curriculum", help="JSON list of phase configs (overrides --epochs)")
    p.add_argument("--max-epochs", type=int, default=1200)


def build_parser():
    ap = _Parser(prog="pisorb", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("split", help="group-aware split and balance audit")
    _common(p)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("fit-isotherms", help="classical isotherm fits")
    _common(p)
    p.add_argument("--split", help="fit on the training partition of this split")
    p.add_argument("--stratified-variant", default="langmuir", choices=("langmuir", "freundlich", "sips"))
    p.set_defaults(func=cmd_fit_isotherms)

    p = sub.add_parser("train", help="three-phase curriculum training")
    _common(p)
    _model_opts(p)
    _train_opts(p)
    p.add_argument("--variant", default="transfer", choices=("transfer", "random-random", "random-classical"))
    p.add_argument("--source-model", help="source model JSON (with Fisher) for transfer")
    p.add_argument("--sips-fit", help="Sips FitResult JSON for the physics head")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="synthetic Sips-family data and source model")
    _common(p, data=False)
    p.add_argument("--experiments", type=int, default=40)
    p.add_argument("--points", type=int, default=9)
    p.add_argument("--noise", type=float, default=0.03)
    p.add_argument("--gas", default="methane", choices=("methane", "surrogate"))
    p.add_argument("--scale", type=float, default=1.0, help="scale the gas energy constants")
    p.add_argument("--noiseless", action="store_true", help="one shared noiseless Sips isotherm")
    p.add_argument("--sips", type=float, nargs=3, default=(30.0, 0.8, 1.5), metavar=("Q_MAX", "K", "N"))
    p.add_argument("--source-model", action="store_true", help="also train a synthetic source model")
    p.add_argument("--source-experiments", type=int, default=80)
    p.add_argument("--source-epochs", type=int, default=150)
    p.add_argument("--widths", default=",".join(map(str, DESK_WIDTHS)))
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("uq", help="MC Dropout uncertainty and calibration")
    _common(p)
    _model_opts(p)
    p.add_argument("--model", required=True)
    p.add_argument("--n-mc", type=int, default=100)
    p.set_defaults(func=cmd_uq)

    p = sub.add_parser("explain", help="Kernel SHAP and ALE")
    _common(p)
    _model_opts(p)
    p.add_argument("--model", required=True)
    p.add_argument("--background", type=int, default=100)
    p.add_argument("--coalitions", type=int, default=100)
    p.add_argument("--exact", action="store_true", help="enumerate all coalitions")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--max-rows", type=int, default=0, help="explain at most this many test rows")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("ablate", help="variant ablation with paired tests")
    _common(p)
    _model_opts(p)
    _train_opts(p)
    p.add_argument("--source-model")
    p.add_argument("--variants", default="transfer,random-random,random-classical,ensemble-standard")
    p.add_argument("--ensemble-size", type=int, default=5)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"pisorb: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pisorb: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FitError, TransferError, ModelFileError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"pisorb: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingAborted, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"pisorb: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
