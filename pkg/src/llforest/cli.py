"""Command-line entry point: ``llforest <command> [flags]``.

Exit codes: 0 on success, 1 on a runtime or numerical failure, 2 on a
usage, schema or configuration error. Every command prints the resolved
configuration to stderr so a run can be reproduced from its log.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .causal import estimate_nuisances, fit_llcf
from .dataset import _fmt, load_csv, load_features, write_csv
from .errors import ConfigError, LLFError, SchemaError
from .forest import ForestConfig, default_threads
from .model import fit_llf, load_model, resolve_features, save_model
from .simbench import (Design, SimSpec, generate, run_causal_benchmark, run_coverage_benchmark,
                       run_rmse_benchmark)
from .tuning import TuningGrid, cross_validate
from .weights import forest_weights


class UsageError(LLFError):
    pass


def _log(obj) -> None:
    print(json.dumps(obj, sort_keys=True), file=sys.stderr)


def _threads(args) -> int:
    return args.threads if args.threads else default_threads()


def _config(args, d: int) -> ForestConfig:
    cfg = ForestConfig(
        num_trees=args.trees,
        subsample_fraction=args.subsample_fraction,
        mtry=args.mtry,
        min_leaf_size=args.min_leaf,
        split_rule=args.split_rule,
        seed=args.seed,
    )
    return cfg.resolved(d)


def _feature_spec(args, names):
    """``--features`` takes column names (or 1-based positions); default is lasso selection."""
    if not args.features:
        return "lasso"
    if args.features.strip().lower() == "all":
        return "all"
    out = []
    for tok in (t.strip() for t in args.features.split(",")):
        if tok in names:
            out.append(names.index(tok))
        elif tok.isdigit() and 1 <= int(tok) <= len(names):
            out.append(int(tok) - 1)
        else:
            raise SchemaError(f"--features: unknown column {tok!r}; available: {', '.join(names)}")
    return out


def _model_summary(model) -> dict:
    feats = model.selected_features
    names = model.data.column_names
    out = {"n": model.data.n, "d": model.data.d, "B": model.forest.num_trees,
           "selected_features": None if feats is None else [names[j] if names else int(j) for j in feats]}
    if model.kind == "causal":
        out.update(lambda_tau=model.lambda_tau, lambda_a=model.lambda_a)
    else:
        out["lambda"] = model.lambda_predict
    return out


# -- commands -------------------------------------------------------------

def cmd_fit(args) -> int:
    data = load_csv(args.data, args.response, args.treatment)
    cfg = _config(args, data.d)
    _log({"command": "fit", "config": cfg.to_dict(), "threads": _threads(args)})
    feats = _feature_spec(args, list(data.column_names))
    if args.tune:
        sel = resolve_features(data, feats, cfg.seed)
        grid = TuningGrid(folds=args.folds)
        res = cross_validate(data, grid, rng=cfg.seed, base_config=cfg, selected_features=sel,
                             threads=_threads(args))
        cfg = res.config.resolved(data.d)
        table_path = Path(str(args.out) + ".tuning.csv")
        write_csv(table_path, res.table_columns())
        model = fit_llf(data, cfg, lambda_predict=res.lambda_predict, selected_features=sel,
                        threads=_threads(args))
        model.tuning.update(method="cv", folds=grid.folds)
        _log({"tuning_table": str(table_path), "chosen_config": cfg.to_dict(), "lambda": res.lambda_predict})
    else:
        model = fit_llf(data, cfg, lambda_predict=args.lam, selected_features=feats, threads=_threads(args))
    save_model(model, args.out)
    print(json.dumps(_model_summary(model)))
    return 0


def _test_matrix(model, path):
    names = list(model.data.column_names)
    if not names:
        raise SchemaError("model has no column names; cannot match test columns")
    try:
        return load_features(path, names)
    except SchemaError as exc:
        raise SchemaError(f"{exc} (model expects: {', '.join(names)})") from None


def _emit(columns: dict, out) -> None:
    if out:
        write_csv(out, columns)
    else:
        names = list(columns)
        print(",".join(names))
        for row in zip(*columns.values()):
            print(",".join(_fmt(v) for v in row))


def cmd_predict(args) -> int:
    model = load_model(args.model)
    if model.kind != "regression":
        raise UsageError("this is a causal model; use causal-predict")
    _log({"command": "predict", "config": model.forest.config.to_dict(), "lambda": model.lambda_predict,
          "oob": args.data is None, "ci": args.ci})
    X = None if args.data is None else _test_matrix(model, args.data)
    pred = model.predict(X, ci_level=args.ci)
    cols = {"prediction": pred.mu}
    if args.ci is not None:
        cols.update(ci_lo=pred.ci_lo, ci_hi=pred.ci_hi)
    _emit(cols, args.out)
    return 0


def cmd_tune(args) -> int:
    data = load_csv(args.data, args.response)
    cfg = _config(args, data.d)
    grid = TuningGrid(
        mtry_candidates=tuple(args.mtry_grid) if args.mtry_grid else (cfg.mtry,),
        min_leaf_candidates=tuple(args.min_leaf_grid) if args.min_leaf_grid else (cfg.min_leaf_size,),
        subsample_fraction_candidates=(cfg.subsample_fraction,),
        folds=args.folds,
    )
    _log({"command": "tune", "config": cfg.to_dict(), "grid": {
        "lambda": list(grid.lambda_predict_candidates), "mtry": list(grid.mtry_candidates),
        "min_leaf": list(grid.min_leaf_candidates), "folds": grid.folds}})
    sel = resolve_features(data, _feature_spec(args, list(data.column_names)), cfg.seed)
    res = cross_validate(data, grid, rng=cfg.seed, base_config=cfg, selected_features=sel, threads=_threads(args))
    write_csv(args.out, res.table_columns())
    chosen = {"config": res.config.resolved(data.d).to_dict(), "lambda_predict": res.lambda_predict,
              "selected_features": None if sel is None else [int(j) for j in sel]}
    cfg_path = Path(args.out).with_suffix(".json")
    cfg_path.write_text(json.dumps(chosen, indent=2, sort_keys=True))
    print(json.dumps(chosen, sort_keys=True))
    return 0


def cmd_weights(args) -> int:
    model = load_model(args.model)
    x0 = np.array([float(v) for v in args.x0.split(",")])
    _log({"command": "weights", "config": model.forest.config.to_dict(), "x0": x0.tolist()})
    w = forest_weights(model.forest, x0)
    _emit({"index": w.indices, "alpha": w.weights}, args.out)
    return 0


def _spec(args) -> SimSpec:
    return SimSpec(Design(args.design), n=args.n, d=args.d, sigma=args.sigma, seed=args.seed)


def cmd_simulate(args) -> int:
    spec = _spec(args)
    _log({"command": "simulate", "spec": {"design": spec.design.value, "n": spec.n, "d": spec.d,
                                          "sigma": spec.sigma, "seed": spec.seed}})
    data, truth = generate(spec)
    cols = {name: data.features[:, j] for j, name in enumerate(data.column_names)}
    if data.treatment is not None:
        cols["w"] = data.treatment
    cols["y"] = data.responses
    write_csv(args.out, cols)
    truth_path = args.truth_out or str(Path(args.out).with_suffix("")) + "_truth.csv"
    write_csv(truth_path, {"tau" if spec.is_causal else "mu": truth})
    return 0


def cmd_bench(args) -> int:
    spec = _spec(args)
    cfg = ForestConfig(num_trees=args.trees, seed=args.seed)
    _log({"command": f"bench {args.kind}", "spec": {"design": spec.design.value, "n": spec.n, "d": spec.d,
                                                      "sigma": spec.sigma, "seed": spec.seed},
          "config": cfg.to_dict(), "repeats": args.repeats, "threads": _threads(args)})
    if args.kind == "rmse":
        res = run_rmse_benchmark(spec, n_test=args.n_test, repeats=args.repeats, config=cfg,
                                 threads=_threads(args))
    elif args.kind == "coverage":
        res = run_coverage_benchmark(spec, level=args.level, repeats=args.repeats, config=cfg,
                                     threads=_threads(args))
    else:
        res = run_causal_benchmark(spec, n_test=args.n_test, repeats=args.repeats, config=cfg,
                                   threads=_threads(args))
    res.write_csv(args.out)
    return 0


def cmd_causal_fit(args) -> int:
    if not args.treatment:
        raise UsageError("causal-fit needs --treatment")
    data = load_csv(args.data, args.response, args.treatment)
    cfg = _config(args, data.d)
    _log({"command": "causal-fit", "config": cfg.to_dict(), "threads": _threads(args)})
    nuis = estimate_nuisances(data, cfg, threads=_threads(args))
    model = fit_llcf(data, nuis, cfg, lambda_tau=args.lam, lambda_a=args.lam,
                     selected_features=_feature_spec(args, list(data.column_names)), threads=_threads(args))
    save_model(model, args.out)
    print(json.dumps(_model_summary(model)))
    return 0


def cmd_causal_predict(args) -> int:
    model = load_model(args.model)
    if model.kind != "causal":
        raise UsageError("this is a regression model; use predict")
    _log({"command": "causal-predict", "config": model.forest.config.to_dict(),
          "lambda_tau": model.lambda_tau, "lambda_a": model.lambda_a, "oob": args.data is None})
    X = None if args.data is None else _test_matrix(model, args.data)
    _emit({"tau": model.predict_tau(X)}, args.out)
    return 0


# -- parser ---------------------------------------------------------------

def _forest_flags(p) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: LLF_THREADS or all cores)")
    p.add_argument("--trees", type=int, default=2000)
    p.add_argument("--min-leaf", dest="min_leaf", type=int, default=5)
    p.add_argument("--mtry", type=int, default=None)
    p.add_argument("--subsample-fraction", dest="subsample_fraction", type=float, default=0.5)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="prediction ridge penalty (default: chosen by out-of-bag error)")
    p.add_argument("--split-rule", dest="split_rule", choices=["cart", "ridge"], default="ridge")
    p.add_argument("--features", default=None,
                   help="comma list of regression columns overriding lasso selection, or 'all'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="llforest", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a local linear forest and save it")
    p.add_argument("--data", required=True)
    p.add_argument("--response", required=True)
    p.add_argument("--treatment", default=None, help="treatment column to exclude from the features")
    p.add_argument("--out", required=True)
    p.add_argument("--tune", action="store_true", help="choose the penalty by k-fold cross-validation")
    p.add_argument("--folds", type=int, default=5)
    _forest_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict from a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", default=None, help="test CSV; omit for out-of-bag predictions on the training rows")
    p.add_argument("--out", default=None)
    p.add_argument("--ci", type=float, default=None, metavar="LEVEL", help="add ci_lo/ci_hi at this level")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("tune", help="cross-validate forest parameters and the penalty")
    p.add_argument("--data", required=True)
    p.add_argument("--response", required=True)
    p.add_argument("--out", required=True, help="CV table CSV; the chosen config goes beside it as .json")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--mtry-grid", dest="mtry_grid", type=int, nargs="+", default=None)
    p.add_argument("--min-leaf-grid", dest="min_leaf_grid", type=int, nargs="+", default=None)
    _forest_flags(p)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("weights", help="dump the forest weights at one point")
    p.add_argument("--model", required=True)
    p.add_argument("--x0", required=True, help="comma-separated test point")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("simulate", help="write a simulated dataset and its truth")
    p.add_argument("--design", required=True, choices=[d.value for d in Design])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--truth-out", dest="truth_out", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="run a simulation benchmark")
    p.add_argument("kind", choices=["rmse", "coverage", "causal"])
    p.add_argument("--design", required=True, choices=[d.value for d in Design])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--n-test", dest="n_test", type=int, default=1000)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--trees", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("causal-fit", help="fit a local linear causal forest")
    p.add_argument("--data", required=True)
    p.add_argument("--response", required=True)
    p.add_argument("--treatment", default=None)
    p.add_argument("--out", required=True)
    _forest_flags(p)
    p.set_defaults(func=cmd_causal_fit, trees=500)

    p = sub.add_parser("causal-predict", help="predict treatment effects from a saved causal model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_causal_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, SchemaError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except LLFError as exc:
        code = 2 if isinstance(exc, ValueError) else 1
        print(f"error: {exc}", file=sys.stderr)
        return code
    except (RuntimeError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
