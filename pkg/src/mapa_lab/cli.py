"""Command-line orchestration of the full pipeline.

Subcommands: generate-data, compute-mapa, train, recover-prior, evaluate,
count-passes, trends, non-ident, all. Every artifact carries a JSON
provenance header; re-running a subcommand with unchanged inputs is a
no-op unless --force. Exit status 2 flags usage/configuration errors,
1 numeric or training failures.

Options may come from a .cfg file (INI, [experiment] section) via
--config; explicit command-line flags win over file values.
"""

import argparse
import configparser
import os
import sys

import numpy as np

from . import __version__
from .artifacts import existing_matches, provenance, read_csv, write_csv, write_json
from .datasets import GENERATORS, GroundTruthModel, generate, load_dataset, save_dataset
from .errors import (
    ConfigurationError,
    DegenerateRowError,
    DomainError,
    FitFailureError,
    NumericError,
    RecoveryFailureError,
    TrainingError,
)
from .evaluation import (
    EVAL_FIT_EPOCHS,
    EVAL_FIT_S,
    EVAL_LL_S,
    count_passes,
    estimate_ll,
    fit_eval_proposal,
    kl_to_ground_truth,
    non_identifiability_study,
    posterior_trends,
)
from .mapa import compute_table_cached, rbf_kernel
from .models import PRIOR_STANDARD_NORMAL, load_model, save_model, save_net_bundle
from .prior_recovery import RecoveryConfig, recover_prior
from .rng import make_rng
from .training import HISTORY_FIELDS, MAPA_METHODS, TrainConfig, mapa_k, train

TREND_FIELDS = ("point", "series", "x", "y")
COST_FIELDS = ("method", "s", "k", "decoder_per_point", "encoder_per_point",
               "total_per_point")
EVAL_POINT_FIELDS = ("index", "ll_gt", "ll_model", "diff")
NON_IDENT_FIELDS = ("point", "corr_variant1", "corr_variant2")


def data_dir(out, name, n, seed):
    return os.path.join(out, "data", f"{name}-n{n}-seed{seed}")


def run_dir(out, dataset_name, method, s, k, seed):
    return os.path.join(out, "runs", dataset_name, f"{method}-s{s}-k{k}", f"seed{seed}")


def _load_data(path):
    if not os.path.exists(os.path.join(path, "dataset.json")):
        raise ConfigurationError(f"no dataset at {path} (run generate-data first)")
    return load_dataset(path)


def _resolve_data(args):
    """--data DIR wins; --dataset NAME resolves under --out, generating if absent."""
    if getattr(args, "data", None):
        return args.data
    name = getattr(args, "dataset", None)
    if not name:
        raise ConfigurationError("need --data DIR or --dataset NAME")
    target = data_dir(args.out, name, args.n, args.seed)
    if not os.path.exists(os.path.join(target, "dataset.json")):
        ns = argparse.Namespace(**vars(args))
        ns.name, ns.data, ns.force = name, target, False
        cmd_generate_data(ns)
    return target


# ------------------------------------------------------------- subcommands

def cmd_generate_data(args):
    if args.name not in GENERATORS:
        raise ConfigurationError(
            f"unknown dataset '{args.name}' (choose from {', '.join(GENERATORS)})")
    target = args.data or data_dir(args.out, args.name, args.n, args.seed)
    cfg = {"cmd": "generate-data", "name": args.name, "n": args.n, "seed": args.seed}
    prov = provenance(cfg, args.seed)
    meta_path = os.path.join(target, "dataset.json")
    if not args.force and os.path.exists(meta_path):
        import json
        with open(meta_path) as f:
            old = json.load(f).get("provenance", {})
        if old.get("config_hash") == prov["config_hash"]:
            print(f"generate-data: up to date at {target}")
            return 0
        raise ConfigurationError(
            f"{target} exists with a different configuration; use --force to overwrite")
    ds, gt = generate(args.name, args.n, args.seed, cache=args.cache)
    save_dataset(target, ds, gt, provenance=prov)
    print(f"generate-data: wrote {target} (n={ds.n}, noise_var={ds.noise_var})")
    return 0


def cmd_compute_mapa(args):
    ds, _ = _load_data(args.data)
    X = ds.X if args.scope == "full" else ds.X[ds.indices("train")]
    table = compute_table_cached(X, rbf_kernel(ds.noise_var), cache=args.cache)
    print(f"compute-mapa: table over {table.n} {args.scope} points cached "
          f"(kernel {table.kernel_descriptor}, fingerprint {table.fingerprint})")
    return 0


def cmd_train(args):
    args.data = _resolve_data(args)
    ds, gt = _load_data(args.data)
    config = TrainConfig(method=args.method, epochs=args.epochs,
                         batch_size=args.batch_size, lr=args.lr,
                         restarts=args.restarts, s=args.s, k_frac=args.k_frac,
                         seed=args.seed, jobs=args.jobs)
    k = mapa_k(args.s, args.k_frac) if args.method in MAPA_METHODS else 0
    target = run_dir(args.out, ds.name, args.method, args.s, k, args.seed)
    cfg = {"cmd": "train", "dataset": os.path.abspath(args.data), "method": args.method,
           "epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr,
           "restarts": args.restarts, "s": args.s, "k_frac": args.k_frac,
           "seed": args.seed}
    prov = provenance(cfg, args.seed)
    model_path = os.path.join(target, "model.json")
    if not args.force and existing_matches(model_path, prov):
        print(f"train: up to date at {target}")
        return 0
    os.makedirs(target, exist_ok=True)
    result = train(ds, config, gt_model=gt, cache=args.cache)
    save_model(model_path, result.model,
               extra={"provenance": prov, "method": args.method, "s": args.s, "k": k,
                      "best_restart": result.best_restart,
                      "val_metric": result.val_metric,
                      "gradient_estimator": "plain reparameterized pathwise"})
    if result.proposal is not None:
        save_net_bundle(os.path.join(target, "proposal.json"),
                        {"net": result.proposal.net},
                        {"kind": "gaussian_proposal", "latent_dim": config.latent_dim,
                         "provenance": prov})
    write_csv(os.path.join(target, "history.csv"), HISTORY_FIELDS, result.history, prov)
    write_json(os.path.join(target, "summary.json"), {
        "method": args.method, "dataset": ds.name, "s": args.s, "k": k,
        "best_restart": result.best_restart, "val_metric": result.val_metric,
        "restarts": result.restart_summaries,
    }, prov)
    print(f"train: {args.method} on {ds.name} -> {target} "
          f"(best restart {result.best_restart}, val {result.val_metric:.4f})")
    return 0


def cmd_recover_prior(args):
    ds, _ = _load_data(args.data)
    model, header = load_model(os.path.join(args.run, "model.json"))
    if model.encoder is None:
        raise ConfigurationError("model has no prior-amortizing encoder; "
                                 "recovery applies to empirical-prior methods")
    cfg = {"cmd": "recover-prior", "run": os.path.abspath(args.run),
           "epochs": args.epochs, "seed": args.seed,
           "source_hash": header.get("provenance", {}).get("config_hash")}
    prov = provenance(cfg, args.seed)
    target = os.path.join(args.run, "recovered.json")
    if not args.force and existing_matches(target, prov):
        print(f"recover-prior: up to date at {target}")
        return 0
    rec_cfg = RecoveryConfig(epochs=args.epochs, seed=args.seed,
                             decoder_fail_nats=args.decoder_fail_nats,
                             encoder_fail_mse=args.encoder_fail_mse)
    X_train = ds.X[ds.indices("train")]
    recovered, diag = recover_prior(model, X_train, rec_cfg)
    save_model(target, recovered,
               extra={"provenance": prov, "recovered_from": "model.json",
                      "method": header.get("method"), "s": header.get("s"),
                      "k": header.get("k"), "diagnostics": diag})
    print(f"recover-prior: {target} "
          f"(encoder mse {diag['encoder_mse']:.2e}, decoder {diag['decoder_kl_nats']:.4f} nats)")
    return 0


def _eval_model_path(run):
    rec = os.path.join(run, "recovered.json")
    return rec if os.path.exists(rec) else os.path.join(run, "model.json")


def _gt_proposal(gt, ds, args):
    """Fit (or reuse) the ground-truth side proposal; it depends only on the data."""
    from .datasets import cache_dir
    from .models import MixtureProposal, load_net_bundle
    key = f"gtprop_{ds.fingerprint()}_e{args.eval_fit_epochs}_s{args.eval_s}.json"
    path = os.path.join(cache_dir(args.cache), key)
    if os.path.exists(path):
        header, nets = load_net_bundle(path)
        return MixtureProposal(net=nets["net"], latent_dim=1,
                               n_components=int(header["n_components"]))
    prop = fit_eval_proposal(gt, ds.X[ds.indices("train")], make_rng(args.seed, "gt-fit"),
                             s=args.eval_s, epochs=args.eval_fit_epochs)
    save_net_bundle(path, {"net": prop.net},
                    {"kind": "mixture_proposal", "n_components": prop.n_components})
    return prop


def cmd_evaluate(args):
    ds, gt = _load_data(args.data)
    if gt is None:
        raise ConfigurationError("dataset has no ground-truth model")
    model_path = _eval_model_path(args.run)
    model, header = load_model(model_path)
    if model.prior != PRIOR_STANDARD_NORMAL:
        raise ConfigurationError(
            "model prior is not standard normal; run recover-prior first")
    cfg = {"cmd": "evaluate", "run": os.path.abspath(args.run),
           "model": os.path.basename(model_path), "eval_s": args.eval_s,
           "ll_s": args.ll_s, "eval_fit_epochs": args.eval_fit_epochs,
           "seed": args.seed}
    prov = provenance(cfg, args.seed)
    target = os.path.join(args.run, "eval.json")
    if not args.force and existing_matches(target, prov):
        print(f"evaluate: up to date at {target}")
        return 0

    gt_prop = _gt_proposal(gt, ds, args)
    kl, stderr, ll_gt, ll_model, meter = kl_to_ground_truth(
        gt, model, ds, make_rng(args.seed, "eval"),
        gt_proposal=gt_prop,
        fit_kwargs={"s": args.eval_s, "epochs": args.eval_fit_epochs},
        ll_kwargs={"s_total": args.ll_s})
    test_idx = ds.indices("test")
    rows = [{"index": int(i), "ll_gt": g, "ll_model": m, "diff": g - m}
            for i, g, m in zip(test_idx, ll_gt, ll_model)]
    write_csv(os.path.join(args.run, "eval_points.csv"), EVAL_POINT_FIELDS, rows, prov)
    write_json(target, {
        "dataset": ds.name, "method": header.get("method", "unknown"),
        "model_file": os.path.basename(model_path),
        "s_train": header.get("s"), "k": header.get("k"),
        "kl": kl, "kl_stderr": stderr,
        "test_ll_mean": float(ll_model.mean()), "gt_ll_mean": float(ll_gt.mean()),
        "n_test": int(test_idx.size),
        "encoder_passes": meter.encoder_passes, "decoder_passes": meter.decoder_passes,
        "s_interpretation": "training-time importance samples per point",
    }, prov)
    print(f"evaluate: KL to ground truth {kl:.4f} +/- {stderr:.4f} -> {target}")
    return 0


def cmd_count_passes(args):
    args.data = _resolve_data(args)
    ds, _ = _load_data(args.data)
    X = ds.X[ds.indices("train")]
    table = compute_table_cached(X, rbf_kernel(ds.noise_var), cache=args.cache)
    sub = ds
    if len(X) != ds.n:
        from .datasets import Dataset
        sub = Dataset(name=ds.name, X=X, z_gt=ds.z_gt[ds.indices("train")],
                      eps_gt=ds.eps_gt[ds.indices("train")], noise_var=ds.noise_var,
                      seed=ds.seed)
    s_grid = [int(s) for s in args.s_grid.split(",")]
    rows = count_passes(sub, table, s_grid, args.k_frac, args.batch_size, seed=args.seed)
    cfg = {"cmd": "count-passes", "dataset": os.path.abspath(args.data),
           "s_grid": s_grid, "k_frac": args.k_frac, "batch_size": args.batch_size,
           "seed": args.seed}
    prov = provenance(cfg, args.seed)
    os.makedirs(os.path.join(args.out, "reports"), exist_ok=True)
    target = os.path.join(args.out, "reports", f"cost_{ds.name}.csv")
    if not args.force and existing_matches(target, prov):
        print(f"count-passes: up to date at {target}")
        return 0
    write_csv(target, COST_FIELDS, rows, prov)
    print(f"count-passes: wrote {target}")
    return 0


def cmd_trends(args):
    args.data = _resolve_data(args)
    ds, gt = _load_data(args.data)
    if gt is None:
        raise ConfigurationError("dataset has no ground-truth model")
    table = compute_table_cached(ds.X, rbf_kernel(ds.noise_var), cache=args.cache)
    rng_pts = make_rng(args.seed, "trend-points")
    points = rng_pts.choice(ds.n, size=min(args.points, ds.n), replace=False)
    cfg = {"cmd": "trends", "dataset": os.path.abspath(args.data),
           "points": args.points, "seed": args.seed}
    prov = provenance(cfg, args.seed)
    os.makedirs(os.path.join(args.out, "reports"), exist_ok=True)
    target = os.path.join(args.out, "reports", f"trends_{ds.name}.csv")
    summary_path = os.path.join(args.out, "reports", f"trends_{ds.name}_summary.csv")
    if not args.force and existing_matches(target, prov):
        print(f"trends: up to date at {target}")
        return 0
    records = posterior_trends(ds, gt, table, points)
    rows = []
    for rec in records:
        for z, v in zip(rec.grid_z, rec.log_posterior_grid):
            rows.append({"point": rec.point, "series": "original", "x": z, "y": v})
        for z, v in zip(rec.z_coords, rec.log_empirical_scaled):
            rows.append({"point": rec.point, "series": "empiricalized", "x": z, "y": v})
        for z, v in zip(rec.z_coords, rec.log_mapa_scaled):
            rows.append({"point": rec.point, "series": "mapa", "x": z, "y": v})
    write_csv(target, TREND_FIELDS, rows, prov)
    write_csv(summary_path, ("point", "spearman", "grid_integral"),
              [{"point": r.point, "spearman": r.spearman, "grid_integral": r.grid_integral}
               for r in records], prov)
    med = float(np.median([r.spearman for r in records]))
    print(f"trends: median spearman {med:.3f} over {len(records)} points -> {target}")
    return 0


def cmd_non_ident(args):
    args.data = _resolve_data(args)
    ds, gt = _load_data(args.data)
    cfg = {"cmd": "non-ident", "dataset": os.path.abspath(args.data),
           "points": args.points, "epochs": args.epochs, "restarts": args.restarts,
           "seed": args.seed}
    prov = provenance(cfg, args.seed)
    os.makedirs(os.path.join(args.out, "reports"), exist_ok=True)
    target = os.path.join(args.out, "reports", f"non_ident_{ds.name}.csv")
    if not args.force and existing_matches(target, prov):
        print(f"non-ident: up to date at {target}")
        return 0
    vae_cfg = TrainConfig(method="vae", epochs=args.epochs, restarts=args.restarts,
                          seed=args.seed, jobs=args.jobs)
    result = non_identifiability_study(ds, gt, make_rng(args.seed, "non-ident"),
                                       n_points=args.points, vae_config=vae_cfg,
                                       cache=args.cache)
    write_csv(target, NON_IDENT_FIELDS,
              [{"point": r.point, "corr_variant1": r.corr_variant1,
                "corr_variant2": r.corr_variant2} for r in result.records], prov)
    write_json(os.path.join(args.out, "reports", f"non_ident_{ds.name}.json"), {
        "dataset": ds.name,
        "median_corr_variant1": result.median_corr_variant1,
        "median_corr_variant2": result.median_corr_variant2,
        "decoder_max_discrepancy": result.decoder_max_discrepancy,
        "table_fingerprint": result.table_fingerprint,
    }, prov)
    print(f"non-ident: medians v1={result.median_corr_variant1:.3f} "
          f"v2={result.median_corr_variant2:.3f} -> {target}")
    return 0


def cmd_all(args):
    datasets = [d.strip() for d in args.datasets.split(",")]
    methods = [m.strip() for m in args.methods.split(",")]
    s_grid = [int(s) for s in args.s_grid.split(",")]
    for name in datasets:
        ns = argparse.Namespace(**vars(args))
        ns.name, ns.data = name, None
        cmd_generate_data(ns)
        ns.data = data_dir(args.out, name, args.n, args.seed)
        ns.scope = "train"
        cmd_compute_mapa(ns)
        for method in methods:
            for s in s_grid:
                ms = argparse.Namespace(**vars(ns))
                ms.method, ms.s = method, s
                cmd_train(ms)
                k = mapa_k(s, args.k_frac) if method in MAPA_METHODS else 0
                ms.run = run_dir(args.out, name, method, s, k, args.seed)
                if method in ("ae", "mapa", "mapa_gt", "mapa_naive"):
                    rs = argparse.Namespace(**vars(ms))
                    rs.epochs = args.recover_epochs
                    cmd_recover_prior(rs)
                cmd_evaluate(ms)
        cmd_count_passes(ns)
        cmd_trends(ns)
        if name in ("abs_value", "circle") and args.non_ident:
            cmd_non_ident(ns)
    print("all: pipeline complete")
    return 0


# ------------------------------------------------------------------ parser

def _add_common(sp, out=True):
    sp.add_argument("--seed", type=int, default=None, help="master seed")
    sp.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    sp.add_argument("--cache", default=None,
                    help="table/surrogate cache dir (default: MAPA_LAB_CACHE or ~/.cache)")
    if out:
        sp.add_argument("--out", default=None, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mapa-lab",
        description="Empiricalized latent-variable models and index-proposal training")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("generate-data", help="draw a synthetic dataset and its ground truth")
    sp.add_argument("--name", required=True)
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--data", default=None, help="explicit target directory")
    _add_common(sp)
    sp.set_defaults(func=cmd_generate_data)

    sp = sub.add_parser("compute-mapa", help="build and cache the affinity table")
    sp.add_argument("--data", required=True)
    sp.add_argument("--scope", choices=("train", "full"), default="train")
    _add_common(sp)
    sp.set_defaults(func=cmd_compute_mapa)

    sp = sub.add_parser("train", help="train one method on a dataset")
    sp.add_argument("--data", default=None)
    sp.add_argument("--dataset", default=None, help="generator name (alternative to --data)")
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--method", required=True)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--batch-size", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--restarts", type=int, default=None)
    sp.add_argument("--s", type=int, default=None)
    sp.add_argument("--k-frac", type=float, default=None)
    sp.add_argument("--jobs", type=int, default=None)
    _add_common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("recover-prior", help="copula prior recovery for a trained run")
    sp.add_argument("--data", required=True)
    sp.add_argument("--run", required=True)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--decoder-fail-nats", type=float, default=None)
    sp.add_argument("--encoder-fail-mse", type=float, default=None)
    _add_common(sp, out=False)
    sp.set_defaults(func=cmd_recover_prior)

    sp = sub.add_parser("evaluate", help="common-protocol test LL and KL to ground truth")
    sp.add_argument("--data", required=True)
    sp.add_argument("--run", required=True)
    sp.add_argument("--eval-s", type=int, default=None)
    sp.add_argument("--ll-s", type=int, default=None)
    sp.add_argument("--eval-fit-epochs", type=int, default=None)
    _add_common(sp, out=False)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("count-passes", help="forward-pass cost table")
    sp.add_argument("--data", default=None)
    sp.add_argument("--dataset", default=None, help="generator name (alternative to --data)")
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--s-grid", default=None)
    sp.add_argument("--k-frac", type=float, default=None)
    sp.add_argument("--batch-size", type=int, default=None)
    _add_common(sp)
    sp.set_defaults(func=cmd_count_passes)

    sp = sub.add_parser("trends", help="posterior-trend records for plotting")
    sp.add_argument("--data", default=None)
    sp.add_argument("--dataset", default=None, help="generator name (alternative to --data)")
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--points", type=int, default=None)
    _add_common(sp)
    sp.set_defaults(func=cmd_trends)

    sp = sub.add_parser("non-ident", help="non-identifiability study (abs_value, circle)")
    sp.add_argument("--data", default=None)
    sp.add_argument("--dataset", default=None, help="generator name (alternative to --data)")
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--points", type=int, default=None)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--restarts", type=int, default=None)
    sp.add_argument("--jobs", type=int, default=None)
    _add_common(sp)
    sp.set_defaults(func=cmd_non_ident)

    sp = sub.add_parser("all", help="full pipeline from a config file")
    sp.add_argument("--config", default=None, help=".cfg file ([experiment] section)")
    sp.add_argument("--datasets", default=None)
    sp.add_argument("--methods", default=None)
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--s-grid", default=None)
    sp.add_argument("--k-frac", type=float, default=None)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--batch-size", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--restarts", type=int, default=None)
    sp.add_argument("--recover-epochs", type=int, default=None)
    sp.add_argument("--decoder-fail-nats", type=float, default=None)
    sp.add_argument("--encoder-fail-mse", type=float, default=None)
    sp.add_argument("--eval-s", type=int, default=None)
    sp.add_argument("--ll-s", type=int, default=None)
    sp.add_argument("--eval-fit-epochs", type=int, default=None)
    sp.add_argument("--points", type=int, default=None)
    sp.add_argument("--non-ident", action="store_true", default=None)
    sp.add_argument("--jobs", type=int, default=None)
    _add_common(sp)
    sp.set_defaults(func=cmd_all)

    return parser


DEFAULTS = {
    "seed": 0, "out": "out", "n": 2000, "epochs": 500, "batch_size": 100,
    "lr": 1e-3, "restarts": 3, "s": 10, "k_frac": 0.1, "jobs": 1,
    "s_grid": "1,10,50", "points": 50, "eval_s": EVAL_FIT_S, "ll_s": EVAL_LL_S,
    "eval_fit_epochs": EVAL_FIT_EPOCHS, "recover_epochs": 1500,
    "decoder_fail_nats": 0.05, "encoder_fail_mse": 1e-2,
    "datasets": "abs_value", "methods": "mapa", "non_ident": False,
}


def _apply_config(args):
    """Fill unset options from the config file, then package defaults."""
    file_values = {}
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise ConfigurationError(f"config file not found: {args.config}")
        cp = configparser.ConfigParser()
        cp.read(args.config)
        section = cp["experiment"] if cp.has_section("experiment") else cp["DEFAULT"]
        file_values = {k.replace("-", "_"): v for k, v in section.items()}
    for key, fallback in DEFAULTS.items():
        if getattr(args, key, None) is None:
            if key in file_values:
                raw = file_values[key]
                if isinstance(fallback, bool):
                    value = raw.strip().lower() in ("1", "true", "yes", "on")
                elif isinstance(fallback, int):
                    value = int(raw)
                elif isinstance(fallback, float):
                    value = float(raw)
                else:
                    value = raw
            else:
                value = fallback
            setattr(args, key, value)
    return args


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config(args)
        return args.func(args)
    except (ConfigurationError, DomainError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (NumericError, TrainingError, FitFailureError, RecoveryFailureError,
            DegenerateRowError) as err:
        print(f"failure: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
