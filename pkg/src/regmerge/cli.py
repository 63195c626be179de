"""Command-line front end tying the library into reproducible pipelines.

Every run writes a ``run.json`` echoing the resolved configuration, seed
and tool version under ``--out``. Exit codes: 0 success, 1 runtime
failure, 2 usage/config error. Reports are JSON plus a flat CSV, with
matplotlib figures rendered alongside.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, matching, plots, stats, tensorfile, zoo
from .data import DomainShift, PartitionSpec, SyntheticTask, TaskData, dataset_from_json_dict
from .harness import BenchConfig, EvalReport, MultiDomainBench, default_merge_configs, run_noniid_experiment
from .merge import MergeConfig
from .merge import merge as merge_models
from .metrics import metric
from .stats import CollectConfig
from .zoo import ModelSpec, TrainConfig


class ConfigError(Exception):
    """Bad or missing configuration; maps to exit code 2."""


def _load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc


def _build(cls, obj: dict, what: str):
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


def _parse_task(obj: dict) -> SyntheticTask:
    obj = dict(obj)
    shift = obj.pop("domain_shift", None)
    if shift is not None:
        obj["domain_shift"] = _build(DomainShift, {
            k: tuple(v) if isinstance(v, list) else v for k, v in shift.items()
        }, "domain_shift")
    if "sizes" in obj:
        obj["sizes"] = tuple(obj["sizes"])
    return _build(SyntheticTask, obj, "task")


def _parse_merge(obj: dict) -> MergeConfig:
    obj = dict(obj)
    for key in ("exclude_patterns", "weights_override"):
        if key in obj:
            obj[key] = tuple(obj[key])
    return _build(MergeConfig, obj, "merge config")


def _parse_bench(cfg: dict, seed_override=None) -> BenchConfig:
    if "model" not in cfg:
        raise ConfigError("config is missing the 'model' section")
    model = _build(ModelSpec, cfg["model"], "model spec")
    train = _build(TrainConfig, cfg.get("train", {}), "train config")
    collect = _build(CollectConfig, cfg.get("collect", {}), "collect config")
    seed = cfg.get("seed", 0) if seed_override is None else seed_override
    return BenchConfig(model=model, train=train, collect=collect,
                       metric_kind=cfg.get("metric", "accuracy"), seed=seed)


def _load_task_data(path) -> TaskData:
    obj = _load_json(path)
    if "x" in obj:
        flat = dataset_from_json_dict(obj)
        return TaskData(flat, flat, flat)
    try:
        return TaskData(*(dataset_from_json_dict(obj[k]) for k in ("train", "val", "test")))
    except KeyError as exc:
        raise ConfigError(f"dataset file {path} needs 'x'/'y' or train/val/test splits") from exc


def _ensure_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_json(out: Path, command: str, resolved: dict, threads: int) -> None:
    payload = {"command": command, "version": __version__,
               "threads": threads, "config": resolved}
    (out / "run.json").write_text(json.dumps(payload, indent=2) + "\n",
                                  encoding="utf-8")


def _write_report(report: EvalReport, out: Path, stem: str = "report") -> None:
    (out / f"{stem}.json").write_text(report.to_json() + "\n", encoding="utf-8")
    report.write_csv(out / f"{stem}.csv")


def _resolve_threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("REGMERGE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"REGMERGE_THREADS must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


# --- subcommands -----------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_json(args.config)
    bench = _parse_bench(cfg, args.seed)
    if "task" in cfg:
        task_data = _parse_task(cfg["task"]).realize()
    elif "data" in cfg:
        task_data = _load_task_data(cfg["data"])
    else:
        raise ConfigError("train config needs a 'task' or 'data' section")
    out = _ensure_out(args.out)
    init = zoo.init_pretrained(bench.model, bench.seed)
    model = zoo.train(init, task_data.train, task_data.val, bench.train)
    model.params.metadata["dataset"] = str(cfg.get("dataset_label", ""))
    tensorfile.write_checkpoint(model.params, out / "model.ckpt")
    _write_run_json(out, "train", {**cfg, "seed": bench.seed}, _resolve_threads(args))
    return 0


def cmd_collect_stats(args) -> int:
    if not (args.gram or args.fisher):
        raise ConfigError("nothing to collect: pass --gram and/or --fisher")
    model = zoo.model_from_checkpoint(tensorfile.read_checkpoint(args.model))
    data = _load_task_data(args.data).train
    cfg = CollectConfig(batch_size=args.batch_size, max_batches=args.max_batches)
    out = _ensure_out(args.out)
    stem = Path(args.model).stem
    if args.gram:
        tensorfile.write_gram(stats.collect_gram(model, data, cfg), out / f"{stem}.gram")
    if args.fisher:
        tensorfile.write_fisher(stats.collect_fisher(model, data, cfg),
                                out / f"{stem}.fisher")
    _write_run_json(out, "collect-stats",
                    {"model": str(args.model), "data": str(args.data),
                     "gram": args.gram, "fisher": args.fisher,
                     "batch_size": args.batch_size, "max_batches": args.max_batches},
                    _resolve_threads(args))
    return 0


def cmd_merge(args) -> int:
    models = [tensorfile.read_checkpoint(p) for p in args.models]
    cfg = MergeConfig(algorithm=args.algo, alpha=args.alpha, beta=args.beta,
                      regularizer=args.regularizer,
                      normalize_gram_per_example=args.normalize_gram,
                      exclude_patterns=tuple(args.exclude))
    grams = fishers = None
    if args.algo == "regmean":
        if len(args.stats) != len(models):
            raise ConfigError("regmean needs one .gram stats file per model "
                              "(--stats, order matching --models)")
        grams = [tensorfile.read_gram(p) for p in args.stats]
    elif args.algo == "fisher":
        if len(args.stats) != len(models):
            raise ConfigError("fisher needs one .fisher stats file per model "
                              "(--stats, order matching --models)")
        fishers = [tensorfile.read_fisher(p) for p in args.stats]
    merged, report = merge_models(models, cfg, grams=grams, fishers=fishers)
    report.model_ids = [str(p) for p in args.models]
    out_path = Path(args.out)
    out_dir = _ensure_out(out_path.parent)
    tensorfile.write_checkpoint(merged, out_path)
    (out_path.with_suffix(out_path.suffix + ".report.json")).write_text(
        json.dumps(report.to_json_dict(), indent=2) + "\n", encoding="utf-8")
    _write_run_json(out_dir, "merge",
                    {"algo": args.algo, "alpha": args.alpha, "beta": args.beta,
                     "regularizer": args.regularizer,
                     "normalize_gram_per_example": args.normalize_gram,
                     "exclude": list(args.exclude),
                     "models": [str(p) for p in args.models],
                     "stats": [str(p) for p in args.stats]},
                    _resolve_threads(args))
    return 0


def _bench_from_config(cfg: dict, seed_override=None) -> MultiDomainBench:
    if "domains" not in cfg:
        raise ConfigError("config needs a 'domains' list")
    domains = [_parse_task(t) for t in cfg["domains"]]
    ood = [_parse_task(t) for t in cfg.get("ood", [])]
    bench_cfg = _parse_bench(cfg, seed_override)
    return MultiDomainBench(domains, ood, bench_cfg,
                            label_flip=cfg.get("label_flip"))


def _merge_cfgs_from_config(cfg: dict, alpha_override=None) -> dict:
    if "merge_configs" in cfg:
        out = {name: _parse_merge(m) for name, m in cfg["merge_configs"].items()}
    else:
        out = default_merge_configs(alpha=cfg.get("alpha", 0.9),
                                    exclude=tuple(cfg.get("exclude", [])))
    if alpha_override is not None:
        out = {name: replace(m, alpha=alpha_override) for name, m in out.items()}
    return out


def cmd_eval(args) -> int:
    cfg = _load_json(args.config)
    out = _ensure_out(args.out)
    experiment = cfg.get("experiment", "multidomain")
    if experiment == "checkpoint":
        model = zoo.model_from_checkpoint(tensorfile.read_checkpoint(cfg["model"]))
        data = _load_task_data(cfg["data"]).test
        score = metric(zoo.predict(model, data.x), data.y, cfg.get("metric", "accuracy"))
        report = EvalReport(experiment="checkpoint",
                            per_dataset={"checkpoint": {"test": score}},
                            macro_average={"checkpoint": score},
                            config={"model": str(cfg["model"]), "data": str(cfg["data"]),
                                    "metric": cfg.get("metric", "accuracy")})
    elif experiment == "noniid":
        task = _parse_task(cfg["task"])
        part = _build(PartitionSpec, cfg.get("partition", {}), "partition spec")
        report = run_noniid_experiment(task, part, _merge_cfgs_from_config(cfg),
                                       _parse_bench(cfg, args.seed))
    elif experiment == "multidomain":
        bench = _bench_from_config(cfg, args.seed)
        report = bench.run(_merge_cfgs_from_config(cfg))
    else:
        raise ConfigError(f"unknown experiment kind: {experiment!r}")
    report.config.setdefault("resolved", cfg)
    _write_report(report, out)
    plots.save_method_bars(report, out / "report.png")
    _write_run_json(out, "eval", cfg, _resolve_threads(args))
    return 0


def cmd_sweep_alpha(args) -> int:
    cfg = _load_json(args.config)
    out = _ensure_out(args.out)
    bench = _bench_from_config(cfg, args.seed)
    alphas = cfg.get("alphas", [round(0.1 * k, 1) for k in range(11)])
    report = bench.sweep_alpha(alphas)
    report.config["resolved"] = cfg
    _write_report(report, out)
    plots.save_sweep_curve(report, out / "report.png", "alpha")
    _write_run_json(out, "sweep-alpha", cfg, _resolve_threads(args))
    return 0


def cmd_sweep_batches(args) -> int:
    cfg = _load_json(args.config)
    out = _ensure_out(args.out)
    bench = _bench_from_config(cfg, args.seed)
    counts = cfg.get("counts", [1, 10, 100, 1000])
    report = bench.sweep_batches(counts)
    report.config["resolved"] = cfg
    _write_report(report, out)
    plots.save_sweep_curve(report, out / "report.png", "max_batches")
    _write_run_json(out, "sweep-batches", cfg, _resolve_threads(args))
    return 0


def cmd_greedy_merge(args) -> int:
    cfg = _load_json(args.config)
    out = _ensure_out(args.out)
    bench = _bench_from_config(cfg, args.seed)
    merge_cfg = _parse_merge(cfg.get("merge", {"algorithm": "simple"}))
    report = bench.greedy(merge_cfg, use_ood_val=cfg.get("use_ood_val", False))
    report.config["resolved"] = cfg
    _write_report(report, out)
    plots.save_greedy_curve(report, out / "report.png")
    _write_run_json(out, "greedy-merge", cfg, _resolve_threads(args))
    return 0


def cmd_pairwise(args) -> int:
    cfg = _load_json(args.config)
    out = _ensure_out(args.out)
    bench = _bench_from_config(cfg, args.seed)
    report = bench.pairwise_drop(_merge_cfgs_from_config(cfg))
    report.config["resolved"] = cfg
    _write_report(report, out)
    plots.save_pairwise_heatmaps(report, out / "report.png")
    _write_run_json(out, "pairwise", cfg, _resolve_threads(args))
    return 0


def cmd_match(args) -> int:
    model_a = zoo.model_from_checkpoint(tensorfile.read_checkpoint(args.model_a))
    model_b = zoo.model_from_checkpoint(tensorfile.read_checkpoint(args.model_b))
    x = None
    if args.data:
        x = _load_task_data(args.data).train.x
    elif args.method == "activation_based":
        raise ConfigError("activation_based matching requires --data")
    merge_cfg = MergeConfig(algorithm=args.algo, alpha=args.alpha)
    grams = None
    if args.algo == "regmean":
        if len(args.stats) != 2:
            raise ConfigError("regmean match needs two .gram files via --stats")
        grams = tuple(tensorfile.read_gram(p) for p in args.stats)
    merged, perms = matching.match_and_merge(model_a, model_b, args.method,
                                             merge_cfg, x=x, grams=grams)
    out = _ensure_out(args.out)
    tensorfile.write_checkpoint(merged, out / "merged.ckpt")
    grids = {}
    for layer in perms:
        gm = matching.weight_ground_metric(model_a.params[f"{layer}.weight"],
                                           model_b.params[f"{layer}.weight"], layer)
        grids[f"ground_metric/{layer}"] = gm.matrix
        if x is not None:
            ta = zoo.forward(model_a, x, record=True)
            tb = zoo.forward(model_b, x, record=True)
            grids[f"activation_similarity/{layer}"] = \
                matching.activation_similarity(ta, tb, layer).matrix
    matching.export_grids(out / "grids.json", grids,
                          meta={"method": args.method,
                                "permutations": {k: v.mapping.tolist()
                                                 for k, v in perms.items()}})
    plots.save_matching_heatmaps(grids, out / "grids.png")
    _write_run_json(out, "match",
                    {"model_a": str(args.model_a), "model_b": str(args.model_b),
                     "method": args.method, "algo": args.algo},
                    _resolve_threads(args))
    return 0


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regmerge",
        description="Dataless model merging toolkit: train a desk-scale zoo, "
                    "collect releasable statistics, merge checkpoints and "
                    "reproduce the evaluation protocols.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--threads", type=int, default=0,
                       help="worker cap (or env REGMERGE_THREADS); informational")

    p = sub.add_parser("train", help="train a model per a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("collect-stats", help="compute gram/fisher statistics")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--gram", action="store_true")
    p.add_argument("--fisher", action="store_true")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--max-batches", type=int, default=1000)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_collect_stats)

    p = sub.add_parser("merge", help="merge checkpoints")
    p.add_argument("--algo", choices=("simple", "fisher", "regmean"), required=True)
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--regularizer", choices=("offdiag_scale", "additive"),
                   default="offdiag_scale")
    p.add_argument("--normalize-gram", action="store_true")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--stats", nargs="*", default=[])
    p.add_argument("--exclude", action="append", default=[],
                   help="glob of parameter names to exclude (repeatable)")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_merge)

    for name, func, help_text in (
            ("eval", cmd_eval, "run a noniid/multidomain/checkpoint evaluation"),
            ("sweep-alpha", cmd_sweep_alpha, "regmean score vs alpha"),
            ("sweep-batches", cmd_sweep_batches, "regmean score vs gram batch cap"),
            ("greedy-merge", cmd_greedy_merge, "greedy incremental subset merging"),
            ("pairwise", cmd_pairwise, "pairwise relative-drop matrices")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=None)
        common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("match", help="permutation-match two models and merge")
    p.add_argument("--model-a", required=True)
    p.add_argument("--model-b", required=True)
    p.add_argument("--method", choices=("weight_based", "activation_based"),
                   default="weight_based")
    p.add_argument("--algo", choices=("simple", "regmean"), default="simple")
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--data", default=None)
    p.add_argument("--stats", nargs="*", default=[])
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_match)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except tensorfile.TensorFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
