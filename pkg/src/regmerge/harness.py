"""Experiment harness: non-iid merging, multi-domain merging with in-domain
and OOD reporting, pairwise relative drop, alpha / batch-count sweeps and
greedy subset merging, plus the checked-in seeded benchmarks.

Every experiment is a pure function of (config, seed): two runs produce
identical EvalReports, which is what the golden expectations file relies on.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import stats, zoo
from .data import Dataset, PartitionSpec, SyntheticTask, concat, make_noniid_partitions
from .merge import MergeConfig, ensemble_predict, greedy_merge
from .merge import merge as merge_models
from .metrics import metric
from .stats import CollectConfig
from .zoo import ModelSpec, TrainConfig


@dataclass(frozen=True)
class BenchConfig:
    model: ModelSpec
    train: TrainConfig = TrainConfig()
    collect: CollectConfig = CollectConfig()
    metric_kind: str = "accuracy"
    seed: int = 0


def default_merge_configs(alpha: float = 0.9, exclude: tuple = ()) -> dict[str, MergeConfig]:
    return {
        "simple": MergeConfig(algorithm="simple", exclude_patterns=exclude),
        "fisher": MergeConfig(algorithm="fisher", exclude_patterns=exclude),
        "regmean": MergeConfig(algorithm="regmean", alpha=alpha, exclude_patterns=exclude),
    }


@dataclass
class EvalReport:
    experiment: str
    per_dataset: dict = field(default_factory=dict)   # method -> dataset -> value
    macro_average: dict = field(default_factory=dict)  # method -> float (in-domain)
    ood_macro_average: dict = field(default_factory=dict)
    pairwise_drop: dict = field(default_factory=dict)
    greedy: list = field(default_factory=list)
    tables: list = field(default_factory=list)         # sweep rows
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and math.isnan(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, list):
                return [clean(x) for x in v]
            return v
        return clean({
            "experiment": self.experiment,
            "per_dataset": self.per_dataset,
            "macro_average": self.macro_average,
            "ood_macro_average": self.ood_macro_average,
            "pairwise_drop": self.pairwise_drop,
            "greedy": self.greedy,
            "tables": self.tables,
            "config": self.config,
            "seeds": self.seeds,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        obj = json.loads(text)
        return EvalReport(**obj)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["experiment", "method", "dataset", "metric", "value"])
            for method, row in self.per_dataset.items():
                for dataset, value in row.items():
                    writer.writerow([self.experiment, method, dataset, "score", value])
            for method, value in self.macro_average.items():
                writer.writerow([self.experiment, method, "macro_average", "score", value])
            for method, value in self.ood_macro_average.items():
                writer.writerow([self.experiment, method, "ood_macro_average", "score", value])


def _train_seeded(init: zoo.ModelInstance, train_set: Dataset, val_set: Dataset,
                  cfg: BenchConfig, offset: int) -> zoo.ModelInstance:
    return zoo.train(init, train_set, val_set,
                     replace(cfg.train, seed=cfg.train.seed + offset))


def _score(model: zoo.ModelInstance, ds: Dataset, kind: str) -> float:
    return metric(zoo.predict(model, ds.x), ds.y, kind)


class MultiDomainBench:
    """Trains one model per domain from a shared init and caches the
    statistics, so merges, sweeps and pairwise drops reuse the same models."""

    def __init__(self, domains: list[SyntheticTask], ood: list[SyntheticTask],
                 cfg: BenchConfig, domain_names: list[str] | None = None,
                 label_flip: list[int] | None = None):
        self.cfg = cfg
        self.domain_tasks = domains
        self.domain_names = domain_names or [f"domain_{i}" for i in range(len(domains))]
        self.ood_names = [f"ood_{i}" for i in range(len(ood))]
        self.domains = [t.realize() for t in domains]
        if label_flip:
            for i in label_flip:
                d = self.domains[i]
                n_cls = cfg.model.num_classes
                for split in (d.train, d.val):
                    split.y = (split.y + 1) % n_cls
        self.ood = [t.realize() for t in ood]
        self.init = zoo.init_pretrained(cfg.model, cfg.seed)
        self.models = [
            _train_seeded(self.init, d.train, d.val, cfg, i + 1)
            for i, d in enumerate(self.domains)
        ]
        self.grams = [stats.collect_gram(m, d.train, cfg.collect)
                      for m, d in zip(self.models, self.domains)]
        self.fishers = [stats.collect_fisher(m, d.train, cfg.collect)
                        for m, d in zip(self.models, self.domains)]
        self._mtl = None

    # -- scoring helpers ---------------------------------------------------

    def instance(self, params) -> zoo.ModelInstance:
        return self.init.replaced(params)

    def score_row(self, model: zoo.ModelInstance) -> dict[str, float]:
        row = {name: _score(model, d.test, self.cfg.metric_kind)
               for name, d in zip(self.domain_names, self.domains)}
        row.update({name: _score(model, d.test, self.cfg.metric_kind)
                    for name, d in zip(self.ood_names, self.ood)})
        return row

    def _macro(self, row: dict[str, float]) -> tuple[float, float]:
        in_vals = [row[n] for n in self.domain_names]
        ood_vals = [row[n] for n in self.ood_names]
        in_avg = float(np.mean(in_vals))
        ood_avg = float(np.mean(ood_vals)) if ood_vals else float("nan")
        return in_avg, ood_avg

    def merged_model(self, cfg: MergeConfig, subset=None,
                     grams=None) -> zoo.ModelInstance:
        idx = list(range(len(self.models))) if subset is None else list(subset)
        params = [self.models[i].params for i in idx]
        gram_list = [(grams or self.grams)[i] for i in idx]
        fisher_list = [self.fishers[i] for i in idx]
        merged, _ = merge_models(params, cfg, grams=gram_list, fishers=fisher_list)
        return self.instance(merged)

    def mtl_model(self) -> zoo.ModelInstance:
        if self._mtl is None:
            train_all = concat([d.train for d in self.domains])
            val_all = concat([d.val for d in self.domains])
            self._mtl = _train_seeded(self.init, train_all, val_all, self.cfg, 0)
        return self._mtl

    # -- experiments -------------------------------------------------------

    def run(self, merge_cfgs: dict[str, MergeConfig],
            include_mtl: bool = True) -> EvalReport:
        report = EvalReport(experiment="multidomain",
                            config={"merge": {k: vars(c) | {"exclude_patterns": list(c.exclude_patterns),
                                                            "weights_override": list(c.weights_override)}
                                              for k, c in merge_cfgs.items()}},
                            seeds={"bench": self.cfg.seed, "train": self.cfg.train.seed})
        rows: dict[str, dict[str, float]] = {}

        indiv_rows = [self.score_row(m) for m in self.models]
        rows["avg_individual"] = {
            name: float(np.mean([r[name] for r in indiv_rows]))
            for name in self.domain_names + self.ood_names}
        val_scores = [
            float(np.mean([_score(m, d.val, self.cfg.metric_kind) for d in self.domains]))
            for m in self.models]
        best_idx = int(np.argmax(val_scores))
        rows["best_individual"] = indiv_rows[best_idx]
        rows["domain_specific"] = {
            name: indiv_rows[i][name] for i, name in enumerate(self.domain_names)}

        if not self.cfg.model.multilabel:
            ens = {}
            for name, d in zip(self.domain_names, self.domains):
                ens[name] = metric(ensemble_predict(self.models, d.test.x),
                                   d.test.y, self.cfg.metric_kind)
            for name, d in zip(self.ood_names, self.ood):
                ens[name] = metric(ensemble_predict(self.models, d.test.x),
                                   d.test.y, self.cfg.metric_kind)
            rows["ensemble"] = ens

        for name, cfg in merge_cfgs.items():
            rows[name] = self.score_row(self.merged_model(cfg))

        if include_mtl:
            rows["mtl"] = self.score_row(self.mtl_model())

        report.per_dataset = rows
        for method, row in rows.items():
            if method == "domain_specific":
                report.macro_average[method] = float(
                    np.mean([row[n] for n in self.domain_names]))
                continue
            in_avg, ood_avg = self._macro(row)
            report.macro_average[method] = in_avg
            if self.ood_names:
                report.ood_macro_average[method] = ood_avg
        return report

    def pairwise_drop(self, merge_cfgs: dict[str, MergeConfig]) -> EvalReport:
        """Relative score change of each pairwise merge on the first model's
        own test set; the summary statistic is the off-diagonal mean."""
        n = len(self.models)
        solo = [_score(m, d.test, self.cfg.metric_kind)
                for m, d in zip(self.models, self.domains)]
        result = {"methods": {}, "mean_offdiag": {}, "zero_denominator_cells": {}}
        for name, cfg in merge_cfgs.items():
            mat = [[0.0] * n for _ in range(n)]
            flagged = []
            vals = []
            for i in range(n):
                for j in range(n):
                    if i == j:
                        continue  # diagonal is zero by definition
                    merged = self.merged_model(cfg, subset=[i, j])
                    score = _score(merged, self.domains[i].test, self.cfg.metric_kind)
                    if solo[i] == 0.0:
                        flagged.append([i, j])
                        mat[i][j] = float("nan")
                    else:
                        mat[i][j] = (score - solo[i]) / solo[i]
                        vals.append(mat[i][j])
            result["methods"][name] = mat
            result["mean_offdiag"][name] = float(np.mean(vals)) if vals else float("nan")
            result["zero_denominator_cells"][name] = flagged
        report = EvalReport(experiment="pairwise_drop",
                            seeds={"bench": self.cfg.seed})
        report.pairwise_drop = result
        return report

    def sweep_alpha(self, alphas: list[float],
                    base: MergeConfig | None = None) -> EvalReport:
        base = base or MergeConfig(algorithm="regmean")
        rows = []
        for alpha in sorted(alphas):
            cfg = replace(base, alpha=alpha)
            row = self.score_row(self.merged_model(cfg))
            in_avg, ood_avg = self._macro(row)
            rows.append({"alpha": alpha, "in_domain": in_avg, "ood": ood_avg})
        report = EvalReport(experiment="sweep_alpha", seeds={"bench": self.cfg.seed})
        report.tables = rows
        return report

    def sweep_batches(self, counts: list[int],
                      base: MergeConfig | None = None) -> EvalReport:
        base = base or MergeConfig(algorithm="regmean")
        rows = []
        for n in counts:
            collect = replace(self.cfg.collect, max_batches=max(1, n))
            grams = [stats.collect_gram(m, d.train, collect)
                     for m, d in zip(self.models, self.domains)]
            row = self.score_row(self.merged_model(base, grams=grams))
            in_avg, ood_avg = self._macro(row)
            rows.append({"max_batches": n, "in_domain": in_avg, "ood": ood_avg})
        report = EvalReport(experiment="sweep_batches", seeds={"bench": self.cfg.seed})
        report.tables = rows
        return report

    def greedy(self, cfg: MergeConfig, use_ood_val: bool = False) -> EvalReport:
        """Greedy incremental merging, validated on the domains' (or OOD
        tasks') validation sets."""
        val_sets = [t.val for t in (self.ood if use_ood_val and self.ood else self.domains)]

        def merge_fn(ids):
            return self.merged_model(cfg, subset=[int(i) for i in ids]).params

        def eval_fn(params):
            model = self.instance(params)
            return float(np.mean([_score(model, v, self.cfg.metric_kind)
                                  for v in val_sets]))

        traj = greedy_merge([str(i) for i in range(len(self.models))],
                            merge_fn, eval_fn)
        report = EvalReport(experiment="greedy_merge", seeds={"bench": self.cfg.seed})
        report.greedy = [
            {"candidate": s.candidate, "subset": s.subset,
             "metric": s.metric, "accepted": s.accepted}
            for s in traj.steps]
        report.config["final_subset"] = traj.final_subset
        report.config["final_metric"] = traj.final_metric
        return report


def run_noniid_experiment(task: SyntheticTask, part_spec: PartitionSpec,
                          merge_cfgs: dict[str, MergeConfig],
                          cfg: BenchConfig) -> EvalReport:
    """Train one model per non-iid partition, merge each way and evaluate on
    the joint test set."""
    task_data = task.realize()
    part1, part2 = make_noniid_partitions(task_data.train, part_spec)
    init = zoo.init_pretrained(cfg.model, cfg.seed)
    models = [_train_seeded(init, p, task_data.val, cfg, i + 1)
              for i, p in enumerate((part1, part2))]
    grams = [stats.collect_gram(m, p, cfg.collect)
             for m, p in zip(models, (part1, part2))]
    fishers = [stats.collect_fisher(m, p, cfg.collect)
               for m, p in zip(models, (part1, part2))]

    report = EvalReport(experiment="noniid",
                        seeds={"bench": cfg.seed, "partition": part_spec.seed})
    rows: dict[str, dict[str, float]] = {}
    solo = [_score(m, task_data.test, cfg.metric_kind) for m in models]
    rows["individual_0"] = {"joint": solo[0]}
    rows["individual_1"] = {"joint": solo[1]}
    rows["avg_individual"] = {"joint": float(np.mean(solo))}
    for name, mcfg in merge_cfgs.items():
        merged, _ = merge_models([m.params for m in models], mcfg,
                                    grams=grams, fishers=fishers)
        rows[name] = {"joint": _score(init.replaced(merged), task_data.test,
                                      cfg.metric_kind)}
    report.per_dataset = rows
    report.macro_average = {name: float(np.mean(list(r.values())))
                            for name, r in rows.items()}
    return report


def run_multidomain_experiment(domains: list[SyntheticTask], ood: list[SyntheticTask],
                               merge_cfgs: dict[str, MergeConfig],
                               cfg: BenchConfig) -> EvalReport:
    return MultiDomainBench(domains, ood, cfg).run(merge_cfgs)
