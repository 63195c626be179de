"""Merging algorithms: simple averaging, Fisher-weighted averaging,
regression-mean (closed-form per-linear-layer least squares), ensembling
and greedy incremental subset merging.

All arithmetic runs in float64 regardless of checkpoint storage dtype.
Layers are processed in sorted name order, so results are deterministic
even if callers parallelize per-layer solves.
"""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .tensorfile import FisherStats, GramStats, NamedTensorMap

FISHER_DENOM_EPS = 1e-12


class KeyMismatchError(ValueError):
    """Checkpoints disagree on key sets or shapes after exclusions."""


class MissingStatsError(ValueError):
    """A required Gram/Fisher statistic is absent."""


@dataclass(frozen=True)
class MergeConfig:
    algorithm: str = "regmean"            # simple | fisher | regmean
    alpha: float = 0.9                    # off-diagonal multiplier
    regularizer: str = "offdiag_scale"    # offdiag_scale | additive
    beta: float = 0.0                     # additive regularizer strength
    normalize_gram_per_example: bool = False
    exclude_patterns: tuple = ()
    weights_override: tuple = ()          # per-model scalars, simple only

    def __post_init__(self):
        if self.algorithm not in ("simple", "fisher", "regmean"):
            raise ValueError(f"unknown algorithm: {self.algorithm!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if self.regularizer not in ("offdiag_scale", "additive"):
            raise ValueError(f"unknown regularizer: {self.regularizer!r}")
        if self.beta < 0.0:
            raise ValueError("beta must be >= 0")


@dataclass
class MergeReport:
    algorithm: str
    model_ids: list[str] = field(default_factory=list)
    method_per_key: dict[str, str] = field(default_factory=dict)
    excluded_keys: list[str] = field(default_factory=list)
    solve_reports: dict[str, linalg.SpdSolveReport] = field(default_factory=dict)
    fallback_keys: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "model_ids": self.model_ids,
            "method_per_key": self.method_per_key,
            "excluded_keys": self.excluded_keys,
            "fallback_keys": self.fallback_keys,
            "solve_reports": {
                layer: {"jitter_applied": r.jitter_applied,
                        "condition_estimate": r.condition_estimate,
                        "method": r.method}
                for layer, r in self.solve_reports.items()
            },
        }


def _excluded(name: str, cfg: MergeConfig) -> bool:
    return any(fnmatch.fnmatchcase(name, pat) for pat in cfg.exclude_patterns)


def _aligned_keys(models: list[NamedTensorMap], cfg: MergeConfig) -> tuple[list[str], list[str]]:
    """Shared key order (from the first model) and the excluded keys.

    Key sets must match across models after exclusions; mismatches raise
    rather than being silently dropped.
    """
    if not models:
        raise ValueError("need at least one model")
    kept = [k for k in models[0].keys() if not _excluded(k, cfg)]
    excluded = [k for k in models[0].keys() if _excluded(k, cfg)]
    expect = set(kept)
    for i, m in enumerate(models[1:], start=1):
        have = {k for k in m.keys() if not _excluded(k, cfg)}
        if have != expect:
            diff = sorted(expect.symmetric_difference(have))
            raise KeyMismatchError(f"model {i} key set differs on {diff}")
        for k in kept:
            if m[k].shape != models[0][k].shape:
                raise KeyMismatchError(
                    f"{k}: shape {m[k].shape} != {models[0][k].shape}")
    return kept, excluded


def _merged_map(entries: dict[str, np.ndarray], models: list[NamedTensorMap]) -> NamedTensorMap:
    meta = {k: v for k, v in models[0].metadata.items()}
    meta["merged_from"] = str(len(models))
    return NamedTensorMap(entries=entries, metadata=meta)


def merge_simple(models: list[NamedTensorMap], cfg: MergeConfig = MergeConfig(algorithm="simple")) -> NamedTensorMap:
    """Element-wise (optionally weighted) arithmetic mean of the weights."""
    kept, _ = _aligned_keys(models, cfg)
    if cfg.weights_override:
        if len(cfg.weights_override) != len(models):
            raise ValueError("weights_override length must match model count")
        w = np.asarray(cfg.weights_override, dtype=np.float64)
        if w.min() < 0 or w.sum() <= 0:
            raise ValueError("weights_override must be nonnegative with positive sum")
        w = w / w.sum()
    else:
        w = np.full(len(models), 1.0 / len(models))
    entries = {}
    for key in kept:
        acc = np.zeros(models[0][key].shape, dtype=np.float64)
        for wi, m in zip(w, models):
            acc += wi * np.asarray(m[key], dtype=np.float64)
        entries[key] = acc
    return _merged_map(entries, models)


def merge_fisher(models: list[NamedTensorMap], fishers: list[FisherStats],
                 cfg: MergeConfig = MergeConfig(algorithm="fisher")) -> tuple[NamedTensorMap, MergeReport]:
    """Fisher-weighted average; keys without Fisher in every model fall back
    to the simple mean (recorded in the report)."""
    if len(fishers) != len(models):
        raise ValueError("need one FisherStats per model")
    kept, excluded = _aligned_keys(models, cfg)
    report = MergeReport(algorithm="fisher", excluded_keys=excluded)
    entries = {}
    for key in kept:
        have_all = all(key in f.fishers for f in fishers)
        if not have_all:
            acc = np.zeros(models[0][key].shape, dtype=np.float64)
            for m in models:
                acc += np.asarray(m[key], dtype=np.float64)
            entries[key] = acc / len(models)
            report.method_per_key[key] = "simple"
            report.fallback_keys.append(key)
            continue
        num = np.zeros(models[0][key].shape, dtype=np.float64)
        den = np.zeros_like(num)
        for m, f in zip(models, fishers):
            fi = np.asarray(f.fishers[key], dtype=np.float64)
            if fi.shape != num.shape:
                raise KeyMismatchError(f"{key}: Fisher shape {fi.shape} != {num.shape}")
            if fi.size and fi.min() < 0:
                raise ValueError(f"{key}: negative Fisher entry")
            num += fi * np.asarray(m[key], dtype=np.float64)
            den += fi
        entries[key] = num / (den + FISHER_DENOM_EPS)
        report.method_per_key[key] = "fisher"
    return _merged_map(entries, models), report


def regularize_gram(g: np.ndarray, cfg: MergeConfig) -> np.ndarray:
    if cfg.regularizer == "offdiag_scale":
        return linalg.scale_offdiagonal(g, cfg.alpha)
    return g + cfg.beta * np.eye(g.shape[0])


def _gram_for(grams: GramStats, layer: str, cfg: MergeConfig) -> np.ndarray:
    g = np.asarray(grams.gram_sums[layer], dtype=np.float64)
    if cfg.normalize_gram_per_example:
        g = g / grams.example_counts[layer]
    return g


def merge_regmean(models: list[NamedTensorMap], grams: list[GramStats],
                  cfg: MergeConfig = MergeConfig()) -> tuple[NamedTensorMap, MergeReport]:
    """Per-linear-layer closed-form merge; everything else is simple-averaged.

    For each layer j present in the Gram statistics the merged weight is
    (sum_i reg(G_i))^-1 sum_i reg(G_i) W_i, where reg() shrinks off-diagonal
    entries by alpha or adds beta * I.
    """
    if len(grams) != len(models):
        raise ValueError("need one GramStats per model")
    kept, excluded = _aligned_keys(models, cfg)
    report = MergeReport(algorithm="regmean", excluded_keys=excluded)
    layer_set = set(grams[0].gram_sums)
    for i, g in enumerate(grams[1:], start=1):
        if set(g.gram_sums) != layer_set:
            raise MissingStatsError(f"gram stats {i} cover different layers")

    entries: dict[str, np.ndarray] = {}
    for key in kept:
        layer = key.removesuffix(".weight") if key.endswith(".weight") else None
        if layer is not None and layer in layer_set:
            w0 = models[0][key]
            if w0.ndim != 2:
                raise MissingStatsError(f"{key}: gram stats given for non-2D weight")
            if grams[0].gram_sums[layer].shape[0] != w0.shape[0]:
                raise MissingStatsError(
                    f"{key}: gram dim {grams[0].gram_sums[layer].shape[0]} != "
                    f"weight input dim {w0.shape[0]}")
            gsum = np.zeros((w0.shape[0], w0.shape[0]))
            gwsum = np.zeros(w0.shape, dtype=np.float64)
            for m, gs in zip(models, grams):
                gt = regularize_gram(_gram_for(gs, layer, cfg), cfg)
                gsum += gt
                gwsum += gt @ np.asarray(m[key], dtype=np.float64)
            merged, solve_report = linalg.spd_solve(gsum, gwsum)
            entries[key] = merged
            report.method_per_key[key] = "regmean"
            report.solve_reports[layer] = solve_report
        else:
            acc = np.zeros(models[0][key].shape, dtype=np.float64)
            for m in models:
                acc += np.asarray(m[key], dtype=np.float64)
            entries[key] = acc / len(models)
            report.method_per_key[key] = "simple"
    return _merged_map(entries, models), report


def merge(models: list[NamedTensorMap], cfg: MergeConfig,
          grams: list[GramStats] | None = None,
          fishers: list[FisherStats] | None = None) -> tuple[NamedTensorMap, MergeReport]:
    """Dispatch on cfg.algorithm; simple gets a trivial report."""
    if cfg.algorithm == "simple":
        merged = merge_simple(models, cfg)
        _, excluded = _aligned_keys(models, cfg)
        report = MergeReport(algorithm="simple", excluded_keys=excluded,
                             method_per_key={k: "simple" for k in merged.keys()})
        return merged, report
    if cfg.algorithm == "fisher":
        if fishers is None:
            raise MissingStatsError("fisher merging requires FisherStats for every model")
        return merge_fisher(models, fishers, cfg)
    if grams is None:
        raise MissingStatsError("regmean merging requires GramStats for every model")
    return merge_regmean(models, grams, cfg)


def eval_merge_objective(w, models: list[NamedTensorMap], grams: list[GramStats],
                         layer: str) -> float:
    """Sum_i tr((W - W_i)^T G_i (W - W_i)) over the raw Gram sums.

    Zero iff W reproduces each model's outputs on its own Gram support.
    """
    w = linalg.as_matrix(w, "w")
    total = 0.0
    key = f"{layer}.weight"
    for m, gs in zip(models, grams):
        if layer not in gs.gram_sums:
            raise MissingStatsError(f"no gram matrix for layer {layer!r}")
        g = np.asarray(gs.gram_sums[layer], dtype=np.float64)
        wi = np.asarray(m[key], dtype=np.float64)
        if w.shape != wi.shape or g.shape[0] != w.shape[0]:
            raise linalg.ShapeError("objective: inconsistent dims")
        d = w - wi
        total += float(np.trace(d.T @ g @ d))
    return total


def ensemble_predict(models: list, x) -> np.ndarray:
    """Argmax over the mean of logits; ties break toward the lowest class."""
    from . import zoo

    if not models:
        raise ValueError("need at least one model")
    logit_sum = None
    for m in models:
        logits = zoo.forward(m, x).logits
        if logit_sum is None:
            logit_sum = logits.copy()
        elif logits.shape != logit_sum.shape:
            raise ValueError("ensemble members disagree on output shape")
        else:
            logit_sum += logits
    return (logit_sum / len(models)).argmax(axis=1)


@dataclass
class GreedyStep:
    candidate: str
    subset: list[str]
    metric: float
    accepted: bool


@dataclass
class GreedyTrajectory:
    steps: list[GreedyStep]
    final_subset: list[str]
    final_metric: float
    final_model: NamedTensorMap


def greedy_merge(candidates: list[str], merge_fn, eval_fn) -> GreedyTrajectory:
    """Greedy incremental subset merging.

    candidates: model ids. merge_fn(ids) -> NamedTensorMap for any nonempty
    subset; eval_fn(NamedTensorMap) -> validation metric. Candidates are
    visited by descending solo metric; one is kept iff the merged validation
    metric does not decrease (ties keep the candidate).
    """
    if not candidates:
        raise ValueError("need at least one candidate")
    solo = {}
    for cid in candidates:
        solo[cid] = eval_fn(merge_fn([cid]))
    order = sorted(candidates, key=lambda c: (-solo[c], candidates.index(c)))

    subset = [order[0]]
    current = merge_fn(subset)
    best = eval_fn(current)
    steps = [GreedyStep(order[0], list(subset), best, True)]
    for cid in order[1:]:
        trial_subset = subset + [cid]
        trial = merge_fn(trial_subset)
        metric = eval_fn(trial)
        accepted = metric >= best
        steps.append(GreedyStep(cid, list(trial_subset), metric, accepted))
        if accepted:
            subset = trial_subset
            current = trial
            best = metric
    return GreedyTrajectory(steps=steps, final_subset=subset,
                            final_metric=best, final_model=current)
