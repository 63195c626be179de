"""Permutation alignment of hidden units between two models.

Two routes: weight-based (pairwise l2 distances between weight columns,
minimized) and activation-based (inner products of post-nonlinearity
activations over shared examples, maximized). Assignments are hard
permutations from a linear assignment solve; soft transport plans are out
of scope. Diagnostic grids can be dumped as JSON for plotting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import scipy.optimize

from . import zoo
from .tensorfile import NamedTensorMap


class UnsupportedLayerError(ValueError):
    """Permutation requested on a layer that is not function-preserving."""


@dataclass
class GroundMetric:
    matrix: np.ndarray  # n x n pairwise l2 distances between weight columns
    layer: str = ""
    model_a: str = ""
    model_b: str = ""


@dataclass
class ActivationSimilarity:
    matrix: np.ndarray  # Z_A^T Z_B over shared examples
    layer: str = ""


@dataclass
class Permutation:
    mapping: np.ndarray  # mapping[i] = index in model B matched to unit i of A

    def __post_init__(self):
        self.mapping = np.asarray(self.mapping, dtype=np.int64)
        n = len(self.mapping)
        if sorted(self.mapping.tolist()) != list(range(n)):
            raise ValueError("mapping is not a bijection")

    def is_identity(self) -> bool:
        return bool(np.all(self.mapping == np.arange(len(self.mapping))))

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.mapping)
        inv[self.mapping] = np.arange(len(self.mapping))
        return Permutation(inv)


def weight_ground_metric(wa, wb, layer: str = "") -> GroundMetric:
    wa = np.asarray(wa, dtype=np.float64)
    wb = np.asarray(wb, dtype=np.float64)
    if wa.shape != wb.shape or wa.ndim != 2:
        raise ValueError(f"weights must be 2-D with equal shapes, got {wa.shape} / {wb.shape}")
    diff = wa[:, :, None] - wb[:, None, :]
    m = np.sqrt(np.sum(diff * diff, axis=0))
    return GroundMetric(matrix=m, layer=layer)


def activation_similarity(trace_a: zoo.ForwardTrace, trace_b: zoo.ForwardTrace,
                          layer: str) -> ActivationSimilarity:
    try:
        za = trace_a.layer_activations[layer]
        zb = trace_b.layer_activations[layer]
    except KeyError as exc:
        raise KeyError(f"no recorded activations for layer {layer!r}") from exc
    if za.shape != zb.shape:
        raise ValueError(f"activation shapes differ: {za.shape} vs {zb.shape}")
    return ActivationSimilarity(matrix=za.T @ zb, layer=layer)


def solve_assignment(matrix, mode: str = "min_cost") -> Permutation:
    """Optimal one-to-one assignment (Hungarian-style solve, O(n^3))."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"assignment needs a square matrix, got {m.shape}")
    if mode == "max_similarity":
        m = m.max() - m
    elif mode != "min_cost":
        raise ValueError(f"unknown mode: {mode!r}")
    rows, cols = scipy.optimize.linear_sum_assignment(m)
    mapping = np.empty(m.shape[0], dtype=np.int64)
    mapping[rows] = cols
    return Permutation(mapping)


def _hidden_layers(model: zoo.ModelInstance) -> list[str]:
    if model.spec.architecture != "mlp":
        return []
    return [name for name in model.linear_layer_names if name != "head"]


def _next_layer(model: zoo.ModelInstance, layer: str) -> str:
    names = model.linear_layer_names
    return names[names.index(layer) + 1]


def apply_permutation(model: zoo.ModelInstance, layer: str,
                      perm: Permutation) -> zoo.ModelInstance:
    """Permute a hidden MLP layer's units; the network function is unchanged.

    Columns of the incoming weight (and its bias) and rows of the outgoing
    weight move together. Transformer residual-stream layers are rejected.
    """
    if layer not in _hidden_layers(model):
        raise UnsupportedLayerError(
            f"layer {layer!r} does not support function-preserving permutation")
    mapping = perm.mapping
    width = model.params[f"{layer}.weight"].shape[1]
    if len(mapping) != width:
        raise ValueError(f"permutation size {len(mapping)} != layer width {width}")
    params = model.params.copy()
    nxt = _next_layer(model, layer)
    params.entries[f"{layer}.weight"] = params[f"{layer}.weight"][:, mapping]
    params.entries[f"{layer}.bias"] = params[f"{layer}.bias"][mapping]
    params.entries[f"{nxt}.weight"] = params[f"{nxt}.weight"][mapping, :]
    return model.replaced(params)


def match_layer(model_a: zoo.ModelInstance, model_b: zoo.ModelInstance,
                layer: str, method: str, x=None) -> Permutation:
    """Permutation aligning model_b's units of one hidden layer to model_a's."""
    if method == "weight_based":
        gm = weight_ground_metric(model_a.params[f"{layer}.weight"],
                                  model_b.params[f"{layer}.weight"], layer)
        return solve_assignment(gm.matrix, "min_cost")
    if method == "activation_based":
        if x is None:
            raise ValueError("activation_based matching needs shared examples")
        ta = zoo.forward(model_a, x, record=True)
        tb = zoo.forward(model_b, x, record=True)
        sim = activation_similarity(ta, tb, layer)
        return solve_assignment(sim.matrix, "max_similarity")
    raise ValueError(f"unknown matching method: {method!r}")


def match_and_merge(model_a: zoo.ModelInstance, model_b: zoo.ModelInstance,
                    method: str, merge_cfg, x=None,
                    grams: tuple | None = None) -> tuple[NamedTensorMap, dict[str, Permutation]]:
    """Align model_b to model_a per hidden layer, then merge.

    When Gram statistics are supplied for a regmean merge, model_b's Grams
    of downstream layers are permuted consistently (P^T G P).
    """
    from .merge import MissingStatsError, merge_regmean, merge_simple

    if model_a.spec != model_b.spec:
        raise ValueError("models must share a spec")
    if model_a.spec.architecture != "mlp":
        raise UnsupportedLayerError("matching is supported for MLP models only")
    perms: dict[str, Permutation] = {}
    aligned_b = model_b
    gram_b = None if grams is None else grams[1]
    for layer in _hidden_layers(model_a):
        perm = match_layer(model_a, aligned_b, layer, method, x=x)
        perms[layer] = perm
        aligned_b = apply_permutation(aligned_b, layer, perm)
        if gram_b is not None:
            nxt = _next_layer(model_a, layer)
            if nxt in gram_b.gram_sums:
                g = gram_b.gram_sums[nxt]
                gram_b = type(gram_b)(
                    gram_sums={**gram_b.gram_sums,
                               nxt: g[np.ix_(perm.mapping, perm.mapping)]},
                    example_counts=dict(gram_b.example_counts),
                    batch_cap=gram_b.batch_cap)
    models = [model_a.params, aligned_b.params]
    if merge_cfg.algorithm == "regmean":
        if grams is None:
            raise MissingStatsError("regmean match_and_merge needs gram stats")
        merged, _ = merge_regmean(models, [grams[0], gram_b], merge_cfg)
    elif merge_cfg.algorithm == "simple":
        merged = merge_simple(models, merge_cfg)
    else:
        raise ValueError("match_and_merge supports simple or regmean merging")
    return merged, perms


def export_grids(path, grids: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Dump diagnostic matrices (ground metrics / similarities) as JSON."""
    payload = {"meta": meta or {},
               "grids": {name: np.asarray(g).tolist() for name, g in grids.items()}}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
