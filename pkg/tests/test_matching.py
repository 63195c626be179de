import itertools
import json

import numpy as np
import pytest

from regmerge import matching
from regmerge.matching import (Permutation, UnsupportedLayerError,
                               activation_similarity, apply_permutation,
                               match_and_merge, match_layer, solve_assignment,
                               weight_ground_metric)
from regmerge.merge import MergeConfig
from regmerge.stats import CollectConfig, collect_gram
from regmerge.data import Dataset
from regmerge.zoo import ModelSpec, forward, init_pretrained

MLP = ModelSpec("mlp", input_dim=4, num_classes=3, hidden_dim=6)


def test_ground_metric_hand_checked():
    wa = np.array([[1.0, 0.0], [0.0, 0.0]])
    wb = np.array([[0.0, 3.0], [0.0, 4.0]])
    gm = weight_ground_metric(wa, wb)
    # column distances: ||a_i - b_j||_2
    np.testing.assert_allclose(gm.matrix, [[1.0, np.sqrt(4 + 16)],
                                           [0.0, 5.0]])


def test_ground_metric_zero_diagonal_for_identical_weights():
    w = np.random.default_rng(0).normal(size=(5, 4))
    gm = weight_ground_metric(w, w)
    np.testing.assert_allclose(np.diag(gm.matrix), 0.0, atol=1e-12)
    assert gm.matrix.min() >= 0.0


def brute_force_assignment(matrix, mode):
    n = matrix.shape[0]
    best, best_val = None, None
    for perm in itertools.permutations(range(n)):
        val = sum(matrix[i, perm[i]] for i in range(n))
        better = (best_val is None
                  or (mode == "min_cost" and val < best_val - 1e-12)
                  or (mode == "max_similarity" and val > best_val + 1e-12))
        if better:
            best, best_val = perm, val
    return np.array(best), best_val


@pytest.mark.parametrize("mode", ["min_cost", "max_similarity"])
@pytest.mark.parametrize("n", [2, 4, 7])
def test_assignment_matches_exhaustive_search(mode, n):
    rng = np.random.default_rng(n)
    m = rng.normal(size=(n, n))
    perm = solve_assignment(m, mode)
    _, oracle_val = brute_force_assignment(m, mode)
    got = sum(m[i, perm.mapping[i]] for i in range(n))
    assert abs(got - oracle_val) <= 1e-10


def test_assignment_identity_on_diagonal_friendly_cost():
    m = np.full((4, 4), 5.0)
    np.fill_diagonal(m, 0.0)
    assert solve_assignment(m, "min_cost").is_identity()


def test_permutation_validation_and_inverse():
    with pytest.raises(ValueError):
        Permutation(np.array([0, 0, 1]))
    p = Permutation(np.array([2, 0, 1]))
    assert p.inverse().mapping.tolist() == [1, 2, 0]
    assert not p.is_identity()


def test_apply_permutation_preserves_function():
    m = init_pretrained(MLP, 3)
    x = np.random.default_rng(1).normal(size=(20, 4))
    perm = Permutation(np.random.default_rng(2).permutation(6))
    permuted = apply_permutation(m, "mlp.fc1", perm)
    np.testing.assert_allclose(forward(permuted, x).logits,
                               forward(m, x).logits, atol=1e-12)


def test_apply_permutation_rejects_head_and_transformer():
    m = init_pretrained(MLP, 0)
    with pytest.raises(UnsupportedLayerError):
        apply_permutation(m, "head", Permutation(np.arange(3)))
    tr = init_pretrained(ModelSpec("mini_transformer", input_dim=4,
                                   num_classes=2, hidden_dim=4), 0)
    with pytest.raises(UnsupportedLayerError):
        apply_permutation(tr, "attn.wq", Permutation(np.arange(4)))


@pytest.mark.parametrize("method", ["weight_based", "activation_based"])
def test_matching_recovers_planted_permutation(method):
    m = init_pretrained(MLP, 7)
    planted = Permutation(np.array([3, 5, 0, 2, 4, 1]))
    shuffled = apply_permutation(m, "mlp.fc1", planted)
    x = np.random.default_rng(3).normal(size=(64, 4))
    perm = match_layer(m, shuffled, "mlp.fc1", method, x=x)
    # aligning the shuffled model back must undo the planted permutation
    restored = apply_permutation(shuffled, "mlp.fc1", perm)
    np.testing.assert_allclose(restored.params["mlp.fc1.weight"],
                               m.params["mlp.fc1.weight"], atol=1e-12)


def test_activation_similarity_is_gram_of_activations():
    m = init_pretrained(MLP, 4)
    x = np.random.default_rng(4).normal(size=(10, 4))
    t = forward(m, x, record=True)
    sim = activation_similarity(t, t, "mlp.fc1")
    z = t.layer_activations["mlp.fc1"]
    np.testing.assert_allclose(sim.matrix, z.T @ z, atol=1e-12)


def test_match_and_merge_identical_models_is_identity_permutation():
    m = init_pretrained(MLP, 9)
    merged, perms = match_and_merge(m, m, "weight_based",
                                    MergeConfig(algorithm="simple"))
    assert all(p.is_identity() for p in perms.values())
    for k in m.params.keys():
        np.testing.assert_allclose(merged[k], m.params[k], atol=1e-12)


def test_match_and_merge_undoes_shuffle_simple():
    m = init_pretrained(MLP, 11)
    planted = Permutation(np.array([5, 3, 1, 0, 4, 2]))
    shuffled = apply_permutation(m, "mlp.fc1", planted)
    merged, _ = match_and_merge(m, shuffled, "weight_based",
                                MergeConfig(algorithm="simple"))
    # aligned-b equals m, so the merge is a fixed point
    for k in m.params.keys():
        np.testing.assert_allclose(merged[k], m.params[k], atol=1e-12)


def test_match_and_merge_regmean_permutes_grams_consistently():
    m = init_pretrained(MLP, 13)
    planted = Permutation(np.array([2, 4, 0, 5, 1, 3]))
    shuffled = apply_permutation(m, "mlp.fc1", planted)
    rng = np.random.default_rng(5)
    data = Dataset(rng.normal(size=(50, 4)), rng.integers(0, 3, size=50))
    g_a = collect_gram(m, data, CollectConfig())
    g_b = collect_gram(shuffled, data, CollectConfig())
    merged, _ = match_and_merge(m, shuffled, "weight_based",
                                MergeConfig(algorithm="regmean", alpha=1.0),
                                grams=(g_a, g_b))
    # both inputs represent the same function; the merge must return it
    x = rng.normal(size=(20, 4))
    from regmerge.zoo import model_from_checkpoint
    merged_model = model_from_checkpoint(
        type(m.params)(entries=dict(merged.entries), metadata=m.params.metadata))
    np.testing.assert_allclose(forward(merged_model, x).logits,
                               forward(m, x).logits, atol=1e-6)


def test_match_and_merge_rejects_transformer():
    spec = ModelSpec("mini_transformer", input_dim=4, num_classes=2, hidden_dim=4)
    a, b = init_pretrained(spec, 0), init_pretrained(spec, 1)
    with pytest.raises(UnsupportedLayerError):
        match_and_merge(a, b, "weight_based", MergeConfig(algorithm="simple"))


def test_export_grids_roundtrip(tmp_path):
    path = tmp_path / "grids.json"
    matching.export_grids(path, {"fc1": np.eye(2)}, meta={"layer": "fc1"})
    payload = json.loads(path.read_text())
    assert payload["meta"] == {"layer": "fc1"}
    assert payload["grids"]["fc1"] == [[1.0, 0.0], [0.0, 1.0]]
