import numpy as np
import pytest

from regmerge.data import Dataset
from regmerge.stats import CollectConfig, collect_fisher, collect_gram
from regmerge.zoo import ModelSpec, forward, init_pretrained

LINEAR = ModelSpec("linear", input_dim=3, num_classes=2)


def rand_data(n, d, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(size=(n, d)), rng.integers(0, 2, size=n))


def test_single_example_gram_is_outer_product():
    m = init_pretrained(LINEAR, 0)
    data = rand_data(1, 3)
    stats = collect_gram(m, data, CollectConfig())
    x = data.x[0]
    np.testing.assert_array_equal(stats.gram_sums["head"], np.outer(x, x))
    assert stats.example_counts["head"] == 1


def test_gram_matches_brute_force_xtx():
    m = init_pretrained(LINEAR, 1)
    data = rand_data(100, 3, seed=1)
    stats = collect_gram(m, data, CollectConfig(batch_size=7))
    oracle = data.x.T @ data.x
    err = np.abs(stats.gram_sums["head"] - oracle).max()
    assert err <= 1e-9 * np.abs(oracle).max()


def test_gram_batch_cap():
    m = init_pretrained(LINEAR, 0)
    data = rand_data(1000, 3)
    stats = collect_gram(m, data, CollectConfig(batch_size=16, max_batches=1))
    assert stats.example_counts["head"] == 16


def test_gram_batch_size_invariance():
    m = init_pretrained(ModelSpec("mlp", input_dim=3, num_classes=2, hidden_dim=4), 2)
    data = rand_data(64, 3, seed=2)
    a = collect_gram(m, data, CollectConfig(batch_size=1))
    b = collect_gram(m, data, CollectConfig(batch_size=32))
    for layer in a.gram_sums:
        diff = np.abs(a.gram_sums[layer] - b.gram_sums[layer]).max()
        assert diff <= 1e-9 * max(1.0, np.abs(a.gram_sums[layer]).max())


@pytest.mark.parametrize("arch,kwargs", [
    ("linear", {}),
    ("mlp", {"hidden_dim": 5}),
    ("mini_transformer", {"hidden_dim": 6}),
])
def test_gram_psd_and_symmetric(arch, kwargs):
    spec = ModelSpec(arch, input_dim=4, num_classes=3, **kwargs)
    m = init_pretrained(spec, 3)
    data = rand_data(40, 4, seed=3)
    stats = collect_gram(m, data, CollectConfig())
    for layer, g in stats.gram_sums.items():
        np.testing.assert_allclose(g, g.T, atol=1e-12)
        eig = np.linalg.eigvalsh(g)
        assert eig.min() >= -1e-8 * np.trace(g), layer


def test_fisher_nonnegative():
    m = init_pretrained(ModelSpec("mlp", input_dim=3, num_classes=3, hidden_dim=4), 4)
    data = rand_data(10, 3, seed=4)
    fs = collect_fisher(m, data, CollectConfig())
    for k, f in fs.fishers.items():
        assert f.min() >= 0.0, k
    assert fs.example_count == 10


def test_fisher_two_class_linear_closed_form():
    # single example, 2-class linear model: the per-class log-prob gradients
    # have closed form grad_W log p(c|x) = x (e_c - p)^T, so
    # F = sum_c p_c * (x (e_c - p)^T)^2 elementwise.
    m = init_pretrained(LINEAR, 5)
    data = rand_data(1, 3, seed=5)
    x = data.x[0]
    logits = forward(m, data.x).logits[0]
    p = np.exp(logits - logits.max())
    p /= p.sum()
    expected = np.zeros((3, 2))
    for c in range(2):
        e = np.zeros(2)
        e[c] = 1.0
        expected += p[c] * np.square(np.outer(x, e - p))
    fs = collect_fisher(m, data, CollectConfig())
    np.testing.assert_allclose(fs.fishers["head.weight"], expected, rtol=1e-10)


def test_fisher_finite_difference_on_logprob_oracle():
    # per-class oracle: grad of log p(y=c|x) via central differences
    m = init_pretrained(LINEAR, 6)
    data = rand_data(1, 3, seed=6)
    h = 1e-6

    def logprob(params, c):
        logits = forward(m.replaced(params), data.x).logits[0]
        z = logits - logits.max()
        return z[c] - np.log(np.exp(z).sum())

    logits = forward(m, data.x).logits[0]
    p = np.exp(logits - logits.max())
    p /= p.sum()
    expected = {k: np.zeros_like(m.params[k]) for k in m.params.keys()}
    for c in range(2):
        for key in m.params.keys():
            grad = np.zeros_like(m.params[key])
            it = np.nditer(grad, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                pp = m.params.copy()
                pp.entries[key][idx] += h
                lp = logprob(pp, c)
                pp.entries[key][idx] -= 2 * h
                lm = logprob(pp, c)
                grad[idx] = (lp - lm) / (2 * h)
            expected[key] += p[c] * np.square(grad)
    fs = collect_fisher(m, data, CollectConfig())
    for key in m.params.keys():
        np.testing.assert_allclose(fs.fishers[key], expected[key],
                                   rtol=1e-3, atol=1e-12)


def test_fisher_duplicate_dataset_invariant():
    m = init_pretrained(LINEAR, 7)
    data = rand_data(5, 3, seed=7)
    doubled = Dataset(np.vstack([data.x, data.x]), np.concatenate([data.y, data.y]))
    a = collect_fisher(m, data, CollectConfig())
    b = collect_fisher(m, doubled, CollectConfig())
    for k in a.fishers:
        np.testing.assert_allclose(a.fishers[k], b.fishers[k], atol=1e-12)


def test_fisher_uniform_model_positive_where_inputs_nonzero():
    m = init_pretrained(LINEAR, 0)
    for k in m.params.keys():
        m.params.entries[k] = np.zeros_like(m.params[k])
    data = rand_data(5, 3, seed=8)
    fs = collect_fisher(m, data, CollectConfig())
    assert fs.fishers["head.weight"].min() > 0.0


def test_fisher_multilabel_bernoulli():
    spec = ModelSpec("linear", input_dim=2, num_classes=2, multilabel=True)
    m = init_pretrained(spec, 9)
    rng = np.random.default_rng(9)
    data = Dataset(rng.normal(size=(1, 2)), np.zeros((1, 2), dtype=np.int64))
    x = data.x[0]
    logits = forward(m, data.x).logits[0]
    s = 1.0 / (1.0 + np.exp(-logits))
    # per class c: E_y (d/dW log p(y|x))^2 = s(1-s)^2 + (1-s)s^2 = s(1-s)
    # times x_i^2 on column c of the weight
    expected = np.outer(np.square(x), s * (1 - s))
    fs = collect_fisher(m, data, CollectConfig())
    np.testing.assert_allclose(fs.fishers["head.weight"], expected, rtol=1e-10)


def test_empty_dataset_rejected():
    m = init_pretrained(LINEAR, 0)
    empty = Dataset(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError):
        collect_gram(m, empty, CollectConfig())
    with pytest.raises(ValueError):
        collect_fisher(m, empty, CollectConfig())
