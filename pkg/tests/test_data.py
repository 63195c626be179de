import numpy as np
import pytest

from regmerge.data import (Dataset, DomainShift, PartitionSpec, SyntheticTask,
                           concat, dataset_from_json_dict, dataset_to_json_dict,
                           make_noniid_partitions, rng_for)
from regmerge.metrics import metric


def test_rng_deterministic_and_seed_sensitive():
    a = rng_for(7).normal(size=5)
    b = rng_for(7).normal(size=5)
    c = rng_for(8).normal(size=5)
    np.testing.assert_array_equal(a, b)
    assert np.abs(a - c).max() > 0


def test_task_realize_bit_reproducible():
    task = SyntheticTask(generator="gaussian_blobs", input_dim=3, num_classes=2,
                         sizes=(50, 10, 10), seed=5)
    a, b = task.realize(), task.realize()
    np.testing.assert_array_equal(a.train.x, b.train.x)
    np.testing.assert_array_equal(a.test.y, b.test.y)


def test_task_splits_have_requested_sizes():
    task = SyntheticTask(generator="moon_mixtures", input_dim=2, num_classes=2,
                         sizes=(30, 20, 10), seed=1)
    td = task.realize()
    assert (len(td.train), len(td.val), len(td.test)) == (30, 20, 10)


def test_domains_share_class_geometry():
    base = SyntheticTask(generator="gaussian_blobs", input_dim=4, num_classes=3,
                         sizes=(2000, 10, 10), seed=2)
    shifted = SyntheticTask(generator="gaussian_blobs", input_dim=4,
                            num_classes=3, sizes=(2000, 10, 10), seed=3,
                            domain_shift=DomainShift(mean_offset=(2.0,)))
    a, b = base.realize().train, shifted.realize().train
    for c in range(3):
        ma = a.x[a.y == c].mean(axis=0)
        mb = b.x[b.y == c].mean(axis=0)
        # same blob center, offset by the domain shift in dim 0 only
        assert abs((mb - ma)[0] - 2.0) < 0.25
        assert np.abs((mb - ma)[1:]).max() < 0.25


def test_rotation_preserves_norms():
    base = SyntheticTask(generator="gaussian_blobs", input_dim=2, num_classes=2,
                         sizes=(100, 1, 1), seed=4)
    rot = SyntheticTask(generator="gaussian_blobs", input_dim=2, num_classes=2,
                        sizes=(100, 1, 1), seed=4,
                        domain_shift=DomainShift(rotation=0.9))
    xa = base.realize().train.x
    xb = rot.realize().train.x
    np.testing.assert_allclose(np.linalg.norm(xa, axis=1),
                               np.linalg.norm(xb, axis=1), rtol=1e-9)
    assert np.abs(xa - xb).max() > 0.1


def test_class_priors_skew_labels():
    task = SyntheticTask(generator="gaussian_blobs", input_dim=2, num_classes=2,
                         sizes=(5000, 1, 1), seed=6,
                         domain_shift=DomainShift(class_priors=(0.9, 0.1)))
    y = task.realize().train.y
    assert 0.85 < (y == 0).mean() < 0.95


def test_unknown_generator_rejected():
    with pytest.raises(ValueError):
        SyntheticTask(generator="spiral", input_dim=2, num_classes=2,
                      sizes=(10, 1, 1)).realize()


def test_moons_require_two_classes():
    with pytest.raises(ValueError):
        SyntheticTask(generator="moon_mixtures", input_dim=2, num_classes=3,
                      sizes=(10, 1, 1)).realize()


def balanced_dataset(n_per_class=2000, classes=4, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(classes), n_per_class)
    x = rng.normal(size=(len(y), 3))
    return Dataset(x, y)


def test_partitions_sizes_and_determinism():
    data = balanced_dataset()
    spec = PartitionSpec(key_class=1, partition_size=1000, seed=3)
    p1a, p2a = make_noniid_partitions(data, spec)
    p1b, p2b = make_noniid_partitions(data, spec)
    assert len(p1a) == len(p2a) == 1000
    np.testing.assert_array_equal(p1a.x, p1b.x)
    np.testing.assert_array_equal(p2a.y, p2b.y)


def test_partitions_key_class_skew():
    data = balanced_dataset()
    spec = PartitionSpec(key_class=2, key_fraction=0.8, partition_size=1000,
                         seed=5)
    p1, p2 = make_noniid_partitions(data, spec)
    f1 = (p1.y == 2).mean()
    f2 = (p2.y == 2).mean()
    # partition 1 is key-heavy, partition 2 key-light
    assert f1 > 2.0 * f2
    assert f1 > 0.3


def test_partitions_disjoint_rows():
    data = balanced_dataset(seed=1)
    p1, p2 = make_noniid_partitions(data, PartitionSpec(key_class=0, seed=1))
    rows1 = {tuple(r) for r in p1.x}
    rows2 = {tuple(r) for r in p2.x}
    assert not rows1 & rows2


def test_partitions_random_key_uses_seed():
    data = balanced_dataset(seed=2)
    p1a, _ = make_noniid_partitions(data, PartitionSpec(seed=10))
    p1b, _ = make_noniid_partitions(data, PartitionSpec(seed=10))
    np.testing.assert_array_equal(p1a.y, p1b.y)


def test_partitions_reject_small_dataset():
    data = balanced_dataset(n_per_class=10)
    with pytest.raises(ValueError):
        make_noniid_partitions(data, PartitionSpec(partition_size=1000))


def test_partition_spec_validation():
    with pytest.raises(ValueError):
        PartitionSpec(key_fraction=1.0)
    with pytest.raises(ValueError):
        PartitionSpec(partition_size=0)


def test_dataset_json_roundtrip():
    d = Dataset(np.array([[1.5, 2.0], [0.0, -1.0]]), np.array([0, 1]))
    back = dataset_from_json_dict(dataset_to_json_dict(d))
    np.testing.assert_array_equal(back.x, d.x)
    np.testing.assert_array_equal(back.y, d.y)


def test_concat_and_subset():
    a = Dataset(np.ones((2, 2)), np.zeros(2, dtype=int))
    b = Dataset(np.zeros((3, 2)), np.ones(3, dtype=int))
    c = concat([a, b])
    assert len(c) == 5
    assert len(c.subset([0, 4])) == 2


def test_accuracy_hand_checked():
    assert metric([0, 1, 1, 0], [0, 1, 0, 0]) == pytest.approx(0.75)


def test_macro_f1_hand_confusion_table():
    # 3-class table: class 0 has P=2/3, R=1.0 -> F1=0.8;
    # class 1 has P=1.0, R=0.5 -> F1=2/3; class 2 perfect -> F1=1.0
    labels = [0, 0, 1, 1, 2]
    preds = [0, 0, 0, 1, 2]
    expected = (0.8 + 2.0 / 3.0 + 1.0) / 3.0
    assert metric(preds, labels, "macro_f1") == pytest.approx(expected)


def test_macro_f1_ignores_classes_absent_from_labels():
    # predictions mention class 2 but labels never do; it must not count
    labels = [0, 0, 1, 1]
    preds = [0, 2, 1, 1]
    # class 0: P=1, R=0.5 -> 2/3; class 1: P=1, R=1 -> 1
    assert metric(preds, labels, "macro_f1") == pytest.approx((2.0 / 3.0 + 1.0) / 2.0)


def test_macro_f1_restrict_classes():
    labels = [0, 0, 1, 1]
    preds = [0, 0, 0, 1]
    # restricted to class 1 only: P=1, R=0.5 -> 2/3
    assert metric(preds, labels, "macro_f1",
                  restrict_classes=[1]) == pytest.approx(2.0 / 3.0)


def test_matthews_hand_checked():
    # perfect binary prediction -> 1.0; inverted -> -1.0
    assert metric([0, 1, 0, 1], [0, 1, 0, 1], "matthews") == pytest.approx(1.0)
    assert metric([1, 0, 1, 0], [0, 1, 0, 1], "matthews") == pytest.approx(-1.0)


def test_multilabel_macro_f1():
    labels = np.array([[1, 0], [1, 1], [0, 1]])
    preds = np.array([[1, 0], [0, 1], [0, 1]])
    # class 0: P=1, R=0.5 -> 2/3; class 1: P=1, R=1 -> 1
    assert metric(preds, labels, "macro_f1") == pytest.approx((2.0 / 3.0 + 1.0) / 2.0)


def test_metric_shape_mismatch_and_empty_rejected():
    with pytest.raises(ValueError):
        metric([0, 1], [0])
    with pytest.raises(ValueError):
        metric([], [])
    with pytest.raises(ValueError):
        metric([0], [0], "geometric_mean")
