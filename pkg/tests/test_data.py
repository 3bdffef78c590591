import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wmbench import data as D
from wmbench.data import LabeledImageSet, Provenance, SplitSpec, split_adversary_data

from conftest import make_set


def test_labeled_set_rejects_out_of_range_pixels_and_labels():
    with pytest.raises(ValueError):
        LabeledImageSet(np.full((2, 4, 4, 1), 1.5), [0, 1], Provenance.RAW_TEST, 2)
    with pytest.raises(ValueError):
        LabeledImageSet(np.zeros((2, 4, 4, 1)), [0, 2], Provenance.RAW_TEST, 2)
    with pytest.raises(ValueError):
        LabeledImageSet(np.zeros((2, 4, 4, 1)), [0], Provenance.RAW_TEST, 2)


def test_unknown_dataset_is_rejected():
    with pytest.raises(D.DatasetError, match="unsupported dataset"):
        D.load_dataset("svhn")


def test_missing_cifar_files_name_the_path(tmp_path):
    with pytest.raises(D.DatasetError, match=str(tmp_path)):
        D.load_dataset("cifar10", tmp_path)


def test_mnist_5k_shape_and_balance():
    train, test = D.load_dataset("mnist-5k")
    assert (len(train), len(test)) == (3000, 2000)
    assert train.shape == (28, 28, 1) and train.num_classes == 10
    assert np.bincount(train.labels).tolist() == [300] * 10
    assert train.provenance == Provenance.OWNER_TRAIN
    assert 0.0 <= train.images.min() and train.images.max() <= 1.0


@pytest.mark.parametrize("n,f,expected", [(10000, 0.5, 5000), (10000, 0.1, 1000), (10000, 1.0, 10000)])
def test_split_sizes(n, f, expected):
    test = LabeledImageSet(np.zeros((n, 2, 2, 1), np.float32), np.zeros(n, np.int64), Provenance.RAW_TEST, 10)
    adv, ev = split_adversary_data(test, SplitSpec(f, 0))
    assert len(adv) == expected and len(ev) == n - expected
    assert adv.provenance == Provenance.ADV_TEST_HALF and ev.provenance == Provenance.EVAL_TEST_HALF


@pytest.mark.parametrize("f", [0.0, -0.1, 1.5])
def test_split_fraction_out_of_range(f):
    with pytest.raises(ValueError):
        split_adversary_data(make_set(10), SplitSpec(f, 0))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), f=st.floats(0.01, 1.0), n=st.integers(1, 300))
def test_split_disjoint_covering_and_deterministic(seed, f, n):
    test = make_set(n, shape=(2, 2, 1))
    adv, ev = split_adversary_data(test, SplitSpec(f, seed))
    assert not set(adv.index) & set(ev.index)
    assert sorted([*adv.index, *ev.index]) == list(range(n))
    adv2, ev2 = split_adversary_data(test, SplitSpec(f, seed))
    assert adv.images.tobytes() == adv2.images.tobytes() and np.array_equal(ev.index, ev2.index)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(4, 40), w=st.integers(4, 40), c_in=st.sampled_from([1, 3]), c_out=st.sampled_from([1, 3]))
def test_resize_stays_normalized(h, w, c_in, c_out):
    x = np.random.default_rng(h * w).random((3, 9, 11, c_in), dtype=np.float32)
    y = D.resize_images(x, (h, w, c_out))
    assert y.shape == (3, h, w, c_out)
    assert y.min() >= 0.0 and y.max() <= 1.0


def test_surrogate_registry():
    s = D.surrogate_source("mnist-5k", n=50)
    assert s.shape == (28, 28, 1) and s.provenance == Provenance.SURROGATE and len(s) == 50
    with pytest.raises(D.DatasetError, match="registered"):
        D.surrogate_source("svhn")


@pytest.mark.parametrize("name", D.POOLS)
def test_pools_are_deterministic_and_normalized(name):
    a = D.image_pool(name, 12, (28, 28, 1), seed=3)
    b = D.image_pool(name, 12, (28, 28, 1), seed=3)
    assert a.shape == (12, 28, 28, 1) and np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0
    c = D.image_pool(name, 4, (32, 32, 3), seed=3)
    assert c.shape == (4, 32, 32, 3)


def test_png_export_roundtrip(tmp_path):
    s = make_set(3)
    q = LabeledImageSet(D.quantize(s.images), s.labels, s.provenance, 10)
    q.export_png(tmp_path)
    back = np.stack([D.load_png(tmp_path / f"{i}.png", 1) for i in range(3)])
    assert np.array_equal(back, q.images)
