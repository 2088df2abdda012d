import gzip
import struct

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from abmil_acc.bagdata import (
    BagSpec,
    IdxFormatError,
    build_bags,
    load_dataset,
    load_idx,
    make_synthetic_dataset,
    make_synthetic_pool,
    save_dataset,
    write_idx,
)
from abmil_acc.model import bag_label


def test_pool_reproducible_and_noisy():
    a = make_synthetic_pool(4, 10, 8, 20)
    b = make_synthetic_pool(4, 10, 8, 20)
    assert np.array_equal(a.features, b.features)
    same_class = a.features[a.labels == 3]
    assert not np.array_equal(same_class[0], same_class[1])


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("n_classes,dim", [(2, 8), (10, 8), (10, 16)])
def test_class_means_well_separated(seed, n_classes, dim):
    pool = make_synthetic_pool(seed, n_classes, dim, 400)
    means = np.array([pool.features[pool.labels == c].mean(axis=0) for c in range(n_classes)])
    gaps = np.linalg.norm(means[:, None] - means[None], axis=-1)[np.triu_indices(n_classes, 1)]
    # Sample means sit within ~0.25 of the true means at 400 samples in <= 16 dims.
    assert gaps.min() > 2 - 0.5


def test_pool_needs_two_classes():
    with pytest.raises(ValueError):
        make_synthetic_pool(0, 1, 4, 10)


def _idx_files(tmp_path, n=5, rows=28, cols=28, gz=False):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(n, rows, cols), dtype=np.uint8)
    labels = rng.integers(0, 10, size=n, dtype=np.uint8)
    ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
    write_idx(images, labels, ip, lp)
    if gz:
        for p in (ip, lp):
            p.with_suffix(".gz").write_bytes(gzip.compress(p.read_bytes()))
        ip, lp = ip.with_suffix(".gz"), lp.with_suffix(".gz")
    return images, labels, ip, lp


@pytest.mark.parametrize("gz", [False, True])
def test_load_idx(tmp_path, gz):
    images, labels, ip, lp = _idx_files(tmp_path, gz=gz)
    assert ip.read_bytes()[:4] == b"\x00\x00\x08\x03" or gz
    pool = load_idx(ip, lp)
    assert pool.features.shape == (5, 784)
    np.testing.assert_array_equal(pool.features[2], images[2].ravel() / 255.0)
    np.testing.assert_array_equal(pool.labels, labels)
    assert pool.features.min() >= 0 and pool.features.max() <= 1


def test_load_idx_limit(tmp_path):
    *_, ip, lp = _idx_files(tmp_path)
    assert len(load_idx(ip, lp, limit=3)) == 3
    with pytest.raises(ValueError, match="empty pool"):
        load_idx(ip, lp, limit=0)


def test_load_idx_bad_magic(tmp_path):
    *_, ip, lp = _idx_files(tmp_path)
    raw = bytearray(ip.read_bytes())
    raw[3] = 0x01
    ip.write_bytes(bytes(raw))
    with pytest.raises(IdxFormatError, match="bad magic"):
        load_idx(ip, lp)


def test_load_idx_truncated_reports_offsets(tmp_path):
    *_, ip, lp = _idx_files(tmp_path)
    ip.write_bytes(ip.read_bytes()[:-10])
    with pytest.raises(IdxFormatError, match=r"expected bytes 16\.\.3936, got 3926"):
        load_idx(ip, lp)


def test_load_idx_count_mismatch(tmp_path):
    *_, ip, lp = _idx_files(tmp_path)
    lp.write_bytes(struct.pack(">II", 0x801, 4) + bytes(4))
    with pytest.raises(IdxFormatError, match="does not match"):
        load_idx(ip, lp)


@pytest.fixture(scope="module")
def desk():
    return make_synthetic_dataset(BagSpec(seed=0))


def test_desk_defaults(desk):
    assert (len(desk.train), len(desk.val), len(desk.test)) == (40, 12, 20)
    assert all(len(b) == 50 for b in desk.train + desk.val + desk.test)


def test_key_count_five_percent_of_hundred():
    spec = BagSpec(10, 4, 4, 100, 0.05, seed=2)
    ds = make_synthetic_dataset(spec)
    for bag in ds.train + ds.val + ds.test:
        assert bag.instance_labels.sum() == (5 if bag.bag_label else 0)


def test_negative_bags_have_no_keys(desk):
    for bag in desk.train:
        if bag.bag_label == 0:
            assert bag.instance_labels.sum() == 0


def test_balance_thirty_bags():
    ds = make_synthetic_dataset(BagSpec(30, 4, 4, 20, 0.1, seed=1))
    assert sum(b.bag_label for b in ds.train) == 15


def test_split_disjointness_and_no_within_bag_reuse(desk):
    used = {}
    for name in ("train", "val", "test"):
        idx = set()
        for bag in desk.split(name):
            assert len(set(bag.pool_indices)) == len(bag.pool_indices)
            idx.update(bag.pool_indices.tolist())
        used[name] = idx
    assert not used["train"] & used["val"]
    assert not used["train"] & used["test"]
    assert not used["val"] & used["test"]


def test_insufficient_pool_message():
    pool = make_synthetic_pool(0, 10, 4, 10)
    with pytest.raises(ValueError, match=r"requires 5 key and 50 non-key.*available"):
        build_bags(pool, BagSpec(seed=0))


def test_spec_rejects_zero_key_fraction():
    with pytest.raises(ValueError, match="must exceed 0"):
        BagSpec(key_fraction=0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(5, 40), frac=st.floats(0.05, 0.6),
       pos=st.floats(0.0, 1.0))
def test_bag_invariants(seed, n, frac, pos):
    assume(1 <= round(frac * n) <= n)
    spec = BagSpec(6, 3, 3, n, frac, positive_bag_fraction=pos, seed=seed)
    ds = make_synthetic_dataset(spec, input_dim=4)
    for bag in ds.train + ds.val + ds.test:
        assert bag.bag_label == bag_label(bag.instance_labels)
        assert bag.instance_labels.sum() == (spec.n_keys if bag.bag_label else 0)
        assert len(np.unique(bag.pool_indices)) == n
    again = make_synthetic_dataset(spec, input_dim=4)
    for a, b in zip(ds.train, again.train):
        assert np.array_equal(a.instances, b.instances)


def test_dataset_round_trip(tmp_path, desk):
    save_dataset(desk, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert back.spec == desk.spec
    for name in ("train", "val", "test"):
        for a, b in zip(desk.split(name), back.split(name)):
            assert np.array_equal(a.instances, b.instances)
            assert np.array_equal(a.instance_labels, b.instance_labels)
            assert a.bag_label == b.bag_label
    text = (tmp_path / "ds" / "dataset_manifest.txt").read_text()
    assert "train_bags = 40" in text and "spec.seed = 0" in text


def test_build_bags_from_idx_pool(tmp_path):
    rng = np.random.default_rng(3)
    labels = np.repeat(np.arange(10), 40).astype(np.uint8)
    images = rng.integers(0, 256, size=(400, 28, 28), dtype=np.uint8)
    write_idx(images, labels, tmp_path / "i", tmp_path / "l")
    ds = build_bags(load_idx(tmp_path / "i", tmp_path / "l"), BagSpec(4, 2, 2, 20, 0.1))
    assert ds.input_dim == 784
    assert all(b.instance_labels.sum() in (0, 2) for b in ds.train)
