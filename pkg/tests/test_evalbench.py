import csv
import io
import time
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from abmil_acc.bagdata import BagSpec, make_synthetic_dataset
from abmil_acc.evalbench import CSV_FIELDS, evaluate, matrix_cells, roc_auc, rows_to_csv, run_matrix
from abmil_acc.gradstrat import Strategy, TrainConfig
from abmil_acc.model import ModelConfig, forward, init_params
from abmil_acc.verify import pairwise_auc


@pytest.mark.parametrize("scores,labels,expected", [
    ([1, 2, 3, 4], [0, 0, 1, 1], 1.0),
    ([4, 3, 2, 1], [0, 0, 1, 1], 0.0),
    ([0.9, 0.1], [1, 0], 1.0),
    ([0.5, 0.5, 0.5], [1, 0, 0], 0.5),
])
def test_roc_auc_examples(scores, labels, expected):
    assert roc_auc(scores, labels) == expected


def test_roc_auc_single_class():
    with pytest.raises(ValueError, match="AUC undefined"):
        roc_auc([0.1, 0.2], [1, 1])


def test_roc_auc_twenty_random_pairs():
    rng = np.random.default_rng(0)
    scores = rng.random(20)
    labels = np.array([0, 1] * 10)
    assert roc_auc(scores, labels) == pairwise_auc(scores, labels)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 12), st.integers(0, 1)), min_size=2, max_size=200))
def test_roc_auc_matches_pairwise_oracle(pairs):
    scores = np.array([p[0] for p in pairs]) / 4.0
    labels = np.array([p[1] for p in pairs])
    assume(0 < labels.sum() < len(labels))
    assert roc_auc(scores, labels) == pairwise_auc(scores, labels)


@dataclass
class _Bag:
    instances: np.ndarray
    instance_labels: np.ndarray
    bag_label: int


@pytest.fixture(scope="module")
def model():
    return init_params(ModelConfig(4, (6, 5), 3), np.random.default_rng(0))


def test_all_correct_gives_accuracy_one(model):
    rng = np.random.default_rng(1)
    bags = []
    for _ in range(5):
        X = rng.normal(size=(6, 4))
        labels = np.array([1, 0, 0, 0, 0, 0])
        score = forward(model, X).bag_score
        bags.append(_Bag(X, labels, int(score >= 0.5)))
    assert evaluate(model, bags).bag_accuracy == 1.0


def test_identical_attention_gives_half_auc(model):
    x = np.random.default_rng(2).normal(size=(1, 4))
    bags = [_Bag(np.repeat(x, 4, axis=0), np.array([1, 0, 0, 0]), 1),
            _Bag(np.repeat(x, 4, axis=0), np.array([0, 1, 0, 0]), 1)]
    res = evaluate(model, bags)
    assert res.instance_auc == 0.5
    assert res.instance_auc_bag_avg == 0.5


def test_auc_absent_without_both_classes(model):
    bags = [_Bag(np.ones((3, 4)), np.zeros(3, dtype=int), 0)]
    res = evaluate(model, bags)
    assert res.instance_auc is None and res.instance_auc_bag_avg is None


def test_inference_sampling_subsets(model):
    rng = np.random.default_rng(3)
    bags = [_Bag(rng.normal(size=(8, 4)), np.array([1] + [0] * 7), 1) for _ in range(3)]
    res = evaluate(model, bags, 25, np.random.default_rng(0))
    assert all(len(r.attention_weights) == 2 for r in res.records)
    with pytest.raises(ValueError):
        evaluate(model, bags, 0)


def test_inference_sampling_is_cheaper():
    rng = np.random.default_rng(4)
    params = init_params(ModelConfig(64, (256, 128), 32), rng)
    bags = [_Bag(rng.normal(size=(2000, 64)), np.r_[1, np.zeros(1999, dtype=int)], 1) for _ in range(4)]
    evaluate(params, bags)  # warm-up

    def best(pct):
        times = []
        for _ in range(3):
            t0 = time.perf_counter()
            evaluate(params, bags, pct, np.random.default_rng(0))
            times.append(time.perf_counter() - t0)
        return min(times)

    assert best(25) <= best(100)


def test_matrix_cells_collapse_full_bag():
    cells = matrix_cells(["full_bag", "accumulate"], [25, 100])
    assert [(c.strategy, c.alpha_pct) for c in cells] == [
        (Strategy.FULL_BAG, 100.0), (Strategy.ACCUMULATE, 25.0), (Strategy.ACCUMULATE, 100.0)]
    with pytest.raises(ValueError):
        matrix_cells([], [25])


TINY = BagSpec(6, 3, 3, 10, 0.2, seed=5)
FAST = TrainConfig(epochs=3, selection_window=2, learning_rate=1e-3)


def _rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_single_cell_matrix_rows():
    rows = run_matrix(TINY, ["accumulate"], [50], [100], 1, FAST, input_dim=4)
    assert [r["kind"] for r in rows] == ["raw", "aggregate"]
    parsed = _rows(rows_to_csv(rows))
    assert list(parsed[0])[: len(CSV_FIELDS)] == list(CSV_FIELDS)
    assert parsed[0]["fwd_count"] == "20"


def test_repeats_fill_std_column():
    rows = run_matrix(TINY, ["full_bag"], [100], [100, 50], 3, FAST, input_dim=4)
    agg = [r for r in rows if r["kind"] == "aggregate"]
    assert len(agg) == 2 and all(r["n_runs"] == 3 for r in agg)
    assert all(np.isfinite(r["bag_acc_std"]) for r in agg)
    assert len({r["seed"] for r in rows if r["kind"] == "raw"}) == 3


def test_full_bag_and_alpha100_pair_up():
    rows = run_matrix(TINY, ["full_bag", "accumulate"], [100], [100], 2, FAST, input_dim=4)
    raw = [r for r in rows if r["kind"] == "raw"]
    by_seed = {}
    for r in raw:
        by_seed.setdefault(r["seed"], []).append(r)
    for pair in by_seed.values():
        assert pair[0]["bag_acc"] == pair[1]["bag_acc"]
        assert pair[0]["inst_auc"] == pytest.approx(pair[1]["inst_auc"], abs=1e-12)


def test_report_deterministic_except_wall_time():
    a = run_matrix(TINY, ["accumulate", "sample_train"], [50], [100], 1, FAST, input_dim=4)
    b = run_matrix(TINY, ["accumulate", "sample_train"], [50], [100], 1, FAST, input_dim=4)
    assert rows_to_csv(a, drop_wall=True) == rows_to_csv(b, drop_wall=True)


def test_failed_cell_is_recorded_and_matrix_continues():
    calls = []

    def factory(spec):
        calls.append(spec.seed)
        ds = make_synthetic_dataset(spec, input_dim=4)
        if len(calls) == 1:
            ds.val = []  # training refuses empty validation splits
        return ds

    rows = run_matrix(TINY, ["accumulate"], [50], [100], 2, FAST, dataset_factory=factory)
    raw = [r for r in rows if r["kind"] == "raw"]
    assert raw[0]["status"].startswith("error") and raw[1]["status"] == "ok"
    agg = [r for r in rows if r["kind"] == "aggregate"]
    assert agg[0]["n_runs"] == 1
