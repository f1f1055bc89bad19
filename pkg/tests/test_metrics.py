import numpy as np
import pytest
from hypothesis import given, strategies as st

from groupthresh.metrics import (
    ConfusionCounts,
    GroupedConfusion,
    ba_arrays,
    balanced_accuracy,
    confusion,
    evaluate,
    is_degenerate,
    worst_group_ba,
)


def test_perfect_prediction():
    gc = confusion([1, 0], [1, 0], [0, 0])
    assert gc.overall == ConfusionCounts(tp=1, fp=0, tn=1, fn=0)


def test_all_negative_predictor_counts():
    gc = confusion([1, 1, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0])
    assert gc.overall == ConfusionCounts(tp=0, fp=0, tn=2, fn=2)


def test_seven_rows_three_errors():
    labels = [0, 1, 0, 1, 0, 1, 0]
    preds = [0, 0, 0, 1, 1, 1, 1]
    groups = [0, 0, 1, 0, 1, 0, 1]
    gc = confusion(labels, preds, groups)
    o = gc.overall
    assert o.total == 7
    assert o.fp + o.fn == 3


def test_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        confusion([1, 0], [1], [0, 0])


def test_all_negative_on_imbalanced_data_is_half():
    labels = np.r_[np.zeros(95, int), np.ones(5, int)]
    gc = confusion(labels, np.zeros(100, int), np.zeros(100, int))
    assert (gc.overall.tn + gc.overall.tp) / 100 == 0.95
    assert balanced_accuracy(gc.overall) == 0.5


def test_symmetric_rates():
    assert balanced_accuracy(ConfusionCounts(tp=4, fn=4, tn=3, fp=3)) == 0.5


def test_hand_computed_ba():
    assert balanced_accuracy(ConfusionCounts(tp=3, fn=1, tn=2, fp=2)) == pytest.approx(0.625)


def test_degenerate_conventions():
    only_pos = ConfusionCounts(tp=3, fn=1)
    only_neg = ConfusionCounts(tn=1, fp=3)
    assert balanced_accuracy(only_pos) == 0.75
    assert balanced_accuracy(only_neg) == 0.25
    assert balanced_accuracy(ConfusionCounts()) == 0.5
    assert is_degenerate(only_pos) and is_degenerate(only_neg)
    assert not is_degenerate(ConfusionCounts(1, 1, 1, 1))


def test_worst_group_min_of_two():
    gc = GroupedConfusion({
        0: ConfusionCounts(tp=7, fn=3, tn=7, fp=3),    # 0.70
        1: ConfusionCounts(tp=16, fn=9, tn=16, fp=9),  # 0.64
    })
    assert worst_group_ba(gc) == pytest.approx(0.64)


def test_worst_group_single_group_equals_overall():
    gc = confusion([1, 0, 1, 0, 1], [1, 1, 0, 0, 1], [2] * 5)
    assert worst_group_ba(gc) == balanced_accuracy(gc.overall)


def test_worst_group_empty():
    with pytest.raises(ValueError):
        worst_group_ba(GroupedConfusion({}))


def test_overall_must_match_sum():
    with pytest.raises(ValueError):
        GroupedConfusion({0: ConfusionCounts(1, 0, 0, 0)}, overall=ConfusionCounts(2, 0, 0, 0))


counts = st.integers(0, 50)


@given(counts, counts, counts, counts)
def test_ba_in_unit_interval_and_vector_matches_scalar(tp, fp, tn, fn):
    c = ConfusionCounts(tp, fp, tn, fn)
    ba = balanced_accuracy(c)
    assert 0.0 <= ba <= 1.0
    assert ba_arrays([tp], [fp], [tn], [fn])[0] == ba


rows = st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1), st.integers(0, 3)),
                min_size=1, max_size=40)


@given(rows, st.randoms())
def test_permutation_invariance(data, rnd):
    y, p, g = map(np.array, zip(*data))
    perm = list(range(len(data)))
    rnd.shuffle(perm)
    assert evaluate(y, p, g) == evaluate(y[perm], p[perm], g[perm])


@given(rows)
def test_worst_group_bounds_and_additivity(data):
    y, p, g = map(np.array, zip(*data))
    gc = confusion(y, p, g)
    wg = worst_group_ba(gc)
    bas = [balanced_accuracy(c) for c in gc.per_group.values()]
    assert all(wg <= b for b in bas)
    assert wg <= max(bas)
    total = ConfusionCounts()
    for c in gc.per_group.values():
        total = total + c
    assert balanced_accuracy(total) == balanced_accuracy(gc.overall)
