import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_spatial_diffuse, exact_thresholds, random_partition
from tdodif import LabelMap, ProbMap
from tdodif.errors import ConfigError, FormatError
from tdodif.pseudo import (
    ClassConfidenceAccumulator,
    ClassThresholds,
    accumulate,
    read_thresholds,
    select_pseudo_labels,
    thresholds_exact,
    thresholds_from_acc,
    write_thresholds,
)
from tdodif.sdiff import seed_conflicts, spatial_diffuse
from tdodif.slic import from_assignment


def _probs_from_pairs(pairs):
    """Column of 2-class probabilities ``[(p1, p2), ...]`` laid out as a 1×N map."""
    d = np.array(pairs, np.float32).T[:, None, :]
    return ProbMap(d)


# -- thresholds -------------------------------------------------------------------

def test_top_one_of_five():
    conf = np.array([0.9, 0.8, 0.7, 0.6, 0.5])
    cls = np.ones(5, int)
    th = thresholds_exact(cls, conf, 1, 0.2)
    assert th.lam[0] == pytest.approx(0.9)
    acc = ClassConfidenceAccumulator(1).add(cls, conf)
    h = thresholds_from_acc(acc, 0.2)
    assert (conf >= h.lam[0]).sum() == 1


def test_p_one_selects_everything():
    conf = np.array([0.9, 0.8, 0.55])
    acc = ClassConfidenceAccumulator(1).add(np.ones(3, int), conf)
    th = thresholds_from_acc(acc, 1.0)
    assert (conf >= th.lam[0]).all()


def test_empty_class_selects_nothing():
    acc = ClassConfidenceAccumulator(2).add(np.ones(4, int), np.full(4, 0.9))
    th = thresholds_from_acc(acc, 0.5)
    assert th.empty.tolist() == [False, True] and th.lam[1] == 1.0
    probs = _probs_from_pairs([(0.9, 0.1), (0.4, 0.6)])
    pseudo, pred = select_pseudo_labels(probs, th)
    assert pred.data.tolist() == [[1, 2]]
    assert pseudo.data[0, 1] == 0


def test_invalid_p():
    with pytest.raises(ConfigError):
        thresholds_from_acc(ClassConfidenceAccumulator(1), 0.0)


def test_selection_examples():
    th = ClassThresholds(np.array([0.9, 0.9]), 0.2)
    pseudo, pred = select_pseudo_labels(_probs_from_pairs([(0.95, 0.05), (0.6, 0.4)]), th)
    assert pseudo.data.tolist() == [[1, 0]] and pred.data.tolist() == [[1, 1]]


def test_zero_thresholds_use_whole_prediction(rng):
    z = rng.random((3, 5, 6)).astype(np.float32)
    probs = ProbMap(z / z.sum(axis=0))
    pseudo, pred = select_pseudo_labels(probs, ClassThresholds(np.zeros(3), 1.0))
    assert pseudo == pred


def test_accumulator_merge_is_associative(rng):
    parts = [ClassConfidenceAccumulator(3).add(rng.integers(1, 4, 50), rng.random(50)) for _ in range(3)]
    a = (parts[0] + parts[1]) + parts[2]
    b = parts[0] + (parts[1] + parts[2])
    np.testing.assert_array_equal(a.hist, b.hist)


def test_accumulate_channel_mismatch(rng):
    with pytest.raises(ConfigError):
        accumulate(ProbMap(np.full((2, 1, 1), 0.5, np.float32)), ClassConfidenceAccumulator(3))


def test_thresholds_file_round_trip(tmp_path):
    th = ClassThresholds(np.array([0.25, 1.0, 0.875]), 0.2, "histogram", np.array([False, True, False]))
    write_thresholds(th, tmp_path / "t.txt")
    back = read_thresholds(tmp_path / "t.txt")
    np.testing.assert_array_equal(back.lam, th.lam)
    np.testing.assert_array_equal(back.empty, th.empty)
    assert back.p == 0.2


def test_thresholds_file_rejects_garbage(tmp_path):
    (tmp_path / "t.txt").write_text("class 1 lambda abc\n")
    with pytest.raises(FormatError):
        read_thresholds(tmp_path / "t.txt")
    (tmp_path / "u.txt").write_text("class 2 lambda 0.5\n")
    with pytest.raises(FormatError):
        read_thresholds(tmp_path / "u.txt")


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.floats(0.01, 1.0), st.integers(0, 2**31 - 1))
def test_histogram_matches_sorted_oracle(num_classes, p, seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(1, 3000))
    cls = r.integers(1, num_classes + 1, n)
    conf = r.random(n)
    acc = ClassConfidenceAccumulator(num_classes).add(cls, conf)
    hist = thresholds_from_acc(acc, p)
    exact = exact_thresholds(cls, conf, num_classes, p)
    for c in range(num_classes):
        if exact[c] is None:
            assert hist.empty[c]
            continue
        assert hist.lam[c] <= exact[c] + 1e-12
        assert exact[c] - hist.lam[c] <= 1.0 / 4096 + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_raising_threshold_never_adds_labels(seed):
    r = np.random.default_rng(seed)
    z = r.random((3, 6, 7)).astype(np.float32)
    probs = ProbMap(z / z.sum(axis=0))
    lam = r.random(3)
    a, _ = select_pseudo_labels(probs, ClassThresholds(lam, 0.2))
    b, _ = select_pseudo_labels(probs, ClassThresholds(np.minimum(lam + 0.1, 1.0), 0.2))
    assert ((b.data != 0) <= (a.data != 0)).all()
    assert ((a.data == 0) | (a.data == np.argmax(z, axis=0) + 1)).all()


# -- spatial diffusion ------------------------------------------------------------------

def test_single_seed_diffuses_to_matching_predictions():
    # one superpixel of 12 pixels: class 3 predicted at 10, class 5 at 2, one class-3 seed
    pred = np.full((3, 4), 3, np.uint8)
    pred[0, :2] = 5
    init = np.zeros((3, 4), np.uint8)
    init[2, 3] = 3
    out = spatial_diffuse(LabelMap(pred, 5), LabelMap(init, 5), np.zeros((3, 4), int))
    assert (out.data == 3).sum() == 10 and (out.data[0, :2] == 0).all()


def test_no_seed_superpixel_stays_empty():
    pred = np.full((2, 2), 1, np.uint8)
    out = spatial_diffuse(LabelMap(pred, 1), LabelMap(np.zeros((2, 2), np.uint8), 1), np.zeros((2, 2), int))
    assert out.labeled_count() == 0


def test_two_seed_classes_diffuse_both():
    pred = np.array([[2, 7, 9, 2], [7, 9, 2, 7]], np.uint8)
    init = np.zeros_like(pred)
    init[0, 0], init[0, 1] = 2, 7
    out = spatial_diffuse(LabelMap(pred, 9), LabelMap(init, 9), np.zeros(pred.shape, int))
    np.testing.assert_array_equal(out.data, np.where(pred == 9, 0, pred))


def test_conflicting_seed_keeps_its_label():
    pred = np.array([[1, 1]], np.uint8)
    init = np.array([[2, 0]], np.uint8)
    assert seed_conflicts(LabelMap(pred, 2), LabelMap(init, 2)) == 1
    out = spatial_diffuse(LabelMap(pred, 2), LabelMap(init, 2), np.zeros((1, 2), int))
    assert out.data.tolist() == [[2, 0]]


def test_shape_mismatch():
    with pytest.raises(ValueError):
        spatial_diffuse(LabelMap(np.zeros((2, 2), np.uint8), 1), LabelMap(np.zeros((2, 3), np.uint8), 1),
                        np.zeros((2, 2), int))


def test_accepts_superpixel_map():
    a = np.array([[0, 0, 1, 1]])
    pred = np.array([[1, 1, 2, 2]], np.uint8)
    init = np.array([[1, 0, 0, 0]], np.uint8)
    out = spatial_diffuse(LabelMap(pred, 2), LabelMap(init, 2), from_assignment(a))
    assert out.data.tolist() == [[1, 1, 0, 0]]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_matches_brute_force_and_invariants(seed):
    r = np.random.default_rng(seed)
    h, w = int(r.integers(1, 20)), int(r.integers(1, 20))
    a = random_partition(r, h, w, int(r.integers(1, 12)))
    pred = r.integers(1, 5, (h, w)).astype(np.uint8)
    init = np.where(r.random((h, w)) < 0.1, pred, 0).astype(np.uint8)
    out = spatial_diffuse(LabelMap(pred, 4), LabelMap(init, 4), a).data
    np.testing.assert_array_equal(out, brute_spatial_diffuse(pred, init, a))
    assert (out[init != 0] == init[init != 0]).all()
    assert ((out == 0) | (out == pred)).all()


def test_locality(rng):
    a = random_partition(rng, 16, 16, 8)
    pred = rng.integers(1, 4, (16, 16)).astype(np.uint8)
    init = np.where(rng.random((16, 16)) < 0.1, pred, 0).astype(np.uint8)
    base = spatial_diffuse(LabelMap(pred, 3), LabelMap(init, 3), a).data
    inside = a == a[0, 0]
    pred2 = np.where(inside, pred, rng.integers(1, 4, pred.shape)).astype(np.uint8)
    init2 = np.where(inside, init, np.where(rng.random(pred.shape) < 0.2, pred2, 0)).astype(np.uint8)
    moved = spatial_diffuse(LabelMap(pred2, 3), LabelMap(init2, 3), a).data
    np.testing.assert_array_equal(base[inside], moved[inside])
