import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from wmoe import oracles
from wmoe.metrics import (MetricsReport, auroc, average_precision, compute_report, f1_max, pro,
                          trapezoid_to, write_metrics_csv)

scored = st.integers(2, 30).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 8).map(float) | st.floats(-3, 3), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n)))


@settings(max_examples=200)
@given(scored)
def test_rank_metrics_match_brute_force(case):
    s, y = np.array(case[0]), np.array(case[1])
    if y.min() == y.max():
        assert auroc(s, y) is None
        return
    assert_allclose(auroc(s, y), oracles.auroc_pairs(s, y), atol=1e-9)
    assert_allclose(average_precision(s, y), oracles.ap_thresholds(s, y), atol=1e-9)
    assert_allclose(f1_max(s, y), oracles.f1_thresholds(s, y), atol=1e-9)


@given(scored)
def test_monotone_transform_invariance(case):
    s, y = np.array(case[0]), np.array(case[1])
    t = s ** 3 + s
    for fn in (auroc, average_precision, f1_max):
        assert fn(s, y) == fn(t, y)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=30, unique=True), st.data())
def test_auroc_flip_sums_to_one(vals, data):
    y = np.array(data.draw(st.lists(st.integers(0, 1), min_size=len(vals), max_size=len(vals))))
    if y.min() == y.max():
        return
    s = np.array(vals)
    assert_allclose(auroc(s, y) + auroc(-s, y), 1.0, atol=1e-12)


def test_hand_values():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auroc([0.5, 0.5], [0, 1]) == 0.5
    assert_allclose(average_precision([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]), (1 + 2 / 3) / 2)
    assert f1_max([0.9, 0.1], [1, 0]) == 1.0


def test_single_class_is_absent():
    assert average_precision([0.1, 0.2], [0, 0]) is None
    assert f1_max([0.1, 0.2], [0, 0]) is None
    assert pro([np.zeros((3, 3))], [np.zeros((3, 3))]) is None
    rep = compute_report([0.1, 0.2], [0, 0], np.zeros((2, 4, 4)), np.zeros((2, 4, 4)))
    assert rep.image_auroc is None and rep.pixel_pro is None


def test_pro_perfect_map_is_one():
    mask = np.zeros((8, 8))
    mask[2:4, 2:4] = 1
    assert_allclose(pro([mask.copy()], [mask]), 1.0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_pro_matches_exact_oracle(seed):
    rng = np.random.default_rng(seed)
    maps, masks = [], []
    for _ in range(int(rng.integers(1, 3))):
        h, w = rng.integers(4, 10, size=2)
        m = np.zeros((h, w))
        y0, x0 = rng.integers(0, h - 1), rng.integers(0, w - 1)
        m[y0:y0 + 2, x0:x0 + 2] = 1
        maps.append(np.round(rng.random((h, w)) * 20) / 20)
        masks.append(m)
    assert_allclose(pro(maps, masks, max_thresholds=None), oracles.pro_exact(maps, masks), atol=1e-9)


def test_trapezoid_interpolates_at_cap():
    assert_allclose(trapezoid_to(np.array([0.0, 1.0]), np.array([0.0, 1.0]), 0.5), 0.125)


def test_report_order_and_csv(tmp_path):
    assert MetricsReport.METRICS == ("image_auroc", "image_f1max", "image_ap",
                                    "pixel_auroc", "pixel_pro", "pixel_ap")
    rng = np.random.default_rng(0)
    masks = np.zeros((4, 8, 8))
    masks[1, 2:5, 2:5] = 1
    masks[3, 0:2, 5:8] = 1
    rep = compute_report(rng.random(4), [0, 1, 0, 1], rng.random((4, 8, 8)), masks)
    again = compute_report(rng.random(4) * 0 + rep.image_auroc, [0, 1, 0, 1], masks, masks)
    assert again.pixel_auroc == 1.0
    write_metrics_csv([("eval", "grating", rep)], tmp_path / "m.csv")
    header = (tmp_path / "m.csv").read_text().splitlines()[0].split(",")
    assert header[:8] == ["split", "family", *MetricsReport.METRICS]


def test_length_mismatch():
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1])
