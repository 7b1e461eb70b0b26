import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bfs_regions, brute_force_pro, pairwise_auroc

from dskd.metrics import (
    UndefinedMetricError,
    auroc,
    connected_components,
    pixel_auroc,
    pro,
    write_report,
)


# --- auroc --------------------------------------------------------------------


def test_auroc_examples():
    assert auroc([0.9, 0.8], [1, 0]) == 1.0
    assert auroc([0.8, 0.9], [1, 0]) == 0.0
    assert auroc([0.5, 0.5], [1, 0]) == 0.5


def test_auroc_single_class():
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])


def test_auroc_matches_pairwise_oracle():
    rng = np.random.default_rng(0)
    scores = np.round(rng.random(200), 2)  # rounding forces ties
    labels = rng.integers(0, 2, 200)
    assert abs(auroc(scores, labels) - pairwise_auroc(scores, labels)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=60, unique=True), st.randoms())
def test_auroc_complement(scores, rnd):
    labels = [rnd.randint(0, 1) for _ in scores]
    labels[0], labels[1] = 0, 1
    flipped = [1 - y for y in labels]
    assert auroc(scores, labels) + auroc(scores, flipped) == pytest.approx(1.0, abs=1e-12)


def test_auroc_monotone_invariance():
    rng = np.random.default_rng(1)
    s = rng.normal(size=150)
    y = rng.integers(0, 2, 150)
    base = auroc(s, y)
    assert abs(auroc(np.exp(s), y) - base) < 1e-9
    assert abs(auroc(3.0 * s - 7.0, y) - base) < 1e-9


# --- pixel auroc ----------------------------------------------------------------


def test_pixel_auroc_examples():
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:5, 3:6] = True
    assert pixel_auroc([(mask.astype(float), mask)]) == 1.0
    assert pixel_auroc([(1.0 - mask, mask)]) == 0.0
    assert pixel_auroc([(np.full((8, 8), 0.3), mask)]) == 0.5


def test_pixel_auroc_pools_exactly():
    rng = np.random.default_rng(2)
    pairs = [(rng.random((6, 6)), rng.random((6, 6)) > 0.7) for _ in range(4)]
    flat_s = np.concatenate([m.ravel() for m, _ in pairs])
    flat_y = np.concatenate([k.ravel() for _, k in pairs])
    assert pixel_auroc(pairs) == auroc(flat_s, flat_y)


# --- connected components --------------------------------------------------------


def test_components_examples():
    assert connected_components(np.zeros((4, 4), bool)) == []
    full = connected_components(np.ones((3, 5), bool))
    assert len(full) == 1 and len(full[0]) == 15
    diag = np.zeros((3, 3), bool)
    diag[0, 0] = diag[1, 1] = True
    assert connected_components(diag) == [{(0, 0), (1, 1)}]


def test_components_partition_support():
    rng = np.random.default_rng(4)
    mask = rng.random((20, 20)) > 0.6
    comps = connected_components(mask)
    union = set().union(*comps)
    assert union == set(zip(*np.nonzero(mask)))
    assert sum(len(c) for c in comps) == len(union)
    assert sorted(map(sorted, comps)) == sorted(map(sorted, bfs_regions(mask)))


# --- pro ------------------------------------------------------------------------


def test_pro_perfect():
    mask = np.zeros((8, 8), bool)
    mask[1:4, 1:4] = True
    assert pro([(mask.astype(float), mask)]) == pytest.approx(1.0)


def test_pro_constant_map_is_linear_tie_segment():
    # a constant map jumps straight from (0, 0) to (1, 1); trapezoidal
    # integration over that tie segment up to 0.3 gives 0.3^2 / 2 / 0.3
    mask = np.zeros((8, 8), bool)
    mask[2:5, 2:5] = True
    assert pro([(np.zeros((8, 8)), mask)]) == pytest.approx(0.15, abs=1e-12)
    assert brute_force_pro([(np.zeros((8, 8)), mask)]) == pytest.approx(0.15, abs=1e-12)


def test_pro_two_regions_handcrafted():
    rng = np.random.default_rng(5)
    mask = np.zeros((8, 8), bool)
    mask[0:2, 0:2] = True  # 4 px region
    mask[4:8, 3:8] = True  # 20 px region
    amap = rng.random((8, 8)) + 0.5 * mask
    assert abs(pro([(amap, mask)]) - brute_force_pro([(amap, mask)])) < 1e-6


def test_pro_matches_oracle_with_ties():
    rng = np.random.default_rng(6)
    mask = np.zeros((10, 10), bool)
    mask[1:3, 1:7] = True
    mask[6:9, 6:9] = True
    amap = np.round(rng.random((10, 10)) + 0.3 * mask, 1)
    assert abs(pro([(amap, mask)]) - brute_force_pro([(amap, mask)])) < 1e-6


def test_pro_needs_regions():
    with pytest.raises(UndefinedMetricError):
        pro([(np.random.rand(4, 4), np.zeros((4, 4), bool))])


def test_pro_bounds_and_monotone_in_limit():
    rng = np.random.default_rng(7)
    pairs = []
    for _ in range(3):
        mask = rng.random((12, 12)) > 0.85
        pairs.append((rng.random((12, 12)) + 0.4 * mask, mask))
    values = [pro(pairs, limit) for limit in (0.05, 0.1, 0.2, 0.3, 0.5, 1.0)]
    assert all(0.0 <= v <= 1.0 for v in values)
    assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))


def test_pro_monotone_invariance():
    rng = np.random.default_rng(8)
    mask = rng.random((16, 16)) > 0.8
    amap = rng.normal(size=(16, 16)) + mask
    base = pro([(amap, mask)])
    assert abs(pro([(np.exp(amap), mask)]) - base) < 1e-9
    assert abs(pro([(2.5 * amap + 1.0, mask)]) - base) < 1e-9


def test_pro_quantile_sweep_close_to_exact():
    rng = np.random.default_rng(9)
    pairs = []
    for _ in range(4):
        mask = np.zeros((64, 64), bool)
        y, x = rng.integers(0, 48, 2)
        mask[y : y + 12, x : x + 10] = True
        pairs.append((rng.random((64, 64)) + 0.8 * mask, mask))
    assert abs(pro(pairs, num_thresholds=200) - pro(pairs)) < 0.01


def test_report_layout(tmp_path):
    path = tmp_path / "report.csv"
    write_report(path, [{"category": "bottle", "image_auroc": None, "pixel_auroc": 0.5, "pro": 0.25}])
    lines = path.read_text().splitlines()
    assert lines[0] == "category,image_auroc,pixel_auroc,pro"
    assert lines[1] == "bottle,undefined,0.500000,0.250000"
