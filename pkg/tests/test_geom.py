import numpy as np
import pytest

from pointmixer import geom

import oracles


def random_cloud(rng, n):
    return rng.uniform(-1.0, 1.0, (n, 3))


# -- knn ---------------------------------------------------------------------


def test_knn_single_point_is_its_own_neighbor():
    pts = np.array([[0.0, 0.0, 0.0]])
    m = geom.knn(pts, pts, 1)
    assert m.indices.tolist() == [[0]]


def test_knn_two_nearest_on_line():
    src = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
    m = geom.knn(src, np.array([[0.0, 0, 0]]), 2)
    assert m.indices.tolist() == [[0, 1]]


def test_knn_tie_broken_by_ascending_index():
    src = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0]])
    m = geom.knn(src, np.array([[0.0, 0, 0]]), 2)
    # indices 1 and 2 tie at distance 1; the smaller index wins
    assert m.indices.tolist() == [[0, 1]]


def test_knn_rejects_bad_k_and_empty():
    pts = np.zeros((3, 3))
    with pytest.raises(ValueError):
        geom.knn(pts, pts, 4)
    with pytest.raises(ValueError):
        geom.knn(pts, pts, 0)
    with pytest.raises(ValueError):
        geom.knn(np.zeros((0, 3)), pts, 1)


@pytest.mark.parametrize("seed", range(5))
def test_knn_matches_bruteforce_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 200))
    k = int(rng.integers(1, n + 1))
    src = random_cloud(rng, n)
    qry = random_cloud(rng, int(rng.integers(1, 64)))
    m = geom.knn(src, qry, k)
    assert np.array_equal(m.indices, oracles.knn_rows(src, qry, k))


@pytest.mark.parametrize("seed", range(3))
def test_knn_tie_rule_on_integer_grid(seed):
    rng = np.random.default_rng(100 + seed)
    src = rng.integers(0, 3, (40, 3)).astype(float)
    qry = rng.integers(0, 3, (10, 3)).astype(float)
    m = geom.knn(src, qry, 7)
    assert np.array_equal(m.indices, oracles.knn_rows_slow(src, qry, 7))


def test_knn_self_neighbor_when_queries_are_sources():
    rng = np.random.default_rng(7)
    pts = random_cloud(rng, 50)
    for k in (1, 4, 16):
        m = geom.knn(pts, pts, k)
        assert all(i in m.indices[i] for i in range(50))


def test_knn_deterministic_and_counted():
    rng = np.random.default_rng(3)
    pts = random_cloud(rng, 64)
    before = geom.knn_call_count()
    a = geom.knn(pts, pts, 8)
    b = geom.knn(pts, pts, 8)
    assert np.array_equal(a.indices, b.indices)
    assert geom.knn_call_count() == before + 2


# -- invert_map ----------------------------------------------------------------


def test_invert_identity_map():
    m = geom.NeighborMap(np.array([[0], [1]]), source_count=2)
    inv = geom.invert_map(m)
    assert inv.row(0).tolist() == [0]
    assert inv.row(1).tolist() == [1]


def test_invert_full_overlap():
    m = geom.NeighborMap(np.array([[0, 1], [0, 1]]), source_count=2)
    inv = geom.invert_map(m)
    assert inv.row(0).tolist() == [0, 1]
    assert inv.row(1).tolist() == [0, 1]


def test_invert_with_empty_row():
    m = geom.NeighborMap(np.array([[1], [1]]), source_count=2)
    inv = geom.invert_map(m)
    assert inv.row(0).tolist() == []
    assert inv.row(1).tolist() == [0, 1]


@pytest.mark.parametrize("seed", range(5))
def test_invert_matches_membership_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 128))
    k = int(rng.integers(1, n + 1))
    m = geom.knn(random_cloud(rng, n), random_cloud(rng, n), k)
    inv = geom.invert_map(m)
    expected = oracles.invert_rows(m.indices, n)
    for i in range(n):
        assert inv.row(i).tolist() == expected[i]
    assert inv.offsets[-1] == n * k  # total entries = N x k


def test_invert_roundtrip_reproduces_membership():
    rng = np.random.default_rng(11)
    pts = random_cloud(rng, 60)
    m = geom.knn(pts, pts, 5)
    inv = geom.invert_map(m)
    for i in range(60):
        for j in inv.row(i):
            assert i in m.indices[j]
    for j in range(60):
        for i in m.indices[j]:
            assert j in inv.row(i)


def test_same_level_inverse_rows_nonempty():
    rng = np.random.default_rng(13)
    pts = random_cloud(rng, 80)
    inv = geom.invert_map(geom.knn(pts, pts, 6))
    assert np.all(inv.row_lengths() >= 1)


# -- fps -----------------------------------------------------------------------


def test_fps_singleton():
    pts = np.random.default_rng(0).uniform(-1, 1, (5, 3))
    assert geom.fps(pts, 1, start=2).tolist() == [2]


def test_fps_line_extremes():
    pts = np.array([[float(i), 0, 0] for i in range(10)])
    assert geom.fps(pts, 2, start=0).tolist() == [0, 9]
    # points 4 and 5 tie at min-distance; the smaller index wins
    assert geom.fps(pts, 3, start=0).tolist() == [0, 9, 4]


def test_fps_range_checks():
    pts = np.zeros((4, 3))
    with pytest.raises(ValueError):
        geom.fps(pts, 0)
    with pytest.raises(ValueError):
        geom.fps(pts, 5)
    with pytest.raises(ValueError):
        geom.fps(pts, 2, start=4)


def test_fps_full_selection_is_permutation():
    rng = np.random.default_rng(21)
    pts = random_cloud(rng, 40)
    sel = geom.fps(pts, 40, start=3)
    assert sorted(sel.tolist()) == list(range(40))


@pytest.mark.parametrize("seed", range(5))
def test_fps_matches_greedy_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 100))
    m = int(rng.integers(1, n + 1))
    start = int(rng.integers(0, n))
    pts = random_cloud(rng, n)
    assert np.array_equal(geom.fps(pts, m, start), oracles.fps_indices(pts, m, start))


# -- relative positions ----------------------------------------------------------


def test_relative_positions_self_and_direct():
    pts = np.array([[1.0, 0, 0], [0.0, 0, 0]])
    m = geom.NeighborMap(np.array([[0, 1], [1, 0]]), source_count=2)
    rel = geom.relative_positions(pts, pts, m)
    assert np.allclose(rel[0, 0], [0, 0, 0])
    assert np.allclose(rel[0, 1], [1, 0, 0])


def test_relative_positions_matches_gather_subtract():
    rng = np.random.default_rng(5)
    pts = random_cloud(rng, 8)
    m = geom.knn(pts, pts, 3)
    rel = geom.relative_positions(pts, pts, m)
    assert np.array_equal(rel, oracles.relative_positions(pts, pts, m.indices))


def test_relative_positions_index_check():
    pts = np.zeros((2, 3))
    bad = geom.NeighborMap(np.array([[5], [0]]), source_count=2)
    with pytest.raises(IndexError):
        geom.relative_positions(pts, pts, bad)


# -- hierarchy -------------------------------------------------------------------


def test_hierarchy_degenerate_identity():
    rng = np.random.default_rng(2)
    pts = random_cloud(rng, 12)
    h = geom.build_hierarchy(pts, [1.0], k=3)
    assert len(h.levels) == 1
    lv = h.levels[0]
    assert np.array_equal(lv.subset, np.arange(12))
    assert all(i in lv.down_map.indices[i] for i in range(12))


def test_hierarchy_quarter_sampling():
    rng = np.random.default_rng(4)
    pts = random_cloud(rng, 16)
    h = geom.build_hierarchy(pts, [0.25], k=4)
    assert [lv.n for lv in h.levels] == [16, 4]
    lv = h.levels[1]
    assert lv.down_map.indices.shape == (4, 4)
    assert lv.down_inverse.offsets[-1] == 16
    sampled = geom.fps(pts, 4, start=0)
    assert np.array_equal(lv.subset, sampled)
    assert np.array_equal(lv.down_map.indices, oracles.knn_rows(pts, pts[sampled], 4))


def test_hierarchy_collinear_example():
    pts = np.array([[float(i), 0, 0] for i in range(10)])
    h = geom.build_hierarchy(pts, [0.2], k=2, start=0)
    lv = h.levels[1]
    assert sorted(lv.subset.tolist()) == [0, 9]
    assert np.array_equal(lv.down_map.indices, oracles.knn_rows(pts, pts[lv.subset], 2))
    expected_inv = oracles.invert_rows(lv.down_map.indices, 10)
    for i in range(10):
        assert lv.down_inverse.row(i).tolist() == expected_inv[i]


def test_hierarchy_fallback_marks_uncovered_points():
    pts = np.array([[float(i), 0, 0] for i in range(6)])
    h = geom.build_hierarchy(pts, [1.0 / 6.0], k=1, start=0)
    lv = h.levels[1]
    assert lv.subset.tolist() == [0]
    # only point 0 is covered; the rest fall back to the single sample
    assert lv.up_fallback[0] == -1
    assert np.all(lv.up_fallback[1:] == 0)


def test_hierarchy_rejects_bad_ratios_and_k():
    pts = np.random.default_rng(0).uniform(-1, 1, (10, 3))
    with pytest.raises(ValueError):
        geom.build_hierarchy(pts, [0.0], k=2)
    with pytest.raises(ValueError):
        geom.build_hierarchy(pts, [0.5, 1.0], k=2)
    with pytest.raises(ValueError):
        geom.build_hierarchy(pts, [0.2], k=11)


def test_hierarchy_deterministic():
    rng = np.random.default_rng(8)
    pts = random_cloud(rng, 32)
    h1 = geom.build_hierarchy(pts, [1.0, 0.5, 0.5], k=4)
    h2 = geom.build_hierarchy(pts, [1.0, 0.5, 0.5], k=4)
    for a, b in zip(h1.levels, h2.levels):
        assert np.array_equal(a.subset, b.subset)
        assert np.array_equal(a.down_map.indices, b.down_map.indices)
        assert np.array_equal(a.down_inverse.indices, b.down_inverse.indices)


def test_lexmin_index_is_permutation_invariant():
    rng = np.random.default_rng(9)
    pts = random_cloud(rng, 30)
    i = geom.lexmin_index(pts)
    perm = rng.permutation(30)
    j = geom.lexmin_index(pts[perm])
    assert np.array_equal(pts[perm][j], pts[i])


def test_point_cloud_validation():
    good = geom.PointCloud(np.zeros((3, 3)), np.zeros((3, 2)), labels=np.array([0, 1, 1]))
    good.validate(num_classes=2)
    with pytest.raises(ValueError):
        geom.PointCloud(np.zeros((0, 3)), np.zeros((0, 0))).validate()
    with pytest.raises(ValueError):
        geom.PointCloud(np.array([[np.inf, 0, 0]]), np.zeros((1, 0))).validate()
    with pytest.raises(ValueError):
        geom.PointCloud(np.zeros((2, 3)), np.zeros((3, 1))).validate()
    with pytest.raises(ValueError):
        good.validate(num_classes=1)
