import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spinemorph.landmarks import swap_left_right
from spinemorph.morphology import (
    MorphologyMaps, OutlineError, centroids, cobb_from_landmarks, dilate, fill_polygon, left_chain,
    rasterize_polyline, rasterize_segment, region_outline, right_chain, synthesize_maps, vertebra_midlines,
)
from spinemorph.synthetic import random_landmarks
from oracles import cobb_brute, inside_polygon, stacked_squares

SHAPE = (256, 128)


def similarity(points, angle_deg, scale, shift, flip):
    p = points.copy()
    if flip:
        p[:, 0] = -p[:, 0]
        p = swap_left_right(p)
    t = math.radians(angle_deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    return scale * p @ rot.T + shift


# --------------------------------------------------------------------------
# rasterization


def test_segment_endpoints_and_connectivity():
    rc = rasterize_segment((2, 3), (11, 7))
    assert tuple(rc[0]) == (3, 2) and tuple(rc[-1]) == (7, 11)
    steps = np.abs(np.diff(rc, axis=0))
    assert steps.max() == 1 and (steps.sum(axis=1) >= 1).all()


def test_fill_matches_point_in_polygon_oracle(rng):
    for _ in range(20):
        k = 7
        ang = np.sort(rng.uniform(0, 2 * np.pi, k))
        rad = rng.uniform(5, 14, k)
        poly = np.stack([20 + rad * np.cos(ang), 20 + rad * np.sin(ang)], axis=1)
        grid = fill_polygon(poly, (40, 40))
        yy, xx = np.mgrid[0:40, 0:40]
        centres = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(float)
        expected = inside_polygon(poly, centres).reshape(40, 40)
        # pixel centres exactly on an edge may go either way
        disagree = grid.astype(bool) != expected
        assert disagree.sum() <= 2


def test_stacked_squares_give_strip_and_vertical_line():
    pts = stacked_squares(side=10.0, gap=0.0, x0=60.0, y0=20.0)
    maps = synthesize_maps(pts, SHAPE, dilation_kernel=5)
    cols = np.flatnonzero(maps.centerline.any(axis=0))
    np.testing.assert_array_equal(cols, np.arange(58, 63))
    rows = np.flatnonzero(maps.region.any(axis=1))
    # half-open scanline rule: centres on the bottom edge are excluded
    assert rows[0] == 15 and rows[-1] == 20 + 16 * 10 + 5 - 1
    # solid rectangle: every covered row has the same span
    spans = {tuple(np.flatnonzero(r)) for r in maps.region[rows]}
    assert spans == {tuple(range(55, 66))}


def test_region_not_dilated_and_values_binary():
    pts = random_landmarks(np.random.default_rng(3), SHAPE)
    m1 = synthesize_maps(pts, SHAPE, 1)
    m9 = synthesize_maps(pts, SHAPE, 9)
    np.testing.assert_array_equal(m1.region, m9.region)
    for g in m9.stack():
        assert set(np.unique(g)) <= {0.0, 1.0}


def test_kernel_one_is_polyline_rasterization():
    pts = random_landmarks(np.random.default_rng(4), SHAPE)
    maps = synthesize_maps(pts, SHAPE, 1)
    np.testing.assert_array_equal(maps.centerline, rasterize_polyline(centroids(pts), SHAPE))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_centerline_inside_region_polygon(seed):
    pts = random_landmarks(np.random.default_rng(seed), SHAPE)
    line = rasterize_polyline(centroids(pts), SHAPE)
    rows, cols = np.nonzero(line)
    inside = inside_polygon(region_outline(pts), np.stack([cols, rows], axis=1).astype(float))
    assert inside.all()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_dilation_monotone_and_identity(seed):
    rng = np.random.default_rng(seed)
    grid = (rng.random((24, 24)) < 0.05).astype(np.uint8)
    np.testing.assert_array_equal(dilate(grid, 1), grid)
    counts = [dilate(grid, k).sum() for k in (1, 3, 5, 7)]
    assert counts == sorted(counts)


def test_even_kernel_rejected():
    with pytest.raises(ValueError):
        dilate(np.zeros((4, 4), np.uint8), 4)


def test_left_and_right_chains_disjoint():
    pts = random_landmarks(np.random.default_rng(9), SHAPE)
    left = rasterize_polyline(left_chain(pts), SHAPE)
    right = rasterize_polyline(right_chain(pts), SHAPE)
    assert not (left & right).any()


def test_self_intersection_names_vertebrae():
    pts = stacked_squares().reshape(17, 4, 2)
    pts[6, [1, 3], 0] = 40.0  # right corners of vertebra 6 pushed past the left chain
    with pytest.raises(OutlineError, match="vertebra 6"):
        synthesize_maps(pts.reshape(68, 2), SHAPE)


def test_synthesis_deterministic():
    pts = random_landmarks(np.random.default_rng(11), SHAPE)
    assert synthesize_maps(pts, SHAPE) == synthesize_maps(pts, SHAPE)


def test_maps_save_load_round_trip(tmp_path):
    maps = synthesize_maps(random_landmarks(np.random.default_rng(12), SHAPE), SHAPE)
    maps.save(tmp_path, "s1", 5, provenance="test")
    assert MorphologyMaps.load(tmp_path, "s1") == maps


# --------------------------------------------------------------------------
# midlines and Cobb angles


def test_axis_aligned_midline_direction():
    mids = vertebra_midlines(stacked_squares())
    assert [m.index for m in mids] == list(range(17))
    for m in mids:
        np.testing.assert_allclose(m.direction, (1.0, 0.0), atol=1e-15)


def test_rotated_midline_direction():
    mids = vertebra_midlines(stacked_squares(np.full(17, 7.0)))
    expected = (math.cos(math.radians(7)), math.sin(math.radians(7)))
    np.testing.assert_allclose(mids[3].direction, expected, atol=1e-9)


def test_straight_spine_zero_angles():
    a = cobb_from_landmarks(stacked_squares())
    assert (a.pt, a.mt, a.tl) == (0.0, 0.0, 0.0)


def test_linear_tilts_brute_force():
    tilts = np.linspace(10, -10, 17)
    pts = stacked_squares(tilts, gap=6.0)
    a = cobb_from_landmarks(pts)
    assert abs(a.mt - 20.0) < 1e-9
    # the arccos oracle itself is only good to about 1e-6 degrees near zero
    np.testing.assert_allclose([a.pt, a.mt, a.tl], cobb_brute(pts), atol=1e-5)


def test_similarity_example():
    pts = random_landmarks(np.random.default_rng(21), SHAPE)
    moved = similarity(pts, 13.0, 1.7, np.array([40.0, -25.0]), False)
    np.testing.assert_allclose(cobb_from_landmarks(moved).as_array(), cobb_from_landmarks(pts).as_array(),
                               atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_mt_dominates_and_matches_brute_force(seed):
    pts = random_landmarks(np.random.default_rng(seed), SHAPE, tilt_noise_deg=3.0)
    a = cobb_from_landmarks(pts)
    assert a.mt >= a.pt and a.mt >= a.tl
    np.testing.assert_allclose([a.pt, a.mt, a.tl], cobb_brute(pts), atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_synthetic_records_have_valid_outlines(seed):
    from spinemorph.synthetic import synthetic_dataset
    for rec in synthetic_dataset(4, seed=seed, shape=SHAPE):
        synthesize_maps(rec.landmarks, SHAPE)
