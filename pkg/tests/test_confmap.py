import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shr.confmap import (
    MAP_SIZE,
    OCCLUSION_LEVELS,
    argmax_subpixel,
    blur,
    load_scene,
    random_pose,
    render_blob,
    render_occluded,
    sample_bilinear,
    save_scene,
    synth_scene,
)
from shr.errors import InvalidOcclusionFraction
from shr.geometry import N_FP, project
from shr.visibility import extract_features

from conftest import frontal_pose


def test_blob_values():
    g = render_blob((40, 30), 2.0, 0.8)
    assert g[30, 40] == pytest.approx(0.8)
    assert g[30, 42] == pytest.approx(0.8 * np.exp(-0.5))
    assert g[30, 40 + 5] == pytest.approx(g[30, 40 - 5])


def test_occluded_map_weaker_and_flatter():
    occ = render_occluded((40, 40), seed=4)
    vis = render_blob((40, 40), 2.0, 1.0)
    assert occ.max() < vis.max()
    assert extract_features(occ).f1 > extract_features(vis).f1
    assert np.array_equal(occ, render_occluded((40, 40), seed=4))


def test_sample_bilinear_rules():
    g = np.zeros((MAP_SIZE, MAP_SIZE))
    g[10, 11] = 1.0
    g[3, 7] = 0.25
    assert sample_bilinear(g, (7, 3)) == 0.25
    assert sample_bilinear(g, (10.5, 10)) == pytest.approx(0.5)
    assert sample_bilinear(g, (-5, 40)) == 0.0
    assert sample_bilinear(g, (79.01, 40)) == 0.0


@settings(max_examples=50, deadline=None)
@given(x=st.floats(0, 79), y=st.floats(0, 79))
def test_sample_bilinear_continuous(x, y):
    g = render_blob((33.3, 41.7), 3.0)
    a = sample_bilinear(g, (x, y))
    b = sample_bilinear(g, (min(x + 1e-7, 79), y))
    assert abs(a - b) < 1e-6
    ix, iy = int(round(x)), int(round(y))
    assert sample_bilinear(g, (ix, iy)) == pytest.approx(g[iy, ix])


def test_blur_properties():
    c = np.full((MAP_SIZE, MAP_SIZE), 0.37)
    np.testing.assert_allclose(blur(c, 1.5), c, atol=1e-9)
    g = render_blob((40, 40), 2.0)
    b = blur(g, 1.5)
    assert b.max() <= g.max()
    assert abs(b.sum() - g.sum()) / g.sum() < 1e-3
    sym = render_blob((39.5, 30), 2.0) + render_blob((20, 50), 3.0, 0.4) + render_blob((59, 50), 3.0, 0.4)
    bs = blur(sym, 1.5)
    np.testing.assert_allclose(bs, bs[:, ::-1], atol=1e-9)


def test_clean_frontal_scene(model):
    P = frontal_pose()
    sc = synth_scene(model, P, 0.0, seed=1)
    assert sc.gt_visibility.all()
    fp_map = sc.to_map(project(P, model.fp_points))
    for k in range(N_FP):
        assert np.linalg.norm(argmax_subpixel(sc.stack.maps_a[k]) - fp_map[k]) < 0.5


def test_occluder_area(model):
    sc = synth_scene(model, frontal_pose(), 0.25, seed=2)
    (_, _, w, h), = sc.occlusion_patches
    assert abs(w * h / sc.roi[2] ** 2 - 0.25) < 0.01


def test_far_side_jaw_hidden_at_yaw_60(model):
    P = frontal_pose(yaw=60.0)
    sc = synth_scene(model, P, 0.0, seed=5)
    nz = (model.normals[model.fp_indices] @ P.rotation.T)[:, 2]
    assert (nz <= 0).any()
    assert not sc.gt_visibility[nz <= 0].any()
    assert sc.gt_visibility[nz > 0].all()


def test_invalid_fraction(model):
    with pytest.raises(InvalidOcclusionFraction):
        synth_scene(model, frontal_pose(), 0.3, seed=1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), level=st.sampled_from(OCCLUSION_LEVELS))
def test_scene_invariants(model, seed, level):
    sc = synth_scene(model, random_pose(np.random.default_rng(seed)), level, seed)
    assert sc.stack.maps_a.shape == (19, 80, 80) and sc.stack.maps_b.shape == (21, 80, 80)
    assert sc.stack.maps_a.min() >= 0 and sc.stack.maps_a.max() <= 1
    assert sc.stack.maps_b.min() >= 0 and sc.stack.maps_b.max() <= 1
    assert sc.gt_landmarks2d.shape == (38, 2)
    assert len(sc.occlusion_patches) == (level > 0)


def test_scene_bundle_roundtrip(tmp_path, model):
    sc = synth_scene(model, frontal_pose(yaw=20), 0.09, seed=8)
    save_scene(sc, tmp_path / "s")
    back = load_scene(tmp_path / "s")
    assert np.array_equal(back.stack.maps_a, sc.stack.maps_a)
    assert np.array_equal(back.gt_visibility, sc.gt_visibility)
    np.testing.assert_array_equal(back.gt_landmarks2d, sc.gt_landmarks2d)
    assert back.roi == sc.roi and back.seed == sc.seed
    assert (tmp_path / "s" / "maps_a.bin").stat().st_size == 19 * 80 * 80 * 4
