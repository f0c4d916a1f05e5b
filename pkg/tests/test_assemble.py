import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transvert.assemble import (
    AssemblyWarning,
    fuse_centroids,
    read_centroid_csv,
    stack_spine,
    write_centroid_csv,
)
from transvert.drr import ConeBeamGeometry, project_point
from transvert.geometry import Volume


def pair(iso=(0.0, 0.0, 0.0)):
    return ConeBeamGeometry("sagittal", isocenter_mm=iso), ConeBeamGeometry("coronal", isocenter_mm=iso)


def test_detector_centres_fuse_to_isocentre():
    gs, gc = pair((3.0, -4.0, 100.0))
    np.testing.assert_allclose(fuse_centroids((0, 0), (0, 0), gs, gc), [3, -4, 100], atol=1e-12)


def test_sagittal_offset_is_demagnified():
    gs, gc = pair()
    np.testing.assert_allclose(fuse_centroids((12, 0), (0, 0), gs, gc), [0, 10, 0], atol=1e-12)


@settings(max_examples=50)
@given(p=st.tuples(*(st.floats(-60, 60) for _ in range(3))))
def test_project_then_fuse_is_identity(p):
    gs, gc = pair((1.0, 2.0, -5.0))
    p = np.array(p) + gs.isocenter_mm
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        back = fuse_centroids(project_point(gs, p), project_point(gc, p), gs, gc)
    assert np.max(np.abs(back - p)) < 1e-6


def test_inconsistent_z_warns_and_keeps_sagittal():
    gs, gc = pair()
    with pytest.warns(AssemblyWarning):
        out = fuse_centroids((0, 12), (0, 24), gs, gc)
    assert out[2] == pytest.approx(10.0)


def test_mismatched_geometries_rejected():
    gs, gc = pair()
    with pytest.raises(ValueError):
        fuse_centroids((0, 0), (0, 0), gc, gs)
    with pytest.raises(ValueError):
        fuse_centroids((0, 0), (0, 0), gs, ConeBeamGeometry("coronal", isocenter_mm=(0, 0, 1)))


def block(lo=24, hi=40):
    m = np.zeros((64, 64, 64), np.uint8)
    m[lo:hi, lo:hi, lo:hi] = 1
    return m


def test_single_prediction_keeps_voxel_count():
    m = block()
    sm = stack_spine([(m, 9)], [(64.0, 64.0, 64.0)], (128, 128, 128))
    assert np.count_nonzero(sm.canvas.data) == np.count_nonzero(m)
    assert set(np.unique(sm.canvas.data)) == {0, 9}
    fg = np.argwhere(sm.canvas.data)
    np.testing.assert_allclose(fg.mean(axis=0), [64, 64, 64], atol=0.5)


def test_disjoint_placements_add_counts():
    a, b = block(), block(20, 30)
    sm = stack_spine([(a, 8), (b, 9)], [(40.0, 40.0, 40.0), (100.0, 100.0, 100.0)], (140, 140, 140))
    c = sm.canvas.data
    assert np.count_nonzero(c == 8) == np.count_nonzero(a)
    assert np.count_nonzero(c == 9) == np.count_nonzero(b)


def test_full_overlap_with_equal_distances_goes_to_lower_label():
    m = block()
    c = (64.0, 64.0, 64.0)
    sm = stack_spine([(m, 12), (m, 10)], [c, c], (128, 128, 128))
    assert set(np.unique(sm.canvas.data)) == {0, 10}


def test_overlap_resolved_by_nearer_centroid():
    m = block(16, 48)
    sm = stack_spine([(m, 8), (m, 9)], [(64.0, 64.0, 50.0), (64.0, 64.0, 70.0)], (128, 128, 128))
    c = sm.canvas.data
    assert c[64, 64, 55] == 8 and c[64, 64, 65] == 9


def test_placement_outside_canvas_is_clipped_with_warning():
    m = block()
    with pytest.warns(AssemblyWarning):
        sm = stack_spine([(m, 8)], [(2.0, 32.0, 32.0)], (64, 64, 64))
    assert 0 < np.count_nonzero(sm.canvas.data) < np.count_nonzero(m)


def test_spacing_and_origin_respected():
    m = block()
    sm = stack_spine([(Volume(m), 8)], [(10.0, 20.0, 30.0)], (64, 64, 64), spacing=(2, 2, 2), origin_mm=(-54, -44, -34))
    fg = np.argwhere(sm.canvas.data)
    np.testing.assert_allclose(fg.mean(axis=0), [32, 32, 32], atol=0.5)
    assert sm.canvas.spacing_mm == (2.0, 2.0, 2.0)


@settings(max_examples=20)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 4))
def test_stacking_never_invents_labels(seed, n):
    rng = np.random.default_rng(seed)
    labels = rng.choice(np.arange(8, 25), n, replace=False)
    preds = [(block(*sorted(rng.integers(10, 50, 2) + [0, 4])), int(lab)) for lab in labels]
    cents = [tuple(rng.uniform(20, 100, 3)) for _ in labels]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AssemblyWarning)
        sm = stack_spine(preds, cents, (120, 120, 120))
    assert set(np.unique(sm.canvas.data)) <= {0, *map(int, labels)}


def test_bad_inputs_rejected():
    m = block()
    with pytest.raises(ValueError):
        stack_spine([(m, 8)], [], (64, 64, 64))
    with pytest.raises(ValueError):
        stack_spine([(m, 8), (m, 8)], [(0, 0, 0)] * 2, (64, 64, 64))
    with pytest.raises(ValueError):
        stack_spine([(m, 30)], [(0, 0, 0)], (64, 64, 64))


def test_centroid_csv_roundtrip(tmp_path):
    placed = [(8, (1.5, -2.25, 3.0)), (9, (0.1, 0.2, 0.3))]
    path = write_centroid_csv(tmp_path / "c.csv", placed)
    assert read_centroid_csv(path) == dict(placed)
