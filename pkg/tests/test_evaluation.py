import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import ConvexHull

from oracles import mesh_floyd
from sparsecorr.anchors import local_distortion
from sparsecorr.descriptors import assemble_stiffness
from sparsecorr.errors import BadIndexError, FragmentationError
from sparsecorr.evaluation import (
    ErrorReport,
    GroundTruth,
    cdf_svg,
    distortion_report,
    error_cdf,
    geodesic_error,
    read_columns,
    synth_pair,
)
from sparsecorr.geometry import TriMesh, geodesic_diameter
from sparsecorr.shapes import blob, fibonacci_sphere, grid_mesh


@pytest.fixture(scope="module")
def sphere200():
    u = fibonacci_sphere(200)
    return TriMesh(u, ConvexHull(u).simplices)


def test_error_zero_for_truth(small_blob):
    gt = GroundTruth(np.arange(300), 300)
    assert np.all(geodesic_error(np.arange(300), gt, small_blob) == 0)


def test_adjacent_target_error():
    m = grid_mesh(4, 4)
    gt = GroundTruth(np.arange(16), 16)
    phi = np.arange(16)
    phi[0] = 1
    diam = geodesic_diameter(m, 16)
    e = geodesic_error(phi, gt, m, diameter=diam)
    assert e[0] == 1.0 / diam


def test_random_map_against_all_pairs(sphere200):
    rng = np.random.default_rng(0)
    phi = rng.integers(0, 200, 200)
    gt = GroundTruth(np.arange(200), 200)
    D = mesh_floyd(sphere200)
    e = geodesic_error(phi, gt, sphere200, diameter=D.max())
    ref = D[np.arange(200), phi] / D.max()
    assert abs(e.mean() - ref.mean()) < 1e-12


def test_error_nan_and_inf(small_blob):
    gt = GroundTruth(np.r_[np.arange(299), -1], 300)
    phi = np.arange(300)
    phi[5] = -1
    e = geodesic_error(phi, gt, small_blob)
    assert np.isnan(e[299]) and np.isinf(e[5])
    rep = ErrorReport.from_errors(e)
    assert rep.n_unreachable == 1


def test_error_bad_index(small_blob):
    gt = GroundTruth(np.arange(300), 300)
    with pytest.raises(BadIndexError):
        geodesic_error(np.full(300, 400), gt, small_blob)
    with pytest.raises(BadIndexError):
        GroundTruth([0, 5], 3)


def test_cdf_examples():
    t, c = error_cdf(np.zeros(10))
    assert np.all(c == 1.0)
    t, c = error_cdf(np.full(10, 0.1), [0.0])
    assert c[0] == 0.0
    e = np.random.default_rng(1).uniform(0, 1, 20000)
    _, c = error_cdf(e, [0.5])
    assert abs(c[0] - 0.5) < 0.02
    _, c = error_cdf([np.inf, 0.0, np.nan], [0.0, 1e9])
    assert np.allclose(c, [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=60), st.randoms(use_true_random=False))
def test_cdf_monotone_and_permutation_invariant(errors, rnd):
    t, c = error_cdf(errors)
    assert np.all(np.diff(c) >= 0)
    shuffled = list(errors)
    rnd.shuffle(shuffled)
    assert np.array_equal(error_cdf(shuffled)[1], c)
    assert error_cdf(errors, [1.0])[1][0] == 1.0


def test_synth_identity_is_bit_identical(small_blob):
    m2, gt = synth_pair(small_blob)
    assert np.array_equal(m2.vertices, small_blob.vertices)
    assert np.array_equal(m2.triangles, small_blob.triangles)
    assert np.array_equal(gt.targets, np.arange(300))


def test_synth_rotation_permutation_conjugates_stiffness(small_blob):
    m2, gt = synth_pair(small_blob, rotation="z:90", permutation_seed=3)
    S1 = assemble_stiffness(small_blob).toarray()
    S2 = assemble_stiffness(m2).toarray()
    p = gt.targets
    assert np.abs(S2[np.ix_(p, p)] - S1).max() <= 1e-12 * np.abs(S1).max()
    # gt composed with its inverse is the identity
    assert np.array_equal(gt.inverse().targets[gt.targets], np.arange(300))


def test_synth_delete_faces(small_blob):
    m2, gt = synth_pair(small_blob, delete_faces=10, permutation_seed=2, seed=3)
    assert len(m2.boundary_edges) > len(small_blob.boundary_edges)
    alive = gt.targets >= 0
    assert alive.sum() == m2.n_vertices
    assert len(np.unique(gt.targets[alive])) == m2.n_vertices
    # surviving vertices keep their positions up to the relabeling
    assert np.array_equal(m2.vertices[gt.targets[alive]], small_blob.vertices[alive])
    again, gt2 = synth_pair(small_blob, delete_faces=10, permutation_seed=2, seed=3)
    assert np.array_equal(again.triangles, m2.triangles)


def test_synth_crop_and_fragmentation():
    m = blob(800, seed=2)
    patch, gt = synth_pair(m, crop=(0, 0.3), permutation_seed=1)
    assert 0 < patch.n_vertices < m.n_vertices
    assert (gt.targets >= 0).sum() == patch.n_vertices
    with pytest.raises(FragmentationError):
        synth_pair(m, crop=(0, 0.001))
    with pytest.raises(ValueError):
        synth_pair(m, delete_faces=60)


def test_distortion_report_and_nested_corruption(small_blob):
    m2, gt = synth_pair(small_blob, rotation="random", permutation_seed=9)
    d, t, c = distortion_report(gt.targets, small_blob, m2)
    assert np.abs(d).max() <= 1e-10 and np.all(c[1:] == 1.0)
    rng = np.random.default_rng(0)
    order = rng.permutation(300)
    means = []
    for frac in (0.05, 0.10, 0.20):
        phi = gt.targets.copy()
        bad = order[: int(frac * 300)]  # nested: larger levels contain smaller ones
        phi[bad] = gt.targets[rng.permutation(bad)]
        means.append(np.mean(local_distortion(phi, small_blob, m2)))
    assert means[0] < means[1] < means[2]


def test_svg_and_columns(tmp_path):
    t = np.linspace(0, 0.25, 5)
    svg = cdf_svg([("a", t, t * 4), ("b", t, t * 2)], title="x")
    assert svg.startswith("<svg") and svg.count("<polyline") == 2
    assert ">a<" in svg and ">b<" in svg
    from sparsecorr.evaluation import write_columns
    write_columns(tmp_path / "c.csv", "threshold", t, [("fraction", t * 4)])
    head, data = read_columns(tmp_path / "c.csv")
    assert head == ["threshold", "fraction"]
    assert np.array_equal(data[:, 1], t * 4)


def test_ground_truth_round_trip(tmp_path):
    gt = GroundTruth([2, -1, 0], 3)
    gt.save_csv(tmp_path / "gt.csv")
    assert np.array_equal(GroundTruth.load_csv(tmp_path / "gt.csv", 3).targets, gt.targets)
