import numpy as np
import pytest

from oracles import mesh_floyd
from sparsecorr.anchors import (
    AnchorSet,
    Correspondence,
    PipelineConfig,
    build_pattern,
    local_distortion,
    postprocess,
    run_pipeline,
    select_anchors,
)
from sparsecorr.descriptors import assemble_mass
from sparsecorr.errors import ConfigError, EmptyAnchorSetError, HKSUnavailableError
from sparsecorr.evaluation import synth_pair
from sparsecorr.geometry import vertex_ring
from sparsecorr.shapes import blob, grid_mesh


def distortion_oracle(phi, m1, m2, depth):
    """Ring-ball distortion with plain loops over all-pairs distances."""
    d1, d2 = mesh_floyd(m1), mesh_floyd(m2)
    mass = np.diag(assemble_mass(m1).toarray())
    adj = {v: set() for v in range(m1.n_vertices)}
    for a, b in m1.edges:
        adj[a].add(b)
        adj[b].add(a)
    out = []
    for i in range(m1.n_vertices):
        ball, frontier = {i}, {i}
        for _ in range(depth):
            frontier = {w for v in frontier for w in adj[v]} - ball
            ball |= frontier
        members = sorted(ball - {i})
        gamma = max(d1[i, j] for j in members)
        num = sum(mass[j] * abs(d1[i, j] - d2[phi[i], phi[j]]) / gamma for j in members)
        out.append(num / sum(mass[j] for j in members))
    return np.array(out)


def test_grid_hand_map_matches_oracle():
    m = grid_mesh(5, 5, shear=0.2)
    phi = np.arange(25)
    phi[[6, 18]] = phi[[18, 6]]
    phi[[12, 13]] = phi[[13, 12]]
    got = local_distortion(phi, m, m, ring_depth=2)
    assert np.abs(got - distortion_oracle(phi, m, m, 2)).max() < 1e-12


def test_identity_zero_and_swap_locality():
    m = grid_mesh(9, 9)
    phi = np.arange(81)
    assert np.all(local_distortion(phi, m, m) == 0)
    phi[[10, 70]] = phi[[70, 10]]
    d = local_distortion(phi, m, m, ring_depth=2)
    touched = vertex_ring(m, 10, 2).members | vertex_ring(m, 70, 2).members
    for v in range(81):
        if v in touched:
            assert d[v] > 0
        else:
            assert d[v] == 0


def test_isometric_pair_zero(small_blob):
    m2, gt = synth_pair(small_blob, rotation="random", translation=[1, 2, 3], permutation_seed=5)
    assert np.abs(local_distortion(gt.targets, small_blob, m2)).max() <= 1e-10


def test_unmapped_and_isolated_are_inf():
    m = grid_mesh(4, 4)
    phi = np.arange(16)
    phi[5] = -1
    d = local_distortion(phi, m, m)
    assert np.isinf(d[5])
    assert np.isfinite(np.delete(d, 5)).all()


def test_select_anchors_rules():
    d = np.array([0.0, 0.5, 2.0, np.inf, 0.0])
    phi = np.array([4, 3, 2, 1, -1])
    assert select_anchors(d, phi, np.inf).sources.tolist() == [0, 1, 2]
    a = select_anchors(d, phi, 1.0)
    assert a.pairs == [(0, 4), (1, 3)]
    assert np.all(a.distortion < 1.0)
    with pytest.raises(ValueError):
        select_anchors(d, phi, 0.0)


def test_corrupted_sources_excluded(small_blob):
    m2, gt = synth_pair(small_blob, permutation_seed=1)
    rng = np.random.default_rng(0)
    phi = gt.targets.copy()
    bad = rng.choice(small_blob.n_vertices, 30, replace=False)
    phi[bad] = rng.integers(0, m2.n_vertices, 30)
    d = local_distortion(phi, small_blob, m2)
    anchors = set(select_anchors(d, phi, 1.0).sources.tolist())
    assert all(s not in anchors for s in bad if d[s] >= 1.0)


def test_pattern_single_anchor():
    m = grid_mesh(7, 7)
    a = AnchorSet([24], [24], [0.0], 1.0)
    p = build_pattern(a, m, m, sparsity_ring=1)
    ring = sorted(vertex_ring(m, 24, 1).members)
    assert p.anchors == {24: 24}
    rows = set(p.rows.tolist())
    assert rows == set(ring) - {24}
    for r in rows:
        assert set(p.cols[p.rows == r].tolist()) == set(ring)


def test_pattern_overlap_is_union():
    m = grid_mesh(9, 9)
    a = AnchorSet([30, 32], [30, 32], [0.0, 0.0], 1.0)
    p = build_pattern(a, m, m, sparsity_ring=1)
    shared = (vertex_ring(m, 30, 1).members & vertex_ring(m, 32, 1).members) - {30, 32}
    expected = vertex_ring(m, 30, 1).members | vertex_ring(m, 32, 1).members
    for s in shared:
        assert set(p.cols[p.rows == s].tolist()) == set(expected)


def test_pattern_rows_bounded(small_blob):
    m = small_blob
    rng = np.random.default_rng(2)
    src = rng.choice(m.n_vertices, 30, replace=False)
    p = build_pattern(AnchorSet(src, src, np.zeros(30), 1.0), m, m, sparsity_ring=4)
    counts = np.bincount(p.rows, minlength=m.n_vertices)
    ring_max = max(len(vertex_ring(m, int(v), 4)) for v in src)
    multiplicity = max(sum(int(s) in vertex_ring(m, int(a), 4) for a in src) for s in range(m.n_vertices))
    assert counts.max() <= ring_max * multiplicity


def test_empty_anchor_pattern():
    m = grid_mesh(3, 3)
    with pytest.raises(EmptyAnchorSetError):
        build_pattern(AnchorSet([], [], [], 1.0), m, m)


def test_config_validation():
    with pytest.raises(ConfigError):
        PipelineConfig(distortion_ring=4, sparsity_ring=4).validate()
    with pytest.raises(ConfigError):
        PipelineConfig(epsilon_schedule=(1.0, 2.0)).validate()
    cfg = PipelineConfig()
    assert np.allclose(cfg.epsilon_schedule, [5, 4, 3, 2, 1])


def test_identity_pipeline(small_blob):
    res = run_pipeline(small_blob, small_blob, PipelineConfig(postprocess="geodesic_sig"), phi0=np.arange(300))
    assert np.array_equal(res.correspondence.targets, np.arange(300))
    assert res.log[0]["num_anchors"] == 300


def test_pipeline_rigid_pair_and_determinism():
    m = blob(500, seed=11)
    m2, gt = synth_pair(m, rotation="random", permutation_seed=4, seed=4)
    cfg = PipelineConfig(postprocess="geodesic_sig")
    a = run_pipeline(m, m2, cfg)
    b = run_pipeline(m, m2, cfg)
    assert np.array_equal(a.correspondence.targets, b.correspondence.targets)
    assert np.all(a.correspondence.targets >= 0)
    assert np.mean(a.correspondence.targets == gt.targets) > 0.9
    for s, t in a.anchors.pairs:
        assert a.correspondence.targets[s] == t


def test_postprocess_identity_and_passthrough(small_blob):
    m = small_blob
    a = AnchorSet([0, 50, 120, 200, 280], [0, 50, 120, 200, 280], np.zeros(5), 1.0)
    out = postprocess(a, m, m, "geodesic_sig")
    assert np.array_equal(out.targets, np.arange(300))
    out = postprocess(a, m, m, "hks", PipelineConfig(num_eigs=50))
    assert np.array_equal(out.targets, np.arange(300))
    full = AnchorSet(np.arange(300), np.roll(np.arange(300), 1), np.zeros(300), 1.0)
    assert np.array_equal(postprocess(full, m, m).targets, np.roll(np.arange(300), 1))


def test_hks_refused_on_open_mesh():
    m = grid_mesh(6, 6)
    a = AnchorSet([0], [0], [0.0], 1.0)
    with pytest.raises(HKSUnavailableError):
        postprocess(a, m, m, "hks")


def test_csv_round_trips(tmp_path):
    c = Correspondence([3, -1, 0, 2], 4)
    c.save_csv(tmp_path / "map.csv")
    assert np.array_equal(Correspondence.load_csv(tmp_path / "map.csv", 4).targets, c.targets)
    a = AnchorSet([1, 4], [2, 0], [0.125, 1 / 3], 2.0)
    a.save_csv(tmp_path / "anchors.csv")
    back = AnchorSet.load_csv(tmp_path / "anchors.csv")
    assert back.pairs == a.pairs
    assert np.array_equal(back.distortion, a.distortion)
