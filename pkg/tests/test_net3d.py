import numpy as np
import pytest

from bevis import autodiff as ad
from bevis.autodiff import Tensor
from bevis.bev import rasterize
from bevis.net3d import (
    PropagationNet3D,
    augmented_features,
    build_knn,
    compute_targets,
    edgeconv,
    infer_full_scene,
    instance_loss_3d,
    sample_block,
    tile_centers,
)
from bevis.scene import PointCloud, SceneSpec, generate_scene

from gradcheck import assert_close, numeric_grad


def _cloud_from_xyz(xyz):
    xyz = np.asarray(xyz, dtype=np.float64)
    lo = xyz.min(axis=0)
    hi = lo + np.maximum(xyz.max(axis=0) - lo, 1.0)
    norm = (xyz - lo) / (hi - lo)
    return PointCloud(np.hstack([xyz, np.full((len(xyz), 3), 0.5), norm]))


def test_knn_collinear_points():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
    nb = build_knn(pts, k=1)
    assert nb[0, 0] == 1 and nb[1, 0] == 0 and nb[2, 0] == 1


def test_knn_complete_graph():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 2.0, 0]])
    nb = build_knn(pts, k=2)
    for i in range(3):
        assert set(nb[i]) == {0, 1, 2} - {i}


def test_knn_rejects_too_few_points():
    with pytest.raises(ValueError, match="more than k"):
        build_knn(np.zeros((3, 3)), k=3)


def test_knn_tie_break_by_index():
    # four corners of a square: two neighbors tie at distance 1
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [1.0, 1, 0]])
    nb = build_knn(pts, k=2)
    assert list(nb[0]) == [1, 2]  # both at distance 1; index order
    assert list(nb[3]) == [1, 2]


@pytest.mark.parametrize("seed", range(10))
def test_knn_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 3, size=(500, 3))
    k = 7 if seed % 2 else 20
    nb = build_knn(pts, k)
    # independent oracle: per-point full scan with explicit (distance, index) sort
    for i in rng.choice(500, size=40, replace=False):
        d = np.sqrt(((pts - pts[i]) ** 2).sum(axis=1))
        expected = sorted((float(d[j]), j) for j in range(500) if j != i)[:k]
        assert [j for _, j in expected] == list(nb[i])


def test_edgeconv_zero_differences():
    feats = Tensor(np.ones((4, 3)))
    nb = build_knn(np.arange(12, dtype=float).reshape(4, 3), k=2)
    take_diff = np.vstack([np.zeros((3, 3)), np.eye(3)])  # passes x_j - x_i through

    def mlp(e):
        return ad.matmul(e, Tensor(take_diff))

    out = edgeconv(feats, nb, mlp)
    assert np.allclose(out.data, 0.0)


def test_edgeconv_single_neighbor_max_degenerate():
    feats = Tensor(np.array([[1.0], [5.0]]))
    nb = np.array([[1], [0]])

    def mlp(e):
        return e  # identity on (x_i, x_j - x_i)

    out = edgeconv(feats, nb, mlp)
    assert np.allclose(out.data, [[1.0, 4.0], [5.0, -4.0]])


def test_edgeconv_neighbor_order_irrelevant():
    rng = np.random.default_rng(0)
    feats = Tensor(rng.normal(size=(6, 4)))
    nb = build_knn(rng.normal(size=(6, 3)), k=3)
    w = Tensor(rng.normal(size=(8, 5)))

    def mlp(e):
        return ad.matmul(e, w)

    a = edgeconv(feats, nb, mlp)
    b = edgeconv(feats, nb[:, ::-1].copy(), mlp)
    assert np.allclose(a.data, b.data)


def test_edgeconv_permutation_equivariance():
    rng = np.random.default_rng(3)
    n = 8
    xyz = rng.normal(size=(n, 3))
    feats = rng.normal(size=(n, 4))
    w = Tensor(rng.normal(size=(8, 5)))

    def mlp(e):
        return ad.matmul(e, w)

    nb = build_knn(xyz, k=3)
    out = edgeconv(Tensor(feats), nb, mlp).data
    perm = rng.permutation(n)
    inv = np.argsort(perm)
    nb_perm = inv[nb[perm]]  # consistent graph relabeling
    out_perm = edgeconv(Tensor(feats[perm]), nb_perm, mlp).data
    assert np.allclose(out_perm, out[perm])


def test_sample_block_postconditions():
    cloud = generate_scene(SceneSpec(width=3.0, depth=3.0, n_objects=1, seed=0, density=30.0))
    rng = np.random.default_rng(0)
    idx = sample_block(cloud, (1.5, 1.5), diameter=1.0, n=256, rng=rng)
    assert len(idx) == 256
    d = cloud.xyz[idx, 0:2] - [1.5, 1.5]
    assert np.all((d * d).sum(axis=1) <= 0.25 + 1e-12)


def test_sample_block_replacement_rule():
    xyz = np.column_stack([np.linspace(0, 0.1, 10), np.zeros(10), np.zeros(10)])
    cloud = _cloud_from_xyz(xyz)
    idx = sample_block(cloud, (0.05, 0.0), diameter=1.0, n=1024, rng=np.random.default_rng(1))
    assert len(idx) == 1024
    assert set(idx) <= set(range(10))


def test_sample_block_deterministic_and_empty():
    cloud = _cloud_from_xyz(np.random.default_rng(0).uniform(0, 1, (50, 3)))
    a = sample_block(cloud, (0.5, 0.5), 1.0, 64, np.random.default_rng(9))
    b = sample_block(cloud, (0.5, 0.5), 1.0, 64, np.random.default_rng(9))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError, match="empty"):
        sample_block(cloud, (50.0, 50.0), 1.0, 64, np.random.default_rng(0))


def _toy_view_and_cloud():
    # 4 points in distinct cells; instance 0 = points 0,1; instance 1 = point 2;
    # instance 2 = point 3 but occluded by nothing (all visible)
    xyz = np.array([[0.0, 0.0, 1.0], [0.1, 0.0, 1.0], [0.0, 0.1, 1.0], [0.1, 0.1, 1.0]])
    cloud = _cloud_from_xyz(xyz)
    view = rasterize(cloud, cell_size=0.05)
    return cloud, view


def test_compute_targets_mean_and_singleton():
    cloud, view = _toy_view_and_cloud()
    h, w = view.valid.shape
    emb = np.zeros((h, w, 2))
    ridx = view.index_map
    emb[ridx == 0] = [1.0, 1.0]
    emb[ridx == 1] = [3.0, 3.0]
    emb[ridx == 2] = [5.0, 6.0]
    gt_instance = np.array([0, 0, 1, 1])
    targets, defined = compute_targets(view, emb, gt_instance, len(cloud))
    assert np.allclose(targets[0], [2.0, 2.0]) and np.allclose(targets[1], [2.0, 2.0])
    assert defined.all()


def test_compute_targets_occluded_instance_undefined():
    xyz = np.array([[0.0, 0.0, 0.2], [0.001, 0.001, 1.0]])  # same cell, point 1 wins
    cloud = _cloud_from_xyz(xyz)
    view = rasterize(cloud, cell_size=0.05)
    emb = np.full((*view.valid.shape, 2), 7.0)
    targets, defined = compute_targets(view, emb, np.array([0, 1]), 2)
    assert defined[1] and not defined[0]
    assert np.allclose(targets[0], 0.0)


def test_instance_loss_3d_examples():
    pred = Tensor(np.array([[0.0, 0.0], [9.0, 9.0]]), requires_grad=True)
    targets = np.array([[3.0, 4.0], [1.0, 1.0]])
    loss, warned = instance_loss_3d(pred, targets, np.array([True, False]))
    assert loss.item() == pytest.approx(5.0)
    assert not warned
    exact, _ = instance_loss_3d(Tensor(targets), targets, np.array([True, True]))
    assert exact.item() == 0.0
    zero, warned = instance_loss_3d(pred, targets, np.array([False, False]))
    assert zero.item() == 0.0 and warned


@pytest.mark.parametrize("seed", range(20))
def test_instance_loss_3d_gradient(seed):
    rng = np.random.default_rng(seed)
    pred = rng.normal(size=(6, 4))
    targets = rng.normal(size=(6, 4)) + 1.0
    defined = rng.random(6) > 0.3
    if not defined.any():
        defined[0] = True

    def forward(arrs):
        l, _ = instance_loss_3d(Tensor(arrs[0]), targets, defined)
        return l.item()

    t = Tensor(pred, requires_grad=True)
    loss, _ = instance_loss_3d(t, targets, defined)
    loss.backward()
    assert_close(t.grad, numeric_grad(forward, [pred], 0), what="instance_loss_3d")


def test_net_forward_shapes_and_determinism():
    rng = np.random.default_rng(0)
    net = PropagationNet3D(in_dim=11, widths=(8, 8, 8), embed_dim=3, n_classes=5, seed=0)
    feats = rng.normal(size=(40, 11))
    nb = build_knn(rng.normal(size=(40, 3)), k=5)
    with_stats = net.forward(feats, nb, training=False)
    again = net.forward(feats, nb, training=False)
    assert with_stats[0].shape == (40, 3) and with_stats[1].shape == (40, 5)
    assert np.array_equal(with_stats[0].data, again[0].data)


def test_tile_centers_degenerate_single_block():
    xy = np.random.default_rng(0).uniform(0, 0.4, size=(30, 2))
    centers = tile_centers(xy, stride=0.5)
    assert len(centers) == 1
    np.testing.assert_allclose(centers[0], (xy.min(0) + xy.max(0)) / 2)


def test_infer_full_scene_coverage_and_single_block_equivalence():
    rng = np.random.default_rng(1)
    xyz = rng.uniform(0, 0.4, size=(60, 3))
    feats = rng.normal(size=(60, 11))
    net = PropagationNet3D(in_dim=11, widths=(8, 8, 8), embed_dim=3, n_classes=5, seed=2)
    f, l = infer_full_scene(net, feats, xyz, k=5, diameter=1.0)
    assert f.shape == (60, 3) and np.all(np.isfinite(f))
    # degenerate tiling: one block == plain forward pass over everything
    nb = build_knn(xyz, k=5)
    f1, l1 = net.forward(feats, nb, training=False)
    assert np.allclose(f, f1.data) and np.allclose(l, l1.data)


def test_infer_full_scene_averages_overlaps():
    cloud = generate_scene(SceneSpec(width=2.4, depth=2.4, n_objects=2, seed=4, density=40.0))
    feats = np.hstack([cloud.points, np.zeros((len(cloud), 2))])
    net = PropagationNet3D(in_dim=11, widths=(8, 8, 8), embed_dim=3, n_classes=5, seed=3)
    f, l = infer_full_scene(net, feats, cloud.xyz, k=5, diameter=1.0)
    assert np.all(np.isfinite(f)) and np.all(np.isfinite(l))
    # manual recomputation of the block averages for a few points
    from bevis.net3d import tile_centers as tc

    acc = np.zeros((len(cloud), 3))
    cnt = np.zeros(len(cloud))
    for cx, cy in tc(cloud.xyz[:, :2], 0.5):
        d = cloud.xyz[:, :2] - [cx, cy]
        idx = np.flatnonzero((d * d).sum(axis=1) <= 0.25)
        if idx.size < 2:
            continue
        nb = build_knn(cloud.xyz[idx], min(5, idx.size - 1))
        fi, _ = net.forward(feats[idx], nb, training=False)
        acc[idx] += fi.data
        cnt[idx] += 1
    covered = cnt > 0
    assert np.allclose(f[covered], acc[covered] / cnt[covered, None])


def test_augmented_features_zero_fill_for_unseen():
    xyz = np.array([[0.0, 0.0, 0.2], [0.001, 0.001, 1.0], [0.3, 0.3, 0.5]])
    cloud = _cloud_from_xyz(xyz)
    view = rasterize(cloud, cell_size=0.05)
    emb = np.full((*view.valid.shape, 2), 2.5)
    feats, seen = augmented_features(cloud, view, emb)
    assert feats.shape == (3, 11)
    assert not seen[0] and seen[1] and seen[2]
    assert np.allclose(feats[0, 9:], 0.0)
    assert np.allclose(feats[1, 9:], 2.5)
