import numpy as np
import pytest

from bevis.bev import rasterize
from bevis.render import instance_rgb, pca_rgb, render_view, write_ppm
from bevis.scene import SceneSpec, generate_scene


def test_write_ppm_format(tmp_path):
    img = np.zeros((2, 3, 3))
    img[0, 0] = [1.0, 0.5, 0.0]
    path = tmp_path / "t.ppm"
    write_ppm(path, img)
    blob = path.read_bytes()
    assert blob.startswith(b"P6\n3 2\n255\n")
    assert len(blob) == len(b"P6\n3 2\n255\n") + 2 * 3 * 3
    assert blob[-18:-15] == bytes([255, 128, 0])[0:3] or blob[11:14] == bytes([255, 128, 0])


def test_pca_constant_features_uniform_color():
    feats = np.full((4, 5, 6), 3.2)
    valid = np.ones((4, 5), dtype=bool)
    rgb = pca_rgb(feats, valid)
    assert np.allclose(rgb, 0.5)


def test_pca_separates_two_blobs():
    feats = np.zeros((2, 4, 8))
    feats[0, :, 0] = -3.0
    feats[1, :, 0] = 3.0
    rgb = pca_rgb(feats, np.ones((2, 4), dtype=bool))
    assert not np.allclose(rgb[0, 0], rgb[1, 0])
    assert np.allclose(rgb[0, 0], rgb[0, 1])


def test_pca_invalid_cells_black():
    feats = np.random.default_rng(0).normal(size=(3, 3, 4))
    valid = np.zeros((3, 3), dtype=bool)
    valid[1, 1] = True
    rgb = pca_rgb(feats, valid)
    assert np.allclose(rgb[0, 0], 0.0)


def test_instance_rgb_deterministic_distinct():
    ids = np.array([[-1, 0], [1, 0]])
    rgb = instance_rgb(ids)
    assert np.allclose(rgb[0, 0], 0.0)
    assert np.allclose(rgb[0, 1], rgb[1, 1])
    assert not np.allclose(rgb[0, 1], rgb[1, 0])


def test_render_view_bit_identical(tmp_path):
    cloud = generate_scene(SceneSpec(width=1.8, depth=1.5, n_objects=1, seed=3, density=40.0))
    view = rasterize(cloud, 0.05)
    emb = np.random.default_rng(0).normal(size=(*view.valid.shape, 5))
    a = render_view(view, emb, tmp_path / "a", "scene")
    b = render_view(view, emb, tmp_path / "b", "scene")
    assert len(a) == 3
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


def test_write_ppm_rejects_bad_shape(tmp_path):
    with pytest.raises(ValueError):
        write_ppm(tmp_path / "x.ppm", np.zeros((3, 3)))
