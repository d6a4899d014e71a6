import numpy as np
import pytest

from mtvit import tensor as T
from mtvit.backbone import BackboneConfig, VisionBackbone, patchify, select_uniform, \
    uniform_indices, unpatchify
from mtvit.errors import ConfigError, ShapeError
from mtvit.rng import stream
from mtvit.tensor import Tensor, backward, finite_diff_check

pytestmark = pytest.mark.usefixtures("float64")

TINY = BackboneConfig(patch_size=4, num_layers=3, embed_dim=8, num_heads=2, image_side=8)


def image(side, seed=0, batch=None):
    shape = (side, side, 3) if batch is None else (batch, side, side, 3)
    return Tensor(stream(seed, "img").uniform(0, 1, size=shape))


def test_patchify_shape():
    tokens = patchify(image(32), 4)
    assert tokens.shape == (64, 48)


def test_patchify_single_patch_is_flat_image():
    img = image(8, seed=1)
    tokens = patchify(img, 8)
    assert tokens.shape == (1, 3 * 64)
    np.testing.assert_array_equal(tokens.data[0], img.data.reshape(-1))


def test_patchify_roundtrip():
    img = image(16, seed=2)
    back = unpatchify(patchify(img, 4), 16, 4)
    np.testing.assert_array_equal(back.data, img.data)


def test_patchify_rejects_indivisible():
    with pytest.raises(ShapeError):
        patchify(Tensor(np.zeros((10, 10, 3))), 4)


def test_patchify_raster_order():
    # patch k in raster order: second patch starts at column P
    img = image(8, seed=3)
    tokens = patchify(img, 4)
    np.testing.assert_array_equal(tokens.data[1], img.data[0:4, 4:8, :].reshape(-1))


def test_select_uniform_indices():
    assert uniform_indices(6, 3) == [2, 4, 6]
    assert uniform_indices(3, 3) == [1, 2, 3]
    assert uniform_indices(8, 3) == [3, 5, 8]


def test_select_uniform_anchors_deepest():
    for n in range(3, 13):
        idx = uniform_indices(n, 3)
        assert idx[-1] == n and len(idx) == 3 and idx == sorted(idx)


def test_select_uniform_rejects_small_pyramid():
    with pytest.raises(ConfigError):
        select_uniform([Tensor(np.zeros((4, 8)))] * 2, k=3)


def test_forward_features_shapes():
    cfg = BackboneConfig(patch_size=4, num_layers=6, embed_dim=64, num_heads=4, image_side=32)
    bb = VisionBackbone(cfg, seed=0)
    with T.no_grad():
        pyramid = bb.forward_features(image(32))
    assert len(pyramid) == 6
    assert all(f.shape == (64, 64) for f in pyramid)


def test_forward_features_pure():
    bb = VisionBackbone(TINY, seed=1)
    img = image(8, seed=4)
    with T.no_grad():
        p1 = bb.forward_features(img)
        p2 = bb.forward_features(img)
    for a, b in zip(p1, p2):
        np.testing.assert_array_equal(a.data, b.data)


def test_forward_features_batched_matches_single():
    bb = VisionBackbone(TINY, seed=2)
    imgs = image(8, seed=5, batch=2)
    with T.no_grad():
        batched = bb.forward_features(imgs)
        single = bb.forward_features(Tensor(imgs.data[1]))
    np.testing.assert_allclose(batched[-1].data[1], single[-1].data, atol=1e-12)


def test_forward_features_gradcheck():
    bb = VisionBackbone(TINY, seed=3)
    img = image(8, seed=6)
    params = dict(bb.named_params())
    checked = [params["patch_embed/w"], params["pos"], params["blocks/2/attn/qkv/b"],
               params["blocks/0/mlp/fc1/w"]]

    def f(_):
        return bb.forward_features(img)[-1].sum()

    assert finite_diff_check(f, checked, step=1e-5) < 1e-4


def test_every_backbone_param_reaches_final_layer():
    bb = VisionBackbone(TINY, seed=4)
    loss = (bb.forward_features(image(8, seed=7))[-1] ** 2.0).mean()
    grads = backward(loss)
    for name, p in bb.named_params():
        g = grads.get(p)
        assert g is not None and np.any(g != 0), f"no gradient path for {name}"


def test_positional_grid_interpolates_to_new_resolution():
    bb = VisionBackbone(TINY, seed=5)
    with T.no_grad():
        pyramid = bb.forward_features(image(16, seed=8))
    assert pyramid[-1].shape == (16, TINY.embed_dim)


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(image_side=30).validate()
    with pytest.raises(ConfigError):
        BackboneConfig(num_layers=2).validate()
    with pytest.raises(ConfigError):
        BackboneConfig(embed_dim=65).validate()


def test_rejects_non_square_image():
    bb = VisionBackbone(TINY, seed=6)
    with pytest.raises(ShapeError):
        bb.forward_features(Tensor(np.zeros((8, 12, 3))))
