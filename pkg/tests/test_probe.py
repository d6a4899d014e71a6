import numpy as np
import pytest

from mtvit.backbone import BackboneConfig, VisionBackbone
from mtvit.checkpoint import params_digest
from mtvit.data import Dataset, gen_dataset, num_classes
from mtvit.errors import ConfigError, EvaluationError, ShapeError
from mtvit.probe import ProbeConfig, align_scale_shift, depth_metrics, \
    evaluate_probe_depth, evaluate_probe_seg, fit_probe_depth, fit_probe_seg, \
    pixel_class_map, seg_metrics

SIDE = 16
CFG = BackboneConfig(patch_size=4, num_layers=3, embed_dim=16, num_heads=2, image_side=SIDE)


@pytest.fixture(scope="module")
def probe_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("probe_data")
    gen_dataset(root / "fit", n=24, seed=21, split="probe-train", side=SIDE)
    gen_dataset(root / "eval", n=8, seed=21, split="probe-val", side=SIDE)
    return Dataset(root / "fit"), Dataset(root / "eval")


# -- seg_metrics oracles -----------------------------------------------------------


def test_seg_metrics_perfect():
    gt = np.array([[0, 1], [2, 0]])
    out = seg_metrics(gt, gt, 3)
    assert out["miou"] == 1.0


def test_seg_metrics_hand_case_7_12():
    pred = np.array([[1, 1], [0, 0]])
    gt = np.array([[1, 0], [0, 0]])
    out = seg_metrics(pred, gt, 2)
    np.testing.assert_allclose(out["iou"], [2.0 / 3.0, 0.5])
    np.testing.assert_allclose(out["miou"], 7.0 / 12.0, atol=1e-12)


def test_seg_metrics_disjoint_is_zero():
    pred = np.zeros((2, 2), dtype=int)
    gt = np.ones((2, 2), dtype=int)
    assert seg_metrics(pred, gt, 2)["miou"] == 0.0


def test_seg_metrics_excludes_absent_classes():
    pred = np.array([[0, 1]])
    gt = np.array([[0, 1]])
    out = seg_metrics(pred, gt, 5)
    assert np.isnan(out["iou"][3]) and out["miou"] == 1.0


def test_seg_metrics_permutation_equivariance():
    gen = np.random.default_rng(0)
    pred = gen.integers(0, 4, size=(8, 8))
    gt = gen.integers(0, 4, size=(8, 8))
    base = seg_metrics(pred, gt, 4)["miou"]
    perm = np.array([2, 3, 1, 0])
    assert abs(seg_metrics(perm[pred], perm[gt], 4)["miou"] - base) < 1e-12


def test_seg_metrics_shape_and_range_errors():
    with pytest.raises(ShapeError):
        seg_metrics(np.zeros((2, 2)), np.zeros((3, 3)), 2)
    with pytest.raises(ShapeError):
        seg_metrics(np.full((2, 2), 7), np.zeros((2, 2)), 2)


# -- depth_metrics oracles ------------------------------------------------------------


def test_depth_metrics_identity():
    gt = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = depth_metrics(gt.copy(), gt)
    assert out["rmse"] < 1e-12 and out["absrel"] < 1e-12 and out["delta1"] == 1.0
    exact = depth_metrics(gt.copy(), gt, align=False)
    assert exact["rmse"] == 0.0 and exact["absrel"] == 0.0 and exact["delta1"] == 1.0


def test_depth_metrics_hand_case_unaligned():
    out = depth_metrics(np.array([1.0, 2.0, 2.0]), np.array([1.0, 2.0, 4.0]), align=False)
    np.testing.assert_allclose(out["absrel"], 1.0 / 6.0, atol=1e-12)
    np.testing.assert_allclose(out["delta1"], 2.0 / 3.0, atol=1e-12)
    np.testing.assert_allclose(out["rmse"], np.sqrt(4.0 / 3.0), atol=1e-12)


def test_depth_metrics_scale_removed_by_alignment():
    gen = np.random.default_rng(1)
    gt = gen.uniform(0.2, 1.0, size=(8, 8))
    out = depth_metrics(1.2 * gt, gt, align=True)
    assert out["rmse"] < 1e-12 and out["absrel"] < 1e-12 and out["delta1"] == 1.0


def test_depth_metrics_validity_mask():
    gt = np.array([0.0, -1.0])
    with pytest.raises(EvaluationError):
        depth_metrics(np.ones(2), gt)


def test_align_scale_shift_recovers_affine():
    gen = np.random.default_rng(2)
    gt = gen.uniform(0.1, 1.0, size=50)
    pred = 0.5 * gt - 3.0
    aligned = align_scale_shift(pred, gt, np.ones(50, dtype=bool))
    np.testing.assert_allclose(aligned, gt, atol=1e-10)


def test_align_handles_constant_prediction():
    gt = np.linspace(0.1, 1.0, 16)
    aligned = align_scale_shift(np.full(16, 0.3), gt, np.ones(16, dtype=bool))
    assert np.all(np.isfinite(aligned))


# -- probing ------------------------------------------------------------------------


def test_pixel_class_map_matches_instances(probe_data):
    fit, _ = probe_data
    cm = pixel_class_map(fit[0])
    union = np.zeros_like(cm, dtype=bool)
    for mask, _ in fit[0].instances:
        union |= mask.astype(bool)
    assert np.all((cm > 0) == union)


def test_fit_probe_seg_freezes_backbone(probe_data):
    fit, _ = probe_data
    bb = VisionBackbone(CFG, seed=1)
    digest = params_digest(bb.named_params())
    fit_probe_seg(bb, fit, num_classes(), ProbeConfig(steps=20))
    assert params_digest(bb.named_params()) == digest


def test_fit_probe_depth_freezes_backbone(probe_data):
    fit, _ = probe_data
    bb = VisionBackbone(CFG, seed=2)
    digest = params_digest(bb.named_params())
    fit_probe_depth(bb, fit)
    assert params_digest(bb.named_params()) == digest


def test_probe_seg_report_shape(probe_data):
    fit, _ = probe_data
    bb = VisionBackbone(CFG, seed=3)
    probe = fit_probe_seg(bb, fit, num_classes())
    report = evaluate_probe_seg(bb, probe, fit, num_classes())
    assert report.task == "seg" and report.metric == "miou"
    assert report.sample_count == len(fit)
    assert 0.0 <= report.value <= 1.0


def test_probe_depth_reports(probe_data):
    fit, evalset = probe_data
    bb = VisionBackbone(CFG, seed=4)
    probe = fit_probe_depth(bb, fit)
    reports = evaluate_probe_depth(bb, probe, evalset)
    names = {r.metric for r in reports}
    assert names == {"rmse", "absrel", "delta1"}
    assert all(np.isfinite(r.value) for r in reports)
    assert all(r.sample_count == len(evalset) for r in reports)


def test_probe_train_split_rmse_not_worse_than_heldout(probe_data):
    fit, evalset = probe_data
    bb = VisionBackbone(CFG, seed=5)
    probe = fit_probe_depth(bb, fit)
    on_fit = evaluate_probe_depth(bb, probe, fit)[0].value
    on_eval = evaluate_probe_depth(bb, probe, evalset)[0].value
    assert on_fit <= on_eval + 1e-9


def test_probe_config_validation():
    with pytest.raises(ConfigError):
        ProbeConfig(steps=0).validate()
    with pytest.raises(ConfigError):
        ProbeConfig(lr=0.0).validate()
    with pytest.raises(ConfigError):
        fit_probe_seg(VisionBackbone(CFG, seed=0), None, num_classes=1)
