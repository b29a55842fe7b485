import math

import numpy as np
import pytest

import voxelrcnn as vr


def test_iou_and_nms():
    a = vr.Box3((5, 5, 5), (4, 4, 4))
    b = vr.Box3((6, 5, 5), (4, 4, 4))
    assert vr.iou3d(a, a) == pytest.approx(1.0)
    assert vr.iou3d(a, b) == pytest.approx(48 / 80)
    assert vr.nms3d([a, b, vr.Box3((20, 20, 20), (2, 2, 2))], [0.9, 0.8, 0.1], 0.5) == [0, 2]


def test_dilate_box_adds_twenty_voxels():
    d = vr.dilate_box(vr.Box3((10, 10, 10), (6, 8, 4)), 5.0, (0.5, 0.5, 0.5))
    assert tuple(d.size) == pytest.approx((26, 28, 24))


def test_phantom_case_and_mhd_round_trip(tmp_path):
    spec = vr.PhantomSpec()
    spec.seed = 4
    spec.volume_dims = (32, 40, 48)
    spec.radius_min_mm, spec.radius_max_mm = 2.0, 3.0
    case = vr.generate_case(spec, 0)
    assert case["scan"].shape == (32, 40, 48)
    assert case["mask"].dtype == np.uint8
    assert len(case["annotations"]) >= 1
    assert case["mask"].sum() > 0
    again = vr.generate_case(spec, 0)
    assert np.array_equal(case["scan"], again["scan"])

    path = tmp_path / "scan.mhd"
    vr.write_mhd(path, case["scan"], case["spacing"], case["origin"], "int16")
    arr, spacing, origin = vr.read_mhd(path)
    assert np.array_equal(arr, case["scan"])
    assert tuple(spacing) == tuple(case["spacing"])


def test_metrics():
    a = np.zeros((8, 8, 8), np.uint8)
    b = np.zeros_like(a)
    a[2:6, 2:6, 2:6] = 1
    b[2:6, 2:6, 3:7] = 1
    assert vr.dsc(a, b) == pytest.approx(2 * 48 / 128)
    assert vr.hausdorff_mm(a, a, (1, 1, 1)) == 0.0
    assert vr.volume_correlation([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    with pytest.raises(vr.ContractError):
        vr.volume_correlation([1], [1])


def test_froc_perfect_detector():
    gts = [vr.Annotation(f"s{i}", (0.0, 0.0, 0.0), 6.0) for i in range(3)]
    cands = []
    for g in gts:
        c = vr.Candidate()
        c.scan_id, c.center_world, c.score = g.scan_id, g.center_world, 1.0
        c.size_world = (6.0, 6.0, 6.0)
        cands.append(c)
    r = vr.froc(cands, gts)
    assert r["cpm"] == 1.0
    assert len(r["sensitivity"]) == 7


def test_sliding_windows():
    assert [tuple(w) for w in vr.sliding_windows((128, 128, 128))] == [(0, 0, 0)]
    xs = sorted({w[2] for w in vr.sliding_windows((128, 128, 192), 128, 0.5)})
    assert xs == [0, 64]


def test_untrained_detector_candidates_have_mask_volume(tmp_path):
    cfg = tmp_path / "config.txt"
    cfg.write_text(
        "model.stem_channels = 4\nmodel.early_channels = 8\nmodel.late_channels = 8\n"
        "model.rcnn_hidden = 8\nmodel.mask_channels = 4\nmodel.mask_roi = 6\ninfer.window = 32\n"
    )
    ckpt = tmp_path / "model.ckpt"
    vr.save_random_model(ckpt, cfg)
    det = vr.Detector(ckpt, cfg)
    rng = np.random.default_rng(0)
    scan = (-850 + 40 * rng.standard_normal((32, 32, 32))).astype(np.float32)
    for c in det.detect(scan, (0.5, 0.5, 0.5)):
        assert c.mask_volume_mm3 > 0
        assert 0.0 <= c.score <= 1.0
        assert math.isclose(c.mask_volume_mm3, c.mask.sum() * 0.125)
    with pytest.raises(vr.ContractError):
        det.detect(scan, (1.0, 1.0, 1.0))
