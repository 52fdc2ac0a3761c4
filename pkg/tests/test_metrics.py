import numpy as np
import pytest

from nrsfm import measurements as ms
from nrsfm import metrics as mt
from nrsfm import rotation as rt
from nrsfm._backend import so3_exp
from nrsfm.errors import DegenerateGroundTruth, DegenerateInput


def gt_stack(F=6, P=8, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((3 * F, P))


def test_e3d_zero_on_identity_and_known_value():
    gt = gt_stack()
    assert mt.e3d(gt, gt) == 0.0
    # doubling one frame: per-frame relative error is exactly 1 there
    est = gt.copy()
    est[0:3] *= 2.0
    per = mt.e3d_per_frame(est, gt)
    assert per[0] == pytest.approx(1.0)
    np.testing.assert_allclose(per[1:], 0.0, atol=1e-15)
    assert mt.e3d(est, gt) == pytest.approx(1.0 / 6.0)


def test_e3d_rejects_zero_ground_truth_frame():
    gt = gt_stack()
    gt[3:6] = 0.0
    with pytest.raises(DegenerateGroundTruth) as exc:
        mt.e3d_per_frame(gt, gt)
    assert exc.value.frame == 1


def test_align_flip_only():
    gt = gt_stack(seed=1)
    np.testing.assert_allclose(mt.align_shapes(-gt, gt, "flipOnly"), gt, atol=1e-12)
    np.testing.assert_allclose(mt.align_shapes(gt, gt, "flipOnly"), gt, atol=1e-12)


def test_align_global_rotation_recovers():
    gt = gt_stack(F=10, seed=2)
    Q = so3_exp(np.array([0.4, -0.2, 0.9]))
    est = np.vstack([Q.T @ gt[3 * f : 3 * f + 3] for f in range(10)])
    aligned = mt.align_shapes(est, gt, "globalRotation")
    np.testing.assert_allclose(aligned, gt, atol=1e-9)
    # and with a sign flip on top
    aligned2 = mt.align_shapes(-est, gt, "globalRotation")
    np.testing.assert_allclose(aligned2, gt, atol=1e-9)


def test_align_none_passthrough():
    gt = gt_stack(seed=3)
    est = gt + 1.0
    np.testing.assert_array_equal(mt.align_shapes(est, gt, "none"), est)
    with pytest.raises(Exception):
        mt.align_shapes(est, gt, "bogus")


def test_e_r_gauge_invariance():
    rng = np.random.default_rng(4)
    gt_r = so3_exp(rng.standard_normal((12, 3)))
    U = so3_exp(np.array([0.1, 0.7, -0.3]))
    est = gt_r @ U
    val, details = mt.e_r(est, gt_r, return_details=True)
    assert val < 1e-10
    assert details["preAlignment"] > 0.1
    # mirrored candidates take the flip branch
    J = np.diag([1.0, 1.0, -1.0])
    est2 = J @ est @ J
    assert mt.e_r(est2, gt_r) < 1e-10


def test_e_r_scales_with_perturbation():
    rng = np.random.default_rng(5)
    gt_r = so3_exp(rng.standard_normal((20, 3)))
    small = so3_exp(0.01 * rng.standard_normal((20, 3))) @ gt_r
    large = so3_exp(0.3 * rng.standard_normal((20, 3))) @ gt_r
    assert mt.e_r(small, gt_r) < mt.e_r(large, gt_r)


def test_reprojection_error_exact_and_degenerate():
    model = ms.random_model(K=2, F=8, P=9, seed=6)
    W, gt, rotset = ms.synthesize_sequence(model, seed=6)
    Wc = ms.mean_center(W)
    block = rt.assemble_block_rotation(rotset.rotations[:, 0])
    assert mt.reprojection_error(Wc, block, gt) < 1e-12
    with pytest.raises(DegenerateInput):
        zero = ms.MeasurementMatrix(
            np.zeros_like(Wc.data), Wc.frames, Wc.points, centered=True
        )
        mt.reprojection_error(zero, block, gt)


def test_report_serialization_rounds():
    rep = mt.EvaluationReport(
        e3d=0.123456789012345,
        e_r=None,
        reprojection=1.0 / 3.0,
        per_frame_e3d=np.array([0.1, 0.2]),
        alignment_used="globalRotation",
    )
    d = rep.to_json_dict()
    assert d["e3d"] == 0.123456789012
    assert d["eR"] is None
    assert d["reprojection"] == 0.333333333333
    assert d["alignmentUsed"] == "globalRotation"
    assert isinstance(d["perFrameE3d"], list)
