"""Gauge-aware evaluation of recovered shapes and rotations.

Factorization recovers geometry only up to a global rotation and a sign
flip, so every error metric here first removes the gauge it is allowed to
remove and reports which alignment mode was used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nrsfm.errors import (
    DegenerateGroundTruth,
    DegenerateInput,
    ShapeMismatch,
)
from nrsfm.measurements import MeasurementMatrix
from nrsfm.rotation import BlockRotation, _project_unchecked

ALIGNMENT_MODES = ("none", "flipOnly", "globalRotation")

_FLIP = np.diag([1.0, 1.0, -1.0])


@dataclass
class EvaluationReport:
    e3d: float
    e_r: float | None
    reprojection: float
    per_frame_e3d: np.ndarray
    alignment_used: str

    def to_json_dict(self) -> dict:
        def r(x):
            return None if x is None else float(f"{float(x):.12g}")

        return {
            "e3d": r(self.e3d),
            "eR": r(self.e_r),
            "reprojection": r(self.reprojection),
            "perFrameE3d": [r(x) for x in np.asarray(self.per_frame_e3d)],
            "alignmentUsed": self.alignment_used,
        }


def _frame_stack(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] % 3 != 0:
        raise ShapeMismatch(f"expected a 3F x P stack, got {X.shape}")
    return X.reshape(-1, 3, X.shape[1])


def align_shapes(est: np.ndarray, gt: np.ndarray, mode: str) -> np.ndarray:
    """Remove the global gauge between an estimated and true shape stack.

    flipOnly picks the sign s minimizing ||s*est - gt||_F. globalRotation
    additionally applies the one rotation (shared by all frames) solving
    the stacked Procrustes problem; combined with the sign trial this
    covers reflections as well.
    """
    if mode not in ALIGNMENT_MODES:
        raise ValueError(f"unknown alignment mode {mode!r}")
    e = _frame_stack(est)
    g = _frame_stack(gt)
    if e.shape != g.shape:
        raise ShapeMismatch("est and gt dimensions differ")
    if mode == "none":
        return np.asarray(est, dtype=np.float64).copy()
    if mode == "flipOnly":
        s = 1.0 if float(np.sum(e * g)) >= 0.0 else -1.0
        return (s * e).reshape(est.shape)
    best = None
    for s in (1.0, -1.0):
        S = np.einsum("fip,fjp->ij", g, s * e)
        Q = _project_unchecked(S)
        aligned = np.einsum("ij,fjp->fip", Q, s * e)
        resid = float(np.sum((aligned - g) ** 2))
        if best is None or resid < best[0]:
            best = (resid, aligned)
    return best[1].reshape(est.shape)


def e3d_per_frame(est: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-frame normalized reconstruction errors ||est_f - gt_f|| / ||gt_f||."""
    e = _frame_stack(est)
    g = _frame_stack(gt)
    if e.shape != g.shape:
        raise ShapeMismatch("est and gt dimensions differ")
    gn = np.linalg.norm(g.reshape(len(g), -1), axis=1)
    for f, n in enumerate(gn):
        if n <= 0.0:
            raise DegenerateGroundTruth(f)
    diff = np.linalg.norm((e - g).reshape(len(g), -1), axis=1)
    return diff / gn


def e3d(est: np.ndarray, gt: np.ndarray) -> float:
    """Mean normalized 3D reconstruction error over frames."""
    return float(e3d_per_frame(est, gt).mean())


def e_r(est_r: np.ndarray, gt_r: np.ndarray, return_details: bool = False):
    """Mean Frobenius rotation error after removing the global gauge.

    A single rotation Q (right-applied to every estimate) and an optional
    axis flip are fit to the ground truth before comparing; the
    pre-alignment value is available through ``return_details``.
    """
    est_r = np.asarray(est_r, dtype=np.float64)
    gt_r = np.asarray(gt_r, dtype=np.float64)
    if est_r.shape != gt_r.shape or est_r.ndim != 3:
        raise ShapeMismatch("rotation stacks must match as (F, 3, 3)")
    pre = float(
        np.linalg.norm((gt_r - est_r).reshape(len(gt_r), -1), axis=1).mean()
    )
    best = None
    for flipped, cand in ((False, est_r), (True, _FLIP @ est_r @ _FLIP)):
        S = np.einsum("fji,fjk->ik", gt_r, cand)  # sum_f gt_f^T cand_f
        Q = _project_unchecked(S)
        aligned = cand @ Q.T
        val = float(
            np.linalg.norm((gt_r - aligned).reshape(len(gt_r), -1), axis=1).mean()
        )
        if best is None or val < best[0]:
            best = (val, flipped, Q)
    value, flipped, Q = best
    if return_details:
        return value, {"preAlignment": pre, "flipped": flipped, "Q": Q}
    return value


def reprojection_error(W, R: BlockRotation, X: np.ndarray) -> float:
    """Relative data-fit residual ||W - R X||_F / ||W||_F."""
    Wd = W.data if isinstance(W, MeasurementMatrix) else np.asarray(W, np.float64)
    X3 = _frame_stack(X)
    F = X3.shape[0]
    if Wd.shape != (2 * F, X3.shape[2]):
        raise ShapeMismatch("W, R, X dimensions disagree")
    wn = float(np.linalg.norm(Wd))
    if wn <= 0.0:
        raise DegenerateInput("zero measurement matrix")
    pred = R.blocks @ X3
    return float(np.linalg.norm(Wd.reshape(F, 2, -1) - pred) / wn)
