"""Per-frame rotations: lifting, registration, filtering and L1 fusion.

Each corrective triplet yields a 2F x 3 rotation candidate. Frames are
lifted to full SO(3) elements, all candidate columns are registered to the
first (reference) column by a global Procrustes rotation, samples far from
the reference are dropped, and the survivors of each frame are fused by a
Weiszfeld iteration for the geodesic L1 mean. The fused rotations, with
their third rows dropped, form the block-diagonal camera matrix R.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nrsfm import _backend
from nrsfm.errors import DegenerateFrame, DegenerateProjection, ShapeMismatch

_FLIP = np.diag([1.0, 1.0, -1.0])

DEFAULT_EPS_T = 1e-3
DEFAULT_SRA_ITERS = 50


@dataclass
class FrameRotationSet:
    """Rotation samples per frame: one column per source triplet.

    rotations is (F, S, 3, 3); kept marks the samples that survived
    filtering (the reference column 0 is never dropped, so every frame
    keeps at least one sample).
    """

    rotations: np.ndarray
    source_triplet: np.ndarray
    kept: np.ndarray

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.source_triplet = np.asarray(self.source_triplet, dtype=int)
        self.kept = np.asarray(self.kept, dtype=bool)
        if self.rotations.ndim != 4 or self.rotations.shape[2:] != (3, 3):
            raise ShapeMismatch("rotations must be (F, S, 3, 3)")
        F, S = self.rotations.shape[:2]
        if F < 1 or S < 1:
            raise ShapeMismatch("need at least one frame and one sample")
        if self.source_triplet.shape != (S,) or self.kept.shape != (F, S):
            raise ShapeMismatch("source_triplet/kept shapes do not match")
        RRt = self.rotations @ np.swapaxes(self.rotations, -1, -2)
        err = np.linalg.norm((RRt - np.eye(3)).reshape(F, S, 9), axis=-1)
        if err.size and err.max() > 1e-9:
            raise ShapeMismatch(
                f"sample deviates from orthogonality by {err.max():.3e}"
            )
        det = np.linalg.det(self.rotations)
        if det.min() < 1.0 - 1e-9:
            raise ShapeMismatch(f"improper rotation sample, det={det.min():.12f}")
        if not self.kept.any(axis=1).all():
            raise ShapeMismatch("a frame lost all its samples")

    @property
    def frames(self) -> int:
        return self.rotations.shape[0]

    @property
    def num_samples(self) -> int:
        return self.rotations.shape[1]

    def column(self, k: int) -> np.ndarray:
        return self.rotations[:, k]


@dataclass
class BlockRotation:
    """Camera row pairs; frame f occupies rows 2f..2f+1, cols 3f..3f+2."""

    blocks: np.ndarray  # (F, 2, 3)

    def __post_init__(self):
        self.blocks = np.asarray(self.blocks, dtype=np.float64)
        if self.blocks.ndim != 3 or self.blocks.shape[1:] != (2, 3):
            raise ShapeMismatch("blocks must be (F, 2, 3)")
        gram = self.blocks @ np.swapaxes(self.blocks, -1, -2)
        if np.linalg.norm((gram - np.eye(2)).reshape(-1, 4), axis=-1).max() > 1e-9:
            raise ShapeMismatch("camera blocks must have orthonormal rows")

    @property
    def frames(self) -> int:
        return self.blocks.shape[0]

    @property
    def assembled(self) -> np.ndarray:
        """Dense 2F x 3F block-diagonal matrix."""
        F = self.frames
        out = np.zeros((2 * F, 3 * F))
        for f in range(F):
            out[2 * f : 2 * f + 2, 3 * f : 3 * f + 3] = self.blocks[f]
        return out

    def stacked_rows(self) -> np.ndarray:
        """The blocks as a 2F x 3 stack (same layout as rotation candidates)."""
        return self.blocks.reshape(-1, 3)


def _project_unchecked(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    if np.linalg.det(U @ Vt) < 0.0:
        U = U.copy()
        U[:, -1] = -U[:, -1]
    return U @ Vt


def project_so3(M: np.ndarray) -> np.ndarray:
    """Nearest proper rotation in Frobenius norm (SVD sign correction)."""
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (3, 3):
        raise ShapeMismatch("project_so3 expects a 3x3 matrix")
    s = np.linalg.svd(M, compute_uv=False)
    if s[-1] <= 1e-12:
        raise DegenerateProjection(
            f"matrix is rank deficient (smallest singular value {s[-1]:.3e})"
        )
    return _project_unchecked(M)


def lift_to_so3(candidate: np.ndarray, flip: bool = False):
    """Lift stacked 2x3 camera blocks to rotations.

    Each block is projected to the nearest orthonormal row pair (its SVD
    with singular values replaced by 1) and completed with the cross
    product, so the determinant is +1 by construction. With ``flip`` the
    third column of the candidate is negated first, which realizes the
    reflected interpretation of the same triplet.

    Returns (rotations (F, 3, 3), quality (F,)) where quality is the
    relative singular-value gap |s1-s2|/(s1+s2) of each block: 0 for a
    perfectly orthonormal pair.
    """
    C = np.asarray(candidate, dtype=np.float64)
    if C.ndim != 2 or C.shape[1] != 3 or C.shape[0] % 2 != 0:
        raise ShapeMismatch("candidate must be 2F x 3")
    if flip:
        C = C @ _FLIP
    F = C.shape[0] // 2
    R = np.empty((F, 3, 3))
    quality = np.empty(F)
    for f in range(F):
        B = C[2 * f : 2 * f + 2]
        norms = np.linalg.norm(B, axis=1)
        if norms.min() < 1e-300:
            raise DegenerateFrame(f)
        un = B[0] / norms[0]
        vn = B[1] / norms[1]
        angle = np.arctan2(np.linalg.norm(np.cross(un, vn)), float(un @ vn))
        if angle < 1e-6 or angle > np.pi - 1e-6:
            raise DegenerateFrame(f)
        U, s, Vt = np.linalg.svd(B, full_matrices=False)
        O = U @ Vt
        R[f, 0] = O[0]
        R[f, 1] = O[1]
        R[f, 2] = np.cross(O[0], O[1])
        quality[f] = abs(s[0] - s[1]) / (s[0] + s[1])
    return R, quality


@dataclass
class RegistrationResult:
    rreg: np.ndarray  # (3, 3) global alignment rotation
    registered: np.ndarray  # (F, 3, 3)
    residual: float  # sum_f ||ref_f - registered_f||_F^2
    flipped: bool


def _register_one(reference: np.ndarray, other: np.ndarray):
    S = np.einsum("fji,fjk->ik", reference, other)
    rreg = _project_unchecked(S)
    registered = other @ rreg.T
    residual = float(np.sum((reference - registered) ** 2))
    return rreg, registered, residual


def register_rotations(
    reference: np.ndarray, other: np.ndarray
) -> RegistrationResult:
    """Globally align a candidate rotation column to the reference column.

    Solves the orthogonal Procrustes problem min_Q sum_f ||ref_f - oth_f
    Q^T||_F^2 over proper rotations Q, for both the candidate and its
    axis-flipped variant (the reflected lift, J R J with J = diag(1,1,-1)),
    and keeps whichever registration has the lower residual. The flip trial
    is needed because a triplet is only recoverable up to a gauge that can
    include a reflection.
    """
    reference = np.asarray(reference, dtype=np.float64)
    other = np.asarray(other, dtype=np.float64)
    if reference.shape != other.shape or reference.ndim != 3:
        raise ShapeMismatch("reference/other must both be (F, 3, 3)")
    rreg, registered, residual = _register_one(reference, other)
    flipped_other = _FLIP @ other @ _FLIP
    rreg_f, registered_f, residual_f = _register_one(reference, flipped_other)
    if residual_f < residual:
        return RegistrationResult(rreg_f, registered_f, residual_f, True)
    return RegistrationResult(rreg, registered, residual, False)


def filter_samples(rotset: FrameRotationSet, delta: float) -> FrameRotationSet:
    """Drop non-reference samples farther than delta (geodesic radians)
    from the frame's reference sample. Column 0 is always kept."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    F, S = rotset.frames, rotset.num_samples
    ref = rotset.rotations[:, 0]
    kept = rotset.kept.copy()
    for k in range(1, S):
        d = _backend.geodesic_angles(rotset.rotations[:, k], ref)
        kept[:, k] &= d <= delta
    kept[:, 0] = True
    return FrameRotationSet(
        rotations=rotset.rotations, source_triplet=rotset.source_triplet, kept=kept
    )


def median_init(samples: np.ndarray) -> np.ndarray:
    """Elementwise lower median of the sample matrices, projected to SO(3)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3 or samples.shape[0] < 1:
        raise ShapeMismatch("need a nonempty (S, 3, 3) sample stack")
    S = samples.shape[0]
    med = np.sort(samples, axis=0)[(S - 1) // 2]
    return project_so3(med)


def weiszfeld_sra(
    samples: np.ndarray,
    eps_t: float = DEFAULT_EPS_T,
    max_iter: int = DEFAULT_SRA_ITERS,
    init: np.ndarray | None = None,
    return_trace: bool = False,
):
    """Geodesic L1 average (single rotation averaging) of one sample set.

    Starts at the projected elementwise median and applies Weiszfeld steps
    v_i = log(R_i R_avg^T), dv = (sum v_i/||v_i||) / (sum 1/||v_i||),
    R_avg <- exp(dv) R_avg until ||dv|| < eps_t or max_iter. Samples
    coinciding with the current estimate (||v_i|| < 1e-12) are excluded
    from both sums; if everything coincides the current estimate is kept.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3 or samples.shape[0] < 1:
        raise ShapeMismatch("need a nonempty (S, 3, 3) sample stack")
    R0 = median_init(samples) if init is None else np.asarray(init, dtype=np.float64)
    kept = np.ones((1, samples.shape[0]), dtype=bool)
    R, iters, obj, hist = _backend.weiszfeld_frames(
        samples[None], kept, R0[None], eps_t, max_iter
    )
    if return_trace:
        trace = {
            "iterations": int(iters[0]),
            "objective": float(obj[0]),
            "history": hist[0][~np.isnan(hist[0])],
        }
        return R[0], trace
    return R[0]


def average_rotations(
    rotset: FrameRotationSet,
    eps_t: float = DEFAULT_EPS_T,
    max_iter: int = DEFAULT_SRA_ITERS,
):
    """Per-frame Weiszfeld fusion over the kept samples of every frame.

    Returns (avg (F, 3, 3), iterations (F,), objective (F,)).
    """
    F, S = rotset.frames, rotset.num_samples
    R0 = np.empty((F, 3, 3))
    for f in range(F):
        R0[f] = median_init(rotset.rotations[f][rotset.kept[f]])
    R, iters, obj, _ = _backend.weiszfeld_frames(
        rotset.rotations, rotset.kept, R0, eps_t, max_iter
    )
    return R, iters, obj


def assemble_block_rotation(avg: np.ndarray) -> BlockRotation:
    """Drop third rows: frame f's camera block is rows 0-1 of avg_f."""
    avg = np.asarray(avg, dtype=np.float64)
    if avg.ndim != 3 or avg.shape[1:] != (3, 3) or avg.shape[0] < 1:
        raise ShapeMismatch("avg must be (F, 3, 3) with F >= 1")
    return BlockRotation(blocks=avg[:, :2].copy())


def geodesic_distance(R1: np.ndarray, R2: np.ndarray) -> float:
    """Rotation angle of R1 R2^T in radians, in [0, pi]."""
    R1 = np.asarray(R1, dtype=np.float64)
    R2 = np.asarray(R2, dtype=np.float64)
    tr = float(np.sum(R1 * R2))
    return float(np.arccos(np.clip((tr - 1.0) * 0.5, -1.0, 1.0)))
