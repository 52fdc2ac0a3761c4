"""Rank-3K factorization of the measurement matrix and corrective triplets.

W factors as Mhat @ Bhat with a 3K x 3K gauge ambiguity. A corrective
triplet G (3K x 3) is a slice of that gauge chosen so every frame's 2x3
block of Mhat @ G has equal-norm orthogonal rows, i.e. looks like a scaled
camera row pair. The orthonormality constraints are linear in the Gram
matrix Q = G @ G.T, so candidate Q's live in the near-null space of a
constraint matrix A acting on vech(Q); refinement then polishes G directly.

vech convention: column-major lower triangle, so for n x n symmetric Q the
entry order is (0,0),(1,0),...,(n-1,0),(1,1),...  Off-diagonal entries of
the constraint rows carry the factor 2 from Q's symmetry, which makes
A @ vech(Q) evaluate the quadratic forms exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from nrsfm.errors import (
    InsufficientTriplets,
    MalformedInput,
    NoSolutionSpace,
    NumericalFailure,
    RankTooLarge,
)
from nrsfm.measurements import MeasurementMatrix

_NULL_TOL = 1e-6  # near-null cutoff on singular values of A, relative
_NULL_FALLBACK_TOL = 0.1  # noisy data: accept the smallest directions up to this
_CLUSTER_DEG = 5.0  # principal-angle clustering threshold, degrees
_STEP_TOL = 1e-10
_MAX_REFINE = 500
_AP_ITERS = 200  # alternating projections onto null space / rank-3 PSD cone


@dataclass
class TruncatedFactors:
    """SVD split W ~ Mhat @ Bhat at rank 3K, symmetric sqrt of the spectrum."""

    mhat: np.ndarray  # (2F, 3K)
    bhat: np.ndarray  # (3K, P)
    singular_values: np.ndarray  # (3K,)

    @property
    def frames(self) -> int:
        return self.mhat.shape[0] // 2

    @property
    def num_basis(self) -> int:
        return self.mhat.shape[1] // 3


@dataclass
class CorrectiveTriplet:
    """One corrective column triple and the rotation candidate it induces.

    residual is the summed orthonormality violation
    sum_f (a_f - c_f)^2 + 2 b_f^2 with [a b; b c] = Mhat_f G G^T Mhat_f^T,
    evaluated after scaling G so that sum_f (a_f + c_f) = 2F.
    rotation_candidate stacks the per-frame 2x3 blocks of Mhat @ G with each
    pair divided by its mean row norm.
    """

    g: np.ndarray  # (3K, 3)
    residual: float
    rotation_candidate: np.ndarray  # (2F, 3)

    def to_json_dict(self, k: int) -> dict:
        return {
            "k": k,
            "residual": self.residual,
            "G": [float(x) for x in self.g.ravel()],
        }


def truncated_factor(W: MeasurementMatrix, K: int) -> TruncatedFactors:
    """Best rank-3K factorization of a centered measurement matrix."""
    if K < 1:
        raise RankTooLarge("K must be at least 1")
    if not W.centered:
        raise MalformedInput("measurement matrix must be mean-centered first")
    r = 3 * K
    if r > min(2 * W.frames, W.points):
        raise RankTooLarge(
            f"rank 3K={r} exceeds min(2F, P)={min(2 * W.frames, W.points)}"
        )
    U, s, Vt = np.linalg.svd(W.data, full_matrices=False)
    root = np.sqrt(s[:r])
    return TruncatedFactors(
        mhat=U[:, :r] * root,
        bhat=root[:, None] * Vt[:r],
        singular_values=s[:r].copy(),
    )


def _vech_index(n: int):
    # column-major lower triangle: swap triu's row-major upper indices
    r, c = np.triu_indices(n)
    return c, r


def _form_rows(X: np.ndarray, Y: np.ndarray, rows, cols, diag) -> np.ndarray:
    """vech coefficient rows of the bilinear form x^T Q y for row batches."""
    C = X[:, :, None] * Y[:, None, :] + Y[:, :, None] * X[:, None, :]
    out = C[:, rows, cols]
    out[:, diag] *= 0.5
    return out


def build_constraint_matrix(factors: TruncatedFactors) -> np.ndarray:
    """Per frame, two linear constraints on vech(Q): equal squared row norms
    and row orthogonality of the corrected motion block. Returns (2F, d),
    d = 3K(3K+1)/2."""
    M = factors.mhat
    n = M.shape[1]
    rows, cols = _vech_index(n)
    diag = rows == cols
    u = M[0::2]
    v = M[1::2]
    A = np.empty((M.shape[0], rows.size))
    A[0::2] = _form_rows(u, u, rows, cols, diag) - _form_rows(v, v, rows, cols, diag)
    A[1::2] = _form_rows(u, v, rows, cols, diag)
    return A


def _scale_row(factors: TruncatedFactors) -> np.ndarray:
    """vech coefficients of sum_f (u_f^T Q u_f + v_f^T Q v_f)."""
    M = factors.mhat
    n = M.shape[1]
    rows, cols = _vech_index(n)
    diag = rows == cols
    return _form_rows(M, M, rows, cols, diag).sum(axis=0)


def _unvech(vals: np.ndarray, n: int) -> np.ndarray:
    rows, cols = _vech_index(n)
    Q = np.zeros((n, n))
    Q[rows, cols] = vals
    Q[cols, rows] = vals
    return Q


def _near_null_basis(A: np.ndarray):
    """Eigen-split of A^T A with the near-null directions marked.

    Clean data: directions with singular value <= 1e-6 * max; for K basis
    shapes there are 2K^2 - K of them. Noise inflates those values past the
    strict cutoff, so when the strict set is empty we keep the 2K^2 - K
    smallest directions instead, provided the smallest stays below
    0.1 * max. Input with no motion structure at all fails even that and
    raises NoSolutionSpace.

    Returns (eigvals ascending, eigvecs, near-null mask).
    """
    lam, V = np.linalg.eigh(A.T @ A)
    lam = np.clip(lam, 0.0, None)
    s = np.sqrt(lam)
    if s[-1] <= 0.0:
        return lam, V, np.ones(s.size, dtype=bool)
    mask = s <= _NULL_TOL * s[-1]
    if not mask.any():
        if s[0] > _NULL_FALLBACK_TOL * s[-1]:
            raise NoSolutionSpace(
                "constraint matrix has no near-null direction; no corrective "
                "Gram candidate exists at this rank"
            )
        d = s.size
        n = int(round((np.sqrt(8 * d + 1) - 1) / 2))  # d = n(n+1)/2
        K = n // 3
        m = min(max(2 * K * K - K, 1), d)
        mask = np.zeros(d, dtype=bool)
        mask[:m] = True
    return lam, V, mask


def _project_rank3_psd(Q: np.ndarray, scale_row: np.ndarray, F: int) -> np.ndarray:
    """Nearest PSD rank-3 matrix (eigenvalue clip), rescaled onto the
    sum_f (a_f + c_f) = 2F slice when that scale is positive."""
    Q = 0.5 * (Q + Q.T)
    w, U = np.linalg.eigh(Q)
    w = w.copy()
    if w.size > 3:
        w[:-3] = 0.0
    w = np.maximum(w, 0.0)
    Q3 = (U * w) @ U.T
    n = Q.shape[0]
    rows, cols = _vech_index(n)
    vals = Q3[rows, cols]
    sval = float(scale_row @ vals)
    if sval > 1e-30:
        Q3 = Q3 * (2.0 * F / sval)
    return Q3


def solve_gram(A: np.ndarray, factors: TruncatedFactors) -> np.ndarray:
    """Least-squares Gram candidate Q restricted to the near-null space of A.

    Minimizes ||A vech(Q)||^2 over the slice sum_f(a_f + c_f) = 2F by a
    weighted quadratic program in the near-null eigenbasis of A^T A, then
    projects to the PSD rank-3 cone (eigenvalues past the third clipped).
    """
    lam, V, mask = _near_null_basis(A)
    c = _scale_row(factors)
    V0 = V[:, mask]
    g = V0.T @ c
    reg = max(1e-12 * float(lam[-1]), 1e-30)
    dinv = 1.0 / (lam[mask] + reg)
    denom = float(g @ (dinv * g))
    if not np.isfinite(denom) or denom <= 1e-30:
        raise NoSolutionSpace(
            "scale slice is unattainable within the near-null space"
        )
    alpha = (2.0 * factors.frames / denom) * (dinv * g)
    Q = _unvech(V0 @ alpha, factors.mhat.shape[1])
    return _project_rank3_psd(Q, c, factors.frames)


def _gram_columns(Q: np.ndarray) -> np.ndarray:
    """Factor a PSD rank<=3 Gram matrix into G (n x 3) columns."""
    w, U = np.linalg.eigh(Q)
    w = np.maximum(w[-3:], 0.0)
    return U[:, -3:] * np.sqrt(w)


def _normalize_scale(G: np.ndarray, M: np.ndarray) -> np.ndarray:
    s = float(np.sum((M @ G) ** 2))  # = sum_f (a_f + c_f)
    if s < 1e-30:
        raise NumericalFailure("corrective triplet collapses the motion factor")
    return G * np.sqrt(M.shape[0] / s)


def _residual_terms(G: np.ndarray, M: np.ndarray):
    MG = M @ G  # (2F, 3)
    p = MG[0::2]
    q = MG[1::2]
    r1 = np.sum(p * p, axis=1) - np.sum(q * q, axis=1)
    r2 = np.sqrt(2.0) * np.sum(p * q, axis=1)
    return MG, p, q, np.concatenate([r1, r2])


def triplet_residual(G: np.ndarray, factors: TruncatedFactors) -> float:
    """Orthonormality violation of Mhat @ G after scale normalization."""
    G = _normalize_scale(np.asarray(G, dtype=np.float64), factors.mhat)
    _, _, _, r = _residual_terms(G, factors.mhat)
    return float(r @ r)


def refine_triplet(G0: np.ndarray, factors: TruncatedFactors) -> CorrectiveTriplet:
    """Damped Gauss-Newton on the orthonormality residual.

    The scale constraint is re-imposed by renormalizing after every trial
    step; a step is accepted only if it does not increase the residual, with
    the damping multiplier adapted in the usual Levenberg fashion. Stops when
    the accepted step norm falls below 1e-10 or after 500 iterations.
    """
    M = factors.mhat
    G = _normalize_scale(np.asarray(G0, dtype=np.float64).copy(), M)
    F = factors.frames
    u = M[0::2]
    v = M[1::2]
    nparams = G.size

    _, p, q, r = _residual_terms(G, M)
    res = float(r @ r)
    if not np.isfinite(res):
        raise NumericalFailure("non-finite residual at the starting point")

    damp = 1e-3
    for _ in range(_MAX_REFINE):
        # J rows: d r1_f / dG = 2(u p^T - v q^T); d r2_f / dG = sqrt2 (u q^T + v p^T)
        J1 = 2.0 * (
            u[:, :, None] * p[:, None, :] - v[:, :, None] * q[:, None, :]
        ).reshape(F, nparams)
        J2 = np.sqrt(2.0) * (
            u[:, :, None] * q[:, None, :] + v[:, :, None] * p[:, None, :]
        ).reshape(F, nparams)
        J = np.vstack([J1, J2])
        JtJ = J.T @ J
        Jtr = J.T @ r
        accepted = False
        for _try in range(60):
            H = JtJ + damp * np.eye(nparams)
            try:
                delta = np.linalg.solve(H, Jtr)
            except np.linalg.LinAlgError:
                damp *= 10.0
                continue
            Gn = _normalize_scale(G - delta.reshape(G.shape), M)
            _, pn, qn, rn = _residual_terms(Gn, M)
            resn = float(rn @ rn)
            if not np.isfinite(resn):
                raise NumericalFailure("non-finite residual during refinement")
            if resn <= res:
                accepted = True
                break
            damp *= 10.0
            if damp > 1e14:
                break
        if not accepted:
            break
        step = float(np.linalg.norm(delta))
        G, p, q, r, res = Gn, pn, qn, rn, resn
        damp = max(damp * 0.1, 1e-12)
        if step < _STEP_TOL:
            break

    MG = M @ G
    cand = MG.copy()
    norms = np.linalg.norm(MG, axis=1)
    mean = 0.5 * (norms[0::2] + norms[1::2])
    scale = np.repeat(np.maximum(mean, 1e-300), 2)
    cand /= scale[:, None]
    return CorrectiveTriplet(g=G, residual=res, rotation_candidate=cand)


def _alternate_to_cone(
    q0: np.ndarray, V0: np.ndarray, g: np.ndarray, target: float, n: int
) -> np.ndarray:
    """Alternating projections between the near-null slice and the rank-3
    PSD cone, realizing the subspace/cone intersection search.

    q0 is a vech vector; V0 an orthonormal near-null basis; g = V0^T c the
    scale-constraint coefficients in that basis; target the slice value.
    Returns the PSD rank-3 iterate (vech). Convergence can be slow, so the
    loop is capped and refinement is expected to finish the job.
    """
    rows, cols = _vech_index(n)
    gg = float(g @ g)

    def onto_slice(q):
        a = V0.T @ q
        if gg > 1e-30:
            a = a + g * ((target - float(g @ a)) / gg)
        return V0 @ a

    def onto_cone(q):
        w, U = np.linalg.eigh(_unvech(q, n))
        if w.size > 3:
            w[:-3] = 0.0
        w = np.maximum(w, 0.0)
        return ((U * w) @ U.T)[rows, cols]

    q = onto_slice(q0)
    q_psd = onto_cone(q)
    for _ in range(_AP_ITERS):
        q = onto_slice(q_psd)
        q_next = onto_cone(q)
        if np.linalg.norm(q_next - q_psd) < 1e-12:
            return q_next
        q_psd = q_next
    return q_psd


def _principal_angle_deg(G1: np.ndarray, G2: np.ndarray) -> float:
    """Largest principal angle between the column spaces, in degrees."""
    Q1, _ = np.linalg.qr(G1)
    Q2, _ = np.linalg.qr(G2)
    s = np.linalg.svd(Q1.T @ Q2, compute_uv=False)
    return float(np.degrees(np.arccos(np.clip(s.min(), -1.0, 1.0))))


def extract_triplets(
    factors: TruncatedFactors,
    A: np.ndarray,
    K: int,
    seed: int,
    restarts: int,
) -> list[CorrectiveTriplet]:
    """All K corrective triplets via refined restarts.

    Restart 0 starts from solve_gram's projected solution; the rest from
    random directions of the near-null space. Every start is pushed toward
    the intersection of the null slice with the rank-3 PSD cone by
    alternating projections, then polished by Gauss-Newton. Converged
    triplets are clustered by the largest principal angle between column
    spaces (5 degree threshold, G and -G land together by construction).

    The cluster reached from the solve_gram start supplies the reference
    triplet at index 0. On sequences dominated by a rigid component that
    start refines to a triplet whose per-frame scale keeps one sign, so
    the lifted rotations are free of frame-wise half-turn flips; exact
    orthonormality residuals alone cannot distinguish such a triplet from
    the sign-flipping mixtures that share the constraint set. The
    remaining representatives follow in ascending residual order.
    """
    if restarts < K:
        raise ValueError(f"restarts={restarts} must be at least K={K}")
    lam, V, mask = _near_null_basis(A)
    Q0 = solve_gram(A, factors)
    c = _scale_row(factors)
    n = factors.mhat.shape[1]
    rows, cols = _vech_index(n)
    target = 2.0 * factors.frames
    V0 = V[:, mask]
    g = V0.T @ c
    m = V0.shape[1]

    rng = np.random.default_rng(seed)
    starts = [Q0[rows, cols]]
    for _ in range(restarts - 1):
        starts.append(V0 @ rng.standard_normal(m))

    anchor: CorrectiveTriplet | None = None
    refined: list[CorrectiveTriplet] = []
    for i, q in enumerate(starts):
        try:
            q_cone = _alternate_to_cone(q, V0, g, target, n)
            t = refine_triplet(_gram_columns(_unvech(q_cone, n)), factors)
        except NumericalFailure:
            continue
        if i == 0:
            anchor = t
        refined.append(t)

    refined.sort(key=lambda t: (t.residual, tuple(t.g.ravel())))
    reps: list[CorrectiveTriplet] = []
    for t in refined:
        if all(_principal_angle_deg(t.g, r.g) > _CLUSTER_DEG for r in reps):
            reps.append(t)
    if anchor is not None:
        for j, r in enumerate(reps):
            if _principal_angle_deg(anchor.g, r.g) <= _CLUSTER_DEG:
                reps.insert(0, reps.pop(j))
                break
    if len(reps) < K:
        raise InsufficientTriplets(len(reps), K, triplets=reps)
    return reps[:K]


def dump_triplets(triplets: list[CorrectiveTriplet], path: str | Path) -> None:
    """Write triplets as a JSON list of {k, residual, G row-major}."""
    payload = [t.to_json_dict(k + 1) for k, t in enumerate(triplets)]
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
