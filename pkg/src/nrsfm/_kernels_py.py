"""Pure-numpy twins of the compiled per-frame kernels.

`nrsfm._backend` exposes either this module or the Cython extension
``nrsfm._kernels``; both implement the same signatures. Everything here is
vectorized over the leading frame axis so the fallback stays usable on
real sequence lengths.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"

_EPS_ANGLE = 1e-8
_WEISZFELD_GUARD = 1e-12


def skew(v: np.ndarray) -> np.ndarray:
    """Axis vectors (..., 3) -> skew-symmetric matrices (..., 3, 3)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(v: np.ndarray) -> np.ndarray:
    """Rodrigues exponential: axis-angle vectors (..., 3) -> rotations (..., 3, 3)."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1)[..., None, None]
    K = skew(v)
    K2 = K @ K
    small = theta < _EPS_ANGLE
    safe = np.where(small, 1.0, theta)
    # second-order series below the cutoff keeps the map smooth at the origin
    a = np.where(small, 1.0 - theta * theta / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta * theta / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    out = a * K + b * K2
    out[..., 0, 0] += 1.0
    out[..., 1, 1] += 1.0
    out[..., 2, 2] += 1.0
    return out


def so3_log(R: np.ndarray) -> np.ndarray:
    """Principal logarithm: rotations (..., 3, 3) -> axis-angle vectors (..., 3).

    Uses the skew-part formula away from the endpoints, a series near zero,
    and the diagonal extraction near pi where the skew part degenerates.
    """
    R = np.asarray(R, dtype=np.float64)
    tr = R[..., 0, 0] + R[..., 1, 1] + R[..., 2, 2]
    cos = np.clip((tr - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos)
    w = 0.5 * np.stack(
        [
            R[..., 2, 1] - R[..., 1, 2],
            R[..., 0, 2] - R[..., 2, 0],
            R[..., 1, 0] - R[..., 0, 1],
        ],
        axis=-1,
    )  # sin(theta) * axis
    sin = np.sin(theta)
    small = theta < _EPS_ANGLE
    near_pi = theta > np.pi - 1e-3
    generic = ~(small | near_pi)
    factor = np.ones_like(theta)
    factor[generic] = theta[generic] / sin[generic]
    factor[small] = 1.0 + theta[small] ** 2 / 6.0
    v = factor[..., None] * w
    if np.any(near_pi & ~small):
        idx = np.nonzero(near_pi & ~small)
        for flat in zip(*idx):
            Rf = R[flat]
            th = theta[flat]
            # R + I = 2*(cos(th)I + (1-cos th) aa^T + ...) ~ 2 a a^T at pi
            M = 0.5 * (Rf + np.eye(3))
            k = int(np.argmax(np.diag(M)))
            axis = M[:, k] / np.sqrt(max(M[k, k], 1e-30))
            axis = axis / np.linalg.norm(axis)
            if np.dot(axis, w[flat]) < 0.0:
                axis = -axis
            v[flat] = th * axis
    return v


def geodesic_angles(Ra: np.ndarray, Rb: np.ndarray) -> np.ndarray:
    """Geodesic distance in radians between rotation batches (..., 3, 3)."""
    Ra = np.asarray(Ra, dtype=np.float64)
    Rb = np.asarray(Rb, dtype=np.float64)
    tr = np.einsum("...ij,...ij->...", Ra, Rb)
    return np.arccos(np.clip((tr - 1.0) * 0.5, -1.0, 1.0))


def _sra_objective(samples, kept, R):
    # samples (F,S,3,3), kept (F,S) bool, R (F,3,3) -> (F,)
    ang = geodesic_angles(samples, R[:, None])
    return np.sum(np.where(kept, ang, 0.0), axis=1)


def weiszfeld_frames(
    samples: np.ndarray,
    kept: np.ndarray,
    R0: np.ndarray,
    eps_t: float,
    max_iter: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-frame geodesic L1 averaging of rotation samples.

    Parameters
    ----------
    samples : (F, S, 3, 3) rotation samples per frame.
    kept : (F, S) bool mask of samples to use.
    R0 : (F, 3, 3) starting rotations (projected elementwise medians).
    eps_t : stop once the tangent step norm drops below this.
    max_iter : iteration cap per frame.

    Returns
    -------
    (R, iters, objective, history) where R is (F, 3, 3), iters the accepted
    step count per frame, objective the final summed geodesic distance per
    frame, and history an (F, max_iter+1) trace of the objective after each
    evaluated iteration (NaN-padded; column 0 is the starting objective).

    Samples coinciding with the current estimate are dropped from the step
    (singularity guard); a step that would increase the objective is halved
    until it does not, so the objective is non-increasing by construction.
    """
    samples = np.ascontiguousarray(samples, dtype=np.float64)
    kept = np.asarray(kept, dtype=bool)
    R = np.ascontiguousarray(R0, dtype=np.float64).copy()
    F = R.shape[0]
    iters = np.zeros(F, dtype=np.int64)
    active = np.ones(F, dtype=bool)

    obj = _sra_objective(samples, kept, R)
    hist = np.full((F, max_iter + 1), np.nan)
    hist[:, 0] = obj
    pos = np.zeros(F, dtype=np.int64)
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        sub = samples[idx]
        rel = sub @ np.swapaxes(R[idx], -1, -2)[:, None]
        v = so3_log(rel)  # (f, S, 3)
        n = np.linalg.norm(v, axis=-1)
        use = kept[idx] & (n > _WEISZFELD_GUARD)
        inv = np.where(use, 1.0 / np.where(use, n, 1.0), 0.0)
        wsum = inv.sum(axis=1)
        num = (v * inv[..., None]).sum(axis=1)
        ok = wsum > 0.0
        dv = np.zeros((len(idx), 3))
        dv[ok] = num[ok] / wsum[ok, None]

        new_obj = obj[idx].copy()
        for _halve in range(40):
            Rn = so3_exp(dv) @ R[idx]
            cand = _sra_objective(sub, kept[idx], Rn)
            bad = ok & (cand > obj[idx] + _WEISZFELD_GUARD)
            if not bad.any():
                new_obj = np.where(ok, cand, obj[idx])
                break
            dv[bad] *= 0.5
        else:
            Rn = so3_exp(dv) @ R[idx]
            new_obj = np.where(ok, _sra_objective(sub, kept[idx], Rn), obj[idx])

        step = np.linalg.norm(dv, axis=-1)
        moved = ok & (step > 0.0)
        R[idx[moved]] = Rn[moved]
        obj[idx] = new_obj
        iters[idx[moved]] += 1
        pos[idx[ok]] += 1
        hist[idx[ok], pos[idx[ok]]] = new_obj[ok]
        done = (~ok) | (step < eps_t)
        active[idx[done]] = False

    return R, iters, obj, hist


def solve_x_frames(
    rows: np.ndarray, W2: np.ndarray, T: np.ndarray, rho: float
) -> np.ndarray:
    """Per-frame normal-equation solve of the data-plus-penalty problem.

    Minimizes 0.5*||W_f - R_f X_f||^2 + 0.5*rho*||X_f - T_f||^2 for every
    frame via the 3x3 system (R_f^T R_f + rho I) X_f = R_f^T W_f + rho T_f.

    Parameters
    ----------
    rows : (F, 2, 3) camera row pairs.
    W2 : (F, 2, P) measurements grouped per frame.
    T : (F, 3, P) penalty targets.
    rho : positive penalty weight.
    """
    rows = np.asarray(rows, dtype=np.float64)
    A = np.einsum("fij,fik->fjk", rows, rows)
    A[:, 0, 0] += rho
    A[:, 1, 1] += rho
    A[:, 2, 2] += rho
    rhs = np.einsum("fij,fip->fjp", rows, W2) + rho * T
    return np.linalg.solve(A, rhs)
