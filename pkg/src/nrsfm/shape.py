"""Low-rank shape recovery: pseudoinverse init, organic weights, ADMM.

The per-frame shapes stack into X (3F x P); the reshuffled view
X# = reshape_sharp(X) (F x 3P) is the matrix whose rank the prior
penalizes. The data term is fit per frame through the camera blocks while
a weighted partial sum of X#'s singular values (all but the first N,
weighted inversely to the initialization's spectrum) is shrunk by the
PSVT proximal step inside an ADMM loop with a growing penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from nrsfm import _backend
from nrsfm.errors import DegenerateInput, NonFinite, ShapeMismatch
from nrsfm.measurements import MeasurementMatrix
from nrsfm.rotation import BlockRotation


@dataclass
class ShapeSolverConfig:
    K: int | None = None
    N: int = 1  # leading singular values preserved by the threshold
    mu: float = 1.0
    xi: float | None = None  # None: 5e-3 * sqrt(sigma_1(X#_init))
    gamma: float = 1e-6
    rho0: float = 1e-4
    lam: float = 1.1  # penalty growth factor
    rho_max: float = 1e10
    eps: float = 1e-10
    eps_t: float = 1e-10
    max_iter: int = 500

    def __post_init__(self):
        if self.N < 0:
            raise ValueError("N must be nonnegative")
        if self.lam <= 1.0:
            raise ValueError("lam must exceed 1")
        for name in ("mu", "gamma", "rho0", "rho_max", "eps", "eps_t"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.xi is not None and self.xi <= 0:
            raise ValueError("xi must be positive when given")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class AdmmDiagnostics:
    """Per-iteration trace plus the exit condition of the ADMM loop."""

    iteration: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    residual: list = field(default_factory=list)
    rho: list = field(default_factory=list)
    exit_reason: str = "max_iter"

    @property
    def converged(self) -> bool:
        return self.exit_reason == "converged"

    @property
    def rho_cap_hit(self) -> bool:
        return self.exit_reason == "rho_cap"

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("iteration,objective,residual,rho\n")
            for row in zip(self.iteration, self.objective, self.residual, self.rho):
                fh.write("%d,%.12e,%.12e,%.12e\n" % row)


def reshape_sharp(X: np.ndarray) -> np.ndarray:
    """3F x P frame stack -> F x 3P with row f = [x-row | y-row | z-row]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] % 3 != 0:
        raise ShapeMismatch(f"expected 3F x P, got {X.shape}")
    F, P = X.shape[0] // 3, X.shape[1]
    return X.reshape(F, 3 * P)


def reshape_tall(Xs: np.ndarray) -> np.ndarray:
    """Inverse of reshape_sharp: F x 3P -> 3F x P."""
    Xs = np.asarray(Xs, dtype=np.float64)
    if Xs.ndim != 2 or Xs.shape[1] % 3 != 0:
        raise ShapeMismatch(f"expected F x 3P, got {Xs.shape}")
    F, P = Xs.shape[0], Xs.shape[1] // 3
    return Xs.reshape(3 * F, P)


def pinv_shape(R: BlockRotation, W: MeasurementMatrix) -> np.ndarray:
    """Minimum-norm least-squares shape: X_f = R_f^T (R_f R_f^T)^-1 W_f.

    With orthonormal camera blocks the inner inverse is the identity, so
    this is simply the back-projection R_f^T W_f per frame. The solution
    has no component along each camera's viewing direction, which is why a
    rank prior is needed downstream to pick among the many minimizers.
    """
    F = R.frames
    Wd = W.data if isinstance(W, MeasurementMatrix) else np.asarray(W, np.float64)
    if Wd.shape[0] != 2 * F:
        raise ShapeMismatch("W and R disagree on the frame count")
    W2 = Wd.reshape(F, 2, -1)
    gram = R.blocks @ np.swapaxes(R.blocks, -1, -2)  # (F, 2, 2)
    coeff = np.linalg.solve(gram, W2)
    X3 = np.einsum("fij,fip->fjp", R.blocks, coeff)
    return X3.reshape(3 * F, -1)


def compute_weights(Xinit_sharp: np.ndarray, cfg: ShapeSolverConfig) -> np.ndarray:
    """Inverse-magnitude weights on the tail of the init spectrum.

    theta[j] applies to singular value index N+j (0-based) of X#:
    theta = xi / (sigma_{N+j} + gamma), with xi defaulting to
    5e-3 * sqrt(sigma_1) of the initialization.
    """
    s = np.linalg.svd(np.asarray(Xinit_sharp, dtype=np.float64), compute_uv=False)
    if s[0] <= 0:
        raise DegenerateInput("initial shape estimate is identically zero")
    xi = cfg.xi if cfg.xi is not None else 5e-3 * np.sqrt(s[0])
    return xi / (s[cfg.N :] + cfg.gamma)


def psvt(Q: np.ndarray, N: int, tau) -> np.ndarray:
    """Partial singular value thresholding.

    Soft-thresholds all singular values past the first N by the per-index
    amounts in tau (scalar tau broadcasts), leaving sigma_1..sigma_N and the
    singular vectors untouched.
    """
    Q = np.asarray(Q, dtype=np.float64)
    U, s, Vt = np.linalg.svd(Q, full_matrices=False)
    m = s.size
    if N < 0:
        raise ValueError("N must be nonnegative")
    t = np.broadcast_to(np.asarray(tau, dtype=np.float64), (max(m - N, 0),))
    if np.any(t < 0):
        raise ValueError("thresholds must be nonnegative")
    s2 = s.copy()
    if N < m:
        s2[N:] = np.maximum(s[N:] - t[: m - N], 0.0)
    return (U * s2) @ Vt


def solve_x_subproblem(
    W, R: BlockRotation, Xsharp: np.ndarray, Y: np.ndarray, rho: float
) -> np.ndarray:
    """Closed-form X update: per-frame 3x3 normal equations of the
    data term plus the rho-penalty pulling X toward Phi^-1(X#) + Phi^-1(Y)/rho."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    Wd = W.data if isinstance(W, MeasurementMatrix) else np.asarray(W, np.float64)
    F = Xsharp.shape[0]
    P = Wd.shape[1]
    T = reshape_tall(Xsharp) + reshape_tall(Y) / rho
    X3 = _backend.solve_x_frames(
        np.ascontiguousarray(R.blocks),
        np.ascontiguousarray(Wd.reshape(F, 2, P)),
        np.ascontiguousarray(T.reshape(F, 3, P)),
        rho,
    )
    return X3.reshape(3 * F, P)


def _reprojection_sq(Wd: np.ndarray, R: BlockRotation, X: np.ndarray) -> float:
    F = R.frames
    P = Wd.shape[1]
    pred = R.blocks @ X.reshape(F, 3, P)
    return float(np.sum((Wd.reshape(F, 2, P) - pred) ** 2))


def admm_shape(
    W, R: BlockRotation, cfg: ShapeSolverConfig
) -> tuple[np.ndarray, AdmmDiagnostics]:
    """Alternating minimization for the weighted-rank shape objective.

    Initializes from the pseudoinverse solution, then repeats: X update
    (per-frame closed form), X# update (PSVT of Phi(X) - Y/rho with
    thresholds mu*theta/rho), dual ascent on Y, and penalty growth
    rho <- min(rho_max, lam*rho). The weights theta are computed once from
    the initialization spectrum and held fixed. Exits when the reshuffle
    constraint violation drops below eps, when rho hits its cap, or at
    max_iter; the reason lands in diagnostics.exit_reason.

    Returns (X, diagnostics) with X the final data-term iterate (3F x P).
    """
    Wd = W.data if isinstance(W, MeasurementMatrix) else np.asarray(W, np.float64)
    X = pinv_shape(R, W)
    Xsharp = reshape_sharp(X)
    theta = compute_weights(Xsharp, cfg)
    Y = np.zeros_like(Xsharp)
    rho = cfg.rho0
    diag = AdmmDiagnostics()

    for it in range(1, cfg.max_iter + 1):
        X = solve_x_subproblem(Wd, R, Xsharp, Y, rho)
        phiX = reshape_sharp(X)
        Xsharp = psvt(phiX - Y / rho, cfg.N, cfg.mu * theta / rho)
        Y = Y + rho * (Xsharp - phiX)
        gap = Xsharp - phiX
        residual = float(np.abs(gap).max())
        s = np.linalg.svd(Xsharp, compute_uv=False)
        tail = s[cfg.N :]
        objective = 0.5 * _reprojection_sq(Wd, R, X) + cfg.mu * float(
            theta[: tail.size] @ tail
        )
        if not np.isfinite(objective) or not np.isfinite(residual):
            raise NonFinite(f"ADMM iterate went non-finite at iteration {it}")
        diag.iteration.append(it)
        diag.objective.append(objective)
        diag.residual.append(residual)
        diag.rho.append(rho)
        if residual < cfg.eps:
            diag.exit_reason = "converged"
            break
        rho = min(cfg.rho_max, cfg.lam * rho)
        if rho >= cfg.rho_max:
            diag.exit_reason = "rho_cap"
            break
    return X, diag


def export_ply_frames(
    X: np.ndarray, directory: str | Path, prefix: str = "frame"
) -> list:
    """One ASCII PLY point cloud per frame; returns the written paths."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] % 3 != 0:
        raise ShapeMismatch("expected a 3F x P stack")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    F, P = X.shape[0] // 3, X.shape[1]
    paths = []
    for f in range(F):
        pts = X[3 * f : 3 * f + 3].T  # (P, 3)
        path = directory / f"{prefix}_{f:04d}.ply"
        with open(path, "w") as fh:
            fh.write(
                "ply\nformat ascii 1.0\n"
                f"element vertex {P}\n"
                "property float x\nproperty float y\nproperty float z\n"
                "end_header\n"
            )
            for x, y, z in pts:
                fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
        paths.append(path)
    return paths
