"""Measurement-matrix ingestion, centering, synthesis and file formats.

A tracked sequence is a 2F x P matrix: two rows per frame (x then y image
coordinates of the P points). On-disk formats:

* CSV: plain decimal text, comma separated, 2F rows by P columns, no header.
* ``NRSM`` binary: magic ``NRSM``, version u16 = 1, F u32, P u32, then
  2F*P little-endian float64, row-major. Ground-truth shapes use the same
  header with magic ``NRSG`` and 3F*P payload values.
* ``NRSR`` binary: magic ``NRSR``, version u16 = 1, F u32, then F blocks of
  9 little-endian float64 (row-major 3x3 rotations).
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from nrsfm.errors import (
    AlreadyCentered,
    IllPosedWarning,
    MalformedInput,
    ParseError,
    ShapeMismatch,
)

_VERSION = 1
_MAGIC_TRACKS = b"NRSM"
_MAGIC_SHAPES = b"NRSG"
_MAGIC_ROTATIONS = b"NRSR"


@dataclass
class MeasurementMatrix:
    """Tracked 2D points: two rows (x, y) per frame, one column per point."""

    data: np.ndarray
    frames: int
    points: int
    translations: np.ndarray | None = None
    centered: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.frames < 1 or self.points < 1:
            raise ShapeMismatch("need at least one frame and one point")
        if self.data.shape != (2 * self.frames, self.points):
            raise ShapeMismatch(
                f"data is {self.data.shape}, expected {(2 * self.frames, self.points)}"
            )
        if self.centered:
            resid = np.abs(self.data.sum(axis=1)).max()
            if resid > 1e-9 * self.points:
                raise ShapeMismatch(
                    f"centered flag set but max row sum is {resid:.3e}"
                )

    def frame_rows(self, f: int) -> np.ndarray:
        """The (2, P) x/y block of frame f (0-indexed)."""
        return self.data[2 * f : 2 * f + 2]


@dataclass
class SyntheticModel:
    """Low-rank generative model: per-frame shape is a mix of K basis shapes."""

    basis: list[np.ndarray]  # K matrices of shape (3, P)
    coefficients: np.ndarray  # (F, K)
    rotations: np.ndarray  # (F, 3, 3), proper rotations
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.basis = [np.asarray(b, dtype=np.float64) for b in self.basis]
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        K = len(self.basis)
        if K < 1:
            raise ShapeMismatch("need at least one basis shape")
        P = self.basis[0].shape[1]
        for b in self.basis:
            if b.shape != (3, P):
                raise ShapeMismatch("basis shapes must all be 3 x P")
        F = self.coefficients.shape[0]
        if self.coefficients.shape != (F, K):
            raise ShapeMismatch("coefficients must be F x K")
        if self.rotations.shape != (F, 3, 3):
            raise ShapeMismatch("rotations must be F x 3 x 3")
        eye = np.eye(3)
        for f in range(F):
            R = self.rotations[f]
            if np.abs(R @ R.T - eye).max() > 1e-12 or np.linalg.det(R) < 1.0 - 1e-12:
                raise ShapeMismatch(f"rotation {f} is not a proper rotation")
        if self.noise_sigma < 0:
            raise ShapeMismatch("noise_sigma must be nonnegative")

    @property
    def num_basis(self) -> int:
        return len(self.basis)

    @property
    def num_frames(self) -> int:
        return self.coefficients.shape[0]

    @property
    def num_points(self) -> int:
        return self.basis[0].shape[1]


def load_measurements(path: str | Path, format: str = "csv") -> MeasurementMatrix:
    """Read a track file. ``format`` is ``csv`` or ``binary``.

    The returned matrix is uncentered regardless of its values.
    """
    path = Path(path)
    if format == "csv":
        data = _read_csv(path)
    elif format == "binary":
        data = _read_binary(path, _MAGIC_TRACKS, rows_per_frame=2)
    else:
        raise ValueError(f"unknown format {format!r}")
    if data.shape[0] % 2 != 0:
        raise MalformedInput(f"{path}: odd row count {data.shape[0]}")
    return MeasurementMatrix(
        data=data, frames=data.shape[0] // 2, points=data.shape[1]
    )


def save_measurements(W: MeasurementMatrix, path: str | Path, format: str = "csv") -> None:
    path = Path(path)
    if format == "csv":
        _write_csv(W.data, path)
    elif format == "binary":
        _write_binary(W.data, path, _MAGIC_TRACKS, W.frames, W.points)
    else:
        raise ValueError(f"unknown format {format!r}")


def load_shapes(path: str | Path) -> np.ndarray:
    """Read a 3F x P ground-truth shape stack from an ``NRSG`` file."""
    return _read_binary(Path(path), _MAGIC_SHAPES, rows_per_frame=3)


def save_shapes(X: np.ndarray, path: str | Path) -> None:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] % 3 != 0:
        raise ShapeMismatch("shape stack must have 3F rows")
    _write_binary(X, Path(path), _MAGIC_SHAPES, X.shape[0] // 3, X.shape[1])


def load_rotations(path: str | Path) -> np.ndarray:
    """Read per-frame 3x3 rotations from an ``NRSR`` file, as (F, 3, 3)."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC_ROTATIONS:
        raise MalformedInput(f"{path}: bad magic {raw[:4]!r}")
    version, F = struct.unpack_from("<HI", raw, 4)
    if version != _VERSION:
        raise MalformedInput(f"{path}: unsupported version {version}")
    payload = np.frombuffer(raw, dtype="<f8", offset=10)
    if payload.size != 9 * F:
        raise MalformedInput(f"{path}: expected {9 * F} values, got {payload.size}")
    return payload.reshape(F, 3, 3).astype(np.float64)


def save_rotations(R: np.ndarray, path: str | Path) -> None:
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 3 or R.shape[1:] != (3, 3):
        raise ShapeMismatch("rotations must be (F, 3, 3)")
    header = _MAGIC_ROTATIONS + struct.pack("<HI", _VERSION, R.shape[0])
    Path(path).write_bytes(header + R.astype("<f8").tobytes())


def mean_center(W: MeasurementMatrix) -> MeasurementMatrix:
    """Remove each row's mean; the means are kept so centering is invertible."""
    if W.centered:
        raise AlreadyCentered("measurement matrix is already centered")
    means = W.data.mean(axis=1)
    return MeasurementMatrix(
        data=W.data - means[:, None],
        frames=W.frames,
        points=W.points,
        translations=means,
        centered=True,
    )


def uncenter(W: MeasurementMatrix) -> MeasurementMatrix:
    """Add the stored per-row translations back."""
    if not W.centered or W.translations is None:
        raise ShapeMismatch("matrix has no stored translations")
    return MeasurementMatrix(
        data=W.data + W.translations[:, None],
        frames=W.frames,
        points=W.points,
    )


def synthesize_sequence(model: SyntheticModel, seed: int):
    """Render a model into measurements plus ground truth.

    Returns ``(W, gt_shapes, gt_rotations)`` where W row pair f holds the
    first two rows of R_f @ X_f plus optional white noise, gt_shapes is the
    3F x P stack and gt_rotations a single-column FrameRotationSet. The same
    seed reproduces the output bit for bit.
    """
    from nrsfm.rotation import FrameRotationSet

    F, K, P = model.num_frames, model.num_basis, model.num_points
    if F < 2 * K:
        warnings.warn(
            f"K={K} basis shapes with only F={F} frames is under-constrained",
            IllPosedWarning,
        )
    basis = np.stack(model.basis)  # (K, 3, P)
    shapes = np.einsum("fk,kip->fip", model.coefficients, basis)  # (F, 3, P)
    proj = model.rotations[:, :2, :] @ shapes  # (F, 2, P)
    data = proj.reshape(2 * F, P)
    if model.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        data = data + rng.normal(0.0, model.noise_sigma, size=data.shape)
    W = MeasurementMatrix(data=data, frames=F, points=P)
    gt_shapes = shapes.reshape(3 * F, P)
    gt_rotations = FrameRotationSet(
        rotations=model.rotations[:, None].copy(),
        source_triplet=np.zeros(1, dtype=int),
        kept=np.ones((F, 1), dtype=bool),
    )
    return W, gt_shapes, gt_rotations


def add_noise(W: MeasurementMatrix, sigma: float, seed: int) -> MeasurementMatrix:
    """Elementwise Gaussian perturbation, deterministic per seed."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return MeasurementMatrix(
            data=W.data.copy(),
            frames=W.frames,
            points=W.points,
            translations=None if W.translations is None else W.translations.copy(),
            centered=W.centered,
        )
    rng = np.random.default_rng(seed)
    return MeasurementMatrix(
        data=W.data + rng.normal(0.0, sigma, size=W.data.shape),
        frames=W.frames,
        points=W.points,
    )


def random_model(
    K: int,
    F: int,
    P: int,
    seed: int,
    noise_sigma: float = 0.0,
    with_mean_shape: bool = True,
    deform_scale: float = 1.0,
    coeff_range: tuple = (-1.0, 1.0),
    mean_coeff_range: tuple | None = None,
) -> SyntheticModel:
    """Draw a generic full-rank model: normal basis shapes (centroid removed),
    uniform coefficients from ``coeff_range``, rotations from uniform axis
    and angle in [0, pi). ``with_mean_shape`` pins the first coefficient to
    1 so every frame shares a dominant rigid component, as real capture
    data does; without it the per-frame sign of each component is
    unidentifiable and no method can pin down the camera path from
    orthonormality alone. ``deform_scale`` shrinks the non-rigid basis
    shapes relative to the first, and ``mean_coeff_range`` lets the rigid
    coefficient vary inside a positive interval instead of staying at 1.
    """
    if deform_scale <= 0:
        raise ValueError("deform_scale must be positive")
    rng = np.random.default_rng(seed)
    basis = []
    for k in range(K):
        b = rng.standard_normal((3, P))
        b -= b.mean(axis=1, keepdims=True)
        if k > 0:
            b *= deform_scale
        basis.append(b)
    coeffs = rng.uniform(coeff_range[0], coeff_range[1], size=(F, K))
    if with_mean_shape:
        if mean_coeff_range is None:
            coeffs[:, 0] = 1.0
        else:
            coeffs[:, 0] = rng.uniform(
                mean_coeff_range[0], mean_coeff_range[1], size=F
            )
    axes = rng.standard_normal((F, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = rng.uniform(0.0, np.pi, size=F)
    from nrsfm._backend import so3_exp

    rotations = so3_exp(axes * angles[:, None])
    return SyntheticModel(
        basis=basis,
        coefficients=coeffs,
        rotations=rotations,
        noise_sigma=noise_sigma,
    )


def _read_csv(path: Path) -> np.ndarray:
    rows: list[list[float]] = []
    width = None
    with open(path, "r") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise MalformedInput(
                    f"{path}: row {i} has {len(cells)} cells, expected {width}"
                )
            parsed = []
            for j, cell in enumerate(cells, start=1):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ParseError(i, j) from None
            rows.append(parsed)
    if not rows:
        raise MalformedInput(f"{path}: empty file")
    return np.asarray(rows, dtype=np.float64)


def _write_csv(data: np.ndarray, path: Path) -> None:
    with open(path, "w") as fh:
        for row in np.asarray(data, dtype=np.float64):
            fh.write(",".join(repr(v) for v in row.tolist()))
            fh.write("\n")


def _read_binary(path: Path, magic: bytes, rows_per_frame: int) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 14:
        raise MalformedInput(f"{path}: truncated header")
    if raw[:4] != magic:
        raise MalformedInput(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    version, F, P = struct.unpack_from("<HII", raw, 4)
    if version != _VERSION:
        raise MalformedInput(f"{path}: unsupported version {version}")
    expected = rows_per_frame * F * P
    payload = np.frombuffer(raw, dtype="<f8", offset=14)
    if payload.size != expected:
        raise MalformedInput(
            f"{path}: expected {expected} values, got {payload.size}"
        )
    return payload.reshape(rows_per_frame * F, P).astype(np.float64)


def _write_binary(data: np.ndarray, path: Path, magic: bytes, F: int, P: int) -> None:
    header = magic + struct.pack("<HII", _VERSION, F, P)
    path.write_bytes(header + np.asarray(data, dtype="<f8").tobytes())
