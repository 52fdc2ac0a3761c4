"""End-to-end runner and the experiment harnesses built on top of it.

run_pipeline executes load -> center -> factor -> triplets -> lift ->
register -> filter -> SRA -> assemble -> pinv -> ADMM -> metrics and
writes artifacts; solve_sequence is the I/O-free core the experiments
(noise sweep, N sweep, rotation ablation) reuse. Any failure is rewrapped
as StageError carrying the stage name.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from nrsfm import _backend, factorization, measurements, metrics, rotation, shape
from nrsfm.errors import (
    ConfigError,
    DegenerateFrame,
    InsufficientTriplets,
    StageError,
)

EXPERIMENTS = ("none", "noiseSweep", "nSweep", "rotationAblation")

DEFAULT_SIGMAS = (0.01, 0.05, 0.1, 0.15, 0.2, 0.25)


@dataclass
class PipelineConfig:
    input: str | None = None
    gt_shape: str | None = None
    gt_rot: str | None = None
    K: int = 1
    N: int = 1
    delta: float = 0.05
    seed: int = 0
    restarts: int | None = None  # None -> 8K
    out: str | None = None
    input_format: str = "auto"  # auto | csv | binary | mocap
    experiment: str = "none"
    dump_triplets: bool = False
    dump_rotations: bool = False
    alignment: str = "globalRotation"
    eps_t: float = rotation.DEFAULT_EPS_T
    sra_iters: int = rotation.DEFAULT_SRA_ITERS
    mu: float = 1.0
    xi: float | None = None
    max_iter: int = 500
    sigmas: tuple = DEFAULT_SIGMAS
    trials: int = 10

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be at least 1")
        if self.delta <= 0:
            raise ConfigError("delta must be positive")
        if self.restarts is not None and self.restarts < self.K:
            raise ConfigError("restarts must be at least K")
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(
                f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}"
            )
        if self.alignment not in metrics.ALIGNMENT_MODES:
            raise ConfigError(f"unknown alignment mode {self.alignment!r}")
        if self.N < 0:
            raise ConfigError("N must be nonnegative")

    @property
    def effective_restarts(self) -> int:
        return self.restarts if self.restarts is not None else 8 * self.K


@dataclass
class SolveResult:
    """Everything a single sequence run produces, before metrics."""

    W: measurements.MeasurementMatrix  # centered
    factors: factorization.TruncatedFactors
    triplets: list
    rotset: rotation.FrameRotationSet  # after filtering
    avg_rotations: np.ndarray  # (F, 3, 3)
    sra_iterations: np.ndarray
    sra_objectives: np.ndarray
    block: rotation.BlockRotation
    x_init: np.ndarray
    x: np.ndarray
    diagnostics: shape.AdmmDiagnostics
    warnings: list = field(default_factory=list)


def _stage(name):
    """Decorator-ish helper: run fn(), rewrap errors with the stage name."""

    class _Ctx:
        def __init__(self, stage_name):
            self.stage_name = stage_name

        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if isinstance(exc, Exception) and not isinstance(exc, StageError):
                raise StageError(self.stage_name, exc) from exc
            return False

    return _Ctx(name)


def solve_sequence(
    W: measurements.MeasurementMatrix, cfg: PipelineConfig
) -> SolveResult:
    """Run the full solver on an in-memory measurement matrix.

    Degrades gracefully when fewer than K distinct triplets are found
    (keeps the ones found, records a warning) and when a non-reference
    candidate fails to lift; a failing reference candidate is fatal.
    """
    warnings_log: list = []

    with _stage("center"):
        Wc = W if W.centered else measurements.mean_center(W)

    with _stage("factor"):
        factors = factorization.truncated_factor(Wc, cfg.K)
        A = factorization.build_constraint_matrix(factors)

    with _stage("triplets"):
        try:
            triplets = factorization.extract_triplets(
                factors, A, cfg.K, cfg.seed, cfg.effective_restarts
            )
        except InsufficientTriplets as e:
            if e.found < 1:
                raise
            triplets = e.triplets
            warnings_log.append(
                f"only {e.found} of {cfg.K} corrective triplets found; "
                "continuing with the ones available"
            )

    with _stage("lift"):
        columns = []
        for k, t in enumerate(triplets):
            try:
                R_k, quality = rotation.lift_to_so3(t.rotation_candidate)
            except DegenerateFrame as e:
                if k == 0:
                    raise
                warnings_log.append(
                    f"triplet {k + 1} dropped: degenerate frame {e.frame}"
                )
                continue
            columns.append((k, R_k))

    with _stage("register"):
        reference = columns[0][1]
        stacked = [reference]
        tags = [columns[0][0]]
        for k, R_k in columns[1:]:
            reg = rotation.register_rotations(reference, R_k)
            stacked.append(reg.registered)
            tags.append(k)
        rotset = rotation.FrameRotationSet(
            rotations=np.stack(stacked, axis=1),
            source_triplet=np.asarray(tags),
            kept=np.ones((reference.shape[0], len(stacked)), dtype=bool),
        )

    with _stage("filter"):
        rotset = rotation.filter_samples(rotset, cfg.delta)

    with _stage("sra"):
        avg, iters, obj = rotation.average_rotations(
            rotset, cfg.eps_t, cfg.sra_iters
        )

    with _stage("assemble"):
        block = rotation.assemble_block_rotation(avg)

    with _stage("pinv"):
        x_init = shape.pinv_shape(block, Wc)

    with _stage("admm"):
        scfg = shape.ShapeSolverConfig(
            K=cfg.K, N=cfg.N, mu=cfg.mu, xi=cfg.xi, max_iter=cfg.max_iter
        )
        x, diag = shape.admm_shape(Wc, block, scfg)

    return SolveResult(
        W=Wc,
        factors=factors,
        triplets=triplets,
        rotset=rotset,
        avg_rotations=avg,
        sra_iterations=iters,
        sra_objectives=obj,
        block=block,
        x_init=x_init,
        x=x,
        diagnostics=diag,
        warnings=warnings_log,
    )


def _load_input(cfg: PipelineConfig) -> measurements.MeasurementMatrix:
    if cfg.input is None:
        raise ConfigError("no input path given")
    path = Path(cfg.input)
    fmt = cfg.input_format
    if fmt == "auto":
        suffix = path.suffix.lower()
        if suffix == ".csv":
            fmt = "csv"
        elif suffix in (".nrsm", ".bin"):
            fmt = "binary"
        else:
            fmt = "mocap"
    if fmt == "mocap":
        data = np.loadtxt(path, dtype=np.float64, ndmin=2)
        if data.shape[0] % 2 != 0:
            raise ConfigError(f"{path}: odd row count {data.shape[0]}")
        return measurements.MeasurementMatrix(
            data=data, frames=data.shape[0] // 2, points=data.shape[1]
        )
    return measurements.load_measurements(path, format=fmt)


def _round12(x):
    if x is None:
        return None
    return float(f"{float(x):.12g}")


def evaluate_result(
    result: SolveResult,
    cfg: PipelineConfig,
    gt_shapes: np.ndarray | None,
    gt_rotations: np.ndarray | None,
):
    """Metrics block of the report: reprojection always, the rest when
    ground truth is present. Returns (EvaluationReport | None, dict)."""
    reproj = metrics.reprojection_error(result.W, result.block, result.x)
    extras = {"e3dInit": None, "eRPreAlignment": None}
    evaluation = None
    if gt_shapes is not None:
        aligned = metrics.align_shapes(result.x, gt_shapes, cfg.alignment)
        per_frame = metrics.e3d_per_frame(aligned, gt_shapes)
        aligned_init = metrics.align_shapes(result.x_init, gt_shapes, cfg.alignment)
        extras["e3dInit"] = metrics.e3d(aligned_init, gt_shapes)
        e_r_val = None
        if gt_rotations is not None:
            e_r_val, details = metrics.e_r(
                result.avg_rotations, gt_rotations, return_details=True
            )
            extras["eRPreAlignment"] = details["preAlignment"]
        evaluation = metrics.EvaluationReport(
            e3d=float(per_frame.mean()),
            e_r=e_r_val,
            reprojection=reproj,
            per_frame_e3d=per_frame,
            alignment_used=cfg.alignment,
        )
    elif gt_rotations is not None:
        e_r_val, details = metrics.e_r(
            result.avg_rotations, gt_rotations, return_details=True
        )
        extras["eRPreAlignment"] = details["preAlignment"]
        evaluation = metrics.EvaluationReport(
            e3d=float("nan"),
            e_r=e_r_val,
            reprojection=reproj,
            per_frame_e3d=np.array([]),
            alignment_used="none",
        )
    return evaluation, {"reprojection": reproj, **extras}


@dataclass
class PipelineRun:
    report: dict
    evaluation: metrics.EvaluationReport | None
    result: SolveResult
    artifacts: dict
    wall_time: float


def run_pipeline(cfg: PipelineConfig) -> PipelineRun:
    """Load, solve, evaluate and (when an output directory is set) write
    report.json, the NRSG shape stack, per-frame PLYs, the ADMM diagnostics
    CSV and the optional triplet/rotation dumps."""
    t0 = time.perf_counter()
    with _stage("load"):
        W = _load_input(cfg)
        gt_shapes = (
            measurements.load_shapes(cfg.gt_shape) if cfg.gt_shape else None
        )
        gt_rot = measurements.load_rotations(cfg.gt_rot) if cfg.gt_rot else None

    result = solve_sequence(W, cfg)

    with _stage("metrics"):
        evaluation, extras = evaluate_result(result, cfg, gt_shapes, gt_rot)

    report = {
        "sequence": Path(cfg.input).stem if cfg.input else "in-memory",
        "K": cfg.K,
        "N": cfg.N,
        "delta": _round12(cfg.delta),
        "seed": cfg.seed,
        "restarts": cfg.effective_restarts,
        "frames": result.W.frames,
        "points": result.W.points,
        "tripletsFound": len(result.triplets),
        "tripletResiduals": [_round12(t.residual) for t in result.triplets],
        "samplesKeptMean": _round12(float(result.rotset.kept.mean())),
        "sraIterationsMean": _round12(float(result.sra_iterations.mean())),
        "admmIterations": len(result.diagnostics.iteration),
        "admmExit": result.diagnostics.exit_reason,
        "reprojection": _round12(extras["reprojection"]),
        "e3d": None,
        "eR": None,
        "e3dInit": _round12(extras["e3dInit"]),
        "eRPreAlignment": _round12(extras["eRPreAlignment"]),
        "alignmentUsed": None,
        "perFrameE3d": None,
        "warnings": list(result.warnings),
        "artifacts": {},
    }
    if evaluation is not None:
        ev = evaluation.to_json_dict()
        report["e3d"] = ev["e3d"] if np.isfinite(evaluation.e3d) else None
        report["eR"] = ev["eR"]
        report["alignmentUsed"] = ev["alignmentUsed"]
        report["perFrameE3d"] = ev["perFrameE3d"] or None

    artifacts: dict = {}
    if cfg.out is not None:
        with _stage("artifacts"):
            out = Path(cfg.out)
            out.mkdir(parents=True, exist_ok=True)
            measurements.save_shapes(result.x, out / "shapes.nrsg")
            artifacts["shapes"] = "shapes.nrsg"
            ply_dir = out / "ply"
            shape.export_ply_frames(result.x, ply_dir)
            artifacts["ply"] = "ply"
            result.diagnostics.write_csv(out / "diagnostics.csv")
            artifacts["diagnostics"] = "diagnostics.csv"
            if cfg.dump_triplets:
                factorization.dump_triplets(result.triplets, out / "triplets.json")
                artifacts["triplets"] = "triplets.json"
            if cfg.dump_rotations:
                measurements.save_rotations(
                    result.avg_rotations, out / "rotations.nrsr"
                )
                summary = [
                    {
                        "frame": f,
                        "samplesKept": int(result.rotset.kept[f].sum()),
                        "objective": _round12(float(result.sra_objectives[f])),
                        "iterations": int(result.sra_iterations[f]),
                    }
                    for f in range(result.W.frames)
                ]
                (out / "rotations.json").write_text(
                    json.dumps(summary, indent=2) + "\n"
                )
                artifacts["rotations"] = "rotations.nrsr"
                artifacts["rotationSummary"] = "rotations.json"
            report["artifacts"] = artifacts
            (out / "report.json").write_text(
                json.dumps(report, indent=2, sort_keys=True) + "\n"
            )
    return PipelineRun(
        report=report,
        evaluation=evaluation,
        result=result,
        artifacts=artifacts,
        wall_time=time.perf_counter() - t0,
    )


def _pool_size() -> int:
    cap = os.environ.get("NRSFM_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"NRSFM_THREADS={cap!r} is not an integer") from None
    return n


def _sweep_eval(W_base, cfg, gt_shapes, gt_rot, sigma, trial_seed):
    noisy = measurements.add_noise(W_base, sigma, trial_seed)
    trial_cfg = replace(cfg, seed=trial_seed)
    result = solve_sequence(noisy, trial_cfg)
    evaluation, _ = evaluate_result(result, trial_cfg, gt_shapes, gt_rot)
    e3d_val = evaluation.e3d if evaluation is not None else float("nan")
    e_r_val = (
        evaluation.e_r
        if evaluation is not None and evaluation.e_r is not None
        else float("nan")
    )
    return e3d_val, e_r_val, len(result.warnings)


def run_noise_sweep(
    cfg: PipelineConfig,
    sigmas=None,
    trials: int | None = None,
    W: measurements.MeasurementMatrix | None = None,
    gt_shapes: np.ndarray | None = None,
    gt_rotations: np.ndarray | None = None,
):
    """Mean/std of e3d and eR per noise level over independently seeded runs.

    Rows are ordered by (sigma, trial) regardless of pool scheduling. The
    returned list has one dict per sigma; a CSV lands in cfg.out when set.
    """
    sigmas = list(cfg.sigmas if sigmas is None else sigmas)
    trials = cfg.trials if trials is None else trials
    if trials < 1:
        raise ConfigError("trials must be at least 1")
    if W is None:
        with _stage("load"):
            W = _load_input(cfg)
            gt_shapes = (
                measurements.load_shapes(cfg.gt_shape) if cfg.gt_shape else None
            )
            gt_rotations = (
                measurements.load_rotations(cfg.gt_rot) if cfg.gt_rot else None
            )
    if gt_shapes is None:
        raise ConfigError("noise sweep needs ground-truth shapes")

    jobs = [
        (si, t, sigma, cfg.seed + 1000 * si + t)
        for si, sigma in enumerate(sigmas)
        for t in range(trials)
    ]
    with ThreadPoolExecutor(max_workers=_pool_size()) as pool:
        futures = {
            (si, t): pool.submit(
                _sweep_eval, W, cfg, gt_shapes, gt_rotations, sigma, s
            )
            for si, t, sigma, s in jobs
        }
        values = {key: f.result() for key, f in futures.items()}

    rows = []
    for si, sigma in enumerate(sigmas):
        e3 = np.array([values[(si, t)][0] for t in range(trials)])
        er = np.array([values[(si, t)][1] for t in range(trials)])
        rows.append(
            {
                "sigma": sigma,
                "meanE3d": float(e3.mean()),
                "stdE3d": float(e3.std()),
                "meanER": float(er.mean()),
                "stdER": float(er.std()),
                "trials": trials,
            }
        )
    if cfg.out is not None:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "noise_sweep.csv", "w") as fh:
            fh.write("sigma,mean_e3d,std_e3d,mean_eR,std_eR,trials\n")
            for r in rows:
                fh.write(
                    "%.12g,%.12g,%.12g,%.12g,%.12g,%d\n"
                    % (
                        r["sigma"],
                        r["meanE3d"],
                        r["stdE3d"],
                        r["meanER"],
                        r["stdER"],
                        r["trials"],
                    )
                )
    return rows


def _shape_errors_for_block(W, block, cfg, n_value, gt_shapes, alignment):
    scfg = shape.ShapeSolverConfig(
        K=cfg.K, N=n_value, mu=cfg.mu, xi=cfg.xi, max_iter=cfg.max_iter
    )
    x_init = shape.pinv_shape(block, W)
    x, diag = shape.admm_shape(W, block, scfg)
    init_aligned = metrics.align_shapes(x_init, gt_shapes, alignment)
    final_aligned = metrics.align_shapes(x, gt_shapes, alignment)
    return metrics.e3d(init_aligned, gt_shapes), metrics.e3d(
        final_aligned, gt_shapes
    ), diag


def run_n_sweep(
    cfg: PipelineConfig,
    n_values=(0, 1),
    trials: int | None = None,
    sigma: float = 0.05,
    W: measurements.MeasurementMatrix | None = None,
    gt_shapes: np.ndarray | None = None,
):
    """Final e3d per preserved-rank setting N, holding rotations fixed.

    Each trial perturbs the measurements, runs the rotation stages once,
    then solves the shape stage for every N on the same camera estimate.
    Returns per-trial rows plus a per-N median summary.
    """
    trials = cfg.trials if trials is None else trials
    if trials < 1:
        raise ConfigError("trials must be at least 1")
    if W is None:
        with _stage("load"):
            W = _load_input(cfg)
            gt_shapes = (
                measurements.load_shapes(cfg.gt_shape) if cfg.gt_shape else None
            )
    if gt_shapes is None:
        raise ConfigError("N sweep needs ground-truth shapes")

    def one_trial(t):
        trial_seed = cfg.seed + t
        noisy = measurements.add_noise(W, sigma, trial_seed)
        trial_cfg = replace(cfg, seed=trial_seed)
        res = solve_sequence(noisy, trial_cfg)
        out = []
        for n_value in n_values:
            _, final_e3d, _ = _shape_errors_for_block(
                res.W, res.block, trial_cfg, n_value, gt_shapes, cfg.alignment
            )
            out.append({"trial": t, "N": n_value, "e3d": final_e3d})
        return out

    with ThreadPoolExecutor(max_workers=_pool_size()) as pool:
        per_trial = list(pool.map(one_trial, range(trials)))
    rows = [row for trial_rows in per_trial for row in trial_rows]
    summary = []
    for n_value in n_values:
        vals = np.array([r["e3d"] for r in rows if r["N"] == n_value])
        summary.append({"N": n_value, "medianE3d": float(np.median(vals))})
    if cfg.out is not None:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "n_sweep.csv", "w") as fh:
            fh.write("trial,N,e3d\n")
            for r in rows:
                fh.write("%d,%d,%.12g\n" % (r["trial"], r["N"], r["e3d"]))
    return rows, summary


def run_rotation_ablation(
    cfg: PipelineConfig,
    W: measurements.MeasurementMatrix | None = None,
    gt_shapes: np.ndarray | None = None,
):
    """Shape stage under the reference-triplet rotation vs the fused one.

    Returns two rows with e3d of the pseudoinverse init and the final
    shape for each rotation source. With K=1 the rows coincide.
    """
    if W is None:
        with _stage("load"):
            W = _load_input(cfg)
            gt_shapes = (
                measurements.load_shapes(cfg.gt_shape) if cfg.gt_shape else None
            )
    if gt_shapes is None:
        raise ConfigError("rotation ablation needs ground-truth shapes")

    res = solve_sequence(W, cfg)
    rows = []
    for label, rots in (
        ("triplet1", res.rotset.column(0)),
        ("sra", res.avg_rotations),
    ):
        block = rotation.assemble_block_rotation(rots)
        init_e3d, final_e3d, diag = _shape_errors_for_block(
            res.W, block, cfg, cfg.N, gt_shapes, cfg.alignment
        )
        rows.append(
            {
                "rotation": label,
                "e3dInit": init_e3d,
                "e3dFinal": final_e3d,
                "admmExit": diag.exit_reason,
            }
        )
    if cfg.out is not None:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "rotation_ablation.csv", "w") as fh:
            fh.write("rotation,e3d_init,e3d_final,admm_exit\n")
            for r in rows:
                fh.write(
                    "%s,%.12g,%.12g,%s\n"
                    % (r["rotation"], r["e3dInit"], r["e3dFinal"], r["admmExit"])
                )
    return rows


def backend_name() -> str:
    """Which kernel twin is active: "cython" or "python"."""
    return _backend.backend_name()
