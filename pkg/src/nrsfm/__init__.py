"""Non-rigid structure from motion under orthographic projection.

Recovers per-frame camera rotations (corrective triplets fused by geodesic
L1 rotation averaging) and a low-rank non-rigid shape (ADMM with partial
singular value thresholding) from a 2F x P track matrix.
"""

__version__ = "0.1.0"

from nrsfm._backend import backend_name
from nrsfm.factorization import (
    CorrectiveTriplet,
    TruncatedFactors,
    build_constraint_matrix,
    extract_triplets,
    refine_triplet,
    solve_gram,
    truncated_factor,
)
from nrsfm.measurements import (
    MeasurementMatrix,
    SyntheticModel,
    add_noise,
    load_measurements,
    mean_center,
    random_model,
    save_measurements,
    synthesize_sequence,
)
from nrsfm.metrics import EvaluationReport, align_shapes, e3d, e_r, reprojection_error
from nrsfm.pipeline import (
    PipelineConfig,
    run_noise_sweep,
    run_pipeline,
    run_rotation_ablation,
    solve_sequence,
)
from nrsfm.rotation import (
    BlockRotation,
    FrameRotationSet,
    assemble_block_rotation,
    filter_samples,
    geodesic_distance,
    lift_to_so3,
    median_init,
    project_so3,
    register_rotations,
    weiszfeld_sra,
)
from nrsfm.shape import (
    ShapeSolverConfig,
    admm_shape,
    compute_weights,
    pinv_shape,
    psvt,
    reshape_sharp,
    reshape_tall,
    solve_x_subproblem,
)

__all__ = [
    "BlockRotation",
    "CorrectiveTriplet",
    "EvaluationReport",
    "FrameRotationSet",
    "MeasurementMatrix",
    "PipelineConfig",
    "ShapeSolverConfig",
    "SyntheticModel",
    "TruncatedFactors",
    "add_noise",
    "admm_shape",
    "align_shapes",
    "assemble_block_rotation",
    "backend_name",
    "build_constraint_matrix",
    "compute_weights",
    "e3d",
    "e_r",
    "extract_triplets",
    "filter_samples",
    "geodesic_distance",
    "lift_to_so3",
    "load_measurements",
    "mean_center",
    "median_init",
    "pinv_shape",
    "project_so3",
    "psvt",
    "random_model",
    "refine_triplet",
    "register_rotations",
    "reprojection_error",
    "reshape_sharp",
    "reshape_tall",
    "run_noise_sweep",
    "run_pipeline",
    "run_rotation_ablation",
    "save_measurements",
    "solve_gram",
    "solve_sequence",
    "solve_x_subproblem",
    "synthesize_sequence",
    "truncated_factor",
    "weiszfeld_sra",
]
