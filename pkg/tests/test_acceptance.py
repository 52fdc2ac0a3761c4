"""Acceptance gate: ten numbered checks with pinned tolerances.

Run with `pytest -v tests/test_acceptance.py` to get one pass/fail line per
criterion. Criterion 9 needs externally supplied motion-capture files and
is skipped unless the NRSFM_MOCAP_* environment variables are set (see
README, "Manual dataset check").
"""

import os
import time

import numpy as np
import pytest
import scipy.linalg

import nrsfm
from nrsfm import measurements as ms
from nrsfm import metrics as mt
from nrsfm import rotation as rt
from nrsfm import shape as sh
from nrsfm.pipeline import (
    PipelineConfig,
    evaluate_result,
    run_n_sweep,
    run_noise_sweep,
    run_rotation_ablation,
    solve_sequence,
)


def solve_and_score(model, seed, cfg):
    W, gt, rotset = nrsfm.synthesize_sequence(model, seed=seed)
    res = solve_sequence(W, cfg)
    report, extras = evaluate_result(
        res, cfg, gt_shapes=gt, gt_rotations=rotset.rotations[:, 0]
    )
    return report, extras


def test_criterion_01_synthetic_end_to_end_recovery():
    """F=50 P=30 K=3 noiseless, 5 seeds: e3d <= 0.05, final <= init, < 60 s."""
    worst = 0.0
    for seed in range(1, 6):
        t0 = time.time()
        model = nrsfm.random_model(K=3, F=50, P=30, seed=seed)
        cfg = PipelineConfig(K=3, seed=seed)
        report, extras = solve_and_score(model, seed, cfg)
        wall = time.time() - t0
        assert report.e3d <= 0.05, f"seed {seed}: e3d {report.e3d}"
        assert report.e3d <= extras["e3dInit"], f"seed {seed}: init not improved"
        assert wall < 60.0, f"seed {seed}: {wall:.1f} s"
        worst = max(worst, report.e3d)
    print(f"criterion 1: PASS (worst e3d {worst:.2e} over 5 seeds)")


def test_criterion_02_rigid_k1_sanity():
    """K=1 noiseless: gauge-aligned e_R < 1e-4 and e3d < 1e-6."""
    model = nrsfm.random_model(K=1, F=40, P=25, seed=3)
    cfg = PipelineConfig(K=1, seed=3)
    report, _ = solve_and_score(model, 3, cfg)
    assert report.e_r < 1e-4, f"e_R {report.e_r}"
    assert report.e3d < 1e-6, f"e3d {report.e3d}"
    print(f"criterion 2: PASS (e_R {report.e_r:.2e}, e3d {report.e3d:.2e})")


def test_criterion_03_psvt_oracle_equivalence():
    """200 random matrices vs independent SVD reconstruction, dev <= 1e-10."""
    rng = np.random.default_rng(17)
    worst_dev = 0.0
    worst_keep = 0.0
    done = 0
    while done < 200:
        m = int(rng.integers(2, 21))
        n = int(rng.integers(2, 31))
        N = int(rng.integers(0, 3))
        r = min(m, n)
        if r <= N:
            continue
        Q = rng.standard_normal((m, n)) * rng.uniform(0.5, 3.0)
        tau = rng.uniform(0.0, 2.0, size=r - N) if rng.random() < 0.5 else float(
            rng.uniform(0.0, 2.0)
        )
        out = sh.psvt(Q, N, tau)
        U, s, Vt = scipy.linalg.svd(Q, full_matrices=False)
        s2 = s.copy()
        s2[N:] = np.maximum(s[N:] - np.atleast_1d(tau), 0.0)
        ref = U @ np.diag(s2) @ Vt
        worst_dev = max(worst_dev, np.abs(out - ref).max())
        if N:
            s_out = scipy.linalg.svdvals(out)
            worst_keep = max(worst_keep, np.abs(s_out[:N] - s[:N]).max())
        done += 1
    assert worst_dev <= 1e-10, f"max deviation {worst_dev}"
    assert worst_keep <= 1e-10, f"leading singular values moved {worst_keep}"
    print(f"criterion 3: PASS (200 matrices, max dev {worst_dev:.2e})")


def test_criterion_04_weiszfeld_vs_grid():
    """10 coaxial sets: distance to 1e-5-resolution grid median <= 1e-3."""

    def rotz(a):
        c, s = np.cos(a), np.sin(a)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        # odd counts keep the 1-D L1 median unique (even counts have a
        # flat interval of minimizers, so the distance check is ill-posed)
        angles = rng.uniform(-1.5, 1.5, size=int(rng.choice([3, 5, 7])))
        samples = np.stack([rotz(a) for a in angles])
        R, info = rt.weiszfeld_sra(
            samples, eps_t=1e-6, max_iter=300, return_trace=True
        )
        grid = np.arange(-np.pi, np.pi, 1e-5)
        d = np.abs(
            ((grid[:, None] - angles[None, :]) + np.pi) % (2 * np.pi) - np.pi
        )
        a_star = grid[d.sum(axis=1).argmin()]
        dist = rt.geodesic_distance(R, rotz(a_star))
        worst = max(worst, dist)
        assert dist <= 1e-3, f"instance {seed}: off the grid median by {dist}"
        hist = info["history"]
        assert np.all(np.diff(hist) <= 1e-12), f"instance {seed}: objective rose"
    print(f"criterion 4: PASS (10 instances, worst gap {worst:.2e})")


def test_criterion_05_x_subproblem_optimality():
    """Finite differences at the returned X: max component < 1e-6 ||W||."""
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(200 + seed)
        F = int(rng.integers(4, 10))
        P = int(rng.integers(5, 12))
        model = nrsfm.random_model(K=2, F=F, P=P, seed=seed)
        W, _, rotset = nrsfm.synthesize_sequence(model, seed=seed)
        Wc = ms.mean_center(W)
        block = rt.assemble_block_rotation(rotset.rotations[:, 0])
        Xsharp = rng.standard_normal((F, 3 * P))
        Y = rng.standard_normal((F, 3 * P))
        rho = float(rng.uniform(0.05, 5.0))
        X = sh.solve_x_subproblem(Wc, block, Xsharp, Y, rho)

        T = sh.reshape_tall(Xsharp) + sh.reshape_tall(Y) / rho

        def objective(Xv):
            r1 = Wc.data - block.assembled @ Xv
            r2 = Xv - T
            return 0.5 * np.sum(r1 * r1) + 0.5 * rho * np.sum(r2 * r2)

        h = 1e-6
        idx = rng.choice(X.size, size=min(30, X.size), replace=False)
        flat = X.ravel()
        grad = np.zeros(idx.size)
        for j, i in enumerate(idx):
            xp = flat.copy()
            xm = flat.copy()
            xp[i] += h
            xm[i] -= h
            grad[j] = (
                objective(xp.reshape(X.shape)) - objective(xm.reshape(X.shape))
            ) / (2 * h)
        bound = 1e-6 * np.linalg.norm(Wc.data)
        worst = max(worst, np.abs(grad).max() / bound)
        assert np.abs(grad).max() < bound, f"instance {seed}"
    print(f"criterion 5: PASS (20 instances, worst gradient at {worst:.2f} of bound)")


def test_criterion_06_admm_exit_contract():
    """Every instance ends with residual < 1e-10 or the rho cap flag."""
    cases = []
    for seed, sigma, N in ((1, 0.0, 1), (2, 0.05, 1), (3, 0.02, 0), (4, 0.1, 1)):
        model = nrsfm.random_model(K=2, F=14, P=12, seed=seed)
        W, _, rotset = nrsfm.synthesize_sequence(model, seed=seed)
        if sigma:
            W = ms.add_noise(W, sigma, seed=seed + 50)
        Wc = ms.mean_center(W)
        block = rt.assemble_block_rotation(rotset.rotations[:, 0])
        cases.append((Wc, block, sh.ShapeSolverConfig(K=2, N=N)))
    # plus a config that must hit the cap early
    cases.append(
        (cases[0][0], cases[0][1], sh.ShapeSolverConfig(K=2, lam=2.0, rho_max=1e3))
    )
    for i, (Wc, block, cfg) in enumerate(cases):
        _, diag = sh.admm_shape(Wc, block, cfg)
        ok = (diag.converged and diag.residual[-1] < 1e-10) or diag.rho_cap_hit
        assert ok, f"instance {i}: exit {diag.exit_reason}, residual {diag.residual[-1]}"
    print(f"criterion 6: PASS ({len(cases)} instances honored the exit contract)")


def test_criterion_07_preserved_rank_direction():
    """Median final e3d at N=1 <= N=0 over 10 trials with shared rotations."""
    model = nrsfm.random_model(K=3, F=50, P=30, seed=7, deform_scale=0.3)
    W, gt, _ = nrsfm.synthesize_sequence(model, seed=7)
    cfg = PipelineConfig(K=3, seed=7, trials=10, mu=300.0)
    _, summary = run_n_sweep(cfg, n_values=(0, 1), sigma=0.05, W=W, gt_shapes=gt)
    med = {s["N"]: s["medianE3d"] for s in summary}
    assert med[1] <= med[0], f"N=1 median {med[1]} vs N=0 {med[0]}"
    print(f"criterion 7: PASS (median e3d N=1 {med[1]:.5f} <= N=0 {med[0]:.5f})")


def test_criterion_08_rotation_averaging_direction():
    """Fused rotations beat the reference triplet's X_init e3d on >= 70% of seeds."""
    seeds = range(1, 11)
    wins = 0
    for seed in seeds:
        model = nrsfm.random_model(
            K=4, F=50, P=36, seed=seed,
            coeff_range=(0.2, 0.8), mean_coeff_range=(0.15, 1.0),
        )
        W, gt, _ = nrsfm.synthesize_sequence(model, seed=seed)
        Wn = ms.add_noise(W, 0.05, seed=seed + 500)
        cfg = PipelineConfig(K=4, seed=seed, delta=0.3)
        rows = run_rotation_ablation(cfg, W=Wn, gt_shapes=gt)
        by = {r["rotation"]: r for r in rows}
        wins += by["sra"]["e3dInit"] <= by["triplet1"]["e3dInit"]
    assert wins >= 7, f"only {wins}/10 seeds favored the fused rotations"
    print(f"criterion 8: PASS ({wins}/10 seeds favor averaging)")


needs_mocap = pytest.mark.skipif(
    "NRSFM_MOCAP_W" not in os.environ,
    reason="manual dataset check: set NRSFM_MOCAP_W (and friends) to run",
)


@needs_mocap
def test_criterion_09_mocap_benchmark():
    """Reproduce the published per-sequence errors on user-supplied data.

    Environment: NRSFM_MOCAP_W (tracks), NRSFM_MOCAP_GT_SHAPE (optional),
    NRSFM_MOCAP_GT_ROT (optional), NRSFM_MOCAP_K (basis count),
    NRSFM_MOCAP_EXPECTED_E3D / NRSFM_MOCAP_EXPECTED_ER and
    NRSFM_MOCAP_TOL (relative tolerance, default 0.25).
    """
    cfg = PipelineConfig(
        input=os.environ["NRSFM_MOCAP_W"],
        gt_shape=os.environ.get("NRSFM_MOCAP_GT_SHAPE"),
        gt_rot=os.environ.get("NRSFM_MOCAP_GT_ROT"),
        K=int(os.environ.get("NRSFM_MOCAP_K", "12")),
        seed=int(os.environ.get("NRSFM_MOCAP_SEED", "0")),
        input_format=os.environ.get("NRSFM_MOCAP_FORMAT", "auto"),
    )
    from nrsfm.pipeline import run_pipeline

    run = run_pipeline(cfg)
    tol = float(os.environ.get("NRSFM_MOCAP_TOL", "0.25"))
    checked = []
    expected_e3d = os.environ.get("NRSFM_MOCAP_EXPECTED_E3D")
    if expected_e3d is not None:
        want = float(expected_e3d)
        got = run.report["e3d"]
        assert abs(got - want) <= tol * want, f"e3d {got} vs {want} (+-{tol:.0%})"
        checked.append(f"e3d {got:.4f}~{want:.4f}")
    expected_er = os.environ.get("NRSFM_MOCAP_EXPECTED_ER")
    if expected_er is not None:
        want = float(expected_er)
        got = run.report["eR"]
        assert abs(got - want) <= tol * want, f"e_R {got} vs {want} (+-{tol:.0%})"
        checked.append(f"e_R {got:.4f}~{want:.4f}")
    assert checked, "set NRSFM_MOCAP_EXPECTED_E3D or _ER to make this a check"
    print(f"criterion 9: PASS ({', '.join(checked)})")


def test_criterion_10_noise_sweep_stability():
    """sigma up to 0.25: finite errors, no aborts, e3d grows from 0.01 to 0.25."""
    model = nrsfm.random_model(K=3, F=40, P=24, seed=42)
    W, gt, rotset = nrsfm.synthesize_sequence(model, seed=42)
    cfg = PipelineConfig(K=3, seed=42, trials=3)
    rows = run_noise_sweep(
        cfg,
        sigmas=(0.01, 0.05, 0.1, 0.15, 0.2, 0.25),
        W=W,
        gt_shapes=gt,
        gt_rotations=rotset.rotations[:, 0],
    )
    for r in rows:
        assert np.isfinite(r["meanE3d"]), f"sigma {r['sigma']}: e3d not finite"
        assert np.isfinite(r["meanER"]), f"sigma {r['sigma']}: e_R not finite"
    lo = rows[0]["meanE3d"]
    hi = rows[-1]["meanE3d"]
    assert hi > lo, f"mean e3d at 0.25 ({hi}) not above 0.01 ({lo})"
    print(f"criterion 10: PASS (mean e3d {lo:.4f} -> {hi:.4f}, all finite)")
