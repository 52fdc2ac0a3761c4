import numpy as np
import pytest

from nrsfm import rotation as rt
from nrsfm._backend import so3_exp, so3_log
from nrsfm.errors import DegenerateFrame, DegenerateProjection


def rotz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotations(n, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return so3_exp(rng.standard_normal((n, 3)) * scale)


def test_project_so3_maximizes_trace():
    # definition-based oracle: the projection maximizes trace(R^T A) over
    # SO(3), so no sampled rotation may beat it
    rng = np.random.default_rng(0)
    trials = random_rotations(200, 1)
    for _ in range(20):
        A = rng.standard_normal((3, 3))
        P = rt.project_so3(A)
        np.testing.assert_allclose(P @ P.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(P) > 0.999
        best = np.trace(P.T @ A)
        scores = np.einsum("nij,ij->n", trials, A)
        assert best >= scores.max() - 1e-9


def test_project_so3_recovers_perturbed_rotation():
    rng = np.random.default_rng(2)
    for _ in range(10):
        R0 = so3_exp(rng.standard_normal(3))
        noisy = R0 + 0.01 * rng.standard_normal((3, 3))
        R = rt.project_so3(noisy)
        assert rt.geodesic_distance(R, R0) < 0.05


def test_project_so3_degenerate():
    with pytest.raises(DegenerateProjection):
        rt.project_so3(np.zeros((3, 3)))
    with pytest.raises(DegenerateProjection):
        rt.project_so3(np.outer([1.0, 0, 0], [0, 1.0, 0]))


def test_lift_recovers_scaled_row_pairs():
    R_true = random_rotations(15, 3)
    rng = np.random.default_rng(4)
    scales = rng.uniform(0.3, 2.0, size=15)
    cand = (scales[:, None, None] * R_true[:, :2]).reshape(30, 3)
    lifted, quality = rt.lift_to_so3(cand)
    np.testing.assert_allclose(lifted, R_true, atol=1e-12)
    # equal row norms per frame -> perfectly conditioned
    assert np.max(quality) < 1e-12


def test_lift_negative_scale_flips_about_view_axis():
    # a negated row pair lifts to diag(-1,-1,1) @ R: same third row, first
    # two negated. This is the frame-wise ambiguity the filtering stage
    # exists to catch.
    R_true = random_rotations(8, 5)
    cand = (-1.0 * R_true[:, :2]).reshape(16, 3)
    lifted, _ = rt.lift_to_so3(cand)
    flip = np.diag([-1.0, -1.0, 1.0])
    np.testing.assert_allclose(lifted, flip @ R_true, atol=1e-12)


def test_lift_flip_variant_mirrors():
    R_true = random_rotations(6, 6)
    cand = R_true[:, :2].reshape(12, 3)
    plain, _ = rt.lift_to_so3(cand)
    mirrored, _ = rt.lift_to_so3(cand, flip=True)
    J = np.diag([1.0, 1.0, -1.0])
    np.testing.assert_allclose(mirrored, J @ plain @ J, atol=1e-12)


def test_lift_degenerate_rows():
    good = random_rotations(3, 7)[:, :2].reshape(6, 3)
    bad = good.copy()
    bad[2] = bad[3]  # parallel row pair in frame 1
    with pytest.raises(DegenerateFrame) as exc:
        rt.lift_to_so3(bad)
    assert exc.value.frame == 1


def test_registration_undoes_constant_right_factor():
    R = random_rotations(25, 8)
    U = so3_exp(np.array([0.3, -0.5, 0.8]))
    result = rt.register_rotations(R, R @ U)
    assert not result.flipped
    assert result.residual < 1e-10
    np.testing.assert_allclose(result.registered, R, atol=1e-9)
    np.testing.assert_allclose(result.rreg, U, atol=1e-9)


def test_registration_takes_mirror_branch():
    R = random_rotations(25, 9)
    J = np.diag([1.0, 1.0, -1.0])
    U = so3_exp(np.array([-0.2, 0.4, 0.1]))
    mirrored = J @ (R @ U) @ J
    result = rt.register_rotations(R, mirrored)
    assert result.flipped
    assert result.residual < 1e-10
    np.testing.assert_allclose(result.registered, R, atol=1e-9)


def test_filter_samples_thresholds_and_keeps_reference():
    F = 10
    base = random_rotations(F, 10)
    near = so3_exp(0.01 * np.ones((F, 3)) / np.sqrt(3)) @ base
    far = so3_exp(0.5 * np.ones((F, 3)) / np.sqrt(3)) @ base
    samples = np.stack([base, near, far], axis=1)
    rotset = rt.FrameRotationSet(
        rotations=samples,
        source_triplet=np.arange(3),
        kept=np.ones((F, 3), dtype=bool),
    )
    out = rt.filter_samples(rotset, delta=0.05)
    assert out.kept[:, 0].all()
    assert out.kept[:, 1].all()
    assert not out.kept[:, 2].any()


def test_median_init_picks_projected_lower_median():
    # all samples rotations about z: the elementwise median matrix of an odd
    # sample count equals the angle-median rotation
    angles = np.array([0.1, 0.5, 0.2])
    samples = np.stack([rotz(a) for a in angles])[None]  # (1, 3, 3, 3)
    init = rt.median_init(samples[0])
    np.testing.assert_allclose(init, rotz(0.2), atol=1e-9)


def grid_median_angle(angles, lo=-np.pi, hi=np.pi, step=1e-5):
    grid = np.arange(lo, hi, step)
    # wrapped absolute geodesic distance on the circle
    d = np.abs(((grid[:, None] - angles[None, :]) + np.pi) % (2 * np.pi) - np.pi)
    return grid[d.sum(axis=1).argmin()]


@pytest.mark.parametrize("seed", range(4))
def test_weiszfeld_matches_grid_on_coaxial_sets(seed):
    rng = np.random.default_rng(seed)
    S = 5
    angles = rng.uniform(-1.2, 1.2, size=S)
    samples = np.stack([rotz(a) for a in angles])
    R, info = rt.weiszfeld_sra(samples, eps_t=1e-6, max_iter=200, return_trace=True)
    a_star = grid_median_angle(angles)
    assert rt.geodesic_distance(R, rotz(a_star)) <= 1e-3
    hist = info["history"]
    assert hist.size >= 1
    assert np.all(np.diff(hist) <= 1e-12)
    assert info["objective"] == pytest.approx(hist[-1], abs=1e-12)


def test_weiszfeld_single_sample_is_identity_operation():
    R0 = random_rotations(1, 11)[0]
    R, info = rt.weiszfeld_sra(R0[None], return_trace=True)
    np.testing.assert_allclose(R, R0, atol=1e-12)


def test_average_rotations_objective_descends():
    F, S = 6, 5
    base = random_rotations(F, 12)
    rng = np.random.default_rng(13)
    samples = np.stack(
        [so3_exp(0.2 * rng.standard_normal((F, 3))) @ base for _ in range(S)],
        axis=1,
    )
    rotset = rt.FrameRotationSet(
        rotations=samples,
        source_triplet=np.arange(S),
        kept=np.ones((F, S), dtype=bool),
    )
    avg, iters, obj = rt.average_rotations(rotset)
    assert avg.shape == (F, 3, 3)
    assert iters.shape == (F,)
    err = np.abs(avg @ np.swapaxes(avg, 1, 2) - np.eye(3)).max()
    assert err < 1e-9
    # fused estimate is closer to the base than the worst sample
    d_avg = [rt.geodesic_distance(avg[f], base[f]) for f in range(F)]
    assert np.mean(d_avg) < 0.2


def test_assemble_block_rotation_layout():
    R = random_rotations(4, 14)
    block = rt.assemble_block_rotation(R)
    np.testing.assert_allclose(block.blocks, R[:, :2], atol=1e-15)
    dense = block.assembled
    assert dense.shape == (8, 12)
    np.testing.assert_allclose(dense[0:2, 0:3], R[0, :2], atol=1e-15)
    np.testing.assert_allclose(dense[2:4, 0:3], 0.0, atol=1e-15)
    np.testing.assert_allclose(dense[2:4, 3:6], R[1, :2], atol=1e-15)


def test_geodesic_distance_known_angles():
    assert rt.geodesic_distance(rotz(0.3), rotz(1.0)) == pytest.approx(0.7, abs=1e-9)
    assert rt.geodesic_distance(np.eye(3), np.eye(3)) == pytest.approx(0.0, abs=1e-12)
    v = np.array([0.0, 0.0, np.pi - 1e-7])
    assert rt.geodesic_distance(np.eye(3), so3_exp(v)) == pytest.approx(
        np.pi - 1e-7, abs=1e-5
    )


def test_so3_log_inverts_exp():
    rng = np.random.default_rng(15)
    v = rng.standard_normal((50, 3))
    v *= (rng.uniform(0.01, 3.0, size=50) / np.linalg.norm(v, axis=1))[:, None]
    np.testing.assert_allclose(so3_log(so3_exp(v)), v, atol=1e-9)
