"""Tests for the metric suite: relative poses, point clouds, images, reports."""

import math

import numpy as np
import pytest
import torch

from cascadegs.core import CameraPose, PointMap, quat_from_axis_angle
from cascadegs.evaluation import (
    PSNR_INF,
    evaluate,
    image_metrics,
    pointcloud_metrics,
    pose_metrics,
    relative_pose_errors,
    report_markdown,
)
from cascadegs.model import CascadeModel, ModelConfig
from cascadegs.synthdata import default_intrinsics, generate_scene, sample_views

EVAL_CFG = ModelConfig(
    patch=8,
    width=48,
    depth_pose=1,
    depth_local=1,
    depth_global=1,
    n_heads=4,
    sh_degree=0,
    max_views=8,
    image_height=24,
    image_width=32,
    decoder_channels=8,
    appearance_channels=4,
    pyramid_channels=4,
)


def axis_angle_quat(axis, radians):
    axis_t = torch.tensor(axis, dtype=torch.float64)
    axis_t = axis_t / axis_t.norm()
    return quat_from_axis_angle(axis_t, torch.tensor(radians, dtype=torch.float64))


def rot_pose(axis, degrees, t=(0.0, 0.0, 0.0)):
    q = axis_angle_quat(axis, math.radians(degrees))
    return CameraPose(q, torch.tensor(t, dtype=torch.float64))


def random_poses(n, seed, gauge=True):
    gen = torch.Generator().manual_seed(seed)
    poses = []
    for i in range(n):
        if gauge and i == 0:
            poses.append(CameraPose.identity())
            continue
        axis = torch.randn(3, generator=gen, dtype=torch.float64)
        angle = float(torch.rand(1, generator=gen)) * math.pi
        q = quat_from_axis_angle(axis / axis.norm(), torch.tensor(angle, dtype=torch.float64))
        t = torch.randn(3, generator=gen, dtype=torch.float64)
        poses.append(CameraPose(q, t))
    return poses


def brute_force_metrics(pred, gt, thresholds, auc_max):
    """Independent recomputation of the pose metrics, loop by loop."""
    rot, trans = relative_pose_errors(pred, gt)
    rra = {float(t): sum(e < t for e in rot) / len(rot) for t in thresholds}
    rta = {float(t): sum(e < t for e in trans) / len(trans) for t in thresholds}
    auc = {}
    for top in auc_max:
        vals = []
        for tau in range(1, top + 1):
            r = sum(e < tau for e in rot) / len(rot)
            s = sum(e < tau for e in trans) / len(trans)
            vals.append(min(r, s))
        auc[top] = sum(vals) / len(vals)
    return rra, rta, auc


# ---------------------------------------------------------------------------
# Pose metrics
# ---------------------------------------------------------------------------


class TestPoseMetrics:
    def test_perfect_prediction(self):
        gt = random_poses(4, seed=0)
        m = pose_metrics(gt, gt, thresholds=(5.0, 15.0, 30.0), auc_max=(10, 30))
        assert all(v == 1.0 for v in m.rra.values())
        assert all(v == 1.0 for v in m.rta.values())
        assert all(v == 1.0 for v in m.auc.values())

    def test_global_rigid_transform_invariance(self):
        gt = random_poses(5, seed=1)
        pred = random_poses(5, seed=2)
        base = pose_metrics(pred, gt)
        g = rot_pose((0.3, -1.0, 0.7), 73.0, t=(0.4, -2.0, 1.1))
        moved = [g.compose(p) for p in pred]
        shifted = pose_metrics(moved, gt)
        assert shifted.rra == base.rra
        assert shifted.rta == base.rta
        assert shifted.auc == base.auc

    def test_absolute_offset_relative_unchanged(self):
        # Rotating every absolute pose by the same 10 degrees leaves all
        # relative poses untouched, so the metric stays perfect.
        gt = random_poses(4, seed=3)
        g = rot_pose((0.0, 0.0, 1.0), 10.0)
        pred = [g.compose(p) for p in gt]
        m = pose_metrics(pred, gt, auc_max=(30,))
        assert m.auc[30] == 1.0
        assert all(v == 1.0 for v in m.rra.values())

    def test_hand_set_error_multisets(self):
        # Three views with hand-set pairwise errors. The per-pair rotation
        # error equals the geodesic distance between the per-view error
        # rotations, so target multisets must satisfy the triangle
        # inequality; {5.5, 15.5, 21} is realized exactly by common-axis
        # error rotations of {0, 5.5, 21} degrees. Translation-direction
        # errors are free of that constraint: with identity gt rotations and
        # collinear gt positions, planar predicted translations at azimuths
        # chosen by a small 2x2 solve give pair errors of exactly
        # {5.5, 15.5, 25.5}. Half-degree targets keep every strict integer
        # threshold comparison away from floating-point boundary noise.
        d = torch.float64
        gt = [
            CameraPose(torch.tensor([1.0, 0, 0, 0], dtype=d), torch.zeros(3, dtype=d)),
            CameraPose(torch.tensor([1.0, 0, 0, 0], dtype=d), torch.tensor([1.0, 0, 0], dtype=d)),
            CameraPose(torch.tensor([1.0, 0, 0, 0], dtype=d), torch.tensor([2.0, 0, 0], dtype=d)),
        ]
        pred_q = [axis_angle_quat((0.0, 0.0, 1.0), math.radians(a)) for a in (0.0, 5.5, 21.0)]

        def planar(deg, scale=1.0):
            rad = math.radians(deg)
            return scale * torch.tensor([math.cos(rad), math.sin(rad), 0.0], dtype=d)

        # Pair 0-1 direction at +5.5 deg, pair 0-2 at -15.5 deg (relative
        # to the gt +x axis; view 0 is the shared identity anchor).  The
        # dependent pair 1-2 sees R1_pred^T (t2 - t1); aiming it at -25.5
        # deg means the raw difference must sit at -20 deg, which pins the
        # two magnitudes via a linear system.
        target = planar(-20.0)
        basis = torch.stack([planar(-15.5), -planar(5.5)], dim=1)
        sol = torch.linalg.solve(basis[:2, :], target[:2])
        scale_2, scale_1 = float(sol[0]), float(sol[1])
        assert scale_1 > 0 and scale_2 > 0
        pred = [
            CameraPose(pred_q[0], torch.zeros(3, dtype=d)),
            CameraPose(pred_q[1], planar(5.5, scale_1)),
            CameraPose(pred_q[2], planar(-15.5, scale_2)),
        ]

        rot, trans = relative_pose_errors(pred, gt)
        assert np.allclose(sorted(rot), [5.5, 15.5, 21.0], atol=1e-9)
        assert np.allclose(sorted(trans), [5.5, 15.5, 25.5], atol=1e-9)
        m = pose_metrics(pred, gt, thresholds=(10.0, 30.0), auc_max=(30,))
        assert m.rra[30.0] == 1.0
        assert m.rra[10.0] == pytest.approx(1.0 / 3.0)
        assert m.rta[30.0] == 1.0
        assert m.rta[10.0] == pytest.approx(1.0 / 3.0)
        # Hand-integrated AUC: the min(RRA, RTA) curve over integer tau is 0
        # for 1..5, 1/3 for 6..15, 2/3 for 16..25, 1 for 26..30, so the mean
        # over tau = 1..30 is exactly (10/3 + 20/3 + 5) / 30 = 1/2.
        assert m.auc[30] == pytest.approx(0.5, abs=1e-12)
        _, _, auc = brute_force_metrics(pred, gt, (10.0, 30.0), (30,))
        assert m.auc[30] == pytest.approx(auc[30], abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_brute_force_on_random_sets(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))
        gt = random_poses(n, seed=seed * 2 + 100, gauge=False)
        pred = random_poses(n, seed=seed * 2 + 101, gauge=False)
        thresholds = (5.0, 15.0, 30.0)
        m = pose_metrics(pred, gt, thresholds=thresholds, auc_max=(10, 30))
        rra, rta, auc = brute_force_metrics(pred, gt, thresholds, (10, 30))
        assert m.rra == rra
        assert m.rta == rta
        for top in (10, 30):
            assert m.auc[top] == pytest.approx(auc[top], abs=1e-12)

    def test_accuracy_curve_monotone(self):
        gt = random_poses(5, seed=30, gauge=False)
        pred = random_poses(5, seed=31, gauge=False)
        rot, trans = relative_pose_errors(pred, gt)
        prev = 0.0
        for tau in range(1, 61):
            r = (rot < tau).mean()
            t = (trans < tau).mean()
            acc = min(r, t)
            assert acc >= prev
            prev = acc
        m = pose_metrics(pred, gt, auc_max=(60,))
        assert 0.0 <= m.auc[60] <= 1.0

    def test_degenerate_translation_scored_zero(self):
        gt = [
            CameraPose.identity(),
            rot_pose((0.0, 1.0, 0.0), 30.0, t=(1.0, 0.2, 0.0)),
        ]
        pred = [
            CameraPose.identity(),
            rot_pose((0.0, 1.0, 0.0), 28.0, t=(0.0, 0.0, 0.0)),  # zero relative norm
        ]
        _, trans = relative_pose_errors(pred, gt)
        assert trans[0] == 0.0

    def test_rejects_single_view(self):
        gt = random_poses(1, seed=5)
        with pytest.raises(ValueError, match="at least 2"):
            pose_metrics(gt, gt)

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError, match="equal length"):
            pose_metrics(random_poses(3, seed=6), random_poses(4, seed=7))

    def test_exact_threshold_not_counted(self):
        # Accuracy uses a strict < comparison, so an error of exactly the
        # threshold does not count as accurate.
        gt = [CameraPose.identity(), rot_pose((0.0, 0.0, 1.0), 0.0, t=(1.0, 0.0, 0.0))]
        pred = [CameraPose.identity(), rot_pose((0.0, 1.0, 0.0), 15.0, t=(1.0, 0.0, 0.0))]
        m = pose_metrics(pred, gt, thresholds=(15.0,))
        assert m.rra[15.0] == 0.0
        assert m.rta[15.0] == 1.0


# ---------------------------------------------------------------------------
# Point-cloud metrics
# ---------------------------------------------------------------------------


def cloud_map(points, valid=None):
    pts = torch.as_tensor(points, dtype=torch.float32).reshape(1, -1, 3)
    if valid is None:
        valid_t = torch.ones(pts.shape[:2], dtype=torch.bool)
    else:
        valid_t = torch.as_tensor(valid, dtype=torch.bool).reshape(1, -1)
    return PointMap(pts, valid_t, "world")


class TestPointcloudMetrics:
    def test_identical_clouds(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(40, 3))
        acc, comp = pointcloud_metrics([cloud_map(pts)], [cloud_map(pts)])
        assert acc == pytest.approx(0.0, abs=1e-9)
        assert comp == pytest.approx(0.0, abs=1e-9)

    def test_single_outlier_hand_count(self):
        # pred = gt plus one far outlier at distance d: after alignment on
        # the exact correspondences the outlier contributes d to the
        # accuracy sum over n+1 predicted points; completion stays 0.
        rng = np.random.default_rng(1)
        n, d = 9, 5.0
        base = rng.normal(size=(n, 3))
        far = base.mean(axis=0) + np.array([d, 0.0, 0.0])
        # Make the outlier exactly distance d from its nearest gt point.
        dists = np.linalg.norm(base - far, axis=1)
        far = base[np.argmin(dists)] + np.array([d, 0.0, 0.0])
        pred_pts = np.concatenate([base, far[None]])
        gt = cloud_map(np.concatenate([base, np.zeros((1, 3))]), valid=[True] * n + [False])
        pred = cloud_map(pred_pts, valid=[True] * (n + 1))
        acc, comp = pointcloud_metrics([pred], [gt])
        nearest = np.linalg.norm(base - pred_pts[-1], axis=1).min()
        assert acc == pytest.approx(nearest / (n + 1), rel=1e-6)
        assert comp == pytest.approx(0.0, abs=1e-9)

    def test_uniform_scaling_absorbed(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(60, 3))
        acc, comp = pointcloud_metrics([cloud_map(2.0 * pts)], [cloud_map(pts)])
        assert acc < 1e-6
        assert comp < 1e-6

    def test_similarity_transform_absorbed(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(50, 3))
        angle = 0.7
        rot = np.array(
            [
                [math.cos(angle), -math.sin(angle), 0.0],
                [math.sin(angle), math.cos(angle), 0.0],
                [0.0, 0.0, 1.0],
            ]
        )
        moved = 0.5 * pts @ rot.T + np.array([1.0, -2.0, 0.3])
        acc, comp = pointcloud_metrics([cloud_map(moved)], [cloud_map(pts)])
        assert acc < 1e-6
        assert comp < 1e-6

    def test_nonnegative(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(30, 3))
        b = rng.normal(size=(30, 3))
        gt_valid = [True] * 25 + [False] * 5
        acc, comp = pointcloud_metrics([cloud_map(a)], [cloud_map(b, valid=gt_valid)])
        assert acc >= 0 and comp >= 0

    def test_empty_cloud_rejected(self):
        pts = np.zeros((5, 3))
        empty = cloud_map(pts, valid=[False] * 5)
        full = cloud_map(pts)
        with pytest.raises(ValueError, match="empty point cloud"):
            pointcloud_metrics([empty], [full])

    def test_multiple_maps_concatenated(self):
        rng = np.random.default_rng(5)
        a = rng.normal(size=(20, 3))
        b = rng.normal(size=(20, 3))
        acc, comp = pointcloud_metrics(
            [cloud_map(a), cloud_map(b)], [cloud_map(a), cloud_map(b)]
        )
        assert acc == pytest.approx(0.0, abs=1e-9)
        assert comp == pytest.approx(0.0, abs=1e-9)


# ---------------------------------------------------------------------------
# Image metrics
# ---------------------------------------------------------------------------


class TestImageMetrics:
    def test_identical_images(self):
        gen = torch.Generator().manual_seed(0)
        img = torch.rand((24, 32, 3), generator=gen)
        psnr, ssim = image_metrics(img, img)
        assert psnr == PSNR_INF
        assert ssim == pytest.approx(1.0, abs=1e-12)

    def test_uniform_quarter_offset_closed_form(self):
        a = torch.full((16, 16, 3), 0.5)
        b = torch.full((16, 16, 3), 0.25)
        psnr, _ = image_metrics(a, b)
        assert psnr == pytest.approx(-10.0 * math.log10(0.0625), abs=1e-9)
        assert psnr == pytest.approx(12.0412, abs=0.001)

    def test_tiny_noise_psnr(self):
        gen = torch.Generator().manual_seed(1)
        img = torch.rand((64, 64, 3), generator=gen, dtype=torch.float64) * 0.8 + 0.1
        noisy = img + 1e-3 * torch.randn(img.shape, generator=gen, dtype=torch.float64)
        psnr, ssim = image_metrics(noisy, img)
        assert abs(psnr - 60.0) < 1.0
        assert 0.99 < ssim <= 1.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shapes"):
            image_metrics(torch.rand(8, 8, 3), torch.rand(8, 9, 3))

    def test_ssim_range(self):
        gen = torch.Generator().manual_seed(2)
        a = torch.rand((32, 32, 3), generator=gen)
        b = torch.rand((32, 32, 3), generator=gen)
        _, ssim = image_metrics(a, b)
        assert -1.0 <= ssim < 1.0

    def test_psnr_monotone_in_error(self):
        img = torch.full((16, 16, 3), 0.5)
        p1, _ = image_metrics(img + 0.05, img)
        p2, _ = image_metrics(img + 0.10, img)
        assert p1 > p2


# ---------------------------------------------------------------------------
# Full evaluation
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def eval_setup():
    torch.manual_seed(0)
    model = CascadeModel(EVAL_CFG)
    # The pose readout starts at the identity for every view; randomize it
    # so the evaluation exercises non-trivial predicted poses.
    with torch.no_grad():
        model.pose_head.head.weight.normal_(std=0.05)
        model.local_head.head.weight.normal_(std=0.05)
    intr = default_intrinsics(EVAL_CFG.image_width, EVAL_CFG.image_height)
    samples = [
        sample_views(generate_scene(seed), 4, seed=seed + 10, intrinsics=intr)
        for seed in (0, 1)
    ]
    return model, samples


class TestEvaluate:
    def test_report_structure_and_ranges(self, eval_setup):
        model, samples = eval_setup
        report = evaluate(model, samples, 2)
        assert report["n_views"] == 2
        assert len(report["scenes"]) == 2
        mean = report["mean"]
        assert 0.0 <= mean["pose"]["auc"]["30"] <= 1.0
        assert mean["accuracy"] >= 0.0
        assert mean["completion"] >= 0.0
        for scene in report["scenes"]:
            assert scene["draws"]
            for draw in scene["draws"]:
                assert set(draw["pose"]) == {"rra", "rta", "auc"}

    def test_deterministic(self, eval_setup):
        model, samples = eval_setup
        a = evaluate(model, samples, 2)
        b = evaluate(model, samples, 2)
        assert a == b

    def test_sweep_sections(self, eval_setup):
        model, samples = eval_setup
        report = evaluate(model, samples, [2, 3])
        assert set(report["sections"]) == {"2", "3"}
        assert report["sections"]["2"]["n_views"] == 2
        assert report["sections"]["3"]["n_views"] == 3

    def test_regenerates_views_beyond_stored(self, eval_setup):
        model, samples = eval_setup
        report = evaluate(model, samples, 6)  # stored samples have only 4
        assert report["n_views"] == 6
        assert len(report["scenes"]) == 2

    def test_render_metrics_present(self, eval_setup):
        model, samples = eval_setup
        report = evaluate(model, samples[:1], 3, render=True)
        mean = report["mean"]
        assert "psnr" in mean and "ssim" in mean
        assert math.isfinite(mean["ssim"])

    def test_rejects_bad_view_counts(self, eval_setup):
        model, samples = eval_setup
        with pytest.raises(ValueError, match="n_views"):
            evaluate(model, samples, 1)
        with pytest.raises(ValueError, match="n_views"):
            evaluate(model, samples, 26)

    def test_markdown_table(self, eval_setup):
        model, samples = eval_setup
        report = evaluate(model, samples, [2, 3])
        text = report_markdown(report)
        lines = text.splitlines()
        assert lines[0].startswith("| views |")
        assert len(lines) == 4  # header, separator, one row per section
        assert "| 2 |" in lines[2] or "| 2 |" in lines[3]
