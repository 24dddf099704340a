"""Evaluation metrics: relative-pose accuracy, point-cloud quality, image quality."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import Tensor

from .core import (
    CameraPose,
    PointMap,
    pointmap_scale,
    quat_angle,
    quat_conjugate,
    quat_multiply,
    similarity_align,
)
from .model import CascadeModel
from .rasterizer import render_normalized
from .synthdata import SceneSample, sample_views, subset_views

PSNR_INF = float("inf")
_DEGENERATE_NORM = 1e-6


# ---------------------------------------------------------------------------
# Pose metrics
# ---------------------------------------------------------------------------


@dataclass
class PoseMetrics:
    rra: dict[float, float]
    rta: dict[float, float]
    auc: dict[int, float]

    def as_dict(self) -> dict:
        return {
            "rra": {str(k): v for k, v in self.rra.items()},
            "rta": {str(k): v for k, v in self.rta.items()},
            "auc": {str(k): v for k, v in self.auc.items()},
        }


def relative_pose_errors(
    pred: Sequence[CameraPose], gt: Sequence[CameraPose]
) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation-direction errors in degrees over pairs i < j.

    Translation errors compare unit relative-translation directions without
    any sign folding; pairs where either relative translation norm is
    below 1e-6 are scored as 0 degrees (the direction is undefined).
    """
    n = len(pred)
    if n < 2:
        raise ValueError("need at least 2 views for relative pose metrics")
    if len(gt) != n:
        raise ValueError("pred and gt must have equal length")
    rot_errs, trans_errs = [], []
    for i in range(n):
        for j in range(i + 1, n):
            rel_p = pred[i].inverse().compose(pred[j])
            rel_g = gt[i].inverse().compose(gt[j])
            dq = quat_multiply(quat_conjugate(rel_g.q), rel_p.q)
            rot_errs.append(math.degrees(float(quat_angle(dq))))
            np_, ng = float(rel_p.t.norm()), float(rel_g.t.norm())
            if np_ < _DEGENERATE_NORM or ng < _DEGENERATE_NORM:
                trans_errs.append(0.0)
            else:
                cos = float(torch.dot(rel_p.t / np_, rel_g.t / ng).clamp(-1.0, 1.0))
                trans_errs.append(math.degrees(math.acos(cos)))
    return np.asarray(rot_errs), np.asarray(trans_errs)


def pose_metrics(
    pred: Sequence[CameraPose],
    gt: Sequence[CameraPose],
    thresholds: Sequence[float] = (5.0, 15.0, 30.0),
    auc_max: Sequence[int] = (30,),
) -> PoseMetrics:
    """RRA/RTA at the given thresholds and AUC at 1-degree granularity.

    RRA@t / RTA@t are the fractions of view pairs with rotation /
    translation-direction error below t degrees; AUC@T averages
    ``min(RRA@t, RTA@t)`` over integer thresholds t = 1..T.
    """
    rot, trans = relative_pose_errors(pred, gt)
    rra = {float(t): float((rot < t).mean()) for t in thresholds}
    rta = {float(t): float((trans < t).mean()) for t in thresholds}
    auc = {}
    for top in auc_max:
        taus = np.arange(1, int(top) + 1, dtype=float)
        acc = np.minimum(
            (rot[None, :] < taus[:, None]).mean(axis=1),
            (trans[None, :] < taus[:, None]).mean(axis=1),
        )
        auc[int(top)] = float(acc.mean())
    return PoseMetrics(rra=rra, rta=rta, auc=auc)


# ---------------------------------------------------------------------------
# Point-cloud metrics
# ---------------------------------------------------------------------------


def _align_clouds(
    pred_maps: Sequence[PointMap],
    gt_maps: Sequence[PointMap],
    max_correspondences: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Similarity-align the predicted cloud to ground truth.

    Initial fit uses per-pixel correspondences (pixels valid in both maps,
    subsampled); one refinement re-fits on nearest-neighbor pairs
    with a robust 3x-median distance cut, which shrugs off isolated
    outliers.  Returns the aligned predicted cloud and the gt cloud.
    """
    pred_pts, gt_pts, corr_p, corr_g = [], [], [], []
    for pm, gm in zip(pred_maps, gt_maps):
        pred_pts.append(pm.valid_points().detach().double().numpy())
        gt_pts.append(gm.valid_points().detach().double().numpy())
        both = (pm.valid & gm.valid).numpy()
        corr_p.append(pm.positions.detach().double().numpy()[both])
        corr_g.append(gm.positions.detach().double().numpy()[both])
    pred_cloud = np.concatenate(pred_pts)
    gt_cloud = np.concatenate(gt_pts)
    if pred_cloud.shape[0] == 0 or gt_cloud.shape[0] == 0:
        raise ValueError("empty point cloud after validity filtering")
    corr_pred = np.concatenate(corr_p)
    corr_gt = np.concatenate(corr_g)
    if corr_pred.shape[0] >= 3:
        if corr_pred.shape[0] > max_correspondences:
            rng = np.random.default_rng(seed)
            sel = rng.choice(corr_pred.shape[0], size=max_correspondences, replace=False)
            corr_pred, corr_gt = corr_pred[sel], corr_gt[sel]
        try:
            s, rot, t = similarity_align(
                torch.from_numpy(corr_pred), torch.from_numpy(corr_gt)
            )
            aligned = float(s) * pred_cloud @ rot.numpy().T + t.numpy()
        except ValueError:
            aligned = pred_cloud
    else:
        aligned = pred_cloud

    # One nearest-neighbor refinement with a robust distance cut.
    tree = cKDTree(gt_cloud)
    dist, idx = tree.query(aligned)
    cut = 3.0 * np.median(dist)
    keep = dist <= cut
    if int(keep.sum()) >= 3:
        try:
            s, rot, t = similarity_align(
                torch.from_numpy(aligned[keep]), torch.from_numpy(gt_cloud[idx[keep]])
            )
            aligned = float(s) * aligned @ rot.numpy().T + t.numpy()
        except ValueError:
            pass
    return aligned, gt_cloud


def pointcloud_metrics(
    pred_maps: Sequence[PointMap],
    gt_maps: Sequence[PointMap],
    max_correspondences: int = 4096,
    seed: int = 0,
) -> tuple[float, float]:
    """Accuracy and completion in ground-truth scene units.

    After similarity alignment, accuracy is the mean distance from each
    predicted point to its nearest ground-truth point; completion is the
    reverse direction.
    """
    aligned, gt_cloud = _align_clouds(pred_maps, gt_maps, max_correspondences, seed)
    d_pred = cKDTree(gt_cloud).query(aligned)[0]
    d_gt = cKDTree(aligned).query(gt_cloud)[0]
    return float(d_pred.mean()), float(d_gt.mean())


# ---------------------------------------------------------------------------
# Image metrics
# ---------------------------------------------------------------------------


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-coords.square() / (2 * sigma * sigma))
    g = g / g.sum()
    return torch.outer(g, g)


_SSIM_WINDOW = _gaussian_kernel()


def image_metrics(rendered: Tensor, gt: Tensor) -> tuple[float, float]:
    """PSNR (dB) and SSIM between two (H, W, 3) images in [0, 1].

    PSNR uses a peak of 1; identical images report +inf.  SSIM uses the
    standard 11x11 Gaussian window (sigma 1.5), constants K1=0.01, K2=0.03,
    and is averaged over channels.
    """
    if rendered.shape != gt.shape:
        raise ValueError("image shapes must match")
    a = rendered.detach().double()
    b = gt.detach().double()
    mse = float((a - b).square().mean())
    psnr = PSNR_INF if mse == 0.0 else -10.0 * math.log10(mse)

    win = _SSIM_WINDOW[None, None].expand(3, 1, 11, 11)
    x = a.permute(2, 0, 1)[None]
    y = b.permute(2, 0, 1)[None]
    conv = lambda img: torch.nn.functional.conv2d(img, win, groups=3)
    mu_x, mu_y = conv(x), conv(y)
    sigma_x = conv(x * x) - mu_x * mu_x
    sigma_y = conv(y * y) - mu_y * mu_y
    sigma_xy = conv(x * y) - mu_x * mu_y
    c1, c2 = 0.01**2, 0.03**2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (sigma_x + sigma_y + c2)
    )
    return psnr, float(ssim_map.mean())


# ---------------------------------------------------------------------------
# Full evaluation
# ---------------------------------------------------------------------------


def _view_draws(total: int, k: int) -> list[list[int]]:
    """Disjoint consecutive view subsets of size k (at least one)."""
    if k >= total:
        return [list(range(total))]
    return [list(range(s, s + k)) for s in range(0, total - k + 1, k)]


def _eval_draw(
    model: CascadeModel, draw: SceneSample, holdouts: list[tuple[CameraPose, Tensor]] | None
) -> dict:
    with torch.no_grad():
        out = model(
            draw.images[None], with_gaussians=holdouts is not None and len(holdouts) > 0
        )
    pred_poses = [
        CameraPose(out.fine_q[0, i].double(), out.fine_t[0, i].double())
        for i in range(draw.n_views)
    ]
    pm = pose_metrics(pred_poses, draw.poses)
    pred_maps = [
        PointMap(out.global_points[0, i], draw.valid[i], "world") for i in range(draw.n_views)
    ]
    gt_maps = draw.pointmaps()
    acc, comp = pointcloud_metrics(pred_maps, gt_maps)
    section = {
        "pose": pm.as_dict(),
        "accuracy": acc,
        "completion": comp,
    }
    if holdouts:
        s_pred = pointmap_scale(pred_maps)
        s_gt = pointmap_scale(gt_maps)
        psnrs, ssims = [], []
        for pose, image in holdouts:
            ro = render_normalized(
                out.gaussians[0], s_pred, pose.to(torch.float32), s_gt, draw.intrinsics
            )
            p, s = image_metrics(ro.rgb, image)
            psnrs.append(p)
            ssims.append(s)
        section["psnr"] = float(np.mean(psnrs))
        section["ssim"] = float(np.mean(ssims))
    return section


def evaluate(
    model: CascadeModel,
    samples: Sequence[SceneSample],
    n_views: int | Sequence[int],
    *,
    render: bool = False,
) -> dict:
    """Evaluate a model over scenes at one or more input view counts.

    For each scene, the stored views are split into disjoint subsets of
    ``n_views`` (re-gauged to their first view); if the scene has fewer
    stored views than requested, extra views are regenerated from the scene
    seed.  With ``render=True``, stored views outside the input subset are
    rendered from the predicted Gaussians and scored with PSNR/SSIM.
    Reported numbers are averaged over subsets and scenes.
    """
    if isinstance(n_views, (list, tuple)):
        return {
            "sections": {str(k): evaluate(model, samples, int(k), render=render) for k in n_views}
        }
    k = int(n_views)
    if not 2 <= k <= 25:
        raise ValueError("n_views must be between 2 and 25")
    model.eval()
    scene_reports = []
    for sample in samples:
        if k > sample.n_views:
            sample = sample_views(
                sample.spec, k, seed=sample.spec.seed + 1, intrinsics=sample.intrinsics
            )
        sections = []
        for indices in _view_draws(sample.n_views, k):
            draw = subset_views(sample, indices)
            holdouts = None
            if render:
                anchor_inv = sample.poses[indices[0]].inverse()
                holdouts = [
                    (anchor_inv.compose(sample.poses[h]), sample.images[h])
                    for h in range(sample.n_views)
                    if h not in indices
                ]
            sections.append(_eval_draw(model, draw, holdouts))
        scene_reports.append(
            {"scene_seed": sample.spec.seed, "draws": sections, **_mean_section(sections)}
        )
    report = {
        "n_views": k,
        "scenes": scene_reports,
        "mean": _mean_section(scene_reports),
    }
    return report


def _mean_section(sections: list[dict]) -> dict:
    """Average pose/pointcloud/image metrics over a list of report sections."""

    def collect(path) -> list[float]:
        vals = []
        for s in sections:
            node = s
            for key in path:
                node = node.get(key) if isinstance(node, dict) else None
                if node is None:
                    break
            if node is not None:
                vals.append(float(node))
        return vals

    out: dict = {}
    sample = sections[0]
    pose = sample.get("pose")
    if pose:
        out["pose"] = {
            group: {
                t: float(np.mean(collect(("pose", group, t)))) for t in pose[group]
            }
            for group in ("rra", "rta", "auc")
        }
    for key in ("accuracy", "completion", "psnr", "ssim"):
        vals = collect((key,))
        if vals:
            out[key] = float(np.mean(vals))
    return out


def report_markdown(report: dict) -> str:
    """Render an evaluation report as a small markdown table."""
    sections = report.get("sections") or {str(report.get("n_views")): report}
    lines = ["| views | AUC@30 | RRA@15 | RTA@15 | accuracy | completion | PSNR | SSIM |"]
    lines.append("|---|---|---|---|---|---|---|---|")
    for key, sec in sections.items():
        mean = sec.get("mean", {})
        pose = mean.get("pose", {})

        def fmt(x) -> str:
            return "-" if x is None else f"{x:.4f}"

        lines.append(
            "| {} | {} | {} | {} | {} | {} | {} | {} |".format(
                key,
                fmt(pose.get("auc", {}).get("30")),
                fmt(pose.get("rra", {}).get("15.0")),
                fmt(pose.get("rta", {}).get("15.0")),
                fmt(mean.get("accuracy")),
                fmt(mean.get("completion")),
                fmt(mean.get("psnr")),
                fmt(mean.get("ssim")),
            )
        )
    return "\n".join(lines)
