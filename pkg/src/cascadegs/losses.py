"""Training losses: pose regression, confidence-weighted geometry, rendering.

All losses are plain tensor functions of model outputs, fully differentiable
(including the closed-form depth alignment, which stays inside the autograd
graph so finite-difference checks agree with backprop).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import ClassVar, NamedTuple, Sequence

import torch
from torch import Tensor

from .core import huber, quat_normalize, quat_to_rotmat
from .rasterizer import RenderOutput

W_PERP = 0.5  # weight of the perceptual term inside the render loss
W_DEPTH = 0.1  # weight of the aligned-depth term inside the render loss

_SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class LossWeights:
    """Outer loss weights; the inner render-loss weights are fixed."""

    lambda_pose: float = 1.0
    lambda_geo: float = 1.0
    lambda_splat: float = 2.0
    alpha: float = 0.2

    w_perp: ClassVar[float] = W_PERP
    w_depth: ClassVar[float] = W_DEPTH

    def __post_init__(self) -> None:
        if min(self.lambda_pose, self.lambda_geo, self.lambda_splat) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")


def _batched(*tensors: Tensor) -> tuple[Tensor, ...]:
    """Promote (N, ...) pose tensors to (1, N, ...)."""
    if tensors[0].ndim == 2:
        return tuple(t[None] for t in tensors)
    return tensors


def loss_pose(
    coarse_q: Tensor,
    coarse_t: Tensor,
    fine_q: Tensor,
    fine_t: Tensor,
    gt_q: Tensor,
    gt_t: Tensor,
    delta: float = 0.1,
) -> Tensor:
    """Huber loss on 7-dim pose differences, coarse and fine terms added.

    Poses are ``(B, N, 4)`` quaternions plus ``(B, N, 3)`` translations (a
    leading batch dim is optional).  Quaternions are hemisphere-canonicalized
    on both sides, so ``q`` and ``-q`` give identical losses.  The per-view
    Huber penalties are summed over views and averaged over the batch.
    """
    coarse_q, coarse_t, fine_q, fine_t, gt_q, gt_t = _batched(
        coarse_q, coarse_t, fine_q, fine_t, gt_q, gt_t
    )
    if not (coarse_q.shape == fine_q.shape == gt_q.shape):
        raise ValueError("pose tensors must have matching shapes")
    if not (coarse_t.shape == fine_t.shape == gt_t.shape):
        raise ValueError("translation tensors must have matching shapes")
    ref_q = quat_normalize(gt_q)

    def term(q: Tensor, t: Tensor) -> Tensor:
        residual = torch.cat([quat_normalize(q) - ref_q, t - gt_t], dim=-1)
        return huber(residual, delta).sum(dim=-1)

    return (term(coarse_q, coarse_t) + term(fine_q, fine_t)).mean()


def _confidence_term(
    pred: Tensor, conf: Tensor, gt: Tensor, valid: Tensor, alpha: float
) -> Tensor:
    """Mean over valid pixels of ``C * l - alpha * log(C)``, one frame.

    Predicted and ground-truth maps are each normalized by their own average
    valid-point norm, computed jointly across the views of each sample.
    """
    counts = valid.sum(dim=(1, 2, 3))
    if bool((counts == 0).any()):
        raise ValueError("zero valid pixels in at least one sample")
    mask = valid.to(pred.dtype)
    norm_dims = (1, 2, 3)
    s_pred = (pred.norm(dim=-1) * mask).sum(norm_dims) / counts
    s_gt = (gt.norm(dim=-1) * mask).sum(norm_dims) / counts
    s_pred = s_pred.clamp_min(_SCALE_FLOOR)
    s_gt = s_gt.clamp_min(_SCALE_FLOOR)
    view = (-1, 1, 1, 1, 1)
    residual = (pred / s_pred.view(view) - gt / s_gt.view(view)).norm(dim=-1)
    per_pixel = conf * residual - alpha * torch.log(conf)
    return ((per_pixel * mask).sum(norm_dims) / counts).mean()


def loss_geo(
    local_points: Tensor | None,
    local_conf: Tensor | None,
    global_points: Tensor,
    global_conf: Tensor,
    gt_world: Tensor,
    gt_q: Tensor,
    gt_t: Tensor,
    valid: Tensor,
    alpha: float = 0.2,
) -> tuple[Tensor, dict[str, float]]:
    """Confidence-aware point-map regression in two frames.

    The camera-frame target is the world ground truth moved into each view
    by the inverse ground-truth pose.  Each frame contributes the mean over
    valid pixels of ``C * ||p_hat/s_hat - p/s|| - alpha * log C``; the two
    frames are summed.  ``local_points=None`` (no camera-centric branch)
    skips the camera-frame term.
    """
    parts: dict[str, float] = {}
    terms = []
    if local_points is not None:
        if local_conf is None:
            raise ValueError("local confidence missing")
        rot = quat_to_rotmat(quat_normalize(gt_q)).to(gt_world.dtype)
        centered = gt_world - gt_t[:, :, None, None, :].to(gt_world.dtype)
        gt_local = torch.einsum("bnhwj,bnjk->bnhwk", centered, rot)
        local = _confidence_term(local_points, local_conf, gt_local, valid, alpha)
        terms.append(local)
        parts["geo_local"] = float(local.detach())
    glob = _confidence_term(global_points, global_conf, gt_world, valid, alpha)
    terms.append(glob)
    parts["geo_global"] = float(glob.detach())
    total = sum(terms[1:], terms[0])
    return total, parts


def optimal_confidence(residual: Tensor, alpha: float) -> Tensor:
    """Unconstrained pointwise minimizer of ``C*l - alpha*log(C)``: ``alpha/l``."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return alpha / residual


class DepthAlignment(NamedTuple):
    scale: Tensor
    shift: Tensor
    degenerate: bool


def align_depth(d_pred: Tensor, d_ref: Tensor, mask: Tensor) -> DepthAlignment:
    """Closed-form least squares ``min ||w * d_ref + q - d_pred||`` on masked pixels.

    Solves the 2x2 normal equations; differentiable with respect to both
    depth grids.  A (near-)constant reference makes the system singular, in
    which case ``(0, mean(d_pred))`` is returned with ``degenerate=True``.
    """
    if d_pred.shape != d_ref.shape or d_pred.shape != mask.shape:
        raise ValueError("depth grids and mask must share a shape")
    m = mask.to(d_pred.dtype)
    n = m.sum()
    if float(n) < 2:
        raise ValueError("need at least 2 masked pixels to align depth")
    sum_r = (d_ref * m).sum()
    sum_p = (d_pred * m).sum()
    sum_rr = (d_ref * d_ref * m).sum()
    sum_rp = (d_ref * d_pred * m).sum()
    det = n * sum_rr - sum_r * sum_r  # n^2 * var(d_ref)
    if float(det.detach()) <= 1e-12 * max(float((n * sum_rr).detach()), 1.0):
        return DepthAlignment(torch.zeros_like(det), sum_p / n, True)
    w = (n * sum_rp - sum_r * sum_p) / det
    q = (sum_p - w * sum_r) / n
    return DepthAlignment(w, q, False)


def perceptual_distance(pyramid, image_a: Tensor, image_b: Tensor) -> Tensor:
    """Mean squared distance between frozen pyramid features at 3 scales."""
    a = image_a.permute(2, 0, 1)[None]
    b = image_b.permute(2, 0, 1)[None]
    feats_a = pyramid.features(a)
    feats_b = pyramid.features(b)
    dists = [(fa - fb).square().mean() for fa, fb in zip(feats_a, feats_b)]
    return sum(dists) / len(dists)


def loss_splat(
    rendered: Sequence[RenderOutput],
    gt_images: Tensor,
    teacher_depths: Tensor,
    masks: Tensor,
    pyramid,
) -> tuple[Tensor, dict[str, float]]:
    """Render supervision: MSE + 0.5 * perceptual + 0.1 * aligned-depth L1.

    One entry per held-out view: ``gt_images (K, H, W, 3)``,
    ``teacher_depths (K, H, W)`` (possibly affine-corrupted depth whose scale
    and shift the alignment must absorb), ``masks (K, H, W)`` marking pixels
    with a usable teacher depth.  Terms are summed over views.
    """
    if len(rendered) != gt_images.shape[0]:
        raise ValueError("need one rendered output per supervision view")
    total = gt_images.new_zeros(())
    acc = {"splat_mse": 0.0, "splat_perceptual": 0.0, "splat_depth": 0.0}
    for i, out in enumerate(rendered):
        gt = gt_images[i].to(out.rgb.dtype)
        mse = (out.rgb - gt).square().mean()
        perp = perceptual_distance(pyramid, out.rgb, gt)
        mask = masks[i]
        if bool(mask.any()):
            w, q, _ = align_depth(out.depth, teacher_depths[i].to(out.depth.dtype), mask)
            aligned = w * teacher_depths[i].to(out.depth.dtype) + q
            depth_term = ((aligned - out.depth).abs() * mask.to(out.depth.dtype)).sum() / mask.sum()
        else:
            depth_term = out.depth.new_zeros(())
        total = total + mse + W_PERP * perp + W_DEPTH * depth_term
        acc["splat_mse"] += float(mse.detach())
        acc["splat_perceptual"] += float(perp.detach())
        acc["splat_depth"] += float(depth_term.detach())
    return total, acc


def loss_total(
    pose: Tensor | None,
    geo: Tensor | None,
    splat: Tensor | None,
    weights: LossWeights,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the enabled branches.

    A branch with weight 0 (or a ``None`` value) is excluded from the graph
    entirely, so disabling a loss also removes its gradient contribution.
    """
    named = [
        ("pose", pose, weights.lambda_pose),
        ("geo", geo, weights.lambda_geo),
        ("splat", splat, weights.lambda_splat),
    ]
    total: Tensor | None = None
    parts: dict[str, float] = {}
    for name, value, lam in named:
        if value is None or lam == 0.0:
            continue
        contrib = lam * value
        total = contrib if total is None else total + contrib
        parts[name] = float(value.detach())
    if total is None:
        raise ValueError("no loss branch is enabled")
    parts["total"] = float(total.detach())
    return total, parts
