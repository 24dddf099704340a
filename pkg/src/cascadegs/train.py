"""Training loop: batched scenes, cosine schedule, optional render supervision."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import PointMap, pointmap_scale
from .losses import LossWeights, loss_geo, loss_pose, loss_splat, loss_total
from .model import CascadeModel, ModelConfig, save_checkpoint
from .rasterizer import render_normalized
from .synthdata import SceneSample, subset_views


class NumericalAbort(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    views_per_sample: int = 4
    lr_init: float = 1e-4
    lr_final: float = 1e-5
    grad_clip: float = 1.0
    seed: int = 0
    sigma_rot: float = 0.05
    sigma_trans: float = 0.02
    no_pose: bool = False
    no_camera_centric: bool = False
    no_joint: bool = False
    joint_split: float = 0.5
    with_render_loss: bool = False
    render_from_step: int = 0
    render_scenes_per_step: int = 0  # 0 = every scene in the batch
    holdout_views: int = 1
    teacher_scale_range: tuple[float, float] = (0.5, 2.0)
    teacher_shift_range: tuple[float, float] = (-0.1, 0.1)
    log_every: int = 25
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1 or self.views_per_sample < 2:
            raise ValueError("need batch_size >= 1 and views_per_sample >= 2")
        if not 0.0 <= self.joint_split <= 1.0:
            raise ValueError("joint_split must be in [0, 1]")
        if self.with_render_loss and self.holdout_views < 1:
            raise ValueError("render supervision needs at least one held-out view")


@dataclass
class _Batch:
    images: torch.Tensor  # (B, N, H, W, 3)
    world: torch.Tensor  # (B, N, H, W, 3)
    valid: torch.Tensor  # (B, N, H, W)
    gt_q: torch.Tensor  # (B, N, 4)
    gt_t: torch.Tensor  # (B, N, 3)
    holdouts: list[list[dict]] = field(default_factory=list)  # per scene


def cosine_lr(step: int, total: int, lr_init: float, lr_final: float) -> float:
    """Cosine decay from lr_init to lr_final over ``total`` steps."""
    if total <= 1:
        return lr_init
    progress = min(max(step / (total - 1), 0.0), 1.0)
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * progress))


def _make_batch(
    dataset: list[SceneSample], rng: np.random.Generator, cfg: TrainConfig, want_holdouts: bool
) -> _Batch:
    n_scenes = len(dataset)
    replace = n_scenes < cfg.batch_size
    scene_ids = rng.choice(n_scenes, size=cfg.batch_size, replace=replace)
    images, world, valid, gt_q, gt_t, holdouts = [], [], [], [], [], []
    for sid in scene_ids:
        sample = dataset[int(sid)]
        k = min(cfg.views_per_sample, sample.n_views)
        perm = rng.permutation(sample.n_views)
        inputs = [int(i) for i in perm[:k]]
        draw = subset_views(sample, inputs)
        images.append(draw.images)
        world.append(draw.world_points)
        valid.append(draw.valid)
        gt_q.append(torch.stack([p.q for p in draw.poses]).float())
        gt_t.append(torch.stack([p.t for p in draw.poses]).float())
        scene_holdouts: list[dict] = []
        if want_holdouts:
            anchor_inv = sample.poses[inputs[0]].inverse()
            for h in perm[k : k + cfg.holdout_views]:
                h = int(h)
                pose = anchor_inv.compose(sample.poses[h])
                depth = sample.depths[h]
                mask = sample.valid[h]
                a = float(rng.uniform(*cfg.teacher_scale_range))
                b = float(rng.uniform(*cfg.teacher_shift_range))
                scene_holdouts.append(
                    {
                        "pose": pose.to(torch.float32),
                        "image": sample.images[h],
                        "teacher": torch.where(mask, a * depth + b, torch.zeros(())),
                        "mask": mask,
                    }
                )
        holdouts.append(scene_holdouts)
    return _Batch(
        images=torch.stack(images),
        world=torch.stack(world),
        valid=torch.stack(valid),
        gt_q=torch.stack(gt_q),
        gt_t=torch.stack(gt_t),
        holdouts=holdouts,
    )


def _render_scene_ids(step: int, batch_size: int, per_step: int) -> list[int]:
    if per_step <= 0 or per_step >= batch_size:
        return list(range(batch_size))
    start = (step * per_step) % batch_size
    return [(start + i) % batch_size for i in range(per_step)]


def _splat_term(
    model: CascadeModel, out, batch: _Batch, scene_ids: list[int], intrinsics
) -> tuple[torch.Tensor, dict[str, float]] | None:
    rendered, gt_imgs, teachers, masks = [], [], [], []
    for b in scene_ids:
        if not batch.holdouts[b]:
            continue
        n = batch.images.shape[1]
        pred_maps = [
            PointMap(out.global_points[b, i], batch.valid[b, i], "world") for i in range(n)
        ]
        gt_maps = [PointMap(batch.world[b, i], batch.valid[b, i], "world") for i in range(n)]
        s_pred = pointmap_scale(pred_maps)
        s_gt = pointmap_scale(gt_maps)
        for h in batch.holdouts[b]:
            ro = render_normalized(out.gaussians[b], s_pred, h["pose"], s_gt, intrinsics)
            rendered.append(ro)
            gt_imgs.append(h["image"])
            teachers.append(h["teacher"])
            masks.append(h["mask"])
    if not rendered:
        return None
    return loss_splat(
        rendered,
        torch.stack(gt_imgs),
        torch.stack(teachers),
        torch.stack(masks),
        model.pyramid,
    )


def train(
    dataset: list[SceneSample],
    out_dir: str | Path,
    model_config: ModelConfig | None = None,
    train_config: TrainConfig | None = None,
    weights: LossWeights | None = None,
) -> tuple[Path, list[dict]]:
    """Train a cascade model; returns (checkpoint path, per-step metric rows).

    Deterministic for a fixed seed/configs/dataset.  Writes ``metrics.ndjson``
    (one JSON object per logged step), ``config.json`` (the resolved
    configuration) and ``checkpoint.ckpt`` into ``out_dir``.  A non-finite
    loss raises :class:`NumericalAbort`.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    cfg = train_config or TrainConfig()
    weights = weights or LossWeights()
    sample0 = dataset[0]
    h, w = int(sample0.images.shape[1]), int(sample0.images.shape[2])
    model_config = model_config or ModelConfig(image_height=h, image_width=w)
    if (model_config.image_height, model_config.image_width) != (h, w):
        raise ValueError("model resolution does not match the dataset")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(
            {
                "model": asdict(model_config),
                "train": asdict(cfg),
                "weights": {
                    "lambda_pose": weights.lambda_pose,
                    "lambda_geo": weights.lambda_geo,
                    "lambda_splat": weights.lambda_splat,
                    "alpha": weights.alpha,
                },
            },
            indent=1,
            sort_keys=True,
        )
    )

    torch.manual_seed(cfg.seed)
    model = CascadeModel(
        model_config, no_pose=cfg.no_pose, no_camera_centric=cfg.no_camera_centric
    )
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr_init)
    rng = np.random.default_rng(cfg.seed)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 1)

    pose_modules = [model.pose_latents, model.pose_stack, model.pose_head]
    phase1_steps = int(round(cfg.steps * cfg.joint_split)) if cfg.no_joint else 0
    pose_frozen = False

    metrics: list[dict] = []
    log_path = out_dir / "metrics.ndjson"
    ckpt_path = out_dir / "checkpoint.ckpt"
    t_start = time.time()
    with open(log_path, "w") as log:
        for step in range(cfg.steps):
            in_phase1 = cfg.no_joint and step < phase1_steps
            if cfg.no_joint and not in_phase1 and not pose_frozen:
                for mod in pose_modules:
                    for p in mod.parameters():
                        p.requires_grad_(False)
                pose_frozen = True

            render_active = (
                cfg.with_render_loss and not in_phase1 and step >= cfg.render_from_step
            )
            batch = _make_batch(dataset, rng, cfg, want_holdouts=render_active)
            out = model(
                batch.images,
                pose_noise=(cfg.sigma_rot, cfg.sigma_trans),
                noise_generator=noise_gen,
                with_gaussians=render_active,
                condition_detach=pose_frozen,
            )

            parts: dict[str, float] = {}
            if in_phase1:
                # Phase 1 of two-phase training: the pose predictor alone.
                pose_term = 0.5 * loss_pose(
                    out.coarse_q, out.coarse_t, out.coarse_q, out.coarse_t, batch.gt_q, batch.gt_t
                )
                total, tparts = loss_total(pose_term, None, None, weights)
            else:
                pose_term = loss_pose(
                    out.coarse_q, out.coarse_t, out.fine_q, out.fine_t, batch.gt_q, batch.gt_t
                )
                geo_term, geo_parts = loss_geo(
                    out.local_points,
                    out.local_conf,
                    out.global_points,
                    out.global_conf,
                    batch.world,
                    batch.gt_q,
                    batch.gt_t,
                    batch.valid,
                    weights.alpha,
                )
                parts.update(geo_parts)
                splat_term = None
                if render_active:
                    ids = _render_scene_ids(step, cfg.batch_size, cfg.render_scenes_per_step)
                    res = _splat_term(model, out, batch, ids, sample0.intrinsics)
                    if res is not None:
                        splat_term, splat_parts = res
                        parts.update(splat_parts)
                total, tparts = loss_total(pose_term, geo_term, splat_term, weights)
            parts.update(tparts)

            if not bool(torch.isfinite(total.detach())):
                raise NumericalAbort(f"non-finite loss at step {step}: {parts}")

            lr = cosine_lr(step, cfg.steps, cfg.lr_init, cfg.lr_final)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(
                    [p for p in model.parameters() if p.requires_grad], cfg.grad_clip
                )
            optimizer.step()

            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                row = {
                    "step": step,
                    "lr": lr,
                    "elapsed": round(time.time() - t_start, 3),
                    **{k: round(v, 6) for k, v in parts.items()},
                }
                metrics.append(row)
                log.write(json.dumps(row) + "\n")
                log.flush()
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(
                    out_dir / f"checkpoint_{step + 1:06d}.ckpt",
                    model,
                    extras={"step": step + 1, "train_config": asdict(cfg)},
                )

    save_checkpoint(ckpt_path, model, extras={"step": cfg.steps, "train_config": asdict(cfg)})
    return ckpt_path, metrics
