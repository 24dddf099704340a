"""Command-line interface: generate | train | eval | render.

One JSON config file can hold every option (sections ``model``, ``train``,
``weights``, plus per-command settings); command-line flags override the
file.  The environment variable ``FLARE_MICRO_SEED`` overrides the seed from
either source (CI hook).  Exit codes: 0 success, 2 usage or config error,
3 numerical abort during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import zipfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import PointMap, pointmap_scale, save_pointcloud_ply
from .evaluation import evaluate, report_markdown
from .losses import LossWeights
from .model import ModelConfig, load_checkpoint
from .rasterizer import SH_C0, render_normalized
from .synthdata import generate_dataset, load_dataset, save_dataset, subset_views
from .train import NumericalAbort, TrainConfig, train

SEED_ENV = "FLARE_MICRO_SEED"

_ABLATIONS = ("no_pose", "no_camera_centric", "no_joint")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    config = json.loads(Path(path).read_text())
    if not isinstance(config, dict):
        raise ValueError("config file must contain a JSON object")
    return config


def _resolved_seed(args, config: dict) -> int:
    env = os.environ.get(SEED_ENV)
    if env is not None:
        return int(env)
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    return int(config.get("seed", 0))


def _dataclass_from(cls, section: dict, overrides: dict):
    """Build a config dataclass from a JSON section plus non-None overrides."""
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**merged)


def _echo_config(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(payload, indent=1, sort_keys=True))


def _maybe_resolution(config: dict, args) -> dict:
    section = dict(config.get("model", {}))
    if getattr(args, "width", None):
        section["image_width"] = args.width
    if getattr(args, "height", None):
        section["image_height"] = args.height
    return section


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    config = _load_config_file(args.config)
    seed = _resolved_seed(args, config)
    gen = dict(config.get("generate", {}))
    scenes = args.scenes if args.scenes is not None else int(gen.get("scenes", 8))
    views = args.views if args.views is not None else int(gen.get("views", 8))
    width = args.width if args.width is not None else int(gen.get("width", 64))
    height = args.height if args.height is not None else int(gen.get("height", 48))
    if scenes < 1:
        raise ValueError("need at least one scene")
    if views < 1:
        raise ValueError("need at least one view per scene")
    out = Path(args.out)
    samples = generate_dataset(scenes, views, seed, width=width, height=height)
    save_dataset(out, samples)
    _echo_config(
        out,
        {
            "command": "generate",
            "seed": seed,
            "scenes": scenes,
            "views": views,
            "width": width,
            "height": height,
        },
    )
    print(f"wrote {scenes} scenes x {views} views to {out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config_file(args.config)
    seed = _resolved_seed(args, config)
    dataset_dir = Path(args.dataset)
    dataset = load_dataset(dataset_dir)
    h, w = int(dataset[0].images.shape[1]), int(dataset[0].images.shape[2])

    model_section = dict(config.get("model", {}))
    model_section.setdefault("image_height", h)
    model_section.setdefault("image_width", w)
    model_config = _dataclass_from(ModelConfig, model_section, {})

    ablations = set()
    if args.ablation:
        for item in args.ablation:
            for name in item.split(","):
                name = name.strip()
                if not name:
                    continue
                if name not in _ABLATIONS:
                    raise ValueError(
                        f"unknown ablation {name!r}; choose from {', '.join(_ABLATIONS)}"
                    )
                ablations.add(name)
    overrides = {
        "seed": seed,
        "steps": args.steps,
        "batch_size": args.batch_size,
        "views_per_sample": args.views_per_sample,
        "lr_init": args.lr,
        "sigma_rot": args.sigma_rot,
        "sigma_trans": args.sigma_trans,
        "render_from_step": args.render_from_step,
        "holdout_views": args.holdout_views,
        "log_every": args.log_every,
    }
    for name in ablations:
        overrides[name] = True
    if args.render_loss:
        overrides["with_render_loss"] = True
    train_config = _dataclass_from(TrainConfig, dict(config.get("train", {})), overrides)
    weights = _dataclass_from(LossWeights, dict(config.get("weights", {})), {})

    out = Path(args.out)
    _echo_config(
        out,
        {
            "command": "train",
            "dataset": str(dataset_dir),
            "seed": seed,
            "model": dataclasses.asdict(model_config),
            "train": dataclasses.asdict(train_config),
            "weights": dataclasses.asdict(weights),
        },
    )
    ckpt, metrics = train(dataset, out, model_config, train_config, weights)
    print(f"trained {train_config.steps} steps -> {ckpt}")
    if metrics:
        print(f"final: {json.dumps(metrics[-1])}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config_file(args.config)
    model, header = load_checkpoint(args.checkpoint)
    dataset = load_dataset(Path(args.dataset))
    eval_section = dict(config.get("eval", {}))
    if args.n_views:
        n_views = [int(x) for x in args.n_views.split(",")]
    else:
        n_views = [int(x) for x in eval_section.get("n_views", [4])]
    render = bool(args.render or eval_section.get("render", False))

    report = evaluate(model, dataset, n_views if len(n_views) > 1 else n_views[0], render=render)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    markdown = report_markdown(report)
    (out / "report.md").write_text(markdown + "\n")
    _echo_config(
        out,
        {
            "command": "eval",
            "checkpoint": str(args.checkpoint),
            "dataset": str(args.dataset),
            "n_views": n_views,
            "render": render,
            "checkpoint_header": {k: header[k] for k in ("config", "ablation")},
        },
    )
    print(markdown)
    return 0


def cmd_render(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    dataset = load_dataset(Path(args.dataset))
    names = [f"scene_{i:04d}" for i in range(len(dataset))]
    if args.scene not in names:
        raise ValueError(f"unknown scene {args.scene!r}; have {names}")
    sample = dataset[names.index(args.scene)]
    k = args.n_views or 2
    if not 2 <= k <= sample.n_views:
        raise ValueError(f"n_views must be in [2, {sample.n_views}]")

    draw = subset_views(sample, list(range(k)))
    model.eval()
    with torch.no_grad():
        out_model = model(draw.images[None], with_gaussians=True)
    pred_maps = [
        PointMap(out_model.global_points[0, i], draw.valid[i], "world") for i in range(k)
    ]
    s_pred = pointmap_scale(pred_maps)
    s_gt = pointmap_scale(draw.pointmaps())
    gaussians = out_model.gaussians[0]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    anchor_inv = sample.poses[0].inverse()
    for v in range(sample.n_views):
        pose = anchor_inv.compose(sample.poses[v]).to(torch.float32)
        ro = render_normalized(gaussians, s_pred, pose, s_gt, sample.intrinsics)
        arr = (ro.rgb.clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
        Image.fromarray(arr).save(out / f"render_{v:02d}.png")
    colors = (0.5 + SH_C0 * gaussians.sh[:, 0]).clamp(0, 1)
    save_pointcloud_ply(out / "gaussians.ply", gaussians.centers / s_pred, colors)
    _echo_config(
        out,
        {
            "command": "render",
            "checkpoint": str(args.checkpoint),
            "dataset": str(args.dataset),
            "scene": args.scene,
            "n_views": k,
        },
    )
    print(f"wrote {sample.n_views} renders and gaussians.ply to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cascadegs", description="Sparse-view reconstruction on synthetic scenes"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int, help=f"seed (env {SEED_ENV} overrides)")
        p.add_argument("--out", required=True, help="output directory")

    g = sub.add_parser("generate", help="generate a synthetic dataset")
    common(g)
    g.add_argument("--scenes", type=int)
    g.add_argument("--views", type=int)
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--views-per-sample", dest="views_per_sample", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--sigma-rot", dest="sigma_rot", type=float)
    t.add_argument("--sigma-trans", dest="sigma_trans", type=float)
    t.add_argument(
        "--ablation",
        action="append",
        help=f"comma-separated subset of {{{', '.join(_ABLATIONS)}}}",
    )
    t.add_argument("--render-loss", dest="render_loss", action="store_true")
    t.add_argument("--render-from-step", dest="render_from_step", type=int)
    t.add_argument("--holdout-views", dest="holdout_views", type=int)
    t.add_argument("--log-every", dest="log_every", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--dataset", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--n-views", dest="n_views", help="comma-separated view counts, e.g. 2,6,10")
    e.add_argument("--render", action="store_true", help="also score held-out renders")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="render all views of one scene from a checkpoint")
    common(r)
    r.add_argument("--dataset", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scene", required=True, help="scene name, e.g. scene_0000")
    r.add_argument("--n-views", dest="n_views", type=int, help="input view count")
    r.set_defaults(func=cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    except (ValueError, TypeError, OSError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
