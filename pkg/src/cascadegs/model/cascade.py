"""The reconstruction cascade: poses -> local geometry -> global geometry -> Gaussians."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

from ..core import quat_multiply, quat_normalize, quat_rotate
from ..rasterizer import GaussianSet
from ..synthdata import perturb_pose_tensors
from .blocks import (
    PoseEmbed,
    PoseReadout,
    TokenGrid,
    Tokenizer,
    TransformerStack,
    ViewLatents,
    tap_indices,
)
from .heads import (
    AppearanceDecoder,
    DenseDecoder,
    FrozenImagePyramid,
    GaussianHead,
    split_points_confidence,
)

CHECKPOINT_FORMAT = "cascadegs-checkpoint-v1"


@dataclass(frozen=True)
class ModelConfig:
    patch: int = 8
    width: int = 192
    depth_pose: int = 4
    depth_local: int = 6
    depth_global: int = 6
    n_heads: int = 6
    sh_degree: int = 0
    max_views: int = 25
    image_height: int = 48
    image_width: int = 64
    decoder_channels: int = 64
    appearance_channels: int = 16
    pyramid_channels: int = 16

    def __post_init__(self) -> None:
        if self.patch not in (2, 4, 8, 16):
            raise ValueError("patch must be one of 2, 4, 8, 16")
        if self.width % self.n_heads:
            raise ValueError("width must be divisible by n_heads")
        if self.image_height % self.patch or self.image_width % self.patch:
            raise ValueError("image size must be divisible by the patch size")
        if self.sh_degree not in (0, 1):
            raise ValueError("sh_degree must be 0 or 1")
        if min(self.depth_pose, self.depth_local, self.depth_global) < 1:
            raise ValueError("all stack depths must be >= 1")


@dataclass
class CascadeOutput:
    """Everything one forward pass predicts.

    Pose tensors are ``(B, N, 4)`` / ``(B, N, 3)``; dense maps are
    ``(B, N, H, W, 3)`` positions with ``(B, N, H, W)`` confidence.  The
    local (camera-centric) branch is ``None`` when the model runs as a
    single global stack; Gaussians are built on request only.
    """

    coarse_q: Tensor
    coarse_t: Tensor
    cond_q: Tensor  # the (possibly noise-perturbed) poses the geometry saw
    cond_t: Tensor
    fine_q: Tensor
    fine_t: Tensor
    local_points: Tensor | None
    local_conf: Tensor | None
    global_points: Tensor
    global_conf: Tensor
    appearance: Tensor | None = None
    gaussians: list[GaussianSet] | None = None


class CascadeModel(nn.Module):
    """Feed-forward sparse-view reconstructor.

    Stage 1 predicts coarse camera poses from image tokens plus per-view
    camera latents.  Stage 2 re-reads the images conditioned on those poses
    and produces camera-centric point maps together with refined poses.
    Stage 3 projects the result into the global (first-camera) frame, and an
    appearance decoder plus a small conv head turn the global point map into
    pixel-aligned 3D Gaussians.

    Two structural switches support controlled comparisons: ``no_pose``
    replaces the pose-conditioning tokens with a learned null token, and
    ``single_stack`` (no camera-centric branch) runs both geometry stacks
    back to back, decoding only global geometry.
    """

    def __init__(
        self, config: ModelConfig, *, no_pose: bool = False, no_camera_centric: bool = False
    ):
        super().__init__()
        self.config = config
        self.no_pose = bool(no_pose)
        self.no_camera_centric = bool(no_camera_centric)
        c = config
        hw = (c.image_height, c.image_width)

        self.tokenizer = Tokenizer(c.patch, c.width, hw, c.max_views)
        # Stage 1: coarse poses.
        self.pose_latents = ViewLatents(c.width, c.max_views)
        self.pose_stack = TransformerStack(c.width, c.depth_pose, c.n_heads)
        self.pose_head = PoseReadout(c.width)
        # Stage 2: camera-centric geometry + pose refinement.
        self.local_pose_embed = PoseEmbed(c.width)
        self.local_null_token = nn.Parameter(torch.zeros(1, c.width))
        self.local_latents = ViewLatents(c.width, c.max_views)
        self.local_stack = TransformerStack(c.width, c.depth_local, c.n_heads)
        self.local_head = PoseReadout(c.width)
        self.local_decoder = DenseDecoder(c.width, c.decoder_channels, c.patch, 4)
        # Stage 3: global geometry + appearance.
        self.global_pose_embed = PoseEmbed(c.width)
        self.global_null_token = nn.Parameter(torch.zeros(1, c.width))
        self.global_stack = TransformerStack(c.width, c.depth_global, c.n_heads)
        self.global_decoder = DenseDecoder(c.width, c.decoder_channels, c.patch, 4)
        self.appearance_decoder = AppearanceDecoder(
            c.width, c.decoder_channels, c.patch, c.appearance_channels
        )
        # Gaussian parameters.
        self.pyramid = FrozenImagePyramid(c.pyramid_channels)
        self.gaussian_head = GaussianHead(c.appearance_channels, c.pyramid_channels, c.sh_degree)

        self._local_taps = tap_indices(c.depth_local)
        self._global_taps = tap_indices(c.depth_global)

    # -- helpers ---------------------------------------------------------

    def _pose_tokens(self, embed: PoseEmbed, null: Tensor, q: Tensor, t: Tensor) -> Tensor:
        if self.no_pose:
            b, n = q.shape[:2]
            return null.expand(b, n, -1).to(q.dtype)
        return embed(q, t)

    @staticmethod
    def _token_taps(taps: list[Tensor], grid: TokenGrid) -> list[TokenGrid]:
        n_tok = grid.tokens.shape[1] * grid.tokens.shape[2]
        b, n = grid.tokens.shape[:2]
        out = []
        for t in taps:
            tok = t[:, :n_tok].reshape(b, n, grid.rows * grid.cols, -1)
            out.append(TokenGrid(tok, grid.rows, grid.cols))
        return out

    # -- forward ---------------------------------------------------------

    def forward(
        self,
        images: Tensor,
        *,
        pose_noise: tuple[float, float] | None = None,
        noise_generator: torch.Generator | None = None,
        with_gaussians: bool = False,
        condition_detach: bool = False,
    ) -> CascadeOutput:
        grid = self.tokenizer(images)
        b, n = grid.tokens.shape[:2]
        flat = grid.tokens.reshape(b, -1, grid.tokens.shape[-1])

        # Stage 1: coarse poses from image tokens + camera latents.
        seq = torch.cat([flat, self.pose_latents(b, n).to(flat.dtype)], dim=1)
        seq, _ = self.pose_stack(seq)
        coarse_q, coarse_t = self.pose_head(seq[:, -n:])

        cond_q, cond_t = coarse_q, coarse_t
        if condition_detach:
            # Two-phase training: the geometry stages see the coarse poses as
            # constants so no gradient reaches the (frozen) pose predictor.
            cond_q, cond_t = cond_q.detach(), cond_t.detach()
        if pose_noise is not None:
            sigma_rot, sigma_trans = pose_noise
            cond_q, cond_t = perturb_pose_tensors(
                cond_q, cond_t, sigma_rot, sigma_trans, noise_generator
            )

        pose_tok = self._pose_tokens(self.local_pose_embed, self.local_null_token, cond_q, cond_t)
        refine = self.local_latents(b, n).to(flat.dtype)
        seq = torch.cat([flat, pose_tok, refine], dim=1)

        if self.no_camera_centric:
            # One stack, twice the depth, straight to global geometry.
            seq, _ = self.local_stack(seq)
            seq, g_taps = self.global_stack(seq, self._global_taps)
            fine_q, fine_t = self._refine_pose(
                coarse_q, coarse_t, seq[:, -n:], condition_detach
            )
            local_points = local_conf = None
            global_grid_taps = self._token_taps(g_taps, grid)
        else:
            seq, l_taps = self.local_stack(seq, self._local_taps)
            fine_q, fine_t = self._refine_pose(
                coarse_q, coarse_t, seq[:, -n:], condition_detach
            )
            local_tokens = seq[:, : flat.shape[1]]
            local_points, local_conf = split_points_confidence(
                self.local_decoder(self._token_taps(l_taps, grid))
            )
            pose_tok_g = self._pose_tokens(
                self.global_pose_embed, self.global_null_token, fine_q, fine_t
            )
            seq = torch.cat([local_tokens, pose_tok_g], dim=1)
            seq, g_taps = self.global_stack(seq, self._global_taps)
            global_grid_taps = self._token_taps(g_taps, grid)

        global_points, global_conf = split_points_confidence(
            self.global_decoder(global_grid_taps)
        )

        appearance = None
        gaussians = None
        if with_gaussians:
            appearance = self.appearance_decoder(global_grid_taps)
            imgs_flat = images.permute(0, 1, 4, 2, 3).reshape(-1, 3, *images.shape[2:4])
            feats = self.pyramid.features(imgs_flat)[0]
            feats = feats.reshape(b, n, *feats.shape[1:])
            gaussians = self.gaussian_head(global_points, appearance, feats, images)

        return CascadeOutput(
            coarse_q=coarse_q,
            coarse_t=coarse_t,
            cond_q=cond_q,
            cond_t=cond_t,
            fine_q=fine_q,
            fine_t=fine_t,
            local_points=local_points,
            local_conf=local_conf,
            global_points=global_points,
            global_conf=global_conf,
            appearance=appearance,
            gaussians=gaussians,
        )

    def _refine_pose(
        self, coarse_q: Tensor, coarse_t: Tensor, tokens: Tensor, detach_base: bool
    ) -> tuple[Tensor, Tensor]:
        """Compose a zero-initialized offset readout onto the coarse poses.

        Refinement starts exactly at the coarse estimate (the offset head
        reads out identity at initialization) and only has to learn a
        correction, not the pose from scratch.  ``detach_base`` mirrors the
        conditioning detach of two-phase training so no gradient reaches a
        frozen pose branch.
        """
        off_q, off_t = self.local_head(tokens)
        base_q = coarse_q.detach() if detach_base else coarse_q
        base_t = coarse_t.detach() if detach_base else coarse_t
        fine_q = quat_normalize(quat_multiply(base_q, off_q))
        fine_t = quat_rotate(base_q, off_t) + base_t
        return fine_q, fine_t

    def assert_invariants(self, out: CascadeOutput) -> None:
        """Cheap value-level checks that must hold after any forward pass."""
        with torch.no_grad():
            for q in (out.coarse_q, out.fine_q):
                norms = q.norm(dim=-1)
                assert bool(((norms - 1).abs() < 1e-5).all()), "pose quaternions must be unit"
                ident = q[:, 0, 0] == 1
                assert bool(ident.all()), "view 0 must stay the identity gauge"
            for conf in (out.local_conf, out.global_conf):
                if conf is not None:
                    assert bool((conf > 1).all()), "confidence must be > 1"
            if out.gaussians is not None:
                for g in out.gaussians:
                    g.validate()


# ---------------------------------------------------------------------------
# Checkpoint IO
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str | Path, model: CascadeModel, extras: dict | None = None
) -> None:
    """Write a self-describing checkpoint archive.

    A zip with ``header.json`` (model config, structural switches, arbitrary
    JSON extras) and one ``params/<name>.npy`` per state-dict entry, stored
    float32 little-endian.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "ablation": {"no_pose": model.no_pose, "no_camera_centric": model.no_camera_centric},
        "extras": extras or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("header.json", json.dumps(header, indent=1, sort_keys=True))
        for name, tensor in model.state_dict().items():
            buf = io.BytesIO()
            np.save(buf, tensor.detach().cpu().numpy().astype("<f4"))
            zf.writestr(f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[CascadeModel, dict]:
    """Rebuild a model from :func:`save_checkpoint` output.

    Validates the format marker and that every expected parameter is present
    with the right shape; raises ``ValueError`` on any mismatch (truncated or
    corrupted archives raise ``zipfile.BadZipFile`` from the zip layer).
    """
    path = Path(path)
    with zipfile.ZipFile(path, "r") as zf:
        try:
            header = json.loads(zf.read("header.json"))
        except KeyError as exc:
            raise ValueError(f"checkpoint {path} is missing header.json") from exc
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"checkpoint {path} has unknown format {header.get('format')!r}")
        config = ModelConfig(**header["config"])
        ablation = header.get("ablation", {})
        model = CascadeModel(
            config,
            no_pose=bool(ablation.get("no_pose", False)),
            no_camera_centric=bool(ablation.get("no_camera_centric", False)),
        )
        state = model.state_dict()
        names = {n for n in zf.namelist() if n.startswith("params/")}
        loaded = {}
        for name, ref in state.items():
            member = f"params/{name}.npy"
            if member not in names:
                raise ValueError(f"checkpoint {path} is missing parameter {name}")
            arr = np.load(io.BytesIO(zf.read(member)))
            if tuple(arr.shape) != tuple(ref.shape):
                raise ValueError(
                    f"checkpoint parameter {name} has shape {arr.shape}, expected {tuple(ref.shape)}"
                )
            loaded[name] = torch.from_numpy(arr.astype(np.float32))
            names.discard(member)
        if names:
            raise ValueError(f"checkpoint {path} has unexpected entries: {sorted(names)[:3]}")
    model.load_state_dict(loaded)
    return model, header
