import math

import numpy as np
import pytest
import torch

from cascadegs.core import CameraPose, Intrinsics, quat_normalize
from cascadegs.rasterizer import (
    ALPHA_CEIL,
    COV_DILATION,
    SH_C0,
    GaussianSet,
    render,
    render_normalized,
)

INTR = Intrinsics(fx=30.0, fy=30.0, cx=8.0, cy=8.0, width=16, height=16)


def solid_color_sh(rgb):
    return (torch.tensor([rgb], dtype=torch.float64) - 0.5) / SH_C0


def single_gaussian(center=(0.0, 0.0, 2.0), scale=0.5, opacity=0.95, rgb=(0.9, 0.1, 0.1)):
    return GaussianSet(
        centers=torch.tensor([center], dtype=torch.float64),
        opacities=torch.tensor([opacity], dtype=torch.float64),
        rotations=torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=torch.float64),
        scales=torch.full((1, 3), scale, dtype=torch.float64),
        sh=solid_color_sh(rgb)[:, None, :],
    )


def random_gaussians(m, seed=0, z_offset=3.0):
    g = torch.Generator().manual_seed(seed)
    centers = torch.randn(m, 3, generator=g, dtype=torch.float64) * 0.6
    centers[:, 2] += z_offset
    return GaussianSet(
        centers=centers,
        opacities=torch.rand(m, generator=g, dtype=torch.float64) * 0.6 + 0.3,
        rotations=quat_normalize(torch.randn(m, 4, generator=g, dtype=torch.float64)),
        scales=torch.rand(m, 3, generator=g, dtype=torch.float64) * 0.25 + 0.05,
        sh=torch.randn(m, 1, 3, generator=g, dtype=torch.float64) * 0.3,
    )


def identity_pose():
    return CameraPose.identity()


# ---------------------------------------------------------------------------
# basic contracts
# ---------------------------------------------------------------------------


def test_empty_scene_renders_background():
    empty = GaussianSet(
        centers=torch.zeros(0, 3, dtype=torch.float64),
        opacities=torch.zeros(0, dtype=torch.float64),
        rotations=torch.zeros(0, 4, dtype=torch.float64),
        scales=torch.zeros(0, 3, dtype=torch.float64),
        sh=torch.zeros(0, 1, 3, dtype=torch.float64),
    )
    bg = torch.tensor([0.2, 0.4, 0.6], dtype=torch.float64)
    out = render(empty, identity_pose(), INTR, background=bg)
    assert torch.allclose(out.rgb, bg.expand(16, 16, 3))
    assert out.alpha.abs().max().item() == 0.0
    assert out.depth.abs().max().item() == 0.0


def test_behind_camera_renders_background():
    gs = single_gaussian(center=(0.0, 0.0, -2.0))
    out = render(gs, identity_pose(), INTR)
    assert out.rgb.abs().max().item() == 0.0
    assert out.alpha.abs().max().item() == 0.0


def test_fully_culled_scene_still_backpropagates():
    # A loss computed on an all-culled frame must yield zero gradients,
    # not an autograd error, so training survives transient states where
    # a camera sees nothing.
    gs = single_gaussian(center=(0.0, 0.0, -2.0))
    centers = gs.centers.clone().requires_grad_(True)
    gs = GaussianSet(
        centers=centers,
        opacities=gs.opacities,
        rotations=gs.rotations,
        scales=gs.scales,
        sh=gs.sh,
    )
    out = render(gs, identity_pose(), INTR)
    loss = out.rgb.sum() + out.depth.sum() + out.alpha.sum()
    loss.backward()
    assert centers.grad is not None
    assert centers.grad.abs().max().item() == 0.0


def test_near_plane_cull():
    gs = single_gaussian(center=(0.0, 0.0, 0.005))
    out = render(gs, identity_pose(), INTR)
    assert out.alpha.abs().max().item() == 0.0


def test_single_gaussian_matches_closed_form():
    # Independent numpy oracle for one isotropic on-axis Gaussian: the EWA
    # footprint is diag(fx^2 s^2 / z^2 + dilation), alpha(p) is the clamped
    # Gaussian times opacity, rgb = alpha * color, depth = alpha * z.
    z, s, op = 2.0, 0.5, 0.95
    gs = single_gaussian(center=(0.0, 0.0, z), scale=s, opacity=op)
    out = render(gs, identity_pose(), INTR, stop_transmittance=0.0)

    sigma2 = (INTR.fx * s / z) ** 2 + COV_DILATION
    uu, vv = np.meshgrid(np.arange(16.0), np.arange(16.0))
    d2 = (uu - 8.0) ** 2 + (vv - 8.0) ** 2
    alpha = np.minimum(op * np.exp(-0.5 * d2 / sigma2), ALPHA_CEIL)
    assert np.allclose(out.alpha.numpy(), alpha, atol=1e-12)
    assert np.allclose(out.depth.numpy(), alpha * z, atol=1e-12)
    expected_rgb = alpha[..., None] * np.array([0.9, 0.1, 0.1])
    assert np.allclose(out.rgb.numpy(), expected_rgb, atol=1e-12)


def test_center_pixel_is_opaque_red():
    gs = single_gaussian(opacity=0.97)
    out = render(gs, identity_pose(), INTR)
    assert out.alpha[8, 8].item() >= 0.9
    assert out.rgb[8, 8, 0].item() > 0.8
    assert out.rgb[8, 8, 1].item() < 0.15


def test_occlusion_limit():
    near = single_gaussian(center=(0.0, 0.0, 1.0), opacity=0.999, rgb=(1.0, 0.0, 0.0))
    far = single_gaussian(center=(0.0, 0.0, 3.0), opacity=0.9, rgb=(0.0, 1.0, 0.0))
    both = GaussianSet(
        centers=torch.cat([near.centers, far.centers]),
        opacities=torch.cat([near.opacities, far.opacities]),
        rotations=torch.cat([near.rotations, far.rotations]),
        scales=torch.cat([near.scales, far.scales]),
        sh=torch.cat([near.sh, far.sh]),
    )
    out = render(both, identity_pose(), INTR)
    only_near = render(near, identity_pose(), INTR)
    # The far Gaussian contributes at most (1 - 0.999) of its color.
    assert (out.rgb[8, 8] - only_near.rgb[8, 8]).abs().max().item() < 1e-3


def test_background_fills_transmittance():
    gs = single_gaussian(opacity=0.5)
    bg = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)
    out = render(gs, identity_pose(), INTR, background=bg)
    corner_alpha = out.alpha[0, 0].item()
    assert abs(out.rgb[0, 0, 2].item() - (1 - corner_alpha) * 1.0 - corner_alpha * 0.1) < 1e-6


def test_render_output_invariants():
    gs = random_gaussians(60, seed=3)
    out = render(gs, identity_pose(), INTR)
    assert torch.isfinite(out.rgb).all()
    assert torch.isfinite(out.depth).all()
    assert (out.alpha >= 0).all() and (out.alpha <= 1.0).all()


# ---------------------------------------------------------------------------
# invariances
# ---------------------------------------------------------------------------


def test_quaternion_sign_flip_invariance():
    gs = random_gaussians(20, seed=5)
    flipped = GaussianSet(
        centers=gs.centers,
        opacities=gs.opacities,
        rotations=-gs.rotations,
        scales=gs.scales,
        sh=gs.sh,
    )
    a = render(gs, identity_pose(), INTR, stop_transmittance=0.0)
    b = render(flipped, identity_pose(), INTR, stop_transmittance=0.0)
    assert (a.rgb - b.rgb).abs().max().item() < 1e-6
    assert (a.depth - b.depth).abs().max().item() < 1e-6


def test_similarity_invariance():
    pose = CameraPose(
        quat_normalize(torch.tensor([0.9, 0.1, -0.3, 0.2], dtype=torch.float64)),
        torch.tensor([0.4, -0.2, -2.5], dtype=torch.float64),
    )
    gs = random_gaussians(40, seed=7, z_offset=0.0)
    base = render(gs, pose, INTR, stop_transmittance=0.0)
    for k in (0.5, 2.0, 10.0):
        scaled = GaussianSet(
            centers=gs.centers * k,
            opacities=gs.opacities,
            rotations=gs.rotations,
            scales=gs.scales * k,
            sh=gs.sh,
        )
        pose_k = CameraPose(pose.q, pose.t * k)
        out = render(scaled, pose_k, INTR, stop_transmittance=0.0)
        assert (out.rgb - base.rgb).abs().max().item() < 1e-6
        assert (out.alpha - base.alpha).abs().max().item() < 1e-6
        rel = (out.depth - k * base.depth).abs().max().item()
        assert rel < 1e-6 * max(1.0, k * base.depth.abs().max().item())


def test_opacity_monotonicity():
    gs = random_gaussians(15, seed=9)
    before = render(gs, identity_pose(), INTR, stop_transmittance=0.0).alpha
    bumped = gs.opacities.clone()
    bumped[4] = min(0.998, bumped[4].item() + 0.3)
    after = render(
        GaussianSet(gs.centers, bumped, gs.rotations, gs.scales, gs.sh),
        identity_pose(),
        INTR,
        stop_transmittance=0.0,
    ).alpha
    assert (after - before).min().item() > -1e-9


def test_chunked_compositing_matches_unchunked():
    gs = random_gaussians(50, seed=11)
    a = render(gs, identity_pose(), INTR, chunk_size=7, stop_transmittance=0.0)
    b = render(gs, identity_pose(), INTR, chunk_size=4096, stop_transmittance=0.0)
    assert torch.allclose(a.rgb, b.rgb, atol=1e-12)
    assert torch.allclose(a.depth, b.depth, atol=1e-12)
    assert torch.allclose(a.alpha, b.alpha, atol=1e-12)


def test_early_stop_error_is_bounded():
    gs = random_gaussians(80, seed=13)
    exact = render(gs, identity_pose(), INTR, chunk_size=8, stop_transmittance=0.0)
    fast = render(gs, identity_pose(), INTR, chunk_size=8, stop_transmittance=1e-4)
    assert (exact.rgb - fast.rgb).abs().max().item() < 1e-4


def test_extreme_anisotropy_stays_finite():
    gs = single_gaussian(scale=1.0)
    gs = GaussianSet(
        centers=gs.centers,
        opacities=gs.opacities,
        rotations=gs.rotations,
        scales=torch.tensor([[1e-4, 0.5, 1e-4]], dtype=torch.float64),
        sh=gs.sh,
    )
    out = render(gs, identity_pose(), INTR)
    assert torch.isfinite(out.rgb).all() and torch.isfinite(out.alpha).all()


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def test_checkpointed_backward_matches_direct():
    gs = random_gaussians(30, seed=15)
    grads = []
    for chunk in (4, 4096):  # chunk < m exercises the checkpointed path
        centers = gs.centers.clone().requires_grad_(True)
        opac = gs.opacities.clone().requires_grad_(True)
        out = render(
            GaussianSet(centers, opac, gs.rotations, gs.scales, gs.sh),
            identity_pose(),
            INTR,
            chunk_size=chunk,
            stop_transmittance=0.0,
        )
        (out.rgb.square().sum() + out.depth.sum()).backward()
        grads.append((centers.grad.clone(), opac.grad.clone()))
    assert torch.allclose(grads[0][0], grads[1][0], atol=1e-10)
    assert torch.allclose(grads[0][1], grads[1][1], atol=1e-10)


def test_gradients_flow_to_all_parameters():
    gs = random_gaussians(10, seed=17)
    params = {
        "centers": gs.centers.clone().requires_grad_(True),
        "opacities": gs.opacities.clone().requires_grad_(True),
        "rotations": gs.rotations.clone().requires_grad_(True),
        "scales": gs.scales.clone().requires_grad_(True),
        "sh": gs.sh.clone().requires_grad_(True),
    }
    out = render(
        GaussianSet(**{k: v for k, v in params.items()}),
        identity_pose(),
        INTR,
        stop_transmittance=0.0,
    )
    out.rgb.square().sum().backward()
    for name, p in params.items():
        assert p.grad is not None and p.grad.abs().sum().item() > 0, name


# ---------------------------------------------------------------------------
# render_normalized
# ---------------------------------------------------------------------------


def test_render_normalized_unit_scales_equals_render():
    gs = random_gaussians(25, seed=19)
    one = torch.tensor(1.0, dtype=torch.float64)
    a = render(gs, identity_pose(), INTR, stop_transmittance=0.0)
    b = render_normalized(gs, one, identity_pose(), one, INTR, stop_transmittance=0.0)
    assert torch.equal(a.rgb, b.rgb)
    assert torch.equal(a.depth, b.depth)


def test_render_normalized_undoes_similarity():
    # A scene and camera both scaled by k, rendered with s_pred = s_gt = k,
    # reproduces the unscaled render (the normalization scheme's whole point).
    k = 2.0
    gs = single_gaussian()
    scaled = GaussianSet(
        centers=gs.centers * k,
        opacities=gs.opacities,
        rotations=gs.rotations,
        scales=gs.scales * k,
        sh=gs.sh,
    )
    pose = CameraPose(
        torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64),
        torch.tensor([0.1, 0.0, 0.0], dtype=torch.float64),
    )
    pose_k = CameraPose(pose.q, pose.t * k)
    kk = torch.tensor(k, dtype=torch.float64)
    base = render(gs, pose, INTR, stop_transmittance=0.0)
    normed = render_normalized(scaled, kk, pose_k, kk, INTR, stop_transmittance=0.0)
    assert (base.rgb - normed.rgb).abs().max().item() < 1e-6
    assert (base.depth - normed.depth).abs().max().item() < 1e-6


def test_render_normalized_rejects_nonpositive_scale():
    gs = single_gaussian()
    one = torch.tensor(1.0, dtype=torch.float64)
    zero = torch.tensor(0.0, dtype=torch.float64)
    with pytest.raises(ValueError):
        render_normalized(gs, zero, identity_pose(), one, INTR)
    with pytest.raises(ValueError):
        render_normalized(gs, one, identity_pose(), -one, INTR)


# ---------------------------------------------------------------------------
# GaussianSet validation
# ---------------------------------------------------------------------------


def test_gaussian_set_shape_validation():
    with pytest.raises(ValueError):
        GaussianSet(
            centers=torch.zeros(3, 3),
            opacities=torch.full((2,), 0.5),
            rotations=torch.tensor([[1.0, 0, 0, 0]] * 3),
            scales=torch.full((3, 3), 0.1),
            sh=torch.zeros(3, 1, 3),
        )


def test_gaussian_set_value_validation():
    gs = single_gaussian()
    bad = GaussianSet(gs.centers, torch.tensor([1.5], dtype=torch.float64), gs.rotations, gs.scales, gs.sh)
    with pytest.raises(ValueError, match="opacities"):
        bad.validate()
