"""Procedural multi-view scenes with exact geometry supervision.

Scenes are small arrangements of Lambertian primitives (spheres, boxes,
finite planes) lit by a directional light plus ambient.  Views are rendered
with an analytic ray caster, so images, z-depths, world point maps and
validity masks are mutually consistent by construction.

Every sample is gauge-fixed: view 0 is the identity camera and all poses and
world-frame geometry are expressed relative to it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import (
    CAMERA_FRAME,
    WORLD_FRAME,
    CameraPose,
    Intrinsics,
    PointMap,
    quat_from_axis_angle,
    quat_multiply,
    quat_normalize,
    rotmat_to_quat,
)

_AMBIENT = 0.25
_FOV_X_DEG = 55.0
_EPS = 1e-9

#: Total azimuth spread (radians) of the camera arc drawn by
#: :func:`sample_views`.  Kept moderate so view-to-view relative rotations
#: stay well under 90 degrees, which the pose branch needs to train reliably.
VIEW_ARC_SPAN = 1.2

MANIFEST_NAME = "MANIFEST.json"


# ---------------------------------------------------------------------------
# Scene description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    kind: str  # "sphere" | "box" | "plane"
    position: tuple[float, float, float]
    rotation: tuple[float, float, float, float]  # unit quaternion [w, x, y, z]
    size: tuple[float, ...]  # sphere: (r,); box: half extents (3,); plane: half extents (2,)
    albedo: tuple[float, float, float]

    def __post_init__(self) -> None:
        expected = {"sphere": 1, "box": 3, "plane": 2}
        if self.kind not in expected:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if len(self.size) != expected[self.kind]:
            raise ValueError(f"{self.kind} size must have {expected[self.kind]} entries")
        if any(s <= 0 for s in self.size):
            raise ValueError("primitive sizes must be positive")
        if any(not 0.0 <= a <= 1.0 for a in self.albedo):
            raise ValueError("albedo components must lie in [0, 1]")


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple[Primitive, ...]
    light_dir: tuple[float, float, float]  # unit vector pointing toward the light
    seed: int

    def __post_init__(self) -> None:
        if len(self.primitives) < 1:
            raise ValueError("a scene needs at least one primitive")
        if abs(sum(c * c for c in self.light_dir) - 1.0) > 1e-6:
            raise ValueError("light_dir must be a unit vector")


@dataclass
class SceneSample:
    """One scene with N posed views and exact geometry targets."""

    spec: SceneSpec
    images: torch.Tensor  # (N, H, W, 3) float32 in [0, 1]
    depths: torch.Tensor  # (N, H, W) float32 z-depth, 0 where invalid
    world_points: torch.Tensor  # (N, H, W, 3) float32, gauge-fixed world frame
    valid: torch.Tensor  # (N, H, W) bool
    poses: list[CameraPose]  # world-from-camera, poses[0] == identity
    intrinsics: Intrinsics

    @property
    def n_views(self) -> int:
        return int(self.images.shape[0])

    def pointmaps(self, frame: str = WORLD_FRAME) -> list[PointMap]:
        if frame != WORLD_FRAME:
            raise ValueError("stored point maps are in the world frame")
        return [
            PointMap(self.world_points[i], self.valid[i], WORLD_FRAME)
            for i in range(self.n_views)
        ]


# ---------------------------------------------------------------------------
# Scene sampling
# ---------------------------------------------------------------------------


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / max(np.linalg.norm(v), _EPS)


def _random_quat(rng: np.random.Generator) -> tuple[float, float, float, float]:
    axis = _random_unit(rng)
    angle = rng.uniform(0.0, np.pi)
    q = quat_normalize(
        quat_from_axis_angle(torch.tensor(axis, dtype=torch.float64), torch.tensor(angle))
    )
    return tuple(float(x) for x in q)


def _primitive_extent(kind: str, size: tuple[float, ...]) -> float:
    """Radius of the smallest origin-centered ball containing the primitive."""
    if kind == "sphere":
        return size[0]
    return float(np.linalg.norm(size))  # box/plane corner under any rotation


def scene_bounding_radius(spec: SceneSpec) -> float:
    """Radius of the smallest origin-centered ball containing every primitive."""
    return max(
        float(np.linalg.norm(p.position)) + _primitive_extent(p.kind, p.size)
        for p in spec.primitives
    )


def generate_scene(seed: int, n_primitives: tuple[int, int] = (3, 6)) -> SceneSpec:
    """Sample a scene layout deterministically from ``seed``.

    Every primitive is kept inside the unit ball (position norm plus extent
    <= 1) so orbit cameras at radius > 2 always enclose the whole scene.
    """
    rng = np.random.default_rng(seed)
    count = int(rng.integers(n_primitives[0], n_primitives[1] + 1))
    kinds = ["sphere", "box", "plane"]
    prims: list[Primitive] = []
    for _ in range(count):
        kind = kinds[int(rng.integers(0, len(kinds)))]
        if kind == "sphere":
            size: tuple[float, ...] = (float(rng.uniform(0.18, 0.42)),)
        elif kind == "box":
            size = tuple(float(s) for s in rng.uniform(0.15, 0.35, size=3))
        else:
            size = tuple(float(s) for s in rng.uniform(0.3, 0.6, size=2))
        extent = _primitive_extent(kind, size)
        direction = _random_unit(rng)
        distance = (0.98 - extent) * float(rng.uniform(0.0, 1.0)) ** (1.0 / 3.0)
        pos = direction * distance
        prims.append(
            Primitive(
                kind=kind,
                position=tuple(float(p) for p in pos),
                rotation=_random_quat(rng),
                size=size,
                albedo=tuple(float(a) for a in rng.uniform(0.15, 0.95, size=3)),
            )
        )
    light = _random_unit(rng)
    light[1] = -abs(light[1]) - 0.3  # light from above (camera y is down in view frames)
    light = light / np.linalg.norm(light)
    return SceneSpec(primitives=tuple(prims), light_dir=tuple(float(x) for x in light), seed=seed)


def default_intrinsics(width: int = 64, height: int = 48) -> Intrinsics:
    f = 0.5 * width / np.tan(0.5 * np.deg2rad(_FOV_X_DEG))
    return Intrinsics(
        fx=float(f),
        fy=float(f),
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=width,
        height=height,
    )


def _look_at(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    """World-from-camera rotation for an OpenCV camera looking at ``target``."""
    forward = target - position
    forward = forward / max(np.linalg.norm(forward), _EPS)
    up = np.array([0.0, 1.0, 0.0])
    if abs(float(forward @ up)) > 0.99:
        up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right = right / max(np.linalg.norm(right), _EPS)
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)


def _visible_fraction(
    spec: SceneSpec, rot_wc: np.ndarray, pos: np.ndarray, intr: Intrinsics
) -> float:
    centers = np.array([p.position for p in spec.primitives])
    cam = (centers - pos) @ rot_wc  # R^T (X - t), row-vector form
    z = cam[:, 2]
    margin = 0.15 * intr.width
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / z + intr.cx
        v = intr.fy * cam[:, 1] / z + intr.cy
    ok = (
        (z > 0.1)
        & (u > -margin)
        & (u < intr.width + margin)
        & (v > -margin)
        & (v < intr.height + margin)
    )
    return float(ok.mean())


def sample_views(
    spec: SceneSpec,
    n_views: int,
    seed: int,
    intrinsics: Intrinsics | None = None,
    min_visible: float = 0.3,
    max_tries: int = 200,
) -> SceneSample:
    """Render ``n_views`` cameras spread along a randomly placed orbit arc.

    Cameras look roughly at the scene center from an arc of ``VIEW_ARC_SPAN``
    radians whose placement is random per scene, giving moderate view-to-view
    baselines; each view is resampled (bounded retries) until at least
    ``min_visible`` of the primitives project inside the padded image frame.
    The returned sample is gauge-fixed so the first camera is the identity.
    """
    if n_views < 1:
        raise ValueError("need at least one view")
    intr = intrinsics or default_intrinsics()
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, seed, 0xC0FFEE)))
    base_azimuth = rng.uniform(0.0, 2.0 * np.pi)

    rotations: list[np.ndarray] = []
    positions: list[np.ndarray] = []
    for i in range(n_views):
        for attempt in range(max_tries):
            azimuth = (
                base_azimuth
                + VIEW_ARC_SPAN * i / max(n_views - 1, 1)
                + rng.uniform(-0.1, 0.1)
            )
            elevation = rng.uniform(0.05, 0.45)
            radius = rng.uniform(2.2, 3.0)
            pos = radius * np.array(
                [
                    np.cos(elevation) * np.cos(azimuth),
                    -np.sin(elevation),
                    np.cos(elevation) * np.sin(azimuth),
                ]
            )
            target = rng.uniform(-0.12, 0.12, size=3)
            rot = _look_at(pos, target)
            if _visible_fraction(spec, rot, pos, intr) >= min_visible:
                break
        else:
            raise RuntimeError(
                f"could not find a view of scene {spec.seed} with "
                f"{min_visible:.0%} primitive visibility after {max_tries} tries"
            )
        rotations.append(rot)
        positions.append(pos)

    images, depths, world_pts, valid = [], [], [], []
    for rot, pos in zip(rotations, positions):
        img, depth, pts, msk = render_view(spec, rot, pos, intr)
        images.append(img)
        depths.append(depth)
        world_pts.append(pts)
        valid.append(msk)

    # Gauge fix: express everything relative to camera 0.
    rot0, pos0 = rotations[0], positions[0]
    poses: list[CameraPose] = []
    for k, (rot, pos) in enumerate(zip(rotations, positions)):
        if k == 0:
            poses.append(CameraPose.identity())
            continue
        rel_rot = rot0.T @ rot
        rel_t = rot0.T @ (pos - pos0)
        poses.append(
            CameraPose(
                rotmat_to_quat(torch.as_tensor(rel_rot, dtype=torch.float64)),
                torch.as_tensor(rel_t, dtype=torch.float64),
            )
        )
    world_pts = [(w - pos0) @ rot0 for w in world_pts]

    return SceneSample(
        spec=spec,
        images=torch.from_numpy(np.stack(images)).float(),
        depths=torch.from_numpy(np.stack(depths)).float(),
        world_points=torch.from_numpy(np.stack(world_pts)).float(),
        valid=torch.from_numpy(np.stack(valid)),
        poses=poses,
        intrinsics=intr,
    )


# ---------------------------------------------------------------------------
# Analytic ray caster
# ---------------------------------------------------------------------------


def _quat_to_rotmat_np(q: tuple[float, float, float, float]) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _intersect_sphere(prim, origins, dirs):
    center = np.asarray(prim.position)
    radius = prim.size[0]
    oc = origins - center
    b = np.einsum("ij,ij->i", oc, dirs)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = -b - sq
    hit &= t > _EPS
    pts = origins + np.where(hit, t, 0.0)[:, None] * dirs
    normals = (pts - center) / radius
    return np.where(hit, t, np.inf), normals


def _intersect_box(prim, origins, dirs):
    rot = _quat_to_rotmat_np(prim.rotation)
    half = np.asarray(prim.size)
    o = (origins - np.asarray(prim.position)) @ rot
    d = dirs @ rot
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    tmin = near.max(axis=1)
    tmax = far.min(axis=1)
    hit = (tmax >= tmin) & (tmin > _EPS)
    t = np.where(hit, tmin, np.inf)
    axis = near.argmax(axis=1)
    local_n = np.zeros_like(o)
    rows = np.arange(o.shape[0])
    local_n[rows, axis] = -np.sign(d[rows, axis])
    normals = local_n @ rot.T
    return t, normals


def _intersect_plane(prim, origins, dirs):
    rot = _quat_to_rotmat_np(prim.rotation)
    hx, hy = prim.size
    o = (origins - np.asarray(prim.position)) @ rot
    d = dirs @ rot
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -o[:, 2] / d[:, 2]
    local = o + t[:, None] * d
    hit = (
        np.isfinite(t)
        & (t > _EPS)
        & (np.abs(local[:, 0]) <= hx)
        & (np.abs(local[:, 1]) <= hy)
    )
    t = np.where(hit, t, np.inf)
    # Two-sided: normal faces against the ray.
    sign = -np.sign(d[:, 2])
    normals = np.outer(sign, rot[:, 2])
    return t, normals


_INTERSECTORS = {"sphere": _intersect_sphere, "box": _intersect_box, "plane": _intersect_plane}


def render_view(
    spec: SceneSpec, rot_wc: np.ndarray, position: np.ndarray, intr: Intrinsics
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Ray cast one view; returns (image, z_depth, world_points, valid).

    The image is Lambertian-shaded float32 in [0, 1] over a black background;
    depth is the camera-frame z of the hit (0 where no primitive is hit) and
    world_points the hit positions (0 where invalid).
    """
    h, w = intr.height, intr.width
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    rays_cam = np.stack(
        [(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], axis=-1
    ).reshape(-1, 3)
    dirs = rays_cam @ rot_wc.T
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(position, dirs.shape)

    best_t = np.full(dirs.shape[0], np.inf)
    best_normal = np.zeros_like(dirs)
    best_albedo = np.zeros_like(dirs)
    for prim in spec.primitives:
        t, normals = _INTERSECTORS[prim.kind](prim, origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_normal = np.where(closer[:, None], normals, best_normal)
        best_albedo = np.where(closer[:, None], np.asarray(prim.albedo), best_albedo)

    valid = np.isfinite(best_t)
    t_safe = np.where(valid, best_t, 0.0)
    pts_world = origins + t_safe[:, None] * dirs
    pts_world = np.where(valid[:, None], pts_world, 0.0)
    z_depth = (pts_world - position) @ rot_wc[:, 2]
    z_depth = np.where(valid, z_depth, 0.0)

    light = np.asarray(spec.light_dir)
    lambert = np.clip(np.einsum("ij,j->i", best_normal, light), 0.0, None)
    shade = _AMBIENT + (1.0 - _AMBIENT) * lambert
    img = np.clip(best_albedo * shade[:, None], 0.0, 1.0)
    img = np.where(valid[:, None], img, 0.0)

    return (
        img.reshape(h, w, 3).astype(np.float32),
        z_depth.reshape(h, w).astype(np.float32),
        pts_world.reshape(h, w, 3),
        valid.reshape(h, w),
    )


# ---------------------------------------------------------------------------
# Pose perturbation
# ---------------------------------------------------------------------------


def perturb_pose_tensors(
    q: torch.Tensor,
    t: torch.Tensor,
    sigma_rot: float,
    sigma_trans: float,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Apply random rigid noise to pose tensors ``q (..., 4)``, ``t (..., 3)``.

    Rotation noise is a random axis with an angle drawn from the half-normal
    ``|N(0, sigma_rot)|``; translation noise is ``N(0, sigma_trans^2 I)``.
    The result stays differentiable with respect to the inputs (the noise is
    composed, not substituted).  Zero sigmas return the inputs unchanged.
    """
    if sigma_rot < 0 or sigma_trans < 0:
        raise ValueError("noise scales must be non-negative")
    if sigma_rot == 0.0 and sigma_trans == 0.0:
        return q, t
    shape = q.shape[:-1]
    axis = torch.randn(*shape, 3, dtype=q.dtype, generator=generator)
    axis = axis / axis.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    angle = sigma_rot * torch.randn(shape, dtype=q.dtype, generator=generator).abs()
    q_noise = quat_from_axis_angle(axis, angle)
    q_out = quat_normalize(quat_multiply(q_noise, q))
    t_out = t + sigma_trans * torch.randn(*shape, 3, dtype=t.dtype, generator=generator)
    return q_out, t_out


def perturb_poses(
    poses: list[CameraPose], sigma_rot: float, sigma_trans: float, seed: int = 0
) -> list[CameraPose]:
    """Convenience wrapper over :func:`perturb_pose_tensors` for pose lists."""
    if not poses:
        return []
    gen = torch.Generator().manual_seed(seed)
    q = torch.stack([p.q for p in poses])
    t = torch.stack([p.t for p in poses])
    q2, t2 = perturb_pose_tensors(q, t, sigma_rot, sigma_trans, gen)
    return [CameraPose(q2[i], t2[i]) for i in range(len(poses))]


# ---------------------------------------------------------------------------
# View subsets and re-gauging
# ---------------------------------------------------------------------------


def subset_views(sample: SceneSample, indices: list[int]) -> SceneSample:
    """Select a view subset and re-fix the gauge to the first selected view."""
    if len(indices) == 0:
        raise ValueError("need at least one view index")
    if any(i < 0 or i >= sample.n_views for i in indices):
        raise ValueError("view index out of range")
    anchor = sample.poses[indices[0]]
    inv = anchor.inverse()
    new_poses = [inv.compose(sample.poses[i]) for i in indices]
    rot_inv = inv.rotation().float()
    t_inv = inv.t.float()
    pts = sample.world_points[list(indices)]
    pts = torch.where(
        sample.valid[list(indices)][..., None], pts @ rot_inv.T + t_inv, torch.zeros(())
    )
    return SceneSample(
        spec=sample.spec,
        images=sample.images[list(indices)].clone(),
        depths=sample.depths[list(indices)].clone(),
        world_points=pts,
        valid=sample.valid[list(indices)].clone(),
        poses=new_poses,
        intrinsics=sample.intrinsics,
    )


# ---------------------------------------------------------------------------
# Dataset serialization
# ---------------------------------------------------------------------------


def _scene_dir(root: Path, index: int) -> Path:
    return root / f"scene_{index:04d}"


def save_dataset(root: str | Path, samples: list[SceneSample]) -> None:
    """Write scenes to ``root`` (PNG images + raw float32 geometry + JSON).

    Layout per scene: ``view_XX.png``, ``depths.bin``, ``points.bin``,
    ``valid.bin`` (little-endian, row-major) and ``meta.json`` with poses,
    intrinsics and the generating seeds.  A top-level ``MANIFEST.json``
    records shapes, dtypes and per-scene seeds; it is byte-identical across
    runs with the same inputs.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"format": "cascadegs-dataset-v1", "scenes": []}
    for idx, sample in enumerate(samples):
        sdir = _scene_dir(root, idx)
        sdir.mkdir(parents=True, exist_ok=True)
        n, h, w = sample.depths.shape
        for i in range(n):
            arr = (sample.images[i].numpy() * 255.0).round().astype(np.uint8)
            Image.fromarray(arr).save(sdir / f"view_{i:02d}.png")
        (sdir / "depths.bin").write_bytes(
            sample.depths.numpy().astype("<f4").tobytes()
        )
        (sdir / "points.bin").write_bytes(
            sample.world_points.numpy().astype("<f4").tobytes()
        )
        (sdir / "valid.bin").write_bytes(sample.valid.numpy().astype(np.uint8).tobytes())
        meta = {
            "seed": sample.spec.seed,
            "n_views": n,
            "height": h,
            "width": w,
            "intrinsics": {
                "fx": sample.intrinsics.fx,
                "fy": sample.intrinsics.fy,
                "cx": sample.intrinsics.cx,
                "cy": sample.intrinsics.cy,
                "width": sample.intrinsics.width,
                "height": sample.intrinsics.height,
            },
            "poses": [[float(x) for x in p.as_vector()] for p in sample.poses],
        }
        (sdir / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        manifest["scenes"].append(
            {
                "name": sdir.name,
                "seed": sample.spec.seed,
                "n_views": n,
                "shape": [n, h, w],
                "dtypes": {"depths": "<f4", "points": "<f4", "valid": "u1"},
            }
        )
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(root: str | Path) -> list[SceneSample]:
    """Load a dataset written by :func:`save_dataset`."""
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} under {root}")
    manifest = json.loads(manifest_path.read_text())
    samples: list[SceneSample] = []
    for entry in manifest["scenes"]:
        sdir = root / entry["name"]
        meta = json.loads((sdir / "meta.json").read_text())
        n, h, w = meta["n_views"], meta["height"], meta["width"]
        images = np.stack(
            [
                np.asarray(Image.open(sdir / f"view_{i:02d}.png"), dtype=np.float32) / 255.0
                for i in range(n)
            ]
        )
        depths = np.frombuffer((sdir / "depths.bin").read_bytes(), dtype="<f4").reshape(n, h, w)
        points = np.frombuffer((sdir / "points.bin").read_bytes(), dtype="<f4").reshape(
            n, h, w, 3
        )
        valid = (
            np.frombuffer((sdir / "valid.bin").read_bytes(), dtype=np.uint8)
            .reshape(n, h, w)
            .astype(bool)
        )
        ji = meta["intrinsics"]
        intr = Intrinsics(
            fx=ji["fx"], fy=ji["fy"], cx=ji["cx"], cy=ji["cy"], width=ji["width"], height=ji["height"]
        )
        poses = [
            CameraPose.from_vector(torch.tensor(v, dtype=torch.float64)) for v in meta["poses"]
        ]
        samples.append(
            SceneSample(
                spec=generate_scene(meta["seed"]),
                images=torch.from_numpy(images.copy()),
                depths=torch.from_numpy(depths.copy()),
                world_points=torch.from_numpy(points.copy()),
                valid=torch.from_numpy(valid.copy()),
                poses=poses,
                intrinsics=intr,
            )
        )
    return samples


def generate_dataset(
    n_scenes: int,
    n_views: int,
    seed: int,
    width: int = 64,
    height: int = 48,
) -> list[SceneSample]:
    """Generate ``n_scenes`` scenes with ``n_views`` views each."""
    intr = default_intrinsics(width, height)
    samples = []
    for k in range(n_scenes):
        spec = generate_scene(seed * 100003 + k)
        samples.append(sample_views(spec, n_views, seed=seed + k, intrinsics=intr))
    return samples
