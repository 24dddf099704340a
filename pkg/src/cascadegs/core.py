"""Core geometry: quaternions, camera poses, point maps and alignment.

Conventions used throughout the package:

* Quaternions are ``[w, x, y, z]`` and unit norm.  The canonical
  representative of a rotation has ``w >= 0`` (``q`` and ``-q`` encode the
  same rotation).
* Camera poses are world-from-camera: ``X_world = R @ X_cam + t``.
* The camera frame is OpenCV style: x right, y down, z forward.
* Point maps are ``(H, W, 3)`` grids of 3D points with a boolean validity
  mask; ``frame`` is either ``"camera"`` or ``"world"``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

CAMERA_FRAME = "camera"
WORLD_FRAME = "world"

_QUAT_NORM_TOL = 1e-6


# ---------------------------------------------------------------------------
# Quaternion utilities (batched, differentiable)
# ---------------------------------------------------------------------------


def quat_normalize(q: Tensor) -> Tensor:
    """Normalize quaternions ``(..., 4)`` to unit norm and w >= 0."""
    q = q / q.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    # sign(w) has zero gradient, so the canonicalization is grad-transparent.
    sign = torch.where(q[..., :1] < 0, -torch.ones_like(q[..., :1]), torch.ones_like(q[..., :1]))
    return q * sign


def quat_check_unit(q: Tensor) -> None:
    norms = q.detach().norm(dim=-1)
    if not torch.allclose(norms, torch.ones_like(norms), atol=_QUAT_NORM_TOL, rtol=0.0):
        worst = (norms - 1.0).abs().max().item()
        raise ValueError(f"quaternion is not unit norm (max deviation {worst:.3e})")


def quat_multiply(a: Tensor, b: Tensor) -> Tensor:
    """Hamilton product of quaternions ``(..., 4)``, [w, x, y, z]."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        (
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ),
        dim=-1,
    )


def quat_conjugate(q: Tensor) -> Tensor:
    w, x, y, z = q.unbind(-1)
    return torch.stack((w, -x, -y, -z), dim=-1)


def quat_to_rotmat(q: Tensor) -> Tensor:
    """Convert unit quaternions ``(..., 4)`` to rotation matrices ``(..., 3, 3)``."""
    quat_check_unit(q)
    w, x, y, z = q.unbind(-1)
    xx, yy, zz = x * x, y * y, z * z
    wx, wy, wz = w * x, w * y, w * z
    xy, xz, yz = x * y, x * z, y * z
    row0 = torch.stack((1 - 2 * (yy + zz), 2 * (xy - wz), 2 * (xz + wy)), dim=-1)
    row1 = torch.stack((2 * (xy + wz), 1 - 2 * (xx + zz), 2 * (yz - wx)), dim=-1)
    row2 = torch.stack((2 * (xz - wy), 2 * (yz + wx), 1 - 2 * (xx + yy)), dim=-1)
    return torch.stack((row0, row1, row2), dim=-2)


def rotmat_to_quat(matrix: Tensor) -> Tensor:
    """Convert rotation matrices ``(..., 3, 3)`` to canonical unit quaternions.

    Uses the Shepperd branch selection for numerical stability near pi.
    """
    m = matrix
    m00, m01, m02 = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    m10, m11, m12 = m[..., 1, 0], m[..., 1, 1], m[..., 1, 2]
    m20, m21, m22 = m[..., 2, 0], m[..., 2, 1], m[..., 2, 2]

    # Four candidate solutions, each stable in a different region.
    qw = torch.stack((1 + m00 + m11 + m22, m21 - m12, m02 - m20, m10 - m01), dim=-1)
    qx = torch.stack((m21 - m12, 1 + m00 - m11 - m22, m01 + m10, m02 + m20), dim=-1)
    qy = torch.stack((m02 - m20, m01 + m10, 1 - m00 + m11 - m22, m12 + m21), dim=-1)
    qz = torch.stack((m10 - m01, m02 + m20, m12 + m21, 1 - m00 - m11 + m22), dim=-1)
    candidates = torch.stack((qw, qx, qy, qz), dim=-2)  # (..., 4, 4)
    diag = torch.stack((m00 + m11 + m22, m00, m11, m22), dim=-1)
    best = diag.argmax(dim=-1)
    idx = best[..., None, None].expand(*best.shape, 1, 4)
    q = torch.gather(candidates, -2, idx).squeeze(-2)
    return quat_normalize(q)


def quat_rotate(q: Tensor, v: Tensor) -> Tensor:
    """Rotate vectors ``v (..., 3)`` by unit quaternions ``q (..., 4)``."""
    qvec = q[..., 1:]
    uv = torch.cross(qvec, v, dim=-1)
    uuv = torch.cross(qvec, uv, dim=-1)
    return v + 2 * (q[..., :1] * uv + uuv)


def quat_from_axis_angle(axis: Tensor, angle: Tensor) -> Tensor:
    """Unit quaternion rotating by ``angle`` (radians) about unit ``axis``."""
    half = 0.5 * angle
    w = torch.cos(half)
    xyz = torch.sin(half)[..., None] * axis
    return torch.cat((w[..., None], xyz), dim=-1)


def quat_angle(q: Tensor) -> Tensor:
    """Rotation angle in radians of unit quaternions (``(..., 4) -> (...)``)."""
    w = q[..., 0].abs().clamp(max=1.0)
    return 2.0 * torch.arccos(w)


# ---------------------------------------------------------------------------
# Camera pose
# ---------------------------------------------------------------------------


@dataclass
class CameraPose:
    """World-from-camera rigid transform: ``X_world = R(q) @ X_cam + t``."""

    q: Tensor  # (4,) unit quaternion [w, x, y, z], w >= 0
    t: Tensor  # (3,)

    def __post_init__(self) -> None:
        self.q = torch.as_tensor(self.q)
        self.t = torch.as_tensor(self.t)
        if self.q.shape != (4,) or self.t.shape != (3,):
            raise ValueError(f"bad pose shapes q={tuple(self.q.shape)} t={tuple(self.t.shape)}")
        quat_check_unit(self.q[None])
        self.q = quat_normalize(self.q)

    @classmethod
    def identity(cls, dtype: torch.dtype = torch.float64) -> "CameraPose":
        return cls(torch.tensor([1.0, 0, 0, 0], dtype=dtype), torch.zeros(3, dtype=dtype))

    @classmethod
    def from_matrix(cls, matrix: Tensor) -> "CameraPose":
        matrix = torch.as_tensor(matrix)
        if matrix.shape != (4, 4):
            raise ValueError("expected a 4x4 homogeneous matrix")
        return cls(rotmat_to_quat(matrix[:3, :3]), matrix[:3, 3].clone())

    @classmethod
    def from_vector(cls, vec: Tensor) -> "CameraPose":
        vec = torch.as_tensor(vec)
        if vec.shape != (7,):
            raise ValueError("expected a 7-vector [qw, qx, qy, qz, tx, ty, tz]")
        return cls(vec[:4], vec[4:])

    def as_vector(self) -> Tensor:
        return torch.cat((self.q, self.t))

    def rotation(self) -> Tensor:
        return quat_to_rotmat(self.q)

    def matrix(self) -> Tensor:
        mat = torch.eye(4, dtype=self.q.dtype)
        mat[:3, :3] = self.rotation()
        mat[:3, 3] = self.t
        return mat

    def compose(self, other: "CameraPose") -> "CameraPose":
        """``self @ other``: apply ``other`` first, then ``self``."""
        q = quat_multiply(self.q, other.q)
        t = quat_rotate(self.q[None], other.t[None])[0] + self.t
        return CameraPose(q, t)

    def inverse(self) -> "CameraPose":
        q_inv = quat_conjugate(self.q)
        t_inv = -quat_rotate(q_inv[None], self.t[None])[0]
        return CameraPose(quat_normalize(q_inv), t_inv)

    def apply(self, points: Tensor) -> Tensor:
        """Map camera-frame points ``(..., 3)`` to the world frame."""
        rot = self.rotation().to(points.dtype)
        return points @ rot.T + self.t.to(points.dtype)

    def to(self, dtype: torch.dtype) -> "CameraPose":
        return CameraPose(self.q.to(dtype), self.t.to(dtype))


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics; pixel centers sit at integer coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    def matrix(self, dtype: torch.dtype = torch.float64) -> Tensor:
        return torch.tensor(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=dtype
        )

    def project(self, points_cam: Tensor) -> Tensor:
        """Project camera-frame points ``(..., 3)`` to pixel coords ``(..., 2)``."""
        z = points_cam[..., 2]
        u = self.fx * points_cam[..., 0] / z + self.cx
        v = self.fy * points_cam[..., 1] / z + self.cy
        return torch.stack((u, v), dim=-1)

    def unproject(self, depth: Tensor) -> Tensor:
        """Lift a z-depth map ``(H, W)`` to camera-frame points ``(H, W, 3)``."""
        h, w = depth.shape
        if (h, w) != (self.height, self.width):
            raise ValueError(f"depth shape {(h, w)} does not match intrinsics")
        ys = torch.arange(h, dtype=depth.dtype)
        xs = torch.arange(w, dtype=depth.dtype)
        vv, uu = torch.meshgrid(ys, xs, indexing="ij")
        x = (uu - self.cx) / self.fx * depth
        y = (vv - self.cy) / self.fy * depth
        return torch.stack((x, y, depth), dim=-1)


# ---------------------------------------------------------------------------
# Point maps
# ---------------------------------------------------------------------------


@dataclass
class PointMap:
    """Dense grid of 3D points with validity mask."""

    positions: Tensor  # (H, W, 3)
    valid: Tensor  # (H, W) bool
    frame: str = CAMERA_FRAME

    def __post_init__(self) -> None:
        if self.positions.ndim != 3 or self.positions.shape[-1] != 3:
            raise ValueError("positions must be (H, W, 3)")
        if self.valid.shape != self.positions.shape[:2]:
            raise ValueError("valid mask shape does not match positions")
        if self.frame not in (CAMERA_FRAME, WORLD_FRAME):
            raise ValueError(f"unknown frame {self.frame!r}")
        self.valid = self.valid.bool()

    def valid_points(self) -> Tensor:
        return self.positions[self.valid]


@dataclass
class ConfidenceMap:
    """Per-pixel confidence; values must be strictly greater than 1."""

    values: Tensor  # (H, W)

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise ValueError("confidence must be (H, W)")
        if not bool((self.values > 1.0).all()):
            raise ValueError("confidence values must be > 1")


def transform_pointmap(pmap: PointMap, pose: CameraPose, target_frame: str) -> PointMap:
    """Move a point map between the camera and world frames.

    ``pose`` is the world-from-camera transform of the view that produced the
    map.  Transforming to the frame the map is already in is a no-op copy.
    """
    if target_frame not in (CAMERA_FRAME, WORLD_FRAME):
        raise ValueError(f"unknown frame {target_frame!r}")
    if pmap.frame == target_frame:
        return PointMap(pmap.positions.clone(), pmap.valid.clone(), pmap.frame)
    if target_frame == WORLD_FRAME:
        pts = pose.apply(pmap.positions)
    else:
        inv = pose.inverse()
        pts = inv.apply(pmap.positions)
    return PointMap(pts, pmap.valid.clone(), target_frame)


def pointmap_scale(maps: list[PointMap]) -> Tensor:
    """Average Euclidean norm of the valid points across all maps.

    This is the normalization factor used by the scale-invariant geometry
    loss and by normalized rendering; it is computed jointly over all views
    of a sample so relative scale between views is preserved.
    """
    pts = [m.valid_points() for m in maps]
    total = sum(int(p.shape[0]) for p in pts)
    if total == 0:
        raise ValueError("empty point map: no valid pixels to compute scale")
    all_pts = torch.cat(pts, dim=0)
    return all_pts.norm(dim=-1).mean()


# ---------------------------------------------------------------------------
# Robust residual
# ---------------------------------------------------------------------------


def huber(residual: Tensor, delta: float) -> Tensor:
    """Huber penalty of the Euclidean norm of residual vectors ``(..., D)``.

    Quadratic ``0.5 * ||r||^2`` for ``||r|| <= delta``, linear
    ``delta * (||r|| - delta / 2)`` beyond.  Returns shape ``(...)``.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    sq = residual.square().sum(dim=-1)
    big = sq > delta * delta
    # sqrt is only consumed on the linear branch; feed it ones elsewhere so
    # its gradient stays finite at zero residual.
    norm = torch.where(big, sq, torch.ones_like(sq)).sqrt()
    linear = delta * (norm - 0.5 * delta)
    return torch.where(big, linear, 0.5 * sq)


# ---------------------------------------------------------------------------
# Similarity alignment (Umeyama)
# ---------------------------------------------------------------------------


def similarity_align(source: Tensor, target: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Least-squares similarity ``target ~ s * R @ source + t``.

    Returns ``(s, R, t)`` minimizing ``sum ||s R x_i + t - y_i||^2``
    (Umeyama's closed form).  Raises ``ValueError`` on degenerate input:
    fewer than 3 correspondences, or a source set that is (near-)collinear,
    which leaves the rotation under-determined.
    """
    if source.shape != target.shape or source.ndim != 2 or source.shape[1] != 3:
        raise ValueError("expected matching (K, 3) point arrays")
    k = source.shape[0]
    if k < 3:
        raise ValueError("degenerate alignment: need at least 3 correspondences")

    mu_s = source.mean(dim=0)
    mu_t = target.mean(dim=0)
    xs = source - mu_s
    ys = target - mu_t
    cov = ys.T @ xs / k
    var_s = xs.square().sum(dim=1).mean()

    u, d, vt = torch.linalg.svd(cov)
    scale_ref = xs.norm(dim=1).max() * ys.norm(dim=1).max()
    if var_s < 1e-20 or d[1] < 1e-9 * max(float(d[0]), float(scale_ref), 1e-30):
        raise ValueError("degenerate alignment: source points are collinear or coincident")

    s_diag = torch.ones(3, dtype=source.dtype)
    if torch.det(u) * torch.det(vt) < 0:
        s_diag[2] = -1.0
    rot = u @ torch.diag(s_diag) @ vt
    s = (d * s_diag).sum() / var_s
    t = mu_t - s * (rot @ mu_s)
    return s, rot, t


# ---------------------------------------------------------------------------
# Point-cloud export
# ---------------------------------------------------------------------------


def save_pointcloud_ply(path, points: Tensor, colors: Tensor | None = None) -> None:
    """Write a binary little-endian PLY file with optional uchar RGB colors."""
    pts = np.asarray(points.detach().cpu(), dtype=np.float32)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must be (K, 3)")
    n = pts.shape[0]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {axis}" for axis in "xyz"]
    if colors is not None:
        col = np.asarray(colors.detach().cpu())
        if col.shape != pts.shape:
            raise ValueError("colors must match points shape")
        if col.dtype != np.uint8:
            col = np.clip(np.round(col * 255.0), 0, 255).astype(np.uint8)
        header += [f"property uchar {c}" for c in ("red", "green", "blue")]
    header.append("end_header")

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if colors is None:
            fh.write(pts.astype("<f4").tobytes())
        else:
            for i in range(n):
                fh.write(struct.pack("<fff", *pts[i]))
                fh.write(struct.pack("BBB", *col[i]))
