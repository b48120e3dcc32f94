"""Datasets: synthetic toy scene generation and transforms-JSON loading.

The toy scene is an analytic field (a colored soft-edged sphere hovering
over a bounded checkerboard slab) rendered with the same compositor the
package trains against, at a much denser sample count. Ground truth is
therefore self-consistent: a perfectly fitted field reproduces it up to
quadrature differences. Cameras follow the common transforms-JSON layout:
camera-to-world matrices, looking down the local -z axis, y up, and pixel
(w/2, h/2) exactly on the optical axis (no half-pixel offset).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import InputError, LoadError
from .render import composite, sample_along_rays

# =============================================================================
# cameras
# =============================================================================


def focal_from_angle(width: int, camera_angle_x: float) -> float:
    return 0.5 * width / math.tan(0.5 * camera_angle_x)


def pose_lookat(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> torch.Tensor:
    """Camera-to-world matrix for a camera at ``eye`` looking at ``target``."""

    eye = torch.as_tensor(eye, dtype=torch.float32)
    target = torch.as_tensor(target, dtype=torch.float32)
    up = torch.as_tensor(up, dtype=torch.float32)
    z = eye - target
    norm = torch.linalg.norm(z)
    if norm < 1e-8:
        raise InputError("eye and target coincide")
    z = z / norm
    x = torch.linalg.cross(up, z)
    norm = torch.linalg.norm(x)
    if norm < 1e-6:
        raise InputError("up direction is parallel to the view axis")
    x = x / norm
    y = torch.linalg.cross(z, x)
    pose = torch.eye(4)
    pose[:3, 0] = x
    pose[:3, 1] = y
    pose[:3, 2] = z
    pose[:3, 3] = eye
    return pose


def camera_rays(pose: torch.Tensor, height: int, width: int, focal: float
                ) -> tuple[torch.Tensor, torch.Tensor]:
    """Unit-length ray origins/directions for every pixel, row-major.

    Pixel (i, j) maps to camera-space direction ((i - w/2)/f, -(j - h/2)/f,
    -1) before normalization, so the pixel at (w/2, h/2) looks exactly down
    the optical axis.
    """

    if pose.shape != (4, 4):
        raise InputError("pose must be 4x4", shape=tuple(pose.shape))
    j, i = torch.meshgrid(torch.arange(height, dtype=torch.float32),
                          torch.arange(width, dtype=torch.float32),
                          indexing="ij")
    dirs_cam = torch.stack([
        (i - width / 2) / focal,
        -(j - height / 2) / focal,
        -torch.ones_like(i),
    ], dim=-1)
    dirs = dirs_cam.reshape(-1, 3) @ pose[:3, :3].T
    dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True)
    origins = pose[:3, 3].expand_as(dirs)
    return origins.contiguous(), dirs


# =============================================================================
# analytic toy field
# =============================================================================

SPHERE_CENTER = (0.0, 0.0, 0.15)
SPHERE_RADIUS = 0.45
SPHERE_SIGMA = 40.0
SPHERE_EDGE = 0.08
SLAB_Z = (-0.55, -0.35)
SLAB_XY = 0.9
SLAB_SIGMA = 25.0


def _smoothstep(x: torch.Tensor) -> torch.Tensor:
    t = x.clamp(0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def toy_field(points: torch.Tensor, include_slab: bool = True
              ) -> tuple[torch.Tensor, torch.Tensor]:
    """Analytic (sigma, rgb) at [B, 3] points."""

    center = torch.tensor(SPHERE_CENTER)
    dist = torch.linalg.norm(points - center, dim=-1)
    sphere = SPHERE_SIGMA * _smoothstep((SPHERE_RADIUS - dist) / SPHERE_EDGE)
    sphere_rgb = 0.5 + 0.45 * torch.cos(
        points * torch.tensor([3.0, 5.0, 4.0])
        + torch.tensor([0.0, 2.0, 4.0]))

    sigma = sphere
    rgb_num = sphere.unsqueeze(-1) * sphere_rgb
    if include_slab:
        inside_z = (points[:, 2] >= SLAB_Z[0]) & (points[:, 2] <= SLAB_Z[1])
        inside_xy = (points[:, 0].abs() <= SLAB_XY) & (points[:, 1].abs() <= SLAB_XY)
        slab = torch.where(inside_z & inside_xy,
                           torch.tensor(SLAB_SIGMA), torch.tensor(0.0))
        cell = (torch.floor(points[:, 0] * 2.5)
                + torch.floor(points[:, 1] * 2.5)) % 2
        dark = torch.tensor([0.15, 0.2, 0.3])
        light = torch.tensor([0.8, 0.75, 0.6])
        slab_rgb = torch.where(cell.unsqueeze(-1) > 0.5, light, dark)
        sigma = sigma + slab
        rgb_num = rgb_num + slab.unsqueeze(-1) * slab_rgb
    rgb = rgb_num / sigma.unsqueeze(-1).clamp_min(1e-8)
    rgb = torch.where(sigma.unsqueeze(-1) > 0, rgb, torch.ones_like(rgb))
    return sigma, rgb.clamp(0.0, 1.0)


def render_toy_image(pose: torch.Tensor, height: int, width: int,
                     focal: float, near: float, far: float,
                     n_samples: int = 512, include_slab: bool = True,
                     chunk: int = 4096) -> torch.Tensor:
    """Dense-quadrature reference render of the analytic field, white
    background; returns [H, W, 3]."""

    origins, dirs = camera_rays(pose, height, width, focal)
    background = torch.ones(3)
    out = []
    for start in range(0, origins.shape[0], chunk):
        o = origins[start:start + chunk]
        d = dirs[start:start + chunk]
        t, delta = sample_along_rays(o.shape[0], near, far, n_samples)
        points = (o.unsqueeze(1) + t.unsqueeze(-1) * d.unsqueeze(1)).reshape(-1, 3)
        sigma, rgb = toy_field(points, include_slab=include_slab)
        res = composite(sigma.reshape(o.shape[0], n_samples),
                        rgb.reshape(o.shape[0], n_samples, 3),
                        delta, t, background)
        out.append(res.rgb)
    return torch.cat(out, dim=0).reshape(height, width, 3)


def sphere_silhouette_radius(focal: float, distance: float,
                             radius: float = SPHERE_RADIUS) -> float:
    """Projected pixel radius of a sphere seen head-on: the visual cone is
    tangent to the sphere, so the half-angle satisfies sin a = r / d."""

    return focal * radius / math.sqrt(distance * distance - radius * radius)


# =============================================================================
# scene generation and loading
# =============================================================================

TOY_DEFAULTS = {
    "n_views": 32,
    "image_size": 128,
    "camera_angle_x": 0.9,
    "radius": 3.2,
    "near": 1.4,
    "far": 5.0,
    "gt_samples": 512,
}
_ELEVATIONS_DEG = (-5.0, 20.0, 40.0)
_TEST_STRIDE, _TEST_OFFSET = 8, 6


def toy_pose(k: int, n_views: int, radius: float) -> torch.Tensor:
    azimuth = 2.0 * math.pi * k / n_views
    elevation = math.radians(_ELEVATIONS_DEG[k % len(_ELEVATIONS_DEG)])
    eye = (radius * math.cos(azimuth) * math.cos(elevation),
           radius * math.sin(azimuth) * math.cos(elevation),
           radius * math.sin(elevation))
    return pose_lookat(eye)


def make_toy_scene(root, n_views: int | None = None,
                   image_size: int | None = None,
                   gt_samples: int | None = None) -> dict:
    """Render and write the synthetic scene under ``root`` in the
    transforms-JSON layout. Returns the manifest (paths and camera
    parameters). Fully deterministic."""

    cfg = dict(TOY_DEFAULTS)
    if n_views is not None:
        cfg["n_views"] = n_views
    if image_size is not None:
        cfg["image_size"] = image_size
    if gt_samples is not None:
        cfg["gt_samples"] = gt_samples

    root = Path(root)
    size = cfg["image_size"]
    focal = focal_from_angle(size, cfg["camera_angle_x"])
    frames = {"train": [], "test": []}
    for k in range(cfg["n_views"]):
        split = "test" if k % _TEST_STRIDE == _TEST_OFFSET else "train"
        pose = toy_pose(k, cfg["n_views"], cfg["radius"])
        image = render_toy_image(pose, size, size, focal,
                                 cfg["near"], cfg["far"],
                                 n_samples=cfg["gt_samples"])
        rel = f"./{split}/r_{k}"
        path = root / split / f"r_{k}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        arr = (image.numpy() * 255.0 + 0.5).astype(np.uint8)
        Image.fromarray(arr).save(path)
        frames[split].append({
            "file_path": rel,
            "transform_matrix": pose.tolist(),
        })
    for split in ("train", "test"):
        meta = {
            "camera_angle_x": cfg["camera_angle_x"],
            "near": cfg["near"],
            "far": cfg["far"],
            "frames": frames[split],
        }
        with open(root / f"transforms_{split}.json", "w") as fh:
            json.dump(meta, fh, indent=1)
    return {"root": str(root), "n_train": len(frames["train"]),
            "n_test": len(frames["test"]), **cfg}


@dataclass
class RayDataset:
    """All views of one split, white-composited."""

    images: torch.Tensor   # [V, H, W, 3] in [0, 1]
    poses: torch.Tensor    # [V, 4, 4] camera-to-world
    focal: float
    near: float
    far: float
    split: str

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def height(self) -> int:
        return self.images.shape[1]

    @property
    def width(self) -> int:
        return self.images.shape[2]

    def view_rays(self, k: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        origins, dirs = camera_rays(self.poses[k], self.height, self.width,
                                    self.focal)
        return origins, dirs, self.images[k].reshape(-1, 3)

    def all_rays(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        parts = [self.view_rays(k) for k in range(len(self))]
        return tuple(torch.cat([p[i] for p in parts]) for i in range(3))


def load_blender(root, split: str) -> RayDataset:
    """Load a transforms-JSON dataset split; RGBA images are composited
    onto white."""

    root = Path(root)
    meta_path = root / f"transforms_{split}.json"
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise LoadError("transforms file not found", path=str(meta_path))
    except json.JSONDecodeError as exc:
        raise LoadError(f"transforms file is not valid JSON: {exc}",
                        path=str(meta_path))

    try:
        angle_x = float(meta["camera_angle_x"])
        frame_list = meta["frames"]
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"transforms file missing required key: {exc}",
                        path=str(meta_path))

    images, poses = [], []
    for frame in frame_list:
        path = root / (frame["file_path"].lstrip("./") + ".png")
        try:
            with Image.open(path) as img:
                arr = np.asarray(img.convert("RGBA"), dtype=np.float32) / 255.0
        except FileNotFoundError:
            raise LoadError("image file not found", path=str(path))
        rgb = arr[..., :3] * arr[..., 3:] + (1.0 - arr[..., 3:])
        images.append(torch.from_numpy(rgb))
        poses.append(torch.tensor(frame["transform_matrix"],
                                  dtype=torch.float32))
    if not images:
        raise LoadError("split has no frames", path=str(meta_path))
    shapes = {tuple(im.shape) for im in images}
    if len(shapes) != 1:
        raise LoadError("images in a split must share one size",
                        sizes=sorted(shapes))

    images_t = torch.stack(images)
    return RayDataset(
        images=images_t,
        poses=torch.stack(poses),
        focal=focal_from_angle(images_t.shape[2], angle_x),
        near=float(meta.get("near", 2.0)),
        far=float(meta.get("far", 6.0)),
        split=split,
    )


__all__ = [
    "focal_from_angle", "pose_lookat", "camera_rays",
    "toy_field", "render_toy_image", "sphere_silhouette_radius",
    "toy_pose", "make_toy_scene", "RayDataset", "load_blender",
    "TOY_DEFAULTS", "SPHERE_CENTER", "SPHERE_RADIUS",
]
