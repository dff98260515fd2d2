"""Pose-list datasets, image preprocessing and a deterministic synthetic scene renderer."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels
from .geometry import Pose, quat_conj_np, quat_from_axis_angle, quat_mul_np, rotate_np

CAMBRIDGE_HEADER = (
    "Visual Landmark Dataset V1",
    "ImageFile, Camera Position [X Y Z W P Q R]",
    "",
)


class PoseListError(ValueError):
    def __init__(self, path, line_no: int, message: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


@dataclass
class PoseSample:
    ref: str
    pose: Pose
    image: np.ndarray | None = field(default=None, repr=False)
    root: Path | None = None

    def load_image(self) -> np.ndarray:
        """RGB image as float32 [3, H, W] in [0, 1]."""
        if self.image is not None:
            return self.image
        path = Path(self.root or ".") / self.ref
        if not path.exists():
            raise FileNotFoundError(f"image not found: {path}")
        return read_image(path)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


# ---------------------------------------------------------------------------
# Pose lists: "relative/path.ext tx ty tz qw qx qy qz"


def _parse_fields(parts: list[str]):
    if len(parts) != 8:
        return None
    try:
        vals = [float(v) for v in parts[1:]]
    except ValueError:
        return None
    return parts[0], np.array(vals[:3]), np.array(vals[3:])


def load_pose_list(root, split_file) -> list[PoseSample]:
    """Parse a PoseNet-style list.  Leading lines that are not 8-field records are a header."""
    root = Path(root)
    path = Path(split_file)
    if not path.is_absolute():
        path = root / path
    samples: list[PoseSample] = []
    in_header = True
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            parsed = _parse_fields(parts)
            if in_header:
                if parsed is None:
                    continue
                in_header = False
            if not parts:
                continue
            if parsed is None:
                raise PoseListError(path, line_no, f"expected 'path tx ty tz qw qx qy qz', got {line.strip()!r}")
            ref, x, q = parsed
            norm = np.linalg.norm(q)
            if abs(norm - 1.0) >= 1e-3:
                raise PoseListError(path, line_no, f"quaternion norm {norm:.6f} is not 1")
            samples.append(PoseSample(ref, Pose(x, q / norm), root=root))
    return samples


def write_pose_list(samples, path, header: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write("\n".join(CAMBRIDGE_HEADER) + "\n")
        for s in samples:
            vals = list(s.pose.x) + list(s.pose.q)
            fh.write(s.ref + " " + " ".join(repr(float(v)) for v in vals) + "\n")


# ---------------------------------------------------------------------------
# Preprocessing


def resize_smaller_edge(image: np.ndarray, edge: int) -> np.ndarray:
    """Bilinear resize of a [C, H, W] image so that min(H, W) == edge."""
    _, h, w = image.shape
    if h <= w:
        nh, nw = edge, int(edge * w / h)
    else:
        nh, nw = int(edge * h / w), edge
    if (nh, nw) == (h, w):
        return image.astype(np.float32, copy=True)
    chans = [
        np.asarray(Image.fromarray(np.ascontiguousarray(c, dtype=np.float32), mode="F").resize((nw, nh), Image.BILINEAR))
        for c in image
    ]
    return np.stack(chans).astype(np.float32)


def _gray(image: np.ndarray) -> np.ndarray:
    return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]


def color_jitter(image: np.ndarray, brightness: float, contrast: float, saturation: float) -> np.ndarray:
    out = np.clip(image * brightness, 0.0, 1.0)
    out = np.clip(contrast * out + (1.0 - contrast) * _gray(out).mean(), 0.0, 1.0)
    out = np.clip(saturation * out + (1.0 - saturation) * _gray(out)[None], 0.0, 1.0)
    return out.astype(np.float32)


def transform(image: np.ndarray, resize_edge: int, crop: int, offset: tuple[int, int],
              factors: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    """Resize, crop at ``offset`` (top, left) and apply brightness/contrast/saturation factors."""
    img = resize_smaller_edge(image, resize_edge)
    top, left = offset
    img = img[:, top : top + crop, left : left + crop]
    if factors != (1.0, 1.0, 1.0):
        img = color_jitter(img, *factors)
    return np.ascontiguousarray(img, dtype=np.float32)


def augment(image: np.ndarray, training: bool, rng: np.random.Generator | None = None, crop: int = 224,
            resize_edge: int = 256, jitter: float = 0.25) -> np.ndarray:
    """Training: resize + random crop + colour jitter.  Eval: resize + centre crop."""
    _, h, w = image.shape
    if min(h, w) < crop:
        raise ValueError(f"image {h}x{w} is smaller than the {crop}px crop")
    if resize_edge < crop:
        raise ValueError("resize_edge must be >= crop")
    short = resize_edge
    long_ = int(resize_edge * max(h, w) / min(h, w))
    rh, rw = (short, long_) if h <= w else (long_, short)
    if training:
        rng = rng if rng is not None else np.random.default_rng()
        top = int(rng.integers(0, rh - crop + 1))
        left = int(rng.integers(0, rw - crop + 1))
        factors = tuple(float(f) for f in rng.uniform(1.0 - jitter, 1.0 + jitter, size=3))
        return transform(image, resize_edge, crop, (top, left), factors)
    top = int(round((rh - crop) / 2.0))
    left = int(round((rw - crop) / 2.0))
    return transform(image, resize_edge, crop, (top, left))


# ---------------------------------------------------------------------------
# Synthetic scenes


@dataclass
class SyntheticScene:
    """Coloured Gaussian blobs in front of a camera moving in a square of side ``extent``.

    Camera frame: x right, y down, z forward; identity orientation looks along +Z.
    """

    seed: int
    centers: np.ndarray  # (K, 3)
    colors: np.ndarray  # (K, 3)
    radii: np.ndarray  # (K,)
    extent: float = 2.0
    height_range: float = 0.25
    max_yaw_deg: float = 20.0
    max_tilt_deg: float = 10.0
    focal_scale: float = 1.0  # focal length in units of image size

    @classmethod
    def generate(cls, seed: int = 42, n_blobs: int = 24, extent: float = 2.0) -> "SyntheticScene":
        # Blob depths span 1x..4x the extent so sideways motion shows up as
        # parallax and is not confused with yaw.
        rng = np.random.default_rng(seed)
        centers = np.column_stack([
            rng.uniform(-2.0 * extent, 2.0 * extent, n_blobs),
            rng.uniform(-1.5 * extent, 1.5 * extent, n_blobs),
            rng.uniform(1.0 * extent, 4.0 * extent, n_blobs),
        ])
        colors = rng.uniform(0.15, 1.0, (n_blobs, 3))
        radii = rng.uniform(0.08, 0.2, n_blobs) * extent
        return cls(seed, centers, colors, radii, extent)

    def focal(self, size: int) -> float:
        return self.focal_scale * size

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "centers": self.centers.tolist(),
            "colors": self.colors.tolist(),
            "radii": self.radii.tolist(),
            "extent": self.extent,
            "height_range": self.height_range,
            "max_yaw_deg": self.max_yaw_deg,
            "max_tilt_deg": self.max_tilt_deg,
            "focal_scale": self.focal_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        d = dict(d)
        for k in ("centers", "colors", "radii"):
            d[k] = np.asarray(d[k], dtype=np.float64)
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def project(scene: SyntheticScene, pose: Pose, size: int):
    """Pixel centres, screen sigmas and depths of every blob for a camera at ``pose``."""
    cam = rotate_np(quat_conj_np(pose.q), scene.centers - pose.x)
    depth = cam[:, 2]
    f = scene.focal(size)
    c = (size - 1) / 2.0
    safe = np.where(depth > 0, depth, 1.0)
    uv = np.column_stack([f * cam[:, 0] / safe + c, f * cam[:, 1] / safe + c])
    sigma = f * scene.radii / safe
    return uv, sigma, depth


def render(scene: SyntheticScene, pose: Pose, size: int) -> np.ndarray:
    """Splat every blob in front of the camera; additive colour, clamped to [0, 1]. Returns [3, size, size]."""
    uv, sigma, depth = project(scene, pose, size)
    vis = depth > 1e-6
    img = _kernels.splat(uv[vis], sigma[vis], scene.colors[vis], size)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def sample_pose(scene: SyntheticScene, rng: np.random.Generator) -> Pose:
    half = scene.extent / 2.0
    x = np.array([rng.uniform(-half, half), rng.uniform(-half, half),
                  rng.uniform(-scene.height_range, scene.height_range)])
    yaw = np.radians(rng.uniform(-scene.max_yaw_deg, scene.max_yaw_deg))
    pitch = np.radians(rng.uniform(-scene.max_tilt_deg, scene.max_tilt_deg))
    roll = np.radians(rng.uniform(-scene.max_tilt_deg, scene.max_tilt_deg))
    q = quat_mul_np(quat_from_axis_angle([0, 1, 0], yaw),
                    quat_mul_np(quat_from_axis_angle([1, 0, 0], pitch), quat_from_axis_angle([0, 0, 1], roll)))
    q = q / np.linalg.norm(q)
    return Pose(x, q if q[0] >= 0 else -q)


def make_overfit_set(seed: int, n: int, scene: SyntheticScene | None = None, size: int = 32,
                     jitter_pos: float = 0.02, jitter_deg: float = 1.0):
    """``n`` rendered samples for overfitting plus a jittered held-out copy.

    Returns (train, eval) where eval is the train list followed by one
    perturbed copy of each train pose.
    """
    if n < 2:
        raise ValueError("make_overfit_set needs n >= 2")
    scene = scene if scene is not None else SyntheticScene.generate(seed)
    rng = np.random.default_rng([seed, 1])
    train = []
    for i in range(n):
        pose = sample_pose(scene, rng)
        train.append(PoseSample(f"synthetic/{seed}/{i:05d}.png", pose, render(scene, pose, size)))
    held = []
    for i, s in enumerate(train):
        dx = rng.normal(0.0, jitter_pos * scene.extent, 3)
        axis = rng.normal(size=3)
        dq = quat_from_axis_angle(axis, np.radians(rng.normal(0.0, jitter_deg)))
        q = quat_mul_np(s.pose.q, dq)
        pose = Pose(s.pose.x + dx, q / np.linalg.norm(q))
        held.append(PoseSample(f"synthetic/{seed}/heldout_{i:05d}.png", pose, render(scene, pose, size)))
    return train, train + held


def write_dataset(samples, root, split_file: str = "dataset_train.txt", scene: SyntheticScene | None = None) -> Path:
    """Materialise samples as PNGs plus a pose list under ``root``."""
    root = Path(root)
    out = []
    for i, s in enumerate(samples):
        ref = f"images/frame{i:05d}.png"
        (root / "images").mkdir(parents=True, exist_ok=True)
        write_image(root / ref, s.load_image())
        out.append(PoseSample(ref, s.pose, root=root))
    write_pose_list(out, root / split_file)
    if scene is not None:
        (root / "scene.json").write_text(scene.dumps() + "\n", encoding="utf-8")
    return root / split_file


def quadrant(xy) -> int:
    x, y = float(xy[0]), float(xy[1])
    return (0 if x >= 0 else 1) + (0 if y >= 0 else 2)
