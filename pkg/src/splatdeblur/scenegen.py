"""Synthetic scenes, ground-truth camera motion and blurred observations.

Blur is produced the physical way: the scene is rendered at ``D`` evenly
spaced times along each camera's ground-truth screw motion and the renders
are averaged with equal weights.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import splatter
from .liegroup import Pose, ScrewAxis, compose, se3_exp
from .motionmodel import write_trajectory_csv, read_trajectory_csv
from .splatter import Camera, GaussianCloud

MAGNITUDES = {"none": 0.0, "moderate": 0.02, "extreme": 0.15}
DENSE_FRAMES = 33
TRANSLATION_RATIO = 0.5  # |v*|, so translation grows with the angle through G(theta)


@dataclass
class GroundTruthMotion:
    """Screw motion about the anchor; theta(0.5) = 0 so the anchor is on the path."""

    omega_hat: np.ndarray
    v: np.ndarray
    theta_max: float
    kind: str = "linear"

    def theta(self, tau: float) -> float:
        s = 2.0 * float(tau) - 1.0
        if self.kind == "linear":
            return self.theta_max * s
        if self.kind == "sine":
            return self.theta_max * float(np.sin(0.5 * np.pi * s))
        raise ValueError(f"unknown motion kind {self.kind!r}")

    def offset(self, tau: float) -> Pose:
        return se3_exp(ScrewAxis(self.omega_hat, self.v, self.theta(tau)))

    def pose(self, anchor: Pose, tau: float) -> Pose:
        if self.theta(tau) == 0.0:
            return anchor  # exact, no signed zeros from multiplying by I
        return compose(anchor, self.offset(tau))


@dataclass
class SyntheticScene:
    cloud: GaussianCloud
    cameras: list[Camera]  # anchor cameras, world-to-camera poses
    motions: list[GroundTruthMotion]
    seed: int

    @property
    def anchors(self) -> list[Pose]:
        """Camera-to-world anchor poses."""
        return [c.pose.inverse() for c in self.cameras]


@dataclass
class BlurDataset:
    scene: SyntheticScene
    blurred: np.ndarray  # (K, H, W, 3)
    sharp: np.ndarray  # (K, H, W, 3)
    dense_taus: np.ndarray
    gt_poses: list[list[Pose]] = field(default_factory=list)  # per camera, camera-to-world at dense_taus
    magnitude: float = 0.0

    def __len__(self):
        return len(self.blurred)

    @property
    def cameras(self) -> list[Camera]:
        return self.scene.cameras

    @property
    def anchors(self) -> list[Pose]:
        return self.scene.anchors

    def gt_pose(self, k: int, tau: float) -> Pose:
        """Ground-truth camera-to-world pose of camera ``k`` at time ``tau``."""
        if self.scene.motions:
            return self.scene.motions[k].pose(self.anchors[k], tau)
        j = int(np.argmin(np.abs(self.dense_taus - tau)))
        return self.gt_poses[k][j]


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose with +z toward ``target``, +y pointing down."""
    eye, target, up = (np.asarray(a, dtype=float) for a in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return Pose(np.stack([right, down, fwd], axis=1), eye)


def random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def make_scene(seed: int = 0, n_gaussians: int = 500, n_cameras: int = 8, image_size: int = 64,
               radius: float = 3.8, focal_scale: float = 3.0, theta_max: float = 0.0) -> SyntheticScene:
    if n_gaussians < 1 or n_cameras < 2:
        raise ValueError("need at least 1 Gaussian and 2 cameras")
    rng = np.random.default_rng(seed)
    G = n_gaussians
    cloud = GaussianCloud(
        means=rng.uniform(-0.5, 0.5, (G, 3)),
        log_scales=np.log(rng.uniform(0.02, 0.07, (G, 3))),
        quats=rng.normal(size=(G, 4)),
        opacity_logits=rng.uniform(0.0, 3.0, G),
        colors=splatter.rgb_to_sh(rng.uniform(0.0, 1.0, (G, 1, 3))),
    )
    f = focal_scale * image_size
    c = (image_size - 1) / 2.0
    cameras, motions = [], []
    for k in range(n_cameras):
        az = 2.0 * np.pi * k / n_cameras
        el = 0.35 * np.sin(2.0 * np.pi * (k + 0.5) / n_cameras)
        eye = radius * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        anchor = look_at(eye, np.zeros(3))
        cameras.append(Camera(anchor.inverse(), f, f, c, c, image_size, image_size))
        motions.append(GroundTruthMotion(random_unit(rng), TRANSLATION_RATIO * random_unit(rng),
                                         theta_max, "linear" if k % 2 == 0 else "sine"))
    return SyntheticScene(cloud, cameras, motions, seed)


def with_magnitude(scene: SyntheticScene, theta_max: float) -> SyntheticScene:
    motions = [GroundTruthMotion(m.omega_hat, m.v, theta_max, m.kind) for m in scene.motions]
    return SyntheticScene(scene.cloud, scene.cameras, motions, scene.seed)


def render_numpy(cloud: GaussianCloud, cam: Camera) -> np.ndarray:
    with ad.no_grad():
        return splatter.render(cloud, cam).data


def make_blur_dataset(scene: SyntheticScene, D: int = DENSE_FRAMES, magnitude: float | str | None = None
                      ) -> BlurDataset:
    if D < 3 or D % 2 == 0:
        raise ValueError("D must be odd and at least 3 so the anchor time is sampled")
    if magnitude is not None:
        theta = MAGNITUDES[magnitude] if isinstance(magnitude, str) else float(magnitude)
        scene = with_magnitude(scene, theta)
    taus = np.arange(D) / (D - 1)
    blurred, sharp, gt = [], [], []
    with ad.no_grad():
        prep = splatter.prepare(scene.cloud)
        for cam, anchor, motion in zip(scene.cameras, scene.anchors, scene.motions):
            sharp_img = splatter.render(prep, cam).data
            poses, counts, frames = [], {}, {}
            for tau in taus:
                if motion.theta(tau) == 0.0:
                    poses.append(anchor)
                    key = "anchor"
                    if key not in frames:
                        frames[key] = sharp_img
                else:
                    pose = motion.pose(anchor, tau)
                    poses.append(pose)
                    key = pose.matrix().tobytes()
                    if key not in frames:
                        frames[key] = splatter.render(prep, cam.with_pose(pose.inverse())).data
                counts[key] = counts.get(key, 0) + 1
            # repeated poses are weighted instead of re-added, so a static camera is exact
            blurred.append(sum((counts[k] / D) * frames[k] for k in frames))
            sharp.append(sharp_img)
            gt.append(poses)
    theta = scene.motions[0].theta_max if scene.motions else 0.0
    return BlurDataset(scene, np.stack(blurred), np.stack(sharp), taus, gt, theta)


# ---------------------------------------------------------------------------
# dataset directory


def save_png(path, img: np.ndarray):
    from PIL import Image

    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(q).save(path)


def load_png(path) -> np.ndarray:
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


CAMERA_FIELDS = (["index", "width", "height", "fx", "fy", "cx", "cy"]
                 + [f"r{i}{j}" for i in range(3) for j in range(3)] + ["tx", "ty", "tz"])


def write_cameras_csv(path, cameras: list[Camera]):
    """Anchor intrinsics and camera-to-world poses."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CAMERA_FIELDS)
        for k, cam in enumerate(cameras):
            c2w = cam.pose.inverse()
            w.writerow([k, cam.width, cam.height] + [repr(float(x)) for x in (cam.fx, cam.fy, cam.cx, cam.cy)]
                       + [repr(float(x)) for x in c2w.R.reshape(-1)] + [repr(float(x)) for x in c2w.t])


def read_cameras_csv(path) -> list[Camera]:
    cams = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            R = np.array([float(row[f"r{i}{j}"]) for i in range(3) for j in range(3)]).reshape(3, 3)
            t = np.array([float(row[k]) for k in ("tx", "ty", "tz")])
            cams.append(Camera(Pose(R, t).inverse(), float(row["fx"]), float(row["fy"]), float(row["cx"]),
                               float(row["cy"]), int(row["width"]), int(row["height"])))
    return cams


def save_dataset(ds: BlurDataset, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds.scene.cloud.save(out / "scene.cloud")
    write_cameras_csv(out / "cameras.csv", ds.cameras)
    for k in range(len(ds)):
        save_png(out / f"blur_{k:04d}.png", ds.blurred[k])
        save_png(out / f"sharp_{k:04d}.png", ds.sharp[k])
    rows = [(k, tau, pose) for k in range(len(ds)) for tau, pose in zip(ds.dense_taus, ds.gt_poses[k])]
    write_trajectory_csv(out / "traj_gt.csv", rows)


class MissingFilesError(FileNotFoundError):
    def __init__(self, missing: list[str]):
        super().__init__("missing dataset files: " + ", ".join(missing))
        self.missing = missing


def load_dataset(path, require_sharp: bool = False) -> BlurDataset:
    """Load a dataset directory. Sharp images and ground truth are optional."""
    path = Path(path)
    missing = [n for n in ("scene.cloud", "cameras.csv") if not (path / n).exists()]
    if missing:
        raise MissingFilesError(missing)
    cameras = read_cameras_csv(path / "cameras.csv")
    K = len(cameras)
    missing = [f"blur_{k:04d}.png" for k in range(K) if not (path / f"blur_{k:04d}.png").exists()]
    has_sharp = all((path / f"sharp_{k:04d}.png").exists() for k in range(K))
    if require_sharp and not has_sharp:
        missing += [f"sharp_{k:04d}.png" for k in range(K) if not (path / f"sharp_{k:04d}.png").exists()]
    if missing:
        raise MissingFilesError(missing)
    blurred = np.stack([load_png(path / f"blur_{k:04d}.png") for k in range(K)])
    sharp = np.stack([load_png(path / f"sharp_{k:04d}.png") for k in range(K)]) if has_sharp else None
    gt_poses, taus = [], np.zeros(0)
    if (path / "traj_gt.csv").exists():
        traj = read_trajectory_csv(path / "traj_gt.csv")
        gt_poses = [[p for _, p in traj[k]] for k in range(K)]
        taus = np.array([t for t, _ in traj[0]])
    scene = SyntheticScene(GaussianCloud.load(path / "scene.cloud"), cameras, [], seed=-1)
    return BlurDataset(scene, blurred, sharp, taus, gt_poses)
