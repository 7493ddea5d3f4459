"""Image quality and trajectory error."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses
from .liegroup import Pose, geodesic_angle

PSNR_SENTINEL = 99.0
REPORT_FIELDS = ("image_index", "psnr_blurin", "psnr_deblurred", "ssim_deblurred",
                 "traj_rot_mean", "traj_trans_mean")


def _pair(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images give 99.0."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return min(10.0 * np.log10(1.0 / mse), PSNR_SENTINEL)


def ssim(a, b) -> float:
    """Mean local SSIM with the training loss's window and constants."""
    a, b = _pair(a, b)
    with ad.no_grad():
        return float(losses.ssim(a, b).data)


@dataclass
class TrajectoryError:
    rotation: np.ndarray  # radians, per sample
    translation: np.ndarray

    @property
    def rot_mean(self) -> float:
        return float(np.mean(self.rotation))

    @property
    def rot_max(self) -> float:
        return float(np.max(self.rotation))

    @property
    def trans_mean(self) -> float:
        return float(np.mean(self.translation))

    @property
    def trans_max(self) -> float:
        return float(np.max(self.translation))


def trajectory_error(pred: list[Pose], gt: list[Pose], allow_reversal: bool = False) -> TrajectoryError:
    """Per-sample geodesic angle of R_pred R_gt^T and translation distance.

    Blur cannot tell which way the camera moved during the exposure, so with
    ``allow_reversal`` the prediction is also compared in reverse time order
    and the better alignment (by mean rotation error) is kept.
    """
    if len(pred) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(pred)} vs {len(gt)}")
    if not pred:
        raise ValueError("empty trajectory")

    def errors(p):
        rot = np.array([geodesic_angle(a.R, b.R) for a, b in zip(p, gt)])
        trans = np.array([np.linalg.norm(a.t - b.t) for a, b in zip(p, gt)])
        return TrajectoryError(rot, trans)

    best = errors(pred)
    if allow_reversal:
        rev = errors(pred[::-1])
        if rev.rot_mean < best.rot_mean:
            best = rev
    return best


def write_report(path, rows: list[dict], with_trajectory: bool = True):
    fields = list(REPORT_FIELDS if with_trajectory else REPORT_FIELDS[:4])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for row in rows:
            w.writerow([row["image_index"]] + [repr(float(row[f])) for f in fields[1:]])


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "image_index" else float(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]
