"""CPU differentiable Gaussian splatting.

The per-Gaussian part of the pipeline (covariance assembly, projection,
colour evaluation) is written with :mod:`splatdeblur.autodiff` ops, so
gradients reach cloud parameters and the camera pose without extra work. The
per-pixel compositing is one fused node backed by the kernels in
:mod:`splatdeblur._raster`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _raster
from . import autodiff as ad
from .autodiff import Tensor
from .liegroup import Pose

NEAR = 0.01
DILATION = 0.3
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199


def rgb_to_sh(rgb):
    return (np.asarray(rgb, dtype=float) - 0.5) / SH_C0


def sh_to_rgb(sh0):
    return np.asarray(sh0, dtype=float) * SH_C0 + 0.5


@dataclass
class GaussianCloud:
    """Scene parameters in their stored (unconstrained) form.

    ``colors`` has shape (G, K, 3) with K = 1 for SH degree 0 and 4 for degree 1.
    """

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float).reshape(-1, 3)
        G = len(self.means)
        self.log_scales = np.asarray(self.log_scales, dtype=float).reshape(G, 3)
        self.quats = np.asarray(self.quats, dtype=float).reshape(G, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=float).reshape(G)
        colors = np.asarray(self.colors, dtype=float)
        K = colors.shape[1] if colors.ndim == 3 else max(colors.size // max(3 * G, 1), 1)
        self.colors = colors.reshape(G, K, 3)
        if self.colors.shape[1] not in (1, 4):
            raise ValueError("colors must hold SH degree 0 or 1 coefficients")

    def __len__(self):
        return len(self.means)

    @property
    def sh_degree(self) -> int:
        return 0 if self.colors.shape[1] == 1 else 1

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.means.copy(), self.log_scales.copy(), self.quats.copy(),
                             self.opacity_logits.copy(), self.colors.copy())

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(getattr(self, k)) for k in CLOUD_KEYS}

    def register(self, store: ad.ParamStore, prefix: str = "cloud") -> dict[str, Tensor]:
        return {k: store.add(f"{prefix}.{k}", getattr(self, k), group=f"{prefix}.{k}")
                for k in CLOUD_KEYS}

    @classmethod
    def from_store(cls, store: ad.ParamStore, prefix: str = "cloud") -> "GaussianCloud":
        return cls(*(store[f"{prefix}.{k}"].data.copy() for k in CLOUD_KEYS))

    def save(self, path):
        G = len(self)
        rows = np.concatenate([self.means, self.log_scales, self.quats,
                               self.opacity_logits[:, None], self.colors.reshape(G, -1)], axis=1)
        lines = [f"# gaussians {G} sh_degree {self.sh_degree}"]
        lines += [" ".join(f"{x:.17g}" for x in row) for row in rows]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "GaussianCloud":
        text = Path(path).read_text().splitlines()
        head = text[0].split()
        if len(head) != 5 or head[0] != "#" or head[1] != "gaussians" or head[3] != "sh_degree":
            raise ValueError(f"{path}: bad cloud header {text[0]!r}")
        G, deg = int(head[2]), int(head[4])
        K = (deg + 1) ** 2
        data = np.array([[float(x) for x in ln.split()] for ln in text[1:] if ln.strip()])
        data = data.reshape(G, 11 + 3 * K)
        return cls(data[:, 0:3], data[:, 3:6], data[:, 6:10], data[:, 10], data[:, 11:].reshape(G, K, 3))


CLOUD_KEYS = ("means", "log_scales", "quats", "opacity_logits", "colors")


@dataclass
class Camera:
    """Pinhole camera; ``pose`` maps world points into the camera frame."""

    pose: Pose
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("focal lengths and image extents must be positive")

    def with_pose(self, pose: Pose) -> "Camera":
        return Camera(pose, self.fx, self.fy, self.cx, self.cy, self.width, self.height)


# ---------------------------------------------------------------------------
# plain-numpy reference versions


def quat_to_rotmat(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def covariance(s, q) -> np.ndarray:
    """R S S^T R^T for scale vector ``s`` (already exponentiated) and quaternion ``q``."""
    RS = quat_to_rotmat(q) * np.asarray(s, dtype=float)[None, :]
    return RS @ RS.T


def project(mu, Sigma, cam: Camera):
    """Pixel position, 2x2 image-plane covariance (undilated) and depth.

    Returns None when the point is not in front of the near plane.
    """
    p = cam.pose.R @ np.asarray(mu, dtype=float) + cam.pose.t
    x, y, z = p
    if z <= NEAR:
        return None
    J = np.array([[cam.fx / z, 0.0, -cam.fx * x / z ** 2],
                  [0.0, cam.fy / z, -cam.fy * y / z ** 2]])
    W = cam.pose.R
    S2 = J @ W @ Sigma @ W.T @ J.T
    return np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy]), S2, z


# ---------------------------------------------------------------------------
# differentiable path

# maps the 16 products q_i q_j of a unit quaternion to the 9 rotation entries
_QUAT_BASIS = np.zeros((16, 9))
for _ent, _terms in {
    0: [(0, 0, 1), (1, 1, 1), (2, 2, -1), (3, 3, -1)],
    1: [(1, 2, 2), (0, 3, -2)],
    2: [(1, 3, 2), (0, 2, 2)],
    3: [(1, 2, 2), (0, 3, 2)],
    4: [(0, 0, 1), (1, 1, -1), (2, 2, 1), (3, 3, -1)],
    5: [(2, 3, 2), (0, 1, -2)],
    6: [(1, 3, 2), (0, 2, -2)],
    7: [(2, 3, 2), (0, 1, 2)],
    8: [(0, 0, 1), (1, 1, -1), (2, 2, -1), (3, 3, 1)],
}.items():
    for _i, _j, _c in _terms:
        _QUAT_BASIS[4 * _i + _j, _ent] += _c

# packs (fx/z, -fx x/z^2, fy/z, -fy y/z^2) into the 2x3 projection Jacobian
_JAC_BASIS = np.zeros((4, 6))
_JAC_BASIS[0, 0] = _JAC_BASIS[1, 2] = _JAC_BASIS[2, 4] = _JAC_BASIS[3, 5] = 1.0


def world_covariances(log_scales: Tensor, quats: Tensor) -> Tensor:
    """(G, 3, 3) covariances from stored log-scales and raw quaternions."""
    G = log_scales.shape[0]
    qn = quats / ad.sqrt(ad.tsum(ad.square(quats), axis=1, keepdims=True))
    outer = ad.reshape(ad.reshape(qn, (G, 4, 1)) * ad.reshape(qn, (G, 1, 4)), (G, 16))
    R = ad.reshape(outer @ _QUAT_BASIS, (G, 3, 3))
    RS = R * ad.reshape(ad.exp(log_scales), (G, 1, 3))
    return RS @ ad.transpose(RS)


def _sh_colors(colors: Tensor, means: Tensor, cam_center: Tensor) -> Tensor:
    rgb = colors[:, 0, :] * SH_C0 + 0.5
    if colors.shape[1] == 1:
        return rgb
    d = means - cam_center
    d = d / ad.sqrt(ad.tsum(ad.square(d), axis=1, keepdims=True))
    x, y, z = d[:, 0:1], d[:, 1:2], d[:, 2:3]
    return rgb + SH_C1 * (-y * colors[:, 1, :] + z * colors[:, 2, :] - x * colors[:, 3, :])


class Prepared:
    """Pose-independent per-Gaussian quantities, computed once per step."""

    def __init__(self, params: dict[str, Tensor]):
        self.means = ad.as_tensor(params["means"])
        self.cov = world_covariances(ad.as_tensor(params["log_scales"]), ad.as_tensor(params["quats"]))
        self.opacity = ad.sigmoid(ad.as_tensor(params["opacity_logits"]))
        self.colors = ad.as_tensor(params["colors"])


def prepare(params) -> Prepared:
    if isinstance(params, GaussianCloud):
        params = params.tensors()
    return Prepared(params)


def rasterize(uv: Tensor, conic: Tensor, opacity: Tensor, color: Tensor, radius: np.ndarray,
              cam: Camera, aux: dict | None = None) -> Tensor:
    """Composite depth-sorted splats; one tape node with a fused backward."""
    W, H = int(cam.width), int(cam.height)
    cx, cy = float(cam.cx), float(cam.cy)
    args = (np.ascontiguousarray(uv.data), np.ascontiguousarray(conic.data),
            np.ascontiguousarray(opacity.data), np.ascontiguousarray(color.data),
            np.ascontiguousarray(radius, dtype=np.float64))
    off = _raster.box_offsets(args[0], args[4], cx, cy, W, H)
    img, T, t_before = _raster.forward(*args, cx, cy, W, H, off)
    if aux is not None:
        aux["transmittance"] = T
        aux["t_before"] = t_before
        aux["offsets"] = off

    def vjp(g):
        return _raster.backward(*args, cx, cy, W, H, off, t_before, np.ascontiguousarray(g))

    return ad.make_node(img, (uv, conic, opacity, color), vjp, "rasterize")


def render(cloud, cam: Camera, R_wc=None, t_wc=None, aux: dict | None = None) -> Tensor:
    """Render an (H, W, 3) image.

    ``cloud`` is a :class:`GaussianCloud`, a dict of parameter tensors, or a
    :class:`Prepared`. ``R_wc``/``t_wc`` override the camera pose with
    (possibly differentiable) world-to-camera tensors.
    """
    prep = cloud if isinstance(cloud, Prepared) else prepare(cloud)
    R = ad.as_tensor(cam.pose.R if R_wc is None else R_wc)
    t = ad.as_tensor(cam.pose.t if t_wc is None else t_wc)
    H, W = int(cam.height), int(cam.width)
    if prep.means.shape[0] == 0:
        return ad.Tensor(np.zeros((H, W, 3)))

    p_all = prep.means @ ad.transpose(R) + t
    z_all = p_all.data[:, 2]
    keep = np.nonzero(z_all > NEAR)[0]
    keep = keep[np.argsort(z_all[keep], kind="stable")]
    if len(keep) == 0:
        return ad.Tensor(np.zeros((H, W, 3)))
    G = len(keep)

    p = p_all[keep]
    x, y, z = p[:, 0:1], p[:, 1:2], p[:, 2:3]
    inv_z = 1.0 / z
    uv = ad.concat([cam.fx * x * inv_z, cam.fy * y * inv_z], axis=1)
    jac_terms = ad.concat([cam.fx * inv_z, -cam.fx * x * inv_z * inv_z,
                           cam.fy * inv_z, -cam.fy * y * inv_z * inv_z], axis=1)
    J = ad.reshape(jac_terms @ _JAC_BASIS, (G, 2, 3))
    JW = J @ R
    cov2 = JW @ prep.cov[keep] @ ad.transpose(JW)
    a = cov2[:, 0, 0] + DILATION
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + DILATION
    det = a * c - b * b
    conic = ad.stack([c / det, -b / det, a / det], axis=1)

    mid = 0.5 * (a.data + c.data)
    lam = mid + np.sqrt(np.maximum(0.1, mid * mid - det.data))
    radius = np.ceil(3.0 * np.sqrt(lam))

    if prep.colors.shape[1] == 1:
        rgb = prep.colors[:, 0, :][keep] * SH_C0 + 0.5
    else:
        center = -(ad.inv(R) @ t)
        rgb = _sh_colors(prep.colors[keep], prep.means[keep], center)
    return rasterize(uv, conic, prep.opacity[keep], rgb, radius, cam, aux)
