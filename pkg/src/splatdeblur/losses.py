"""Objective terms, SSIM, and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 0.3
    lambda_o: float = 1e-4
    lambda_m: float = 1e-3

    def __post_init__(self):
        if not 0.0 <= self.lambda_c <= 1.0:
            raise ValueError("lambda_c must lie in [0, 1]")
        if self.lambda_o < 0 or self.lambda_m < 0:
            raise ValueError("loss weights must be non-negative")


def _check_same(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def l1(a, b) -> Tensor:
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    _check_same(a, b)
    return ad.mean(ad.absolute(a - b))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


_WINDOW = gaussian_window()


def _filter_np(x: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(x, _WINDOW, axis=0, mode="constant")
    return ndimage.correlate1d(out, _WINDOW, axis=1, mode="constant")


def gaussian_filter(x) -> Tensor:
    """Separable 11x11 Gaussian window over (H, W, ...) with zero padding.

    The window is symmetric, so the operator is self-adjoint.
    """
    x = ad.as_tensor(x)
    return ad.make_node(_filter_np(x.data), (x,), lambda g: (_filter_np(g),), "gaussian_filter")


def ssim_map(a, b) -> Tensor:
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    _check_same(a, b)
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    C1 = SSIM_K1 ** 2
    C2 = SSIM_K2 ** 2
    mu_a, mu_b = gaussian_filter(a), gaussian_filter(b)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = gaussian_filter(a * a) - mu_aa
    var_b = gaussian_filter(b * b) - mu_bb
    cov = gaussian_filter(a * b) - mu_ab
    num = (2.0 * mu_ab + C1) * (2.0 * cov + C2)
    den = (mu_aa + mu_bb + C1) * (var_a + var_b + C2)
    return num / den


def ssim(a, b) -> Tensor:
    return ad.mean(ssim_map(a, b))


def dssim(a, b) -> Tensor:
    return (1.0 - ssim(a, b)) * 0.5


def orthogonality_residuals(R) -> Tensor:
    """Frobenius norm of R^T R - I for a batch (n, 3, 3)."""
    R = ad.as_tensor(R)
    E = ad.transpose(R) @ R - np.eye(3)
    sq = ad.tsum(ad.square(E), axis=(-2, -1))
    return ad.sqrt(ad.clamp_min(sq, 1e-30))


def loss_orthogonality(R) -> Tensor:
    return ad.mean(orthogonality_residuals(R))


def loss_mask(M) -> Tensor:
    return ad.mean(ad.as_tensor(M))


def total_loss(l1_term, dssim_term, lo_term=0.0, lmask_term=0.0,
               weights: LossWeights = LossWeights()):
    w = weights
    return ((1.0 - w.lambda_c) * l1_term + w.lambda_c * dssim_term
            + w.lambda_o * lo_term + w.lambda_m * lmask_term)


class Adam:
    """Adam with one learning rate per parameter group.

    ``lr`` maps group name -> float or callable(step) -> float. Parameters with
    no gradient in a step are left alone (state and value).
    """

    def __init__(self, store: ad.ParamStore, lr: dict, betas=(0.9, 0.999), eps: float = 1e-8,
                 grad_clip: float = 0.0):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.state: dict[str, dict] = {}
        self.iteration = 0

    def group_lr(self, group: str) -> float:
        lr = self.lr.get(group, self.lr.get("default"))
        if lr is None:
            raise KeyError(f"no learning rate for parameter group {group!r}")
        return float(lr(self.iteration)) if callable(lr) else float(lr)

    def step(self, names=None):
        names = self.store.names() if names is None else names
        live = [n for n in names if self.store[n].grad is not None]
        scale = 1.0
        if self.grad_clip > 0:
            norm = np.sqrt(sum(float(np.sum(self.store[n].grad ** 2)) for n in live))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
        for n in live:
            p = self.store[n]
            g = p.grad * scale
            st = self.state.setdefault(n, {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0})
            st["t"] += 1
            st["m"] = self.b1 * st["m"] + (1.0 - self.b1) * g
            st["v"] = self.b2 * st["v"] + (1.0 - self.b2) * g * g
            mhat = st["m"] / (1.0 - self.b1 ** st["t"])
            vhat = st["v"] / (1.0 - self.b2 ** st["t"])
            p.data = p.data - self.group_lr(self.store.groups[n]) * mhat / (np.sqrt(vhat) + self.eps)
        self.store.zero_grad()
        self.iteration += 1


def exponential_lr(lr_init: float, lr_final: float, total: int):
    """Log-linear decay from ``lr_init`` to ``lr_final`` over ``total`` steps."""
    def f(step):
        t = min(max(step / max(total, 1), 0.0), 1.0)
        return float(np.exp(np.log(lr_init) * (1 - t) + np.log(lr_final) * t))
    return f
