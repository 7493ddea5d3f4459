"""Learned composition of the sharp trajectory renders into a blurry image."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class WeightNet:
    """Shallow CNN giving per-frame pixel weights and a per-pixel blend mask.

    Frames are processed independently by shared convolutions (5x5 then 3x3,
    32 channels). The weight head is a pointwise conv per frame; the mask head
    is a pointwise conv on the frame-averaged features. Both heads start at
    zero weights, so the initial weights are uniform and the mask is 0.5.
    """

    def __init__(self, store: ad.ParamStore, channels: int = 32, seed: int = 0, group: str = "weightnet"):
        rng = np.random.default_rng(seed)

        def conv(name, cout, cin, k, zero=False):
            bound = 1.0 / np.sqrt(cin * k * k)
            w = np.zeros((cout, cin, k, k)) if zero else rng.uniform(-bound, bound, (cout, cin, k, k))
            b = np.zeros(cout) if zero else rng.uniform(-bound, bound, cout)
            return store.add(f"{name}.w", w, group), store.add(f"{name}.b", b, group)

        self.conv1 = conv("wnet.conv1", channels, 3, 5)
        self.conv2 = conv("wnet.conv2", channels, channels, 3)
        self.weight_head = conv("wnet.weight", 3, channels, 1, zero=True)
        self.mask_head = conv("wnet.mask", 3, channels, 1, zero=True)

    def features(self, frames: Tensor) -> Tensor:
        """(N, H, W, 3) frames -> (N, C, H, W) features."""
        x = ad.transpose(frames, (0, 3, 1, 2))
        h = ad.relu(ad.conv2d(x, *self.conv1))
        return ad.conv2d(h, *self.conv2)

    def __call__(self, frames: Tensor) -> tuple[Tensor, Tensor]:
        """Return weights P (N, H, W, 3) and mask M (H, W, 3)."""
        _check_frames(frames)
        feat = self.features(frames)
        logits = ad.conv2d(feat, *self.weight_head)  # N, 3, H, W
        P = ad.transpose(ad.softmax(logits, axis=0), (0, 2, 3, 1))
        pooled = ad.mean(feat, axis=0, keepdims=True)
        M = ad.sigmoid(ad.conv2d(pooled, *self.mask_head))[0]
        return P, ad.transpose(M, (1, 2, 0))


def _check_frames(frames):
    if frames.ndim != 4 or frames.shape[-1] != 3 or frames.shape[0] < 2:
        raise ValueError(f"expected (N>=2, H, W, 3) frames, got shape {frames.shape}")


def pixel_weights(net: WeightNet, frames) -> Tensor:
    return net(ad.as_tensor(frames))[0]


def compose_blur(frames, P) -> Tensor:
    """Per-pixel convex combination of the frames."""
    frames, P = ad.as_tensor(frames), ad.as_tensor(P)
    if frames.shape != P.shape:
        raise ValueError(f"frames {frames.shape} and weights {P.shape} differ")
    return ad.tsum(frames * P, axis=0)


def blend_output(sharp_mid, blur, M) -> Tensor:
    """(1 - M) * sharp + M * blur."""
    sharp_mid, blur, M = ad.as_tensor(sharp_mid), ad.as_tensor(blur), ad.as_tensor(M)
    return (1.0 - M) * sharp_mid + M * blur


def mean_frames(frames) -> Tensor:
    return ad.mean(ad.as_tensor(frames), axis=0)
