"""Dual-view pairs and their three-channel encoding.

Red carries the CC view, green the MLO view, blue a derived third channel.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .imageio import GrayImage, RgbImage

__all__ = ["DualViewPair", "ThirdChannelMode", "encode", "decode", "third_channel", "consistency_residual"]


class ThirdChannelMode(enum.Enum):
    SUM = "sum"
    ABSDIFF = "absdiff"
    ZERO = "zero"

    @property
    def model_name(self) -> str:
        return {"sum": "Model_sum", "absdiff": "Model_diff", "zero": "Model_zeros"}[self.value]


@dataclass(frozen=True)
class DualViewPair:
    cc: GrayImage
    mlo: GrayImage

    def __post_init__(self):
        if self.cc.data.shape != self.mlo.data.shape:
            raise ValueError(
                f"CC and MLO views differ in size: {self.cc.data.shape} vs {self.mlo.data.shape}"
            )


def third_channel(r: np.ndarray, g: np.ndarray, mode: ThirdChannelMode) -> np.ndarray:
    if mode is ThirdChannelMode.SUM:
        # sums above 1 are clamped
        return np.clip(r + g, 0.0, 1.0)
    if mode is ThirdChannelMode.ABSDIFF:
        return np.abs(r - g)
    return np.zeros_like(r)


def encode(pair: DualViewPair, mode: ThirdChannelMode) -> RgbImage:
    r, g = pair.cc.data, pair.mlo.data
    return RgbImage(np.stack([r, g, third_channel(r, g, mode)]))


def decode(img: RgbImage) -> DualViewPair:
    return DualViewPair(img.r, img.g)


def consistency_residual(img: RgbImage, mode: ThirdChannelMode) -> float:
    """Mean absolute deviation of the blue plane from its defining relation."""
    r, g, b = img.data
    return float(np.mean(np.abs(b - third_channel(r, g, mode))))
