"""Image conditioning: max normalization, laterality mirroring, reference-CDF
histogram matching and percentile normalization.

Quantiles everywhere use linear interpolation between order statistics at
position (n - 1) * p / 100 (numpy's default ``linear`` method).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .imageio import GrayImage, RgbImage

__all__ = [
    "Laterality",
    "ReferenceCdf",
    "normalize_max",
    "mirror_if_left",
    "bin_index",
    "build_reference_cdf",
    "matching_lut",
    "histogram_match",
    "percentile_normalize",
    "load_default_reference",
]


class Laterality(enum.Enum):
    LEFT = "L"
    RIGHT = "R"


@dataclass(frozen=True, eq=False)
class ReferenceCdf:
    """Cumulative intensity distribution on ``bins`` equal-width bins over [0, 1]."""

    bins: int
    cdf: np.ndarray

    def __post_init__(self):
        cdf = np.asarray(self.cdf, dtype=np.float64)
        if self.bins < 1 or cdf.shape != (self.bins,):
            raise ValueError("cdf length must equal bins")
        if np.any(np.diff(cdf) < 0):
            raise ValueError("cdf must be non-decreasing")
        if cdf.min() < 0 or cdf[-1] != 1.0:
            raise ValueError("cdf must lie in [0, 1] and end at exactly 1")
        object.__setattr__(self, "cdf", cdf)

    def to_json(self) -> str:
        return json.dumps({"bins": self.bins, "cdf": self.cdf.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "ReferenceCdf":
        obj = json.loads(text)
        return cls(int(obj["bins"]), np.array(obj["cdf"], dtype=np.float64))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "ReferenceCdf":
        return cls.from_json(Path(path).read_text())


def load_default_reference() -> ReferenceCdf:
    """The reference CDF bundled with the package (built from 100 phantom views)."""
    text = resources.files("dualview").joinpath("data/reference_cdf.json").read_text()
    return ReferenceCdf.from_json(text)


def normalize_max(img: GrayImage) -> GrayImage:
    peak = img.data.max()
    if peak <= 0:
        return img
    return GrayImage(img.data / peak)


def mirror_if_left(img: GrayImage, side: Laterality) -> GrayImage:
    if side is Laterality.LEFT:
        return GrayImage(img.data[:, ::-1].copy())
    return img


def bin_index(values: np.ndarray, bins: int) -> np.ndarray:
    """Bin k covers [k/bins, (k+1)/bins); the last bin also takes 1.0."""
    return np.minimum((np.asarray(values) * bins).astype(np.int64), bins - 1)


def _cdf_of(values: np.ndarray, bins: int) -> np.ndarray:
    counts = np.bincount(bin_index(values.ravel(), bins), minlength=bins)
    cdf = np.cumsum(counts) / counts.sum()
    cdf[-1] = 1.0
    return cdf


def build_reference_cdf(imgs, bins: int = 256) -> ReferenceCdf:
    imgs = list(imgs)
    if not imgs:
        raise ValueError("at least one image is needed to build a reference CDF")
    counts = np.zeros(bins, dtype=np.int64)
    for img in imgs:
        counts += np.bincount(bin_index(img.data.ravel(), bins), minlength=bins)
    cdf = np.cumsum(counts) / counts.sum()
    cdf[-1] = 1.0
    return ReferenceCdf(bins, cdf)


def _inverse_cdf(ref: ReferenceCdf, s: np.ndarray) -> np.ndarray:
    """Generalized inverse of ``ref`` interpolated linearly between bin centers.

    For a probability s the target bin k is the first with cdf[k] >= s; the
    result moves from the center of bin k-1 (at cdf[k-1]) to the center of
    bin k (at cdf[k]). Below bin 0 the lower anchor is intensity 0 at cdf 0.
    """
    bins = ref.bins
    centers = (np.arange(bins) + 0.5) / bins
    k = np.searchsorted(ref.cdf, s, side="left")
    k = np.minimum(k, bins - 1)
    lo_cdf = np.where(k > 0, ref.cdf[np.maximum(k - 1, 0)], 0.0)
    lo_val = np.where(k > 0, centers[np.maximum(k - 1, 0)], 0.0)
    hi_cdf = ref.cdf[k]
    span = hi_cdf - lo_cdf
    frac = np.divide(s - lo_cdf, span, out=np.ones_like(span), where=span > 0)
    frac = np.clip(frac, 0.0, 1.0)
    return lo_val + frac * (centers[k] - lo_val)


def matching_lut(source_cdf: np.ndarray, ref: ReferenceCdf) -> np.ndarray:
    """Per-bin output intensities: inverse(ref) applied to the source CDF."""
    return np.clip(_inverse_cdf(ref, source_cdf), 0.0, 1.0)


def histogram_match(img: GrayImage, ref: ReferenceCdf) -> GrayImage:
    lut = matching_lut(_cdf_of(img.data, ref.bins), ref)
    return GrayImage(lut[bin_index(img.data, ref.bins)])


def percentile_normalize(img: GrayImage | RgbImage, p: float = 99) -> GrayImage | RgbImage:
    """Scale by the p-th percentile of all pixels (channels pooled) and clamp to [0, 1]."""
    if not 0 < p <= 100:
        raise ValueError("percentile must be in (0, 100]")
    q = np.percentile(img.data, p)
    if q <= 0:
        out = np.zeros_like(img.data)
    else:
        with np.errstate(over="ignore"):  # subnormal q: quotients saturate and clamp to 1
            out = np.clip(img.data / q, 0.0, 1.0)
    return type(img)(out)
