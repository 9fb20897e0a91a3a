"""Cross-view consistency: Otsu breast masks, IoU and Dice."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .encoding import DualViewPair
from .imageio import GrayImage
from .preprocess import bin_index

__all__ = [
    "DegenerateHistogramError",
    "EmptyMaskWarning",
    "MetricSample",
    "otsu_threshold",
    "extract_mask",
    "iou",
    "dice",
    "pair_consistency",
]

OTSU_BINS = 256


class DegenerateHistogramError(ValueError):
    """All pixels fall into one histogram bin; no threshold separates them."""


class EmptyMaskWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MetricSample:
    iou: float
    dsc: float
    source_id: str = ""
    warnings: tuple[str, ...] = ()


def otsu_threshold(img: GrayImage) -> float:
    """Upper edge (k+1)/256 of the bin k that maximizes between-class variance.

    Class 0 is bins 0..k. The score w0*w1*(mu0 - mu1)^2, in bin-index units,
    equals (S0*n1 - S1*n0)^2 / (n^2 * n0 * n1) with integer counts n and
    index sums S, so candidates are compared exactly in integer arithmetic.
    Ties go to the smaller threshold.
    """
    counts = np.bincount(bin_index(img.data.ravel(), OTSU_BINS), minlength=OTSU_BINS)
    if np.count_nonzero(counts) < 2:
        raise DegenerateHistogramError("image occupies a single histogram bin")
    n = int(counts.sum())
    total = int((counts * np.arange(OTSU_BINS)).sum())
    n0_all = np.cumsum(counts).tolist()
    s0_all = np.cumsum(counts * np.arange(OTSU_BINS)).tolist()
    best_k, best_num, best_den = -1, 0, 1
    for k in range(OTSU_BINS - 1):
        n0, s0 = n0_all[k], s0_all[k]
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        num = (s0 * n1 - (total - s0) * n0) ** 2
        den = n0 * n1
        if best_k < 0 or num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    return (best_k + 1) / OTSU_BINS


def extract_mask(img: GrayImage, keep_largest: bool = False) -> np.ndarray:
    """Foreground = pixel > Otsu threshold, optionally reduced to its largest
    4-connected component (first in scan order on ties)."""
    mask = img.data > otsu_threshold(img)
    if keep_largest and mask.any():
        labels, count = ndimage.label(mask)
        if count > 1:
            sizes = np.bincount(labels.ravel())[1:]
            mask = labels == (int(np.argmax(sizes)) + 1)
    return mask


def _counts(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(a & b))
    return inter, int(np.count_nonzero(a)), int(np.count_nonzero(b))


def iou(a: np.ndarray, b: np.ndarray) -> float:
    inter, na, nb = _counts(a, b)
    union = na + nb - inter
    if union == 0:
        warnings.warn("both masks are empty; IoU set to 0", EmptyMaskWarning, stacklevel=2)
        return 0.0
    return inter / union


def dice(a: np.ndarray, b: np.ndarray) -> float:
    inter, na, nb = _counts(a, b)
    if na + nb == 0:
        warnings.warn("both masks are empty; Dice set to 0", EmptyMaskWarning, stacklevel=2)
        return 0.0
    return 2 * inter / (na + nb)


def pair_consistency(pair: DualViewPair, keep_largest: bool = False, source_id: str = "") -> MetricSample:
    cc = extract_mask(pair.cc, keep_largest)
    mlo = extract_mask(pair.mlo, keep_largest)
    flags = []
    if not cc.any() and not mlo.any():
        flags.append("empty_union")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyMaskWarning)
        return MetricSample(iou(cc, mlo), dice(cc, mlo), source_id, tuple(flags))
