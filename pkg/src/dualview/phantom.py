"""Deterministic synthetic dual-view breast phantoms.

Both views of a pair derive from one latent breast scale:

* CC: half-ellipse anchored at the chest-wall (left) edge, centred
  vertically, semi-axes (0.85, 0.42) * scale * size.
* MLO: the same area re-shaped by an aspect factor k (semi-axes a*k, b/k),
  rotated downward, plus a bright pectoral triangle in the upper-left
  corner whose free edge makes ``mlo_pectoral_angle`` with the chest wall.

An ellipse centred on the image edge is cut exactly in half by it, so the
two half-ellipses share their area; only the pectoral wedge and border
clipping move the MLO tissue area away from the CC one.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoding import DualViewPair
from .imageio import GrayImage, write_pgm

__all__ = [
    "PhantomSpec",
    "SpecRanges",
    "generate_pair",
    "generate_dataset",
    "draw_specs",
    "cc_indicator",
    "mlo_indicator",
    "load_manifest",
]

CC_SEMI_AXES = (0.85, 0.42)
TISSUE_BASE = 0.4
TISSUE_GAIN = 0.45


@dataclass(frozen=True)
class PhantomSpec:
    breast_scale: float = 0.8
    density: float = 0.5
    mlo_pectoral_angle: float = 25.0
    noise_sigma: float = 0.0
    artifact_rate: float = 0.0
    image_size: int = 64

    def __post_init__(self):
        if not 0 < self.breast_scale <= 1:
            raise ValueError("breast_scale must lie in (0, 1]")
        if not 0 <= self.density <= 1:
            raise ValueError("density must lie in [0, 1]")
        if not 10 <= self.mlo_pectoral_angle <= 45:
            raise ValueError("mlo_pectoral_angle must lie in [10, 45] degrees")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 <= self.artifact_rate <= 1:
            raise ValueError("artifact_rate must lie in [0, 1]")
        if self.image_size < 4:
            raise ValueError("image_size must be at least 4")


@dataclass(frozen=True)
class _Latent:
    aspect: float
    tilt_deg: float
    artifact: tuple[int, int, int] | None  # (row, length, thickness)


def _draw_latent(spec: PhantomSpec, rng: np.random.Generator) -> _Latent:
    aspect = rng.uniform(0.9, 1.1)
    tilt = rng.uniform(10.0, 25.0)
    artifact = None
    if rng.random() < spec.artifact_rate:
        s = spec.image_size
        row = int(rng.integers(0, s - 1))
        length = int(rng.integers(s // 4, s))
        artifact = (row, length, max(1, s // 32))
    return _Latent(aspect, tilt, artifact)


def _grid(size: int):
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c)  # x (columns), y (rows)


def _ellipse_radius(spec: PhantomSpec, aspect: float, tilt_deg: float, centre_y: float):
    """Normalized elliptical radius (1 on the boundary) at every pixel centre."""
    s = spec.image_size
    x, y = _grid(s)
    a = CC_SEMI_AXES[0] * spec.breast_scale * s * aspect
    b = CC_SEMI_AXES[1] * spec.breast_scale * s / aspect
    phi = math.radians(tilt_deg)
    dx, dy = x, y - centre_y * s
    u = dx * math.cos(phi) + dy * math.sin(phi)
    v = -dx * math.sin(phi) + dy * math.cos(phi)
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)


def _pectoral(spec: PhantomSpec) -> np.ndarray:
    s = spec.image_size
    x, y = _grid(s)
    height = 0.35 * spec.breast_scale * s
    width = height * math.tan(math.radians(spec.mlo_pectoral_angle))
    return x / width + y / height < 1.0


def cc_indicator(spec: PhantomSpec) -> np.ndarray:
    """Analytic tissue mask of the CC view (pixel centres inside the ellipse)."""
    return _ellipse_radius(spec, 1.0, 0.0, 0.5) < 1.0


def mlo_indicator(spec: PhantomSpec, seed: int) -> np.ndarray:
    lat = _draw_latent(spec, np.random.default_rng(seed))
    return (_ellipse_radius(spec, lat.aspect, lat.tilt_deg, 0.45) < 1.0) | _pectoral(spec)


def _tissue(rho: np.ndarray, density: float) -> np.ndarray:
    inside = rho < 1.0
    level = TISSUE_BASE + TISSUE_GAIN * density * (1.0 - np.minimum(rho, 1.0) ** 2)
    return np.where(inside, level, 0.0)


def generate_pair(spec: PhantomSpec, seed: int) -> DualViewPair:
    rng = np.random.default_rng(seed)
    lat = _draw_latent(spec, rng)
    cc = _tissue(_ellipse_radius(spec, 1.0, 0.0, 0.5), spec.density)
    mlo = _tissue(_ellipse_radius(spec, lat.aspect, lat.tilt_deg, 0.45), spec.density)
    mlo = np.where(_pectoral(spec), 0.75 + 0.2 * spec.density, mlo)
    if lat.artifact is not None:
        row, length, thick = lat.artifact
        for view in (cc, mlo):
            view[row:row + thick, :length] = 1.0
    if spec.noise_sigma > 0:
        cc = cc + rng.normal(0.0, spec.noise_sigma, cc.shape)
        mlo = mlo + rng.normal(0.0, spec.noise_sigma, mlo.shape)
    return DualViewPair(GrayImage(np.clip(cc, 0.0, 1.0)), GrayImage(np.clip(mlo, 0.0, 1.0)))


@dataclass(frozen=True)
class SpecRanges:
    """Uniform ranges from which per-pair phantom specs are drawn."""

    breast_scale: tuple[float, float] = (0.55, 1.0)
    density: tuple[float, float] = (0.1, 0.9)
    mlo_pectoral_angle: tuple[float, float] = (10.0, 45.0)
    noise_sigma: tuple[float, float] = (0.0, 0.04)
    artifact_rate: float = 0.06
    image_size: int = 64

    def draw(self, rng: np.random.Generator) -> PhantomSpec:
        return PhantomSpec(
            breast_scale=float(rng.uniform(*self.breast_scale)),
            density=float(rng.uniform(*self.density)),
            mlo_pectoral_angle=float(rng.uniform(*self.mlo_pectoral_angle)),
            noise_sigma=float(rng.uniform(*self.noise_sigma)),
            artifact_rate=self.artifact_rate,
            image_size=self.image_size,
        )


def draw_specs(n: int, ranges: SpecRanges, seed: int):
    """Per-pair (spec, seed) list, a pure function of (n, ranges, seed)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        spec = ranges.draw(rng)
        out.append((spec, int(rng.integers(0, 2**31 - 1))))
    return out


def generate_dataset(n: int, ranges: SpecRanges, seed: int, out_dir, depth: int = 16) -> dict:
    """Write n pairs as PGM files plus ``manifest.json``; returns the manifest."""
    if n < 1:
        raise ValueError("n must be at least 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (spec, pair_seed) in enumerate(draw_specs(n, ranges, seed)):
        pair = generate_pair(spec, pair_seed)
        pid = f"pair_{i:05d}"
        write_pgm(pair.cc, out / f"{pid}_cc.pgm", depth)
        write_pgm(pair.mlo, out / f"{pid}_mlo.pgm", depth)
        entries.append({
            "id": pid,
            "seed": pair_seed,
            "laterality": "R",
            "spec": dataclasses.asdict(spec),
            "cc": f"{pid}_cc.pgm",
            "mlo": f"{pid}_mlo.pgm",
        })
    manifest = {
        "kind": "phantom-dataset",
        "version": 1,
        "n": n,
        "seed": seed,
        "ranges": dataclasses.asdict(ranges),
        "pairs": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(dataset_dir) -> dict:
    return json.loads((Path(dataset_dir) / "manifest.json").read_text())
