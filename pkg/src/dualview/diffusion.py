"""Noise schedule, closed-form forward process and ancestral sampling.

Steps are 1-based (t = 1..T); schedule arrays are stored 0-based, so the
value for step t lives at index t - 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NoiseSchedule",
    "GaussianSource",
    "linear_schedule",
    "forward_sample",
    "ancestral_step",
    "generate",
    "generate_batch",
]

SIGMA_KINDS = ("beta", "posterior", "zero")


class GaussianSource:
    """Seeded standard-normal generator.

    Uniforms come from numpy's PCG64 bit generator (``Generator.random``,
    53-bit doubles in [0, 1)). Normals use the Box-Muller transform on
    consecutive uniform pairs (u1, u2)::

        r  = sqrt(-2 * log(1 - u1))
        z0 = r * cos(2 * pi * u2)
        z1 = r * sin(2 * pi * u2)

    and are emitted in the order z0, z1, z0', z1', ... ; an odd request
    discards the final z1.
    """

    def __init__(self, seed):
        self.rng = np.random.Generator(np.random.PCG64(seed))

    def normal(self, shape) -> np.ndarray:
        shape = tuple(shape) if np.iterable(shape) else (int(shape),)
        n = math.prod(shape)
        pairs = (n + 1) // 2
        u = self.rng.random((pairs, 2))
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return z.ravel()[:n].reshape(shape)

    def integers(self, low: int, high: int, size) -> np.ndarray:
        return self.rng.integers(low, high, size=size, endpoint=True)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    sigma_kind: str = "beta"

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty 1-D array")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta_t must lie in (0, 1)")
        if self.sigma_kind not in SIGMA_KINDS:
            raise ValueError(f"sigma_kind must be one of {SIGMA_KINDS}")
        object.__setattr__(self, "beta", beta)
        alpha = 1.0 - beta
        # sequential product so alpha_bar[t] == alpha[t] * alpha_bar[t-1] holds bitwise
        alpha_bar = np.cumprod(alpha)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        object.__setattr__(self, "alpha_bar_prev", prev)
        if self.sigma_kind == "beta":
            sigma = np.sqrt(beta)
        elif self.sigma_kind == "posterior":
            sigma = np.sqrt(beta * (1.0 - prev) / (1.0 - alpha_bar))
        else:
            sigma = np.zeros_like(beta)
        object.__setattr__(self, "sigma", sigma)

    @property
    def T(self) -> int:
        return self.beta.size

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside 1..{self.T}")

    def with_sigma(self, kind: str) -> "NoiseSchedule":
        return NoiseSchedule(self.beta, kind)


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02, sigma_kind: str = "beta") -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be at least 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T), sigma_kind)


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what} shape {b.shape} does not match {a.shape}")


def forward_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps.

    ``t`` may be a scalar step or, for a batch of shape (N, ...), an array of
    N steps.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    _same_shape(x0, eps, "eps")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ValueError(f"step outside 1..{sched.T}")
    ab = sched.alpha_bar[t - 1]
    if t.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ancestral_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray, z: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    sched.check_step(t)
    _same_shape(x_t, eps_hat, "eps_hat")
    _same_shape(x_t, z, "z")
    i = t - 1
    coef = sched.beta[i] / math.sqrt(1.0 - sched.alpha_bar[i])
    mean = (x_t - coef * eps_hat) / math.sqrt(sched.alpha[i])
    return mean + sched.sigma[i] * z


Denoiser = Callable[[np.ndarray, int], np.ndarray]


def generate_batch(denoiser: Denoiser, sched: NoiseSchedule, shape: Sequence[int], seeds: Sequence[int]) -> np.ndarray:
    """Run the reverse chain for len(seeds) images of ``shape`` at once.

    Every image draws its starting noise and per-step noise from its own
    seeded source, so an image depends only on its seed, not on its batch.
    The denoiser receives the stacked (N, *shape) array.
    """
    sources = [GaussianSource(s) for s in seeds]
    x = np.stack([src.normal(shape) for src in sources])
    for t in range(sched.T, 0, -1):
        eps_hat = np.asarray(denoiser(x, t))
        if eps_hat.shape != x.shape:
            raise ValueError(f"denoiser returned shape {eps_hat.shape}, expected {x.shape}")
        if t > 1:
            z = np.stack([src.normal(shape) for src in sources])
        else:
            z = np.zeros_like(x)
        x = ancestral_step(x, t, eps_hat.astype(x.dtype, copy=False), z, sched)
    return np.clip(x, 0.0, 1.0)


def generate(denoiser: Denoiser, sched: NoiseSchedule, shape: Sequence[int], seed: int) -> np.ndarray:
    """Sample one image: x_T ~ N(0, I), ancestral steps T..1, clamp at the end."""
    single = lambda x, t: np.asarray(denoiser(x[0], t))[None]
    return generate_batch(single, sched, shape, [seed])[0]
