"""Dual-view mammography synthesis with a small denoising diffusion model.

Two grayscale views (CC, MLO) are packed into one RGB image, a diffusion
model learns the joint distribution, and generated pairs are scored for
cross-view shape consistency against real (phantom) pairs.
"""

__version__ = "0.1.0"
