"""Hierarchical gradient fusion over a Gaussian pyramid.

A gradient tensor is decomposed into progressively blurred-and-decimated
levels, then the levels are upsampled back to full resolution and combined
with exponentially decaying weights that favour the coarsest level. The
whole map is linear, so it commutes with gradient averaging.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import downsample2, gaussian_blur, sigma_for_kernel, upsample_bilinear

__all__ = ["HfmParams", "GradientPyramid", "build_pyramid", "fusion_weights", "fuse", "hfm_apply"]


@dataclass(frozen=True)
class HfmParams:
    """Pyramid fusion knobs.

    levels is the pyramid depth n; beta in (0, 1) is the decay base of the
    fusion weights (smaller beta leans harder on the coarsest level);
    kernel_size is the blur kernel used between levels. undersize_policy
    decides what happens when the input is too small for the requested
    depth: "error" rejects it, "auto_clamp" silently builds the deepest
    feasible pyramid.
    """

    levels: int = 5
    beta: float = 0.8
    kernel_size: int = 3
    undersize_policy: str = "error"

    def validate(self) -> None:
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0,1), got {self.beta}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.undersize_policy not in ("error", "auto_clamp"):
            raise ValueError(f"unknown undersize_policy {self.undersize_policy!r}")


@dataclass(frozen=True)
class GradientPyramid:
    """Blur-and-decimate levels of one gradient tensor, level 0 verbatim."""

    levels: tuple
    kernel_size: int
    requested_levels: int

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def clamped(self) -> bool:
        return self.depth < self.requested_levels


def _feasible_levels(h: int, w: int, requested: int) -> int:
    # depth n is feasible iff min(h, w) >= 2**(n-1)
    return min(requested, min(h, w).bit_length())


def build_pyramid(g: np.ndarray, params: HfmParams) -> GradientPyramid:
    """Gaussian pyramid of an (H, W, C) gradient tensor.

    Level 0 is the input verbatim; each deeper level blurs its parent with
    the configured kernel and keeps even-indexed pixels, per channel.
    """
    params.validate()
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 3:
        raise ValueError(f"expected an (H, W, C) gradient tensor, got shape {g.shape}")
    h, w, _ = g.shape
    depth = _feasible_levels(h, w, params.levels)
    if depth < params.levels and params.undersize_policy == "error":
        raise ValueError(
            f"input {h}x{w} supports only {depth} pyramid levels, "
            f"{params.levels} requested (use auto_clamp to accept fewer)"
        )
    sigma = sigma_for_kernel(params.kernel_size)
    levels = [g.copy()]
    current = np.moveaxis(g, -1, 0)  # channel-first for the plane ops
    for _ in range(depth - 1):
        current = downsample2(gaussian_blur(current, params.kernel_size, sigma))
        levels.append(np.moveaxis(current, 0, -1))
    return GradientPyramid(
        levels=tuple(levels),
        kernel_size=params.kernel_size,
        requested_levels=params.levels,
    )


def fusion_weights(params: HfmParams) -> np.ndarray:
    """Normalized level weights w_i proportional to beta^(n-i).

    With beta in (0, 1) the weights increase strictly with depth, so the
    coarsest level contributes most.
    """
    params.validate()
    n = params.levels
    raw = params.beta ** (n - np.arange(n, dtype=np.float64))
    return raw / raw.sum()


def fuse(pyr: GradientPyramid, weights: np.ndarray) -> np.ndarray:
    """Weighted sum of pyramid levels, each upsampled to level-0 size."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != pyr.depth:
        raise ValueError(f"{len(weights)} weights for a {pyr.depth}-level pyramid")
    h, w, _ = pyr.levels[0].shape
    out = np.zeros_like(pyr.levels[0])
    for level, weight in zip(pyr.levels, weights):
        planes = np.moveaxis(level, -1, 0)
        out += weight * np.moveaxis(upsample_bilinear(planes, h, w), 0, -1)
    return out


def hfm_apply(g: np.ndarray, params: HfmParams) -> np.ndarray:
    """Pyramid-decompose a gradient tensor and re-fuse it: the module's
    single public entry point. Depth 1 is the identity."""
    pyr = build_pyramid(g, params)
    if pyr.depth == 1:
        return pyr.levels[0]
    weights = fusion_weights(params)
    if pyr.clamped:
        clamped = HfmParams(
            levels=pyr.depth,
            beta=params.beta,
            kernel_size=params.kernel_size,
            undersize_policy=params.undersize_policy,
        )
        weights = fusion_weights(clamped)
    return fuse(pyr, weights)
