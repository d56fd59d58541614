"""Dense-plane numerics: 2-D Fourier transforms, Gaussian blur, pyramid
resampling, and counter-based deterministic randomness.

All operations act on float64/complex128 numpy arrays whose trailing two axes
are (height, width); any leading axes are treated as independent batch
dimensions. Everything here is a pure function of its inputs, so unrestricted
concurrent use is safe.

The forward transform is the unnormalized DFT (DC at index (0, 0)); the
inverse divides by H*W. Power-of-two axes go through an iterative radix-2
butterfly, other sizes fall back to an O(n^2) matrix product per axis.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "RandomStream",
    "fft2",
    "ifft2",
    "gaussian_blur",
    "sigma_for_kernel",
    "downsample2",
    "upsample_bilinear",
    "sample_field",
    "sample_permutation",
]


# ---------------------------------------------------------------------------
# Fourier transforms
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _bit_reversal(n: int) -> np.ndarray:
    """Bit-reversed index permutation for a power-of-two length n."""
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


@lru_cache(maxsize=None)
def _twiddles(half: int, inverse: bool) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    return np.exp(sign * 1j * np.pi * np.arange(half) / half)


@lru_cache(maxsize=None)
def _dft_matrix(n: int, inverse: bool) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    jk = np.outer(np.arange(n), np.arange(n))
    return np.exp(sign * 2j * np.pi * jk / n)


def _transform_last_axis(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Unnormalized DFT along the last axis (batched over leading axes)."""
    n = a.shape[-1]
    if n == 1:
        return a.astype(np.complex128, copy=True)
    if n & (n - 1) == 0:
        x = np.ascontiguousarray(a, dtype=np.complex128)[..., _bit_reversal(n)]
        half = 1
        while half < n:
            x = x.reshape(x.shape[:-1] + (n // (2 * half), 2, half))
            odd = x[..., 1, :] * _twiddles(half, inverse)
            even = x[..., 0, :]
            x = np.concatenate([even + odd, even - odd], axis=-1)
            x = x.reshape(x.shape[:-2] + (n,))
            half *= 2
        return x
    # fall back to the O(n^2) matrix product (the DFT matrix is symmetric)
    return np.asarray(a, dtype=np.complex128) @ _dft_matrix(n, inverse)


def _require_finite(a: np.ndarray, what: str) -> None:
    if not np.isfinite(a).all():
        raise ValueError(f"{what} contains non-finite values")


def _require_2d_dims(a: np.ndarray, what: str) -> None:
    if a.ndim < 2:
        raise ValueError(f"{what} must have at least 2 dimensions, got {a.ndim}")
    if a.shape[-2] < 1 or a.shape[-1] < 1:
        raise ValueError(f"{what} has empty plane axes {a.shape[-2:]}")


def fft2(plane: np.ndarray) -> np.ndarray:
    """Unnormalized forward 2-D DFT of the trailing (H, W) axes.

    The DC coefficient lands at index (0, 0). Real input yields a
    Hermitian-symmetric spectrum.
    """
    plane = np.asarray(plane)
    _require_2d_dims(plane, "fft2 input")
    _require_finite(plane, "fft2 input")
    out = _transform_last_axis(plane, inverse=False)
    out = _transform_last_axis(out.swapaxes(-1, -2), inverse=False)
    return out.swapaxes(-1, -2)


def ifft2(spectrum: np.ndarray) -> tuple[np.ndarray, float]:
    """Normalized inverse 2-D DFT over the trailing (H, W) axes.

    Returns the real part together with the maximum absolute imaginary
    residue, a diagnostic that is ~0 for Hermitian-symmetric spectra.
    """
    spectrum = np.asarray(spectrum)
    _require_2d_dims(spectrum, "ifft2 input")
    _require_finite(spectrum, "ifft2 input")
    h, w = spectrum.shape[-2:]
    out = _transform_last_axis(spectrum, inverse=True)
    out = _transform_last_axis(out.swapaxes(-1, -2), inverse=True)
    out = out.swapaxes(-1, -2) / (h * w)
    residual = float(np.max(np.abs(out.imag))) if out.size else 0.0
    return np.ascontiguousarray(out.real), residual


# ---------------------------------------------------------------------------
# Blur and resampling
# ---------------------------------------------------------------------------

def sigma_for_kernel(kernel_size: int) -> float:
    """Conventional kernel-size-to-sigma rule, monotone in the kernel size."""
    return 0.3 * ((kernel_size - 1) / 2 - 1) + 0.8


@lru_cache(maxsize=None)
def _gaussian_kernel1d(kernel_size: int, sigma: float) -> np.ndarray:
    r = kernel_size // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return k / k.sum()


def _correlate_axis(a: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """1-D correlation along one axis with edge replication at the borders."""
    r = len(kernel) // 2
    moved = np.moveaxis(a, axis, -1)
    n = moved.shape[-1]
    pad = [(0, 0)] * (moved.ndim - 1) + [(r, r)]
    padded = np.pad(moved, pad, mode="edge")
    out = np.zeros_like(moved, dtype=np.float64)
    for t, weight in enumerate(kernel):
        out += weight * padded[..., t : t + n]
    return np.moveaxis(out, -1, axis)


def gaussian_blur(plane: np.ndarray, kernel_size: int, sigma: float) -> np.ndarray:
    """Separable Gaussian convolution over the trailing (H, W) axes.

    The kernel is normalized to sum 1 so constants are preserved exactly;
    borders are handled by edge replication.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be odd and positive, got {kernel_size}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    plane = np.asarray(plane, dtype=np.float64)
    _require_2d_dims(plane, "gaussian_blur input")
    kernel = _gaussian_kernel1d(kernel_size, float(sigma))
    out = _correlate_axis(plane, kernel, axis=-1)
    return _correlate_axis(out, kernel, axis=-2)


def downsample2(plane: np.ndarray) -> np.ndarray:
    """Classic pyramid decimation: keep pixels at even indices.

    Output dimensions are ceil(H/2) x ceil(W/2). Apply after a blur to
    avoid aliasing.
    """
    plane = np.asarray(plane)
    _require_2d_dims(plane, "downsample2 input")
    if plane.shape[-2] < 2 or plane.shape[-1] < 2:
        raise ValueError(f"downsample2 needs both plane axes >= 2, got {plane.shape[-2:]}")
    return plane[..., ::2, ::2].copy()


def _axis_sample(src: int, tgt: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corner-aligned source indices and fractional weights for one axis."""
    if src == 1:
        z = np.zeros(tgt, dtype=np.intp)
        return z, z, np.zeros(tgt)
    if tgt == 1:
        return np.zeros(1, dtype=np.intp), np.zeros(1, dtype=np.intp), np.zeros(1)
    coords = np.arange(tgt) * ((src - 1) / (tgt - 1))
    lo = np.floor(coords).astype(np.intp)
    lo = np.minimum(lo, src - 2)
    return lo, lo + 1, coords - lo


def upsample_bilinear(plane: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Bilinear interpolation to (target_h, target_w) with corner alignment.

    Constants map to constants; a target equal to the source is the identity.
    """
    plane = np.asarray(plane, dtype=np.float64)
    _require_2d_dims(plane, "upsample_bilinear input")
    src_h, src_w = plane.shape[-2:]
    if target_h < src_h or target_w < src_w:
        raise ValueError(
            f"target {(target_h, target_w)} smaller than source {(src_h, src_w)}"
        )
    y0, y1, wy = _axis_sample(src_h, target_h)
    x0, x1, wx = _axis_sample(src_w, target_w)
    rows = np.take(plane, y0, axis=-2) * (1.0 - wy)[:, None] + np.take(
        plane, y1, axis=-2
    ) * wy[:, None]
    return np.take(rows, x0, axis=-1) * (1.0 - wx) + np.take(rows, x1, axis=-1) * wx


# ---------------------------------------------------------------------------
# Deterministic randomness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RandomStream:
    """Immutable handle into a counter-based random field.

    A stream is identified by (master_seed, path); the path is an ordered
    tuple of non-negative integers naming the consumer (image index, copy
    index, iteration, purpose tag, ...). Identical (seed, path) reproduce
    identical samples on every run and under any thread schedule; distinct
    paths give independent streams.
    """

    master_seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        for part in self.path:
            if part < 0:
                raise ValueError(f"path elements must be non-negative, got {part}")

    def child(self, *parts: int) -> "RandomStream":
        return RandomStream(self.master_seed, self.path + tuple(parts))

    def _key(self) -> int:
        # hash of seed||path keys a Philox counter-based generator
        h = hashlib.blake2b(digest_size=16)
        h.update(struct.pack("<q", self.master_seed))
        for part in self.path:
            h.update(struct.pack("<Q", part))
        return int.from_bytes(h.digest(), "little")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self._key()))


def sample_field(stream: RandomStream, dist: tuple, h: int, w: int) -> np.ndarray:
    """Deterministic (h, w) field of i.i.d. samples from the given stream.

    dist is ("normal", mean, std) or ("uniform", lo, hi).
    """
    if h < 1 or w < 1:
        raise ValueError(f"field dimensions must be positive, got {(h, w)}")
    kind = dist[0]
    gen = stream.generator()
    if kind == "normal":
        _, mean, std = dist
        if std < 0:
            raise ValueError(f"normal std must be >= 0, got {std}")
        if std == 0:
            return np.full((h, w), float(mean))
        return gen.normal(float(mean), float(std), size=(h, w))
    if kind == "uniform":
        _, lo, hi = dist
        if lo > hi:
            raise ValueError(f"uniform bounds must satisfy lo <= hi, got {(lo, hi)}")
        if lo == hi:
            return np.full((h, w), float(lo))
        return gen.uniform(float(lo), float(hi), size=(h, w))
    raise ValueError(f"unknown distribution kind {kind!r}")


def sample_permutation(stream: RandomStream, n: int) -> np.ndarray:
    """Deterministic permutation of range(n) drawn from the stream."""
    return stream.generator().permutation(n)
