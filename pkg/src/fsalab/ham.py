"""High-frequency spectral augmentation.

Each channel of an image is taken to the frequency domain, mixed with
frequency-weighted Gaussian noise, modulated by a random spectral mask, and
reconstructed. The frequency weight grows from 0 at DC toward 1 at the
highest frequencies, so the injected noise predominantly excites the
high-frequency bins that fragile classifier features live on.

Two weight conventions are provided:

* ``symmetric`` (default): the weight depends on wrapped distance from DC
  and is applied to the noise *spectrum*. It is invariant under frequency
  negation, so real images stay real after reconstruction.
* ``literal``: the raw-index ramp ``(a + b) / (H + W - 2)`` applied to the
  noise in the *spatial* domain. Kept for comparison; it breaks Hermitian
  symmetry, so reconstruction discards a genuine imaginary residue.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RandomStream, fft2, ifft2, sample_field

__all__ = [
    "FrequencyWeight",
    "HamParams",
    "build_frequency_weight",
    "sample_spectral_mask",
    "augment",
]

# purpose tags for stream paths
_NOISE_TAG = 0
_MASK_TAG = 1

# wide safety clamp: bounds pathological excursions without flattening the
# gradients that a [0,1] clamp would zero at saturated pixels
CLAMP_LO = -0.5
CLAMP_HI = 1.5


@dataclass(frozen=True)
class FrequencyWeight:
    """Per-bin weight grid in [0, 1] with its construction mode."""

    values: np.ndarray
    mode: str

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class HamParams:
    """Spectral augmentation knobs.

    sigma is the noise standard deviation in multiples of the attack budget
    eps; rho bounds the random per-bin modulation away from 1.
    """

    sigma: float = 2.0
    rho: float = 0.7
    weight_mode: str = "symmetric"
    rho_modulated_by_weight: bool = True

    def validate(self) -> None:
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if self.weight_mode not in ("symmetric", "literal"):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")


def build_frequency_weight(h: int, w: int, mode: str = "symmetric") -> FrequencyWeight:
    """High-frequency weight grid: 0 at DC, 1 at the farthest bin.

    literal mode is the plain index ramp (a + b) / (h + w - 2); symmetric
    mode uses wrapped distance from DC, min(a, h - a), normalized by the
    Nyquist distance, which keeps the grid invariant under frequency
    negation.
    """
    if h < 2 or w < 2:
        raise ValueError(f"weight grid needs dims >= 2, got {(h, w)}")
    if mode == "literal":
        grid = np.add.outer(np.arange(h), np.arange(w)) / (h + w - 2)
    elif mode == "symmetric":
        ra = np.minimum(np.arange(h), h - np.arange(h))
        rb = np.minimum(np.arange(w), w - np.arange(w))
        grid = np.add.outer(ra, rb) / (h // 2 + w // 2)
    else:
        raise ValueError(f"unknown weight mode {mode!r}")
    return FrequencyWeight(values=grid.astype(np.float64), mode=mode)


def _mirror_bins(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Canonical representative of each (bin, negated-bin) pair."""
    a = np.repeat(np.arange(h)[:, None], w, axis=1)
    b = np.repeat(np.arange(w)[None, :], h, axis=0)
    a2 = (h - a) % h
    b2 = (w - b) % w
    take_partner = (a2 < a) | ((a2 == a) & (b2 < b))
    return np.where(take_partner, a2, a), np.where(take_partner, b2, b)


def sample_spectral_mask(
    stream: RandomStream,
    h: int,
    w: int,
    params: HamParams,
    fw: FrequencyWeight,
) -> np.ndarray:
    """Random per-bin modulation mask.

    Bin (a, b) is uniform on [1 - rho*fw, 1 + rho*fw] when modulation by the
    frequency weight is enabled, else uniform on [1 - rho, 1 + rho]. The
    underlying draw samples one half-plane and mirrors it onto the other, so
    with the symmetric weight grid mask[a, b] == mask[-a mod h, -b mod w]
    and reconstruction stays real. The literal weight grid is not mirror
    symmetric, so there the mask genuinely breaks Hermitian symmetry.
    """
    if fw.values.shape != (h, w):
        raise ValueError(f"weight grid {fw.values.shape} does not match {(h, w)}")
    params.validate()
    u = sample_field(stream, ("uniform", -1.0, 1.0), h, w)
    ca, cb = _mirror_bins(h, w)
    u = u[ca, cb]
    if params.rho_modulated_by_weight:
        return 1.0 + params.rho * fw.values * u
    return 1.0 + params.rho * u


def augment(
    x: np.ndarray,
    params: HamParams,
    eps: float,
    stream: RandomStream,
    with_residual: bool = False,
):
    """Spectrally augmented copy of an (H, W, C) image.

    Per channel: the image spectrum is summed with the weighted spectrum of
    Gaussian noise of std sigma*eps, the sum is modulated by a random mask,
    and the result is transformed back. The output keeps the real part (the
    max imaginary residue is available as a diagnostic) and is clamped to a
    wide safety range rather than [0, 1].
    """
    params.validate()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected an (H, W, C) image, got shape {x.shape}")
    h, w, c = x.shape
    fw = build_frequency_weight(h, w, params.weight_mode)
    noise_std = params.sigma * eps

    out = np.empty_like(x)
    worst_residual = 0.0
    for ch in range(c):
        spectrum = fft2(x[:, :, ch])
        xi = sample_field(stream.child(_NOISE_TAG, ch), ("normal", 0.0, noise_std), h, w)
        if params.weight_mode == "symmetric":
            noise_spectrum = fft2(xi) * fw.values
        else:
            noise_spectrum = fft2(xi * fw.values)
        mask = sample_spectral_mask(stream.child(_MASK_TAG, ch), h, w, params, fw)
        recon, residual = ifft2((spectrum + noise_spectrum) * mask)
        if not np.isfinite(recon).all():
            raise ValueError("augmentation produced non-finite values")
        out[:, :, ch] = recon
        worst_residual = max(worst_residual, residual)

    np.clip(out, CLAMP_LO, CLAMP_HI, out=out)
    if with_residual:
        return out, worst_residual
    return out
