"""Tests for spectral augmentation: weight grids, masks, and the augment map."""

import numpy as np
import pytest

from fsalab.ham import (
    HamParams,
    augment,
    build_frequency_weight,
    sample_spectral_mask,
)
from fsalab.numerics import RandomStream, fft2

EPS = 16 / 255


def random_image(seed, h=16, w=16):
    return np.random.default_rng(seed).uniform(0, 1, size=(h, w, 3))


class TestFrequencyWeight:
    def test_literal_dc_is_zero(self):
        for dims in [(3, 3), (8, 8), (5, 9)]:
            assert build_frequency_weight(*dims, mode="literal").values[0, 0] == 0.0

    def test_literal_corner_value(self):
        fw = build_frequency_weight(3, 3, mode="literal")
        assert fw.values[2, 2] == pytest.approx(1.0)
        assert fw.values[1, 2] == pytest.approx(3 / 4)

    def test_symmetric_hand_values_4x4(self):
        fw = build_frequency_weight(4, 4, mode="symmetric").values
        assert fw[0, 0] == 0.0
        assert fw[2, 2] == pytest.approx(1.0)  # Nyquist corner
        assert fw[1, 0] == pytest.approx(1 / 4)
        assert fw[3, 0] == pytest.approx(1 / 4)

    def test_symmetric_invariant_under_frequency_negation(self):
        fw = build_frequency_weight(6, 8, mode="symmetric").values
        h, w = fw.shape
        mirrored = fw[(h - np.arange(h)) % h][:, (w - np.arange(w)) % w]
        assert np.array_equal(fw, mirrored)

    def test_values_within_unit_interval(self):
        for mode in ("literal", "symmetric"):
            fw = build_frequency_weight(7, 5, mode=mode).values
            assert fw.min() >= 0.0 and fw.max() <= 1.0

    def test_rejects_tiny_dims(self):
        with pytest.raises(ValueError):
            build_frequency_weight(1, 4)


class TestSpectralMask:
    def test_zero_rho_gives_all_ones(self):
        params = HamParams(rho=0.0)
        fw = build_frequency_weight(8, 8)
        mask = sample_spectral_mask(RandomStream(0), 8, 8, params, fw)
        assert np.array_equal(mask, np.ones((8, 8)))

    def test_support_bound(self):
        params = HamParams(rho=0.7)
        fw = build_frequency_weight(8, 8)
        for seed in range(20):
            mask = sample_spectral_mask(RandomStream(seed), 8, 8, params, fw)
            assert mask.min() >= 1 - 0.7 - 1e-12
            assert mask.max() <= 1 + 0.7 + 1e-12

    def test_per_bin_envelope_when_weight_modulated(self):
        params = HamParams(rho=0.7, rho_modulated_by_weight=True)
        fw = build_frequency_weight(8, 8)
        for seed in range(50):
            mask = sample_spectral_mask(RandomStream(seed), 8, 8, params, fw)
            lo = 1 - 0.7 * fw.values - 1e-12
            hi = 1 + 0.7 * fw.values + 1e-12
            assert np.all(mask >= lo) and np.all(mask <= hi)

    def test_mirror_consistency_exhaustive_8x8(self):
        params = HamParams(rho=0.5)
        fw = build_frequency_weight(8, 8)
        mask = sample_spectral_mask(RandomStream(11), 8, 8, params, fw)
        for a in range(8):
            for b in range(8):
                assert mask[a, b] == mask[(8 - a) % 8, (8 - b) % 8]

    def test_dimension_mismatch_rejected(self):
        fw = build_frequency_weight(4, 4)
        with pytest.raises(ValueError, match="match"):
            sample_spectral_mask(RandomStream(0), 8, 8, HamParams(), fw)


class TestAugment:
    def test_degenerate_params_are_identity(self):
        params = HamParams(sigma=0.0, rho=0.0)
        for seed in range(5):
            x = random_image(seed)
            out = augment(x, params, EPS, RandomStream(seed))
            assert np.max(np.abs(out - x)) < 1e-6

    def test_symmetric_mode_residual_tiny(self):
        params = HamParams(sigma=2.0, rho=0.7, weight_mode="symmetric")
        for seed in range(10):
            x = random_image(seed)
            _, residual = augment(x, params, EPS, RandomStream(seed), with_residual=True)
            assert residual < 1e-6

    def test_literal_mode_residual_nonzero(self):
        # the raw-index ramp breaks Hermitian symmetry, so the discarded
        # imaginary part is genuinely nonzero
        params = HamParams(sigma=2.0, rho=0.7, weight_mode="literal")
        x = random_image(0)
        _, residual = augment(x, params, EPS, RandomStream(0), with_residual=True)
        assert residual > 1e-9

    def test_deterministic(self):
        params = HamParams()
        x = random_image(1)
        a = augment(x, params, EPS, RandomStream(9, (3, 4)))
        b = augment(x, params, EPS, RandomStream(9, (3, 4)))
        assert np.array_equal(a, b)

    def test_different_streams_differ(self):
        params = HamParams()
        x = random_image(1)
        a = augment(x, params, EPS, RandomStream(9, (0,)))
        b = augment(x, params, EPS, RandomStream(9, (1,)))
        assert not np.array_equal(a, b)

    def test_output_within_safety_clamp(self):
        params = HamParams(sigma=4.0, rho=0.9)
        x = random_image(2)
        out = augment(x, params, EPS, RandomStream(5))
        assert out.min() >= -0.5 and out.max() <= 1.5

    def test_noise_concentrates_at_high_frequencies(self):
        # Monte-Carlo over streams: the noise actually added to the image
        # carries more energy per bin at Nyquist than in the lowest band.
        params = HamParams(sigma=2.0, rho=0.0, weight_mode="symmetric")
        x = random_image(3, 32, 32)
        base = fft2(x[:, :, 0])
        nyq_energy = 0.0
        low_energy = 0.0
        for seed in range(100):
            out = augment(x, params, EPS, RandomStream(seed, (7,)))
            added = fft2(out[:, :, 0]) - base
            power = np.abs(added) ** 2
            nyq_energy += power[16, 16]
            low_energy += (power[0, 1] + power[1, 0] + power[1, 1]) / 3
        assert nyq_energy > low_energy

    def test_spectral_ratio_envelope(self):
        # |D_a| / |D_x + D_xi| equals the mask, which must respect the
        # per-bin modulation envelope.
        params = HamParams(sigma=1.0, rho=0.6, rho_modulated_by_weight=True)
        fw = build_frequency_weight(16, 16).values
        x = random_image(4)
        from fsalab.ham import _MASK_TAG, sample_spectral_mask as _ssm  # noqa: F401

        for seed in range(25):
            stream = RandomStream(seed, (2,))
            mask = sample_spectral_mask(
                stream.child(1, 0), 16, 16, params, build_frequency_weight(16, 16)
            )
            assert np.all(mask >= 1 - 0.6 * fw - 1e-12)
            assert np.all(mask <= 1 + 0.6 * fw + 1e-12)

    def test_rejects_bad_shapes_and_params(self):
        with pytest.raises(ValueError):
            augment(np.zeros((8, 8)), HamParams(), EPS, RandomStream(0))
        with pytest.raises(ValueError):
            HamParams(rho=1.0).validate()
        with pytest.raises(ValueError):
            HamParams(sigma=-1.0).validate()
