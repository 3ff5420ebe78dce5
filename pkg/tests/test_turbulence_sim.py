import itertools
import tempfile
import unittest
from pathlib import Path

import numpy as np

from src.metrics import psnr
from src.scenes import bundled_scenes, ripple_texture
from src.turbulence_sim import (
    PSF,
    DistortionConfig,
    SimulationError,
    add_noise,
    blur,
    delta_psf,
    frame_average,
    generate_psf_bank,
    load_psf_file,
    resize_psf,
    save_psf_file,
    simulate_frame,
    simulate_sequence,
    spatially_variant_blur,
)


def make_config(**overrides) -> DistortionConfig:
    values = dict(psf_bank=tuple(generate_psf_bank(3, 7, 1)), tile_grid=(2, 2), scale_range=(0.5, 1.5), noise_sigma=0.0, blend_margin=4, seed=3)
    values.update(overrides)
    return DistortionConfig(**values)


def asymmetric_psf() -> PSF:
    return PSF.normalized(np.array([[0.0, 1.0, 0.0], [2.0, 3.0, 0.0], [0.0, 0.0, 4.0]]))


class PSFTests(unittest.TestCase):
    def test_bank_kernels_are_valid(self) -> None:
        bank = generate_psf_bank(9, 15, 0)
        self.assertEqual(len(bank), 9)
        for psf in bank:
            self.assertEqual(psf.size, 15)
            self.assertGreaterEqual(psf.kernel.min(), 0.0)
            self.assertAlmostEqual(float(psf.kernel.sum()), 1.0, delta=1e-9)

    def test_bank_is_seeded(self) -> None:
        a = generate_psf_bank(2, 9, 5)
        b = generate_psf_bank(2, 9, 5)
        c = generate_psf_bank(2, 9, 6)
        np.testing.assert_array_equal(a[0].kernel, b[0].kernel)
        self.assertFalse(np.array_equal(a[0].kernel, c[0].kernel))

    def test_bank_centroids_sit_on_centre_pixel(self) -> None:
        for seed in range(4):
            for psf in generate_psf_bank(9, 15, seed):
                np.testing.assert_allclose(psf.centroid, 0.0, atol=1e-9)

    def test_resize_keeps_bank_centroids_centred(self) -> None:
        for psf in generate_psf_bank(3, 15, 1):
            for scale in (0.5, 0.7, 1.3, 1.5, 2.0):
                resized = resize_psf(psf, scale)
                np.testing.assert_allclose(resized.centroid, 0.0, atol=1e-9)
                self.assertGreaterEqual(resized.kernel.min(), 0.0)

    def test_bank_kernels_pairwise_distinct(self) -> None:
        bank = generate_psf_bank(9, 15)
        for a, b in itertools.combinations(bank, 2):
            self.assertGreater(float(np.linalg.norm(a.kernel - b.kernel)), 0.0)

    def test_invalid_kernels(self) -> None:
        with self.assertRaises(SimulationError):
            PSF(np.full((2, 2), 0.25))
        with self.assertRaises(SimulationError):
            PSF(np.array([[0.5, -0.5, 1.0], [0, 0, 0], [0, 0, 0]]))
        with self.assertRaises(SimulationError):
            PSF(np.full((3, 3), 0.2))
        with self.assertRaises(SimulationError):
            PSF.normalized(np.zeros((3, 3)))

    def test_resize_sizes(self) -> None:
        psf = generate_psf_bank(1, 15, 0)[0]
        self.assertEqual(resize_psf(psf, 0.5).size, 9)
        self.assertEqual(resize_psf(psf, 1.0).size, 15)
        self.assertEqual(resize_psf(psf, 1.5).size, 23)
        self.assertAlmostEqual(float(resize_psf(psf, 0.5).kernel.sum()), 1.0, delta=1e-9)

    def test_resize_delta_stays_delta(self) -> None:
        for scale in (0.5, 1.0, 1.5, 3.0):
            kernel = resize_psf(delta_psf(), scale).kernel
            self.assertEqual(kernel[kernel.shape[0] // 2, kernel.shape[1] // 2], 1.0)
            self.assertEqual(float(kernel.sum()), 1.0)

    def test_resize_scale_out_of_range(self) -> None:
        with self.assertRaises(SimulationError):
            resize_psf(delta_psf(3), 0.0)
        with self.assertRaises(SimulationError):
            resize_psf(delta_psf(3), 4.5)

    def test_file_round_trip(self) -> None:
        psf = generate_psf_bank(1, 5, 2)[0]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "lobe.psf"
            save_psf_file(psf, path)
            np.testing.assert_allclose(load_psf_file(path).kernel, psf.kernel, atol=1e-15)

    def test_file_errors(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "bad.psf"
            path.write_text("KERNEL 3\n1 0 0\n", encoding="utf-8")
            with self.assertRaises(SimulationError):
                load_psf_file(path)
            path.write_text("PSF 3\n1 0 0\n", encoding="utf-8")
            with self.assertRaises(SimulationError):
                load_psf_file(path)


class BlurTests(unittest.TestCase):
    def test_impulse_response_is_kernel(self) -> None:
        psf = asymmetric_psf()
        img = np.zeros((21, 21))
        img[10, 10] = 1.0
        out = blur(img, psf)
        np.testing.assert_allclose(out[9:12, 9:12], psf.kernel, atol=1e-15)
        self.assertAlmostEqual(float(out.sum()), 1.0, delta=1e-12)

    def test_constant_image_preserved(self) -> None:
        img = np.full((1, 16, 20), 0.42)
        out = blur(img, generate_psf_bank(1, 7, 3)[0])
        self.assertEqual(out.shape, img.shape)
        np.testing.assert_allclose(out, 0.42, atol=1e-9)

    def test_delta_is_identity(self) -> None:
        img = np.random.default_rng(0).random((3, 9, 9))
        np.testing.assert_array_equal(blur(img, delta_psf(5)), img)


class SpatiallyVariantTests(unittest.TestCase):
    def setUp(self) -> None:
        self.img = np.random.default_rng(1).random((1, 32, 32))

    def test_delta_bank_reproduces_input_exactly(self) -> None:
        config = make_config(psf_bank=(delta_psf(),), tile_grid=(3, 3), blend_margin=3)
        out = simulate_frame(self.img, config, 0)
        np.testing.assert_array_equal(out, self.img)

    def test_single_tile_equals_plain_blur(self) -> None:
        psf = asymmetric_psf()
        config = make_config(psf_bank=(psf,), tile_grid=(1, 1), scale_range=(1.0, 1.0))
        np.testing.assert_allclose(spatially_variant_blur(self.img, config, 4), blur(self.img, psf), atol=1e-12)

    def test_constant_image_preserved(self) -> None:
        img = np.full((1, 30, 30), 0.6)
        out = spatially_variant_blur(img, make_config(), 0)
        np.testing.assert_allclose(out, 0.6, atol=1e-9)

    def test_deterministic_per_frame(self) -> None:
        config = make_config(noise_sigma=0.05)
        a = simulate_frame(self.img, config, 2)
        b = simulate_frame(self.img, config, 2)
        c = simulate_frame(self.img, config, 3)
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.array_equal(a, c))

    def test_default_config_preserves_scene_mean(self) -> None:
        config = DistortionConfig()
        for name, clean in bundled_scenes(128).items():
            for frame_seed in range(3):
                with self.subTest(scene=name, frame=frame_seed):
                    out = spatially_variant_blur(clean, config, frame_seed)
                    self.assertLessEqual(abs(float(out.mean()) - float(clean.mean())), 1e-4)

    def test_sequence_frames_pairwise_distinct(self) -> None:
        seq = simulate_sequence(self.img, 5, make_config())
        for a, b in itertools.combinations(range(5), 2):
            self.assertFalse(np.array_equal(seq[a], seq[b]), f"frames {a} and {b} are identical")

    def test_wider_psfs_lower_psnr(self) -> None:
        clean = ripple_texture(96)
        scores = []
        for scale in (0.5, 1.0, 1.5):
            config = DistortionConfig(scale_range=(scale, scale), noise_sigma=0.0, seed=4)
            seq = simulate_sequence(clean, 3, config)
            scores.append(np.mean([psnr(frame, clean) for frame in seq]))
        self.assertGreater(scores[0], scores[1])
        self.assertGreater(scores[1], scores[2])

    def test_stronger_noise_lowers_psnr(self) -> None:
        clean = ripple_texture(64)
        scores = [psnr(simulate_frame(clean, make_config(noise_sigma=sigma), 0), clean) for sigma in (0.01, 0.03, 0.1)]
        self.assertGreater(scores[0], scores[1])
        self.assertGreater(scores[1], scores[2])

    def test_tiles_too_small_for_margin(self) -> None:
        with self.assertRaises(SimulationError):
            spatially_variant_blur(self.img, make_config(tile_grid=(4, 4), blend_margin=4), 0)

    def test_two_dimensional_input(self) -> None:
        out = simulate_frame(self.img[0], make_config(), 0)
        self.assertEqual(out.shape, (32, 32))

    def test_sequence_shape(self) -> None:
        seq = simulate_sequence(self.img, 4, make_config())
        self.assertEqual(seq.shape, (4, 1, 32, 32))
        with self.assertRaises(SimulationError):
            simulate_sequence(self.img, 0, make_config())

    def test_invalid_config(self) -> None:
        with self.assertRaises(SimulationError):
            make_config(psf_bank=())
        with self.assertRaises(SimulationError):
            make_config(scale_range=(1.5, 0.5))
        with self.assertRaises(SimulationError):
            make_config(noise_sigma=-0.1)


class NoiseTests(unittest.TestCase):
    def test_zero_sigma_is_copy(self) -> None:
        img = np.ones((4, 4))
        np.testing.assert_array_equal(add_noise(img, 0.0, 1), img)

    def test_sample_statistics(self) -> None:
        noisy = add_noise(np.zeros((256, 256)), 0.1, 7)
        self.assertLess(abs(float(noisy.mean())), 0.005)
        self.assertLess(abs(float(noisy.std()) / 0.1 - 1), 0.05)

    def test_seeds_give_different_fields(self) -> None:
        img = np.zeros((16, 16))
        self.assertFalse(np.array_equal(add_noise(img, 0.1, 1), add_noise(img, 0.1, 2)))

    def test_values_are_not_clamped(self) -> None:
        noisy = add_noise(np.zeros((64, 64)), 0.5, 2)
        self.assertLess(float(noisy.min()), 0.0)


class FrameAverageTests(unittest.TestCase):
    def test_mean_of_window(self) -> None:
        seq = np.stack([np.full((1, 2, 2), float(i)) for i in range(5)])
        np.testing.assert_array_equal(frame_average(seq, 3, 4), np.full((1, 2, 2), 3.0))
        np.testing.assert_array_equal(frame_average(seq, 1, 2), seq[2])

    def test_window_order_does_not_matter(self) -> None:
        seq = np.random.default_rng(3).random((5, 1, 6, 6))
        shuffled = seq[[3, 0, 4, 2, 1]]
        np.testing.assert_allclose(frame_average(shuffled, 5, 4), frame_average(seq, 5, 4), atol=1e-12)

    def test_average_beats_single_frames(self) -> None:
        clean = ripple_texture(64)
        seq = simulate_sequence(clean, 8, make_config(noise_sigma=0.05))
        single = np.mean([psnr(frame, clean) for frame in seq])
        self.assertGreater(psnr(frame_average(seq, 8, 7), clean), single)

    def test_window_too_long(self) -> None:
        seq = np.zeros((5, 1, 2, 2))
        with self.assertRaises(SimulationError):
            frame_average(seq, 4, 2)
        with self.assertRaises(SimulationError):
            frame_average(seq, 0, 2)
        with self.assertRaises(SimulationError):
            frame_average(seq, 1, 5)


if __name__ == "__main__":
    unittest.main()
