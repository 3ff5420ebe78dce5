"""Long-running end-to-end checks. Enable with ``RUN_ACCEPTANCE=1``."""
import os
import tempfile
import time
import unittest
from dataclasses import replace
from pathlib import Path

import numpy as np

from src.config import CONFIG_KEYS, load_config
from src.dataset import Scene, build_pairs
from src.main import EXIT_OK, run
from src.metrics import psnr, ssim
from src.monitor import pixels_per_second
from src.network import NetworkConfig, init_model, restore
from src.scenes import bundled_scenes
from src.training import train
from src.turbulence_sim import DistortionConfig, frame_average, simulate_sequence


ENABLED = os.environ.get("RUN_ACCEPTANCE") == "1"
TRAIN_FRAMES = 8
TOTAL_FRAMES = 10


@unittest.skipUnless(ENABLED, "set RUN_ACCEPTANCE=1 to run acceptance checks")
class DeskRestorationTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        for key in CONFIG_KEYS:
            os.environ.pop(key, None)
        cls.config = load_config(preset="desk")
        cls.scenes = []
        for index, (name, clean) in enumerate(bundled_scenes(128).items()):
            distortion = replace(cls.config.distortion, seed=100 + index)
            frames = simulate_sequence(clean, TOTAL_FRAMES, distortion).astype(np.float32)
            cls.scenes.append(Scene(name=name, clean=clean, frames=frames))
        pairs = build_pairs(cls.scenes, train_frames=TRAIN_FRAMES)
        model = init_model(cls.config.network(1), cls.config.seed)
        started = time.perf_counter()
        cls.result = train(model, pairs, cls.config.training)
        cls.train_seconds = time.perf_counter() - started

    def test_held_out_gain(self) -> None:
        gains_psnr, gains_ssim = [], []
        for scene in self.scenes:
            for y in scene.frames[TRAIN_FRAMES:]:
                restored = restore(self.result.model, y)
                gains_psnr.append(psnr(restored, scene.clean) - psnr(y, scene.clean))
                gains_ssim.append(ssim(restored, scene.clean) - ssim(y, scene.clean))
        self.assertGreaterEqual(float(np.mean(gains_psnr)), 2.0)
        self.assertGreaterEqual(float(np.mean(gains_ssim)), 0.05)
        self.assertLess(self.train_seconds, 15 * 60)

    def test_averaged_input_beats_single_frame(self) -> None:
        clean = bundled_scenes(128)["ripples"]
        wins_psnr = wins_restore = 0
        for seed in range(5):
            distortion = replace(self.config.distortion, seed=1000 + seed)
            seq = simulate_sequence(clean, 10, distortion).astype(np.float32)
            averaged = frame_average(seq, 10, 9).astype(np.float32)
            single = seq[int(np.random.default_rng(seed).integers(10))]
            mean_single = float(np.mean([psnr(frame, clean) for frame in seq]))
            wins_psnr += psnr(averaged, clean) > mean_single
            model = self.result.model
            wins_restore += psnr(restore(model, averaged), clean) >= psnr(restore(model, single), clean)
        self.assertGreaterEqual(wins_psnr, 4)
        self.assertGreaterEqual(wins_restore, 4)


@unittest.skipUnless(ENABLED, "set RUN_ACCEPTANCE=1 to run acceptance checks")
class OverfitTests(unittest.TestCase):
    def test_single_pair_reaches_low_loss(self) -> None:
        clean = bundled_scenes(80)["blobs"]
        distortion = DistortionConfig(tile_grid=(1, 1), noise_sigma=0.0, seed=7)
        y = simulate_sequence(clean, 1, distortion)[0].astype(np.float32)
        config = replace(
            load_config(preset="desk").training,
            patch_size=80,
            batch_size=1,
            epochs=1,
            steps_per_epoch=2000,
            lr_start=1e-3,
            lr_end=1e-3,
        )
        started = time.perf_counter()
        result = train(init_model(NetworkConfig(depth=7, kernel=5, width=16), 0), [(y, clean)], config)
        self.assertLess(min(r.loss for r in result.trace), 1e-4)
        self.assertLess(time.perf_counter() - started, 5 * 60)


@unittest.skipUnless(ENABLED, "set RUN_ACCEPTANCE=1 to run acceptance checks")
class ThroughputTests(unittest.TestCase):
    def test_full_scale_restore_rate(self) -> None:
        model = init_model(NetworkConfig(depth=17, kernel=5, width=64), 0)
        frame = np.random.default_rng(0).random((1, 256, 512)).astype(np.float32)
        restore(model, frame[:, :32, :32])
        started = time.perf_counter()
        restore(model, frame)
        rate = pixels_per_second(512 * 256, time.perf_counter() - started)
        self.assertGreaterEqual(rate, 10_000)


@unittest.skipUnless(ENABLED, "set RUN_ACCEPTANCE=1 to run acceptance checks")
class DeterminismTests(unittest.TestCase):
    def test_pipeline_outputs_are_bitwise_identical(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            config = root / "run.env"
            config.write_text(f"LOG_FILE={root / 'run.log'}\nEPOCHS=2\nSTEPS_PER_EPOCH=3\nWORKERS=2\n", encoding="utf-8")
            self.assertEqual(run(["scenes", "--out", str(root / "clean"), "--config", str(config)]), EXIT_OK)
            outputs = []
            for attempt in ("a", "b"):
                out = root / attempt
                steps = [
                    ["simulate", "--clean", str(root / "clean"), "--out", str(out / "data"), "--frames", "3"],
                    ["train", "--data", str(out / "data"), "--out", str(out / "model.atrm")],
                    ["restore", "--model", str(out / "model.atrm"), "--in", str(out / "data" / "blobs"), "--out", str(out / "restored")],
                ]
                for argv in steps:
                    self.assertEqual(run([*argv, "--config", str(config)]), EXIT_OK)
                files = sorted(p for p in out.rglob("*") if p.suffix in (".pgm", ".atrm", ".csv"))
                outputs.append({str(p.relative_to(out)): p.read_bytes() for p in files})
            self.assertEqual(outputs[0], outputs[1])


if __name__ == "__main__":
    unittest.main()
