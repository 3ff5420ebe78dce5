"""Application configuration loading utilities."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional
import os

from dotenv import dotenv_values

from .network import NetworkConfig, NetworkConfigError
from .training import MOVING_OBJECT_RESIZE, TrainingConfig
from .turbulence_sim import (
    DistortionConfig,
    SimulationError,
    delta_psf,
    generate_psf_bank,
    load_psf_file,
)


BOOL_TRUE = {"1", "true", "yes", "on", "y"}
BOOL_FALSE = {"0", "false", "no", "off", "n"}

CONFIG_KEYS = (
    "SEED", "LOG_LEVEL", "LOG_FILE", "WORKERS",
    "PSF_COUNT", "PSF_SIZE", "PSF_FILES", "DELTA_PSF", "TILE_ROWS", "TILE_COLS",
    "SCALE_MIN", "SCALE_MAX", "NOISE_SIGMA", "BLEND_MARGIN",
    "DEPTH", "KERNEL", "WIDTH",
    "BATCH_SIZE", "PATCH_SIZE", "LR_START", "LR_END", "EPOCHS", "STEPS_PER_EPOCH",
    "RESIZE_MIN", "RESIZE_MAX", "PREFETCH",
)

PRESETS: Dict[str, Dict[str, str]] = {
    "desk": {
        "DEPTH": "7", "WIDTH": "16", "KERNEL": "5",
        "PATCH_SIZE": "48", "BATCH_SIZE": "16", "EPOCHS": "60",
    },
    "paper": {
        "DEPTH": "17", "WIDTH": "64", "KERNEL": "5",
        "PATCH_SIZE": "80", "BATCH_SIZE": "128", "EPOCHS": "1000",
    },
}


class ConfigError(RuntimeError):
    """Raised when configuration loading fails."""


@dataclass(slots=True)
class AppConfig:
    """Strongly-typed configuration for every workflow."""

    distortion: DistortionConfig
    training: TrainingConfig
    network_depth: int = 7
    network_kernel: int = 5
    network_width: int = 16

    seed: int = 0
    workers: int = 1
    log_level: str = "INFO"
    log_file: Path = Path("logs/system.log")
    source: Optional[Path] = None
    values: Dict[str, str] = field(default_factory=dict)

    def network(self, in_channels: int = 1) -> NetworkConfig:
        try:
            return NetworkConfig(
                depth=self.network_depth,
                kernel=self.network_kernel,
                width=self.network_width,
                in_channels=in_channels,
                out_channels=in_channels,
            )
        except NetworkConfigError as exc:
            raise ConfigError(str(exc)) from exc

    def with_seed(self, seed: int) -> "AppConfig":
        return replace(
            self,
            seed=seed,
            distortion=replace(self.distortion, seed=seed),
            training=replace(self.training, seed=seed),
        )

    def echo(self) -> Dict[str, object]:
        """Resolved settings for the run manifest."""
        d = self.distortion
        return {
            "source": str(self.source) if self.source else None,
            "values": dict(self.values),
            "seed": self.seed,
            "workers": self.workers,
            "distortion": {
                "psf_count": len(d.psf_bank),
                "psf_sizes": sorted({p.size for p in d.psf_bank}),
                "tile_grid": list(d.tile_grid),
                "scale_range": list(d.scale_range),
                "noise_sigma": d.noise_sigma,
                "blend_margin": d.blend_margin,
            },
            "network": {"depth": self.network_depth, "kernel": self.network_kernel, "width": self.network_width},
            "training": {
                "batch_size": self.training.batch_size,
                "patch_size": self.training.patch_size,
                "lr_start": self.training.lr_start,
                "lr_end": self.training.lr_end,
                "epochs": self.training.epochs,
                "steps_per_epoch": self.training.steps_per_epoch,
                "resize_augment": list(self.training.resize_augment) if self.training.resize_augment else None,
            },
        }


def _str_to_bool(raw: str, *, var_name: str) -> bool:
    value = raw.strip().lower()
    if value in BOOL_TRUE:
        return True
    if value in BOOL_FALSE:
        return False
    raise ConfigError(f"Invalid boolean value '{raw}' for {var_name}")


def _split_csv(raw: str) -> List[str]:
    return [item.strip() for item in raw.split(',') if item.strip()]


def _get_int(env: Mapping[str, Optional[str]], key: str, default: int) -> int:
    raw = env.get(key)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"Invalid integer value '{raw}' for {key}") from exc


def _get_float(env: Mapping[str, Optional[str]], key: str, default: float) -> float:
    raw = env.get(key)
    if raw is None or raw == "":
        return default
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"Invalid number '{raw}' for {key}") from exc


def read_values(config_file: Path | str | None = None, preset: Optional[str] = None) -> Dict[str, str]:
    """Merge preset < config file < process environment for the known keys."""

    values: Dict[str, str] = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset '{preset}' (choose from {', '.join(PRESETS)})")
        values.update(PRESETS[preset])
    if config_file is not None:
        path = Path(config_file)
        if not path.is_file():
            raise ConfigError(f"設定ファイルが見つかりません: {path}")
        parsed = dotenv_values(path)
        unknown = sorted(set(parsed) - set(CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"Unknown configuration keys in {path}: {', '.join(unknown)}")
        values.update({k: v for k, v in parsed.items() if v is not None})
    for key in CONFIG_KEYS:
        if os.environ.get(key):
            values[key] = os.environ[key]
    return values


def _load_bank(env: Mapping[str, str], seed: int, base: Optional[Path]) -> tuple:
    if _str_to_bool(env.get("DELTA_PSF", "false"), var_name="DELTA_PSF"):
        return (delta_psf(1),)
    files = _split_csv(env.get("PSF_FILES", ""))
    if files:
        paths = [Path(f) if Path(f).is_absolute() or base is None else base / f for f in files]
        return tuple(load_psf_file(p) for p in paths)
    count = _get_int(env, "PSF_COUNT", 9)
    size = _get_int(env, "PSF_SIZE", 15)
    return tuple(generate_psf_bank(count, size, seed))


def load_config(
    config_file: Path | str | None = None,
    *,
    preset: Optional[str] = None,
    seed: Optional[int] = None,
) -> AppConfig:
    """Load configuration from a KEY=value file, a preset and the environment."""

    env = read_values(config_file, preset)
    base = Path(config_file).parent if config_file is not None else None
    run_seed = seed if seed is not None else _get_int(env, "SEED", 0)

    try:
        distortion = DistortionConfig(
            psf_bank=_load_bank(env, _get_int(env, "SEED", 0), base),
            tile_grid=(_get_int(env, "TILE_ROWS", 3), _get_int(env, "TILE_COLS", 3)),
            scale_range=(_get_float(env, "SCALE_MIN", 0.5), _get_float(env, "SCALE_MAX", 1.5)),
            noise_sigma=_get_float(env, "NOISE_SIGMA", 0.01),
            blend_margin=_get_int(env, "BLEND_MARGIN", 8),
            seed=run_seed,
        )
    except (SimulationError, OSError) as exc:
        raise ConfigError(f"Invalid distortion settings: {exc}") from exc

    resize = None
    if env.get("RESIZE_MIN") or env.get("RESIZE_MAX"):
        resize = (
            _get_float(env, "RESIZE_MIN", MOVING_OBJECT_RESIZE[0]),
            _get_float(env, "RESIZE_MAX", MOVING_OBJECT_RESIZE[1]),
        )
    steps = _get_int(env, "STEPS_PER_EPOCH", 0)
    try:
        training = TrainingConfig(
            batch_size=_get_int(env, "BATCH_SIZE", 16),
            patch_size=_get_int(env, "PATCH_SIZE", 48),
            lr_start=_get_float(env, "LR_START", 1e-3),
            lr_end=_get_float(env, "LR_END", 1e-5),
            epochs=_get_int(env, "EPOCHS", 60),
            seed=run_seed,
            resize_augment=resize,
            steps_per_epoch=steps or None,
            prefetch=_get_int(env, "PREFETCH", 2),
        )
    except ValueError as exc:
        raise ConfigError(f"Invalid training settings: {exc}") from exc

    workers = _get_int(env, "WORKERS", 1)
    if workers < 1:
        raise ConfigError("WORKERS must be >= 1")

    return AppConfig(
        distortion=distortion,
        training=training,
        network_depth=_get_int(env, "DEPTH", 7),
        network_kernel=_get_int(env, "KERNEL", 5),
        network_width=_get_int(env, "WIDTH", 16),
        seed=run_seed,
        workers=workers,
        log_level=env.get("LOG_LEVEL", "INFO").upper(),
        log_file=Path(env.get("LOG_FILE", "logs/system.log")),
        source=Path(config_file) if config_file is not None else None,
        values=env,
    )
