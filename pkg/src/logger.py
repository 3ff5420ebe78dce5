"""Logging and run-manifest utilities."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, Optional

import coloredlogs

from .config import AppConfig


LOG_FORMAT = "[%(asctime)s][%(levelname)s] %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    """Everything needed to reproduce one CLI invocation."""

    command: str
    arguments: Dict[str, object] = field(default_factory=dict)
    config: Dict[str, object] = field(default_factory=dict)
    seed: int = 0
    started_at: datetime = field(default_factory=lambda: datetime.now(timezone.utc))
    finished_at: Optional[datetime] = None
    input_hash: Optional[str] = None
    outputs: list[str] = field(default_factory=list)
    throughput: Dict[str, float] = field(default_factory=dict)
    cpu_stats: Dict[str, float] = field(default_factory=dict)
    extra: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        duration = (self.finished_at or datetime.now(timezone.utc)) - self.started_at
        return {
            "command": self.command,
            "arguments": self.arguments,
            "config": self.config,
            "seed": self.seed,
            "started_at": self.started_at.isoformat(),
            "finished_at": self.finished_at.isoformat() if self.finished_at else None,
            "duration_seconds": round(duration.total_seconds(), 3),
            "input_hash": self.input_hash,
            "outputs": self.outputs,
            "throughput": self.throughput,
            "cpu_stats": self.cpu_stats,
            **self.extra,
        }


def content_hash(paths: Iterable[Path]) -> str:
    """SHA-256 over the relative names and bytes of every input file, in sorted order."""

    digest = hashlib.sha256()
    files: list[tuple[str, Path]] = []
    for root in paths:
        root = Path(root)
        if root.is_dir():
            files.extend((str(p.relative_to(root)), p) for p in root.rglob("*") if p.is_file())
        elif root.is_file():
            files.append((root.name, root))
    for name, path in sorted(files):
        digest.update(name.encode("utf-8"))
        digest.update(b"\0")
        digest.update(path.read_bytes())
    return digest.hexdigest()


class ManifestManager:
    """Own a manifest file and persist it after every update."""

    def __init__(self, path: Path, manifest: RunManifest) -> None:
        self._path = path
        self._path.parent.mkdir(parents=True, exist_ok=True)
        self._manifest = manifest
        self._persist()

    @property
    def manifest(self) -> RunManifest:
        return self._manifest

    def record_inputs(self, paths: Iterable[Path]) -> None:
        self._manifest.input_hash = content_hash(paths)
        self._persist()

    def record_output(self, path: Path) -> None:
        self._manifest.outputs.append(str(path))
        self._persist()

    def record_throughput(self, pixels: int, seconds: float, pixels_per_second: float) -> None:
        self._manifest.throughput = {
            "pixels": pixels,
            "seconds": round(seconds, 6),
            "pixels_per_second": round(pixels_per_second, 1),
        }
        self._persist()

    def record_cpu(self, stats: Dict[str, float]) -> None:
        self._manifest.cpu_stats = stats
        self._persist()

    def record(self, key: str, value: object) -> None:
        self._manifest.extra[key] = value
        self._persist()

    def finish(self) -> None:
        self._manifest.finished_at = datetime.now(timezone.utc)
        self._persist()

    def _persist(self) -> None:
        try:
            self._path.write_text(
                json.dumps(self._manifest.to_dict(), ensure_ascii=False, indent=2),
                encoding="utf-8",
            )
        except Exception:  # pragma: no cover - we do not want to crash on IO issues
            logging.getLogger(__name__).exception("Failed to persist run manifest")


def setup_logging(config: AppConfig) -> logging.Logger:
    """Configure root logger according to config."""

    logger = logging.getLogger()
    logger.setLevel(getattr(logging, config.log_level.upper(), logging.INFO))

    # Remove existing handlers to avoid duplicate logs
    for handler in list(logger.handlers):
        logger.removeHandler(handler)

    config.log_file.parent.mkdir(parents=True, exist_ok=True)

    file_handler = logging.FileHandler(config.log_file, encoding="utf-8")
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT, DATE_FORMAT))
    logger.addHandler(file_handler)

    coloredlogs.install(
        level=config.log_level,
        fmt=LOG_FORMAT,
        datefmt=DATE_FORMAT,
        logger=logger,
    )

    return logger
