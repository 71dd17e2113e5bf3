"""Service configuration."""

from __future__ import annotations

import os
from dataclasses import dataclass

from .errors import ConfigError

VARIANTS = ("vit-b", "hiera-small")


@dataclass(frozen=True)
class BridgeConfig:
    """How the bridge runs: which model (if any), where it listens.

    Mock mode serves deterministic geometry and must not name a
    checkpoint; real mode requires a readable checkpoint file.
    """

    variant: str = "vit-b"
    checkpoint: str | None = None
    device: str = "cpu"
    mock: bool = True
    host: str = "127.0.0.1"
    port: int = 8765
    workers: int = 4
    timeout_s: float = 30.0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.mock and self.checkpoint is not None:
            raise ConfigError("mock mode takes no checkpoint")
        if not self.mock:
            if self.checkpoint is None:
                raise ConfigError("real mode requires a checkpoint path")
            if not os.access(self.checkpoint, os.R_OK):
                raise ConfigError(f"checkpoint is not readable: {self.checkpoint}")
        if not 0 <= self.port <= 65535:
            raise ConfigError(f"port must lie in [0, 65535], got {self.port}")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")
        if self.timeout_s <= 0:
            raise ConfigError(f"timeout_s must be positive, got {self.timeout_s}")
