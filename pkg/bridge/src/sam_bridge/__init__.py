"""HTTP bridge exposing a promptable segmenter behind a small wire protocol.

The service answers ``GET /v1/health``, ``GET /v1/info`` and
``POST /v1/refine`` (box or mask prompts against a grayscale image). Mock
mode needs no model weights and is fully deterministic, which makes it the
contract-test target for any client of the protocol; real checkpoints load
behind the same interface when the segmentation runtime is installed.
"""

from .config import BridgeConfig
from .errors import BridgeError, ConfigError, DependencyError
from .service import BridgeService, build_server, serve

__version__ = "0.1.0"

__all__ = [
    "BridgeConfig",
    "BridgeError",
    "BridgeService",
    "ConfigError",
    "DependencyError",
    "build_server",
    "serve",
]
