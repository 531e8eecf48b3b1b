"""Similarity-based expert re-routing for batched MoE decoding.

Subpackages: `moe` (toy model and forwards), `similarity` (expert
similarity estimation), `rerouting` (the routing rewriter), `simulator`
(activation statistics and the latency model), `bounds` (substitution
error-bound checks), `cli` (command-line front end).
"""

from . import bounds, cli, moe, rerouting, similarity, simulator
from .errors import (
    ConfigError,
    DegenerateInputWarning,
    DimensionError,
    DomainError,
    InputError,
    RoutingError,
    SereError,
)

__version__ = "0.1.0"

__all__ = [
    "bounds",
    "cli",
    "moe",
    "rerouting",
    "similarity",
    "simulator",
    "ConfigError",
    "DegenerateInputWarning",
    "DimensionError",
    "DomainError",
    "InputError",
    "RoutingError",
    "SereError",
    "__version__",
]
