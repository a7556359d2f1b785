"""moelab: a desk-scale laboratory for mixture-of-experts routing experiments
on small GPT-style language models."""

from .config import (
    Experiment,
    ModelConfig,
    RoutingConfig,
    TrainConfig,
    count_parameters,
    desk_preset,
    paper_preset,
    parse_config,
    serialize_config,
)
from .errors import (
    ConfigError,
    ConfigParseError,
    DataError,
    MoelabError,
    NumericError,
    RoutingError,
)

__version__ = "0.1.0"

__all__ = [
    "Experiment",
    "ModelConfig",
    "RoutingConfig",
    "TrainConfig",
    "count_parameters",
    "desk_preset",
    "paper_preset",
    "parse_config",
    "serialize_config",
    "ConfigError",
    "ConfigParseError",
    "DataError",
    "MoelabError",
    "NumericError",
    "RoutingError",
    "__version__",
]
