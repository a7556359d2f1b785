"""Experiment configuration: typed configs, parameter counting, and the flat
key=value config grammar.

Config documents are UTF-8 text, one ``key = value`` pair per line, ``#``
starts a comment. Every key has a documented default (the paper-scale preset),
so an empty document is a valid experiment. ``moe = false`` turns the model
into a dense baseline: routing keys are then rejected and
``ffn_width_multiplier`` governs the FFN size instead.

Recognized keys (defaults in parentheses):

  model    n_layers (12), d_model (768), n_heads (12), d_ffn (4*d_model),
           vocab_size (50257), context_length (1024), dropout (0.2),
           ffn_width_multiplier (1), biases_enabled (true)
  moe      moe (true)
  routing  n_experts (4), top_k (2), unit (sequence), scope (layer_wise),
           strategy (learned), router_depth (one_layer), router_hidden
           (d_model, two_layer only), lambda_balance (0.01),
           sequence_pooling (mean), language_map (none; "en:0,de:1,..." form)
  train    learning_rate (9.6e-4), min_learning_rate (9.6e-5),
           weight_decay (0.5), iterations (6000), batch_size (8),
           grad_accumulation_steps (128), sequence_length (1024),
           warmup_iterations (120), seed (1337), eval_window (100),
           eval_interval (50)

Booleans are ``true``/``false``. ``language_map`` entries are
``code:expert_index`` pairs joined by commas.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

from .errors import ConfigError, ConfigParseError

ROUTING_UNITS = ("token", "sequence")
ROUTING_SCOPES = ("layer_wise", "global")
ROUTING_STRATEGIES = ("learned", "frozen", "random", "language")
ROUTER_DEPTHS = ("one_layer", "two_layer")
SEQUENCE_POOLINGS = ("mean",)

UNLABELED = 0xFFFFFFFF  # label-id sentinel for unlabeled documents


def _require(cond: bool, message: str, key: str | None = None) -> None:
    if not cond:
        raise ConfigError(message, key=key)


@dataclass
class ModelConfig:
    """Transformer geometry. Defaults are the GPT2-small shape."""

    n_layers: int = 12
    d_model: int = 768
    n_heads: int = 12
    d_ffn: int | None = None  # resolved to 4*d_model when omitted
    vocab_size: int = 50257
    context_length: int = 1024
    dropout: float = 0.2
    ffn_width_multiplier: int = 1  # dense baselines only; duplicated FFN blocks
    biases_enabled: bool = True

    def __post_init__(self) -> None:
        if self.d_ffn is None:
            self.d_ffn = 4 * self.d_model

    def validate(self) -> None:
        for name in ("n_layers", "d_model", "n_heads", "d_ffn", "vocab_size",
                     "context_length", "ffn_width_multiplier"):
            _require(getattr(self, name) >= 1, f"{name} must be a positive count", key=name)
        _require(self.d_model % self.n_heads == 0,
                 "d_model must be divisible by n_heads", key="n_heads")
        _require(0.0 <= self.dropout <= 1.0,
                 "dropout must be a probability in [0, 1]", key="dropout")


@dataclass
class RoutingConfig:
    """Mixture-of-experts routing design choices."""

    n_experts: int = 4
    top_k: int = 2
    unit: str = "sequence"
    scope: str = "layer_wise"
    strategy: str = "learned"
    router_depth: str = "one_layer"
    router_hidden: int | None = None  # two_layer only; defaults to d_model at build
    lambda_balance: float = 0.01
    sequence_pooling: str = "mean"
    language_map: dict[str, int] | None = None

    def validate(self) -> None:
        _require(self.n_experts >= 1, "n_experts must be a positive count", key="n_experts")
        _require(1 <= self.top_k <= self.n_experts,
                 "top_k must satisfy 1 <= top_k <= n_experts", key="top_k")
        _require(self.unit in ROUTING_UNITS,
                 f"unit must be one of {ROUTING_UNITS}", key="unit")
        _require(self.scope in ROUTING_SCOPES,
                 f"scope must be one of {ROUTING_SCOPES}", key="scope")
        _require(self.strategy in ROUTING_STRATEGIES,
                 f"strategy must be one of {ROUTING_STRATEGIES}", key="strategy")
        _require(self.router_depth in ROUTER_DEPTHS,
                 f"router_depth must be one of {ROUTER_DEPTHS}", key="router_depth")
        _require(self.sequence_pooling in SEQUENCE_POOLINGS,
                 f"sequence_pooling must be one of {SEQUENCE_POOLINGS}",
                 key="sequence_pooling")
        _require(self.lambda_balance >= 0.0,
                 "lambda_balance must be nonnegative", key="lambda_balance")
        if self.router_hidden is not None:
            _require(self.router_hidden >= 1,
                     "router_hidden must be a positive count", key="router_hidden")
        if self.strategy == "language":
            _require(self.unit == "sequence",
                     "strategy language requires unit = sequence", key="strategy")
            _require(self.scope == "global",
                     "strategy language requires scope = global", key="strategy")
            _require(self.language_map is not None and len(self.language_map) > 0,
                     "strategy language requires a language_map", key="language_map")
        if self.language_map is not None:
            _require(len(self.language_map) <= self.n_experts,
                     "language_map must have at most n_experts languages",
                     key="language_map")
            indices = list(self.language_map.values())
            _require(len(set(indices)) == len(indices),
                     "language_map must be injective", key="language_map")
            _require(all(0 <= i < self.n_experts for i in indices),
                     "language_map expert indices must lie in [0, n_experts)",
                     key="language_map")


@dataclass
class TrainConfig:
    """Optimization schedule and run accounting."""

    learning_rate: float = 9.6e-4
    min_learning_rate: float = 9.6e-5
    weight_decay: float = 0.5
    iterations: int = 6000
    batch_size: int = 8
    grad_accumulation_steps: int = 128
    sequence_length: int = 1024
    warmup_iterations: int = 120
    seed: int = 1337
    eval_window: int = 100
    eval_interval: int = 50

    @property
    def tokens_per_iteration(self) -> int:
        return self.batch_size * self.grad_accumulation_steps * self.sequence_length

    def validate(self) -> None:
        for name in ("iterations", "batch_size", "grad_accumulation_steps",
                     "sequence_length", "eval_window", "eval_interval"):
            _require(getattr(self, name) >= 1, f"{name} must be a positive count", key=name)
        _require(self.learning_rate > 0.0,
                 "learning_rate must be positive", key="learning_rate")
        _require(self.min_learning_rate > 0.0,
                 "min_learning_rate must be positive", key="min_learning_rate")
        _require(self.min_learning_rate <= self.learning_rate,
                 "min_learning_rate must be <= learning_rate", key="min_learning_rate")
        _require(self.weight_decay >= 0.0,
                 "weight_decay must be nonnegative", key="weight_decay")
        _require(self.warmup_iterations >= 0,
                 "warmup_iterations must be nonnegative", key="warmup_iterations")


@dataclass
class Experiment:
    """Complete description of one experiment. `routing is None` means a
    dense baseline governed by ffn_width_multiplier."""

    model: ModelConfig = field(default_factory=ModelConfig)
    routing: RoutingConfig | None = field(default_factory=RoutingConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        if self.routing is not None:
            self.routing.validate()
            _require(self.model.ffn_width_multiplier == 1,
                     "an MoE model must have ffn_width_multiplier = 1",
                     key="ffn_width_multiplier")
        _require(self.train.sequence_length <= self.model.context_length,
                 "sequence_length must be <= context_length", key="sequence_length")


def paper_preset() -> Experiment:
    """Default experiment: GPT2-small dims, 4 experts, Top-2 sequence routing."""
    return Experiment()


def desk_preset() -> Experiment:
    """Small CPU-friendly experiment over a byte-level vocabulary."""
    return Experiment(
        model=ModelConfig(n_layers=6, d_model=128, n_heads=4, d_ffn=512,
                          vocab_size=256, context_length=128, dropout=0.0),
        routing=RoutingConfig(),
        train=TrainConfig(learning_rate=1e-3, min_learning_rate=1e-4,
                          weight_decay=0.1, iterations=2000, batch_size=8,
                          grad_accumulation_steps=1, sequence_length=128,
                          warmup_iterations=40),
    )


# --------------------------------------------------------------------------
# Parameter counting
# --------------------------------------------------------------------------

def count_parameters(model: ModelConfig,
                     routing: RoutingConfig | None = None) -> tuple[int, int]:
    """Count (total, active) learnable scalars for a model.

    Total covers embeddings, attention, all expert FFNs, routers, norms, and
    biases; the LM head is tied to the token embedding. Active is what one
    routed unit touches in a forward pass: total minus the (N - K) unselected
    expert FFNs in every layer. Routers count as active (they always run).
    Dense baselines have total = active.
    """
    model.validate()
    if routing is not None:
        routing.validate()
        _require(model.ffn_width_multiplier == 1,
                 "an MoE model must have ffn_width_multiplier = 1",
                 key="ffn_width_multiplier")

    d, dff = model.d_model, model.d_ffn
    b = 1 if model.biases_enabled else 0
    layernorm = d + b * d
    attention = d * 3 * d + b * 3 * d + d * d + b * d
    ffn_block = d * dff + b * dff + dff * d + b * d
    embeddings = model.vocab_size * d + model.context_length * d

    if routing is None:
        per_layer = 2 * layernorm + attention + model.ffn_width_multiplier * ffn_block
        total = embeddings + model.n_layers * per_layer + layernorm
        return total, total

    n, k = routing.n_experts, routing.top_k
    if routing.strategy == "language":
        router = 0
        n_routers = 0
    else:
        if routing.router_depth == "two_layer":
            hidden = routing.router_hidden if routing.router_hidden is not None else d
            router = d * hidden + b * hidden + hidden * n + b * n
        else:
            router = d * n + b * n
        n_routers = 1 if routing.scope == "global" else model.n_layers

    per_layer = 2 * layernorm + attention + n * ffn_block
    total = embeddings + model.n_layers * per_layer + layernorm + n_routers * router
    active = total - (n - k) * ffn_block * model.n_layers
    return total, active


# --------------------------------------------------------------------------
# Parsing and serialization
# --------------------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError("expected true or false")


def _parse_language_map(text: str) -> dict[str, int] | None:
    if not text:
        return None
    entries: dict[str, int] = {}
    for item in text.split(","):
        code, sep, idx = item.strip().partition(":")
        if not sep or not code:
            raise ValueError(f"bad language_map entry {item!r}; expected code:index")
        entries[code] = int(idx)
    return entries


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, dict):
        return ",".join(f"{code}:{idx}" for code, idx in sorted(value.items()))
    return repr(value) if isinstance(value, float) else str(value)


_MODEL_KEYS = {
    "n_layers": int, "d_model": int, "n_heads": int, "d_ffn": int,
    "vocab_size": int, "context_length": int, "dropout": float,
    "ffn_width_multiplier": int, "biases_enabled": _parse_bool,
}
_ROUTING_KEYS = {
    "n_experts": int, "top_k": int, "unit": str, "scope": str, "strategy": str,
    "router_depth": str, "router_hidden": int, "lambda_balance": float,
    "sequence_pooling": str, "language_map": _parse_language_map,
}
_TRAIN_KEYS = {
    "learning_rate": float, "min_learning_rate": float, "weight_decay": float,
    "iterations": int, "batch_size": int, "grad_accumulation_steps": int,
    "sequence_length": int, "warmup_iterations": int, "seed": int,
    "eval_window": int, "eval_interval": int,
}


def _parse_pairs(text: str, first_line: int = 1) -> list[tuple[str, str, int]]:
    pairs = []
    for offset, raw in enumerate(text.splitlines()):
        lineno = first_line + offset
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigParseError(f"expected key = value, got {raw.strip()!r}", lineno)
        pairs.append((key.strip(), value.strip(), lineno))
    return pairs


def parse_config(text: str, overrides: tuple[str, ...] = ()) -> Experiment:
    """Parse a config document into an Experiment.

    Omitted keys take the paper-scale defaults. `overrides` holds extra
    ``key=value`` strings (command-line --set flags) applied after the
    document; they report as line 0 on error.
    """
    pairs = _parse_pairs(text)
    for item in overrides:
        pairs.extend(_parse_pairs(item, first_line=0))

    model_kw: dict = {}
    routing_kw: dict = {}
    train_kw: dict = {}
    moe = True
    line_of: dict[str, int] = {}

    for key, value, lineno in pairs:
        line_of[key] = lineno
        try:
            if key == "moe":
                moe = _parse_bool(value)
            elif key in _MODEL_KEYS:
                model_kw[key] = _MODEL_KEYS[key](value)
            elif key in _ROUTING_KEYS:
                routing_kw[key] = _ROUTING_KEYS[key](value)
            elif key in _TRAIN_KEYS:
                train_kw[key] = _TRAIN_KEYS[key](value)
            else:
                raise ConfigParseError(f"unknown key {key!r}", lineno)
        except ConfigParseError:
            raise
        except ValueError as exc:
            raise ConfigParseError(f"bad value for {key!r}: {exc}", lineno) from exc

    if not moe and routing_kw:
        key = sorted(routing_kw, key=lambda k: line_of[k])[0]
        raise ConfigParseError(f"routing key {key!r} requires moe = true", line_of[key])

    try:
        experiment = Experiment(
            model=ModelConfig(**model_kw),
            routing=RoutingConfig(**routing_kw) if moe else None,
            train=TrainConfig(**train_kw),
        )
        experiment.validate()
    except ConfigError as exc:
        if isinstance(exc, ConfigParseError):
            raise
        raise ConfigParseError(str(exc), line_of.get(exc.key or "", 0)) from exc
    return experiment


def serialize_config(experiment: Experiment) -> str:
    """Render an Experiment as a canonical config document.

    Every key is written explicitly in a fixed order, so the output parses
    back to an equal Experiment and is a stable digest source.
    """
    lines = []
    for key in _MODEL_KEYS:
        lines.append(f"{key} = {_format_value(getattr(experiment.model, key))}")
    lines.append(f"moe = {_format_value(experiment.routing is not None)}")
    if experiment.routing is not None:
        for key in _ROUTING_KEYS:
            value = getattr(experiment.routing, key)
            if value is None:
                continue  # omitted optional key round-trips to None
            lines.append(f"{key} = {_format_value(value)}")
    for key in _TRAIN_KEYS:
        lines.append(f"{key} = {_format_value(getattr(experiment.train, key))}")
    return "\n".join(lines) + "\n"


def config_digest(experiment: Experiment) -> bytes:
    """32-byte digest of the canonical serialization."""
    return hashlib.sha256(serialize_config(experiment).encode("utf-8")).digest()


def with_seed(experiment: Experiment, seed: int) -> Experiment:
    return replace(experiment, train=replace(experiment.train, seed=seed))
