"""Routing strategies: turn a gating computation into per-unit expert
assignments under {learned, frozen, random, language} strategies, token or
sequence units, and layer-wise or global scope.

Strategy mechanics live in different places:

  learned   the router is an ordinary trainable module.
  frozen    the router is initialized once and excluded from the optimizer
            (see train.trainable_parameters); gradients still flow through
            its gate weights so the rest of the network can adapt to it.
  random    reinit_random_routers() redraws the router from the init
            distribution at the start of every optimizer iteration,
            deterministically in (seed, iteration); never optimized.
  language  no router at all; a hard-coded language -> expert map assigns
            each sequence to one expert with weight 1.0.

Global scope computes one decision at layer 0 and reuses the cached decision
(indices, weights, and probabilities, still attached to the autograd graph)
at every later layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .config import RoutingConfig
from .errors import RoutingError
from .gating import RouterNetwork, gate, pool_sequence

ROUTER_INIT_STD = 0.02


@dataclass
class LanguageMap:
    """Injective language-code -> expert-index map for hard-coded routing."""

    entries: dict[str, int]

    def __post_init__(self) -> None:
        indices = list(self.entries.values())
        if len(set(indices)) != len(indices):
            raise RoutingError("language map must be injective")
        if any(i < 0 for i in indices):
            raise RoutingError("language map indices must be nonnegative")

    def expert_for(self, label: str) -> int:
        if label not in self.entries:
            raise RoutingError(f"no expert mapped for language {label!r}")
        return self.entries[label]


@dataclass
class RoutingDecision:
    """Expert assignment for every routed unit at one layer.

    selected        [U, K] expert indices (highest gate weight first)
    combine_weights [U, K] coefficients, attached to the autograd graph
    probabilities   [U, N] first-softmax router distribution (telemetry and
                    the load-balance P term)

    Unit u is the flattened (batch, position) token index for token routing,
    or the batch index for sequence routing.
    """

    layer: int
    unit: str
    selected: torch.Tensor
    combine_weights: torch.Tensor
    probabilities: torch.Tensor

    @property
    def n_units(self) -> int:
        return self.selected.shape[0]

    @property
    def top_k(self) -> int:
        return self.selected.shape[1]

    def expert_counts(self, n_experts: int) -> torch.Tensor:
        """Selections per expert; sums to n_units * top_k."""
        return torch.bincount(self.selected.reshape(-1), minlength=n_experts)


def route(layer_input: torch.Tensor,
          layer: int,
          routing: RoutingConfig,
          routers: list[RouterNetwork | None],
          labels: list[str] | None = None,
          cache: RoutingDecision | None = None) -> RoutingDecision:
    """Compute the routing decision for one layer's input [B, T, d].

    `routers` holds one router per layer (layer-wise scope) or a router at
    index 0 only (global scope); language strategy needs none. For global
    scope at layer > 0 the cached layer-0 decision is returned unchanged.
    """
    if routing.scope == "global" and layer > 0:
        if cache is None:
            raise RoutingError("global scope needs the cached layer-0 decision")
        return cache

    if routing.strategy == "language":
        if labels is None:
            raise RoutingError("language strategy requires per-sequence labels")
        return language_decision(LanguageMap(routing.language_map or {}), labels,
                                 routing.n_experts, layer,
                                 dtype=layer_input.dtype)

    router = routers[layer] if layer < len(routers) else None
    if router is None:
        raise RoutingError(f"no router available for layer {layer}")

    if routing.unit == "sequence":
        units = pool_sequence(layer_input)  # [B, d]
    else:
        units = layer_input.reshape(-1, layer_input.shape[-1])  # [B*T, d]

    result = gate(router(units), routing.top_k, routing.unit)
    return RoutingDecision(layer=layer, unit=routing.unit,
                           selected=result.selected,
                           combine_weights=result.combine_weights,
                           probabilities=result.probabilities)


def language_decision(language_map: LanguageMap, labels: list[str],
                      n_experts: int, layer: int,
                      dtype: torch.dtype = torch.float32) -> RoutingDecision:
    """Hard-coded assignment: one expert per sequence, gate weight 1.0."""
    indices = torch.tensor([[language_map.expert_for(lab)] for lab in labels],
                           dtype=torch.long)
    weights = torch.ones(len(labels), 1, dtype=dtype)
    probs = torch.zeros(len(labels), n_experts, dtype=dtype)
    probs.scatter_(1, indices, 1.0)
    return RoutingDecision(layer=layer, unit="sequence", selected=indices,
                           combine_weights=weights, probabilities=probs)


def router_generator(seed: int, iteration: int) -> torch.Generator:
    """Deterministic per-iteration generator for random-strategy redraws."""
    generator = torch.Generator()
    generator.manual_seed((seed * 0x9E3779B97F4A7C15 + iteration) & 0x7FFFFFFFFFFFFFFF)
    return generator


def init_router_(router: RouterNetwork, generator: torch.Generator) -> None:
    """Draw router parameters from the standard init distribution in place."""
    with torch.no_grad():
        for name, param in router.named_parameters():
            if name.endswith("bias"):
                param.zero_()
            else:
                param.normal_(0.0, ROUTER_INIT_STD, generator=generator)


def reinit_random_routers(routers: list[RouterNetwork | None],
                          seed: int, iteration: int) -> None:
    """Redraw every router for this optimizer iteration (random strategy)."""
    generator = router_generator(seed, iteration)
    for router in routers:
        if router is not None:
            init_router_(router, generator)
