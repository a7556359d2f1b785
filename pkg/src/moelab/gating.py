"""Gating math: router networks, softmax, top-K selection, combine weights,
sequence pooling, and the load-balancing auxiliary loss.

Three gate flavors, all operating on router logits h of shape [..., N]:

  top-1          p = softmax(h); the winning expert's output is scaled by its
                 probability p_argmax.
  token top-K    one softmax over the K selected logits gives the combine
                 weights.
  sequence top-K softmax twice: p = softmax(h) first, then a second softmax
                 over the K selected probabilities gives the combine weights.

Ties in the top-K selection always break toward the lowest expert index so
that routing decisions (and the telemetry built from them) are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError, NumericError


@dataclass
class GateResult:
    """One gating outcome per routed unit.

    probabilities   [..., N] first-softmax distribution over experts
    selected        [..., K] expert indices, highest weight first
    combine_weights [..., K] coefficients for the selected experts' outputs
    """

    probabilities: torch.Tensor
    selected: torch.Tensor
    combine_weights: torch.Tensor


def softmax(logits: torch.Tensor) -> torch.Tensor:
    """Numerically stable softmax over the last dimension.

    Subtracts the max before exponentiating; invariant under a constant shift
    of the logits.
    """
    if not torch.isfinite(logits).all():
        raise NumericError("softmax requires finite logits")
    shifted = logits - logits.amax(dim=-1, keepdim=True)
    expd = shifted.exp()
    return expd / expd.sum(dim=-1, keepdim=True)


def top_indices(values: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k largest entries along the last dim, ties to the
    lowest index (stable descending sort)."""
    order = torch.argsort(values, dim=-1, descending=True, stable=True)
    return order[..., :k]


def gate_top1(logits: torch.Tensor) -> GateResult:
    """Top-1 gate: select the argmax expert, weight it by its probability.

    No capacity limit is applied; every routed unit keeps its expert.
    """
    probs = softmax(logits)
    selected = top_indices(probs, 1)
    weights = torch.gather(probs, -1, selected)
    return GateResult(probs, selected, weights)


def gate_topk_token(logits: torch.Tensor, k: int) -> GateResult:
    """Token-level top-K gate: one softmax restricted to the selected logits."""
    _check_k(logits, k)
    probs = softmax(logits)
    selected = top_indices(logits, k)
    weights = softmax(torch.gather(logits, -1, selected))
    return GateResult(probs, selected, weights)


def gate_topk_sequence(logits: torch.Tensor, k: int) -> GateResult:
    """Sequence-level top-K gate: softmax applied twice.

    p = softmax(logits); combine weights = softmax over the K largest
    probabilities themselves. K=1 falls back to the top-1 gate.
    """
    _check_k(logits, k)
    if k == 1:
        return gate_top1(logits)
    probs = softmax(logits)
    selected = top_indices(probs, k)
    weights = softmax(torch.gather(probs, -1, selected))
    return GateResult(probs, selected, weights)


def gate(logits: torch.Tensor, k: int, unit: str) -> GateResult:
    """Dispatch on (K, unit): K=1 is always the top-1 gate."""
    if k == 1:
        _check_k(logits, k)
        return gate_top1(logits)
    if unit == "token":
        return gate_topk_token(logits, k)
    if unit == "sequence":
        return gate_topk_sequence(logits, k)
    raise ConfigError(f"unknown routing unit {unit!r}", key="unit")


def _check_k(logits: torch.Tensor, k: int) -> None:
    n = logits.shape[-1]
    if not 1 <= k <= n:
        raise ConfigError(f"top_k={k} out of range for {n} experts", key="top_k")


def pool_sequence(layer_input: torch.Tensor,
                  mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean of unmasked position vectors: [T, d] -> [d] or [B, T, d] -> [B, d]."""
    if mask is None:
        return layer_input.mean(dim=-2)
    mask = mask.to(layer_input.dtype)
    counts = mask.sum(dim=-1)
    if (counts == 0).any():
        raise DataError("cannot pool a fully masked sequence")
    return (layer_input * mask.unsqueeze(-1)).sum(dim=-2) / counts.unsqueeze(-1)


def load_balance_loss(routed_fractions: torch.Tensor,
                      mean_probabilities: torch.Tensor,
                      lambda_balance: float,
                      n_experts: int) -> torch.Tensor:
    """Auxiliary loss L = lambda * N * sum_i f_i * P_i for one MoE layer.

    f_i is the fraction of routed-unit selections that chose expert i (each of
    the K selections counts once) and P_i the mean router probability of
    expert i. Minimized, over distributions with f = P, by the uniform
    distribution, where it equals lambda.
    """
    if (routed_fractions < 0).any() or (mean_probabilities < 0).any():
        raise NumericError("load_balance_loss requires nonnegative fractions")
    if lambda_balance == 0.0:
        return torch.zeros((), dtype=mean_probabilities.dtype)
    return lambda_balance * n_experts * (routed_fractions * mean_probabilities).sum()


class RouterNetwork(nn.Module):
    """MLP mapping a routed unit's representation to one logit per expert.

    one_layer: a single affine map. two_layer: affine -> GELU -> affine with
    a configurable hidden width (defaults to d_model).
    """

    def __init__(self, d_model: int, n_experts: int, depth: str = "one_layer",
                 hidden: int | None = None, bias: bool = True):
        super().__init__()
        if depth not in ("one_layer", "two_layer"):
            raise ConfigError(f"unknown router depth {depth!r}", key="router_depth")
        self.n_experts = n_experts
        self.depth = depth
        if depth == "two_layer":
            width = hidden if hidden is not None else d_model
            self.fc = nn.Linear(d_model, width, bias=bias)
            self.proj = nn.Linear(width, n_experts, bias=bias)
        else:
            self.fc = None
            self.proj = nn.Linear(d_model, n_experts, bias=bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.fc is not None:
            x = F.gelu(self.fc(x))
        return self.proj(x)
