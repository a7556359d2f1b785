"""Decoder-only transformer whose FFN in every block is either a dense
feed-forward (width-multiplied baseline) or an N-expert mixture combined per
the gating module.

Pre-norm blocks, learned position embeddings, GELU FFNs, tied LM head,
init normal(0, 0.02) for weights and zeros for biases. Attention is the
explicit masked implementation so the same code path runs in float32 and
float64 with a fixed reduction order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import Experiment, count_parameters
from .errors import DataError, NumericError
from .gating import load_balance_loss, RouterNetwork
from .routing import RoutingDecision, route

INIT_STD = 0.02


class LayerNorm(nn.Module):
    """LayerNorm with an optional bias (nn.LayerNorm cannot drop it alone)."""

    def __init__(self, ndim: int, bias: bool):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(ndim))
        self.bias = nn.Parameter(torch.zeros(ndim)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.layer_norm(x, self.weight.shape, self.weight, self.bias, 1e-5)


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, context_length: int,
                 dropout: float, bias: bool):
        super().__init__()
        self.n_heads = n_heads
        self.d_model = d_model
        self.c_attn = nn.Linear(d_model, 3 * d_model, bias=bias)
        self.c_proj = nn.Linear(d_model, d_model, bias=bias)
        self.attn_dropout = nn.Dropout(dropout)
        self.resid_dropout = nn.Dropout(dropout)
        mask = torch.tril(torch.ones(context_length, context_length, dtype=torch.bool))
        self.register_buffer("causal_mask", mask.view(1, 1, context_length, context_length),
                             persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, C = x.shape
        q, k, v = self.c_attn(x).split(self.d_model, dim=2)
        hs = C // self.n_heads
        q = q.view(B, T, self.n_heads, hs).transpose(1, 2)
        k = k.view(B, T, self.n_heads, hs).transpose(1, 2)
        v = v.view(B, T, self.n_heads, hs).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) * (1.0 / math.sqrt(hs))
        att = att.masked_fill(~self.causal_mask[:, :, :T, :T], float("-inf"))
        att = F.softmax(att, dim=-1)
        att = self.attn_dropout(att)
        y = (att @ v).transpose(1, 2).contiguous().view(B, T, C)
        return self.resid_dropout(self.c_proj(y))


class FeedForward(nn.Module):
    """fc -> GELU -> proj -> dropout; used both as a dense block and as one
    expert, so the two stay bit-compatible."""

    def __init__(self, d_model: int, d_ffn: int, dropout: float, bias: bool):
        super().__init__()
        self.c_fc = nn.Linear(d_model, d_ffn, bias=bias)
        self.c_proj = nn.Linear(d_ffn, d_model, bias=bias)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.dropout(self.c_proj(F.gelu(self.c_fc(x))))


class DenseFFN(nn.Module):
    """Width-multiplied dense baseline: `multiplier` duplicated FFN blocks
    with summed outputs (the counting-equivalent of a wider FFN)."""

    def __init__(self, d_model: int, d_ffn: int, multiplier: int,
                 dropout: float, bias: bool):
        super().__init__()
        self.blocks = nn.ModuleList(
            FeedForward(d_model, d_ffn, dropout, bias) for _ in range(multiplier))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.blocks[0](x)
        for block in self.blocks[1:]:
            out = out + block(x)
        return out


class MoEFFN(nn.Module):
    """N identically shaped expert FFNs combined per a routing decision."""

    def __init__(self, d_model: int, d_ffn: int, n_experts: int,
                 dropout: float, bias: bool):
        super().__init__()
        self.n_experts = n_experts
        self.experts = nn.ModuleList(
            FeedForward(d_model, d_ffn, dropout, bias) for _ in range(n_experts))

    def forward(self, x: torch.Tensor, decision: RoutingDecision) -> torch.Tensor:
        B, T, C = x.shape
        weights = decision.combine_weights.to(x.dtype)
        if decision.unit == "token":
            units = x.reshape(-1, C)
            out = torch.zeros_like(units)
            for i, expert in enumerate(self.experts):
                rows, ks = (decision.selected == i).nonzero(as_tuple=True)
                if rows.numel() == 0:
                    continue
                out.index_add_(0, rows, expert(units[rows]) * weights[rows, ks].unsqueeze(-1))
            return out.view(B, T, C)
        # sequence unit: one decision per batch row applies to all T positions
        out = torch.zeros_like(x)
        for i, expert in enumerate(self.experts):
            rows, ks = (decision.selected == i).nonzero(as_tuple=True)
            if rows.numel() == 0:
                continue
            out.index_add_(0, rows, expert(x[rows]) * weights[rows, ks].view(-1, 1, 1))
        return out


class Block(nn.Module):
    def __init__(self, experiment: Experiment):
        super().__init__()
        cfg = experiment.model
        bias = cfg.biases_enabled
        self.ln_1 = LayerNorm(cfg.d_model, bias)
        self.attn = CausalSelfAttention(cfg.d_model, cfg.n_heads,
                                        cfg.context_length, cfg.dropout, bias)
        self.ln_2 = LayerNorm(cfg.d_model, bias)
        if experiment.routing is not None:
            self.moe = MoEFFN(cfg.d_model, cfg.d_ffn, experiment.routing.n_experts,
                              cfg.dropout, bias)
            self.ffn = None
        else:
            self.moe = None
            self.ffn = DenseFFN(cfg.d_model, cfg.d_ffn, cfg.ffn_width_multiplier,
                                cfg.dropout, bias)

    def forward(self, x: torch.Tensor, decide=None):
        x = x + self.attn(self.ln_1(x))
        h = self.ln_2(x)
        if self.moe is not None:
            decision = decide(h)
            return x + self.moe(h, decision), decision
        return x + self.ffn(h), None


@dataclass
class ModelOutput:
    logits: torch.Tensor
    lm_loss: torch.Tensor | None
    balance_loss: torch.Tensor
    decisions: list[RoutingDecision]

    @property
    def total_loss(self) -> torch.Tensor:
        if self.lm_loss is None:
            raise DataError("no loss available: sequence too short and no targets")
        return self.lm_loss + self.balance_loss


class MoeGpt(nn.Module):
    """GPT-style decoder with a dense or MoE FFN in every block."""

    def __init__(self, experiment: Experiment):
        super().__init__()
        experiment.validate()
        self.experiment = experiment
        cfg = experiment.model
        routing = experiment.routing
        self.wte = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.wpe = nn.Embedding(cfg.context_length, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(Block(experiment) for _ in range(cfg.n_layers))
        self.ln_f = LayerNorm(cfg.d_model, cfg.biases_enabled)
        # routers keyed by layer index; language routing has none and global
        # scope has one at layer 0 only
        self.routers = nn.ModuleDict()
        if routing is not None and routing.strategy != "language":
            layers = [0] if routing.scope == "global" else range(cfg.n_layers)
            for i in layers:
                self.routers[str(i)] = RouterNetwork(
                    cfg.d_model, routing.n_experts, routing.router_depth,
                    routing.router_hidden, cfg.biases_enabled)

    def router_list(self) -> list[RouterNetwork | None]:
        return [self.routers[str(i)] if str(i) in self.routers else None
                for i in range(self.experiment.model.n_layers)]

    def router_parameters(self) -> list[nn.Parameter]:
        return list(self.routers.parameters())

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, tokens: torch.Tensor, targets: torch.Tensor | None = None,
                labels: list[str] | None = None) -> ModelOutput:
        cfg = self.experiment.model
        routing = self.experiment.routing
        if tokens.dim() != 2:
            raise DataError(f"tokens must be [B, T], got shape {tuple(tokens.shape)}")
        B, T = tokens.shape
        if T > cfg.context_length:
            raise DataError(f"sequence length {T} exceeds context_length {cfg.context_length}")
        if int(tokens.max()) >= cfg.vocab_size or int(tokens.min()) < 0:
            raise DataError("token id out of range for vocab_size")

        pos = torch.arange(T, device=tokens.device)
        x = self.drop(self.wte(tokens) + self.wpe(pos))

        dtype = x.dtype
        decisions: list[RoutingDecision] = []
        balance = torch.zeros((), dtype=dtype)
        cache: RoutingDecision | None = None
        routers = self.router_list()
        for i, block in enumerate(self.blocks):
            if routing is None:
                x, _ = block(x)
                continue
            decide = lambda h, i=i, cache=cache: route(h, i, routing, routers,
                                                       labels=labels, cache=cache)
            x, decision = block(x, decide)
            decisions.append(decision)
            if routing.scope == "global" and i == 0:
                cache = decision
            if routing.lambda_balance > 0.0:
                counts = decision.expert_counts(routing.n_experts).to(dtype)
                fractions = counts / counts.sum()
                balance = balance + load_balance_loss(
                    fractions, decision.probabilities.mean(dim=0).to(dtype),
                    routing.lambda_balance, routing.n_experts)

        x = self.ln_f(x)
        logits = F.linear(x, self.wte.weight)  # tied LM head

        lm_loss = None
        if targets is not None:
            lm_loss = F.cross_entropy(logits.reshape(-1, cfg.vocab_size),
                                      targets.reshape(-1))
        elif T >= 2:
            lm_loss = F.cross_entropy(logits[:, :-1].reshape(-1, cfg.vocab_size),
                                      tokens[:, 1:].reshape(-1))
        return ModelOutput(logits, lm_loss, balance, decisions)

    @torch.no_grad()
    def greedy_generate(self, prompt: torch.Tensor, max_new_tokens: int,
                        labels: list[str] | None = None) -> torch.Tensor:
        """Minimal greedy sampler for smoke testing."""
        ctx = self.experiment.model.context_length
        tokens = prompt.clone()
        for _ in range(max_new_tokens):
            window = tokens[:, -ctx:]
            logits = self.forward(window, labels=labels).logits
            nxt = logits[:, -1, :].argmax(dim=-1, keepdim=True)
            tokens = torch.cat([tokens, nxt], dim=1)
        return tokens


def build_model(experiment: Experiment,
                dtype: torch.dtype = torch.float32) -> MoeGpt:
    """Construct and deterministically initialize a model.

    Weights are drawn normal(0, 0.02), biases zeroed, norm weights set to
    one, in registration order from a generator seeded with the experiment's
    seed: two builds from the same config are bitwise equal.
    """
    model = MoeGpt(experiment).to(dtype)
    generator = torch.Generator()
    generator.manual_seed(experiment.train.seed)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if param.dim() >= 2:
                param.normal_(0.0, INIT_STD, generator=generator)
            elif name.endswith("bias"):
                param.zero_()
            else:
                param.fill_(1.0)
    expected_total, _ = count_parameters(experiment.model, experiment.routing)
    actual = model.parameter_count()
    if actual != expected_total:
        raise NumericError(f"parameter accounting mismatch: built {actual}, "
                           f"counted {expected_total}")
    return model
