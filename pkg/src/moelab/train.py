"""Deterministic training loop: gradient accumulation, AdamW with decoupled
weight decay (betas 0.9/0.95, eps 1e-8), linear warmup + cosine decay,
gradient clipping at global norm 1.0, checkpointing, and validation
perplexity with final-window averaging.

A run directory looks like::

    runs/<name>/
        config.txt            canonical config document
        telemetry/            activations.csv, eval.csv
        checkpoints/          final.ckpt (and diagnostic-*.ckpt on divergence)

Two runs with the same config and seed produce identical loss curves; resume
from a checkpoint continues the exact run (parameters, optimizer moments, and
both RNG streams round-trip through the checkpoint file).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, OptimizerEntry, load_checkpoint, save_checkpoint
from .config import Experiment, TrainConfig, serialize_config
from .data import TokenShard, sample_batch
from .errors import DataError, NumericError
from .model import MoeGpt, build_model
from .routing import reinit_random_routers
from .telemetry import TelemetryWriter, activation_counts

ADAM_BETAS = (0.9, 0.95)
ADAM_EPS = 1e-8
GRAD_CLIP_NORM = 1.0
EVAL_STREAM_SEED = 0x45564C31  # fixed: every evaluation sees the same batches


@dataclass
class EvalResult:
    iteration: int
    cross_entropy: float  # nats/token
    perplexity: float


def learning_rate_at(iteration: int, cfg: TrainConfig) -> float:
    """Linear warmup to learning_rate, then cosine decay to min_learning_rate."""
    warmup = cfg.warmup_iterations
    if warmup > 0 and iteration < warmup:
        return cfg.learning_rate * (iteration + 1) / warmup
    if iteration >= cfg.iterations:
        return cfg.min_learning_rate
    span = max(1, cfg.iterations - warmup)
    progress = (iteration - warmup) / span
    coeff = 0.5 * (1.0 + math.cos(math.pi * progress))
    return cfg.min_learning_rate + coeff * (cfg.learning_rate - cfg.min_learning_rate)


def trainable_parameters(model: MoeGpt) -> list[tuple[str, torch.nn.Parameter]]:
    """Parameters the optimizer updates: everything except frozen/random
    routers, which keep their gradients but never step."""
    routing = model.experiment.routing
    exclude: set[int] = set()
    if routing is not None and routing.strategy in ("frozen", "random"):
        exclude = {id(p) for p in model.router_parameters()}
    return [(name, p) for name, p in model.named_parameters() if id(p) not in exclude]


def build_optimizer(model: MoeGpt) -> torch.optim.AdamW:
    """AdamW with weight decay on matrices only (norms and biases undecayed)."""
    cfg = model.experiment.train
    named = trainable_parameters(model)
    decay = [p for _, p in named if p.dim() >= 2]
    no_decay = [p for _, p in named if p.dim() < 2]
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.learning_rate, betas=ADAM_BETAS,
                             eps=ADAM_EPS)


def _optimizer_entries(model: MoeGpt,
                       optimizer: torch.optim.AdamW) -> dict[str, OptimizerEntry]:
    by_id = {id(p): name for name, p in model.named_parameters()}
    entries = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if state:
                entries[by_id[id(p)]] = OptimizerEntry(
                    step=int(state["step"].item()),
                    exp_avg=state["exp_avg"], exp_avg_sq=state["exp_avg_sq"])
    return entries


def _restore_optimizer(model: MoeGpt, optimizer: torch.optim.AdamW,
                       entries: dict[str, OptimizerEntry], dtype: torch.dtype) -> None:
    by_name = dict(model.named_parameters())
    for name, entry in entries.items():
        if name not in by_name:
            raise DataError(f"optimizer state for unknown parameter {name!r}")
        param = by_name[name]
        optimizer.state[param] = {
            "step": torch.tensor(float(entry.step), dtype=torch.float32),
            "exp_avg": entry.exp_avg.to(dtype),
            "exp_avg_sq": entry.exp_avg_sq.to(dtype),
        }


class TrainRun:
    """State of one training run: model, optimizer, RNG streams, counter."""

    def __init__(self, experiment: Experiment, model: MoeGpt,
                 optimizer: torch.optim.AdamW, batch_rng: np.random.Generator,
                 iteration: int = 0, run_dir: Path | None = None):
        self.experiment = experiment
        self.model = model
        self.optimizer = optimizer
        self.batch_rng = batch_rng
        self.iteration = iteration
        self.run_dir = run_dir
        self.eval_history: list[EvalResult] = []
        self.loss_history: list[tuple[int, float, float]] = []  # (it, lm, balance)

    @classmethod
    def fresh(cls, experiment: Experiment, run_dir: str | Path | None = None,
              dtype: torch.dtype = torch.float32, force: bool = False) -> "TrainRun":
        experiment.validate()
        directory = None
        if run_dir is not None:
            directory = Path(run_dir)
            if directory.exists() and any(directory.iterdir()) and not force:
                raise DataError(f"run directory {directory} already exists "
                                "(use force to overwrite)")
            (directory / "telemetry").mkdir(parents=True, exist_ok=True)
            (directory / "checkpoints").mkdir(parents=True, exist_ok=True)
            (directory / "config.txt").write_text(serialize_config(experiment))
        torch.manual_seed(experiment.train.seed)
        model = build_model(experiment, dtype=dtype)
        optimizer = build_optimizer(model)
        batch_rng = np.random.Generator(np.random.PCG64(experiment.train.seed))
        return cls(experiment, model, optimizer, batch_rng, run_dir=directory)

    @classmethod
    def from_checkpoint(cls, path: str | Path,
                        run_dir: str | Path | None = None) -> "TrainRun":
        ck = load_checkpoint(path)
        model = build_model(ck.experiment, dtype=ck.dtype)
        with torch.no_grad():
            for name, param in model.named_parameters():
                if name not in ck.parameters:
                    raise DataError(f"checkpoint is missing parameter {name!r}")
                param.copy_(ck.parameters[name])
        optimizer = build_optimizer(model)
        if ck.optimizer:
            _restore_optimizer(model, optimizer, ck.optimizer, ck.dtype)
        batch_rng = np.random.Generator(np.random.PCG64(ck.experiment.train.seed))
        if ck.numpy_rng_state is not None:
            batch_rng.bit_generator.state = ck.numpy_rng_state
        if ck.torch_rng_state is not None:
            torch.set_rng_state(torch.from_numpy(
                np.frombuffer(ck.torch_rng_state, dtype=np.uint8).copy()))
        directory = Path(run_dir) if run_dir is not None else None
        return cls(ck.experiment, model, optimizer, batch_rng,
                   iteration=ck.iteration, run_dir=directory)

    def save(self, path: str | Path) -> None:
        save_checkpoint(
            path, self.experiment, list(self.model.named_parameters()),
            self.iteration, optimizer_state=_optimizer_entries(self.model, self.optimizer),
            numpy_rng_state=self.batch_rng.bit_generator.state,
            torch_rng_state=bytes(torch.get_rng_state().numpy().tobytes()))

    # ------------------------------------------------------------------
    # The loop
    # ------------------------------------------------------------------

    def train(self, train_shard: TokenShard, val_shard: TokenShard | None = None,
              iterations: int | None = None, eval_batches: int = 8,
              log=None) -> list[EvalResult]:
        """Run optimizer iterations; returns the evaluations performed.

        Each iteration accumulates grad_accumulation_steps micro-batches,
        takes one AdamW step at the scheduled learning rate, and appends one
        activation record per layer. A NaN loss halts with a diagnostic
        checkpoint.
        """
        cfg = self.experiment.train
        routing = self.experiment.routing
        end = cfg.iterations if iterations is None else self.iteration + iterations
        labeled = routing is not None and routing.strategy == "language"
        writer = TelemetryWriter(self.run_dir) if self.run_dir is not None else None
        results: list[EvalResult] = []
        n_experts = routing.n_experts if routing is not None else 0
        n_layers = self.experiment.model.n_layers
        self.model.train()
        try:
            while self.iteration < end:
                it = self.iteration
                if routing is not None and routing.strategy == "random":
                    reinit_random_routers(self.model.router_list(), cfg.seed, it)
                lr = learning_rate_at(it, cfg)
                for group in self.optimizer.param_groups:
                    group["lr"] = lr
                self.optimizer.zero_grad(set_to_none=True)

                counts = np.zeros((n_layers, n_experts), dtype=np.int64)
                lm_total = 0.0
                balance_total = 0.0
                for _ in range(cfg.grad_accumulation_steps):
                    batch = sample_batch(train_shard, cfg.batch_size,
                                         cfg.sequence_length, self.batch_rng,
                                         labeled=labeled)
                    out = self.model(torch.from_numpy(batch.inputs),
                                     targets=torch.from_numpy(batch.targets),
                                     labels=batch.labels)
                    loss = out.total_loss / cfg.grad_accumulation_steps
                    loss.backward()
                    lm_total += float(out.lm_loss.detach())
                    balance_total += float(out.balance_loss.detach())
                    if routing is not None:
                        counts += activation_counts(out.decisions, n_experts)

                lm_mean = lm_total / cfg.grad_accumulation_steps
                balance_mean = balance_total / cfg.grad_accumulation_steps
                self.loss_history.append((it, lm_mean, balance_mean))
                if not math.isfinite(lm_mean + balance_mean):
                    self._halt(it, f"loss diverged (lm={lm_mean}, balance={balance_mean})")
                self._check_gradients(it)

                params = [p for g in self.optimizer.param_groups for p in g["params"]]
                torch.nn.utils.clip_grad_norm_(params, GRAD_CLIP_NORM)
                self.optimizer.step()
                self.iteration = it + 1

                if writer is not None and routing is not None:
                    writer.append_activations(it, counts)
                if val_shard is not None and (
                        self.iteration % cfg.eval_interval == 0 or self.iteration == end):
                    result = evaluate(self.model, val_shard, eval_batches=eval_batches)
                    result.iteration = self.iteration
                    results.append(result)
                    self.eval_history.append(result)
                    if writer is not None:
                        writer.append_eval(result.iteration, result.cross_entropy,
                                           result.perplexity)
                    if log is not None:
                        log(f"iter {self.iteration:>6} lm {lm_mean:.4f} "
                            f"balance {balance_mean:.4f} "
                            f"val_ppl {result.perplexity:.3f} lr {lr:.2e}")
                    self.model.train()
        finally:
            if writer is not None:
                writer.close()
        return results

    def _halt(self, iteration: int, reason: str) -> None:
        where = ""
        if self.run_dir is not None:
            path = self.run_dir / "checkpoints" / f"diagnostic-it{iteration}.ckpt"
            self.save(path)
            where = f"; diagnostic checkpoint at {path}"
        raise NumericError(f"{reason} at iteration {iteration}{where}")

    def _check_gradients(self, iteration: int) -> None:
        for name, p in self.model.named_parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                self._halt(iteration, f"non-finite gradient in {name}")


def evaluate(model: MoeGpt, val_shard: TokenShard, eval_batches: int = 8,
             batch_size: int | None = None,
             sequence_length: int | None = None) -> EvalResult:
    """Mean next-token cross-entropy over a fixed set of deterministic batches.

    The batch stream is seeded with a constant, so every evaluation of a run
    (and any re-evaluation of a checkpoint) sees identical data.
    """
    if val_shard.n_tokens == 0:
        raise DataError("validation shard is empty")
    cfg = model.experiment.train
    routing = model.experiment.routing
    batch_size = batch_size or cfg.batch_size
    sequence_length = sequence_length or cfg.sequence_length
    labeled = routing is not None and routing.strategy == "language"
    rng = np.random.Generator(np.random.PCG64(EVAL_STREAM_SEED))
    was_training = model.training
    model.eval()
    try:
        total = 0.0
        with torch.no_grad():
            for _ in range(eval_batches):
                batch = sample_batch(val_shard, batch_size, sequence_length, rng,
                                     labeled=labeled)
                out = model(torch.from_numpy(batch.inputs),
                            targets=torch.from_numpy(batch.targets),
                            labels=batch.labels)
                total += float(out.lm_loss)
    finally:
        if was_training:
            model.train()
    ce = total / eval_batches
    return EvalResult(iteration=0, cross_entropy=ce, perplexity=math.exp(ce))


def headline_metrics(results: list[EvalResult], window: int) -> tuple[float, float]:
    """Mean (cross_entropy, perplexity) over the final `window` evaluations."""
    if not results:
        raise DataError("no evaluations recorded")
    tail = results[-window:]
    ce = sum(r.cross_entropy for r in tail) / len(tail)
    ppl = sum(r.perplexity for r in tail) / len(tail)
    return ce, ppl


def run_experiment(experiment: Experiment, run_dir: str | Path,
                   train_shard: TokenShard, val_shard: TokenShard,
                   force: bool = False, eval_batches: int = 8,
                   dtype: torch.dtype = torch.float32, log=None) -> dict:
    """Train to completion, save the final checkpoint, report headline metrics."""
    run = TrainRun.fresh(experiment, run_dir=run_dir, dtype=dtype, force=force)
    results = run.train(train_shard, val_shard, eval_batches=eval_batches, log=log)
    checkpoint_path = run.run_dir / "checkpoints" / "final.ckpt"
    run.save(checkpoint_path)
    ce, ppl = headline_metrics(results, experiment.train.eval_window)
    return {"run_dir": str(run.run_dir), "checkpoint": str(checkpoint_path),
            "iterations": run.iteration, "cross_entropy": ce, "perplexity": ppl}
