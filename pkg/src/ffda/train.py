"""Episodic meta-training with SGD, periodic validation and best-checkpoint selection."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import Benchmark, Episode, make_eval_suite, sample_episode
from .errors import ConfigError, NumericError
from .model import ArchConfig, ModelParams, build_model, cml_logits, cxda_logits, erm_logits
from .tensor import Tensor

log = logging.getLogger(__name__)


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay (decay added to the gradient)."""

    def __init__(self, params: dict, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.state: dict[str, np.ndarray] = {}

    def step(self) -> None:
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf = self.state.get(name)
            buf = g if buf is None else self.momentum * buf + g
            self.state[name] = buf
            if self.lr:
                p.data = (p.data - self.lr * buf).astype(p.data.dtype)
            p.grad = None


@dataclass
class TrainConfig:
    method: str = "cxda"
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    steps_per_epoch: int = 100
    eval_every: int = 2
    early_stop_metric: str = "accuracy"
    seed: int = 0
    n_domains: int = 5
    per_domain: int = 20
    n_query: int = 20
    augment: bool = True
    val_tasks: int = 100
    val_seed: int = 1
    arch: dict = field(default_factory=lambda: ArchConfig().to_dict())

    def __post_init__(self):
        if self.lr < 0 or self.epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("need lr >= 0, epochs >= 1, steps_per_epoch >= 1")
        if self.method not in ("cxda", "erm", "cml"):
            raise ConfigError(f"cannot train method {self.method!r}")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


def episode_loss(model: ModelParams, episode: Episode) -> Tensor:
    """Mean query cross-entropy for the model's method, in training mode."""
    S, Q, y = episode.support_images, episode.query_images, episode.query_labels
    if model.method == "cxda":
        logits, _ = cxda_logits(model, S, Q, "train")
    elif model.method == "cml":
        logits = cml_logits(model, S, Q, "train")
    else:
        logits = erm_logits(model, Q, "train")
    return T.cross_entropy(logits, y)


def _snapshot(model: ModelParams, step) -> dict:
    return {"step": step, "param_norms": {k: float(np.linalg.norm(v.data))
                                          for k, v in model.named_parameters().items()}}


def train_step(model: ModelParams, optimizer: SGD, episode: Episode, step: int = 0) -> float:
    """One Algorithm-style update: forward the task, back-propagate, apply SGD."""
    with T.Tape() as tape:
        loss = episode_loss(model, episode)
    value = float(loss.item())
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value} at step {step}", _snapshot(model, step))
    T.backward(loss, tape)
    optimizer.step()
    for name, p in model.named_parameters().items():
        if not np.all(np.isfinite(p.data)):
            raise NumericError(f"parameter {name} became non-finite at step {step}",
                               _snapshot(model, step))
    return value


def train_cml_step(model: ModelParams, optimizer: SGD, episode: Episode, step: int = 0) -> float:
    if model.context_net is None:
        raise ConfigError("CML training needs a model with a context network")
    return train_step(model, optimizer, episode, step)


@dataclass
class CheckpointSet:
    best: Path
    log: Path
    best_val: float
    best_epoch: int
    history: list


LOG_COLUMNS = ("epoch", "step", "loss", "val_avg", "val_w10")


def validate(model: ModelParams, suite) -> tuple[float, float]:
    from .metrics import evaluate_model

    report = evaluate_model(model.method, model, suite, seed=0)
    return report.average, report.worst_decile


def train(config: TrainConfig, bench: Benchmark, out_dir, val_suite=None,
          progress: bool = False) -> CheckpointSet:
    """Run ``epochs * steps_per_epoch`` episodes and keep the best-by-validation checkpoint.

    Validation runs before training (epoch 0), every ``eval_every`` epochs, and
    after the final epoch.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if val_suite is None:
        if not bench.split.meta_val:
            raise ConfigError("validation split is empty")
        val_suite = make_eval_suite(bench, bench.split.meta_val, config.val_tasks, config.val_seed,
                                    config.n_domains, config.per_domain, config.n_query)
    if len(val_suite) == 0:
        raise ConfigError("validation suite is empty")
    model = build_model(config.method, ArchConfig(**config.arch), seed=config.seed)
    opt = SGD(model.named_parameters(), config.lr, config.momentum, config.weight_decay)
    rng = np.random.default_rng([config.seed, 0x7EA1])
    best_path = out_dir / "best.ckpt"
    log_path = out_dir / "train_log.csv"
    history = []

    def checkpoint(epoch, val_avg):
        save_checkpoint(best_path, model, config.to_dict(), config.seed,
                        {"epoch": epoch, "val_avg": val_avg})

    val_avg, val_w10 = validate(model, val_suite)
    best_val, best_epoch = val_avg, 0
    checkpoint(0, val_avg)
    history.append({"epoch": 0, "step": 0, "loss": "", "val_avg": val_avg, "val_w10": val_w10})
    step = 0
    t0 = time.perf_counter()
    with open(log_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        writer.writerow(history[0])
        for epoch in range(1, config.epochs + 1):
            losses = []
            for _ in range(config.steps_per_epoch):
                step += 1
                ep = sample_episode(bench, bench.split.meta_train, rng, config.n_domains,
                                    config.per_domain, config.n_query, config.augment)
                loss = train_step(model, opt, ep, step)
                losses.append(loss)
                writer.writerow({"epoch": epoch, "step": step, "loss": f"{loss:.6f}",
                                 "val_avg": "", "val_w10": ""})
            if epoch % config.eval_every == 0 or epoch == config.epochs:
                val_avg, val_w10 = validate(model, val_suite)
                row = {"epoch": epoch, "step": step, "loss": "", "val_avg": val_avg,
                       "val_w10": val_w10}
                writer.writerow(row)
                history.append(row)
                if val_avg > best_val:
                    best_val, best_epoch = val_avg, epoch
                    checkpoint(epoch, val_avg)
                msg = (f"[{config.method} seed={config.seed}] epoch {epoch} step {step} "
                       f"loss {np.mean(losses):.4f} val {val_avg:.1f} (w10 {val_w10:.1f}) "
                       f"{time.perf_counter() - t0:.0f}s")
                log.info(msg)
                if progress:
                    print(msg, flush=True)
            fh.flush()
    return CheckpointSet(best_path, log_path, best_val, best_epoch, history)
