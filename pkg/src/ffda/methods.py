"""One deployment-time interface over every adaptation strategy."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import AttentionRecord
from .data import Episode
from .errors import CheckpointError, ContractError
from .model import (ModelParams, adapt_and_predict, bn_logits, cml_logits, erm_logits,
                    supervised_adapt_and_predict)
from .tensor import Tensor


@dataclass(frozen=True)
class AdaptMethod:
    name: str
    checkpoint: str          # method tag the checkpoint must carry
    needs_backprop: bool = False
    needs_domain_labels: bool = False


METHODS = {
    "erm": AdaptMethod("erm", "erm"),
    "bn": AdaptMethod("bn", "erm"),
    "cml": AdaptMethod("cml", "cml"),
    "cxda": AdaptMethod("cxda", "cxda"),
    "cxda_sup": AdaptMethod("cxda_sup", "cxda", needs_domain_labels=True),
    "ft_em": AdaptMethod("ft_em", "erm", needs_backprop=True),
    "ft_im": AdaptMethod("ft_im", "erm", needs_backprop=True),
}


def get_method(name: str) -> AdaptMethod:
    try:
        return METHODS[name]
    except KeyError:
        raise ValueError(f"unknown method {name!r}; choose from {sorted(METHODS)}") from None


# ---------------------------------------------------------------- unsupervised losses


def ft_em_loss(logits: Tensor) -> Tensor:
    """Mean Shannon entropy (nats) of the row-wise softmax."""
    logp = T.log_softmax_rows(logits)
    p = T.softmax_rows(logits)
    return T.neg(T.mean(T.sum(T.mul(p, logp), axis=1)))


def ft_im_loss(logits: Tensor) -> Tensor:
    """Mean per-example entropy minus the entropy of the mean prediction."""
    if logits.shape[0] < 2:
        raise ContractError("infomax needs at least two examples")
    p = T.softmax_rows(logits)
    p_bar = T.mean(p, axis=0)
    marginal = T.neg(T.sum(T.mul(p_bar, T.log(p_bar))))
    return T.sub(ft_em_loss(logits), marginal)


FT_LOSSES = {"ft_em": ft_em_loss, "ft_im": ft_im_loss}


def fine_tune(model: ModelParams, support, loss_name: str, steps: int, lr: float,
              momentum: float = 0.9, weight_decay: float = 1e-4):
    """Clone ``model`` and take ``steps`` SGD steps on an unsupervised loss over the support."""
    from .train import SGD

    clone = model.clone()
    opt = SGD(clone.named_parameters(), lr, momentum, weight_decay)
    x = T.as_tensor(support)
    losses = []
    for _ in range(steps):
        with T.Tape() as tape:
            loss = FT_LOSSES[loss_name](erm_logits(clone, x, "eval"))
        T.backward(loss, tape)
        opt.step()
        losses.append(float(loss.item()))
    return clone, losses


# ---------------------------------------------------------------- run_task


@dataclass
class TaskResult:
    logits: np.ndarray
    elapsed_ms: float
    record: Optional[AttentionRecord] = None
    ft_losses: list = field(default_factory=list)

    def predictions(self) -> np.ndarray:
        return self.logits.argmax(axis=1)


def check_compatible(method: AdaptMethod, model: ModelParams) -> None:
    if model.method != method.checkpoint:
        raise CheckpointError(f"method {method.name!r} needs a {method.checkpoint!r} checkpoint, "
                              f"got {model.method!r}")


def run_task(method, model: ModelParams, episode: Episode, ft_steps: int = 10,
             ft_lr: float = 1e-3) -> TaskResult:
    """Adapt to one task and predict its queries.  The shared ``model`` is never modified.

    ``elapsed_ms`` covers adaptation and inference.  Fine-tuning methods use
    ``ft_lr`` (one tenth of the training rate by default) for ``ft_steps`` steps.
    """
    method = get_method(method) if isinstance(method, str) else method
    check_compatible(method, model)
    S, Q = episode.support_images, episode.query_images
    record = None
    losses: list = []
    t0 = time.perf_counter()
    if method.name == "erm":
        logits = erm_logits(model, Q, "eval")
    elif method.name == "bn":
        logits = bn_logits(model, S, Q)
    elif method.name == "cml":
        logits = cml_logits(model, S, Q, "eval")
    elif method.name == "cxda":
        logits, record = adapt_and_predict(model, S, Q)
    elif method.name == "cxda_sup":
        logits = supervised_adapt_and_predict(model, S, Q, episode.support_domains,
                                              episode.query_domain)
    else:
        tuned, losses = fine_tune(model, S, method.name, ft_steps, ft_lr)
        logits = erm_logits(tuned, Q, "eval")
    elapsed = (time.perf_counter() - t0) * 1e3
    if record is not None:
        record = record.with_domains(episode.support_domains, episode.query_domain)
        record.task_id = episode.task_id
    return TaskResult(np.asarray(logits.data), elapsed, record, losses)
