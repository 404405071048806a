"""Model parameter bundle and the forward paths used in training and deployment."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import AttentionRecord, CrossAttention, cross_attend, supervised_cross_attend
from .errors import CheckpointError, ContractError
from .nn import Classifier, ContextNet, FeatureExtractor, Module
from .tensor import Tensor

METHOD_TAGS = ("cxda", "erm", "cml")


@dataclass
class ArchConfig:
    num_classes: int = 10
    in_ch: int = 3
    image_size: int = 16
    hidden: int = 128
    classifier_hidden: int = 200
    heads: int = 8
    ratio: int = 2
    context_hidden: int = 64
    shared_ln: bool = False
    attn_scale: str = "width"

    def to_dict(self) -> dict:
        return asdict(self)


class ModelParams(Module):
    """Feature extractor, classifier, and the method-specific adaptation module."""

    def __init__(self, method: str, arch: ArchConfig, rng: np.random.Generator,
                 zero_context: bool = False):
        if method not in METHOD_TAGS:
            raise ValueError(f"unknown method tag {method!r}")
        self.method = method
        self.arch = arch
        self.train_lr = 1e-2    # fine-tuning baselines adapt at a tenth of this
        extra = arch.in_ch if method == "cml" else 0
        self.extractor = FeatureExtractor(rng, arch.in_ch + extra, arch.hidden, arch.image_size)
        self.classifier = Classifier(self.extractor.out_dim, arch.num_classes, rng,
                                     arch.classifier_hidden)
        self.attention: Optional[CrossAttention] = None
        self.context_net: Optional[ContextNet] = None
        if method == "cxda":
            self.attention = CrossAttention(self.extractor.out_dim, rng, arch.heads, arch.ratio,
                                            arch.shared_ln, arch.attn_scale)
        elif method == "cml":
            self.context_net = ContextNet(rng, arch.in_ch, arch.context_hidden,
                                          zero_init_last=zero_context)

    @property
    def feature_dim(self) -> int:
        return self.extractor.out_dim


def build_model(method: str, arch: Optional[ArchConfig] = None, seed: int = 0,
                zero_context: bool = False) -> ModelParams:
    return ModelParams(method, arch or ArchConfig(), np.random.default_rng(seed), zero_context)


# ---------------------------------------------------------------- forward paths


def erm_logits(model: ModelParams, query, mode: str = "eval") -> Tensor:
    return model.classifier(model.extractor(T.as_tensor(query), mode))


def cxda_logits(model: ModelParams, support, query, mode: str = "train"):
    """Joint forward for training: BN statistics come from the support rows only."""
    if model.attention is None:
        raise CheckpointError("model has no cross-attention parameters")
    support, query = T.as_tensor(support), T.as_tensor(query)
    ns = support.shape[0]
    feats = model.extractor(T.concat([support, query], axis=0), mode, stat_rows=ns)
    fs = T.narrow(feats, 0, 0, ns)
    fq = T.narrow(feats, 0, ns, query.shape[0])
    delta, record = cross_attend(fs, fq, model.attention)
    return model.classifier(T.add(fq, delta)), record


def adapt_and_predict(model: ModelParams, support, query):
    """Feed-forward adaptation to one task followed by inference on its queries.

    The extractor's BN statistics are replaced by the support statistics (on a
    private copy) in the same pass that embeds supports and queries; the
    shared ``model`` is never modified.
    """
    support = T.as_tensor(support)
    if support.ndim != 4 or support.shape[0] < 1:
        raise ContractError("adapt_and_predict needs a non-empty support set")
    if model.attention is None:
        raise CheckpointError("model has no cross-attention parameters")
    query = T.as_tensor(query)
    ns = support.shape[0]
    adapted = model.extractor.clone()
    feats = adapted(T.concat([support, query], axis=0), "adapt", stat_rows=ns)
    fs = T.narrow(feats, 0, 0, ns)
    fq = T.narrow(feats, 0, ns, query.shape[0])
    delta, record = cross_attend(fs, fq, model.attention)
    return model.classifier(T.add(fq, delta)), record


def supervised_adapt_and_predict(model: ModelParams, support, query, support_domains,
                                 query_domain) -> Tensor:
    """Same as :func:`adapt_and_predict` but attention is fixed by domain labels."""
    if model.attention is None:
        raise CheckpointError("model has no cross-attention parameters")
    support, query = T.as_tensor(support), T.as_tensor(query)
    ns = support.shape[0]
    adapted = model.extractor.clone()
    feats = adapted(T.concat([support, query], axis=0), "adapt", stat_rows=ns)
    fs = T.narrow(feats, 0, 0, ns)
    fq = T.narrow(feats, 0, ns, query.shape[0])
    delta = supervised_cross_attend(fs, fq, support_domains, query_domain, model.attention)
    return model.classifier(T.add(fq, delta))


def bn_logits(model: ModelParams, support, query) -> Tensor:
    """ERM network with BN statistics replaced by support statistics."""
    support, query = T.as_tensor(support), T.as_tensor(query)
    if support.shape[0] < 2:
        raise ContractError("BN adaptation needs at least 2 support images")
    adapted = model.extractor.clone()
    feats = adapted(T.concat([support, query], axis=0), "adapt", stat_rows=support.shape[0])
    return model.classifier(T.narrow(feats, 0, support.shape[0], query.shape[0]))


def cml_context(model: ModelParams, support, mode: str = "train") -> Tensor:
    """Mean context-network output over the support set, shape (1, C, H, W)."""
    if model.context_net is None:
        raise CheckpointError("model has no context network")
    support = T.as_tensor(support)
    net = model.context_net
    if mode != "train":
        net = net.clone()
        mode = "adapt"
    out = net(support, mode)
    return T.reshape(T.mean(out, axis=0), (1,) + support.shape[1:])


def cml_logits(model: ModelParams, support, query, mode: str = "train") -> Tensor:
    """Context from the supports is appended to every query along the channel axis."""
    query = T.as_tensor(query)
    ctx = cml_context(model, support, "train" if mode == "train" else "eval")
    tiled = T.gather_rows(ctx, np.zeros(query.shape[0], dtype=np.int64))
    x = T.concat([query, tiled], axis=1)
    return model.classifier(model.extractor(x, mode))
