"""Image-to-image multi-head cross-attention from query features to support features."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .nn import LayerNorm, Module, _uniform
from .tensor import Tensor


class CrossAttention(Module):
    """Projections ``W_q, W_k, W_v`` (C x C/R), output projection ``W`` (C/R x C).

    ``scale="width"`` divides logits by sqrt(C/h) where C is the full feature
    width; ``scale="head"`` uses the per-head width (C/R)/h instead.
    """

    def __init__(self, dim: int, rng: np.random.Generator, heads: int = 8, ratio: int = 2,
                 shared_ln: bool = False, scale: str = "width"):
        if dim % ratio:
            raise ShapeError(f"feature width {dim} not divisible by ratio {ratio}")
        inner = dim // ratio
        if inner % heads:
            raise ShapeError(f"projected width {inner} not divisible by {heads} heads")
        if scale not in ("width", "head"):
            raise ValueError(f"unknown scale {scale!r}")
        self.dim, self.heads, self.ratio, self.inner = dim, heads, ratio, inner
        self.scale = scale
        self.shared_ln = shared_ln
        self.ln_query = LayerNorm(dim)
        self.ln_support = self.ln_query if shared_ln else LayerNorm(dim)
        self.w_q = Tensor(_uniform(rng, (dim, inner), dim), requires_grad=True)
        self.w_k = Tensor(_uniform(rng, (dim, inner), dim), requires_grad=True)
        self.w_v = Tensor(_uniform(rng, (dim, inner), dim), requires_grad=True)
        self.w_o = Tensor(_uniform(rng, (inner, dim), inner), requires_grad=True)

    def _children(self):
        for name, value in super()._children():
            if name == "ln_support" and self.shared_ln:
                continue
            yield name, value

    @property
    def head_width(self) -> int:
        return self.inner // self.heads

    @property
    def temperature(self) -> float:
        width = self.dim / self.heads if self.scale == "width" else self.head_width
        return float(np.sqrt(width))


@dataclass
class AttentionRecord:
    """Attention weights of one task, shape (heads, n_query, n_support)."""

    weights: np.ndarray
    same_domain: Optional[np.ndarray] = None
    task_id: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights)

    @property
    def heads(self) -> int:
        return self.weights.shape[0]

    def with_domains(self, support_domains: Sequence[int], query_domain) -> AttentionRecord:
        _, nq, ns = self.weights.shape
        support_domains = np.asarray(support_domains)
        if support_domains.shape != (ns,):
            raise ValueError(f"expected {ns} support domain labels, got {support_domains.shape}")
        qd = np.broadcast_to(np.asarray(query_domain), (nq,))
        flags = qd[:, None] == support_domains[None, :]
        return AttentionRecord(self.weights, flags, self.task_id)

    def rows(self) -> Iterable[tuple]:
        h, nq, ns = self.weights.shape
        for head in range(h):
            for i in range(nq):
                for j in range(ns):
                    flag = "" if self.same_domain is None else int(self.same_domain[i, j])
                    yield self.task_id, head, i, j, float(self.weights[head, i, j]), flag


CSV_COLUMNS = ("task_id", "head", "query_idx", "support_idx", "weight", "same_domain")


def write_attention_csv(records: Iterable[AttentionRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for rec in records:
            w.writerows(rec.rows())


def read_attention_csv(path) -> list[AttentionRecord]:
    by_task: dict[int, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            by_task.setdefault(int(row["task_id"]), []).append(row)
    out = []
    for task_id, rows in by_task.items():
        h = 1 + max(int(r["head"]) for r in rows)
        nq = 1 + max(int(r["query_idx"]) for r in rows)
        ns = 1 + max(int(r["support_idx"]) for r in rows)
        weights = np.zeros((h, nq, ns))
        flags = np.zeros((nq, ns), dtype=bool)
        has_flags = rows[0]["same_domain"] != ""
        for r in rows:
            weights[int(r["head"]), int(r["query_idx"]), int(r["support_idx"])] = float(r["weight"])
            if has_flags:
                flags[int(r["query_idx"]), int(r["support_idx"])] = r["same_domain"] == "1"
        out.append(AttentionRecord(weights, flags if has_flags else None, task_id))
    return out


def _check_widths(support_feats: Tensor, query_feats: Tensor, omega: CrossAttention):
    if support_feats.ndim != 2 or query_feats.ndim != 2:
        raise ShapeError("cross-attention expects (N, C) feature matrices")
    if support_feats.shape[1] != omega.dim or query_feats.shape[1] != omega.dim:
        raise ShapeError(f"feature widths {support_feats.shape[1]}/{query_feats.shape[1]} "
                         f"do not match attention width {omega.dim}")
    if support_feats.shape[0] < 1 or query_feats.shape[0] < 1:
        raise ContractError("cross-attention needs at least one support and one query")


def _attend(values: Tensor, omega: CrossAttention, weights_for_head) -> Tensor:
    dh = omega.head_width
    heads = []
    for j in range(omega.heads):
        v_j = T.narrow(values, 1, j * dh, dh)
        heads.append(T.matmul(weights_for_head(j), v_j))
    return T.matmul(T.concat(heads, axis=1), omega.w_o)


def cross_attend(support_feats: Tensor, query_feats: Tensor, omega: CrossAttention):
    """Residual update for each query and the attention weights that produced it.

    Returns ``(delta, record)`` with ``delta`` of shape (n_query, C).
    """
    _check_widths(support_feats, query_feats, omega)
    s = omega.ln_support(support_feats)
    q = T.matmul(omega.ln_query(query_feats), omega.w_q)
    k = T.matmul(s, omega.w_k)
    v = T.matmul(s, omega.w_v)
    dh = omega.head_width
    inv_temp = 1.0 / omega.temperature
    attn = []

    def head_weights(j):
        logits = T.matmul(T.narrow(q, 1, j * dh, dh), T.transpose(T.narrow(k, 1, j * dh, dh)))
        a = T.softmax_rows(T.scale(logits, inv_temp))
        attn.append(a.data)
        return a

    delta = _attend(v, omega, head_weights)
    return delta, AttentionRecord(np.stack(attn))


def domain_attention(support_domains, query_domains) -> np.ndarray:
    """Row-stochastic matrix: uniform weight over same-domain supports, zero elsewhere."""
    sd = np.asarray(support_domains)
    qd = np.atleast_1d(np.asarray(query_domains))
    same = (qd[:, None] == sd[None, :]).astype(np.float64)
    counts = same.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ContractError("query domain absent from the support set")
    return same / counts


def supervised_cross_attend(support_feats: Tensor, query_feats: Tensor, support_domains,
                            query_domain, omega: CrossAttention) -> Tensor:
    """Cross-attention with the softmax replaced by fixed domain-label weights in every head."""
    _check_widths(support_feats, query_feats, omega)
    nq = query_feats.shape[0]
    qd = np.broadcast_to(np.asarray(query_domain), (nq,))
    fixed = Tensor(domain_attention(support_domains, qd), dtype=support_feats.dtype)
    v = T.matmul(omega.ln_support(support_feats), omega.w_v)
    return _attend(v, omega, lambda j: fixed)
