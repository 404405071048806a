"""Network building blocks: conv stack, batch norm, layer norm, linear layers.

Modules hold their weights as :class:`~ffda.tensor.Tensor` attributes.
Trainable weights have ``requires_grad=True``; batch-norm running statistics
are plain tensors without gradients.  Every module can be cloned, cast to
another float dtype, and round-tripped through a flat ``state_dict``.
"""

from __future__ import annotations

import copy
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

MODES = ("train", "eval", "adapt")

# Image tensors inside the conv stacks are channels-last (N, H, W, C); the
# public entry points take and return NCHW.
NCHW_TO_NHWC = (0, 2, 3, 1)
NHWC_TO_NCHW = (0, 3, 1, 2)


class Module:
    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, sub in enumerate(value):
                    yield f"{name}.{i}", sub

    def named_tensors(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name, value in self._children():
            key = prefix + name
            if isinstance(value, Tensor):
                out[key] = value
            else:
                out.update(value.named_tensors(key + "."))
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_tensors().items() if v.requires_grad}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_tensors().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        mine = self.named_tensors()
        if strict and set(mine) != set(state):
            missing = sorted(set(mine) - set(state))
            extra = sorted(set(state) - set(mine))
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, t in mine.items():
            if k not in state:
                continue
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ShapeError(f"{k}: expected shape {t.shape}, got {arr.shape}")
            t.data = np.array(arr, dtype=t.dtype)
            t.grad = None

    def clone(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        """Return a clone whose tensors all have ``dtype``."""
        other = self.clone()
        for t in other.named_tensors().values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return other

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = Tensor(_uniform(rng, (in_dim, out_dim), in_dim), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ShapeError(f"Linear: expected width {self.weight.shape[0]}, got {x.shape}")
        return T.add(T.matmul(x, self.weight), self.bias)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 kernel: int = 5, padding: int = 2, stride: int = 1, zero_init: bool = False,
                 bias: bool = True):
        fan_in = in_ch * kernel * kernel
        w = np.zeros((out_ch, in_ch, kernel, kernel)) if zero_init else \
            _uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                        channels_last=True)


class BatchNorm2d(Module):
    """Batch norm over channels-last images whose running statistics can be
    replaced from an adaptation batch.

    Modes:
      ``train``  batch statistics (from the first ``stat_rows`` examples),
                 gradients flow through them, running stats blended by momentum.
      ``eval``   running statistics only; output is per-example.
      ``adapt``  running statistics are *replaced* by the statistics of the first
                 ``stat_rows`` examples (variance floored at ``eps``) and then
                 used to normalize the whole batch.  Mutates the layer, so call it
                 on a copy.
    """

    def __init__(self, ch: int, eps: float = 1e-5, momentum: float = 0.1):
        self.gamma = Tensor(np.ones(ch), requires_grad=True)
        self.beta = Tensor(np.zeros(ch), requires_grad=True)
        self.running_mean = Tensor(np.zeros(ch))
        self.running_var = Tensor(np.ones(ch))
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor, mode: str = "eval", stat_rows: Optional[int] = None) -> Tensor:
        if mode == "eval":
            out, _, _ = T.batch_norm(x, self.gamma, self.beta, self.eps,
                                     mean=self.running_mean.data, var=self.running_var.data,
                                     channels_last=True)
            return out
        if mode == "train":
            out, mu, var = T.batch_norm(x, self.gamma, self.beta, self.eps, stat_rows=stat_rows,
                                        channels_last=True)
            m = (stat_rows or x.shape[0]) * x.shape[1] * x.shape[2]
            unbiased = var * (m / max(m - 1, 1))
            k = self.momentum
            self.running_mean.data = ((1 - k) * self.running_mean.data + k * mu).astype(mu.dtype)
            self.running_var.data = ((1 - k) * self.running_var.data + k * unbiased).astype(mu.dtype)
            return out
        if mode == "adapt":
            rows = x.data[: (stat_rows or x.shape[0])]
            self.running_mean.data = rows.mean(axis=(0, 1, 2))
            self.running_var.data = np.maximum(rows.var(axis=(0, 1, 2)), self.eps).astype(rows.dtype)
            return self(x, "eval")
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(width), requires_grad=True)
        self.beta = Tensor(np.zeros(width), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class ConvBlock(Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, pool: bool = True):
        # batch norm cancels any per-channel constant, so the conv carries no bias
        self.conv = Conv2d(in_ch, out_ch, rng, bias=False)
        self.bn = BatchNorm2d(out_ch)
        self.pool = pool

    def __call__(self, x: Tensor, mode: str, stat_rows: Optional[int] = None) -> Tensor:
        h = T.relu(self.bn(self.conv(x), mode, stat_rows))
        return T.max_pool2d(h, 2, channels_last=True) if self.pool else h


class FeatureExtractor(Module):
    """Three conv-BN-ReLU blocks, each followed by 2x max-pooling, then flatten.

    Takes NCHW images.  For a 16x16 input and 128 hidden channels the output
    width is 128*2*2 = 512 (flattened in height, width, channel order).
    """

    def __init__(self, rng: np.random.Generator, in_ch: int = 3, hidden: int = 128,
                 image_size: int = 16, n_blocks: int = 3):
        if image_size % (2 ** n_blocks):
            raise ShapeError(f"image size {image_size} not divisible by {2 ** n_blocks}")
        self.in_ch = in_ch
        self.image_size = image_size
        self.blocks = [ConvBlock(in_ch if i == 0 else hidden, hidden, rng) for i in range(n_blocks)]
        self.out_dim = hidden * (image_size // 2 ** n_blocks) ** 2

    def batchnorms(self) -> list[BatchNorm2d]:
        return [b.bn for b in self.blocks]

    def __call__(self, x: Tensor, mode: str = "eval", stat_rows: Optional[int] = None) -> Tensor:
        x = T.as_tensor(x)
        expect = (self.in_ch, self.image_size, self.image_size)
        if x.ndim != 4 or x.shape[1:] != expect:
            raise ShapeError(f"FeatureExtractor: expected (N, {expect}), got {x.shape}")
        x = T.permute(x, NCHW_TO_NHWC)
        for block in self.blocks:
            x = block(x, mode, stat_rows)
        return T.flatten(x)


class Classifier(Module):
    """Two fully connected layers with a ReLU in between."""

    def __init__(self, in_dim: int, num_classes: int, rng: np.random.Generator, hidden: int = 200):
        self.fc1 = Linear(in_dim, hidden, rng)
        self.fc2 = Linear(hidden, num_classes, rng)
        self.in_dim = in_dim
        self.num_classes = num_classes

    def __call__(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.in_dim:
            raise ShapeError(f"Classifier: expected width {self.in_dim}, got {z.shape}")
        return self.fc2(T.relu(self.fc1(z)))


class ContextNet(Module):
    """Support-set summarizer for CML: conv-BN-ReLU twice, then a conv back to the input shape."""

    def __init__(self, rng: np.random.Generator, in_ch: int = 3, hidden: int = 64,
                 zero_init_last: bool = False):
        self.block1 = ConvBlock(in_ch, hidden, rng, pool=False)
        self.block2 = ConvBlock(hidden, hidden, rng, pool=False)
        self.out = Conv2d(hidden, in_ch, rng, zero_init=zero_init_last)
        self.in_ch = in_ch

    def __call__(self, x: Tensor, mode: str = "train") -> Tensor:
        h = self.block2(self.block1(T.permute(x, NCHW_TO_NHWC), mode), mode)
        return T.permute(self.out(h), NHWC_TO_NCHW)


def extract_features(extractor: FeatureExtractor, x, mode: str = "eval") -> Tensor:
    return extractor(T.as_tensor(x), mode)


def classify(classifier: Classifier, z: Tensor) -> Tensor:
    return classifier(z)


def bn_update_stats(extractor: FeatureExtractor, support) -> FeatureExtractor:
    """Copy of ``extractor`` whose BN running stats are the support-batch statistics.

    Statistics are replaced (not blended) layer by layer in one forward pass,
    so each layer sees activations already normalized by the layers before it.
    """
    support = T.as_tensor(support)
    if support.shape[0] < 2:
        raise ContractError(f"bn_update_stats needs at least 2 support images, got {support.shape[0]}")
    adapted = extractor.clone()
    adapted(support, "adapt")
    return adapted
