"""Procedural latent-domain image benchmark and the episodic task sampler.

Images are 16x16 RGB glyphs.  A class is a (shape, colour family) pair: five
shapes, and colour families separated by a fixed hue step.  Each domain applies
a deterministic corruption: hue rotation, colour tint, brightness offset, blur,
rotation, and additive noise.  The per-domain hue rotation is as large as the
gap between colour families, so one image alone cannot always tell which family
it belongs to.  Other images from the same domain can.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ContractError, SamplerError

IMAGE_SIZE = 16
N_SHAPES = 5
FAMILY_HUE_STEP = 0.1  # turns of the colour wheel between colour families

SHAPES = ("disk", "ring", "square", "plus", "triangle")


# ---------------------------------------------------------------- colour


def hue_rotation_matrix(turns: float) -> np.ndarray:
    """Linear RGB map that rotates hue about the grey axis; greys are fixed points."""
    a = 2.0 * np.pi * turns
    c, s = np.cos(a), np.sin(a)
    return np.array([
        [0.213 + c * 0.787 - s * 0.213, 0.715 - c * 0.715 - s * 0.715, 0.072 - c * 0.072 + s * 0.928],
        [0.213 - c * 0.213 + s * 0.143, 0.715 + c * 0.285 + s * 0.140, 0.072 - c * 0.072 - s * 0.283],
        [0.213 - c * 0.213 - s * 0.787, 0.715 - c * 0.715 + s * 0.715, 0.072 + c * 0.928 + s * 0.072],
    ])


def _rotate_hue(img: np.ndarray, turns: float) -> np.ndarray:
    m = hue_rotation_matrix(turns)
    return np.einsum("ij,jhw->ihw", m, img)


# ---------------------------------------------------------------- base glyphs


def _glyph_mask(shape_id: int, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    d = np.hypot(dx, dy)
    name = SHAPES[shape_id]
    if name == "disk":
        return d <= r
    if name == "ring":
        return (d <= r) & (d >= r - 2.2)
    if name == "square":
        return (np.abs(dx) <= 0.8 * r) & (np.abs(dy) <= 0.8 * r)
    if name == "plus":
        arm = 1.3
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    # triangle with apex up
    t = (dy + r) / (1.8 * r)
    return (dy >= -r) & (dy <= 0.8 * r) & (np.abs(dx) <= t * r)


def render_glyph(label: int, rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    shape_id, family = label % N_SHAPES, label // N_SHAPES
    cx, cy = (size - 1) / 2 + rng.uniform(-1.5, 1.5, size=2)
    r = rng.uniform(4.0, 6.0)
    mask = _glyph_mask(shape_id, cx, cy, r, size)
    bg = rng.uniform(0.2, 0.45)
    img = np.full((3, size, size), bg) + rng.normal(0.0, 0.02, size=(3, size, size))
    value = rng.uniform(0.75, 1.0)
    sat = rng.uniform(0.7, 0.9)
    red = np.array([value, value * (1 - sat), value * (1 - sat)])
    colour = hue_rotation_matrix(family * FAMILY_HUE_STEP + rng.uniform(-0.015, 0.015)) @ red
    img[:, mask] = colour[:, None]
    return np.clip(img, 0.0, 1.0)


def make_base_dataset(seed: int, num_classes: int = 10, per_class: int = 100,
                      size: int = IMAGE_SIZE):
    """Class-balanced clean glyphs, labels in class-major order.  Deterministic in ``seed``."""
    if num_classes < 2:
        raise ContractError("need at least two classes")
    rng = np.random.default_rng([seed, 0x6C1F])
    labels = np.repeat(np.arange(num_classes), per_class)
    images = np.stack([render_glyph(int(c), rng, size) for c in labels]).astype(np.float32)
    return images, labels.astype(np.int64)


# ---------------------------------------------------------------- domains


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int = -1
    seed: int = 0
    rotation: float = 0.0     # degrees
    hue_shift: float = 0.0    # turns
    brightness: float = 0.0
    tint: tuple = (0.0, 0.0, 0.0)
    noise: float = 0.0        # std of additive Gaussian noise
    blur: float = 0.0         # Gaussian blur sigma in pixels

    @classmethod
    def sample(cls, seed: int, domain_id: int) -> DomainSpec:
        rng = np.random.default_rng([seed, domain_id, 0xD0])
        return cls(
            domain_id=domain_id,
            seed=seed,
            rotation=float(rng.uniform(-15, 15)),
            hue_shift=float(rng.uniform(-FAMILY_HUE_STEP, FAMILY_HUE_STEP)),
            brightness=float(rng.uniform(-0.1, 0.1)),
            tint=tuple(float(t) for t in rng.uniform(-0.12, 0.12, size=3)),
            noise=float(rng.uniform(0.0, 0.06)),
            blur=float(rng.uniform(0.0, 0.8)),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tint"] = list(self.tint)
        return d


def rotate_image(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate a CHW image about its centre, bilinear, edge values extended."""
    return ndimage.rotate(img, degrees, axes=(2, 1), reshape=False, order=1, mode="nearest")


def apply_domain(image: np.ndarray, d: DomainSpec,
                 noise_rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Apply a domain's corruption to one CHW image; result clamped to [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if d.hue_shift:
        img = _rotate_hue(img, d.hue_shift)
    if d.brightness or any(d.tint):
        img = img + d.brightness + np.asarray(d.tint).reshape(3, 1, 1)
    if d.blur > 0:
        img = ndimage.gaussian_filter(img, sigma=(0, d.blur, d.blur), mode="nearest")
    if d.rotation:
        img = rotate_image(img, d.rotation)
    if d.noise > 0:
        rng = noise_rng or np.random.default_rng([d.seed, d.domain_id, 0x0015E])
        img = img + rng.normal(0.0, d.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.asarray(image).dtype)


# ---------------------------------------------------------------- augmentation


def augment_image(img: np.ndarray, rng: np.random.Generator, p: float = 0.5,
                  max_rotation: float = 30.0, pad: int = 2) -> np.ndarray:
    """Random crop (pad then crop), horizontal flip, small rotation; each with prob ``p``."""
    out = img
    if rng.random() < p:
        padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
        i, j = rng.integers(0, 2 * pad + 1, size=2)
        out = padded[:, i:i + img.shape[1], j:j + img.shape[2]]
    if rng.random() < p:
        out = out[:, :, ::-1]
    if rng.random() < p:
        out = rotate_image(out, rng.uniform(-max_rotation, max_rotation))
    return np.ascontiguousarray(out, dtype=img.dtype)


# ---------------------------------------------------------------- benchmark


@dataclass
class DomainSplit:
    meta_train: list
    meta_val: list
    meta_test: list

    def __post_init__(self):
        a, b, c = set(self.meta_train), set(self.meta_val), set(self.meta_test)
        if a & b or a & c or b & c:
            raise ContractError("domain split lists must be pairwise disjoint")

    @classmethod
    def by_ratio(cls, num_domains: int) -> DomainSplit:
        """4:1:1 split of domain ids ``0..num_domains-1``."""
        n_val = num_domains // 6
        n_test = num_domains // 6
        n_train = num_domains - n_val - n_test
        ids = list(range(num_domains))
        return cls(ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:])

    def all(self) -> list:
        return list(self.meta_train) + list(self.meta_val) + list(self.meta_test)


class Benchmark:
    """Per-domain pools of corrupted images, generated lazily and cached.

    Every domain gets its own freshly rendered glyphs, so no clean image is
    shared between training and evaluation domains.
    """

    def __init__(self, seed: int = 0, num_classes: int = 10, pool_per_class: int = 16,
                 split: Optional[DomainSplit] = None):
        self.seed = seed
        self.num_classes = num_classes
        self.pool_per_class = pool_per_class
        self.split = split or DomainSplit.by_ratio(60)
        self._pools: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def spec(self, domain_id: int) -> DomainSpec:
        return DomainSpec.sample(self.seed, domain_id)

    def pool(self, domain_id: int):
        if domain_id not in self._pools:
            base, labels = make_base_dataset(self.seed * 100003 + domain_id + 1,
                                             self.num_classes, self.pool_per_class)
            spec = self.spec(domain_id)
            rng = np.random.default_rng([self.seed, domain_id, 0xA11])
            imgs = np.stack([apply_domain(im, spec, rng) for im in base])
            self._pools[domain_id] = (imgs, labels)
        return self._pools[domain_id]

    def config(self) -> dict:
        return {"seed": self.seed, "num_classes": self.num_classes,
                "pool_per_class": self.pool_per_class, "split": asdict(self.split)}

    @classmethod
    def from_config(cls, cfg: dict) -> Benchmark:
        split = DomainSplit(**cfg["split"]) if cfg.get("split") else None
        return cls(cfg.get("seed", 0), cfg.get("num_classes", 10), cfg.get("pool_per_class", 16),
                   split)


@dataclass
class Episode:
    support_images: np.ndarray
    support_domains: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    query_domain: int
    task_id: int = 0
    seed: Optional[int] = None

    @property
    def n_support(self) -> int:
        return len(self.support_images)

    @property
    def n_query(self) -> int:
        return len(self.query_images)


def sample_episode(bench: Benchmark, domains: Sequence[int], rng: np.random.Generator,
                   n_domains: int = 5, per_domain: int = 20, n_query: int = 20,
                   augment: bool = False, task_id: int = 0) -> Episode:
    """One latent-domain task: supports spread evenly over ``n_domains`` sampled
    domains, queries drawn from one of them, disjoint from its supports."""
    domains = list(domains)
    if n_domains < 1 or len(domains) < n_domains:
        raise SamplerError(f"cannot sample {n_domains} domains from a split of {len(domains)}")
    chosen = [int(d) for d in rng.choice(domains, size=n_domains, replace=False)]
    qdom = chosen[int(rng.integers(n_domains))]
    sup_x, sup_d = [], []
    qx = qy = None
    for d in chosen:
        imgs, labels = bench.pool(d)
        need = per_domain + (n_query if d == qdom else 0)
        if need > len(imgs):
            raise SamplerError(f"domain {d} has {len(imgs)} images, task needs {need}")
        idx = rng.choice(len(imgs), size=need, replace=False)
        sup_x.append(imgs[idx[:per_domain]])
        sup_d.append(np.full(per_domain, d))
        if d == qdom:
            qx, qy = imgs[idx[per_domain:]], labels[idx[per_domain:]]
    sx = np.concatenate(sup_x)
    sd = np.concatenate(sup_d)
    order = rng.permutation(len(sx))
    sx, sd = sx[order], sd[order]
    if augment:
        sx = np.stack([augment_image(im, rng) for im in sx])
        qx = np.stack([augment_image(im, rng) for im in qx])
    return Episode(np.ascontiguousarray(sx), sd.astype(np.int64), np.ascontiguousarray(qx),
                   qy.astype(np.int64), qdom, task_id)


def make_eval_suite(bench: Benchmark, domains: Sequence[int], num_tasks: int, seed: int,
                    n_domains: int = 5, per_domain: int = 20, n_query: int = 20) -> list:
    """Fixed, augmentation-free list of tasks; the same ``seed`` replays the same suite."""
    if num_tasks < 10:
        raise ContractError(f"an evaluation suite needs at least 10 tasks, got {num_tasks}")
    rng = np.random.default_rng([seed, 0x5E7])
    suite = []
    for t in range(num_tasks):
        ep = sample_episode(bench, domains, rng, n_domains, per_domain, n_query, False, t)
        ep.seed = seed
        suite.append(ep)
    return suite


# ---------------------------------------------------------------- suite I/O

_BLOCKS = ("support_images", "query_images")


def save_suite(suite: Sequence[Episode], directory, meta: Optional[dict] = None) -> str:
    """Write images as one flat little-endian f32 file plus a JSON index.

    Returns the SHA-256 of the image file.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {"format": "ffda-suite-v1", "meta": meta or {}, "tasks": []}
    offset = 0
    digest = hashlib.sha256()
    with open(directory / "images.bin", "wb") as fh:
        for ep in suite:
            entry = {"task_id": int(ep.task_id), "seed": ep.seed,
                     "query_domain": int(ep.query_domain),
                     "support_domains": [int(d) for d in ep.support_domains],
                     "query_labels": [int(y) for y in ep.query_labels]}
            for name in _BLOCKS:
                arr = np.ascontiguousarray(getattr(ep, name), dtype="<f4")
                raw = arr.tobytes()
                fh.write(raw)
                digest.update(raw)
                entry[name] = {"offset": offset, "shape": list(arr.shape)}
                offset += len(raw)
            index["tasks"].append(entry)
    index["sha256"] = digest.hexdigest()
    (directory / "index.json").write_text(json.dumps(index, indent=1))
    return index["sha256"]


def load_suite(directory) -> list:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    blob = (directory / "images.bin").read_bytes()
    suite = []
    for entry in index["tasks"]:
        arrays = {}
        for name in _BLOCKS:
            shape = entry[name]["shape"]
            count = int(np.prod(shape))
            arrays[name] = np.frombuffer(blob, dtype="<f4", count=count,
                                         offset=entry[name]["offset"]).reshape(shape).astype(np.float32)
        suite.append(Episode(arrays["support_images"],
                             np.asarray(entry["support_domains"], dtype=np.int64),
                             arrays["query_images"],
                             np.asarray(entry["query_labels"], dtype=np.int64),
                             int(entry["query_domain"]), int(entry["task_id"]), entry["seed"]))
    return suite
