"""Folder-per-domain datasets, synthetic toy domains and epoch-reshuffled sampling."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .errors import DatasetError, InvalidConfigError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

# (r, g, b) multipliers; domain 0 is the only one with a strong red channel
TINTS = np.array(
    [
        [1.00, 0.22, 0.22],
        [0.22, 1.00, 0.22],
        [0.22, 0.22, 1.00],
        [0.22, 1.00, 1.00],
        [0.50, 0.22, 1.00],
        [0.22, 0.60, 0.35],
        [0.50, 0.50, 0.50],
        [0.22, 0.45, 0.80],
    ],
    dtype=np.float64,
)


def to_unit_range(pixels: np.ndarray) -> np.ndarray:
    """Map 8-bit pixel values linearly onto [-1, 1]."""
    return (np.asarray(pixels, dtype=np.float32) / 127.5 - 1.0).astype(np.float32)


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(images) + 1.0) * 127.5), 0, 255).astype(np.uint8)


@dataclass
class MultiDomainDataset:
    domains: list[str]
    train: list[np.ndarray]  # per domain, (n, C, H, W) float32 in [-1, 1]
    test: list[np.ndarray]
    image_size: int
    train_names: list[list[str]] = field(default_factory=list)
    test_names: list[list[str]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.domains) < 2:
            raise DatasetError(f"need >= 2 domains, got {len(self.domains)}")
        if not (len(self.train) == len(self.test) == len(self.domains)):
            raise DatasetError("train/test partitions must cover every domain")

    @property
    def n_domains(self) -> int:
        return len(self.domains)

    @property
    def image_channels(self) -> int:
        return self.train[0].shape[1]

    def domain_id(self, name: str) -> int:
        try:
            return self.domains.index(name)
        except ValueError:
            raise DatasetError(
                f"unknown domain {name!r}; valid domains: {', '.join(self.domains)}") from None

    def split_arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """All images of a split stacked, with their integer domain labels."""
        parts = self.train if split == "train" else self.test
        images = np.concatenate(parts, axis=0)
        labels = np.concatenate([np.full(len(p), d, dtype=np.int64) for d, p in enumerate(parts)])
        return images, labels

    def export(self, root: str | Path) -> int:
        """Write both splits as ``<root>/<domain>/<name>.png``; returns files written."""
        root = Path(root)
        count = 0
        for d, name in enumerate(self.domains):
            folder = root / name
            folder.mkdir(parents=True, exist_ok=True)
            for images, names in ((self.train[d], self.train_names[d]),
                                  (self.test[d], self.test_names[d])):
                for img, stem in zip(images, names):
                    Image.fromarray(to_uint8(img).transpose(1, 2, 0)).save(folder / f"{stem}.png")
                    count += 1
        return count


def _hash_key(name: str) -> str:
    return hashlib.sha256(name.encode("utf-8")).hexdigest()


def split_names(names: Sequence[str], train_fraction: float) -> tuple[list[str], list[str]]:
    """Deterministic split: order by content hash of the name, cut at the fraction."""
    if not 0.0 < train_fraction <= 1.0:
        raise InvalidConfigError(f"train_fraction must lie in (0, 1], got {train_fraction}")
    ordered = sorted(sorted(names), key=_hash_key)
    n_train = int(round(train_fraction * len(ordered)))
    if len(ordered) > 1:
        n_train = min(max(n_train, 1), len(ordered) - 1) if train_fraction < 1 else len(ordered)
    return sorted(ordered[:n_train]), sorted(ordered[n_train:])


def load_image(path: str | Path, image_size: int, channels: int = 3) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        im = im.resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return to_unit_range(arr.transpose(2, 0, 1))


def load_dataset(root: str | Path, image_size: int, train_fraction: float = 0.8,
                 channels: int = 3) -> MultiDomainDataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    domains = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(domains) < 2:
        raise DatasetError(f"need >= 2 domain folders under {root}, found {len(domains)}")
    train, test, train_names, test_names = [], [], [], []
    for name in domains:
        files = sorted(p for p in (root / name).iterdir()
                       if p.suffix.lower() in IMAGE_SUFFIXES)
        images = {}
        for f in files:
            try:
                images[f.stem] = load_image(f, image_size, channels)
            except (OSError, ValueError) as exc:
                log.warning("skipping undecodable image %s: %s", f, exc)
        if not images:
            raise DatasetError(f"domain {name!r} has no decodable images")
        tr, te = split_names(list(images), train_fraction)
        empty = np.zeros((0, channels, image_size, image_size), np.float32)
        train.append(np.stack([images[s] for s in tr]) if tr else empty)
        test.append(np.stack([images[s] for s in te]) if te else empty)
        train_names.append(tr)
        test_names.append(te)
    return MultiDomainDataset(domains, train, test, image_size, train_names, test_names)


@dataclass(frozen=True)
class SyntheticDomainSpec:
    """Toy domains: shared random-shape content, per-domain color tint and stripes."""

    n_domains: int = 4
    images_per_domain: int = 200
    image_size: int = 32
    seed: int = 0
    train_fraction: float = 0.8
    texture_amplitude: float = 0.12

    def __post_init__(self):
        if self.n_domains < 2:
            raise InvalidConfigError("need >= 2 domains")
        if self.n_domains > len(TINTS):
            raise InvalidConfigError(f"at most {len(TINTS)} synthetic domains are supported")
        if self.images_per_domain < 2:
            raise InvalidConfigError("images_per_domain must be >= 2")
        if self.image_size < 4:
            raise InvalidConfigError("image_size must be >= 4")

    def domain_names(self) -> list[str]:
        return [f"domain{d}" for d in range(self.n_domains)]


def _render_content(rng: np.random.Generator, size: int) -> np.ndarray:
    """Grayscale content in [0, 1]: dim background plus 1-3 bright shapes."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    img = np.full((size, size), rng.uniform(0.15, 0.3))
    for _ in range(rng.integers(1, 4)):
        cx, cy = rng.uniform(0.2, 0.8, size=2) * size
        r = rng.uniform(0.12, 0.3) * size
        level = rng.uniform(0.6, 1.0)
        if rng.random() < 0.5:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2
        else:
            mask = (np.abs(xx - cx) <= r) & (np.abs(yy - cy) <= r)
        img[mask] = level
    return img


def make_synthetic(spec: SyntheticDomainSpec) -> MultiDomainDataset:
    """Render ``images_per_domain`` images for every domain, deterministically in the seed.

    Content is drawn from one distribution shared by all domains; domain ``d``
    multiplies it by tint ``TINTS[d]`` and adds stripes whose frequency and
    orientation depend on ``d``.
    """
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    names = spec.domain_names()
    train, test, train_names, test_names = [], [], [], []
    for d in range(spec.n_domains):
        freq = 2 * np.pi * (1 + d % 4) / size * 2
        stripes = np.sin(freq * (xx if d % 2 == 0 else yy))
        imgs = {}
        for i in range(spec.images_per_domain):
            content = _render_content(rng, size)
            rgb = content[None] * TINTS[d][:, None, None]
            rgb = rgb + spec.texture_amplitude * stripes[None] * content[None]
            pixels = np.clip(np.rint(np.clip(rgb, 0, 1) * 255), 0, 255)
            imgs[f"{names[d]}_{i:05d}"] = to_unit_range(pixels)
        tr, te = split_names(list(imgs), spec.train_fraction)
        train.append(np.stack([imgs[s] for s in tr]))
        test.append(np.stack([imgs[s] for s in te]) if te
                    else np.zeros((0, 3, size, size), np.float32))
        train_names.append(tr)
        test_names.append(te)
    return MultiDomainDataset(names, train, test, size, train_names, test_names)


class DomainSampler:
    """Per-domain sampling without replacement, reshuffled every epoch.

    Holds its own numpy generator; :meth:`state_dict` captures everything
    needed to resume the exact draw sequence.
    """

    def __init__(self, dataset: MultiDomainDataset, seed: int):
        self.dataset = dataset
        self.rng = np.random.default_rng(seed)
        self._perm: list[np.ndarray | None] = [None] * dataset.n_domains
        self._cursor = [0] * dataset.n_domains

    def _next_indices(self, domain: int, n: int) -> np.ndarray:
        size = len(self.dataset.train[domain])
        if size == 0:
            raise DatasetError(f"domain {self.dataset.domains[domain]!r} has no training images")
        out = []
        while len(out) < n:
            if self._perm[domain] is None or self._cursor[domain] >= size:
                self._perm[domain] = self.rng.permutation(size)
                self._cursor[domain] = 0
            take = min(n - len(out), size - self._cursor[domain])
            c = self._cursor[domain]
            out.extend(self._perm[domain][c:c + take].tolist())
            self._cursor[domain] += take
        return np.asarray(out, dtype=np.int64)

    def state_dict(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "perm": [None if p is None else p.tolist() for p in self._perm],
            "cursor": list(self._cursor),
        }

    def load_state_dict(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self._perm = [None if p is None else np.asarray(p, dtype=np.int64) for p in state["perm"]]
        self._cursor = list(state["cursor"])


def sample_batch(dataset: MultiDomainDataset, domain_id: int, n: int,
                 sampler: DomainSampler) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw ``n`` training images of one domain; returns (images, label ids)."""
    if not 0 <= domain_id < dataset.n_domains:
        raise DatasetError(
            f"unknown domain id {domain_id}; dataset has {dataset.n_domains} domains")
    if n < 1:
        raise InvalidConfigError("n must be >= 1")
    idx = sampler._next_indices(domain_id, n)
    images = torch.from_numpy(dataset.train[domain_id][idx])
    return images, torch.full((n,), domain_id, dtype=torch.int64)
