"""Datasets: a seed-stable synthetic shape generator, a directory-per-class
image folder loader, deterministic splits, and the flip+crop augmentation
used by the training loop. Images live in [0,1] as float32 (N,3,H,W)."""

import json
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigurationError

DATA_SOURCES = ("synthetic_shapes", "image_folder")


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "synthetic_shapes"
    num_samples: int = 2000
    image_size: tuple = (32, 32)
    num_classes: int = 3
    splits: tuple = (0.7, 0.1, 0.2)
    seed: int = 0
    root: str = ""  # image_folder only

    def __post_init__(self):
        if self.source not in DATA_SOURCES:
            raise ConfigurationError(
                f"source must be one of {DATA_SOURCES}, got {self.source!r}"
            )
        if self.num_classes < 2:
            raise ConfigurationError(
                f"num_classes must be >= 2, got {self.num_classes}"
            )
        if self.num_samples < 1:
            raise ConfigurationError(
                f"num_samples must be >= 1, got {self.num_samples}"
            )
        if len(self.image_size) != 2 or min(self.image_size) < 8:
            raise ConfigurationError(
                f"image_size must be (H, W) with sides >= 8, got {self.image_size}"
            )
        if len(self.splits) != 3 or min(self.splits) < 0:
            raise ConfigurationError(
                f"splits must be three non-negative fractions, got {self.splits}"
            )
        if abs(sum(self.splits) - 1.0) > 1e-6:
            raise ConfigurationError(
                f"split fractions must sum to 1, got {self.splits}"
            )
        if self.source == "image_folder" and not self.root:
            raise ConfigurationError("image_folder source needs a root directory")

    def to_dict(self):
        return {
            "source": self.source,
            "num_samples": self.num_samples,
            "image_size": list(self.image_size),
            "num_classes": self.num_classes,
            "splits": list(self.splits),
            "seed": self.seed,
            "root": self.root,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        if "splits" in d:
            d["splits"] = tuple(d["splits"])
        return cls(**d)


@dataclass
class ArrayDataset:
    """In-memory labeled images."""

    images: torch.Tensor  # (N,3,H,W) float32 in [0,1]
    labels: torch.Tensor  # (N,) long

    def __len__(self):
        return self.images.shape[0]

    def subset(self, indices):
        idx = torch.as_tensor(indices, dtype=torch.long)
        return ArrayDataset(self.images[idx], self.labels[idx])


@dataclass
class DataSplits:
    train: ArrayDataset
    val: ArrayDataset
    test: ArrayDataset


# ---------------------------------------------------------------------------
# synthetic shapes

def _coords(h, w):
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return yy.astype(np.float64), xx.astype(np.float64)


def _disk(yy, xx, cy, cx, s):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= s ** 2


def _square(yy, xx, cy, cx, s):
    return (np.abs(yy - cy) <= s) & (np.abs(xx - cx) <= s)


def _triangle(yy, xx, cy, cx, s):
    # apex up: width grows linearly from the apex row to the base row
    inside_rows = (yy >= cy - s) & (yy <= cy + s)
    return inside_rows & (np.abs(xx - cx) <= 0.6 * (yy - (cy - s)))


def _cross(yy, xx, cy, cx, s):
    t = max(1.0, s / 3.0)
    box = (np.abs(yy - cy) <= s) & (np.abs(xx - cx) <= s)
    return box & ((np.abs(yy - cy) <= t) | (np.abs(xx - cx) <= t))


def _ring(yy, xx, cy, cx, s):
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    inner = max(1.0, 0.55 * s)
    return (d2 <= s ** 2) & (d2 >= inner ** 2)


def _stripe(yy, xx, cy, cx, s):
    t = max(1.0, s / 2.5)
    box = (np.abs(yy - cy) <= s) & (np.abs(xx - cx) <= s)
    return box & (np.abs((yy - cy) - (xx - cx)) <= t)


SHAPES = (_disk, _square, _triangle, _cross, _ring, _stripe)


def _render_shape(rng, shape_fn, h, w):
    yy, xx = _coords(h, w)
    side = min(h, w)
    s = side * rng.uniform(0.22, 0.34)
    cy = h / 2 + rng.uniform(-h / 8, h / 8)
    cx = w / 2 + rng.uniform(-w / 8, w / 8)
    mask = shape_fn(yy, xx, cy, cx, s)
    bg = rng.uniform(0.0, 0.25, size=3)
    fg = rng.uniform(0.6, 1.0, size=3)
    img = np.empty((3, h, w))
    for c in range(3):
        img[c] = np.where(mask, fg[c], bg[c])
    img += rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_dataset(spec):
    """Parametric shapes on plain backgrounds, class = shape type.

    Labels are assigned round-robin (class histogram uniform within one) and
    the order is then shuffled, all driven by the spec seed, so the same
    spec gives a bit-identical dataset.
    """
    if spec.source != "synthetic_shapes":
        raise ConfigurationError(f"spec source is {spec.source!r}")
    if spec.num_classes > len(SHAPES):
        raise ConfigurationError(
            f"at most {len(SHAPES)} shape classes available, "
            f"asked for {spec.num_classes}"
        )
    rng = np.random.default_rng(spec.seed)
    h, w = spec.image_size
    n = spec.num_samples
    labels = np.arange(n) % spec.num_classes
    images = np.empty((n, 3, h, w), dtype=np.float32)
    for i in range(n):
        images[i] = _render_shape(rng, SHAPES[labels[i]], h, w)
    order = rng.permutation(n)
    return ArrayDataset(
        images=torch.from_numpy(images[order]),
        labels=torch.from_numpy(labels[order]).long(),
    )


# ---------------------------------------------------------------------------
# image folders

_IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


def _load_image_file(path, size):
    img = Image.open(path).convert("RGB")
    h, w = size
    # resize the short side, then center crop
    scale = max(h / img.height, w / img.width)
    img = img.resize(
        (max(w, round(img.width * scale)), max(h, round(img.height * scale))),
        Image.BILINEAR,
    )
    left = (img.width - w) // 2
    top = (img.height - h) // 2
    img = img.crop((left, top, left + w, top + h))
    arr = np.asarray(img).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1)


def load_image_folder(spec):
    """Directory-per-class layout: root/<class>/<image>. A labels.csv at the
    root ("relative_path,label" lines) overrides the directory labels."""
    if spec.source != "image_folder":
        raise ConfigurationError(f"spec source is {spec.source!r}")
    root = spec.root
    if not os.path.isdir(root):
        raise ConfigurationError(f"dataset root {root!r} is not a directory")
    index = os.path.join(root, "labels.csv")
    entries = []
    if os.path.isfile(index):
        with open(index) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                rel, label = line.rsplit(",", 1)
                entries.append((os.path.join(root, rel), int(label)))
    else:
        classes = sorted(
            d for d in os.listdir(root)
            if os.path.isdir(os.path.join(root, d))
        )
        if not classes:
            raise ConfigurationError(f"no class directories under {root!r}")
        for label, cls in enumerate(classes):
            cdir = os.path.join(root, cls)
            for name in sorted(os.listdir(cdir)):
                if name.lower().endswith(_IMAGE_EXTS):
                    entries.append((os.path.join(cdir, name), label))
    if not entries:
        raise ConfigurationError(f"no images found under {root!r}")
    bad = [lb for _, lb in entries if not 0 <= lb < spec.num_classes]
    if bad:
        raise ConfigurationError(
            f"labels outside [0, {spec.num_classes}): {sorted(set(bad))}"
        )
    images = torch.stack([_load_image_file(p, spec.image_size) for p, _ in entries])
    labels = torch.tensor([lb for _, lb in entries], dtype=torch.long)
    return ArrayDataset(images, labels)


# ---------------------------------------------------------------------------
# splits and augmentation

def split_dataset(dataset, fractions, seed):
    """Disjoint train/val/test split by a seeded permutation. Sizes are
    round(f*N) for train and val, remainder to test."""
    n = len(dataset)
    rng = np.random.default_rng(seed)
    order = torch.from_numpy(rng.permutation(n))
    n_train = round(fractions[0] * n)
    n_val = round(fractions[1] * n)
    return DataSplits(
        train=dataset.subset(order[:n_train]),
        val=dataset.subset(order[n_train:n_train + n_val]),
        test=dataset.subset(order[n_train + n_val:]),
    )


def load_dataset(spec):
    """Build the dataset named by the spec and split it."""
    if spec.source == "synthetic_shapes":
        full = generate_synthetic_dataset(spec)
    else:
        full = load_image_folder(spec)
    return split_dataset(full, spec.splits, spec.seed)


def save_array_dataset(dataset, spec, path):
    """Archive a dataset together with the spec that produced it."""
    np.savez(
        path,
        images=dataset.images.numpy(),
        labels=dataset.labels.numpy(),
        spec=np.array(json.dumps(spec.to_dict())),
    )
    return path


def load_array_dataset(path):
    """Load a dataset archive; returns (ArrayDataset, DatasetSpec)."""
    try:
        data = np.load(path, allow_pickle=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ConfigurationError(f"unreadable dataset archive {path}: {exc}") from exc
    for key in ("images", "labels", "spec"):
        if key not in data:
            raise ConfigurationError(f"dataset archive {path} missing {key!r}")
    spec = DatasetSpec.from_dict(json.loads(str(data["spec"])))
    return ArrayDataset(
        images=torch.from_numpy(data["images"]),
        labels=torch.from_numpy(data["labels"]).long(),
    ), spec


def augment_batch(images, generator, pad=4):
    """Random horizontal flip plus random crop after zero padding."""
    n, _, h, w = images.shape
    flip = torch.rand(n, generator=generator) < 0.5
    out = torch.where(flip.view(-1, 1, 1, 1), images.flip(-1), images)
    padded = F.pad(out, (pad, pad, pad, pad))
    tops = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
    lefts = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
    crops = [
        padded[i, :, tops[i]:tops[i] + h, lefts[i]:lefts[i] + w]
        for i in range(n)
    ]
    return torch.stack(crops)
