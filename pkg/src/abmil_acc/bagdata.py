"""Bag datasets: synthetic Gaussian pools, IDX digit files, bag construction."""
from __future__ import annotations

import gzip
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import bag_label, read_tensor_file, write_tensor_file
from .seeding import substream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SPLITS = ("train", "val", "test")


class IdxFormatError(ValueError):
    pass


@dataclass
class Pool:
    features: np.ndarray  # [N, d]
    labels: np.ndarray  # [N] integer class ids

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ValueError(f"pool has {len(self.features)} vectors but {len(self.labels)} labels")
        if len(self.labels) == 0:
            raise ValueError("empty pool")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class BagSpec:
    n_train_bags: int = 40
    n_val_bags: int = 12
    n_test_bags: int = 20
    instances_per_bag: int = 50
    key_fraction: float = 0.1
    key_class: int = 9
    positive_bag_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("n_train_bags", "n_val_bags", "n_test_bags", "instances_per_bag"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 < self.key_fraction <= 1:
            raise ValueError(f"key_fraction must exceed 0 and be at most 1, got {self.key_fraction}")
        if not 0 <= self.positive_bag_fraction <= 1:
            raise ValueError(f"positive_bag_fraction must be in [0, 1], got {self.positive_bag_fraction}")
        if self.n_keys < 1:
            raise ValueError(
                f"key_fraction * instances_per_bag = {self.key_fraction * self.instances_per_bag} "
                "gives no key instance in positive bags"
            )

    @classmethod
    def full_scale(cls, seed: int = 0) -> BagSpec:
        """Large preset: 100/30/60 bags of 500 instances with 5% keys."""
        return cls(100, 30, 60, 500, 0.05, 9, 0.5, seed)

    @property
    def n_keys(self) -> int:
        return round(self.key_fraction * self.instances_per_bag)

    def bag_counts(self) -> dict[str, int]:
        return dict(zip(SPLITS, (self.n_train_bags, self.n_val_bags, self.n_test_bags)))


@dataclass
class Bag:
    instances: np.ndarray
    instance_labels: np.ndarray
    bag_label: int
    split: str
    pool_indices: np.ndarray = field(repr=False, default=None)

    def __len__(self) -> int:
        return len(self.instance_labels)


@dataclass
class Dataset:
    train: list[Bag]
    val: list[Bag]
    test: list[Bag]
    spec: BagSpec | None = None

    def split(self, name: str) -> list[Bag]:
        return getattr(self, name)

    @property
    def input_dim(self) -> int:
        return self.train[0].instances.shape[1]


def make_synthetic_pool(seed: int, n_classes: int = 10, input_dim: int = 16,
                        samples_per_class: int = 200, radius: float = 3.0,
                        min_separation: float = 2.0) -> Pool:
    """Class-conditional unit-variance Gaussians with means on a sphere.

    Means are redrawn until every pair is more than ``min_separation`` apart.
    """
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    rng = substream(seed, "dataset")
    for _ in range(1000):
        means = rng.standard_normal((n_classes, input_dim))
        means *= radius / np.linalg.norm(means, axis=1, keepdims=True)
        gaps = np.linalg.norm(means[:, None] - means[None], axis=-1)
        if gaps[np.triu_indices(n_classes, 1)].min() > min_separation:
            break
    else:
        raise ValueError(f"could not place {n_classes} means {min_separation} apart in {input_dim} dims")
    labels = np.repeat(np.arange(n_classes), samples_per_class)
    features = means[labels] + rng.standard_normal((labels.size, input_dim))
    return Pool(features, labels)


def _read_idx(path: Path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(images_path, labels_path, limit: int | None = None) -> Pool:
    """Read an IDX image/label pair; pixels scaled to [0, 1] and flattened."""
    if limit is not None and limit <= 0:
        raise ValueError("empty pool")
    img = _read_idx(Path(images_path))
    lab = _read_idx(Path(labels_path))
    if len(img) < 16:
        raise IdxFormatError(f"{images_path}: header needs 16 bytes, file has {len(img)}")
    if len(lab) < 8:
        raise IdxFormatError(f"{labels_path}: header needs 8 bytes, file has {len(lab)}")
    magic, n_img, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(f"{images_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
    magic, n_lab = struct.unpack(">II", lab[:8])
    if magic != IDX_LABELS_MAGIC:
        raise IdxFormatError(f"{labels_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
    if n_img != n_lab:
        raise IdxFormatError(f"image count {n_img} does not match label count {n_lab}")
    dim = rows * cols
    need = 16 + n_img * dim
    if len(img) < need:
        raise IdxFormatError(f"{images_path}: payload truncated, expected bytes 16..{need}, got {len(img)}")
    if len(lab) < 8 + n_lab:
        raise IdxFormatError(f"{labels_path}: payload truncated, expected bytes 8..{8 + n_lab}, got {len(lab)}")
    n = n_img if limit is None else min(n_img, limit)
    if n == 0:
        raise ValueError("empty pool")
    pixels = np.frombuffer(img, dtype=np.uint8, count=n * dim, offset=16)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    return Pool(pixels.reshape(n, dim).astype(np.float64) / 255.0, labels)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images [n, rows, cols] and labels [n] as raw IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels))
                                  + np.asarray(labels, dtype=np.uint8).tobytes())


def _partition(indices: np.ndarray, weights: list[int]) -> list[np.ndarray]:
    edges = np.floor(np.cumsum(weights)[:-1] / np.sum(weights) * len(indices)).astype(int)
    return np.split(indices, edges)


def build_bags(pool: Pool, spec: BagSpec) -> Dataset:
    """Sample train/val/test bags from disjoint partitions of ``pool``.

    Partitions are proportional to each split's bag count. Within a bag no
    pool index repeats; bags of the same split may share instances.
    """
    rng = substream(spec.seed, "bags")
    is_key = pool.labels == spec.key_class
    counts = spec.bag_counts()
    weights = list(counts.values())
    key_parts = _partition(rng.permutation(np.flatnonzero(is_key)), weights)
    other_parts = _partition(rng.permutation(np.flatnonzero(~is_key)), weights)
    n, k = spec.instances_per_bag, spec.n_keys

    splits = {}
    for (name, n_bags), keys, others in zip(counts.items(), key_parts, other_parts):
        n_pos = round(spec.positive_bag_fraction * n_bags)
        need_keys = k if n_pos else 0
        need_others = n if n_pos < n_bags else n - k
        if len(keys) < need_keys or len(others) < need_others:
            raise ValueError(
                f"insufficient pool for split {name!r}: requires {need_keys} key and "
                f"{need_others} non-key instances per bag, available {len(keys)} key and "
                f"{len(others)} non-key"
            )
        positive = np.zeros(n_bags, dtype=bool)
        positive[:n_pos] = True
        positive = rng.permutation(positive)
        bags = []
        for pos in positive:
            if pos:
                idx = np.concatenate([rng.choice(keys, k, replace=False),
                                      rng.choice(others, n - k, replace=False)])
            else:
                idx = rng.choice(others, n, replace=False)
            idx = rng.permutation(idx)
            inst_labels = is_key[idx].astype(np.int64)
            bags.append(Bag(pool.features[idx], inst_labels, bag_label(inst_labels), name, idx))
        splits[name] = bags
    return Dataset(splits["train"], splits["val"], splits["test"], spec)


def default_samples_per_class(spec: BagSpec, n_classes: int = 10) -> int:
    """Pool size per class giving the smallest split partition 1.5 bags of fillers."""
    counts = spec.bag_counts().values()
    needed = spec.instances_per_bag * sum(counts) / min(counts) / (n_classes - 1)
    return max(200, int(np.ceil(1.5 * needed)))


def make_synthetic_dataset(spec: BagSpec, input_dim: int = 16, n_classes: int = 10,
                           samples_per_class: int | None = None) -> Dataset:
    """Synthetic pool sized for ``spec`` plus bag construction, same seed."""
    if samples_per_class is None:
        samples_per_class = default_samples_per_class(spec, n_classes)
    pool = make_synthetic_pool(spec.seed, n_classes, input_dim, samples_per_class)
    return build_bags(pool, spec)


# ---------------------------------------------------------------- persistence


def save_dataset(dataset: Dataset, out_dir, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in SPLITS:
        bags = dataset.split(name)
        tensors = {}
        for i, bag in enumerate(bags):
            tensors[f"{name}.{i}.instances"] = bag.instances
            tensors[f"{name}.{i}.instance_labels"] = bag.instance_labels.astype(np.float64)
        write_tensor_file(out / f"{name}.bin", tensors)
        lines.append(f"{name}_bags = {len(bags)}")
        lines.append(f"{name}_positive = {sum(b.bag_label for b in bags)}")
    lines.append(f"input_dim = {dataset.input_dim}")
    if dataset.spec is not None:
        lines.extend(f"spec.{k} = {v}" for k, v in asdict(dataset.spec).items())
    lines.extend(f"{k} = {v}" for k, v in (extra or {}).items())
    (out / "dataset_manifest.txt").write_text("\n".join(lines) + "\n")
    return out


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not (path / "train.bin").exists():
        raise FileNotFoundError(f"{path} is not a dataset directory (no train.bin)")
    splits = {}
    for name in SPLITS:
        tensors = read_tensor_file(path / f"{name}.bin")
        n_bags = len(tensors) // 2
        bags = []
        for i in range(n_bags):
            labels = tensors[f"{name}.{i}.instance_labels"].astype(np.int64)
            bags.append(Bag(tensors[f"{name}.{i}.instances"], labels, bag_label(labels), name))
        splits[name] = bags
    spec = None
    manifest = path / "dataset_manifest.txt"
    if manifest.exists():
        raw = dict(ln.split(" = ", 1) for ln in manifest.read_text().splitlines() if " = " in ln)
        fields = {k[5:]: v for k, v in raw.items() if k.startswith("spec.")}
        if fields:
            spec = BagSpec(**{k: type(getattr(BagSpec(), k))(v) for k, v in fields.items()})
    return Dataset(splits["train"], splits["val"], splits["test"], spec)
