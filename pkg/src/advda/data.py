"""Dataset ingestion, normalization, batching, and synthetic data.

Images are always float64 NCHW in [0, 1] (raw bytes divided by 255 exactly
once at load). Supported sources: big-endian IDX files (plain or gzipped),
a generic CSV image format with a JSON sidecar for shape metadata, and
seeded Gaussian-blob synthetic datasets for fast tests.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
import urllib.request
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

FASHION_MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}

FASHION_MNIST_MIRRORS = (
    "https://storage.googleapis.com/tensorflow/tf-keras-datasets/",
    "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
)


class DataError(ValueError):
    """Malformed or inconsistent dataset files."""


@dataclass
class Dataset:
    images: np.ndarray  # (n, c, h, w) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64 in [0, k)
    num_classes: int
    split: str = ""
    ids: np.ndarray = field(default=None)  # original example indices
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] == 0:
            raise DataError(f"images must be a nonempty (n, c, h, w) array, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(
                f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if self.ids is None:
            self.ids = np.arange(self.images.shape[0])

    @property
    def n(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]


def _open_maybe_gzip(path: Path):
    with open(path, "rb") as probe:
        magic = probe.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path: Path, expected_magic: int):
    with _open_maybe_gzip(path) as f:
        head = f.read(4)
        if len(head) < 4:
            raise DataError(f"{path}: truncated header")
        (magic,) = struct.unpack(">i", head)
        if magic != expected_magic:
            raise DataError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
        ndim = magic & 0xFF
        dims = []
        for _ in range(ndim):
            raw = f.read(4)
            if len(raw) < 4:
                raise DataError(f"{path}: truncated dimension header")
            dims.append(struct.unpack(">i", raw)[0])
        if any(d <= 0 for d in dims):
            raise DataError(f"{path}: empty dimensions {dims}")
        count = int(np.prod(dims))
        payload = f.read(count)
        if len(payload) != count:
            raise DataError(f"{path}: expected {count} payload bytes, got {len(payload)}")
        return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "") -> Dataset:
    """Parse an IDX image/label file pair and normalize pixels to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    for p in (images_path, labels_path):
        if not p.exists():
            raise DataError(f"{p}: no such file")
    raw_images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    raw_labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if raw_images.ndim != 3:
        raise DataError(f"{images_path}: expected (n, h, w) images, got {raw_images.shape}")
    if raw_labels.ndim != 1:
        raise DataError(f"{labels_path}: expected flat labels, got {raw_labels.shape}")
    if raw_images.shape[0] != raw_labels.shape[0]:
        raise DataError(
            f"count mismatch: {raw_images.shape[0]} images vs {raw_labels.shape[0]} labels"
        )
    images = raw_images[:, None, :, :].astype(np.float64) / 255.0
    return Dataset(
        images=images,
        labels=raw_labels.astype(np.int64),
        num_classes=num_classes,
        split=split,
        provenance={
            "images_sha256": _sha256(images_path),
            "labels_sha256": _sha256(labels_path),
        },
    )


def synth_dataset(seed: int, n: int, k: int, d: int, split: str = "train",
                  spread: float = 0.08) -> Dataset:
    """k Gaussian blobs in [0, 1]^d, clipped; class counts balanced to ±1.

    The blob centers depend only on ``seed``, while the noise draws depend on
    (seed, split), so train/test splits of one seed sample the same task.
    Images come out (1, sqrt(d), sqrt(d)) when d is a perfect square, else
    (1, 1, d).
    """
    if n < k:
        raise DataError(f"need n >= k, got n={n}, k={k}")
    centers_rng = np.random.default_rng([seed, 0x5B0B5])
    sample_rng = np.random.default_rng([seed, 0x5A3D7, zlib.crc32(split.encode())])
    side = int(round(np.sqrt(d)))
    shape = (1, side, side) if side * side == d else (1, 1, d)
    centers = centers_rng.uniform(0.25, 0.75, size=(k, d))
    labels = np.arange(n) % k  # balanced within ±1 by construction
    sample_rng.shuffle(labels)
    x = centers[labels] + spread * sample_rng.standard_normal((n, d))
    images = np.clip(x, 0.0, 1.0).reshape(n, *shape)
    return Dataset(
        images=images,
        labels=labels.astype(np.int64),
        num_classes=k,
        split=split,
        provenance={"synth_seed": seed, "n": n, "k": k, "d": d, "spread": spread,
                    "split": split},
    )


def epoch_batches(n: int, m: int, *, seed: int, epoch: int, shuffle: bool = True,
                  drop_last: bool = True) -> list[np.ndarray]:
    """Index batches for one epoch; the permutation is a pure function of
    (seed, epoch). The final partial batch is dropped during training and
    kept during evaluation."""
    if m > n:
        raise DataError(f"batch size {m} exceeds dataset size {n}")
    if m <= 0:
        raise DataError(f"batch size must be positive, got {m}")
    idx = np.arange(n)
    if shuffle:
        np.random.default_rng([seed, epoch]).shuffle(idx)
    stop = n - (n % m) if drop_last else n
    return [idx[i : i + m] for i in range(0, stop, m)]


def batches(dataset: Dataset, m: int, seed: int = 0, shuffle: bool = True,
            epoch: int = 0, drop_last: bool = True) -> list[np.ndarray]:
    return epoch_batches(dataset.n, m, seed=seed, epoch=epoch, shuffle=shuffle,
                         drop_last=drop_last)


def stratified_subset(dataset: Dataset, per_class: int, seed: int) -> Dataset:
    """Deterministic subset: the first ``per_class`` examples of each class
    after a seeded shuffle. Original ids are preserved."""
    rng = np.random.default_rng([seed, 0x57A7])
    order = np.arange(dataset.n)
    rng.shuffle(order)
    picked = []
    for cls in range(dataset.num_classes):
        cls_idx = order[dataset.labels[order] == cls][:per_class]
        if len(cls_idx) < per_class:
            raise DataError(
                f"class {cls} has only {len(cls_idx)} examples, need {per_class}"
            )
        picked.append(cls_idx)
    sel = np.sort(np.concatenate(picked))
    return Dataset(
        images=dataset.images[sel].copy(),
        labels=dataset.labels[sel].copy(),
        num_classes=dataset.num_classes,
        split=f"{dataset.split}-subset{per_class}",
        ids=dataset.ids[sel].copy(),
        provenance={**dataset.provenance, "subset_per_class": per_class, "subset_seed": seed},
    )


# ---------------------------------------------------------------------------
# generic CSV image format: id,label,px_0..px_{d-1} plus a JSON sidecar


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".meta.json")


def write_csv_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    c, h, w = dataset.image_shape
    d = c * h * w
    flat = dataset.images.reshape(dataset.n, d)
    with open(path, "w") as f:
        f.write("id,label," + ",".join(f"px_{i}" for i in range(d)) + "\n")
        for i in range(dataset.n):
            pixels = ",".join(repr(float(v)) for v in flat[i])
            f.write(f"{int(dataset.ids[i])},{int(dataset.labels[i])},{pixels}\n")
    meta = {
        "n": dataset.n,
        "channels": c,
        "height": h,
        "width": w,
        "num_classes": dataset.num_classes,
        "split": dataset.split,
        "provenance": dataset.provenance,
    }
    with open(_sidecar_path(path), "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
        f.write("\n")


def read_csv_dataset(path, num_classes: int | None = None,
                     image_shape: tuple[int, int, int] | None = None) -> Dataset:
    path = Path(path)
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        image_shape = (meta["channels"], meta["height"], meta["width"])
        num_classes = meta["num_classes"]
        split = meta.get("split", "")
        provenance = meta.get("provenance", {})
    elif image_shape is None or num_classes is None:
        raise DataError(f"{path}: no sidecar {sidecar.name}; pass image_shape and num_classes")
    else:
        split, provenance = "", {}
    rows = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=np.float64)
    rows = np.atleast_2d(rows)
    ids = rows[:, 0].astype(np.int64)
    labels = rows[:, 1].astype(np.int64)
    images = rows[:, 2:].reshape(len(rows), *image_shape)
    return Dataset(images=images, labels=labels, num_classes=num_classes,
                   split=split, ids=ids, provenance=provenance)


# ---------------------------------------------------------------------------
# Fashion-MNIST acquisition


def find_fashion_mnist(data_dir) -> dict[str, Path] | None:
    """Return the four IDX paths under ``data_dir`` if all are present,
    accepting either gzipped or unpacked names."""
    data_dir = Path(data_dir)
    found = {}
    for key, fname in FASHION_MNIST_FILES.items():
        gz = data_dir / fname
        plain = data_dir / fname.removesuffix(".gz")
        if gz.exists():
            found[key] = gz
        elif plain.exists():
            found[key] = plain
        else:
            return None
    return found


def fetch_fashion_mnist(data_dir, timeout: float = 20.0) -> dict[str, Path]:
    """Locate or download the Fashion-MNIST IDX files into ``data_dir``.

    Raises DataError with the per-mirror failure detail when the files are
    absent and no mirror is reachable.
    """
    data_dir = Path(data_dir)
    existing = find_fashion_mnist(data_dir)
    if existing:
        return existing
    data_dir.mkdir(parents=True, exist_ok=True)
    failures = []
    for base in FASHION_MNIST_MIRRORS:
        try:
            for fname in FASHION_MNIST_FILES.values():
                target = data_dir / fname
                if target.exists():
                    continue
                with urllib.request.urlopen(base + fname, timeout=timeout) as r:
                    tmp = target.with_suffix(".part")
                    tmp.write_bytes(r.read())
                    tmp.rename(target)
            return find_fashion_mnist(data_dir)
        except OSError as e:
            failures.append(f"{base}: {e}")
    raise DataError(
        "Fashion-MNIST files not found in "
        f"{data_dir} and no mirror reachable:\n  " + "\n  ".join(failures)
    )


def load_fashion_mnist(data_dir, split: str) -> Dataset:
    paths = find_fashion_mnist(data_dir)
    if paths is None:
        raise DataError(f"Fashion-MNIST IDX files not found under {data_dir}")
    if split == "train":
        return load_idx(paths["train_images"], paths["train_labels"], split="train")
    if split == "test":
        return load_idx(paths["test_images"], paths["test_labels"], split="test")
    raise ValueError(f"split must be 'train' or 'test', got {split!r}")
