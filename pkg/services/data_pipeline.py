"""
Data Pipeline Module - Đọc dữ liệu ảnh (IDX / CSV), chuẩn hóa về [0,1]
Chia train/valid phân tầng theo nhãn và lấy minibatch theo seed
"""
import csv
import gzip
import os
import struct
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, IngestionError, LabelRangeError, StratificationError
from .seeding import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
PIXEL_MAX = 255.0


@dataclass(frozen=True)
class Dataset:
    """
    Images (N, C, H, W) in [0, 1] with integer labels.

    provenance records the source file and every transformation applied.
    """
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ConfigurationError(f"images must be N×C×H×W, got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ConfigurationError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ConfigurationError("pixels must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelRangeError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, indices: Sequence[int], note: str = "") -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        provenance = f"{self.provenance}|{note}" if note else self.provenance
        return replace(self, images=self.images[indices], labels=self.labels[indices],
                       provenance=provenance)


def normalize(pixels: np.ndarray) -> np.ndarray:
    """0-255 bytes -> [0, 1] doubles"""
    return np.asarray(pixels, dtype=np.float64) / PIXEL_MAX


def denormalize(images: np.ndarray) -> np.ndarray:
    """[0, 1] doubles -> 0-255 bytes (exact inverse for normalized bytes)"""
    return np.rint(np.asarray(images, dtype=np.float64) * PIXEL_MAX).astype(np.uint8)


# ============== INGESTION ==============

def _read_bytes(path: str) -> bytes:
    if not os.path.exists(path):
        raise IngestionError(f"file not found: {path}")
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as handle:
        return handle.read()


def _idx_header(raw: bytes, path: str, magic: int, ndims: int) -> Tuple[int, ...]:
    header_size = 4 * (1 + ndims)
    if len(raw) < header_size:
        raise IngestionError(f"{path}: truncated header at offset {len(raw)}")
    found = struct.unpack_from(">I", raw, 0)[0]
    if found != magic:
        raise IngestionError(f"{path}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    return struct.unpack_from(f">{ndims}I", raw, 4)


def load_idx(images_path: str, labels_path: str, num_classes: int = 10) -> Dataset:
    """
    Đọc cặp file IDX ảnh/nhãn (có thể nén gzip)

    Args:
        images_path: File IDX3, magic 0x00000803
        labels_path: File IDX1, magic 0x00000801
        num_classes: Số lớp, nhãn hợp lệ trong [0, num_classes)

    Returns:
        Dataset với pixel đã chia 255, shape N×1×H×W
    """
    raw_images = _read_bytes(images_path)
    raw_labels = _read_bytes(labels_path)

    # Header big-endian: magic + kích thước từng chiều
    count, rows, cols = _idx_header(raw_images, images_path, IDX_IMAGES_MAGIC, 3)
    (label_count,) = _idx_header(raw_labels, labels_path, IDX_LABELS_MAGIC, 1)
    if count != label_count:
        raise IngestionError(
            f"count mismatch: {images_path} declares {count} images at offset 4, "
            f"{labels_path} declares {label_count} labels at offset 4")

    pixel_bytes = count * rows * cols
    if len(raw_images) < 16 + pixel_bytes:
        raise IngestionError(f"{images_path}: truncated pixel data at offset {len(raw_images)}, "
                             f"expected {16 + pixel_bytes} bytes")
    if len(raw_labels) < 8 + count:
        raise IngestionError(f"{labels_path}: truncated label data at offset {len(raw_labels)}, "
                             f"expected {8 + count} bytes")

    # Dữ liệu bắt đầu sau header 16 byte (ảnh) / 8 byte (nhãn)
    pixels = np.frombuffer(raw_images, dtype=np.uint8, count=pixel_bytes, offset=16)
    labels = np.frombuffer(raw_labels, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        index = int(np.argmax(labels >= num_classes))
        raise IngestionError(f"{labels_path}: label {labels[index]} at offset {8 + index} "
                             f"outside [0, {num_classes})")
    images = normalize(pixels).reshape(count, 1, rows, cols)
    print(f"📊 Loaded {count} images {rows}x{cols} from {os.path.basename(images_path)}")
    return Dataset(images=images, labels=labels, num_classes=num_classes,
                   provenance=f"idx:{images_path}|/255")


def write_idx(images_path: str, labels_path: str, pixels: np.ndarray, labels: np.ndarray):
    """Write uint8 pixels (N, H, W) and labels (N,) as an IDX pair"""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    with open(images_path, "wb") as handle:
        handle.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        handle.write(pixels.tobytes())
    with open(labels_path, "wb") as handle:
        handle.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        handle.write(labels.tobytes())


def load_csv(path: str, image_shape: Tuple[int, int, int], num_classes: int = 10) -> Dataset:
    """
    Đọc CSV dạng "label,p0,p1,...,p{C·H·W-1}", pixel trong 0-255

    Args:
        path: File CSV
        image_shape: (C, H, W) của mỗi ảnh
        num_classes: Số lớp

    Raises:
        IngestionError kèm số dòng khi sai số cột, ô không phải số
        hoặc giá trị ngoài khoảng
    """
    if not os.path.exists(path):
        raise IngestionError(f"file not found: {path}")
    image_shape = tuple(int(v) for v in image_shape)
    width = int(np.prod(image_shape))
    labels, rows = [], []
    with open(path, "r", encoding="utf-8", newline="") as handle:
        for row_number, cells in enumerate(csv.reader(handle), start=1):
            # Bỏ qua dòng trống
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != width + 1:
                raise IngestionError(f"{path}: row {row_number} has {len(cells) - 1} pixels, "
                                     f"expected {width}")
            try:
                values = np.array([float(c) for c in cells], dtype=np.float64)
            except ValueError as exc:
                raise IngestionError(f"{path}: row {row_number} has a non-numeric cell ({exc})") from exc
            label = values[0]
            if label != int(label) or not 0 <= label < num_classes:
                raise IngestionError(f"{path}: row {row_number} label {cells[0]!r} outside [0, {num_classes})")
            pixels = values[1:]
            if pixels.min() < 0 or pixels.max() > PIXEL_MAX:
                raise IngestionError(f"{path}: row {row_number} pixel outside 0-255")
            labels.append(int(label))
            rows.append(pixels)
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    images = normalize(np.stack(rows)).reshape((len(rows),) + image_shape)
    print(f"📊 Loaded {len(rows)} rows from {os.path.basename(path)}")
    return Dataset(images=images, labels=np.array(labels, dtype=np.int64), num_classes=num_classes,
                   provenance=f"csv:{path}|/255")


# ============== SPLITTING ==============

def _allocate(class_sizes: np.ndarray, fraction: float) -> np.ndarray:
    """Per-class counts summing to round(fraction·N), each within 1 of fraction·n_c"""
    total = int(round(fraction * class_sizes.sum()))
    exact = fraction * class_sizes
    counts = np.floor(exact).astype(np.int64)
    remainder = exact - counts
    order = sorted(range(len(class_sizes)), key=lambda c: (-remainder[c], c))
    for c in order[:max(0, total - int(counts.sum()))]:
        counts[c] += 1
    return counts


def split_indices(dataset: Dataset, valid_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Chia chỉ số train/valid phân tầng theo nhãn, cố định theo seed

    Args:
        dataset: Dữ liệu gốc
        valid_fraction: Tỉ lệ valid, trong (0, 1)
        seed: Seed gốc

    Returns:
        (train_indices, valid_indices) rời nhau, phủ hết dataset, đã sắp xếp
    """
    if not 0.0 < valid_fraction < 1.0:
        raise ConfigurationError(f"valid_fraction must be in (0, 1), got {valid_fraction}")
    classes = np.unique(dataset.labels)
    sizes = np.array([np.count_nonzero(dataset.labels == c) for c in classes], dtype=np.int64)
    small = [int(c) for c, n in zip(classes, sizes) if n < 2]
    if small:
        raise StratificationError(f"classes {small} have fewer than 2 samples")
    # Số mẫu valid mỗi lớp, tổng = round(fraction·N)
    counts = _allocate(sizes, valid_fraction)
    rng = make_rng(seed, 0)
    valid = []
    for c, n_valid in zip(classes, counts):
        members = np.flatnonzero(dataset.labels == c)
        valid.append(rng.permutation(members)[:n_valid])
    valid_idx = np.sort(np.concatenate(valid))
    train_mask = np.ones(len(dataset), dtype=bool)
    train_mask[valid_idx] = False
    return np.flatnonzero(train_mask), valid_idx


def split(dataset: Dataset, valid_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Stratified split into (train, valid)"""
    train_idx, valid_idx = split_indices(dataset, valid_fraction, seed)
    return (dataset.take(train_idx, f"split(train,{valid_fraction},{seed})"),
            dataset.take(valid_idx, f"split(valid,{valid_fraction},{seed})"))


def subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Stratified subsample of n items (keeps class proportions)"""
    if n >= len(dataset):
        return dataset
    if n < 1:
        raise ConfigurationError(f"subset size must be positive, got {n}")
    classes = np.unique(dataset.labels)
    sizes = np.array([np.count_nonzero(dataset.labels == c) for c in classes], dtype=np.int64)
    counts = _allocate(sizes, n / len(dataset))
    rng = make_rng(seed, 1)
    picked = [rng.permutation(np.flatnonzero(dataset.labels == c))[:k] for c, k in zip(classes, counts)]
    return dataset.take(np.sort(np.concatenate(picked)), f"subset({n},{seed})")


# ============== SAMPLING ==============

class BatchSampler:
    """
    Cycles epochs over a dataset in seed-derived permutations.

    The final short batch of each epoch is emitted. State is (epoch, cursor),
    so a sampler can be restored exactly from a checkpoint.
    """

    def __init__(self, dataset: Dataset, batch_size: int, seed: int, shuffle: bool = True):
        if batch_size < 1:
            raise ConfigurationError(f"batch size must be positive, got {batch_size}")
        if batch_size > len(dataset):
            raise ConfigurationError(f"batch size {batch_size} exceeds dataset size {len(dataset)}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.shuffle = shuffle
        self.epoch = 0
        self.cursor = 0
        self._order: Optional[np.ndarray] = None

    def _epoch_order(self) -> np.ndarray:
        if self._order is None:
            n = len(self.dataset)
            self._order = make_rng(self.seed, 2, self.epoch).permutation(n) if self.shuffle else np.arange(n)
        return self._order

    @property
    def batches_per_epoch(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    def next_indices(self) -> np.ndarray:
        order = self._epoch_order()
        indices = order[self.cursor:self.cursor + self.batch_size]
        self.cursor += len(indices)
        if self.cursor >= len(order):
            self.epoch += 1
            self.cursor = 0
            self._order = None
        return indices

    def next_batch(self) -> Tuple[T.Tensor, np.ndarray]:
        indices = self.next_indices()
        return (T.Tensor(self.dataset.images[indices], copy=False),
                self.dataset.labels[indices])

    def state_dict(self) -> dict:
        return {"epoch": self.epoch, "cursor": self.cursor}

    def load_state(self, state: dict):
        self.epoch = int(state["epoch"])
        self.cursor = int(state["cursor"])
        self._order = None


def next_batch(sampler: BatchSampler) -> Tuple[T.Tensor, np.ndarray]:
    return sampler.next_batch()
