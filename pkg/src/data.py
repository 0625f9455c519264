"""Datasets: IDX (MNIST / Fashion-MNIST) ingestion, the synthetic regression set, splits."""
import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from src.models import SplitSpec

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
NUM_CLASSES = 10
GZIP_MAGIC = b"\x1f\x8b"

DATASET_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
KNOWN_DATASETS = ("mnist", "fashion_mnist")

# Sampling set of the regression experiment and the domain its pairs live in.
REGRESSION_INTERVALS = ((-4.0, -3.0), (-0.3, 0.3), (3.0, 4.0))
REGRESSION_DOMAIN = (-4.0, 4.0)


class IdxFormatError(ValueError):
    """An IDX file does not follow the format."""


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


class SplitError(ValueError):
    """The requested partition needs more samples than the dataset has."""


@dataclass
class Dataset:
    """Row-stacked inputs and targets.

    Classification targets are exact one-hot rows; regression targets are
    1-d reals.
    """

    inputs: np.ndarray
    targets: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        self.inputs = np.array(self.inputs, dtype=np.float64, ndmin=2)
        self.targets = np.array(self.targets, dtype=np.float64, ndmin=2)
        if len(self.inputs) != len(self.targets):
            raise ValueError(f"{self.name}: {len(self.inputs)} inputs but {len(self.targets)} targets")

    def __len__(self):
        return len(self.inputs)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.targets, axis=1)

    def subset(self, indices: Sequence[int], name: Optional[str] = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[indices], self.targets[indices], name or self.name)


def one_hot(labels: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    targets = np.zeros((len(labels), num_classes))
    targets[np.arange(len(labels)), labels] = 1.0
    return targets


def _inflate(blob: bytes) -> bytes:
    return gzip.decompress(blob) if blob[:2] == GZIP_MAGIC else blob


def _read_header(blob: bytes, magic: int, dims: int, what: str) -> Tuple[int, ...]:
    size = 4 * (1 + dims)
    if len(blob) < size:
        raise IdxTruncatedError(f"{what} file has {len(blob)} bytes, header needs {size}")
    found, *shape = struct.unpack(f">{1 + dims}I", blob[:size])
    if found != magic:
        raise IdxMagicError(f"{what} file magic is 0x{found:08x}, expected 0x{magic:08x}")
    return tuple(shape)


def parse_idx(image_bytes: bytes, label_bytes: bytes, name: str = "idx") -> Dataset:
    """Decode an IDX image/label file pair.

    Args:
        image_bytes: Contents of an idx3 image file (gzip accepted)
        label_bytes: Contents of the matching idx1 label file (gzip accepted)
        name: Dataset name

    Returns:
        Dataset with pixels mapped byte/255 into [0, 1] and one-hot targets.
    """
    image_bytes, label_bytes = _inflate(image_bytes), _inflate(label_bytes)
    count, rows, cols = _read_header(image_bytes, IDX_IMAGE_MAGIC, 3, "image")
    (label_count,) = _read_header(label_bytes, IDX_LABEL_MAGIC, 1, "label")

    pixels_needed = count * rows * cols
    pixel_payload = image_bytes[16:]
    if len(pixel_payload) < pixels_needed:
        raise IdxTruncatedError(f"image payload has {len(pixel_payload)} bytes, header promises {pixels_needed}")
    label_payload = label_bytes[8:]
    if len(label_payload) < label_count:
        raise IdxTruncatedError(f"label payload has {len(label_payload)} bytes, header promises {label_count}")
    if count != label_count:
        raise IdxCountMismatchError(f"{count} images but {label_count} labels")

    pixels = np.frombuffer(pixel_payload[:pixels_needed], dtype=np.uint8).reshape(count, rows * cols)
    labels = np.frombuffer(label_payload[:label_count], dtype=np.uint8)
    if labels.size and labels.max() >= NUM_CLASSES:
        raise IdxFormatError(f"label {int(labels.max())} outside 0..{NUM_CLASSES - 1}")
    return Dataset(pixels.astype(np.float64) / 255.0, one_hot(labels), name)


def write_idx(dataset: Dataset, image_shape: Optional[Tuple[int, int]] = None) -> Tuple[bytes, bytes]:
    """Encode a classification dataset as (image bytes, label bytes)."""
    count, size = dataset.inputs.shape
    rows, cols = image_shape or (1, size)
    if rows * cols != size:
        raise ValueError(f"image shape {rows}x{cols} does not hold {size} pixels")
    pixels = np.rint(np.clip(dataset.inputs, 0.0, 1.0) * 255.0).astype(np.uint8)
    images = struct.pack(">4I", IDX_IMAGE_MAGIC, count, rows, cols) + pixels.tobytes()
    labels = struct.pack(">2I", IDX_LABEL_MAGIC, count) + dataset.labels.astype(np.uint8).tobytes()
    return images, labels


def load_idx_files(image_path: Union[str, Path], label_path: Union[str, Path], name: str = "idx") -> Dataset:
    dataset = parse_idx(Path(image_path).read_bytes(), Path(label_path).read_bytes(), name)
    logger.info("loaded %d samples of %s from %s", len(dataset), name, image_path)
    return dataset


def locate_dataset(cache_dir: Union[str, Path], name: str, part: str = "train") -> Tuple[Path, Path]:
    """Find the image/label files of a dataset under ``<cache_dir>/<name>/``.

    Both the raw and the ``.gz`` file names are accepted.
    """
    base = Path(cache_dir) / name
    found = []
    for stem in DATASET_FILES[part]:
        candidates = [base / stem, base / f"{stem}.gz"]
        match = next((c for c in candidates if c.exists()), None)
        if match is None:
            raise FileNotFoundError(f"{name}: none of {[str(c) for c in candidates]} exists")
        found.append(match)
    return found[0], found[1]


def load_dataset(cache_dir: Union[str, Path], name: str, part: str = "train") -> Dataset:
    image_path, label_path = locate_dataset(cache_dir, name, part)
    return load_idx_files(image_path, label_path, f"{name}-{part}")


def target_function(x: np.ndarray) -> np.ndarray:
    """Ground truth of the regression experiment: 0.5 * max(|x| - 3, 0)."""
    return 0.5 * np.maximum(np.abs(np.asarray(x, dtype=np.float64)) - 3.0, 0.0)


def regression_dataset(n: int = 100, noise: float = 0.02, seed: int = 0) -> Dataset:
    """Noisy samples of the target function on [-4,-3] U [-0.3,0.3] U [3,4].

    Each x picks an interval with probability proportional to its length and
    is uniform inside it.
    """
    if n < 1:
        raise ValueError(f"regression dataset needs n >= 1, got {n}")
    rng = np.random.default_rng(seed)
    lows = np.array([lo for lo, _ in REGRESSION_INTERVALS])
    widths = np.array([hi - lo for lo, hi in REGRESSION_INTERVALS])
    choice = rng.choice(len(widths), size=n, p=widths / widths.sum())
    x = lows[choice] + widths[choice] * rng.uniform(0.0, 1.0, size=n)
    # Keep the right end of every interval closed over the half-open uniform draw.
    x = np.minimum(x, lows[choice] + widths[choice])
    y = target_function(x) + noise * rng.standard_normal(n)
    return Dataset(x[:, None], y[:, None], "regression")


def split(dataset: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset, Dataset]:
    """Seeded disjoint partition into (train, eval, lipschitz-reserve)."""
    if spec.total > len(dataset):
        raise SplitError(f"split needs {spec.total} samples, {dataset.name} has {len(dataset)}")
    order = np.random.default_rng(spec.seed).permutation(len(dataset))
    a = spec.train_count
    b = a + spec.eval_count
    c = b + spec.reserve_count
    return (
        dataset.subset(order[:a], f"{dataset.name}-train"),
        dataset.subset(order[a:b], f"{dataset.name}-eval"),
        dataset.subset(order[b:c], f"{dataset.name}-reserve"),
    )


def subsample(dataset: Dataset, count: int, seed: int = 0) -> Dataset:
    """Seeded subset of ``count`` rows (all rows when count exceeds the size)."""
    if count >= len(dataset):
        return dataset
    order = np.random.default_rng(seed).permutation(len(dataset))[:count]
    return dataset.subset(np.sort(order))
