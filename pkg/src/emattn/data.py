"""
Datasets: the CIFAR-100 binary files and a synthetic four-quadrant localization task.
"""
import logging
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from typing_extensions import Literal

from emattn.tensor import Tensor
from emattn.utils_errors import ConfigError, FormatError, ShapeError

logger = logging.getLogger(__name__)

CIFAR_RECORD_BYTES = 3074
CIFAR_IMAGE_BYTES = 3072
CIFAR_SPLIT_FILES = {"train": "train.bin", "test": "test.bin"}
CIFAR_FINE_CLASSES = 100
CIFAR_COARSE_CLASSES = 20

QUADRANT_CLASSES = 4
# zero padding only tells positions apart within two pixels of a border
SYNTH_HW = (4, 4)
SYNTH_NOISE = 0.1


class Dataset(object):
    """
    Images (N, 3, H, W) with values in [0, 1], their integer labels and the class count. Immutable.
    """
    __slots__ = 'images', 'labels', 'num_classes', 'name'

    def __init__(self,
                 images,       # type: Tensor
                 labels,       # type: Sequence[int]
                 num_classes,  # type: int
                 name="",      # type: str
                 ):
        labels = np.array(labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError("dataset images must be (N, 3, H, W), found %r" % (images.shape,))
        if labels.shape != (images.shape[0],):
            raise ShapeError("%s images but %s labels" % (images.shape[0], labels.size))
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ConfigError("labels must lie in [0, %s)" % num_classes)
        data = images.data
        if data.size and (data.min() < 0. or data.max() > 1.):
            raise ConfigError("image values must lie in [0, 1]")
        labels.flags.writeable = False
        self.images = images
        self.labels = labels
        self.num_classes = num_classes
        self.name = name

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_hw(self):
        # type: (...) -> Tuple[int, int]
        return self.images.shape[2], self.images.shape[3]

    def subset(self, indices):
        # type: (Sequence[int]) -> Dataset
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(Tensor._wrap(self.images.data[indices]), self.labels[indices], self.num_classes, self.name)

    def batch(self, indices):
        # type: (Sequence[int]) -> Tuple[Tensor, np.ndarray]
        indices = np.asarray(indices, dtype=np.int64)
        return Tensor._wrap(self.images.data[indices]), self.labels[indices]

    def batches(self,
                batch_size,  # type: int
                rng=None,    # type: Optional[np.random.Generator]
                ):
        # type: (...) -> Iterator[Tuple[Tensor, np.ndarray]]
        """One pass over the dataset, shuffled with `rng` if given. The last batch may be smaller."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            yield self.batch(order[start:start + batch_size])

    def class_histogram(self):
        # type: (...) -> np.ndarray
        return np.bincount(self.labels, minlength=self.num_classes)

    def __repr__(self):
        return "Dataset(%r, n=%s, classes=%s, hw=%r)" % (self.name, len(self), self.num_classes, self.image_hw)


# ------------- CIFAR-100


def _cifar_file(path, split):
    path = Path(path)
    if path.is_dir():
        try:
            path = path / CIFAR_SPLIT_FILES[split]
        except KeyError:
            raise ConfigError("unknown CIFAR-100 split %r, expected one of %r" % (split, list(CIFAR_SPLIT_FILES)))
    if not path.is_file():
        raise FileNotFoundError("CIFAR-100 file not found: %s" % path)
    return path


def parse_cifar100(blob,            # type: bytes
                   limit=None,      # type: Optional[int]
                   label="fine",    # type: Literal["fine", "coarse"]
                   name="cifar100",
                   ):
    # type: (...) -> Dataset
    """
    Parses CIFAR-100 binary records: one coarse label byte, one fine label byte, then the 32x32 image as three
    row-major planes (red, green, blue). Pixels are scaled by 1/255.

    :param limit: only keep the first `limit` records
    :param label: which of the two labels to keep
    """
    if label not in ("fine", "coarse"):
        raise ConfigError("label must be 'fine' or 'coarse', found %r" % (label,))
    if len(blob) % CIFAR_RECORD_BYTES != 0:
        raise FormatError("CIFAR-100 data of %s bytes is not a whole number of %s-byte records"
                          % (len(blob), CIFAR_RECORD_BYTES))
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    if limit is not None:
        if limit < 0:
            raise ConfigError("limit must be >= 0, found %r" % (limit,))
        records = records[:limit]

    coarse, fine = records[:, 0].astype(np.int64), records[:, 1].astype(np.int64)
    if fine.size and fine.max() >= CIFAR_FINE_CLASSES:
        raise FormatError("record %s has fine label %s >= %s"
                          % (int(np.argmax(fine >= CIFAR_FINE_CLASSES)), fine.max(), CIFAR_FINE_CLASSES))
    if coarse.size and coarse.max() >= CIFAR_COARSE_CLASSES:
        raise FormatError("record %s has coarse label %s >= %s"
                          % (int(np.argmax(coarse >= CIFAR_COARSE_CLASSES)), coarse.max(), CIFAR_COARSE_CLASSES))

    images = records[:, 2:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.
    if label == "fine":
        return Dataset(Tensor._wrap(images), fine, CIFAR_FINE_CLASSES, name)
    return Dataset(Tensor._wrap(images), coarse, CIFAR_COARSE_CLASSES, name)


def load_cifar100(path,           # type: Union[str, Path]
                  split="train",  # type: Literal["train", "test"]
                  limit=None,     # type: Optional[int]
                  label="fine",   # type: Literal["fine", "coarse"]
                  ):
    # type: (...) -> Dataset
    """
    Loads a CIFAR-100 binary split. `path` is either the split file itself or the directory holding `train.bin`
    and `test.bin`.

    :raises FileNotFoundError: if the file does not exist
    :raises FormatError: if the file is not a whole number of records or holds an out-of-range label
    """
    path = _cifar_file(path, split)
    ds = parse_cifar100(path.read_bytes(), limit=limit, label=label, name="cifar100-%s" % split)
    logger.info("loaded %s CIFAR-100 %s records from %s", len(ds), split, path)
    return ds


# ------------- synthetic quadrants


def _quadrant_energies(image):
    # type: (np.ndarray) -> np.ndarray
    """Summed intensity of the top-left, top-right, bottom-left and bottom-right quadrants."""
    H, W = image.shape[-2:]
    h, w = H // 2, W // 2
    return np.array([image[..., :h, :w].sum(), image[..., :h, w:].sum(),
                     image[..., h:, :w].sum(), image[..., h:, w:].sum()])


def synth_quadrant(n,                    # type: int
                   seed,                 # type: int
                   H=SYNTH_HW[0],        # type: int
                   W=SYNTH_HW[1],        # type: int
                   noise=SYNTH_NOISE,    # type: float
                   ):
    # type: (...) -> Dataset
    """
    A four-class localization task. Each image holds a Gaussian blob of peak 1 (the same in the three channels),
    centered uniformly inside one quadrant, plus uniform noise in [-noise, noise], clipped to [0, 1]. The label
    is the quadrant index (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).

    Classes are balanced, and a sample is redrawn until its quadrant holds strictly the largest summed intensity,
    so that the label always equals the quadrant of maximal energy. Fully determined by `seed`.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ConfigError("n must be an integer >= 1, found %r" % (n,))
    if H < 2 or W < 2 or H % 2 or W % 2:
        raise ConfigError("synthetic images need even extents >= 2, found %sx%s" % (H, W))

    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % QUADRANT_CLASSES)
    h, w = H // 2, W // 2
    sigma = min(H, W) / 8.
    ys = np.arange(H, dtype=np.float64)[:, None]
    xs = np.arange(W, dtype=np.float64)[None, :]

    images = np.empty((n, 3, H, W))
    redraws = 0
    for i, k in enumerate(labels):
        y0, x0 = (k // 2) * h, (k % 2) * w
        while True:
            cy = rng.uniform(y0, y0 + h - 1)
            cx = rng.uniform(x0, x0 + w - 1)
            blob = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sigma ** 2))
            img = np.clip(blob[None] + rng.uniform(-noise, noise, size=(3, H, W)), 0., 1.)
            energies = _quadrant_energies(img)
            if np.all(energies[k] > np.delete(energies, k)):
                break
            redraws += 1
        images[i] = img

    logger.debug("synthesized %s quadrant samples of %sx%s (seed %s, %s redraws)", n, H, W, seed, redraws)
    return Dataset(Tensor._wrap(images), labels, QUADRANT_CLASSES, "synth-quadrant")
