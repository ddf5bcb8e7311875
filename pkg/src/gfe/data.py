"""Dataset ingestion: IDX files, label splits, batch iteration.

Images arrive as IDX ubyte files (the de-facto MNIST container:
big-endian header, magic 0x00000803 for image tensors and 0x00000801
for label vectors).  Intensities are normalized to [0,1] by /255 and
kept as flat rows.  A small synthetic glyph corpus is included so smoke
tests and demos can run without any downloaded files.
"""

import gzip
import os
import struct

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# Conventional file names inside a data directory.
TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


class IdxParseError(ValueError):
    """Malformed IDX payload; message carries the failing byte offset."""


class Dataset:
    """Immutable image/label table with [0,1] intensities.

    images: (n, rows*cols) float rows; labels: (n,) ints; image_shape
    preserves the 2-D layout for dumps.
    """

    def __init__(self, images, labels, image_shape, split="train"):
        self.images = np.ascontiguousarray(images, dtype=np.float64)
        self.labels = np.ascontiguousarray(labels, dtype=np.int64)
        self.image_shape = tuple(image_shape)
        self.split = split
        if self.images.ndim != 2:
            raise ValueError("images must be a 2-D array of flat rows")
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.images.size and (
            self.images.min() < 0.0 or self.images.max() > 1.0
        ):
            raise ValueError("intensities must lie in [0, 1]")
        rows, cols = self.image_shape
        if rows * cols != self.images.shape[1]:
            raise ValueError("image_shape does not match row width")

    def __len__(self):
        return len(self.images)

    def take(self, idx, split=None):
        return Dataset(
            self.images[idx], self.labels[idx], self.image_shape,
            self.split if split is None else split,
        )


def _read_header(buf, magic_want, nfields, what):
    need = 4 * (1 + nfields)
    if len(buf) < need:
        raise IdxParseError(
            f"{what}: header truncated at byte {len(buf)} (need {need})"
        )
    fields = struct.unpack_from(">%di" % (1 + nfields), buf, 0)
    if fields[0] != magic_want:
        raise IdxParseError(
            f"{what}: bad magic 0x{fields[0]:08x} at byte 0 "
            f"(expected 0x{magic_want:08x})"
        )
    return fields[1:], need


def parse_idx_images(buf):
    """Parse an IDX image tensor into a (count, rows, cols) array in [0,1]."""
    buf = bytes(buf)
    (count, rows, cols), off = _read_header(buf, IMAGE_MAGIC, 3, "idx images")
    if min(count, rows, cols) < 0 or rows * cols > 1 << 24:
        raise IdxParseError(
            f"idx images: implausible dimensions {count}x{rows}x{cols} at byte 4"
        )
    need = count * rows * cols
    if len(buf) - off < need:
        raise IdxParseError(
            f"idx images: payload truncated at byte {len(buf)} "
            f"(need {off + need})"
        )
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    return raw.reshape(count, rows, cols).astype(np.float64) / 255.0


def parse_idx_labels(buf):
    """Parse an IDX label vector into a (count,) int array."""
    buf = bytes(buf)
    (count,), off = _read_header(buf, LABEL_MAGIC, 1, "idx labels")
    if count < 0:
        raise IdxParseError(f"idx labels: negative count at byte 4")
    if len(buf) - off < count:
        raise IdxParseError(
            f"idx labels: payload truncated at byte {len(buf)} (need {off + count})"
        )
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=off).astype(
        np.int64
    )


def serialize_idx_images(images01):
    """Inverse of parse_idx_images for [0,1] inputs on the /255 grid."""
    a = np.asarray(images01)
    if a.ndim != 3:
        raise ValueError("expected a (count, rows, cols) array")
    raw = np.round(a * 255.0).astype(np.uint8)
    head = struct.pack(">iiii", IMAGE_MAGIC, *a.shape)
    return head + raw.tobytes()


def serialize_idx_labels(labels):
    a = np.asarray(labels)
    if a.ndim != 1 or (a.size and (a.min() < 0 or a.max() > 255)):
        raise ValueError("labels must be a flat vector of small non-negatives")
    return struct.pack(">ii", LABEL_MAGIC, a.size) + a.astype(np.uint8).tobytes()


def _read_maybe_gz(path):
    for candidate in (path, path + ".gz"):
        if os.path.exists(candidate):
            with open(candidate, "rb") as fh:
                head = fh.read(2)
                rest = fh.read()
            buf = head + rest
            if head == b"\x1f\x8b":
                return gzip.decompress(buf)
            return buf
    raise FileNotFoundError(f"no such file: {path} (or {path}.gz)")


def load_dataset(data_dir, split="train"):
    """Load one split from conventional file names under data_dir."""
    if split == "train":
        img_name, lab_name = TRAIN_IMAGES, TRAIN_LABELS
    elif split == "test":
        img_name, lab_name = TEST_IMAGES, TEST_LABELS
    else:
        raise ValueError(f"unknown split {split!r}")
    images = parse_idx_images(_read_maybe_gz(os.path.join(data_dir, img_name)))
    labels = parse_idx_labels(_read_maybe_gz(os.path.join(data_dir, lab_name)))
    if len(images) != len(labels):
        raise ValueError(
            f"{data_dir}: {len(images)} images but {len(labels)} labels in {split}"
        )
    n, rows, cols = images.shape
    return Dataset(images.reshape(n, rows * cols), labels, (rows, cols), split)


def split_segmented(ds: Dataset):
    """Partition by label: classes 0-4 for training, 5-9 held out."""
    low = ds.labels < 5
    return ds.take(low, "train"), ds.take(~low, "test")


def iterate_batches(ds: Dataset, batch_size, seed, with_replacement=True):
    """Seeded batch stream of (images, labels) pairs.

    With replacement (the training default) the stream is endless and
    each batch is an independent uniform draw.  Without replacement it
    yields one shuffled epoch and stops.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    if len(ds) == 0:
        raise ValueError("cannot iterate over an empty dataset")
    rng = np.random.default_rng(seed)
    if with_replacement:
        while True:
            idx = rng.integers(0, len(ds), size=batch_size)
            yield ds.images[idx], ds.labels[idx]
    else:
        order = rng.permutation(len(ds))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            yield ds.images[idx], ds.labels[idx]


# ---------------------------------------------------------------------------
# Synthetic corpus.  Ten fixed 7x7 glyphs upscaled to 28x28, with seeded
# shifts, contrast wobble and noise.  Not a stand-in for real data in any
# quantitative claim; it exists so the pipeline can run end to end
# anywhere.
# ---------------------------------------------------------------------------

_GLYPHS = [
    "0111110 1100011 1100011 1100011 1100011 1100011 0111110",  # 0
    "0001100 0011100 0001100 0001100 0001100 0001100 0111111",  # 1
    "0111110 1100011 0000011 0001110 0111000 1100000 1111111",  # 2
    "0111110 1100011 0000011 0011110 0000011 1100011 0111110",  # 3
    "0001110 0011010 0110010 1100010 1111111 0000010 0000010",  # 4
    "1111111 1100000 1111110 0000011 0000011 1100011 0111110",  # 5
    "0011110 0110000 1100000 1111110 1100011 1100011 0111110",  # 6
    "1111111 0000011 0000110 0001100 0011000 0011000 0011000",  # 7
    "0111110 1100011 1100011 0111110 1100011 1100011 0111110",  # 8
    "0111110 1100011 1100011 0111111 0000011 0000110 0111100",  # 9
]


def _glyph(c):
    rows = _GLYPHS[c].split()
    bits = np.array([[int(ch) for ch in row] for row in rows], dtype=np.float64)
    return np.kron(bits, np.ones((4, 4)))


def make_synthetic_dataset(n, seed=0, split="train"):
    """Deterministic digit-shaped corpus of n 28x28 samples."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0 if split == "train" else 1]))
    base = [_glyph(c) for c in range(10)]
    labels = rng.integers(0, 10, size=n)
    images = np.empty((n, 28 * 28))
    for i, c in enumerate(labels):
        img = base[c] * rng.uniform(0.75, 1.0)
        img = np.roll(img, rng.integers(-2, 3), axis=0)
        img = np.roll(img, rng.integers(-2, 3), axis=1)
        img = img + rng.normal(0.0, 0.04, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0).ravel()
    return Dataset(images, labels, (28, 28), split)
