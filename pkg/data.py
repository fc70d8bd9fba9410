"""
kafforge - Datasets
===================
Image datasets for classification: the ICRD binary container, CSV ingestion,
desk-scale synthetic generators (Gaussian blobs, glyph images) and label
helpers.

Pixels live in [0, 1]. On disk they are u8 and map to reals as v / 255; the
generators quantize to that grid so a generated dataset survives a save/load
round trip unchanged.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from pandas.errors import EmptyDataError

from errors import DomainError, FormatError, ParseError

ICRD_MAGIC = b"ICRD1"
ICRD_HEADER = len(ICRD_MAGIC) + 5 * 4
MAX_GLYPH_CLASSES = 16

# ============================================================================
# DATASET CONTAINER
# ============================================================================


@dataclass(frozen=True, eq=False)
class Dataset:
    """images: (n, channels, H, W) floats in [0, 1]; labels: (n,) ints in [0, C)"""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    class_names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        images, labels = self.images, self.labels
        if images.ndim != 4:
            raise DomainError(f"images must be (n, channels, H, W), got shape {images.shape}")
        if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
            raise DomainError(f"{images.shape[0]} images but labels of shape {labels.shape}")
        if self.class_count < 1:
            raise DomainError(f"class count must be positive, got {self.class_count}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise DomainError(f"labels must lie in [0, {self.class_count})")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise DomainError("image values must lie in [0, 1]")
        if self.class_names is not None and len(self.class_names) != self.class_count:
            raise DomainError(f"{len(self.class_names)} class names for {self.class_count} classes")

    @property
    def n(self):
        return int(self.labels.shape[0])

    @property
    def sample_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.class_count, self.class_names)

    def histogram(self):
        return np.bincount(self.labels, minlength=self.class_count)


def one_hot(label, C):
    if not 0 <= label < C:
        raise DomainError(f"label {label} outside [0, {C})")
    out = np.zeros(C)
    out[label] = 1.0
    return out


def one_hot_batch(labels, C):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise DomainError(f"labels outside [0, {C})")
    out = np.zeros((labels.size, C))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _from_bytes(pixels):
    return pixels.astype(np.float64) / 255.0


def _to_bytes(images):
    return np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)


def _quantize(images):
    return _from_bytes(_to_bytes(images))


# ============================================================================
# ICRD BINARY FORMAT
# ============================================================================

def save_icrd(dataset, path):
    """Magic, u32 n/C/channels/H/W (little endian), u8 labels, u8 pixels"""
    if dataset.class_count > 256:
        raise DomainError("ICRD stores labels as u8; at most 256 classes")
    n, channels, H, W = dataset.images.shape
    with open(path, "wb") as f:
        f.write(ICRD_MAGIC)
        f.write(np.array([n, dataset.class_count, channels, H, W], dtype="<u4").tobytes())
        f.write(dataset.labels.astype(np.uint8).tobytes())
        f.write(_to_bytes(dataset.images).tobytes())


def load_icrd(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:len(ICRD_MAGIC)] != ICRD_MAGIC:
        raise FormatError("bad magic, not an ICRD file", 0)
    if len(blob) < ICRD_HEADER:
        raise FormatError("truncated header", len(blob))
    n, C, channels, H, W = (int(v) for v in np.frombuffer(blob, "<u4", 5, len(ICRD_MAGIC)))
    offset = ICRD_HEADER
    if len(blob) < offset + n:
        raise FormatError(f"truncated labels, expected {n}", len(blob))
    labels = np.frombuffer(blob, np.uint8, n, offset).astype(np.int64)
    bad = np.flatnonzero(labels >= C)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} is not below class count {C}", offset + int(bad[0]))
    offset += n
    count = n * channels * H * W
    if len(blob) < offset + count:
        raise FormatError(f"truncated pixel payload, expected {count} bytes", len(blob))
    if len(blob) > offset + count:
        raise FormatError("trailing bytes after pixel payload", offset + count)
    pixels = np.frombuffer(blob, np.uint8, count, offset).reshape(n, channels, H, W)
    return Dataset(_from_bytes(pixels), labels, C)


# ============================================================================
# CSV INGESTION
# ============================================================================

def load_csv_dataset(path, C, H, W):
    """
    One sample per line: label, then H*W pixel values in 0..255 (single
    channel, row-major). Errors name the 1-based line.
    """
    width = 1 + H * W
    try:
        # fixed width: short rows come back padded with NaN, long rows raise
        frame = pd.read_csv(path, header=None, names=range(width), dtype=str,
                            keep_default_na=False, skip_blank_lines=False)
    except EmptyDataError:
        return Dataset(np.zeros((0, 1, H, W)), np.zeros(0, dtype=np.int64), C)
    except pd.errors.ParserError as e:
        raise ParseError(f"wrong number of fields ({e})", _parser_error_line(e)) from e
    if len(frame) and not isinstance(frame.index, pd.RangeIndex):
        # an over-long first row makes pandas read its extra leading field as an index
        raise ParseError(f"expected label plus {H * W} pixels, got more fields", 1)

    labels, rows = [], []
    for index, row in frame.iterrows():
        line = index + 1
        cells = [cell.strip() for cell in row.tolist() if isinstance(cell, str)]
        if not any(cells):
            continue
        if len(cells) != width or not all(cells):
            raise ParseError(f"expected label plus {H * W} pixels, got {len(cells)} fields", line)
        values = pd.to_numeric(pd.Series(cells), errors="coerce")
        if values.isna().any():
            bad = cells[int(np.flatnonzero(values.isna().to_numpy())[0])]
            raise ParseError(f"non-numeric cell '{bad}'", line)
        values = values.to_numpy(dtype=np.float64)
        if np.any(values != np.round(values)):
            raise ParseError("cells must be integers", line)
        label = int(values[0])
        if not 0 <= label < C:
            raise ParseError(f"label {label} outside [0, {C})", line)
        if values[1:].min() < 0 or values[1:].max() > 255:
            raise ParseError("pixel values must lie in 0..255", line)
        labels.append(label)
        rows.append(values[1:])

    images = np.array(rows, dtype=np.float64).reshape(len(rows), 1, H, W) / 255.0
    return Dataset(images, np.array(labels, dtype=np.int64), C)


def _parser_error_line(error):
    # pandas reports "Expected N fields in line L, saw M"
    words = str(error).replace(",", " ").split()
    for before, word in zip(words, words[1:]):
        if before == "line" and word.isdigit():
            return int(word)
    return None


# ============================================================================
# SYNTHETIC GENERATORS
# ============================================================================

def gen_blobs(n_per_class, C, dim, spread, seed=0):
    """
    Gaussian clusters, class means equispaced on the unit circle in the first
    two coordinates, squashed affinely into [0, 1]. Samples are shaped
    (n, 1, 1, dim).
    """
    if C < 2 or dim < 2:
        raise DomainError(f"blobs need C >= 2 and dim >= 2, got C={C}, dim={dim}")
    if n_per_class < 0 or spread < 0:
        raise DomainError("n_per_class and spread must be non-negative")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(C) / C
    means = np.zeros((C, dim))
    means[:, 0], means[:, 1] = np.cos(angles), np.sin(angles)
    labels = np.repeat(np.arange(C), n_per_class)
    points = means[labels] + spread * rng.standard_normal((labels.size, dim))
    if points.size:
        lo, hi = points.min(), points.max()
        points = (points - lo) / (hi - lo) if hi > lo else np.full_like(points, 0.5)
    images = _quantize(points).reshape(labels.size, 1, 1, dim)
    return Dataset(images, labels.astype(np.int64), C)


def _stroke(canvas, r0, c0, r1, c1):
    """Draw a line between fractional (row, col) positions of the canvas"""
    H, W = canvas.shape
    steps = 2 * max(H, W)
    rows = np.rint(np.linspace(r0, r1, steps) * (H - 1)).astype(int)
    cols = np.rint(np.linspace(c0, c1, steps) * (W - 1)).astype(int)
    canvas[rows, cols] = 1.0


def _arc(canvas, start, stop, radius=0.3, centre=(0.5, 0.5)):
    H, W = canvas.shape
    theta = np.linspace(start, stop, 8 * max(H, W))
    rows = np.rint((centre[0] - radius * np.sin(theta)) * (H - 1)).astype(int)
    cols = np.rint((centre[1] + radius * np.cos(theta)) * (W - 1)).astype(int)
    canvas[rows, cols] = 1.0


# Each glyph is a list of strokes in unit coordinates, kept inside a 0.2
# margin so shifts of a couple of pixels never clip them.
_GLYPHS = [
    [("line", 0.5, 0.2, 0.5, 0.8)],                                   # horizontal bar
    [("line", 0.2, 0.5, 0.8, 0.5)],                                   # vertical bar
    [("line", 0.2, 0.2, 0.8, 0.8)],                                   # diagonal
    [("line", 0.2, 0.8, 0.8, 0.2)],                                   # anti-diagonal
    [("line", 0.5, 0.2, 0.5, 0.8), ("line", 0.2, 0.5, 0.8, 0.5)],     # plus
    [("line", 0.2, 0.2, 0.8, 0.8), ("line", 0.2, 0.8, 0.8, 0.2)],     # cross
    [("arc", 0.0, 2 * np.pi)],                                        # ring
    [("arc", 0.0, np.pi)],                                            # upper arc
    [("arc", np.pi, 2 * np.pi)],                                      # lower arc
    [("line", 0.2, 0.2, 0.8, 0.2), ("line", 0.8, 0.2, 0.8, 0.8)],     # L
    [("line", 0.2, 0.2, 0.2, 0.8), ("line", 0.2, 0.5, 0.8, 0.5)],     # T
    [("line", 0.3, 0.2, 0.3, 0.8), ("line", 0.7, 0.2, 0.7, 0.8)],     # double bar
    [("line", 0.2, 0.3, 0.8, 0.3), ("line", 0.2, 0.7, 0.8, 0.7)],     # double column
    [("line", 0.2, 0.2, 0.2, 0.8), ("line", 0.8, 0.2, 0.8, 0.8),
     ("line", 0.2, 0.2, 0.8, 0.2), ("line", 0.2, 0.8, 0.8, 0.8)],     # box
    [("line", 0.8, 0.2, 0.2, 0.5), ("line", 0.2, 0.5, 0.8, 0.8),
     ("line", 0.8, 0.2, 0.8, 0.8)],                                   # triangle
    [("arc", 0.5 * np.pi, 1.5 * np.pi), ("line", 0.2, 0.5, 0.8, 0.5)],  # left arc with spine
]


def glyph_templates(C, H, W):
    """C distinct binary stroke patterns of size H x W"""
    if not 1 <= C <= MAX_GLYPH_CLASSES:
        raise DomainError(f"glyphs support 1..{MAX_GLYPH_CLASSES} classes, got {C}")
    if H < 8 or W < 8:
        raise DomainError(f"glyphs need H, W >= 8, got {H}x{W}")
    templates = np.zeros((C, H, W))
    for canvas, strokes in zip(templates, _GLYPHS[:C]):
        for stroke in strokes:
            if stroke[0] == "line":
                _stroke(canvas, *stroke[1:])
            else:
                _arc(canvas, *stroke[1:])
    return templates


def _shift(image, dr, dc):
    out = np.zeros_like(image)
    H, W = image.shape
    out[max(dr, 0):H + min(dr, 0), max(dc, 0):W + min(dc, 0)] = \
        image[max(-dr, 0):H + min(-dr, 0), max(-dc, 0):W + min(-dc, 0)]
    return out


def gen_glyphs(n_per_class, C, H, W, noise, seed=0, max_shift=2):
    """
    OCR-flavoured images: per-class stroke patterns, a random shift of up to
    max_shift pixels per axis and salt-and-pepper noise at rate `noise`
    """
    if not 0 <= noise <= 1 or max_shift < 0 or n_per_class < 0:
        raise DomainError("noise must be in [0, 1], max_shift and n_per_class non-negative")
    templates = glyph_templates(C, H, W)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(C), n_per_class)
    images = np.empty((labels.size, 1, H, W))
    for i, label in enumerate(labels):
        dr, dc = rng.integers(-max_shift, max_shift + 1, size=2)
        image = _shift(templates[label], int(dr), int(dc))
        flip = rng.random((H, W)) < noise
        image[flip] = rng.integers(0, 2, size=int(flip.sum()))
        images[i, 0] = image
    return Dataset(images, labels.astype(np.int64), C)


GENERATORS = {"blobs": gen_blobs, "glyphs": gen_glyphs}
