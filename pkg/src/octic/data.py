"""Synthetic shape dataset and binary netpbm image I/O.

The synthetic task is 8-way classification of procedurally drawn shapes
whose class labels are unchanged by any square symmetry of the image, so an
invariant classifier can solve it and rotated evaluation is label-preserving.
Training images are drawn in one canonical orientation; rotated evaluation
applies a random square symmetry per sample.
"""
import os

import numpy as np

NUM_CLASSES = 8
NOISE_SIGMA = 0.05

CLASS_NAMES = ("disk", "ring", "bar", "cross", "diagonal_cross",
               "corner_square", "double_bar", "notched_disk")


def _coords(image):
    # pixel-center coordinates in [-1, 1], x rightward, y upward
    c = (np.arange(image) + 0.5) / image * 2.0 - 1.0
    x = np.broadcast_to(c, (image, image))
    y = np.broadcast_to(-c[:, None], (image, image))
    return x, y


def shape_mask(label, image):
    x, y = _coords(image)
    r = np.hypot(x, y)
    if label == 0:
        return r <= 0.58
    if label == 1:
        return (r >= 0.33) & (r <= 0.62)
    if label == 2:
        return np.abs(y) <= 0.18
    if label == 3:
        return (np.abs(x) <= 0.18) | (np.abs(y) <= 0.18)
    if label == 4:
        return (np.abs(x - y) <= 0.26) | (np.abs(x + y) <= 0.26)
    if label == 5:
        return (x >= 0.12) & (y >= 0.12)
    if label == 6:
        return np.abs(np.abs(y) - 0.45) <= 0.13
    if label == 7:
        return (r <= 0.58) & ~((x > 0.2) & (np.abs(y) <= 0.16))
    raise ValueError(f"no shape for label {label}")


def synthetic_dataset(count, image, seed):
    """Returns (images (count, 3, image, image) f64, labels (count,) int)."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, NUM_CLASSES, size=count)
    imgs = np.empty((count, 3, image, image))
    for i, lab in enumerate(labels):
        mask = shape_mask(int(lab), image).astype(float)
        intensity = rng.uniform(0.7, 1.0)
        base = mask * intensity
        imgs[i] = base + rng.normal(0.0, NOISE_SIGMA, (3, image, image))
    return imgs, labels


# ---------------------------------------------------------------------------
# netpbm (binary PGM P5 and PPM P6, maxval <= 255)


def write_netpbm(path, arr):
    """uint8 (H, W) writes P5; (H, W, 3) writes P6."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise ValueError("netpbm writer expects uint8 data")
    if arr.ndim == 2:
        magic, (h, w) = b"P5", arr.shape
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic, (h, w) = b"P6", arr.shape[:2]
    else:
        raise ValueError(f"cannot encode array of shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(arr.tobytes())


def _read_header_token(f):
    # skip whitespace and # comments, then read one token
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise ValueError("truncated netpbm header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_netpbm(path):
    """Returns uint8 (H, W) for P5, (H, W, 3) for P6."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"unsupported netpbm magic {magic!r}")
        w = int(_read_header_token(f))
        h = int(_read_header_token(f))
        maxval = int(_read_header_token(f))
        if not 0 < maxval <= 255:
            raise ValueError(f"unsupported maxval {maxval}")
        channels = 3 if magic == b"P6" else 1
        raw = f.read(w * h * channels)
    if len(raw) != w * h * channels:
        raise ValueError("truncated netpbm payload")
    arr = np.frombuffer(raw, dtype=np.uint8)
    return arr.reshape((h, w, 3)) if channels == 3 else arr.reshape((h, w))


def load_manifest(manifest_path):
    """Reads `relative-path,integer-label` lines; images as (N, 3, H, W) f64."""
    if not os.path.isfile(manifest_path):
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    base = os.path.dirname(os.path.abspath(manifest_path))
    imgs, labels = [], []
    with open(manifest_path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rel, _, lab = line.rpartition(",")
            if not rel:
                raise ValueError(f"bad manifest line: {line!r}")
            arr = read_netpbm(os.path.join(base, rel)).astype(float) / 255.0
            if arr.ndim == 2:
                arr = np.repeat(arr[None], 3, axis=0)
            else:
                arr = np.moveaxis(arr, -1, 0)
            imgs.append(arr)
            labels.append(int(lab))
    if not imgs:
        raise ValueError(f"manifest {manifest_path} lists no images")
    shapes = {a.shape for a in imgs}
    if len(shapes) != 1:
        raise ValueError(f"manifest images disagree on shape: {shapes}")
    return np.stack(imgs), np.array(labels)
