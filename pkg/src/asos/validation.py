"""Input checks shared by the estimators and the command line."""
import numpy as np

from .data import MAX_VALUE
from .model import DIVISOR


def check_images(X, *, divisible=False, square=False, n_channels=None, same_shape=True):
    """Validate raw-count images and return a (n, h, w, c) uint16 array.

    With ``same_shape=False`` a list of (h, w, c) arrays is returned instead,
    so images of different sizes can be processed one by one.
    """
    if isinstance(X, np.ndarray) and X.ndim == 4:
        images = list(X)
    elif isinstance(X, np.ndarray) and X.ndim == 3:
        images = [X]
    else:
        images = [np.asarray(x) for x in X]
    if not images:
        raise ValueError("no images given")
    out = []
    for k, img in enumerate(images):
        img = np.asarray(img)
        if img.ndim == 2:
            img = img[:, :, None]
        if img.ndim != 3:
            raise ValueError(f"image {k}: expected (h, w, channels), got shape {img.shape}")
        if not np.all(np.isfinite(img)):
            raise ValueError(f"image {k}: non-finite values")
        if img.min() < 0 or img.max() > MAX_VALUE:
            raise ValueError(f"image {k}: values must lie in [0, {MAX_VALUE}]")
        h, w, c = img.shape
        if n_channels is not None and c != n_channels:
            raise ValueError(f"image {k}: expected {n_channels} channels, got {c}")
        if square and h != w:
            raise ValueError(f"image {k}: expected a square tile, got {h}x{w}")
        if divisible and (h % DIVISOR or w % DIVISOR):
            raise ValueError(f"image {k}: size {h}x{w} must be divisible by {DIVISOR}; pad the image")
        out.append(img.astype(np.uint16))
    if not same_shape:
        return out
    if len({img.shape for img in out}) != 1:
        raise ValueError("images differ in shape")
    return np.stack(out)


def check_labels(y, n):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(y) != n:
        raise ValueError(f"got {n} images but {len(y)} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 (anthropogenic) or 1 (wild)")
    return y
