"""Sensitivity maps: activation-space lookup (ASOS), input-image occlusion (IIOS), rendering."""
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .activation_space import SensitivityIndex
from .model import ASOSNet, check_divisible
from .training import scale_input, to_tensor

PURPLE = np.array([118, 42, 131], dtype=np.float64)
BEIGE = np.array([245, 245, 220], dtype=np.float64)
GREEN = np.array([27, 120, 55], dtype=np.float64)
GREY = np.array([128, 128, 128], dtype=np.uint8)
BOUNDARY = np.array([40, 40, 40], dtype=np.uint8)


@dataclass
class SensitivityMap:
    values: np.ndarray  # (h, w), NaN where undetermined
    mask: np.ndarray  # (h, w) True = undetermined
    method: str  # "asos" or "iios"
    bound: Optional[float] = None

    @property
    def shape(self):
        return self.values.shape

    def save(self, path):
        np.savez_compressed(path, values=self.values, mask=self.mask, method=self.method)

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            return cls(z["values"], z["mask"], str(z["method"]))


@dataclass
class IIOSConfig:
    l_patch: int = 8
    l_stride: int = 4
    tile_size: Optional[int] = None  # defaults to the classifier's bound size
    batch_size: int = 4  # small batches run fastest on CPU

    def validate(self, tile_size):
        if self.l_stride < 1 or self.l_patch < 1:
            raise ValueError("patch edge and stride must be positive")
        if self.l_stride > self.l_patch:
            raise ValueError("stride must not exceed the patch edge")
        if self.l_patch > tile_size:
            raise ValueError(f"patch edge {self.l_patch} exceeds tile size {tile_size}")


@torch.no_grad()
def asos_map(encoder_decoder, index: SensitivityIndex, image) -> SensitivityMap:
    """Per-pixel sensitivity of an image of any size (divisible by 16); no classifier pass."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected an (h, w, channels) image, got shape {image.shape}")
    check_divisible(*image.shape[:2])
    encoder_decoder.eval()
    dtype = next(encoder_decoder.parameters()).dtype
    a = encoder_decoder(to_tensor(scale_input(image[None]), dtype))[0].permute(1, 2, 0).numpy()
    eta, undetermined = index.lookup(a)
    return SensitivityMap(np.where(undetermined, np.nan, eta), undetermined, "asos")


def patch_origins(tile, patch, stride):
    return list(range(0, tile - patch + 1, stride))


@torch.no_grad()
def _iios_tile(model, tile, config: IIOSConfig):
    """Sum of per-pixel deviations and cover counts for one scaled (T, T, c) tile."""
    T = tile.shape[0]
    P = config.l_patch
    dtype = next(model.parameters()).dtype
    x = to_tensor(tile[None], dtype)
    _, base = model(x)
    base = base.double().item()
    origins = [(r, c) for r in patch_origins(T, P, config.l_stride) for c in patch_origins(T, P, config.l_stride)]
    total = np.zeros((T, T))
    count = np.zeros((T, T), dtype=np.int64)
    for start in range(0, len(origins), config.batch_size):
        chunk = origins[start:start + config.batch_size]
        xb = x.repeat(len(chunk), 1, 1, 1)
        for k, (r, c) in enumerate(chunk):
            xb[k, :, r:r + P, c:c + P] = 0
        _, occ = model(xb)
        deltas = (occ.double().numpy() - base) / P ** 2
        for (r, c), d in zip(chunk, deltas):
            total[r:r + P, c:c + P] += d
            count[r:r + P, c:c + P] += 1
    return total, count


def iios_map(model: ASOSNet, image, config: Optional[IIOSConfig] = None) -> SensitivityMap:
    """Occlusion sensitivity on the input image with a sliding zero patch.

    The image is split into classifier-sized tiles (zero-padded at the
    bottom/right edge); padded and never-covered pixels are masked.
    """
    config = config or IIOSConfig()
    T = config.tile_size or model.config.tile_size
    config.validate(T)
    model.eval()
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected an (h, w, channels) image, got shape {image.shape}")
    h, w, c = image.shape
    H, W = -(-h // T) * T, -(-w // T) * T
    padded = np.zeros((H, W, c), dtype=np.float32)
    padded[:h, :w] = scale_input(image)
    total = np.zeros((H, W))
    count = np.zeros((H, W), dtype=np.int64)
    for r in range(0, H, T):
        for col in range(0, W, T):
            t, n = _iios_tile(model, padded[r:r + T, col:col + T], config)
            total[r:r + T, col:col + T] = t
            count[r:r + T, col:col + T] = n
    total, count = total[:h, :w], count[:h, :w]
    mask = count == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(mask, np.nan, -total / np.maximum(count, 1))
    out = SensitivityMap(np.zeros((H, W)) * np.nan, np.ones((H, W), dtype=bool), "iios")
    out.values[:h, :w] = values
    out.mask[:h, :w] = mask
    return out


# --------------------------------------------------------------------------
# rendering


def percentile_bound(values, mask=None, q=98.0):
    """Colour-scale bound: the ``q``-th percentile of the absolute determined values."""
    v = np.asarray(values, dtype=np.float64)
    keep = np.isfinite(v) if mask is None else (~np.asarray(mask)) & np.isfinite(v)
    v = np.abs(v[keep])
    if v.size == 0:
        return 0.0
    return float(np.percentile(v, q))


def colorize(values, bound):
    """Diverging purple (negative) - beige (zero) - green (positive) colours over [-bound, bound]."""
    v = np.asarray(values, dtype=np.float64)
    t = np.clip(np.nan_to_num(v) / bound, -1.0, 1.0) if bound > 0 else np.zeros_like(v)
    t = t[..., None]
    rgb = np.where(t < 0, BEIGE + (-t) * (PURPLE - BEIGE), BEIGE + t * (GREEN - BEIGE))
    return np.round(rgb).astype(np.uint8)


def overlay_boundaries(rgb, classes):
    """Draw the borders between land-cover classes onto an RGB image."""
    classes = np.asarray(classes)
    edge = np.zeros(classes.shape, dtype=bool)
    edge[:-1, :] |= classes[:-1, :] != classes[1:, :]
    edge[:, :-1] |= classes[:, :-1] != classes[:, 1:]
    out = rgb.copy()
    out[edge] = BOUNDARY
    return out


@dataclass
class Rendering:
    rgb: np.ndarray
    bound: float
    legend: str


def render(smap: SensitivityMap, bound=None, multiplier=1.0, percentile=98.0, overlay=None) -> Rendering:
    """Colour a sensitivity map; undetermined pixels are grey.

    ``bound`` overrides the percentile rule; ``multiplier`` widens the scale
    (IIOS maps are shown with 10x the ASOS bound).
    """
    if bound is None:
        bound = percentile_bound(smap.values, smap.mask, percentile)
    bound = float(bound) * multiplier
    rgb = colorize(smap.values, bound)
    rgb[smap.mask] = GREY
    if overlay is not None:
        if overlay.shape[:2] != smap.shape:
            raise ValueError(f"overlay shape {overlay.shape} does not match map shape {smap.shape}")
        rgb = overlay_boundaries(rgb, overlay)
    legend = f"{smap.method.upper()} sensitivity, scale [-{bound:.3g}, {bound:.3g}]"
    if multiplier != 1.0:
        legend += f" (colour scale x{multiplier:g})"
    smap.bound = bound
    return Rendering(rgb, bound, legend)


def save_png(path, rendering: Rendering):
    from PIL import Image
    from PIL.PngImagePlugin import PngInfo

    info = PngInfo()
    info.add_text("legend", rendering.legend)
    info.add_text("bound", repr(rendering.bound))
    Image.fromarray(rendering.rgb).save(path, pnginfo=info)


def save_figure(path, rendering: Rendering, title=None):
    """Static figure with a colour bar carrying the legend."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.colors import LinearSegmentedColormap, Normalize

    cmap = LinearSegmentedColormap.from_list("asos", [PURPLE / 255, BEIGE / 255, GREEN / 255])
    fig, ax = plt.subplots(figsize=(6, 5))
    ax.imshow(rendering.rgb)
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    sm = plt.cm.ScalarMappable(norm=Normalize(-rendering.bound, rendering.bound), cmap=cmap)
    fig.colorbar(sm, ax=ax, label=rendering.legend)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
