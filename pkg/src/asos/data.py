"""Raster tiles, manifests and the synthetic desk-scale dataset."""
import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

MAX_VALUE = 10000
CATEGORIES = ("WDPA-Ia", "WDPA-Ib", "WDPA-II", "anthropogenic", "synthetic-A", "synthetic-B")
MANIFEST_COLUMNS = ("file", "label", "category", "lon", "lat")

# binary tile container: magic, then h, w, c as little-endian uint32, then uint16 payload (h, w, c) C-order
TILE_MAGIC = b"ASR1"
_HEADER = struct.Struct("<4sIII")


class DataError(Exception):
    """Raised for missing, malformed or out-of-range input data."""


@dataclass
class RasterSample:
    id: str
    pixels: np.ndarray
    label: float
    location: Tuple[float, float]
    category: str
    crs: str = "geographic"

    @property
    def shape(self):
        return self.pixels.shape


def validate_pixels(pixels, name="tile"):
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    if pixels.ndim != 3:
        raise DataError(f"{name}: expected a (h, w, channels) raster, got shape {pixels.shape}")
    if not np.issubdtype(pixels.dtype, np.integer):
        if not np.all(np.isfinite(pixels)) or np.any(pixels != np.round(pixels)):
            raise DataError(f"{name}: pixel values must be integer reflectance counts")
    if pixels.size and (pixels.min() < 0 or pixels.max() > MAX_VALUE):
        raise DataError(
            f"{name}: pixel values must lie in [0, {MAX_VALUE}], "
            f"found [{pixels.min()}, {pixels.max()}]"
        )
    return pixels.astype(np.uint16, copy=False)


def write_tile(path, pixels):
    path = Path(path)
    pixels = validate_pixels(pixels, str(path))
    if path.suffix.lower() in (".tif", ".tiff"):
        import tifffile

        tifffile.imwrite(path, np.ascontiguousarray(pixels.transpose(2, 0, 1)), photometric="minisblack")
        return
    h, w, c = pixels.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(TILE_MAGIC, h, w, c))
        fh.write(np.ascontiguousarray(pixels).astype("<u2").tobytes())


def read_tile(path):
    """Read a tile as a (h, w, c) uint16 array.

    GeoTIFFs are stored band-first; the binary container is band-last.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"tile file not found: {path}")
    if path.suffix.lower() in (".tif", ".tiff"):
        import tifffile

        arr = tifffile.imread(path)
        if arr.ndim == 3 and arr.shape[0] < min(arr.shape[1:]):
            arr = arr.transpose(1, 2, 0)
        return validate_pixels(arr, str(path))
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated tile header")
    magic, h, w, c = _HEADER.unpack_from(raw)
    if magic != TILE_MAGIC:
        raise DataError(f"{path}: not a tile container (bad magic {magic!r})")
    payload = raw[_HEADER.size:]
    if len(payload) != 2 * h * w * c:
        raise DataError(f"{path}: payload holds {len(payload)} bytes, header implies {2 * h * w * c}")
    arr = np.frombuffer(payload, dtype="<u2").reshape(h, w, c)
    return validate_pixels(arr.astype(np.uint16), str(path))


def load_dataset(root_path, manifest) -> List[RasterSample]:
    """Load every tile listed in a manifest.

    The manifest is a UTF-8 CSV with header ``file,label,category,lon,lat``
    and an optional ``crs`` column (``geographic`` or ``planar``).
    Tile paths are resolved relative to ``root_path``.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    manifest = Path(manifest)
    if not manifest.exists():
        raise DataError(f"manifest not found: {manifest}")
    samples = []
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{manifest}: header lacks columns {missing}")
        # row 1 is the header
        for rownum, row in enumerate(reader, start=2):
            samples.append(_parse_row(root, manifest, rownum, row))
    return samples


def _parse_row(root, manifest, rownum, row):
    try:
        fname = row["file"].strip()
        label = float(row["label"])
        category = row["category"].strip()
        lon, lat = float(row["lon"]), float(row["lat"])
        crs = (row.get("crs") or "geographic").strip()
    except (TypeError, ValueError, AttributeError) as exc:
        raise DataError(f"{manifest}: malformed row {rownum}: {exc}") from None
    if not fname:
        raise DataError(f"{manifest}: malformed row {rownum}: empty file name")
    if label not in (0.0, 1.0):
        raise DataError(f"{manifest}: malformed row {rownum}: label must be 0 or 1, got {row['label']}")
    if category not in CATEGORIES:
        raise DataError(f"{manifest}: malformed row {rownum}: unknown category {category!r}")
    if crs not in ("geographic", "planar"):
        raise DataError(f"{manifest}: malformed row {rownum}: unknown crs {crs!r}")
    path = root / fname
    if not path.exists():
        raise DataError(f"{manifest}: row {rownum}: tile file not found: {fname}")
    pixels = read_tile(path)
    return RasterSample(Path(fname).stem, pixels, label, (lon, lat), category, crs)


def write_manifest(path, samples: Sequence[RasterSample], files: Sequence[str]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS + ("crs",))
        for s, f in zip(samples, files):
            writer.writerow([f, int(s.label), s.category, repr(float(s.location[0])),
                             repr(float(s.location[1])), s.crs])


def save_dataset(samples, root, manifest_name="manifest.csv", suffix=".bin"):
    root = Path(root)
    (root / "tiles").mkdir(parents=True, exist_ok=True)
    files = []
    for s in samples:
        rel = f"tiles/{s.id}{suffix}"
        write_tile(root / rel, s.pixels)
        files.append(rel)
    write_manifest(root / manifest_name, samples, files)
    return root / manifest_name


def stack_samples(samples: Sequence[RasterSample]):
    """Stack samples into an (n, h, w, c) array and an (n,) label vector."""
    if not samples:
        raise DataError("no samples")
    shapes = {s.pixels.shape for s in samples}
    if len(shapes) != 1:
        raise DataError(f"samples have differing shapes: {sorted(shapes)}")
    X = np.stack([s.pixels for s in samples])
    y = np.array([s.label for s in samples], dtype=np.float64)
    return X, y


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class TextureParams:
    base: float  # mean reflectance count
    slope: float  # per-channel change of the mean (spectral signature)
    amplitude: float
    noise: float
    frequency: float  # stripes: cycles per pixel; blobs: inverse smoothing length


@dataclass
class SynthConfig:
    n_samples: int = 200
    size: int = 64
    n_in: int = 3
    # class A (label 0): high-frequency stripes, class B (label 1): low-frequency blobs
    texture_a: TextureParams = field(default_factory=lambda: TextureParams(3200.0, 0.0, 900.0, 250.0, 0.15))
    texture_b: TextureParams = field(default_factory=lambda: TextureParams(1400.0, 700.0, 1200.0, 250.0, 0.08))
    group_size: int = 12  # mean number of tiles per spatial group
    spacing: float = 4000.0  # grid spacing inside a group, meters
    extent: float = 1.0e6  # side of the square holding group centers, meters
    seed: int = 0

    def validate(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2 per class")
        if self.size < 64:
            raise ValueError("tile size must be >= 64")
        if self.n_in < 1:
            raise ValueError("n_in must be >= 1")
        return self


def _stripes(rng, size, p: TextureParams):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(0, np.pi)
    freq = p.frequency * rng.uniform(0.8, 1.2)
    phase = rng.uniform(0, 2 * np.pi)
    return np.sign(np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase))


def _blobs(rng, size, p: TextureParams):
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=1.0 / p.frequency, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def _tile(rng, cfg: SynthConfig, p: TextureParams, pattern):
    pat = pattern(rng, cfg.size, p)
    offset = rng.normal(0.0, 150.0)
    channels = []
    for c in range(cfg.n_in):
        gain = rng.uniform(0.8, 1.2)
        chan = p.base + p.slope * c + offset + p.amplitude * gain * pat
        chan = chan + rng.normal(0.0, p.noise, pat.shape)
        channels.append(chan)
    tile = np.stack(channels, axis=-1)
    return np.clip(np.round(tile), 0, MAX_VALUE).astype(np.uint16)


def _locations(rng, n, cfg: SynthConfig):
    """Tiles sit on small jittered grids around random group centres."""
    locs = []
    while len(locs) < n:
        size = int(min(n - len(locs), max(1, rng.poisson(cfg.group_size))))
        centre = rng.uniform(0, cfg.extent, 2)
        side = int(np.ceil(np.sqrt(size)))
        for k in range(size):
            gx, gy = k % side, k // side
            jitter = rng.uniform(-0.25, 0.25, 2) * cfg.spacing
            locs.append(tuple(centre + np.array([gx, gy]) * cfg.spacing + jitter))
    return locs


def generate_synthetic(config: Optional[SynthConfig] = None) -> List[RasterSample]:
    """Deterministic two-class texture dataset standing in for real tiles."""
    cfg = (config or SynthConfig()).validate()
    rng = np.random.default_rng(cfg.seed)
    samples = []
    for label, category, params, pattern in (
        (0.0, "synthetic-A", cfg.texture_a, _stripes),
        (1.0, "synthetic-B", cfg.texture_b, _blobs),
    ):
        locs = _locations(rng, cfg.n_samples, cfg)
        for i in range(cfg.n_samples):
            tile = _tile(rng, cfg, params, pattern)
            sid = f"{category}-{i:05d}"
            samples.append(RasterSample(sid, tile, label, (float(locs[i][0]), float(locs[i][1])), category, "planar"))
    return samples
