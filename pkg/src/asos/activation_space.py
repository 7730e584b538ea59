"""Activation space analysis: point cloud, hypercube grid and occlusion sensitivities."""
import csv
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch

from .model import ASOSNet
from .training import correctly_classified, scale_input, to_tensor

logger = logging.getLogger(__name__)

INDEX_VERSION = 1
MAX_CELLS = 50_000_000


@dataclass
class ActivationPointCloud:
    points: np.ndarray  # (P, n_m)
    sample_index: np.ndarray  # (P,) row into sample_ids / maps
    pixels: np.ndarray  # (P, 2) row, col
    sample_ids: List[str]
    labels: np.ndarray  # (N,)
    maps: np.ndarray  # (N, h, w, n_m) full maps of the retained samples
    scores: np.ndarray  # (N,) un-occluded scores
    fraction: float
    frame: int

    def __len__(self):
        return len(self.points)

    @property
    def n_m(self):
        return self.maps.shape[-1]


@dataclass
class DeviationRecord:
    cube: tuple
    sample_id: str
    n_occ: int
    delta: float


def frame_mask(h, w, frame):
    """True where an activation lies outside the excluded margin."""
    mask = np.zeros((h, w), dtype=bool)
    if 2 * frame < h and 2 * frame < w:
        mask[frame:h - frame, frame:w - frame] = True
    return mask



@torch.no_grad()
def activation_maps(model: ASOSNet, X, batch_size=32):
    """Activation maps (n, h, w, n_m) and scores for raw-count images."""
    model.eval()
    dtype = next(model.parameters()).dtype
    maps, scores = [], []
    for i in range(0, len(X), batch_size):
        a, s = model(to_tensor(scale_input(X[i:i + batch_size]), dtype))
        maps.append(a.permute(0, 2, 3, 1).numpy())
        scores.append(s.double().numpy())
    n_m = model.config.n_m
    if not maps:
        return np.zeros((0, 0, 0, n_m), np.float32), np.zeros(0)
    return np.concatenate(maps), np.concatenate(scores)


@torch.no_grad()
def classify_maps(classifier, maps, batch_size=256):
    """Scores for (n, h, w, n_m) activation maps."""
    classifier.eval()
    dtype = next(classifier.parameters()).dtype
    out = [classifier(to_tensor(m, dtype)).double().numpy() for m in
           (maps[i:i + batch_size] for i in range(0, len(maps), batch_size))]
    return np.concatenate(out) if out else np.zeros(0)


def collect_activations(model: ASOSNet, X, y, ids: Optional[Sequence[str]] = None, frame=10,
                        fraction=1e-3, rng=None, batch_size=32) -> ActivationPointCloud:
    """Activations of the correctly classified samples, minus the frame, subsampled by ``fraction``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.float64)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(X))]
    maps, scores = activation_maps(model, X, batch_size)
    keep = correctly_classified(scores, y)
    if not keep.any():
        raise ValueError("collect_activations: no sample is classified correctly")
    maps, scores, y = maps[keep], scores[keep], y[keep]
    ids = [i for i, k in zip(ids, keep) if k]
    logger.info("kept %d of %d samples as correctly classified", len(ids), len(keep))
    return cloud_from_maps(maps, y, ids, scores, frame, fraction, rng)


def cloud_from_maps(maps, labels, ids, scores, frame=10, fraction=1e-3, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    n, h, w, n_m = maps.shape
    rows, cols = np.nonzero(frame_mask(h, w, frame))
    pts, sidx, pix = [], [], []
    for i in range(n):
        take = rng.random(len(rows)) < fraction
        pts.append(maps[i, rows[take], cols[take]])
        sidx.append(np.full(take.sum(), i))
        pix.append(np.column_stack([rows[take], cols[take]]))
    return ActivationPointCloud(
        points=np.concatenate(pts) if pts else np.zeros((0, n_m)),
        sample_index=np.concatenate(sidx).astype(np.int64) if sidx else np.zeros(0, np.int64),
        pixels=np.concatenate(pix) if pix else np.zeros((0, 2), np.int64),
        sample_ids=list(ids),
        labels=np.asarray(labels, dtype=np.float64),
        maps=maps,
        scores=np.asarray(scores, dtype=np.float64),
        fraction=fraction,
        frame=frame,
    )


def n_bins(l_cube):
    bins = int(round(2.0 / l_cube))
    if bins < 1 or abs(bins * l_cube - 2.0) > 1e-9:
        raise ValueError(f"cube edge {l_cube} does not divide the interval [-1, 1] evenly")
    return bins


def cube_coordinates(values, l_cube):
    """Integer cube coordinates of activation vectors; a value of exactly 1 falls into the last cube."""
    bins = n_bins(l_cube)
    idx = np.floor((np.asarray(values, dtype=np.float64) + 1.0) / l_cube).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


@dataclass
class SensitivityIndex:
    l_cube: float
    n_m: int
    density: np.ndarray  # per-cube point counts, shape (bins,) * n_m
    class_fraction: np.ndarray  # share of label-1 points per cube, NaN where empty
    density_multiplier: float = 2.0
    density_basis: str = "occupied"
    min_occluded: int = 10
    frame: int = 10
    fraction: float = 1e-3
    n_samples: int = 0
    eta: Optional[np.ndarray] = None  # NaN = undetermined
    n_deviations: Optional[np.ndarray] = None

    @property
    def bins(self):
        return n_bins(self.l_cube)

    @property
    def threshold(self):
        occupied = self.density[self.density > 0]
        if occupied.size == 0:
            return np.inf
        if self.density_basis == "occupied":
            avg = occupied.mean()
        elif self.density_basis == "volume":
            avg = self.density.sum() / self.density.size
        else:
            raise ValueError(f"unknown density basis {self.density_basis!r}")
        return self.density_multiplier * avg

    @property
    def qualifying(self):
        return (self.density > 0) & (self.density >= self.threshold)

    @property
    def undetermined(self):
        if self.eta is None:
            return np.ones(self.density.shape, dtype=bool)
        return ~np.isfinite(self.eta)

    def flat_ids(self, values):
        """Flat cube index per activation vector (last axis = channels)."""
        coords = cube_coordinates(values, self.l_cube)
        return np.ravel_multi_index(np.moveaxis(coords, -1, 0), self.density.shape)

    def lookup(self, values):
        """Sensitivity per activation vector and an undetermined mask."""
        if self.eta is None:
            raise ValueError("sensitivities have not been estimated")
        flat = self.flat_ids(values)
        eta = self.eta.reshape(-1)[flat]
        return eta, ~np.isfinite(eta)

    def save(self, path):
        np.savez_compressed(
            path,
            version=INDEX_VERSION,
            l_cube=self.l_cube,
            n_m=self.n_m,
            density=self.density,
            class_fraction=self.class_fraction,
            density_multiplier=self.density_multiplier,
            density_basis=self.density_basis,
            min_occluded=self.min_occluded,
            frame=self.frame,
            fraction=self.fraction,
            n_samples=self.n_samples,
            eta=self.eta if self.eta is not None else np.full(self.density.shape, np.nan),
            undetermined=self.undetermined,
            n_deviations=(self.n_deviations if self.n_deviations is not None
                          else np.zeros(self.density.shape, np.int64)),
        )

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as z:
            version = int(z["version"])
            if version != INDEX_VERSION:
                raise ValueError(f"{path}: unsupported index version {version}")
            return cls(
                l_cube=float(z["l_cube"]), n_m=int(z["n_m"]), density=z["density"],
                class_fraction=z["class_fraction"], density_multiplier=float(z["density_multiplier"]),
                density_basis=str(z["density_basis"]), min_occluded=int(z["min_occluded"]),
                frame=int(z["frame"]), fraction=float(z["fraction"]), n_samples=int(z["n_samples"]),
                eta=z["eta"], n_deviations=z["n_deviations"],
            )

    def to_csv(self, path):
        """One row per occupied cube: lower corner, density, qualification and sensitivity."""
        eta = self.eta if self.eta is not None else np.full(self.density.shape, np.nan)
        qual = self.qualifying
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([f"lower_{k}" for k in range(self.n_m)]
                       + ["density", "qualifying", "wild_fraction", "n_deviations", "eta"])
            for coord in zip(*np.nonzero(self.density)):
                lower = [round(-1.0 + c * self.l_cube, 10) for c in coord]
                nd = int(self.n_deviations[coord]) if self.n_deviations is not None else 0
                w.writerow(lower + [int(self.density[coord]), int(qual[coord]),
                                    f"{self.class_fraction[coord]:.6g}", nd, repr(float(eta[coord]))])


def build_grid(cloud: ActivationPointCloud, l_cube=0.1, density_multiplier=2.0, density_basis="occupied",
               min_occluded=10) -> SensitivityIndex:
    """Count points per cube of a regular grid over [-1, 1]^n_m (edge = stride = ``l_cube``)."""
    if len(cloud) == 0:
        raise ValueError("build_grid: empty activation cloud")
    if density_basis not in ("occupied", "volume"):
        raise ValueError(f"unknown density basis {density_basis!r}")
    bins = n_bins(l_cube)
    n_m = cloud.points.shape[1]
    if bins ** n_m > MAX_CELLS:
        raise ValueError(f"grid of {bins}^{n_m} cubes is too large; use a larger cube edge")
    shape = (bins,) * n_m
    coords = cube_coordinates(cloud.points, l_cube)
    flat = np.ravel_multi_index(coords.T, shape)
    density = np.bincount(flat, minlength=bins ** n_m).reshape(shape)
    wild = np.bincount(flat, weights=(cloud.labels[cloud.sample_index] >= 0.5).astype(float),
                       minlength=bins ** n_m).reshape(shape)
    with np.errstate(invalid="ignore", divide="ignore"):
        class_fraction = np.where(density > 0, wild / np.maximum(density, 1), np.nan)
    return SensitivityIndex(
        l_cube=l_cube, n_m=n_m, density=density, class_fraction=class_fraction,
        density_multiplier=density_multiplier, density_basis=density_basis, min_occluded=min_occluded,
        frame=cloud.frame, fraction=cloud.fraction, n_samples=len(cloud.sample_ids),
    )


def occlude(amap, mask):
    """Zero full activation vectors where ``mask`` (h, w) is True."""
    out = np.array(amap, copy=True)
    out[mask] = 0
    return out


def occlusion_deviation(classifier, amap, mask, baseline=None):
    """``(delta, n_occ)`` for one map; ``delta = 0`` when nothing is occluded."""
    n_occ = int(np.count_nonzero(mask))
    if baseline is None:
        baseline = classify_maps(classifier, amap[None])[0]
    if n_occ == 0:
        return 0.0, 0
    occluded = classify_maps(classifier, occlude(amap, mask)[None])[0]
    return (occluded - baseline) / n_occ, n_occ


def estimate_sensitivities(classifier, maps, index: SensitivityIndex, baseline=None, ids=None,
                           batch_size=256, return_records=False):
    """Fill ``index.eta`` by occluding each qualifying cube in every map.

    For each qualifying cube and each map, all activation vectors inside the
    cube (and outside the frame) are zeroed and the map re-classified. Maps
    with ``n_occ <= index.min_occluded`` are skipped; ``eta`` is the negative
    mean of the remaining per-activation deviations.
    """
    maps = np.asarray(maps)
    n, h, w, n_m = maps.shape
    if n_m != index.n_m:
        raise ValueError(f"maps have {n_m} channels, index expects {index.n_m}")
    ids = list(ids) if ids is not None else [str(i) for i in range(n)]
    if baseline is None:
        baseline = classify_maps(classifier, maps, batch_size)
    baseline = np.asarray(baseline, dtype=np.float64)

    eligible = frame_mask(h, w, index.frame)
    cell = np.where(eligible[None], index.flat_ids(maps), -1)  # (n, h, w)
    qual_flat = np.flatnonzero(index.qualifying.reshape(-1))
    is_qual = np.zeros(index.density.size, dtype=bool)
    is_qual[qual_flat] = True

    # (cube -> [(sample, n_occ)]) for samples clearing the occlusion threshold
    members = {}
    for i in range(n):
        c = cell[i][cell[i] >= 0]
        cubes, counts = np.unique(c, return_counts=True)
        for cube, cnt in zip(cubes, counts):
            if is_qual[cube] and cnt > index.min_occluded:
                members.setdefault(int(cube), []).append((i, int(cnt)))

    eta = np.full(index.density.size, np.nan)
    n_dev = np.zeros(index.density.size, dtype=np.int64)
    records = []
    for k, cube in enumerate(qual_flat):
        entries = members.get(int(cube), [])
        if not entries:
            continue
        deltas = []
        for start in range(0, len(entries), batch_size):
            chunk = entries[start:start + batch_size]
            idx = np.array([e[0] for e in chunk])
            n_occ = np.array([e[1] for e in chunk], dtype=np.float64)
            occluded = maps[idx].copy()
            occluded[cell[idx] == cube] = 0
            scores = classify_maps(classifier, occluded, batch_size)
            d = (scores - baseline[idx]) / n_occ
            deltas.append(d)
            if return_records:
                coord = np.unravel_index(cube, index.density.shape)
                records.extend(DeviationRecord(tuple(int(c) for c in coord), ids[i], int(m), float(v))
                               for i, m, v in zip(idx, n_occ, d))
        deltas = np.concatenate(deltas)
        eta[cube] = -deltas.mean()
        n_dev[cube] = len(deltas)
        if (k + 1) % 50 == 0:
            logger.info("estimated %d of %d cubes", k + 1, len(qual_flat))

    index.eta = eta.reshape(index.density.shape)
    index.n_deviations = n_dev.reshape(index.density.shape)
    if return_records:
        return index, records
    return index
