"""End-to-end training: rotations, CutMix soft labels, random activation occlusion, MSE, one-cycle SGD."""
import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .data import MAX_VALUE, RasterSample
from .model import ASOSNet, ModelConfig, build_model

logger = logging.getLogger(__name__)

EDGES = ("top", "bottom", "left", "right")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 5
    max_lr: float = 1e-2
    weight_decay: float = 1e-4
    momentum: float = 0.9
    warmup_fraction: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    cutmix_prob: float = 0.8
    cutmix_max_fraction: float = 0.5
    occlusion_rate: Tuple[float, float] = (0.2, 0.5)
    rotations: Tuple[int, ...] = (90, 180, 270)
    seed: int = 0

    def __post_init__(self):
        self.occlusion_rate = tuple(float(r) for r in self.occlusion_rate)
        self.rotations = tuple(int(r) for r in self.rotations)
        lo, hi = self.occlusion_rate
        for name, p in (("cutmix_prob", self.cutmix_prob), ("occlusion_rate", lo), ("occlusion_rate", hi)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if lo > hi:
            raise ValueError("occlusion_rate must be (low, high) with low <= high")
        if not 0.0 <= self.cutmix_max_fraction <= 0.5:
            raise ValueError("cutmix_max_fraction must lie in [0, 0.5]")
        if any(r not in (90, 180, 270) for r in self.rotations):
            raise ValueError("rotations must be a subset of {90, 180, 270}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["occlusion_rate"] = list(self.occlusion_rate)
        d["rotations"] = list(self.rotations)
        return d


def scale_input(pixels):
    """Reflectance counts in [0, 10000] to floats in [0, 1]."""
    arr = np.asarray(pixels)
    if arr.size and (arr.min() < 0 or arr.max() > MAX_VALUE):
        raise ValueError(f"pixel values must lie in [0, {MAX_VALUE}], found [{arr.min()}, {arr.max()}]")
    return arr.astype(np.float32) / MAX_VALUE


# --------------------------------------------------------------------------
# CutMix


@dataclass
class MixedSample:
    pixels: np.ndarray
    label: float
    provenance: Tuple[str, str, float]


def stripe_slices(shape, edge, width):
    h, w = shape[:2]
    if edge == "top":
        return slice(0, width), slice(None)
    if edge == "bottom":
        return slice(h - width, h), slice(None)
    if edge == "left":
        return slice(None), slice(0, width)
    if edge == "right":
        return slice(None), slice(w - width, w)
    raise ValueError(f"unknown edge {edge!r}")


def paste_stripe(a, b, edge, width):
    """Copy of ``a`` with the ``width``-pixel stripe at ``edge`` taken from ``b``.

    Returns the mixed array and the pasted pixel fraction.
    """
    if a.shape != b.shape:
        raise ValueError(f"cannot mix tiles of shapes {a.shape} and {b.shape}")
    out = a.copy()
    if width > 0:
        rows, cols = stripe_slices(a.shape, edge, width)
        out[rows, cols] = b[rows, cols]
    h, w = a.shape[:2]
    pasted = width * (w if edge in ("top", "bottom") else h)
    return out, pasted / (h * w)


def draw_stripe(rng, shape, max_fraction=0.5):
    h, w = shape[:2]
    edge = EDGES[rng.integers(4)]
    side = h if edge in ("top", "bottom") else w
    width = int(rng.integers(0, int(math.floor(max_fraction * side)) + 1))
    return edge, width


def mix_labels(label_a, label_b, f):
    return (1.0 - f) * label_a + f * label_b


def cutmix(a: RasterSample, b: RasterSample, rng, max_fraction=0.5, edge=None, width=None) -> MixedSample:
    """Paste a stripe of ``b`` at a random edge of ``a``; the label mixes by pasted area."""
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"cannot mix {a.id} {a.pixels.shape} with {b.id} {b.pixels.shape}")
    if edge is None or width is None:
        edge, width = draw_stripe(rng, a.pixels.shape, max_fraction)
    mixed, f = paste_stripe(scale_input(a.pixels), scale_input(b.pixels), edge, width)
    return MixedSample(mixed, mix_labels(a.label, b.label, f), (a.id, b.id, f))


def occlude_random_activations(amap, rate, rng):
    """Zero each spatial position's full activation vector with probability ``rate``."""
    amap = np.asarray(amap)
    drop = rng.random(amap.shape[:2]) < rate
    out = amap.copy()
    out[drop] = 0
    return out


# --------------------------------------------------------------------------
# training loop


def augment_batch(X, y, config: TrainConfig, rng):
    """Rotate, CutMix (partner = next sample in the batch) and scale one batch.

    ``X`` is (B, h, w, c) counts; returns float32 (B, h, w, c) and soft labels.
    """
    angles = (0,) + config.rotations
    X = np.stack([np.rot90(x, angles[rng.integers(len(angles))] // 90, axes=(0, 1)) for x in X])
    Xs = scale_input(X)
    y = np.asarray(y, dtype=np.float64)
    out, labels = Xs.copy(), y.copy()
    n = len(Xs)
    for i in range(n):
        if n > 1 and rng.random() < config.cutmix_prob:
            j = (i + 1) % n
            edge, width = draw_stripe(rng, Xs[i].shape, config.cutmix_max_fraction)
            out[i], f = paste_stripe(Xs[i], Xs[j], edge, width)
            labels[i] = mix_labels(y[i], y[j], f)
    return out, labels


def to_tensor(X, dtype=torch.float32):
    """(B, h, w, c) array to a (B, c, h, w) tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(X).transpose(0, 3, 1, 2))).to(dtype)


@torch.no_grad()
def predict_scores(model: ASOSNet, X, batch_size=64):
    """Scores for raw-count images in inference mode."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(X), batch_size):
        _, s = model(to_tensor(scale_input(X[i:i + batch_size]), dtype))
        out.append(s.double().numpy())
    return np.concatenate(out) if out else np.zeros(0)


def correctly_classified(scores, labels):
    """(score >= 0.5 and label 1) or (score < 0.5 and label 0)."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    return (scores >= 0.5) == (labels >= 0.5)


def accuracy(model, X, y, batch_size=64):
    if len(X) == 0:
        return float("nan")
    return float(correctly_classified(predict_scores(model, X, batch_size), y).mean())


@dataclass
class History:
    rows: List[dict] = field(default_factory=list)

    @property
    def losses(self):
        return [r["loss"] for r in self.rows]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "loss", "train_acc", "val_acc"])
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in w.fieldnames})


def make_scheduler(optimizer, config: TrainConfig, total_steps):
    return torch.optim.lr_scheduler.OneCycleLR(
        optimizer,
        max_lr=config.max_lr,
        total_steps=total_steps,
        pct_start=config.warmup_fraction,
        anneal_strategy="cos",
        cycle_momentum=False,
        div_factor=config.div_factor,
        final_div_factor=config.final_div_factor,
    )


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # batch norm cannot train on a single sample
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate(batches[-2:])
        batches.pop()
    return batches


def train(X, y, config: Optional[TrainConfig] = None, model: Optional[ASOSNet] = None,
          model_config: Optional[ModelConfig] = None, X_val=None, y_val=None, eval_train=True):
    """Train the composed network on raw-count tiles ``X`` (n, h, w, c) with labels ``y``.

    Returns ``(model, history)``; ``model`` is left in eval mode.
    """
    config = config or TrainConfig()
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("train: empty training set")
    if len(X) != len(y):
        raise ValueError(f"train: {len(X)} tiles but {len(y)} labels")
    if X.shape[1] != X.shape[2] and any(r in (90, 270) for r in config.rotations):
        raise ValueError("90/270 degree rotations need square tiles")
    if model is None:
        model_config = model_config or ModelConfig(n_in=X.shape[3], tile_size=X.shape[1])
        model = build_model(model_config, seed=config.seed)

    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.SGD(model.parameters(), lr=config.max_lr / config.div_factor,
                                momentum=config.momentum, weight_decay=config.weight_decay)
    steps_per_epoch = len(_batches(len(X), config.batch_size, np.random.default_rng(0)))
    scheduler = make_scheduler(optimizer, config, steps_per_epoch * config.epochs)
    dtype = next(model.parameters()).dtype

    history = History()
    lo, hi = config.occlusion_rate
    for epoch in range(1, config.epochs + 1):
        model.train()
        total, count = 0.0, 0
        for idx in _batches(len(X), config.batch_size, rng):
            xb, yb = augment_batch(X[idx], y[idx], config, rng)
            rate = float(rng.uniform(lo, hi))
            _, pred = model(to_tensor(xb, dtype), occlusion_rate=rate, generator=gen)
            loss = F.mse_loss(pred, torch.as_tensor(yb, dtype=dtype))
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} (lr={scheduler.get_last_lr()[0]:.3g}); "
                    "lower max_lr or check the inputs"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            total += loss.item() * len(idx)
            count += len(idx)
        row = {
            "epoch": epoch,
            "loss": total / count,
            "train_acc": accuracy(model, X, y) if eval_train else float("nan"),
            "val_acc": accuracy(model, X_val, y_val) if X_val is not None and len(X_val) else float("nan"),
        }
        history.rows.append(row)
        logger.info("epoch %d loss %.5f train_acc %.4f val_acc %.4f", epoch, row["loss"],
                    row["train_acc"], row["val_acc"])
    model.eval()
    return model, history
