"""Encoder-decoder producing a tanh activation map, and the score classifier."""
from dataclasses import asdict, dataclass
from typing import Tuple

import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_VERSION = 1
DIVISOR = 16  # four 2x poolings


@dataclass
class ModelConfig:
    n_in: int = 10
    n_m: int = 3
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    bottleneck: int = 640
    tile_size: int = 256  # spatial size the classifier's linear layers are bound to
    kernel: int = 5
    stride: int = 3
    hidden: int = 128

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.n_in < 1 or self.n_m < 1:
            raise ValueError("n_in and n_m must be >= 1")
        if len(self.widths) != 4:
            raise ValueError("the encoder has exactly four stages")
        if self.tile_size % DIVISOR:
            raise ValueError(f"tile_size must be divisible by {DIVISOR}")
        if classifier_feature_size(self.tile_size, self.kernel, self.stride) < 1:
            raise ValueError(f"tile_size {self.tile_size} too small for three kernel-{self.kernel} convolutions")

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def classifier_feature_size(size, kernel=5, stride=3):
    for _ in range(3):
        size = (size - kernel) // stride + 1
    return size


def check_divisible(h, w):
    if h % DIVISOR or w % DIVISOR:
        ph, pw = -h % DIVISOR, -w % DIVISOR
        raise ValueError(
            f"image size {h}x{w} is not divisible by {DIVISOR}; "
            f"pad it by {ph} rows and {pw} columns (e.g. to {h + ph}x{w + pw})"
        )


def _block(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class EncoderDecoder(nn.Module):
    """U-Net with one convolution per step and bilinear upsampling.

    Input ``(B, n_in, h, w)``, output ``(B, n_m, h, w)`` in [-1, 1].
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w = config.widths
        self.down = nn.ModuleList()
        c = config.n_in
        for width in w:
            self.down.append(_block(c, width))
            c = width
        self.bottom = _block(c, config.bottleneck)
        self.up = nn.ModuleList()
        c = config.bottleneck
        for width in reversed(w):
            self.up.append(_block(c + width, width))
            c = width
        # output layer: no batch norm, tanh
        self.head = nn.Conv2d(c, config.n_m, 1)

    def forward(self, x):
        check_divisible(x.shape[-2], x.shape[-1])
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottom(x)
        for block, skip in zip(self.up, reversed(skips)):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
        return torch.tanh(self.head(x))


class Classifier(nn.Module):
    """Three strided convolutions doubling the channels, then two linear layers."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        n = config.n_m
        k, s = config.kernel, config.stride
        self.features = nn.Sequential(
            nn.Conv2d(n, 2 * n, k, stride=s), nn.ReLU(inplace=True),
            nn.Conv2d(2 * n, 4 * n, k, stride=s), nn.ReLU(inplace=True),
            nn.Conv2d(4 * n, 8 * n, k, stride=s), nn.ReLU(inplace=True),
        )
        side = classifier_feature_size(config.tile_size, k, s)
        self.fc1 = nn.Linear(8 * n * side * side, config.hidden)
        self.fc2 = nn.Linear(config.hidden, 1)

    def forward(self, a):
        size = self.config.tile_size
        if a.shape[-2:] != (size, size):
            raise ValueError(
                f"classifier is bound to {size}x{size} activation maps, got {tuple(a.shape[-2:])}"
            )
        x = torch.flatten(self.features(a), 1)
        x = F.relu(self.fc1(x))
        return torch.sigmoid(self.fc2(x)).squeeze(1)


def occlude_positions(a, rate, generator=None):
    """Zero whole activation vectors, each spatial position independently with probability ``rate``."""
    if rate <= 0:
        return a
    keep = torch.rand(a.shape[0], 1, *a.shape[2:], generator=generator, device=a.device) >= rate
    return a * keep.to(a.dtype)


class ASOSNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder_decoder = EncoderDecoder(config)
        self.classifier = Classifier(config)

    def forward(self, x, occlusion_rate=0.0, generator=None):
        """Return ``(activation_map, score)``; the map is exactly what the classifier consumed.

        ``occlusion_rate`` applies random activation occlusion (training only).
        """
        a = self.encoder_decoder(x)
        if self.training and occlusion_rate > 0:
            a = occlude_positions(a, occlusion_rate, generator)
        return a, self.classifier(a)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def init_weights(model):
    """He-normal (fan-in) init for ReLU layers, Xavier for the tanh and sigmoid outputs."""
    for name, m in model.named_modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            if name.endswith(("head", "fc2")):
                nn.init.xavier_normal_(m.weight)
            else:
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)
    return model


def build_model(config: ModelConfig = None, seed=0):
    """Seeded model construction."""
    config = config or ModelConfig()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = init_weights(ASOSNet(config))
    return model


def save_checkpoint(path, model: ASOSNet, extra=None):
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "version" not in payload:
        raise ValueError(f"{path}: not an ASOS checkpoint (missing version)")
    if payload["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload['version']}")
    model = ASOSNet(ModelConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})
