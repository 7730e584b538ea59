"""Command line interface: ``asos {synth,split,train,analyze,map}``."""
import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .activation_space import (SensitivityIndex, activation_maps, build_grid, cloud_from_maps,
                               estimate_sensitivities)
from .data import DataError, SynthConfig, generate_synthetic, load_dataset, read_tile, save_dataset, \
    stack_samples
from .maps import IIOSConfig, asos_map, iios_map, render, save_figure, save_png
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .split import SplitAssignment, spatial_split
from .training import TrainConfig, TrainingDiverged, correctly_classified, train

logger = logging.getLogger("asos")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

CACHE_ENV = "ASOS_CACHE_DIR"


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------
# config and run manifests


def load_config(path):
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: expected key: value pairs")
    return cfg


def resolve(defaults, file_cfg, flags):
    """Defaults, overridden by the config file, overridden by explicit flags."""
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = dict(defaults)
    out.update(file_cfg)
    out.update({k: v for k, v in flags.items() if k in defaults and v is not None})
    return out


def _jsonable(v):
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, np.generic):
        return v.item()
    return v


def atomic_write_text(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_run_manifest(path, subcommand, config, inputs, outputs, started):
    record = {
        "subcommand": subcommand,
        "tool_version": __version__,
        "config": {k: _jsonable(v) for k, v in config.items()},
        "seed": config.get("seed"),
        "inputs": {k: _jsonable(v) for k, v in inputs.items()},
        "outputs": [str(o) for o in outputs],
        "duration_seconds": round(time.time() - started, 3),
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    atomic_write_text(path, json.dumps(record, indent=2, sort_keys=True) + "\n")


def _parse_fractions(text):
    if text is None:
        return None
    try:
        parts = tuple(float(p) for p in str(text).split(","))
    except ValueError:
        raise ConfigError(f"fractions must be comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise ConfigError("fractions need three values (train,val,test)")
    return parts


def _load_samples(args):
    manifest = Path(args.manifest)
    root = Path(args.root) if args.root else manifest.parent
    return load_dataset(root, manifest)


def _subset(samples, assignment, name):
    if assignment is None:
        return list(samples) if name == "train" else []
    missing = [s.id for s in samples if s.id not in assignment.subset]
    if missing:
        raise DataError(f"split file lacks {len(missing)} samples, e.g. {missing[0]}")
    return [s for s in samples if assignment.subset[s.id] == name]


def _load_split(path):
    if path is None:
        return None
    if not Path(path).exists():
        raise DataError(f"split file not found: {path}")
    return SplitAssignment.from_csv(path)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    started = time.time()
    defaults = {"n_samples": 200, "size": 64, "n_in": 3, "seed": 0, "format": "bin"}
    cfg = resolve(defaults, load_config(args.config), vars(args))
    try:
        synth = SynthConfig(n_samples=int(cfg["n_samples"]), size=int(cfg["size"]), n_in=int(cfg["n_in"]),
                            seed=int(cfg["seed"])).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg["format"] not in ("bin", "tif"):
        raise ConfigError("format must be 'bin' or 'tif'")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = generate_synthetic(synth)
    manifest = save_dataset(samples, out, suffix="." + cfg["format"])
    write_run_manifest(out / "run_manifest.json", "synth", cfg, {}, [manifest], started)
    print(f"wrote {len(samples)} tiles and {manifest}")


def cmd_split(args):
    started = time.time()
    defaults = {"eps": 10_000.0, "fractions": (0.8, 0.1, 0.1), "seed": 0, "max_cluster_size": "auto",
                "min_cluster_size": 5}
    flags = dict(vars(args), fractions=_parse_fractions(args.fractions))
    cfg = resolve(defaults, load_config(args.config), flags)
    mcs = cfg["max_cluster_size"]
    if mcs not in ("auto", None, "none"):
        try:
            mcs = int(mcs)
        except ValueError:
            raise ConfigError(f"max_cluster_size must be 'auto', 'none' or an integer, got {mcs!r}") from None
    elif mcs == "none":
        mcs = None
    samples = _load_samples(args)
    try:
        assignment = spatial_split(samples, eps=float(cfg["eps"]), max_cluster_size=mcs,
                                   fractions=tuple(cfg["fractions"]), seed=int(cfg["seed"]),
                                   min_cluster_size=int(cfg["min_cluster_size"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    assignment.to_csv(out)
    write_run_manifest(out.with_name(out.name + ".run.json"), "split", cfg,
                       {"manifest": args.manifest}, [out], started)
    print("subset counts:", assignment.counts())


def cmd_train(args):
    started = time.time()
    tdef = TrainConfig().to_dict()
    mdef = {k: v for k, v in ModelConfig().to_dict().items() if k in ("n_m", "widths", "bottleneck")}
    defaults = {**tdef, **mdef}
    cfg = resolve(defaults, load_config(args.config), vars(args))
    try:
        tcfg = TrainConfig(**{k: cfg[k] for k in tdef})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    samples = _load_samples(args)
    assignment = _load_split(args.split)
    train_s = _subset(samples, assignment, "train")
    val_s = _subset(samples, assignment, "val")
    if not train_s:
        raise DataError("no training samples")
    X, y = stack_samples(train_s)
    Xv, yv = stack_samples(val_s) if val_s else (None, None)
    try:
        mcfg = ModelConfig(n_in=X.shape[3], tile_size=X.shape[1], n_m=int(cfg["n_m"]),
                           widths=tuple(cfg["widths"]), bottleneck=int(cfg["bottleneck"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    model, history = train(X, y, tcfg, model_config=mcfg, X_val=Xv, y_val=yv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.pt", model, extra={"train_config": tcfg.to_dict()})
    history.to_csv(out / "history.csv")
    write_run_manifest(out / "run_manifest.json", "train", cfg,
                       {"manifest": args.manifest, "split": args.split},
                       [out / "model.pt", out / "history.csv"], started)
    last = history.rows[-1]
    print(f"epoch {last['epoch']}: loss {last['loss']:.5f} train_acc {last['train_acc']:.4f} "
          f"val_acc {last['val_acc']:.4f}")


def _cached_maps(checkpoint, model, X, ids):
    """Activation maps of ``X``, cached under $ASOS_CACHE_DIR when set."""
    cache_dir = os.environ.get(CACHE_ENV)
    if not cache_dir:
        return activation_maps(model, X)
    h = hashlib.sha256(Path(checkpoint).read_bytes())
    h.update("\n".join(ids).encode())
    h.update(np.ascontiguousarray(X).tobytes())
    path = Path(cache_dir) / f"maps-{h.hexdigest()[:24]}.npz"
    if path.exists():
        with np.load(path) as z:
            return z["maps"], z["scores"]
    maps, scores = activation_maps(model, X)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, maps=maps, scores=scores)
    return maps, scores


def write_confusion(path, labels, scores):
    """Rows: true class; columns: predicted class (anthropogenic, wild)."""
    pred = (np.asarray(scores) >= 0.5).astype(int)
    lab = (np.asarray(labels) >= 0.5).astype(int)
    m = np.zeros((2, 2), dtype=int)
    for t, p in zip(lab, pred):
        m[t, p] += 1
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "pred_anthropogenic", "pred_wild"])
        w.writerow(["anthropogenic", m[0, 0], m[0, 1]])
        w.writerow(["wild", m[1, 0], m[1, 1]])
    return m


def cmd_analyze(args):
    from .plots import plot_activation_space, plot_sensitivities

    started = time.time()
    defaults = {"l_cube": 0.1, "density_multiplier": 2.0, "density_basis": "occupied", "min_occluded": 10,
                "frame": 10, "fraction": 1e-3, "seed": 0}
    cfg = resolve(defaults, load_config(args.config), vars(args))
    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    model, _ = load_checkpoint(args.checkpoint)
    samples = _load_samples(args)
    assignment = _load_split(args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []

    subsets = ("train", "val", "test") if assignment is not None else ("train",)
    train_maps = None
    for name in subsets:
        part = _subset(samples, assignment, name)
        if not part:
            continue
        X, y = stack_samples(part)
        ids = [s.id for s in part]
        maps, scores = _cached_maps(args.checkpoint, model, X, ids)
        label = name if assignment is not None else "all"
        path = out / f"confusion_{label}.csv"
        write_confusion(path, y, scores)
        outputs.append(path)
        if name == "train":
            train_maps = (maps, scores, y, ids)
    if train_maps is None:
        raise DataError("no training samples to analyse")

    maps, scores, y, ids = train_maps
    keep = correctly_classified(scores, y)
    if not keep.any():
        raise DataError("no training sample is classified correctly")
    cloud = cloud_from_maps(maps[keep], y[keep], [i for i, k in zip(ids, keep) if k], scores[keep],
                            frame=int(cfg["frame"]), fraction=float(cfg["fraction"]),
                            rng=np.random.default_rng(int(cfg["seed"])))
    try:
        index = build_grid(cloud, float(cfg["l_cube"]), float(cfg["density_multiplier"]),
                           cfg["density_basis"], int(cfg["min_occluded"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    estimate_sensitivities(model.classifier, cloud.maps, index, baseline=cloud.scores, ids=cloud.sample_ids)
    index.save(out / "index.npz")
    index.to_csv(out / "cubes.csv")
    plot_activation_space(cloud, out / "activation_space.png")
    plot_sensitivities(index, out / "sensitivities.png")
    outputs += [out / "index.npz", out / "cubes.csv", out / "activation_space.png", out / "sensitivities.png"]
    write_run_manifest(out / "run_manifest.json", "analyze", cfg,
                       {"checkpoint": args.checkpoint, "manifest": args.manifest, "split": args.split},
                       outputs, started)
    n_det = int((~index.undetermined).sum())
    print(f"{len(cloud.sample_ids)} correctly classified maps, {len(cloud)} points, "
          f"{int(index.qualifying.sum())} qualifying cubes, {n_det} with a sensitivity")


def _read_raster(path):
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    return read_tile(path)


def cmd_map(args):
    started = time.time()
    defaults = {"method": "asos", "bound": None, "percentile": 98.0, "iios_multiplier": 10.0,
                "l_patch": 8, "l_stride": 4}
    cfg = resolve(defaults, load_config(args.config), vars(args))
    if cfg["method"] not in ("asos", "iios", "both"):
        raise ConfigError("method must be asos, iios or both")
    if not Path(args.checkpoint).exists():
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    model, _ = load_checkpoint(args.checkpoint)
    index = None
    if cfg["method"] in ("asos", "both"):
        if not args.index:
            raise ConfigError("--index is required for ASOS maps")
        if not Path(args.index).exists():
            raise DataError(f"index not found: {args.index}")
        index = SensitivityIndex.load(args.index)
    overlay = _read_raster(args.overlay)[..., 0] if args.overlay else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for image_path in args.image:
        image = _read_raster(image_path)
        stem = Path(image_path).stem
        bound = cfg["bound"]
        if index is not None:
            try:
                smap = asos_map(model.encoder_decoder, index, image)
            except ValueError as exc:
                raise DataError(f"{image_path}: {exc}") from None
            rendering = render(smap, bound=bound, percentile=float(cfg["percentile"]), overlay=overlay)
            bound = rendering.bound
            outputs += _write_map(out, stem, smap, rendering)
        if cfg["method"] in ("iios", "both"):
            icfg = IIOSConfig(int(cfg["l_patch"]), int(cfg["l_stride"]))
            try:
                smap = iios_map(model, image, icfg)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            mult = float(cfg["iios_multiplier"]) if bound is not None else 1.0
            rendering = render(smap, bound=bound, multiplier=mult, percentile=float(cfg["percentile"]),
                               overlay=overlay)
            outputs += _write_map(out, stem, smap, rendering)
    write_run_manifest(out / "run_manifest.json", "map", cfg,
                       {"checkpoint": args.checkpoint, "index": args.index, "images": args.image,
                        "overlay": args.overlay}, outputs, started)
    print(f"wrote {len(outputs)} files to {out}")


def _write_map(out, stem, smap, rendering):
    base = out / f"{stem}_{smap.method}"
    smap.save(f"{base}.npz")
    save_png(f"{base}.png", rendering)
    save_figure(f"{base}_figure.png", rendering, title=f"{stem} ({smap.method.upper()})")
    return [Path(f"{base}.npz"), Path(f"{base}.png"), Path(f"{base}_figure.png")]


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="asos", description="Activation space occlusion sensitivity.")
    p.add_argument("--version", action="version", version=f"asos {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--jobs", type=int, default=None, help="cap on worker threads")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic two-class dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--n-samples", type=int, help="tiles per class")
    s.add_argument("--size", type=int)
    s.add_argument("--n-in", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--format", choices=("bin", "tif"))
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="spatially consistent train/val/test split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--root")
    s.add_argument("--out", required=True, help="assignment CSV")
    s.add_argument("--config")
    s.add_argument("--eps", type=float, help="clustering distance in meters")
    s.add_argument("--fractions", help="train,val,test")
    s.add_argument("--max-cluster-size", help="'auto', 'none' or a sample count")
    s.add_argument("--min-cluster-size", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train the network")
    s.add_argument("--manifest", required=True)
    s.add_argument("--root")
    s.add_argument("--split")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--max-lr", type=float)
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--cutmix-prob", type=float)
    s.add_argument("--n-m", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("analyze", help="estimate activation-space sensitivities")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--root")
    s.add_argument("--split")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--l-cube", type=float)
    s.add_argument("--density-multiplier", type=float)
    s.add_argument("--density-basis", choices=("occupied", "volume"))
    s.add_argument("--min-occluded", type=int)
    s.add_argument("--frame", type=int)
    s.add_argument("--fraction", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("map", help="sensitivity maps for images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--index")
    s.add_argument("--image", required=True, nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--method", choices=("asos", "iios", "both"))
    s.add_argument("--bound", type=float, help="colour scale bound (overrides the percentile rule)")
    s.add_argument("--percentile", type=float)
    s.add_argument("--iios-multiplier", type=float)
    s.add_argument("--l-patch", type=int)
    s.add_argument("--l-stride", type=int)
    s.add_argument("--overlay", help="land-cover class raster drawn as boundaries")
    s.set_defaults(func=cmd_map)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs:
        torch.set_num_threads(args.jobs)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
