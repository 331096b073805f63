"""Command line: gen-data, train, infer, eval, export-maps."""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import shutil
import signal
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .dualpath import GeometryError, build_model
from .evaluate import DiceReport, export_error_map, segment
from .sampler import ErrorMapStore, update_error_map
from .synthetic import (
    DatasetManifest,
    ForegroundClass,
    GenerationError,
    ManifestError,
    foreground_fractions,
    generate_synthetic_dataset,
    preset,
)
from .trainer import TRAIN_PRESETS, Trainer, TrainingAborted, normalize_pairs, train_preset
from .volume import LabelMap, save_labels

log = logging.getLogger("isample")

EXIT_USAGE = 2
EXIT_ABORTED = 3
EXIT_INTERRUPTED = 130


class CliError(RuntimeError):
    pass


def threads_from_env() -> int:
    """ISAMPLE_THREADS: 0 (default) is the deterministic single-context mode."""
    raw = os.environ.get("ISAMPLE_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"ISAMPLE_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise CliError("ISAMPLE_THREADS must be >= 0")
    return n


def make_out_dir(path: str, force: bool) -> None:
    """Create a fresh output directory; an existing one is replaced only with --force."""
    if os.path.exists(path):
        if not force:
            raise CliError(f"{path} exists; pass --force to overwrite it")
        shutil.rmtree(path)
    os.makedirs(path)


def content_hash(paths: list[str], extra: bytes = b"") -> str:
    h = hashlib.sha256(extra)
    for p in paths:
        h.update(os.path.basename(p).encode() + b"\0")
        with open(p, "rb") as fh:
            h.update(hashlib.sha256(fh.read()).digest())
    return h.hexdigest()


def _manifest_files(m: DatasetManifest) -> list[str]:
    files = [os.path.join(m.root, "manifest.txt")]
    for e in m.entries:
        files += [os.path.join(m.root, e.volume), os.path.join(m.root, e.labels)]
    return files


def _load_split(m: DatasetManifest, split: str):
    return normalize_pairs(m.load_split(split))


# --- subcommands --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.num_volumes is not None:
        overrides["num_volumes"] = args.num_volumes
        overrides["num_validation"] = max(1, args.num_volumes // 5)
    cfg = preset(args.preset, **overrides)
    if args.fg_fraction is not None:
        fr = args.fg_fraction
        if len(fr) == 1:
            fr = fr * len(cfg.classes)
        if len(fr) != len(cfg.classes):
            raise CliError(f"--fg-fraction takes 1 or {len(cfg.classes)} values")
        cfg.classes = [ForegroundClass(c.name, f, c.blobs, c.intensity) for c, f in zip(cfg.classes, fr)]
    make_out_dir(args.out, args.force)
    m = generate_synthetic_dataset(cfg, args.out, args.preset)
    fr = foreground_fractions([m.load_pair(e)[1] for e in m.entries], cfg.num_classes)
    print(f"wrote {len(m.entries)} volumes to {args.out} "
          f"({len(m.split('train'))} train / {len(m.split('validation'))} validation)")
    for k, c in enumerate(cfg.classes):
        print(f"class {k + 1} {c.name}: target {c.fraction:g}, measured mean {fr[:, k].mean():.5f} "
              f"(min {fr[:, k].min():.5f}, max {fr[:, k].max():.5f})")
    return 0


def _run_config(args) -> RunConfig:
    rc = load_config(args.config) if args.config else RunConfig()
    if args.preset:
        keep = {k: v for k, v in rc.train.to_dict().items() if k not in TRAIN_PRESETS[args.preset]}
        if args.config is None:
            keep = {}
        rc.train = train_preset(args.preset, **keep)
        rc.train_preset = args.preset
    for flag, key in (("sampler", "sampler"), ("epsilon", "epsilon"), ("seed", "seed"), ("epochs", "epochs"),
                      ("warmup_epochs", "warmup_epochs"),
                      ("batches_per_epoch", "batches_per_epoch"), ("checkpoint_every", "checkpoint_every")):
        value = getattr(args, flag)
        if value is not None:
            setattr(rc.train, key, value)
    if args.post_filter:
        rc.train.post_filter = True
    if args.snapshot_epochs is not None:
        rc.train.snapshot_epochs = args.snapshot_epochs
    return rc


def cmd_train(args) -> int:
    rc = _run_config(args)
    m = DatasetManifest.load(args.data)
    m.check_files()
    rank = int(m.header.get("rank", rc.model.rank))
    if rank != rc.model.rank:
        raise CliError(f"dataset rank {rank} does not match model rank {rc.model.rank}")
    rc.model.num_classes = m.num_classes
    rc.model.validate()
    threads = threads_from_env()
    rc.train.concurrent_refresh = rc.train.concurrent_refresh or threads > 0
    rc.train.validate()

    make_out_dir(args.out, args.force)
    echo = rc.to_ini()
    with open(os.path.join(args.out, "config.ini"), "w") as fh:
        fh.write(echo)
    with open(os.path.join(args.out, "seed.txt"), "w") as fh:
        fh.write(f"{rc.train.seed}\n")
    with open(os.path.join(args.out, "inputs.sha256"), "w") as fh:
        fh.write(content_hash(_manifest_files(m), echo.encode()) + "\n")

    train, val = _load_split(m, "train"), _load_split(m, "validation")
    model = build_model(rc.model, np.random.default_rng(rc.train.seed))
    trainer = Trainer(model, train, val, rc.train, rc.augment, args.out, _progress if args.verbose else None)

    def on_signal(signum, frame):
        log.warning("signal %d: finishing the current batch, then checkpointing", signum)
        trainer.stop_requested = True

    previous = {s: signal.signal(s, on_signal) for s in (signal.SIGINT, signal.SIGTERM)}
    try:
        with threadpool_limits(max(threads, 1)):
            result = trainer.run()
    finally:
        for s, h in previous.items():
            signal.signal(s, h)
    if result.stopped:
        print(f"interrupted after {trainer.iteration} iterations; state saved to "
              f"{os.path.join(args.out, 'checkpoint_last.isck')}", file=sys.stderr)
        return EXIT_INTERRUPTED
    final = result.epochs[-1]["val_dice_mean"]
    print(f"final validation mean Dice {final:.4f} after {trainer.iteration} iterations")
    return 0


def _progress(trainer, epoch, summary):
    print(f"epoch {epoch} it {summary['iteration']} lr {summary['lr']:.3g} loss {summary['mean_loss']:.4f} "
          f"val_dice {summary['val_dice_mean']:.4f} attempts {summary['mean_attempts']:.2f}", flush=True)


def _model_and_data(args):
    model = load_checkpoint(args.checkpoint)
    m = DatasetManifest.load(args.data)
    if m.num_classes != model.cfg.num_classes:
        raise CliError(f"checkpoint has {model.cfg.num_classes} classes, dataset has {m.num_classes}")
    return model, _load_split(m, args.split)


def cmd_infer(args) -> int:
    model, data = _model_and_data(args)
    make_out_dir(args.out, args.force)
    for v, _ in data:
        seg = segment(model, v, args.post_filter, args.tile, checkpoint_id=os.path.basename(args.checkpoint))
        path = os.path.join(args.out, f"{v.id}_seg.isvl")
        save_labels(LabelMap(seg.labels, model.cfg.num_classes, v.spacing, v.id), path)
        print(path)
    return 0


def cmd_eval(args) -> int:
    model, data = _model_and_data(args)
    if os.path.exists(args.out) and not args.force:
        raise CliError(f"{args.out} exists; pass --force to overwrite it")
    report = DiceReport(model.cfg.num_classes)
    for v, l in data:
        report.add(v.id, segment(model, v, args.post_filter, args.tile).labels, l.labels)
    report.write_csv(args.out)
    std = report.per_class_std()
    for k, d in report.per_class().items():
        print(f"class {k}: dice {d:.4f} +- {std[k]:.4f}")
    print(f"mean foreground dice {report.mean():.4f}")
    return 0


def cmd_export_maps(args) -> int:
    model, data = _model_and_data(args)
    make_out_dir(args.out, args.force)
    store = ErrorMapStore({v.id: v.dims for v, _ in data})
    from .dualpath import full_image_inference

    for v, l in data:
        update_error_map(store, v.id, full_image_inference(model, v, args.tile), l, model_version=model.version)
        path = os.path.join(args.out, f"{v.id}_error.pgm")
        export_error_map(store.get(v.id), path, args.axis, args.index)
        print(f"{path} mean error {store.get(v.id).mean():.5f}")
    return 0


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isample", description="Error-map driven patch sampling for segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a seeded synthetic dataset")
    g.add_argument("--preset", default="kidney2d", choices=["kidney2d", "kidney3d", "multiorgan2d"])
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--fg-fraction", type=float, nargs="+", help="target foreground fraction (one per class)")
    g.add_argument("--num-volumes", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a dual-path model")
    t.add_argument("--data", required=True, help="dataset directory (holding manifest.txt)")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--config", help="INI run configuration")
    t.add_argument("--preset", choices=sorted(TRAIN_PRESETS))
    t.add_argument("--sampler", choices=["isample", "uniform"])
    t.add_argument("--epsilon", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--warmup-epochs", type=int)
    t.add_argument("--batches-per-epoch", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--snapshot-epochs", type=int, nargs="*", help="epochs whose error maps are exported")
    t.add_argument("--post-filter", action="store_true", help="filter validation predictions")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("infer", cmd_infer, "write segmentation label maps"),
                                 ("eval", cmd_eval, "write a per-image, per-class Dice CSV"),
                                 ("export-maps", cmd_export_maps, "write error maps as PGM images")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--split", default="train" if name == "export-maps" else "validation",
                       choices=["train", "validation"])
        s.add_argument("--out", required=True)
        s.add_argument("--tile", type=int, default=64)
        s.add_argument("--force", action="store_true")
        if name == "export-maps":
            s.add_argument("--axis", type=int, default=0, help="slice axis for 3D maps")
            s.add_argument("--index", type=int, help="slice index for 3D maps (default: middle)")
        else:
            s.add_argument("--post-filter", action="store_true", help="keep the largest component per class")
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, ManifestError, GenerationError, GeometryError, ValueError, OSError) as exc:
        print(f"isample: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"isample: training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED


if __name__ == "__main__":
    sys.exit(main())
