"""SGD with Nesterov momentum, the learning-rate schedule, and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .augment import AugmentConfig, extract_patch_pair, slot_rng
from .checkpoint import save_checkpoint
from .dualpath import DualPathNet
from .evaluate import evaluate, export_error_map
from .sampler import (
    ClassIndex,
    ErrorMapStore,
    SamplerConfig,
    SamplerStats,
    fill_batch,
    refresh_cycle,
)
from .volume import LabelMap, Volume

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 0.001
    momentum: float = 0.8
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    batches_per_epoch: int = 100
    patches_per_batch: int = 12
    images_per_batch: int = 1
    epochs: int = 50
    halving_period: int | None = None
    sampler: str = "isample"
    epsilon: float = 0.01
    max_attempts: int = 100
    refresh_subset: int | None = None
    refresh_in_uniform: bool = False  # keep error maps current in uniform mode too (for monitoring)
    validate_every: int = 1
    post_filter: bool = False
    inference_tile: int | None = 64
    checkpoint_every: int = 0
    snapshot_epochs: list = field(default_factory=list)  # epochs whose error maps are exported
    concurrent_refresh: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ValueError("learning rate must be positive and weight decay non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum {self.momentum} not in [0, 1)")
        if self.epochs < 1 or self.batches_per_epoch < 1:
            raise ValueError("epochs and batches_per_epoch must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs {self.warmup_epochs} must be below total epochs {self.epochs}")
        if self.halving_period is not None and self.halving_period < 1:
            raise ValueError("halving_period must be >= 1")
        self.sampler_config().validate()

    def sampler_config(self, block_extent=None) -> SamplerConfig:
        return SamplerConfig(self.epsilon, self.max_attempts, self.images_per_batch, self.patches_per_batch,
                             self.refresh_subset, self.sampler, block_extent)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


TRAIN_PRESETS = {
    # two-class kidney experiment
    "kidney": dict(base_lr=0.001, patches_per_batch=12, images_per_batch=1, batches_per_epoch=100, halving_period=None),
    # multi-organ experiment
    "multiorgan": dict(base_lr=0.05, patches_per_batch=24, images_per_batch=2, batches_per_epoch=200, halving_period=25),
    # desk-scale two-class run: the kidney batch shape with a rate and length that converge in minutes on CPU
    "desk": dict(base_lr=0.1, patches_per_batch=12, images_per_batch=1, batches_per_epoch=50, epochs=48,
                 halving_period=15),
}


def train_preset(name: str, **overrides) -> TrainConfig:
    if name not in TRAIN_PRESETS:
        raise ValueError(f"unknown training preset {name!r}; choose from {sorted(TRAIN_PRESETS)}")
    cfg = TrainConfig(**TRAIN_PRESETS[name])
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ValueError(f"unknown training config key {key!r}")
        setattr(cfg, key, value)
    return cfg


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up from base/warmup to base, then optional halving every ``halving_period`` epochs."""
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    if cfg.halving_period:
        return cfg.base_lr * 0.5 ** ((epoch - cfg.warmup_epochs) // cfg.halving_period)
    return cfg.base_lr


def nesterov_step(params: list[nn.Param], velocity: dict[str, np.ndarray], lr: float, momentum: float,
                  weight_decay: float = 0.0) -> None:
    """v <- mu v + g';  w <- w - lr (g' + mu v),  g' = g + lambda w for decayed tensors.

    All gradients are checked before any tensor is touched.
    """
    trainable = [p for p in params if p.trainable]
    for p in trainable:
        if p.grad is None:
            raise ValueError(f"{p.name}: no gradient")
        if not np.all(np.isfinite(p.grad)):
            raise nn.NonFiniteError(f"non-finite gradient in {p.name}")
    for p in trainable:
        g = p.grad
        if p.decay and weight_decay:
            g = g + weight_decay * p.value
        v = velocity.get(p.name)
        v = g.copy() if v is None else momentum * v + g
        velocity[p.name] = v
        p.value = (p.value - lr * (g + momentum * v)).astype(p.value.dtype)


@dataclass
class TrainResult:
    model: DualPathNet
    rows: list[dict]
    epochs: list[dict]
    batches: list[tuple]
    store: ErrorMapStore
    stopped: bool = False


def log_columns(num_classes: int) -> list[str]:
    return (["iteration", "epoch", "lr", "loss", "val_dice_mean"]
            + [f"dice_class{k}" for k in range(1, num_classes)]
            + ["mean_attempts", "forced", "class_picks", "images", "map_refreshes"])


def epoch_columns(num_classes: int) -> list[str]:
    return (["epoch", "iteration", "lr", "mean_loss", "val_dice_mean"]
            + [f"dice_class{k}" for k in range(1, num_classes)]
            + ["error_map_mean", "mean_attempts", "attempts_hist", "forced", "class_picks", "refreshed",
               "model_version"])


BATCH_COLUMNS = ["iteration", "slot", "image_id", "class", "voxel", "center", "attempts", "forced"]


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    if isinstance(v, (tuple, list)):
        return " ".join(str(a) for a in v)
    return str(v)


class _CsvLog:
    def __init__(self, path, columns):
        self.columns = columns
        self.fh = open(path, "w", newline="") if path else None  # path may be False/None: in-memory only
        self.writer = csv.writer(self.fh) if self.fh else None
        if self.writer:
            self.writer.writerow(columns)

    def write(self, row: dict):
        if self.writer:
            self.writer.writerow([_fmt(row.get(c, "")) for c in self.columns])

    def write_tuple(self, row):
        if self.writer:
            self.writer.writerow([_fmt(v) for v in row])

    def flush(self):
        if self.fh:
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


class Trainer:
    """Runs the fill-batch / extract / forward / backward / step loop.

    Streams: the sampler, augmentation and dropout each own a child of
    ``SeedSequence(cfg.seed)``, so changing the sampler's acceptance rule
    never shifts augmentation or dropout draws.
    """

    def __init__(self, model: DualPathNet, train: list[tuple[Volume, LabelMap]],
                 validation: list[tuple[Volume, LabelMap]], cfg: TrainConfig,
                 aug: AugmentConfig | None = None, out_dir=None, on_epoch_end=None):
        cfg.validate()
        self.model, self.cfg = model, cfg
        self.aug = (aug or AugmentConfig()).resolved(model.cfg.rank)
        self.train = {v.id: (v, l) for v, l in train}
        self.validation = list(validation)
        self.out_dir = out_dir
        self.on_epoch_end = on_epoch_end
        self.scfg = cfg.sampler_config(model.cfg.output_extent)
        self.index = ClassIndex({i: l for i, (v, l) in self.train.items()})
        self.store = ErrorMapStore({i: v.dims for i, (v, l) in self.train.items()})
        seeds = np.random.SeedSequence(cfg.seed).spawn(3)
        self.sampler_rng = np.random.default_rng(seeds[0])
        self.aug_rng = np.random.default_rng(seeds[1])
        model.set_rng(np.random.default_rng(seeds[2]))
        self.velocity: dict[str, np.ndarray] = {}
        self.iteration = 0
        self.stop_requested = False
        self.timing: list[tuple[int, float]] = []

    @property
    def refreshing(self) -> bool:
        return self.cfg.sampler == "isample" or self.cfg.refresh_in_uniform

    def step(self, epoch: int, stats: SamplerStats) -> tuple[dict, list]:
        cfg, net = self.cfg, self.model.cfg
        lr = lr_at(epoch, cfg)
        picks = fill_batch(self.store, self.index, self.scfg, self.sampler_rng)
        stats.add(picks)
        batch_seed = int(self.aug_rng.integers(2**62))
        pairs = [
            extract_patch_pair(*self.train[p.image_id], p.center, net, self.aug, slot_rng(batch_seed, i), "train")
            for i, p in enumerate(picks)
        ]
        high = np.stack([p.high for p in pairs])
        low = np.stack([p.low for p in pairs])
        target = np.stack([p.target for p in pairs])
        z = self.model.logits(high, low, training=True)
        loss, grad = nn.softmax_cross_entropy(z, target)
        if not math.isfinite(loss):
            raise TrainingAborted(f"non-finite loss at iteration {self.iteration}")
        self.model.backward(grad)
        try:
            nesterov_step(self.model.params(), self.velocity, lr, cfg.momentum, cfg.weight_decay)
        except nn.NonFiniteError as exc:
            raise TrainingAborted(f"iteration {self.iteration}: {exc}") from exc
        self.model.version += 1
        classes = {}
        for p in picks:
            classes[p.label] = classes.get(p.label, 0) + 1
        row = {
            "iteration": self.iteration, "epoch": epoch, "lr": lr, "loss": loss,
            "mean_attempts": float(np.mean([p.attempts for p in picks])),
            "forced": sum(p.forced for p in picks),
            "class_picks": ";".join(f"{k}:{n}" for k, n in sorted(classes.items())),
            "images": ";".join(sorted({p.image_id for p in picks})),
            "map_refreshes": sum(self.store.versions.values()),
        }
        batch = [(self.iteration, i, p.image_id, p.label, p.voxel, p.center, p.attempts, int(p.forced))
                 for i, p in enumerate(picks)]
        self.iteration += 1
        return row, batch

    def _validate(self, model):
        if not self.validation:
            return None
        return evaluate(model, self.validation, self.cfg.post_filter, self.cfg.inference_tile)

    def _refresh(self, model, epoch):
        data = self.train
        return refresh_cycle(self.store, model, data, self.scfg, epoch, self.cfg.inference_tile)

    def _snapshot_maps(self, epoch):
        if not self.out_dir:
            return
        d = os.path.join(self.out_dir, "maps", f"epoch_{epoch:04d}")
        os.makedirs(d, exist_ok=True)
        for image_id in self.store.ids():
            export_error_map(self.store.get(image_id), os.path.join(d, f"{image_id}.pgm"))

    def _checkpoint(self, name):
        if self.out_dir:
            save_checkpoint(self.model, os.path.join(self.out_dir, name), {"iteration": self.iteration})

    def run(self) -> TrainResult:
        cfg, k = self.cfg, self.model.cfg.num_classes
        out = self.out_dir
        if out:
            os.makedirs(out, exist_ok=True)
        logs = {
            "rows": _CsvLog(out and os.path.join(out, "log.csv"), log_columns(k)),
            "epochs": _CsvLog(out and os.path.join(out, "epochs.csv"), epoch_columns(k)),
            "batches": _CsvLog(out and os.path.join(out, "batches.csv"), BATCH_COLUMNS),
            "refresh": _CsvLog(out and cfg.concurrent_refresh and os.path.join(out, "refresh.csv"),
                               ["epoch", "model_version", "refreshed", "val_dice_mean"]),
        }
        rows, epochs, all_batches = [], [], []
        self.background: list[dict] = []
        pool = ThreadPoolExecutor(1) if cfg.concurrent_refresh else None
        pending = None
        stopped = False
        try:
            for epoch in range(cfg.epochs):
                stats = SamplerStats()
                epoch_rows, epoch_batches = [], []
                for _ in range(cfg.batches_per_epoch):
                    t0 = time.perf_counter()
                    row, batch = self.step(epoch, stats)
                    self.timing.append((row["iteration"], time.perf_counter() - t0))
                    epoch_rows.append(row)
                    epoch_batches.extend(batch)
                    if self.stop_requested:
                        break
                refreshed, report = [], None
                if pool is not None:
                    if pending is not None:
                        self._collect(pending.result(), logs["refresh"])  # staleness <= one cycle
                    pending = pool.submit(self._background_cycle, self.model.snapshot(), epoch)
                else:
                    if self.refreshing:
                        refreshed = self._refresh(self.model, epoch)
                    if (epoch + 1) % cfg.validate_every == 0 or epoch == cfg.epochs - 1:
                        report = self._validate(self.model)
                if report is not None:
                    epoch_rows[-1]["val_dice_mean"] = report.mean()
                    for c, d in report.per_class().items():
                        epoch_rows[-1][f"dice_class{c}"] = d
                summary = {
                    "epoch": epoch, "iteration": self.iteration, "lr": lr_at(epoch, cfg),
                    "mean_loss": float(np.mean([r["loss"] for r in epoch_rows])),
                    "val_dice_mean": epoch_rows[-1].get("val_dice_mean", float("nan")),
                    "error_map_mean": self.store.mean(),
                    "mean_attempts": stats.mean_attempts(), "attempts_hist": stats.histogram(),
                    "forced": stats.forced,
                    "class_picks": ";".join(f"{c}:{n}" for c, n in sorted(stats.class_picks.items())),
                    "refreshed": ";".join(refreshed), "model_version": self.model.version,
                }
                for c in range(1, k):
                    summary[f"dice_class{c}"] = epoch_rows[-1].get(f"dice_class{c}", float("nan"))
                for r in epoch_rows:
                    logs["rows"].write(r)
                for b in epoch_batches:
                    logs["batches"].write_tuple(b)
                logs["epochs"].write(summary)
                for lg in logs.values():
                    lg.flush()  # logs are readable while training runs
                rows.extend(epoch_rows)
                all_batches.extend(epoch_batches)
                epochs.append(summary)
                if epoch in cfg.snapshot_epochs:
                    self._snapshot_maps(epoch)
                if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                    self._checkpoint("checkpoint_last.isck")
                if self.on_epoch_end:
                    self.on_epoch_end(self, epoch, summary)
                if self.stop_requested:
                    stopped = True
                    break
            if pending is not None:
                self._collect(pending.result(), logs["refresh"])
            self._checkpoint("checkpoint_last.isck" if stopped else "model_final.isck")
        finally:
            if pool is not None:
                pool.shutdown(wait=True)
            for lg in logs.values():
                lg.close()
            if out:
                with open(os.path.join(out, "timing.csv"), "w") as fh:
                    fh.write("iteration,seconds\n")
                    fh.writelines(f"{i},{s:.6f}\n" for i, s in self.timing)
        return TrainResult(self.model, rows, epochs, all_batches, self.store, stopped)

    def _collect(self, result: dict, refresh_log: "_CsvLog"):
        self.background.append(result)
        refresh_log.write(result)

    def _background_cycle(self, snapshot: DualPathNet, epoch: int) -> dict:
        """Refresher work on a frozen parameter snapshot (concurrent mode)."""
        refreshed = self._refresh(snapshot, epoch) if self.refreshing else []
        report = self._validate(snapshot)
        return {
            "epoch": epoch, "model_version": snapshot.version, "refreshed": ";".join(refreshed),
            "val_dice_mean": report.mean() if report is not None else float("nan"),
        }


def normalize_pairs(pairs: list[tuple[Volume, LabelMap]]) -> list[tuple[Volume, LabelMap]]:
    from .volume import clamp_normalize

    return [(clamp_normalize(v), l) for v, l in pairs]


def run_training(train, validation, model: DualPathNet, cfg: TrainConfig, aug: AugmentConfig | None = None,
                 out_dir=None, on_epoch_end=None) -> TrainResult:
    """Train ``model`` in place on normalized (Volume, LabelMap) pairs."""
    return Trainer(model, train, validation, cfg, aug, out_dir, on_epoch_end).run()
