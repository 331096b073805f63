"""Error-map driven patch sampling.

Centres are proposed class-balanced (image from the batch pool, class
uniform over the classes present, voxel uniform within the class) and
accepted when ``E(c) > u - epsilon`` with ``u ~ U(0, 1)``. After every epoch
the error maps of a subset of training images are recomputed from full-image
predictions as ``E(x) = 1 - p(true class at x)``.
"""

from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .augment import clamp_center
from .volume import LabelMap, Volume


@dataclass
class SamplerConfig:
    epsilon: float = 0.01
    max_attempts: int = 100
    images_per_batch: int = 1
    patches_per_batch: int = 12
    refresh_subset: int | None = None  # images refreshed per cycle; None = all
    mode: str = "isample"  # or "uniform"
    block_extent: tuple[int, ...] | None = None  # output block, for centre clamping

    def validate(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon {self.epsilon} not in [0, 1]")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.patches_per_batch < 1 or self.images_per_batch < 1:
            raise ValueError("patches_per_batch and images_per_batch must be >= 1")
        if self.mode not in ("isample", "uniform"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.refresh_subset is not None and self.refresh_subset < 1:
            raise ValueError("refresh_subset must be >= 1")


def accept(error_at_c: float, epsilon: float, u: float) -> bool:
    return error_at_c > u - epsilon


def acceptance_probability(error: float, epsilon: float) -> float:
    """P[accept] for u ~ U(0, 1)."""
    return min(1.0, error + epsilon)


class ErrorMapStore:
    """Per-image error maps, initialised to 1; updates swap in whole maps under a lock."""

    def __init__(self, dims: dict[str, tuple[int, ...]]):
        self._lock = threading.Lock()
        self._maps: dict[str, np.ndarray] = {}
        self.versions: dict[str, int] = {}
        self.refresh_epoch: dict[str, int] = {}
        self.model_version: dict[str, int] = {}
        self.order = list(dims)
        self._cursor = 0
        for image_id, shape in dims.items():
            m = np.ones(shape, np.float32)
            m.setflags(write=False)
            self._maps[image_id] = m
            self.versions[image_id] = 0
            self.refresh_epoch[image_id] = -1

    def __contains__(self, image_id):
        return image_id in self._maps

    def ids(self) -> list[str]:
        return list(self.order)

    def get(self, image_id: str) -> np.ndarray:
        with self._lock:
            return self._maps[image_id]

    def value(self, image_id: str, flat_index: int) -> float:
        return float(self.get(image_id).reshape(-1)[flat_index])

    def install(self, image_id: str, new_map: np.ndarray, epoch: int = -1, model_version: int = -1) -> None:
        new_map = np.array(new_map, np.float32)
        if new_map.shape != self._maps[image_id].shape:
            raise ValueError(f"{image_id}: map dims {new_map.shape} != {self._maps[image_id].shape}")
        if new_map.size and (new_map.min() < 0 or new_map.max() > 1):
            raise ValueError(f"{image_id}: error values outside [0, 1]")
        new_map.setflags(write=False)
        with self._lock:
            self._maps[image_id] = new_map
            self.versions[image_id] += 1
            self.refresh_epoch[image_id] = epoch
            self.model_version[image_id] = model_version

    def next_subset(self, size: int | None) -> list[str]:
        """Round-robin selection of the next ``size`` images."""
        n = len(self.order)
        size = n if size is None else min(size, n)
        ids = [self.order[(self._cursor + i) % n] for i in range(size)]
        self._cursor = (self._cursor + size) % n
        return ids

    def mean(self) -> float:
        with self._lock:
            maps = list(self._maps.values())
        return float(np.mean([m.mean(dtype=np.float64) for m in maps]))


class ClassIndex:
    """Flat voxel indices per (image, class); images without labelled voxels are dropped."""

    def __init__(self, labels: dict[str, LabelMap]):
        self.voxels: dict[str, dict[int, np.ndarray]] = {}
        self.present: dict[str, list[int]] = {}
        self.dims: dict[str, tuple[int, ...]] = {}
        for image_id, lab in labels.items():
            flat = lab.labels.reshape(-1)
            order = np.argsort(flat, kind="stable")
            counts = np.bincount(flat, minlength=lab.num_classes)
            bounds = np.concatenate([[0], np.cumsum(counts)])
            per_class = {k: order[bounds[k] : bounds[k + 1]] for k in range(lab.num_classes) if counts[k]}
            if not per_class:
                continue
            self.voxels[image_id] = per_class
            self.present[image_id] = sorted(per_class)
            self.dims[image_id] = lab.dims

    def ids(self) -> list[str]:
        return list(self.voxels)


@dataclass
class Pick:
    image_id: str
    label: int
    voxel: tuple[int, ...]  # the proposed, accepted voxel
    center: tuple[int, ...]  # voxel shifted so the output block is inside the image
    attempts: int
    forced: bool = False
    error: float = 1.0


def _propose(index: ClassIndex, pool, rng):
    image_id = pool[int(rng.integers(len(pool)))]
    classes = index.present[image_id]
    k = classes[int(rng.integers(len(classes)))]
    cands = index.voxels[image_id][k]
    flat = int(cands[int(rng.integers(len(cands)))])
    return image_id, k, flat


def _make_pick(index, cfg, image_id, k, flat, attempts, forced, error):
    dims = index.dims[image_id]
    voxel = tuple(int(a) for a in np.unravel_index(flat, dims))
    center = clamp_center(voxel, dims, cfg.block_extent) if cfg.block_extent else voxel
    return Pick(image_id, k, voxel, center, attempts, forced, error)


def pick_center(store: ErrorMapStore, index: ClassIndex, cfg: SamplerConfig, rng: np.random.Generator, pool=None) -> Pick:
    """One accepted (image, class, centre) triple.

    Gives up after ``cfg.max_attempts`` proposals and returns the
    highest-error candidate seen, flagged ``forced``. With epsilon >= 1 or in
    uniform mode the first proposal is taken without drawing u.
    """
    pool = index.ids() if pool is None else pool
    if not pool:
        raise ValueError("no sampleable images")
    if cfg.mode == "uniform" or cfg.epsilon >= 1.0:
        image_id, k, flat = _propose(index, pool, rng)
        err = store.value(image_id, flat) if store is not None else 1.0
        return _make_pick(index, cfg, image_id, k, flat, 1, False, err)
    best = None
    for attempt in range(1, cfg.max_attempts + 1):
        image_id, k, flat = _propose(index, pool, rng)
        err = store.value(image_id, flat)
        if accept(err, cfg.epsilon, rng.random()):
            return _make_pick(index, cfg, image_id, k, flat, attempt, False, err)
        if best is None or err > best[3]:
            best = (image_id, k, flat, err)
    return _make_pick(index, cfg, *best[:3], cfg.max_attempts, True, best[3])


def fill_batch(store: ErrorMapStore, index: ClassIndex, cfg: SamplerConfig, rng: np.random.Generator) -> list[Pick]:
    """``patches_per_batch`` picks from ``images_per_batch`` images drawn without replacement."""
    ids = index.ids()
    if len(ids) < cfg.images_per_batch:
        raise ValueError(f"{len(ids)} sampleable training images, fewer than images_per_batch={cfg.images_per_batch}")
    chosen = rng.choice(len(ids), size=cfg.images_per_batch, replace=False)
    pool = [ids[i] for i in sorted(chosen)]
    return [pick_center(store, index, cfg, rng, pool) for _ in range(cfg.patches_per_batch)]


def update_error_map(store: ErrorMapStore, image_id: str, prob_map: np.ndarray, labels: LabelMap,
                     epoch: int = -1, model_version: int = -1) -> None:
    """Install E(x) = 1 - prob_map[labels(x), x]; prob_map is (K, *dims)."""
    if prob_map.shape[1:] != labels.dims:
        raise ValueError(f"probability map dims {prob_map.shape[1:]} != label dims {labels.dims}")
    if prob_map.shape[0] != labels.num_classes:
        raise ValueError(f"probability map has {prob_map.shape[0]} classes, labels have {labels.num_classes}")
    p_true = np.take_along_axis(prob_map, labels.labels[None].astype(np.intp), axis=0)[0]
    error = 1 - p_true
    store.install(image_id, np.clip(error, 0, 1), epoch, model_version)


def refresh_cycle(store: ErrorMapStore, model, data: dict[str, tuple[Volume, LabelMap]], cfg: SamplerConfig,
                  epoch: int = -1, tile=None) -> list[str]:
    """Recompute the error maps of the next round-robin subset using a frozen model."""
    from .dualpath import full_image_inference

    ids = store.next_subset(cfg.refresh_subset)
    for image_id in ids:
        volume, labels = data[image_id]
        probs = full_image_inference(model, volume, tile)
        update_error_map(store, image_id, probs, labels, epoch, getattr(model, "version", -1))
    return ids


@dataclass
class SamplerStats:
    """Accumulated per-epoch sampler statistics."""

    attempts: Counter = field(default_factory=Counter)
    class_picks: Counter = field(default_factory=Counter)
    forced: int = 0
    picks: int = 0

    def add(self, picks: list[Pick]) -> None:
        for p in picks:
            self.attempts[p.attempts] += 1
            self.class_picks[p.label] += 1
            self.forced += p.forced
            self.picks += 1

    def mean_attempts(self) -> float:
        return sum(a * n for a, n in self.attempts.items()) / max(self.picks, 1)

    def histogram(self, edges=(1, 2, 5, 10, 50, 100)) -> str:
        """Attempt counts bucketed as ``<=1:n|<=2:n|...``."""
        parts = []
        lo = 0
        for hi in edges:
            n = sum(c for a, c in self.attempts.items() if lo < a <= hi)
            parts.append(f"<={hi}:{n}")
            lo = hi
        rest = sum(c for a, c in self.attempts.items() if a > lo)
        if rest:
            parts.append(f">{lo}:{rest}")
        return "|".join(parts)
