"""Dual-resolution patch extraction with spacing jitter and rotation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import nn
from .dualpath import DualPathConfig, PatchPair, _edge_window
from .volume import LabelMap, Volume


@dataclass
class AugmentConfig:
    target_spacing: tuple[float, ...] | None = None  # None: rank default
    jitter: float = 0.1
    rotation: tuple[float, ...] | None = None  # degrees; None: rank default
    enable_jitter: bool = True
    enable_rotation: bool = True

    def resolved(self, rank: int) -> "AugmentConfig":
        spacing = self.target_spacing or ((1.0, 1.0) if rank == 2 else (1.5, 1.0, 1.0))
        rotation = self.rotation or ((10.0,) if rank == 2 else (10.0, 4.0, 4.0))
        cfg = AugmentConfig(tuple(spacing), self.jitter, tuple(rotation), self.enable_jitter, self.enable_rotation)
        cfg.validate(rank)
        return cfg

    def validate(self, rank: int) -> None:
        if len(self.target_spacing) != rank:
            raise ValueError(f"target_spacing needs {rank} entries, got {self.target_spacing}")
        if any(s - self.jitter <= 0 for s in self.target_spacing):
            raise ValueError("target spacing minus jitter must stay positive on every axis")
        expected = 1 if rank == 2 else 3
        if len(self.rotation) != expected or not all(np.isfinite(self.rotation)):
            raise ValueError(f"rank {rank} needs {expected} finite rotation ranges, got {self.rotation}")


def rotation_matrix(angles_deg, rank: int) -> np.ndarray:
    """Rotation in array-axis coordinates.

    2D: one angle in the (axis0, axis1) plane. 3D: Euler angles applied about
    axis 0 (in-plane), then axis 1, then axis 2.
    """
    a = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    if rank == 2:
        c, s = np.cos(a[0]), np.sin(a[0])
        return np.array([[c, -s], [s, c]])

    def about(axis, t):
        r = np.eye(3)
        i, j = [k for k in range(3) if k != axis]
        c, s = np.cos(t), np.sin(t)
        r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
        return r

    return about(0, a[0]) @ about(1, a[1]) @ about(2, a[2])


@dataclass(frozen=True)
class GridMap:
    """source_voxel = center + matrix @ offset, offset in target-grid voxels."""

    matrix: np.ndarray
    center: np.ndarray

    def __call__(self, offsets: np.ndarray) -> np.ndarray:
        return self.center + offsets @ self.matrix.T


def resample_grid(source_spacing, target_spacing, rotation, center) -> GridMap:
    """Target voxel -> physical (mm) -> rotated -> source voxel, about ``center``.

    ``rotation`` is either a square matrix or angles in degrees.
    """
    src = np.asarray(source_spacing, np.float64)
    tgt = np.asarray(target_spacing, np.float64)
    rank = len(src)
    rot = np.asarray(rotation, np.float64)
    if rot.shape != (rank, rank):
        rot = rotation_matrix(rot, rank)
    matrix = (rot * tgt[None, :]) / src[:, None]
    return GridMap(matrix, np.asarray(center, np.float64))


def clamp_center(c, dims, block) -> tuple[int, ...]:
    """Shift c so an output block of extent ``block`` around it lies inside the image."""
    out = []
    for ci, n, o in zip(c, dims, block):
        lo = (o - 1) // 2
        hi = n - 1 - (o - 1 - lo)
        out.append(int(ci) if lo > hi else int(min(max(ci, lo), hi)))
    return tuple(out)


def _ranges(net: DualPathConfig):
    """Per-axis offsets (relative to the patch centre) of the context grid and its sub-blocks."""
    f = net.downsample
    hs, ls = net.high_shrink // 2, net.low_shrink // 2
    ctx, hi, out = [], [], []
    for o, m, p_l, p_h in zip(net.output_extent, net.training_offset, net.low_extent, net.high_extent):
        b0 = -((o - 1) // 2)
        start = b0 - m - f * ls
        ctx.append((start, start + f * p_l))
        hi.append((b0 - hs - start, b0 - hs - start + p_h))
        out.append((b0 - start, b0 - start + o))
    return ctx, hi, out


def extract_patch_pair(
    v: Volume,
    l: LabelMap | None,
    c,
    net: DualPathConfig,
    aug: AugmentConfig,
    rng: np.random.Generator | None = None,
    mode: str = "train",
) -> PatchPair:
    """Sample the high-res patch, low-res context and target block centred at c.

    v must already be intensity-normalized. In ``inference`` mode (or with
    augmentation disabled) the resample is the identity at the target spacing.
    """
    rank = v.rank
    aug = aug.resolved(rank)
    ctx, hi, out = _ranges(net)
    training = mode == "train"
    spacing = np.asarray(aug.target_spacing, np.float64)
    angles = np.zeros(1 if rank == 2 else 3)
    if training and aug.enable_jitter and aug.jitter > 0:
        spacing = spacing + rng.uniform(-aug.jitter, aug.jitter, size=rank)
    if training and aug.enable_rotation:
        angles = np.array([rng.uniform(-r, r) for r in aug.rotation])
    c = tuple(int(a) for a in c)

    identity = not np.any(angles) and np.allclose(spacing, v.spacing, rtol=0, atol=0)
    if identity:
        starts = [ci + a for ci, (a, _) in zip(c, ctx)]
        stops = [ci + b for ci, (_, b) in zip(c, ctx)]
        context = _edge_window(v.voxels, starts, stops)
        labels = None if l is None else _edge_window(l.labels, starts, stops)
    else:
        grid = resample_grid(v.spacing, spacing, angles, c)
        axes = [np.arange(a, b, dtype=np.float64) for a, b in ctx]
        offsets = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, rank)
        coords = grid(offsets).T
        shape = tuple(b - a for a, b in ctx)
        context = ndimage.map_coordinates(v.voxels, coords, order=1, mode="nearest").reshape(shape)
        labels = None
        if l is not None:
            sub = tuple(slice(a, b) for a, b in out)
            out_coords = coords.reshape((rank,) + shape)[(slice(None),) + sub].reshape(rank, -1)
            block = ndimage.map_coordinates(l.labels, out_coords, order=0, mode="nearest")
            labels = block.reshape(tuple(b - a for a, b in out))

    high = context[tuple(slice(a, b) for a, b in hi)]
    low = nn.average_pool(context.astype(np.float64), net.downsample, rank).astype(np.float32)
    if labels is not None and identity:
        labels = labels[tuple(slice(a, b) for a, b in out)]
    target = None if labels is None else np.ascontiguousarray(labels, dtype=np.uint16)
    pair = PatchPair(np.ascontiguousarray(high, np.float32)[None], low[None], c, target)
    nn.check_finite(pair.high, "high-res patch")
    nn.check_finite(pair.low, "low-res patch")
    return pair


def slot_rng(batch_seed: int, slot: int) -> np.random.Generator:
    """Per-slot stream so serial and parallel batch fills agree."""
    return np.random.default_rng(batch_seed ^ slot)
