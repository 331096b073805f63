"""Volume and label-map containers, the ISVL binary format, and intensity preprocessing."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"ISVL"
FORMAT_VERSION = 1
DTYPE_F32 = 0
DTYPE_U16 = 1

CLAMP_LIMIT = 1000.0
INTENSITY_SCALE = 218.0


class VolumeFormatError(ValueError):
    """Raised when an ISVL file is malformed."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _f32_spacing(spacing) -> tuple[float, ...]:
    # spacing is stored as f32 on disk, so keep it at f32 precision in memory too
    return tuple(float(np.float32(s)) for s in spacing)


@dataclass(frozen=True)
class Volume:
    """An image on a regular grid. Voxels are float32, row-major, slowest axis first."""

    voxels: np.ndarray
    spacing: tuple[float, ...]
    id: str = ""

    def __post_init__(self):
        vox = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if vox.ndim not in (2, 3):
            raise ValueError(f"volume rank must be 2 or 3, got {vox.ndim}")
        if min(vox.shape) < 1:
            raise ValueError(f"volume dims must be positive, got {vox.shape}")
        spacing = _f32_spacing(self.spacing)
        if len(spacing) != vox.ndim:
            raise ValueError(f"spacing has {len(spacing)} entries for a rank-{vox.ndim} volume")
        if any(not s > 0 for s in spacing):
            raise ValueError(f"spacing must be positive, got {spacing}")
        if vox is self.voxels:
            vox = vox.copy()
        object.__setattr__(self, "voxels", _freeze(vox))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.voxels.shape

    @property
    def rank(self) -> int:
        return self.voxels.ndim


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray
    num_classes: int
    spacing: tuple[float, ...] = field(default=())
    id: str = ""

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim not in (2, 3):
            raise ValueError(f"label rank must be 2 or 3, got {lab.ndim}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
            raise ValueError(
                f"labels must lie in [0, {self.num_classes - 1}], found [{lab.min()}, {lab.max()}]"
            )
        lab = np.array(lab, dtype=np.uint16, order="C")
        spacing = _f32_spacing(self.spacing) if self.spacing else (1.0,) * lab.ndim
        object.__setattr__(self, "labels", _freeze(lab))
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.labels.shape

    def check_pair(self, volume: Volume) -> None:
        if self.dims != volume.dims:
            raise ValueError(f"label dims {self.dims} do not match volume dims {volume.dims}")


def clamp_normalize(v: Volume) -> Volume:
    """Clamp to [-1000, 1000] and divide by 218."""
    x = np.clip(v.voxels.astype(np.float64), -CLAMP_LIMIT, CLAMP_LIMIT) / INTENSITY_SCALE
    return Volume(x.astype(np.float32), v.spacing, v.id)


# --- ISVL file format -------------------------------------------------------
#
# "ISVL" | version u16 | rank u16 | rank x (dim u32, spacing f32) | dtype u8 | payload
# all little-endian; payload row-major.


def _write(path, array: np.ndarray, spacing, tag: int) -> None:
    header = bytearray(MAGIC)
    header += struct.pack("<HH", FORMAT_VERSION, array.ndim)
    for d, s in zip(array.shape, spacing):
        header += struct.pack("<If", d, s)
    header += struct.pack("<B", tag)
    dtype = "<f4" if tag == DTYPE_F32 else "<u2"
    payload = np.ascontiguousarray(array, dtype=dtype).tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(header))
        fh.write(payload)
    os.replace(tmp, path)


def _read(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    pos = 4
    if len(raw) < pos + 4:
        raise VolumeFormatError(f"{path}: truncated header (version/rank)")
    version, rank = struct.unpack_from("<HH", raw, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    if rank not in (2, 3):
        raise VolumeFormatError(f"{path}: rank {rank} not in (2, 3)")
    if len(raw) < pos + 8 * rank + 1:
        raise VolumeFormatError(f"{path}: truncated header (axes)")
    dims, spacing = [], []
    for axis in range(rank):
        d, s = struct.unpack_from("<If", raw, pos)
        pos += 8
        if d == 0:
            raise VolumeFormatError(f"{path}: dim of axis {axis} is zero")
        if not s > 0:
            raise VolumeFormatError(f"{path}: spacing of axis {axis} is {s}, must be positive")
        dims.append(d)
        spacing.append(s)
    (tag,) = struct.unpack_from("<B", raw, pos)
    pos += 1
    if tag not in (DTYPE_F32, DTYPE_U16):
        raise VolumeFormatError(f"{path}: unknown dtype tag {tag}")
    itemsize = 4 if tag == DTYPE_F32 else 2
    count = int(np.prod(dims))
    payload = raw[pos:]
    if len(payload) != count * itemsize:
        raise VolumeFormatError(
            f"{path}: dims {tuple(dims)} declare {count} voxels but payload holds "
            f"{len(payload) / itemsize:g}"
        )
    dtype = "<f4" if tag == DTYPE_F32 else "<u2"
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr, tuple(spacing), tag


def save_volume(v: Volume, path) -> None:
    _write(path, v.voxels, v.spacing, DTYPE_F32)


def load_volume(path, id: str | None = None) -> Volume:
    arr, spacing, tag = _read(path)
    if tag != DTYPE_F32:
        raise VolumeFormatError(f"{path}: dtype tag {tag} is a label map, expected f32 voxels")
    if id is None:
        id = os.path.splitext(os.path.basename(path))[0]
    return Volume(arr.astype(np.float32), spacing, id)


def save_labels(l: LabelMap, path) -> None:
    _write(path, l.labels, l.spacing, DTYPE_U16)


def load_labels(path, num_classes: int | None = None, id: str | None = None) -> LabelMap:
    arr, spacing, tag = _read(path)
    if tag != DTYPE_U16:
        raise VolumeFormatError(f"{path}: dtype tag {tag} is not a u16 label map")
    if num_classes is None:
        num_classes = max(2, int(arr.max()) + 1)
    if id is None:
        id = os.path.splitext(os.path.basename(path))[0]
    return LabelMap(arr, num_classes, spacing, id)
