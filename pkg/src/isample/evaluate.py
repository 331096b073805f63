"""Dice scoring, largest-component post-filter, segmentation and error-map export."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .dualpath import DualPathNet, full_image_inference
from .volume import LabelMap, Volume


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); two empty masks score 1."""
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    if pred.shape != truth.shape:
        raise ValueError(f"mask dims differ: {pred.shape} vs {truth.shape}")
    total = int(pred.sum()) + int(truth.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(pred & truth)) / total


def face_structure(rank: int) -> np.ndarray:
    """4-connectivity in 2D, 6-connectivity in 3D."""
    return ndimage.generate_binary_structure(rank, 1)


def connected_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """Face-connected labelling; components are numbered in raster order of their first voxel."""
    mask = np.asarray(mask, bool)
    return ndimage.label(mask, structure=face_structure(mask.ndim))


def largest_component_filter(mask: np.ndarray) -> np.ndarray:
    """Keep only the largest face-connected component.

    Ties go to the component whose first voxel comes first in row-major order.
    """
    mask = np.asarray(mask, bool)
    comp, n = connected_components(mask)
    if n <= 1:
        return mask.copy()
    sizes = np.bincount(comp.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1  # argmax returns the first (lowest-numbered) maximum
    return comp == keep


@dataclass
class SegmentationResult:
    labels: np.ndarray
    image_id: str = ""
    checkpoint_id: str = ""
    probabilities: np.ndarray | None = None


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Per-voxel argmax over axis 0; ties resolve to the lowest class id."""
    return np.argmax(probs, axis=0).astype(np.uint16)


def post_filter(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Per foreground class, reassign voxels outside its largest component to background."""
    out = labels.copy()
    for k in range(1, num_classes):
        mask = labels == k
        if not mask.any():
            continue
        out[mask & ~largest_component_filter(mask)] = 0
    return out


def segment(model: DualPathNet, volume: Volume, post_filter_enabled: bool = False, tile=None,
            keep_probabilities: bool = False, checkpoint_id: str = "") -> SegmentationResult:
    probs = full_image_inference(model, volume, tile)
    labels = argmax_labels(probs)
    if post_filter_enabled:
        labels = post_filter(labels, model.cfg.num_classes)
    return SegmentationResult(labels, volume.id, checkpoint_id, probs if keep_probabilities else None)


@dataclass
class DiceReport:
    """Per-(image, class) Dice with voxel counts."""

    num_classes: int
    rows: list[dict] = field(default_factory=list)

    def add(self, image_id: str, pred: np.ndarray, truth: np.ndarray) -> None:
        for k in range(1, self.num_classes):
            p, t = pred == k, truth == k
            self.rows.append({
                "image_id": image_id, "class": k, "dice": dice(p, t),
                "pred_voxels": int(p.sum()), "true_voxels": int(t.sum()),
            })

    def per_class(self) -> dict[int, float]:
        out = {}
        for k in range(1, self.num_classes):
            vals = [r["dice"] for r in self.rows if r["class"] == k]
            out[k] = float(np.mean(vals)) if vals else float("nan")
        return out

    def per_class_std(self) -> dict[int, float]:
        out = {}
        for k in range(1, self.num_classes):
            vals = [r["dice"] for r in self.rows if r["class"] == k]
            out[k] = float(np.std(vals)) if vals else float("nan")
        return out

    def mean(self) -> float:
        return float(np.mean(list(self.per_class().values())))

    HEADER = ("image_id", "class", "dice", "pred_voxels", "true_voxels")

    def write_csv(self, path) -> None:
        """Columns: image_id, class, dice, pred_voxels, true_voxels (one row per image and class)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.HEADER)
            for r in self.rows:
                w.writerow([r["image_id"], r["class"], repr(r["dice"]), r["pred_voxels"], r["true_voxels"]])


def evaluate(model: DualPathNet, data: list[tuple[Volume, LabelMap]], post_filter_enabled=False, tile=None) -> DiceReport:
    report = DiceReport(model.cfg.num_classes)
    for volume, labels in data:
        seg = segment(model, volume, post_filter_enabled, tile)
        report.add(volume.id, seg.labels, labels.labels)
    return report


# --- image export ------------------------------------------------------------------


def to_gray8(values: np.ndarray) -> np.ndarray:
    """round(255 * v) with halves rounded up, for v in [0, 1]."""
    v = np.clip(np.asarray(values, np.float64), 0.0, 1.0)
    return np.floor(255.0 * v + 0.5).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255)."""
    image = np.asarray(image, np.uint8)
    if image.ndim != 2:
        raise ValueError("PGM export needs a 2D image")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(image).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:  # magic, width, height, maxval; one whitespace byte ends the header
        while raw[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw, np.uint8, w * h, pos).reshape(h, w)


def take_slice(grid: np.ndarray, axis: int = 0, index: int | None = None) -> np.ndarray:
    if grid.ndim == 2:
        return grid
    if index is None:
        index = grid.shape[axis] // 2
    if not 0 <= index < grid.shape[axis]:
        raise IndexError(f"slice index {index} out of range for axis {axis} of extent {grid.shape[axis]}")
    return np.take(grid, index, axis=axis)


def export_error_map(error_map: np.ndarray, path, axis: int = 0, index: int | None = None) -> None:
    """Write an error map (or a slice of a 3D one) as PGM: white = error 1, black = error 0."""
    write_pgm(path, to_gray8(take_slice(error_map, axis, index)))
