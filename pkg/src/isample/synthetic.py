"""Seeded synthetic sparse-segmentation datasets and the on-disk dataset manifest.

Each generated image has smooth background texture, a few foreground blobs
(ellipses/ellipsoids with a background-labelled hole), and distractor tubes
that share the foreground intensity but are labelled background.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import LabelMap, Volume, load_labels, load_volume, save_labels, save_volume

MANIFEST_NAME = "manifest.txt"
MANIFEST_MAGIC = "# isample dataset manifest v1"
SPLITS = ("train", "validation")


class GenerationError(RuntimeError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class ForegroundClass:
    name: str
    fraction: float = 0.003
    blobs: tuple[int, int] = (1, 1)
    intensity: float = 180.0


@dataclass
class SyntheticConfig:
    dims: tuple[int, ...] = (128, 128)
    spacing: tuple[float, ...] = (1.0, 1.0)
    num_volumes: int = 20
    num_validation: int = 4
    classes: list[ForegroundClass] = field(default_factory=lambda: [ForegroundClass("kidney")])
    distractors: tuple[int, int] = (2, 3)
    distractor_radius: tuple[float, float] = (1.5, 2.5)
    distractor_length: tuple[float, float] = (12.0, 24.0)
    background_mean: float = 0.0
    texture_std: float = 40.0
    texture_sigma: float = 4.0
    noise_std: float = 15.0
    hole_intensity: float = 90.0
    edge_softness: float = 0.5
    max_retries: int = 200
    seed: int = 42

    def validate(self) -> None:
        if len(self.dims) not in (2, 3) or len(self.spacing) != len(self.dims):
            raise ValueError(f"dims {self.dims} and spacing {self.spacing} must both have rank 2 or 3")
        if any(d < 8 for d in self.dims):
            raise ValueError(f"dims {self.dims} too small")
        if not self.classes:
            raise ValueError("at least one foreground class is required")
        if not 0 <= self.num_validation < self.num_volumes:
            raise ValueError("num_validation must be in [0, num_volumes)")
        for c in self.classes:
            if not 0 < c.fraction < 0.5:
                raise ValueError(f"class {c.name}: fraction {c.fraction} not in (0, 0.5)")
            lo, hi = c.blobs
            if not 1 <= lo <= hi:
                raise ValueError(f"class {c.name}: bad blob count range {c.blobs}")
            # the largest blob must fit inside the image with a margin
            radius = _equivalent_radius(c.fraction * np.prod(self.dims) / lo * 1.15, len(self.dims))
            if 2 * (radius * 1.35 + 2) >= min(self.dims):
                raise ValueError(f"class {c.name}: blob radius {radius:.1f} does not fit in {self.dims}")
        if self.distractors[0] < 0 or self.distractors[0] > self.distractors[1]:
            raise ValueError(f"bad distractor count range {self.distractors}")

    @property
    def num_classes(self) -> int:
        return len(self.classes) + 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        if "classes" in d:
            d["classes"] = [c if isinstance(c, ForegroundClass) else ForegroundClass(**c) for c in d["classes"]]
        for key in ("dims", "spacing", "distractors", "distractor_radius", "distractor_length"):
            if key in d:
                d[key] = tuple(d[key])
        for c in d.get("classes", []):
            c.blobs = tuple(c.blobs)
        return cls(**d)


def preset(name: str, **overrides) -> SyntheticConfig:
    """Named dataset presets: kidney2d, kidney3d, multiorgan2d."""
    if name == "kidney2d":
        cfg = SyntheticConfig()
    elif name == "kidney3d":
        cfg = SyntheticConfig(
            dims=(32, 64, 64),
            spacing=(1.5, 1.0, 1.0),
            classes=[ForegroundClass("kidney", 0.003, (1, 1))],
            distractor_length=(8.0, 16.0),
        )
    elif name == "multiorgan2d":
        cfg = SyntheticConfig(
            classes=[
                ForegroundClass("liver", 0.03, (1, 1), 130.0),
                ForegroundClass("spleen", 0.008, (1, 1), 160.0),
                ForegroundClass("kidney", 0.004, (2, 2), 200.0),
            ],
        )
    else:
        raise ValueError(f"unknown dataset preset {name!r}")
    for key, value in overrides.items():
        if not hasattr(cfg, key):
            raise ValueError(f"unknown dataset config key {key!r}")
        setattr(cfg, key, value)
    return cfg


# --- geometry helpers ---------------------------------------------------------


def _equivalent_radius(area: float, rank: int) -> float:
    if rank == 2:
        return float(np.sqrt(area / np.pi))
    return float((3 * area / (4 * np.pi)) ** (1 / 3))


def _random_rotation(rng, rank):
    if rank == 2:
        t = rng.uniform(0, np.pi)
        return np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def _grid(dims):
    return np.stack(np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij"), axis=-1)


def _ellipsoid_sdf(coords, center, axes, rot):
    """First-order signed distance (voxels) to an ellipsoid; negative inside."""
    local = (coords - center) @ rot
    scaled = local / axes
    r = np.sqrt((scaled**2).sum(-1))
    grad = np.sqrt(((local / axes**2) ** 2).sum(-1))
    r_safe = np.maximum(r, 1e-9)
    return (r - 1.0) * r_safe / np.maximum(grad, 1e-9)


def _capsule_sdf(coords, p0, p1, radius):
    d = p1 - p0
    t = np.clip(((coords - p0) @ d) / (d @ d), 0.0, 1.0)
    nearest = p0 + t[..., None] * d
    return np.sqrt(((coords - nearest) ** 2).sum(-1)) - radius


def _blend(image, sdf, intensity, softness):
    w = 0.5 * (1.0 - np.tanh(sdf / (2.0 * softness)))  # logistic(-sdf/softness)
    image *= 1.0 - w
    image += w * intensity


def _fits(mask, occupied, margin):
    grown = ndimage.binary_dilation(mask, iterations=margin) if margin else mask
    return not np.any(grown & occupied)


# --- generation ---------------------------------------------------------------


def generate_sample(cfg: SyntheticConfig, rng: np.random.Generator, index: int = 0):
    """Generate one (Volume, LabelMap) pair in Hounsfield-like units."""
    dims = tuple(cfg.dims)
    rank = len(dims)
    n_vox = int(np.prod(dims))
    coords = _grid(dims)
    dims_arr = np.array(dims, dtype=np.float64)

    texture = ndimage.gaussian_filter(rng.standard_normal(dims), cfg.texture_sigma)
    texture *= cfg.texture_std / max(texture.std(), 1e-12)
    image = cfg.background_mean + texture
    labels = np.zeros(dims, dtype=np.uint16)
    occupied = np.zeros(dims, dtype=bool)

    shapes = []  # (sdf, intensity) painted after placement, in order
    for k, fg in enumerate(cfg.classes, start=1):
        n_blobs = int(rng.integers(fg.blobs[0], fg.blobs[1] + 1))
        for _ in range(n_blobs):
            area = fg.fraction * n_vox / n_blobs * rng.uniform(0.85, 1.15)
            placed = False
            for _attempt in range(cfg.max_retries):
                aspect = rng.uniform(1.2, 1.8)
                r_eq = _equivalent_radius(area, rank)
                if rank == 2:
                    axes = np.array([r_eq * np.sqrt(aspect), r_eq / np.sqrt(aspect)])
                else:
                    axes = np.array([r_eq * aspect ** (2 / 3), r_eq * aspect ** (-1 / 3), r_eq * aspect ** (-1 / 3)])
                rot = _random_rotation(rng, rank)
                reach = axes.max() + 2
                center = rng.uniform(reach, dims_arr - 1 - reach)
                sdf = _ellipsoid_sdf(coords, center, axes, rot)
                mask = sdf < 0
                if not mask.any() or not _fits(mask, occupied, 3):
                    continue
                blob = mask.copy()
                hole_sdf = _place_hole(coords, center, axes, rot, blob, rng)
                if hole_sdf is not None:
                    blob &= ~(hole_sdf < 0)
                occupied |= mask
                labels[blob] = k
                shapes.append((sdf, fg.intensity))
                if hole_sdf is not None:
                    shapes.append((hole_sdf, cfg.hole_intensity))
                placed = True
                break
            if not placed:
                raise GenerationError(
                    f"could not place a {fg.name} blob without overlap after {cfg.max_retries} retries"
                )

    n_distractors = int(rng.integers(cfg.distractors[0], cfg.distractors[1] + 1))
    for _ in range(n_distractors):
        intensity = cfg.classes[int(rng.integers(len(cfg.classes)))].intensity
        placed = False
        for _attempt in range(cfg.max_retries):
            radius = rng.uniform(*cfg.distractor_radius)
            length = rng.uniform(*cfg.distractor_length)
            direction = rng.standard_normal(rank)
            direction /= np.linalg.norm(direction)
            reach = length / 2 + radius + 2
            if np.any(2 * reach >= dims_arr):
                reach = min(dims_arr) / 2 - 1
                length = max(2 * (reach - radius - 2), 1.0)
            mid = rng.uniform(reach, dims_arr - 1 - reach)
            p0, p1 = mid - direction * length / 2, mid + direction * length / 2
            sdf = _capsule_sdf(coords, p0, p1, radius)
            mask = sdf < 0
            if not mask.any() or not _fits(mask, occupied, 3):
                continue
            occupied |= mask
            shapes.append((sdf, intensity))
            placed = True
            break
        if not placed:
            raise GenerationError(f"could not place a distractor without overlap after {cfg.max_retries} retries")

    for sdf, intensity in shapes:
        _blend(image, sdf, intensity, cfg.edge_softness)
    image += rng.normal(0.0, cfg.noise_std, dims)

    vid = f"case_{index:03d}"
    volume = Volume(image.astype(np.float32), tuple(cfg.spacing), vid)
    return volume, LabelMap(labels, cfg.num_classes, tuple(cfg.spacing), vid)


def _place_hole(coords, center, axes, rot, blob, rng, tries=20):
    """A small background-labelled inclusion strictly inside the blob, or None."""
    for _ in range(tries):
        h_axes = np.maximum(axes * rng.uniform(0.2, 0.3), 0.75)
        offset = rot @ (rng.uniform(-0.3, 0.3, size=len(axes)) * axes)
        h_center = center + offset
        sdf = _ellipsoid_sdf(coords, h_center, h_axes, rot)
        hole = sdf < 0
        if not hole.any():
            continue
        grown = ndimage.binary_dilation(hole, structure=np.ones((3,) * len(axes), bool))
        if np.any(grown & ~blob):
            continue
        rest = blob & ~hole
        _, n = ndimage.label(rest)
        if n == 1:
            return sdf
    return None


def generate_volumes(cfg: SyntheticConfig):
    """All (Volume, LabelMap) pairs for a config, deterministic in cfg.seed."""
    cfg.validate()
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.num_volumes)
    return [generate_sample(cfg, np.random.default_rng(s), i) for i, s in enumerate(children)]


def split_tags(cfg: SyntheticConfig) -> list[str]:
    """Seeded random train/validation assignment (num_validation cases go to validation)."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    val = set(rng.permutation(cfg.num_volumes)[: cfg.num_validation].tolist())
    return ["validation" if i in val else "train" for i in range(cfg.num_volumes)]


def foreground_fractions(labels: list[LabelMap], num_classes: int) -> np.ndarray:
    """Per-image, per-foreground-class voxel fractions, shape (n_images, K-1)."""
    out = np.zeros((len(labels), num_classes - 1))
    for i, lab in enumerate(labels):
        counts = np.bincount(lab.labels.ravel(), minlength=num_classes)
        out[i] = counts[1:] / lab.labels.size
    return out


# --- manifest -------------------------------------------------------------------


@dataclass
class ManifestEntry:
    id: str
    volume: str
    labels: str
    split: str


@dataclass
class DatasetManifest:
    """Plain-text dataset index.

    File layout: the magic comment line, then ``key=value`` header lines
    (``seed``, ``num_classes``, ``rank``, ``preset``, ``fg_fraction`` and
    ``config.<field>`` echoes with JSON values), a ``---`` separator, then
    one ``id<TAB>split<TAB>volume path<TAB>label path`` line per case.
    Paths are relative to the manifest's directory.
    """

    entries: list[ManifestEntry]
    seed: int
    num_classes: int
    header: dict[str, str] = field(default_factory=dict)
    root: str = "."

    def split(self, tag: str) -> list[ManifestEntry]:
        if tag not in SPLITS:
            raise ValueError(f"unknown split {tag!r}")
        return [e for e in self.entries if e.split == tag]

    def load_pair(self, entry: ManifestEntry) -> tuple[Volume, LabelMap]:
        v = load_volume(os.path.join(self.root, entry.volume), id=entry.id)
        l = load_labels(os.path.join(self.root, entry.labels), self.num_classes, id=entry.id)
        l.check_pair(v)
        return v, l

    def load_split(self, tag: str) -> list[tuple[Volume, LabelMap]]:
        return [self.load_pair(e) for e in self.split(tag)]

    def save(self, path) -> None:
        lines = [MANIFEST_MAGIC, f"seed={self.seed}", f"num_classes={self.num_classes}"]
        for key, value in self.header.items():
            if key in ("seed", "num_classes"):
                continue
            lines.append(f"{key}={value}")
        lines.append("---")
        for e in self.entries:
            lines.append("\t".join([e.id, e.split, e.volume, e.labels]))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_NAME)
        with open(path) as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != MANIFEST_MAGIC:
            raise ManifestError(f"{path}: missing manifest magic line")
        header: dict[str, str] = {}
        i = 1
        while i < len(lines) and lines[i] != "---":
            if "=" not in lines[i]:
                raise ManifestError(f"{path}:{i + 1}: header line without '='")
            k, v = lines[i].split("=", 1)
            header[k.strip()] = v.strip()
            i += 1
        if i == len(lines):
            raise ManifestError(f"{path}: missing '---' separator")
        for key in ("seed", "num_classes"):
            if key not in header:
                raise ManifestError(f"{path}: header lacks {key!r}")
        entries = []
        for lineno, line in enumerate(lines[i + 1 :], start=i + 2):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4 or parts[1] not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: malformed entry {line!r}")
            entries.append(ManifestEntry(parts[0], parts[2], parts[3], parts[1]))
        return cls(entries, int(header["seed"]), int(header["num_classes"]), header, os.path.dirname(path) or ".")

    def check_files(self) -> None:
        for e in self.entries:
            for p in (e.volume, e.labels):
                full = os.path.join(self.root, p)
                if not os.path.exists(full):
                    raise ManifestError(f"manifest references missing file {full}")


def generate_synthetic_dataset(cfg: SyntheticConfig, out_dir, preset_name: str = "custom") -> DatasetManifest:
    """Generate a dataset and write volumes, labels and manifest.txt into out_dir."""
    samples = generate_volumes(cfg)
    os.makedirs(out_dir, exist_ok=True)
    tags = split_tags(cfg)
    entries = []
    for (vol, lab), tag in zip(samples, tags):
        vname, lname = f"{vol.id}_image.isvl", f"{vol.id}_labels.isvl"
        save_volume(vol, os.path.join(out_dir, vname))
        save_labels(lab, os.path.join(out_dir, lname))
        entries.append(ManifestEntry(vol.id, vname, lname, tag))
    header = {
        "preset": preset_name,
        "rank": str(len(cfg.dims)),
        "fg_fraction": ",".join(repr(c.fraction) for c in cfg.classes),
        "class_names": ",".join(c.name for c in cfg.classes),
    }
    for key, value in cfg.to_dict().items():
        header[f"config.{key}"] = json.dumps(value)
    manifest = DatasetManifest(entries, cfg.seed, cfg.num_classes, header, str(out_dir))
    manifest.save(os.path.join(out_dir, MANIFEST_NAME))
    return manifest
