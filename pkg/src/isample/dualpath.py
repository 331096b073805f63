"""Two-pathway segmentation network: a full-resolution path and a 4x-downsampled context path.

Geometry along each axis (all convolutions valid):

* the high-res path turns a ``high_patch`` crop into an output block of
  ``high_patch - high_shrink`` voxels;
* the low-res path sees ``low_patch`` cells of an average-pooled grid
  (``downsample`` original voxels per cell) and yields
  ``low_patch - low_shrink`` feature cells;
* those cells are nearest-neighbour upsampled, cropped at ``offset`` to the
  output block, concatenated with the high-res features and classified by
  1x1 convolutions.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .volume import Volume

log = logging.getLogger(__name__)


class GeometryError(ValueError):
    pass


def _tuple(v, rank):
    return (int(v),) * rank if isinstance(v, (int, np.integer)) else tuple(int(a) for a in v)


@dataclass
class DualPathConfig:
    rank: int = 2
    num_classes: int = 2
    kernel: int = 3
    high_stem: int = 8
    high_blocks: list = field(default_factory=lambda: [["standard", 16], ["standard", 16]])
    low_stem: int = 8
    low_blocks: list = field(default_factory=lambda: [["standard", 16], ["standard", 16], ["standard", 32]])
    downsample: int = 4
    high_patch: int | tuple = 19
    low_patch: int | tuple = 17
    head_widths: list = field(default_factory=lambda: [64, 64])
    dropout: float = 0.5

    def __post_init__(self):
        # canonical JSON-friendly forms, so configs compare equal after a round trip
        self.high_blocks = [[str(k), int(w)] for k, w in self.high_blocks]
        self.low_blocks = [[str(k), int(w)] for k, w in self.low_blocks]
        self.head_widths = [int(w) for w in self.head_widths]
        for name in ("high_patch", "low_patch"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)):
                v = [int(a) for a in v]
                v = v[0] if len(set(v)) == 1 and len(v) == self.rank else v
            setattr(self, name, v if isinstance(v, list) else int(v))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DualPathConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    # -- derived geometry --

    def _block_shrink(self, kind):
        return 2 * (self.kernel - 1) if kind == "standard" else self.kernel - 1

    @property
    def high_shrink(self) -> int:
        return self.kernel - 1 + sum(self._block_shrink(k) for k, _ in self.high_blocks)

    @property
    def low_shrink(self) -> int:
        return self.kernel - 1 + sum(self._block_shrink(k) for k, _ in self.low_blocks)

    @property
    def high_extent(self) -> tuple[int, ...]:
        return _tuple(self.high_patch, self.rank)

    @property
    def low_extent(self) -> tuple[int, ...]:
        return _tuple(self.low_patch, self.rank)

    @property
    def output_extent(self) -> tuple[int, ...]:
        return tuple(p - self.high_shrink for p in self.high_extent)

    @property
    def low_cells(self) -> tuple[int, ...]:
        """Low-res feature cells needed to cover the output block."""
        return tuple(math.ceil(o / self.downsample) for o in self.output_extent)

    @property
    def training_offset(self) -> tuple[int, ...]:
        """Crop offset into the upsampled low-res features for a training patch (centred)."""
        f = self.downsample
        return tuple((f * n - o) // 2 for n, o in zip(self.low_cells, self.output_extent))

    @property
    def context_extent(self) -> tuple[int, ...]:
        """Physical footprint of the low-res context, in original voxels."""
        return tuple(self.downsample * p for p in self.low_extent)

    def high_specs(self):
        specs = [nn.LayerSpec("conv", 1, self.high_stem, self.kernel)]
        c = self.high_stem
        for kind, width in self.high_blocks:
            specs.append(nn.LayerSpec(f"resblock-{kind}", c, width, self.kernel))
            c = width
        return specs

    def low_specs(self):
        specs = [nn.LayerSpec("conv", 1, self.low_stem, self.kernel)]
        c = self.low_stem
        for kind, width in self.low_blocks:
            specs.append(nn.LayerSpec(f"resblock-{kind}", c, width, self.kernel))
            c = width
        return specs

    def head_specs(self):
        c = self.high_blocks[-1][1] + self.low_blocks[-1][1]
        specs = []
        for width in list(self.head_widths) + [self.num_classes]:
            specs.append(nn.LayerSpec("dropout", c, c, 1, p=self.dropout))
            specs.append(nn.LayerSpec("fc-as-1x1-conv", c, width, 1))
            c = width
        specs.append(nn.LayerSpec("softmax", c, c, 1))
        return specs

    def layer_specs(self):
        return {"high": self.high_specs(), "low": self.low_specs(), "head": self.head_specs()}

    def validate(self) -> None:
        if self.rank not in (2, 3):
            raise GeometryError(f"rank must be 2 or 3, got {self.rank}")
        if self.num_classes < 2:
            raise GeometryError("num_classes must be >= 2")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise GeometryError(f"kernel must be odd, got {self.kernel}")
        if self.downsample < 1:
            raise GeometryError("downsample factor must be >= 1")
        for kind, width in list(self.high_blocks) + list(self.low_blocks):
            if kind not in ("standard", "bottleneck") or width < 1:
                raise GeometryError(f"bad block {kind!r}/{width}")
        if len(self.low_blocks) < len(self.high_blocks):
            raise GeometryError(
                f"low-res path ({len(self.low_blocks)} blocks) must be at least as deep as "
                f"the high-res path ({len(self.high_blocks)} blocks)"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise GeometryError(f"dropout {self.dropout} not in [0, 1)")
        if len(self.high_extent) != self.rank or len(self.low_extent) != self.rank:
            raise GeometryError("patch extents must have one entry per axis")
        for axis, o in enumerate(self.output_extent):
            if o < 1:
                raise GeometryError(
                    f"axis {axis}: high-res patch {self.high_extent[axis]} leaves no output after "
                    f"shrinking by {self.high_shrink}"
                )
        for axis, (p, need) in enumerate(zip(self.low_extent, self.low_cells)):
            got = p - self.low_shrink
            if got != need:
                raise GeometryError(
                    f"axis {axis}: low-res path yields {got} feature cells ({got * self.downsample} voxels "
                    f"upsampled) but the output block of {self.output_extent[axis]} voxels needs exactly "
                    f"{need}; use low_patch = {need + self.low_shrink}"
                )
        f = self.downsample
        for axis, (m, n, o) in enumerate(zip(self.training_offset, self.low_cells, self.output_extent)):
            # low-res footprint must contain the high-res footprint
            lo_start = -m - f * (self.low_shrink // 2)
            lo_stop = lo_start + f * (n + self.low_shrink)
            hi_start = -(self.high_shrink // 2)
            hi_stop = o + self.high_shrink // 2
            if lo_start > hi_start or lo_stop < hi_stop:
                raise GeometryError(f"axis {axis}: low-res context does not cover the high-res patch")


@dataclass
class PatchPair:
    high: np.ndarray  # (1, *high_extent)
    low: np.ndarray  # (1, *low_extent)
    center: tuple[int, ...]
    target: np.ndarray | None  # (*output_extent) class ids, or None at inference


class DualPathNet:
    """Dual-path network; parameters float32 unless built with another dtype."""

    def __init__(self, cfg: DualPathConfig, rng: np.random.Generator, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        r, k = cfg.rank, cfg.kernel
        self.rng = rng
        self.high = nn.Sequential(
            [nn.ConvBNReLU("high.stem", 1, cfg.high_stem, k, r, rng, dtype)]
            + self._blocks("high", cfg.high_stem, cfg.high_blocks, rng, dtype)
        )
        self.low = nn.Sequential(
            [nn.ConvBNReLU("low.stem", 1, cfg.low_stem, k, r, rng, dtype)]
            + self._blocks("low", cfg.low_stem, cfg.low_blocks, rng, dtype)
        )
        layers = []
        c = cfg.high_blocks[-1][1] + cfg.low_blocks[-1][1]
        widths = list(cfg.head_widths)
        for i, width in enumerate(widths + [cfg.num_classes]):
            last = i == len(widths)
            layers.append(nn.Dropout(cfg.dropout, rng))
            layers.append(nn.Conv(f"head.fc{i}" if not last else "head.classifier", c, width, 1, r,
                                  bias=True, decay=not last, rng=rng, dtype=dtype))
            if not last:
                layers.append(nn.ReLU())
            c = width
        self.head = nn.Sequential(layers)
        self.classifier = layers[-1]
        self._cache = None
        self.version = 0  # bumped on every parameter update

    def _blocks(self, path, cin, blocks, rng, dtype):
        out = []
        for i, (kind, width) in enumerate(blocks):
            out.append(nn.ResBlock(f"{path}.block{i}", cin, width, kind, self.cfg.kernel, self.cfg.rank, rng, dtype))
            cin = width
        return out

    def params(self) -> list[nn.Param]:
        return self.high.params() + self.low.params() + self.head.params()

    def set_rng(self, rng: np.random.Generator) -> None:
        self.rng = rng
        for layer in self.head.layers:
            if isinstance(layer, nn.Dropout):
                layer.rng = rng

    def batchnorms(self):
        def walk(layer):
            if isinstance(layer, nn.BatchNorm):
                yield layer
            elif isinstance(layer, nn.Sequential):
                for sub in layer.layers:
                    yield from walk(sub)
            elif isinstance(layer, nn.ResBlock):
                yield from walk(layer.branch)
                if layer.proj:
                    yield from walk(layer.proj)
        for path in (self.high, self.low, self.head):
            yield from walk(path)

    @property
    def stats_ready(self) -> bool:
        return all(bn.tracked for bn in self.batchnorms())

    def set_stats_ready(self, ready: bool = True) -> None:
        for bn in self.batchnorms():
            bn.tracked = ready

    # -- forward / backward --

    def logits(self, high, low, offset=None, training=False) -> np.ndarray:
        """high: (B, C, *H), low: (B, C, *L). Output (B, K, *(H - high_shrink))."""
        cfg, r, f = self.cfg, self.cfg.rank, self.cfg.downsample
        if high.ndim != r + 2 or low.ndim != r + 2:
            raise GeometryError(f"inputs must have rank {r + 2}")
        out_ext = tuple(h - cfg.high_shrink for h in high.shape[2:])
        cells = tuple(l - cfg.low_shrink for l in low.shape[2:])
        offset = cfg.training_offset if offset is None else _tuple(offset, r)
        for axis, (o, c, m) in enumerate(zip(out_ext, cells, offset)):
            if o < 1 or c < 1 or m < 0 or m + o > f * c:
                raise GeometryError(
                    f"axis {axis}: output block {o} at offset {m} does not fit in {c} low-res cells x{f}"
                )
        hf = self.high.forward(high, training)
        lf = self.low.forward(low, training)
        up = nn.upsample_nearest(lf, f, r)
        crop = (slice(None), slice(None)) + tuple(slice(m, m + o) for m, o in zip(offset, out_ext))
        fused = np.concatenate([hf, up[crop]], axis=1)
        z = self.head.forward(fused, training)
        self._cache = (hf.shape[1], up.shape, crop)
        return z

    def forward(self, high, low, offset=None, training=False) -> np.ndarray:
        """Per-voxel class probabilities, (B, K, *output)."""
        return nn.softmax(self.logits(high, low, offset, training))

    def backward(self, grad_logits: np.ndarray) -> None:
        n_high, up_shape, crop = self._cache
        g = self.head.backward(grad_logits)
        g_up = np.zeros(up_shape, dtype=g.dtype)
        g_up[crop] = g[:, n_high:]
        self.low.backward(nn.upsample_nearest_backward(g_up, self.cfg.downsample, self.cfg.rank))
        self.high.backward(np.ascontiguousarray(g[:, :n_high]))
        self._cache = None

    def forward_pairs(self, pairs: list[PatchPair], training=False) -> np.ndarray:
        high = np.stack([p.high for p in pairs])
        low = np.stack([p.low for p in pairs])
        return self.forward(high, low, None, training)

    # -- snapshots --

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.params()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.params()
        names = {p.name for p in params}
        if names != set(state):
            missing, extra = sorted(names - set(state)), sorted(set(state) - names)
            raise ValueError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for p in params:
            if state[p.name].shape != p.value.shape:
                raise ValueError(f"{p.name}: shape {state[p.name].shape} != {p.value.shape}")
            p.value = np.array(state[p.name], dtype=p.value.dtype)
        self.set_stats_ready(True)

    def snapshot(self) -> "DualPathNet":
        """Frozen copy for concurrent inference."""
        clone = DualPathNet(self.cfg, np.random.default_rng(0))
        clone.load_state(self.state())
        clone.set_stats_ready(self.stats_ready)
        clone.version = self.version
        return clone


def build_model(cfg: DualPathConfig, rng: np.random.Generator, dtype=np.float32) -> DualPathNet:
    model = DualPathNet(cfg, rng, dtype)
    log.info(
        "built dual-path model: %d parameters (%d trainable), output block %s, receptive field high %s low %s",
        nn.param_count(model.params()),
        nn.param_count(model.params(), trainable_only=True),
        cfg.output_extent,
        nn.receptive_field(cfg.high_specs(), cfg.rank, 1),
        nn.receptive_field(cfg.low_specs(), cfg.rank, cfg.downsample),
    )
    return model


# --- fully convolutional inference ---------------------------------------------------


def _edge_window(image: np.ndarray, starts, stops) -> np.ndarray:
    """image[starts:stops] with out-of-range indices replicated from the border."""
    idx = [np.clip(np.arange(a, b), 0, n - 1) for a, b, n in zip(starts, stops, image.shape)]
    return image[np.ix_(*idx)]


def full_image_inference(model: DualPathNet, v: Volume, tile=None, batch_size: int = 16) -> np.ndarray:
    """Class probabilities (K, *dims) for a normalized volume by sliding-window tiling.

    Tiles of ``tile`` output voxels (default: the training output block) are
    placed at stride ``tile``; borders use edge replication. The low-res grid
    is anchored at the image origin for every tile, so the result does not
    depend on the tiling.
    """
    cfg = model.cfg
    image = v.voxels
    if image.ndim != cfg.rank:
        raise GeometryError(f"volume rank {image.ndim} does not match model rank {cfg.rank}")
    dims = image.shape
    for axis, (n, w) in enumerate(zip(dims, cfg.context_extent)):
        if n < w:
            raise GeometryError(f"axis {axis}: image extent {n} is smaller than one context window ({w})")
    f = cfg.downsample
    tile = cfg.output_extent if tile is None else _tuple(tile, cfg.rank)
    hs, ls = cfg.high_shrink // 2, cfg.low_shrink // 2
    n_tiles = [math.ceil(n / t) for n, t in zip(dims, tile)]
    cells = [math.ceil((t + f - 1) / f) + cfg.low_shrink for t in tile]

    # average-pooled image on the global grid: cell q covers [f*q, f*q + f)
    q_lo = [-ls for _ in dims]
    q_hi = [((nt - 1) * t) // f - ls + c for nt, t, c in zip(n_tiles, tile, cells)]
    low_image = nn.average_pool(
        _edge_window(image, [f * a for a in q_lo], [f * b for b in q_hi]).astype(np.float64), f, cfg.rank
    ).astype(image.dtype)
    high_image = _edge_window(image, [-hs] * cfg.rank, [nt * t + hs for nt, t in zip(n_tiles, tile)])

    out = np.zeros((cfg.num_classes,) + tuple(nt * t for nt, t in zip(n_tiles, tile)), np.float32)
    groups: dict[tuple, list] = {}
    for index in np.ndindex(*n_tiles):
        b0 = [i * t for i, t in zip(index, tile)]
        q0 = [b // f for b in b0]
        groups.setdefault(tuple(b - f * q for b, q in zip(b0, q0)), []).append((b0, q0))
    for offset, members in sorted(groups.items()):
        for start in range(0, len(members), batch_size):
            chunk = members[start : start + batch_size]
            highs, lows = [], []
            for b0, q0 in chunk:
                highs.append(high_image[tuple(slice(b, b + t + 2 * hs) for b, t in zip(b0, tile))])
                lows.append(low_image[tuple(slice(q - ls - ql, q - ls - ql + c) for q, ql, c in zip(q0, q_lo, cells))])
            probs = model.forward(np.stack(highs)[:, None], np.stack(lows)[:, None], offset, training=False)
            for (b0, _), p in zip(chunk, probs):
                out[(slice(None),) + tuple(slice(b, b + t) for b, t in zip(b0, tile))] = p
    return out[(slice(None),) + tuple(slice(0, n) for n in dims)]
