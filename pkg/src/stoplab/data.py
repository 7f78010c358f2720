"""Images, patch grids and context/target masks.

Images are ``float32`` arrays shaped ``[n, H, W, C]`` with values in
``[0, 1]``.  Patches are flattened in row-major grid order (top-left patch
first) and each patch is flattened rows, then columns, then channels.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InternalError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MAX_SYNTHETIC_CLASSES = 16
MIN_SYNTHETIC_SIDE = 16


@dataclass
class ImageBatch:
    images: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] not in (1, 3):
            raise ConfigError(f"images must be [n, H, W, C] with C in {{1, 3}}, got {self.images.shape}")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise ConfigError(f"{len(self.labels)} labels for {len(self.images)} images")

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        labels = None if self.labels is None else self.labels[idx]
        return ImageBatch(self.images[idx], labels)


@dataclass
class PatchGrid:
    patches: np.ndarray  # [n, K, patch*patch*C]
    grid_h: int
    grid_w: int
    patch: int
    channels: int

    @property
    def num_patches(self):
        return self.grid_h * self.grid_w


@dataclass
class MaskSpec:
    """Context (visible) and target (hidden) patch indices.

    Index arrays are 1-D when one mask is shared across the batch, or 2-D
    ``[batch, count]`` for per-image masks.
    """

    context_idx: np.ndarray
    target_idx: np.ndarray
    num_patches: int

    def __post_init__(self):
        self.context_idx = np.asarray(self.context_idx, dtype=np.int64)
        self.target_idx = np.asarray(self.target_idx, dtype=np.int64)
        self.validate()

    @property
    def per_image(self):
        return self.context_idx.ndim == 2

    def validate(self):
        ctx = np.atleast_2d(self.context_idx)
        tgt = np.atleast_2d(self.target_idx)
        if ctx.shape[0] != tgt.shape[0]:
            raise InternalError("context and target masks disagree on batch size")
        if tgt.shape[1] == 0:
            raise InternalError("mask has no target indices")
        for c, t in zip(ctx, tgt):
            if np.any(np.diff(c) <= 0) or np.any(np.diff(t) <= 0):
                raise InternalError("mask indices must be sorted and unique")
            if np.intersect1d(c, t).size:
                raise InternalError("context and target indices overlap")
            if (c.size and (c.max() >= self.num_patches or c.min() < 0)) or t.max() >= self.num_patches or t.min() < 0:
                raise InternalError(f"mask index out of range for K={self.num_patches}")


# ---------------------------------------------------------------------------
# synthetic data

def _shape_mask(kind, u, v):
    au, av = np.abs(u), np.abs(v)
    r = np.sqrt(u * u + v * v)
    inside = np.maximum(au, av) <= 1.0
    if kind == 0:  # disc
        return r <= 1.0
    if kind == 1:  # square
        return np.maximum(au, av) <= 0.8
    if kind == 2:  # triangle, apex up
        return (v >= -0.9) & (v <= 0.9) & (au <= (v + 0.9) / 1.8)
    if kind == 3:  # plus
        return inside & ((au <= 0.3) | (av <= 0.3))
    if kind == 4:  # ring
        return (r <= 1.0) & (r >= 0.55)
    if kind == 5:  # diamond
        return au + av <= 1.0
    if kind == 6:  # horizontal bar
        return (au <= 1.0) & (av <= 0.3)
    if kind == 7:  # vertical bar
        return (au <= 0.3) & (av <= 1.0)
    if kind == 8:  # x
        return inside & (np.abs(au - av) <= 0.3)
    if kind == 9:  # hollow square
        m = np.maximum(au, av)
        return (m <= 0.95) & (m >= 0.6)
    if kind == 10:  # L
        return inside & ((u <= -0.4) | (v >= 0.4))
    if kind == 11:  # T
        return inside & ((v <= -0.4) | (au <= 0.3))
    if kind == 12:  # two dots
        return ((u + 0.5) ** 2 + v * v <= 0.2) | ((u - 0.5) ** 2 + v * v <= 0.2)
    if kind == 13:  # half disc
        return (r <= 1.0) & (v >= 0.0)
    if kind == 14:  # checker
        return inside & ((u >= 0) == (v >= 0))
    if kind == 15:  # triangle, apex down
        return (v >= -0.9) & (v <= 0.9) & (au <= (0.9 - v) / 1.8)
    raise ConfigError(f"unknown shape kind {kind}")


def generate_synthetic(n, H=32, W=32, num_classes=4, seed=0, channels=1, noise=0.15):
    """Procedural shapes on noisy backgrounds, one shape family per class.

    Labels are exactly balanced (``n % num_classes`` leftovers go to the
    lowest class ids) and shuffled.  Output is deterministic in ``seed``.
    """
    if num_classes < 1 or num_classes > MAX_SYNTHETIC_CLASSES:
        raise ConfigError(f"num_classes must be in [1, {MAX_SYNTHETIC_CLASSES}], got {num_classes}")
    if H < MIN_SYNTHETIC_SIDE or W < MIN_SYNTHETIC_SIDE:
        raise ConfigError(f"synthetic images must be at least {MIN_SYNTHETIC_SIDE}x{MIN_SYNTHETIC_SIDE}, got {H}x{W}")
    if channels not in (1, 3):
        raise ConfigError(f"channels must be 1 or 3, got {channels}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % num_classes
    rng.shuffle(labels)
    images = np.empty((n, H, W, channels), dtype=np.float32)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    side = min(H, W)
    for i in range(n):
        radius = rng.uniform(0.22, 0.38) * side
        cy = rng.uniform(radius, H - radius)
        cx = rng.uniform(radius, W - radius)
        mask = _shape_mask(int(labels[i]), (xx - cx) / radius, (yy - cy) / radius)
        background = rng.uniform(0.0, 0.3)
        foreground = rng.uniform(0.65, 1.0)
        color = rng.uniform(0.7, 1.0, size=channels) if channels == 3 else np.ones(1)
        img = np.where(mask[..., None], foreground * color, background)
        img = img + noise * rng.standard_normal((H, W, channels))
        images[i] = np.clip(img, 0.0, 1.0)
    return ImageBatch(images, labels)


# ---------------------------------------------------------------------------
# IDX files

def write_idx_images(path, images):
    """Write grayscale images in ``[0, 1]`` as an IDX u8 tensor ``[n, H, W]``."""
    images = np.asarray(images)
    if images.ndim == 4:
        if images.shape[-1] != 1:
            raise ConfigError("IDX output supports grayscale images only")
        images = images[..., 0]
    if images.ndim != 3:
        raise ConfigError(f"expected [n, H, W] images, got {images.shape}")
    pixels = np.clip(np.rint(images.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    n, h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(pixels.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ConfigError("IDX labels must fit in u8")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.astype(np.uint8).tobytes())


def _read_idx(path, magic, ndim):
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated before magic number at byte offset {len(raw)}")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x} at byte offset 0, expected 0x{magic:08x}")
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)}, need {header} bytes")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = 1
    for d in dims:
        count *= d
    if count > len(raw) - header:
        raise FormatError(
            f"{path}: header dims {dims} need {count} payload bytes but only "
            f"{len(raw) - header} follow (truncated at byte offset {len(raw)})"
        )
    if count < len(raw) - header:
        raise FormatError(
            f"{path}: {len(raw) - header - count} trailing bytes after payload at byte offset {header + count}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path=None):
    """Load an IDX image file (and optional label file) into an :class:`ImageBatch`."""
    pixels = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    images = (pixels.astype(np.float32) / np.float32(255.0))[..., None]
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).astype(np.int64)
        if len(labels) != len(images):
            raise FormatError(f"{labels_path}: {len(labels)} labels at byte offset 4 but {len(images)} images")
    return ImageBatch(images, labels)


# ---------------------------------------------------------------------------
# patches

def patchify(batch, patch):
    images = batch.images if isinstance(batch, ImageBatch) else np.asarray(batch)
    n, H, W, C = images.shape
    if patch < 1 or H % patch or W % patch:
        raise ConfigError(f"patch size {patch} must divide image size {H}x{W}")
    gh, gw = H // patch, W // patch
    x = images.reshape(n, gh, patch, gw, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return PatchGrid(x.reshape(n, gh * gw, patch * patch * C), gh, gw, patch, C)


def unpatchify(grid):
    n = grid.patches.shape[0]
    p, C = grid.patch, grid.channels
    x = grid.patches.reshape(n, grid.grid_h, grid.grid_w, p, p, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, grid.grid_h * p, grid.grid_w * p, C)


# ---------------------------------------------------------------------------
# masks

def sample_random_mask(K, ratio, rng):
    """Hide ``ceil(ratio * K)`` uniformly chosen patches; the rest is context."""
    if K < 2:
        raise ConfigError(f"need at least 2 patches to mask, got K={K}")
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must be in (0, 1), got {ratio}")
    num_targets = math.ceil(ratio * K)
    if num_targets >= K:
        raise ConfigError(f"ratio {ratio} leaves no context patch for K={K}")
    perm = rng.permutation(K)
    return MaskSpec(np.sort(perm[num_targets:]), np.sort(perm[:num_targets]), K)


def _block_shape(grid_h, grid_w, target_scale, aspect, rng):
    area = rng.uniform(*target_scale) * grid_h * grid_w
    ratio = rng.uniform(*aspect)
    h = int(round(math.sqrt(area * ratio)))
    w = int(round(math.sqrt(area / ratio)))
    return min(max(h, 1), grid_h), min(max(w, 1), grid_w)


def sample_block_mask(grid_h, grid_w, num_targets=4, target_scale=(0.15, 0.25), aspect=(0.75, 1.5), rng=None,
                      max_tries=16, fallback_ratio=0.75):
    """Union of ``num_targets`` rectangular blocks as targets, complement as context.

    Block area is ``uniform(target_scale) * K`` patches with height/width
    ratio ``uniform(aspect)``.  Draws that would leave no context are retried
    up to ``max_tries`` times before falling back to a random mask.
    """
    if num_targets < 1:
        raise ConfigError(f"num_targets must be >= 1, got {num_targets}")
    lo, hi = target_scale
    if not (0.0 < lo <= hi < 1.0):
        raise ConfigError(f"target_scale must satisfy 0 < lo <= hi < 1, got {target_scale}")
    if not (0.0 < aspect[0] <= aspect[1]):
        raise ConfigError(f"aspect range must be positive and ordered, got {aspect}")
    if rng is None:
        rng = np.random.default_rng()
    K = grid_h * grid_w
    for _ in range(max_tries):
        covered = np.zeros((grid_h, grid_w), dtype=bool)
        for _ in range(num_targets):
            h, w = _block_shape(grid_h, grid_w, target_scale, aspect, rng)
            top = int(rng.integers(0, grid_h - h + 1))
            left = int(rng.integers(0, grid_w - w + 1))
            covered[top:top + h, left:left + w] = True
        flat = covered.reshape(-1)
        if not flat.all():
            return MaskSpec(np.flatnonzero(~flat), np.flatnonzero(flat), K)
    mask = sample_random_mask(K, fallback_ratio, rng)
    if mask.context_idx.size == 0:
        raise InternalError("block mask fallback produced an empty context")
    return mask


def stack_masks(masks):
    """Combine per-image masks into one batched :class:`MaskSpec`.

    Counts can differ between images (block masks); every row is truncated
    to the smallest context and target count in the batch.
    """
    n_ctx = min(m.context_idx.size for m in masks)
    n_tgt = min(m.target_idx.size for m in masks)
    ctx = np.stack([m.context_idx[:n_ctx] for m in masks])
    tgt = np.stack([m.target_idx[:n_tgt] for m in masks])
    return MaskSpec(ctx, tgt, masks[0].num_patches)
