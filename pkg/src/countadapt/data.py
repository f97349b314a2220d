"""Dataset ingestion, ground-truth density maps, and synthetic two-domain scenes.

Annotations are JSON-lines (one image per line), images are binary P6
pixmaps, and density maps use a small DMAP container (ASCII header plus raw
little-endian float32). The synthetic scene generator renders filled
ellipses whose size grows with image row, which stands in for the
perspective differences between real traffic cameras; two parameter sets
with different perspective strength and luminance produce a measurable
domain gap.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, PlacementError, ValidationError

SOURCE = "source"
TARGET = "target"

_PLACEMENT_TRIES = 60
_MAX_OVERLAP = 0.9


@dataclass
class BoundingBox:
    """Axis-aligned box given by center (cx, cy) and extent (w, h), in pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"box extent must be positive, got w={self.w}, h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass
class AnnotatedImage:
    image: Tensor  # (C, H, W) in [0, 1]
    boxes: list[BoundingBox]
    camera_id: str
    domain: str = SOURCE

    @property
    def count(self) -> int:
        return len(self.boxes)


@dataclass
class DensityMap:
    """Non-negative (H, W) grid whose total mass equals the object count."""

    grid: Tensor

    @property
    def total(self) -> float:
        return float(self.grid.data.sum())


@dataclass
class DensityKernelSpec:
    """Per-object Gaussian: sigma = sigma_ratio * max(box w, box h)."""

    sigma_ratio: float = 0.25
    truncation_radius: float = 4.0  # in sigma units

    def __post_init__(self):
        if self.sigma_ratio <= 0:
            raise ValidationError(f"sigma_ratio must be > 0, got {self.sigma_ratio}")
        if self.truncation_radius < 3:
            raise ValidationError(f"truncation_radius must be >= 3, got {self.truncation_radius}")


@dataclass
class SceneDomainParams:
    """Knobs that define one synthetic camera domain.

    perspective_strength scales rendered object size with image row
    (1 + strength * (cy/H - 0.5)), so a stronger value mimics a camera with
    a steeper viewing angle. luminance multiplies the final image.
    """

    perspective_strength: float = 0.0
    base_object_size: float = 10.0
    luminance: float = 1.0
    background_texture_seed: int = 0
    object_count_range: tuple[int, int] = (3, 8)
    width: int = 64
    height: int = 64
    name: str = "synth"

    def __post_init__(self):
        lo, hi = self.object_count_range
        if lo > hi:
            raise ValidationError(f"object_count_range min {lo} > max {hi}")
        if self.base_object_size < 2:
            raise ValidationError(f"base_object_size must be >= 2 px, got {self.base_object_size}")
        if not 0.0 <= self.luminance <= 1.0:
            raise ValidationError(f"luminance must be in [0, 1], got {self.luminance}")
        if self.background_texture_seed < 0:
            raise ValidationError("background_texture_seed must be non-negative")


# ---------------------------------------------------------------------------
# ground-truth density maps
# ---------------------------------------------------------------------------

def generate_density_map(boxes, height: int, width: int,
                         spec: DensityKernelSpec | None = None,
                         dtype=np.float32) -> DensityMap:
    """Sum of one unit-mass Gaussian per box, evaluated at pixel centers.

    Each kernel is evaluated on a square window of half-width
    truncation_radius * sigma, clipped to the image, and renormalized so the
    in-image mass is exactly 1 even for boxes at borders or corners. A box
    whose window misses the image entirely contributes nothing.
    """
    if height < 1 or width < 1:
        raise ValidationError(f"density map needs height, width >= 1, got {height}x{width}")
    spec = spec or DensityKernelSpec()
    grid = np.zeros((height, width), dtype=np.float64)
    for box in boxes:
        sigma = spec.sigma_ratio * max(box.w, box.h)
        radius = spec.truncation_radius * sigma
        r0 = max(0, int(math.floor(box.cy - radius)))
        r1 = min(height, int(math.ceil(box.cy + radius)) + 1)
        c0 = max(0, int(math.floor(box.cx - radius)))
        c1 = min(width, int(math.ceil(box.cx + radius)) + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        ys = np.arange(r0, r1, dtype=np.float64) + 0.5
        xs = np.arange(c0, c1, dtype=np.float64) + 0.5
        dy2 = (ys - box.cy) ** 2
        dx2 = (xs - box.cx) ** 2
        kernel = np.exp(-(dy2[:, None] + dx2[None, :]) / (2.0 * sigma * sigma))
        mass = kernel.sum()
        if mass > 0:
            grid[r0:r1, c0:c1] += kernel / mass
    return DensityMap(Tensor(grid.astype(dtype)))


# ---------------------------------------------------------------------------
# on-disk formats
# ---------------------------------------------------------------------------

def write_ppm(path, image) -> None:
    """Write a (3, H, W) [0, 1] array as a binary P6 pixmap, maxval 255."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValidationError(f"write_ppm needs (3, H, W), got {arr.shape}")
    _, h, w = arr.shape
    pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 pixmap into a (3, H, W) float32 array in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValidationError(f"{path}: truncated pixmap header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P6":
        raise ValidationError(f"{path}: not a binary P6 pixmap (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValidationError(f"{path}: only maxval 255 supported, got {maxval}")
    need = w * h * 3
    body = raw[pos:pos + need]
    if len(body) != need:
        raise ValidationError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return (pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)


def write_dmap(path, density) -> None:
    """Write a density map: ASCII line 'DMAP 1 <H> <W>' then raw LE float32."""
    grid = density.grid.data if isinstance(density, DensityMap) else np.asarray(density)
    if grid.ndim != 2:
        raise ValidationError(f"write_dmap needs an (H, W) grid, got shape {grid.shape}")
    h, w = grid.shape
    with open(path, "wb") as f:
        f.write(f"DMAP 1 {h} {w}\n".encode("ascii"))
        f.write(grid.astype("<f4").tobytes())


def read_dmap(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline()
        parts = header.split()
        if len(parts) != 4 or parts[0] != b"DMAP" or parts[1] != b"1":
            raise ValidationError(f"{path}: bad DMAP header {header!r}")
        h, w = int(parts[2]), int(parts[3])
        body = f.read()
    if len(body) != h * w * 4:
        raise ValidationError(f"{path}: expected {h * w * 4} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).copy()


def load_annotations(path, domain: str = SOURCE) -> list[AnnotatedImage]:
    """Read a JSON-lines annotation file; image paths resolve next to it.

    Each line: {"image": "<relative path>", "camera": "<id>",
    "boxes": [[cx, cy, w, h], ...]}. Empty box lists are legal (empty scene).
    """
    path = Path(path)
    base = path.parent
    images = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                img_rel = rec["image"]
                camera = str(rec["camera"])
                raw_boxes = rec["boxes"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValidationError(f"{path} line {lineno}: malformed annotation ({e})") from e
            img_path = base / img_rel
            if not img_path.exists():
                raise ValidationError(f"{path} line {lineno}: image file not found: {img_path}")
            try:
                boxes = [BoundingBox(*map(float, b)) for b in raw_boxes]
            except (TypeError, ValidationError) as e:
                raise ValidationError(f"{path} line {lineno}: bad box: {e}") from e
            images.append(AnnotatedImage(
                image=Tensor(read_ppm(img_path)),
                boxes=boxes,
                camera_id=camera,
                domain=domain,
            ))
    return images


def save_annotations(path, records) -> None:
    """Write (image_relpath, camera_id, boxes) records as JSON-lines."""
    with open(path, "w", encoding="utf-8") as f:
        for img_rel, camera, boxes in records:
            rec = {"image": img_rel, "camera": camera,
                   "boxes": [[b.cx, b.cy, b.w, b.h] for b in boxes]}
            f.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def _smooth_field(rng, h, w, lo, hi, grid=7):
    """Bilinearly interpolated random control grid, a cheap soft texture."""
    ctrl = rng.uniform(lo, hi, size=(grid, grid))
    ys = np.linspace(0, grid - 1, h)
    xs = np.linspace(0, grid - 1, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, grid - 1)
    x1 = np.minimum(x0 + 1, grid - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    return (ctrl[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
            + ctrl[np.ix_(y0, x1)] * (1 - fy) * fx
            + ctrl[np.ix_(y1, x0)] * fy * (1 - fx)
            + ctrl[np.ix_(y1, x1)] * fy * fx)


def _ellipse_mask(box: BoundingBox, yy, xx):
    a = box.w / 2.0
    b = box.h / 2.0
    return (((xx[None, :] - box.cx) / a) ** 2 + ((yy[:, None] - box.cy) / b) ** 2) <= 1.0


def synth_scene(params: SceneDomainParams, rng_seed: int) -> AnnotatedImage:
    """Render one scene: textured background plus filled ellipses.

    Deterministic in (params, rng_seed). Object size depends only on the
    image row, so perspective_strength 0 renders every object at the same
    size. Objects clipped at the border keep their true, possibly
    out-of-frame, bounding box.
    """
    h, w = params.height, params.width
    bg_rng = np.random.default_rng(np.random.SeedSequence(
        [params.background_texture_seed, rng_seed, 202]))
    obj_rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 101]))

    gray = _smooth_field(bg_rng, h, w, 0.45, 0.75)
    tint = bg_rng.uniform(0.95, 1.05, size=3)
    img = gray[None, :, :] * tint[:, None, None]

    lo, hi = params.object_count_range
    n = int(obj_rng.integers(lo, hi + 1))
    boxes: list[BoundingBox] = []
    occupied = np.zeros((h, w), dtype=bool)
    yy = np.arange(h, dtype=np.float64) + 0.5
    xx = np.arange(w, dtype=np.float64) + 0.5
    for _ in range(n):
        placed = mask = None
        for _attempt in range(_PLACEMENT_TRIES):
            cx = float(obj_rng.uniform(0, w))
            cy = float(obj_rng.uniform(0, h))
            size = params.base_object_size * (1.0 + params.perspective_strength * (cy / h - 0.5))
            cand = BoundingBox(cx, cy, size, 0.75 * size)
            cand_mask = _ellipse_mask(cand, yy, xx)
            visible = int(cand_mask.sum())
            if visible > 0 and (cand_mask & occupied).sum() <= _MAX_OVERLAP * visible:
                placed, mask = cand, cand_mask
                break
        if placed is None:
            raise PlacementError(
                f"could not place object {len(boxes) + 1}/{n} with <= {_MAX_OVERLAP:.0%} of its "
                f"pixels already covered, after {_PLACEMENT_TRIES} tries (scene too crowded)")
        base_intensity = obj_rng.uniform(0.08, 0.35)
        color = np.clip(base_intensity + obj_rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
        img[:, mask] = color[:, None]
        occupied |= mask
        boxes.append(placed)

    img = np.clip(img * params.luminance, 0.0, 1.0).astype(np.float32)
    return AnnotatedImage(image=Tensor(img), boxes=boxes, camera_id=params.name)


def synth_dataset(params: SceneDomainParams, n_images: int, rng_seed: int) -> list[AnnotatedImage]:
    """n scenes with per-image seeds derived from rng_seed."""
    return [synth_scene(params, rng_seed * 100_003 + i) for i in range(n_images)]


# ---------------------------------------------------------------------------
# splits and batching
# ---------------------------------------------------------------------------

def make_split(images, mode: str, holdout, rng_seed: int = 0):
    """Partition into (train, val).

    mode "random": holdout is a fraction; a seeded shuffle is split at
    round(fraction * n). mode "per_camera": holdout is a camera-id
    collection whose images all go to val.
    """
    if mode == "random":
        frac = float(holdout)
        if not 0.0 <= frac <= 1.0:
            raise ConfigError(f"random split fraction must be in [0, 1], got {frac}")
        order = np.random.default_rng(np.random.SeedSequence([rng_seed, 7])).permutation(len(images))
        n_val = int(round(frac * len(images)))
        val = [images[i] for i in order[:n_val]]
        train = [images[i] for i in order[n_val:]]
        return train, val
    if mode == "per_camera":
        available = {im.camera_id for im in images}
        if len(available) < 2:
            raise ConfigError(f"per_camera split needs >= 2 distinct cameras, found {sorted(available)}")
        holdout_set = set(holdout)
        missing = holdout_set - available
        if missing:
            raise ConfigError(
                f"holdout cameras {sorted(missing)} not in dataset; available: {sorted(available)}")
        val = [im for im in images if im.camera_id in holdout_set]
        train = [im for im in images if im.camera_id not in holdout_set]
        return train, val
    raise ConfigError(f"unknown split mode '{mode}' (expected 'random' or 'per_camera')")


@dataclass
class Batch:
    source: list[AnnotatedImage]
    source_gt: list[DensityMap]
    target: list[AnnotatedImage]


def batch_iter(source, target, batch_size: int, rng_seed: int, epoch: int,
               kernel_spec: DensityKernelSpec | None = None,
               density_cache: dict | None = None):
    """Yield per-step batches: labeled source plus unlabeled target images.

    Source order is a seeded permutation per (rng_seed, epoch) and every
    source image appears exactly once per epoch; the target side follows its
    own permutation and cycles when shorter than the source side. Ground
    truth density maps come from generate_density_map (optionally cached by
    image identity across epochs).
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if not source or not target:
        raise ConfigError("batch_iter needs non-empty source and target lists")
    spec = kernel_spec or DensityKernelSpec()
    cache = density_cache if density_cache is not None else {}
    src_order = np.random.default_rng(np.random.SeedSequence([rng_seed, epoch, 1])).permutation(len(source))
    tgt_order = np.random.default_rng(np.random.SeedSequence([rng_seed, epoch, 2])).permutation(len(target))
    tgt_pos = 0
    for start in range(0, len(source), batch_size):
        src_batch = [source[i] for i in src_order[start:start + batch_size]]
        gt_batch = []
        for im in src_batch:
            key = id(im)
            if key not in cache:
                _, h, w = im.image.shape
                cache[key] = generate_density_map(im.boxes, h, w, spec)
            gt_batch.append(cache[key])
        tgt_batch = []
        for _ in range(len(src_batch)):
            tgt_batch.append(target[tgt_order[tgt_pos % len(target)]])
            tgt_pos += 1
        yield Batch(src_batch, gt_batch, tgt_batch)


def source_only_batch_iter(source, batch_size: int, rng_seed: int, epoch: int,
                           kernel_spec: DensityKernelSpec | None = None,
                           density_cache: dict | None = None):
    """batch_iter for supervised-only training (no target domain)."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if not source:
        raise ConfigError("source list is empty")
    spec = kernel_spec or DensityKernelSpec()
    cache = density_cache if density_cache is not None else {}
    src_order = np.random.default_rng(np.random.SeedSequence([rng_seed, epoch, 1])).permutation(len(source))
    for start in range(0, len(source), batch_size):
        src_batch = [source[i] for i in src_order[start:start + batch_size]]
        gt_batch = []
        for im in src_batch:
            key = id(im)
            if key not in cache:
                _, h, w = im.image.shape
                cache[key] = generate_density_map(im.boxes, h, w, spec)
            gt_batch.append(cache[key])
        yield Batch(src_batch, gt_batch, [])
