"""
Synthetic (image, fine mask, coarse mask) triplets.

Scenes are painted shapes on a class-0 background. Coarse masks emulate
polygon annotations that may only cover a single class: every region is
eroded, some regions are left unlabeled, and a few regions bleed a thin
mislabeled band over their boundary.
"""

from __future__ import annotations

import colorsys
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage import draw

from errors import ConfigError, ParseError, ShapeError
from mask_util import IGNORE, LabelMask, labeled_precision
from pnm_io import read_pgm, read_ppm, write_pgm, write_ppm

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("rectangle", "ellipse", "polygon")
SCALE_RANGE = (0.5, 2.0)
ROTATION_RANGE = (-10.0, 10.0)
MANIFEST_NAME = "manifest.json"
DATASET_FORMAT = "detailer-dataset-v1"


@dataclass(eq=False)
class SampleTriplet:
    """
    One dataset entry: image (3, H, W) with values in [0, 1] (normalised
    after augmentation), the fine mask and the coarse mask.
    """

    image: np.ndarray
    fine: LabelMask
    coarse: LabelMask | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ShapeError(f"image must be (3, H, W), got {self.image.shape}")
        if self.fine.shape != self.image.shape[1:]:
            raise ShapeError(f"fine mask {self.fine.shape} does not match image {self.image.shape}")
        if self.coarse is not None and self.coarse.shape != self.image.shape[1:]:
            raise ShapeError(f"coarse mask {self.coarse.shape} does not match image {self.image.shape}")

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]

    def with_fine(self, fine: LabelMask) -> SampleTriplet:
        """ Same image and coarse mask with a different supervision target. """
        return SampleTriplet(self.image, fine, self.coarse)


@dataclass
class SceneSpec:
    num_classes: int = 5
    height: int = 48
    width: int = 48
    min_shapes: int = 3
    max_shapes: int = 8
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    class_colors: tuple[tuple[float, float, float], ...] | None = None
    color_jitter: float = 0.15
    noise_sigma: float = 0.08
    min_size: float = 0.12
    max_size: float = 0.4
    seed: int = 0

    def __post_init__(self):
        self.shape_kinds = tuple(self.shape_kinds)
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"canvas must be at least 1x1, got {self.height}x{self.width}")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ConfigError(f"shape count range [{self.min_shapes}, {self.max_shapes}] invalid")
        unknown = set(self.shape_kinds) - set(SHAPE_KINDS)
        if not self.shape_kinds or unknown:
            raise ConfigError(f"shape kinds must be drawn from {SHAPE_KINDS}, got {self.shape_kinds}")
        if self.class_colors is None:
            self.class_colors = default_palette(self.num_classes)
        self.class_colors = tuple(tuple(float(v) for v in rgb) for rgb in self.class_colors)
        if len(self.class_colors) != self.num_classes:
            raise ConfigError(f"{len(self.class_colors)} class colors for {self.num_classes} classes")
        if any(not 0.0 <= v <= 1.0 for rgb in self.class_colors for v in rgb):
            raise ConfigError("class colors must lie in [0, 1]")
        if self.color_jitter < 0 or self.noise_sigma < 0:
            raise ConfigError("color_jitter and noise_sigma must be >= 0")
        if not 0 < self.min_size <= self.max_size:
            raise ConfigError(f"shape size range [{self.min_size}, {self.max_size}] invalid")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> SceneSpec:
        return cls(**values)


@dataclass
class CoarsenSpec:
    erosion_radius: int = 2
    drop_prob: float = 0.15
    bleed_prob: float = 0.2
    bleed_width: int = 1
    precision_target: float = 0.97
    seed: int = 0

    def __post_init__(self):
        if self.erosion_radius < 0 or self.bleed_width < 0:
            raise ConfigError("erosion_radius and bleed_width must be >= 0")
        for name in ("drop_prob", "bleed_prob", "precision_target"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> CoarsenSpec:
        return cls(**values)


def default_palette(num_classes: int) -> tuple[tuple[float, float, float], ...]:
    """ Evenly spaced hues; class 0 (background) gets the first one. """
    return tuple(colorsys.hls_to_rgb(k / num_classes, 0.5, 0.55) for k in range(num_classes))


def _shape_pixels(kind: str, rng: np.random.Generator, spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    # all draws are canvas-relative so one seed paints the same scene at any resolution
    height, width = spec.height, spec.width
    side = min(height, width)
    cy, cx = rng.random(2) * (height, width)
    ry, rx = rng.uniform(spec.min_size, spec.max_size, 2) * side / 2
    if kind == "rectangle":
        rows = np.array([cy - ry, cy - ry, cy + ry, cy + ry])
        cols = np.array([cx - rx, cx + rx, cx + rx, cx - rx])
        return draw.polygon(rows, cols, shape=(height, width))
    if kind == "ellipse":
        rotation = rng.uniform(-np.pi, np.pi)
        return draw.ellipse(cy, cx, max(ry, 0.5), max(rx, 0.5), shape=(height, width), rotation=rotation)
    vertices = rng.integers(3, 8)
    angles = np.sort(rng.uniform(0, 2 * np.pi, vertices))
    radii = rng.uniform(0.5, 1.0, vertices)
    rows = cy + ry * radii * np.sin(angles)
    cols = cx + rx * radii * np.cos(angles)
    return draw.polygon(rows, cols, shape=(height, width))


def generate_scene(spec: SceneSpec, num_shapes: int | None = None,
                   rng: np.random.Generator | None = None) -> tuple[np.ndarray, LabelMask]:
    """
    Paint a seeded scene.

    Args:
        - spec: the scene description
        - num_shapes: override of the sampled shape count (0 gives a bare background)
        - rng: generator to draw from; defaults to one seeded with spec.seed

    Returns:
        - (image (3, H, W) float32 in [0, 1], fine LabelMask without ignore pixels)
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    palette = np.asarray(spec.class_colors)
    fine = np.zeros((spec.height, spec.width), dtype=np.uint8)
    colors = np.empty((spec.height, spec.width, 3))
    colors[...] = np.clip(palette[0] + rng.normal(0, spec.color_jitter, 3), 0, 1)

    if num_shapes is None:
        num_shapes = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    for _ in range(num_shapes):
        cls = int(rng.integers(1, spec.num_classes))
        kind = spec.shape_kinds[int(rng.integers(len(spec.shape_kinds)))]
        rows, cols = _shape_pixels(kind, rng, spec)
        fine[rows, cols] = cls
        colors[rows, cols] = np.clip(palette[cls] + rng.normal(0, spec.color_jitter, 3), 0, 1)

    image = np.clip(colors + rng.normal(0, spec.noise_sigma, colors.shape), 0, 1)
    return image.transpose(2, 0, 1).astype(np.float32), LabelMask(fine)


def coarsen(fine: LabelMask, spec: CoarsenSpec, rng: np.random.Generator | None = None) -> LabelMask:
    """
    Simulate a coarse polygon annotation of a fine mask.

    Each 4-connected single-class region is eroded by spec.erosion_radius
    (3x3 structuring element). The canvas border does not erode, so a region
    touching the edge keeps labels along it. Dropped regions stay ignore, and
    bleeding regions grow radius + bleed_width pixels into the ignore band,
    mislabeling whatever lies past their true boundary. Bleed bands are
    reverted last-first until labeled precision meets spec.precision_target.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    labels = fine.labels
    structure = np.ones((3, 3), dtype=bool)
    coarse = np.full(labels.shape, IGNORE, dtype=np.uint8)
    bleeders = []

    for cls in np.unique(labels):
        if cls == IGNORE:
            continue
        components, count = ndimage.label(labels == cls)
        for index in range(1, count + 1):
            region = components == index
            dropped = rng.random() < spec.drop_prob
            bleeds = rng.random() < spec.bleed_prob
            if dropped:
                continue
            if spec.erosion_radius > 0:
                region = ndimage.binary_erosion(region, structure, iterations=spec.erosion_radius, border_value=1)
            coarse[region] = cls
            if bleeds and region.any():
                bleeders.append((region, int(cls)))

    bands = []
    grow = spec.erosion_radius + spec.bleed_width
    if grow > 0:
        for region, cls in bleeders:
            band = ndimage.binary_dilation(region, structure, iterations=grow) & (coarse == IGNORE)
            coarse[band] = cls
            bands.append(band)

    result = LabelMask(coarse)
    while bands and labeled_precision(result, fine) < spec.precision_target:
        result.labels[bands.pop()] = IGNORE
    return result


def generate_dataset(scene: SceneSpec, coarse_spec: CoarsenSpec, count: int, seed: int) -> list[SampleTriplet]:
    """ count triplets; triplet i is seeded from (seed, scene.seed, coarse_spec.seed, i). """
    triplets = []
    for i in range(count):
        sequence = np.random.SeedSequence([seed, scene.seed, coarse_spec.seed, i])
        scene_rng, coarse_rng = (np.random.default_rng(s) for s in sequence.spawn(2))
        image, fine = generate_scene(scene, rng=scene_rng)
        triplets.append(SampleTriplet(image, fine, coarsen(fine, coarse_spec, rng=coarse_rng)))
    logger.debug("generated %d triplets at %dx%d (seed %d)", count, scene.height, scene.width, seed)
    return triplets


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]


def channel_stats(triplets: list[SampleTriplet]) -> ChannelStats:
    """ Per-channel mean / std over every pixel of every image. """
    pixels = np.concatenate([t.image.reshape(3, -1) for t in triplets], axis=1).astype(np.float64)
    std = np.maximum(pixels.std(axis=1), 1e-6)
    return ChannelStats(tuple(float(v) for v in pixels.mean(axis=1)), tuple(float(v) for v in std))


def normalize_image(image: np.ndarray, stats: ChannelStats | None) -> np.ndarray:
    if stats is None:
        return image.astype(np.float32)
    mean = np.asarray(stats.mean, dtype=np.float32)[:, None, None]
    std = np.asarray(stats.std, dtype=np.float32)[:, None, None]
    return ((image - mean) / std).astype(np.float32)


@dataclass(frozen=True)
class AugmentParams:
    """ One geometric transform: scale, rotation (degrees), horizontal flip, crop offset in the scaled canvas. """

    scale: float = 1.0
    angle: float = 0.0
    flip: bool = False
    offset_y: int = 0
    offset_x: int = 0


def _crop_offset(rng: np.random.Generator, size: int, crop: int) -> int:
    # negative offsets pad the canvas inside a crop larger than it
    low, high = min(0, size - crop), max(0, size - crop)
    return int(rng.integers(low, high + 1))


def _scaled_size(height: int, width: int, scale: float) -> tuple[int, int]:
    return max(1, round(height * scale)), max(1, round(width * scale))


def sample_augment_params(rng: np.random.Generator, height: int, width: int, crop: int) -> AugmentParams:
    scale = float(rng.uniform(*SCALE_RANGE))
    angle = float(rng.uniform(*ROTATION_RANGE))
    flip = bool(rng.random() < 0.5)
    scaled_h, scaled_w = _scaled_size(height, width, scale)
    return AugmentParams(scale, angle, flip, _crop_offset(rng, scaled_h, crop), _crop_offset(rng, scaled_w, crop))


def _source_transform(params: AugmentParams, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """ Affine map from crop pixel coordinates back to source pixel coordinates. """
    scaled_h, scaled_w = _scaled_size(height, width, params.scale)
    flip = np.diag([1.0, -1.0 if params.flip else 1.0])
    shift = np.array([params.offset_y, (scaled_w - 1 - params.offset_x) if params.flip else params.offset_x],
                     dtype=np.float64)
    theta = np.deg2rad(params.angle)
    rotate = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    center = np.array([(scaled_h - 1) / 2, (scaled_w - 1) / 2])
    unscale = np.diag([height / scaled_h, width / scaled_w])
    matrix = unscale @ rotate @ flip
    offset = unscale @ (rotate @ (shift - center) + center + 0.5) - 0.5
    return matrix, offset


def augment(triplet: SampleTriplet, crop: int, seed: int, norm: ChannelStats | None = None,
            params: AugmentParams | None = None) -> SampleTriplet:
    """
    Apply one random geometric transform identically to image and masks.

    The image is resampled bilinearly (outside the canvas -> 0), masks by
    nearest neighbour (outside the canvas -> ignore), then the image is
    normalised with norm when given.

    Args:
        - triplet: source triplet
        - crop: output side length
        - seed: seeds the transform sample when params is None
        - norm: dataset channel statistics
        - params: an explicit transform to replay instead of sampling one

    Returns:
        - SampleTriplet with crop x crop image and masks
    """
    if params is None:
        params = sample_augment_params(np.random.default_rng(seed), triplet.height, triplet.width, crop)
    matrix, offset = _source_transform(params, triplet.height, triplet.width)
    out_shape = (crop, crop)

    image = np.stack([
        ndimage.affine_transform(channel.astype(np.float64), matrix, offset, output_shape=out_shape,
                                 order=1, mode="constant", cval=0.0)
        for channel in triplet.image
    ])

    def warp(mask: LabelMask | None) -> LabelMask | None:
        if mask is None:
            return None
        return LabelMask(ndimage.affine_transform(mask.labels, matrix, offset, output_shape=out_shape,
                                                  order=0, mode="constant", cval=IGNORE))

    return SampleTriplet(normalize_image(image, norm), warp(triplet.fine), warp(triplet.coarse))


def _image_to_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def write_dataset(directory, triplets: list[SampleTriplet], num_classes: int,
                  scene: SceneSpec | None = None, coarse_spec: CoarsenSpec | None = None,
                  report: dict | None = None) -> Path:
    """
    Write {id}_img.ppm, {id}_fine.pgm, {id}_coarse.pgm per triplet plus manifest.json.

    Returns:
        - the manifest path
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, triplet in enumerate(triplets):
        ident = f"{i:04d}"
        entry = {"id": ident, "image": f"{ident}_img.ppm", "fine": f"{ident}_fine.pgm", "coarse": None}
        write_ppm(directory / entry["image"], _image_to_bytes(triplet.image))
        write_pgm(directory / entry["fine"], triplet.fine.labels)
        if triplet.coarse is not None:
            entry["coarse"] = f"{ident}_coarse.pgm"
            write_pgm(directory / entry["coarse"], triplet.coarse.labels)
        entries.append(entry)
    manifest = {
        "format": DATASET_FORMAT,
        "num_classes": num_classes,
        "ignore": IGNORE,
        "scene_spec": None if scene is None else scene.to_dict(),
        "coarsen_spec": None if coarse_spec is None else coarse_spec.to_dict(),
        "report": report or {},
        "triplets": entries,
    }
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    logger.info("wrote %d triplets to %s", len(triplets), directory)
    return path


def read_manifest(directory) -> dict:
    """
    Load and check manifest.json: the format tag, an integer num_classes and
    a triplets list whose entries name their id, image and fine mask.
    """
    path = Path(directory) / MANIFEST_NAME
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ParseError(path, 0, "dataset manifest not found") from None
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as err:
        raise ParseError(path, err.pos, err.msg) from None
    if not isinstance(manifest, dict) or manifest.get("format") != DATASET_FORMAT:
        raise ParseError(path, 0, f"not a {DATASET_FORMAT} manifest")
    num_classes = manifest.get("num_classes")
    if isinstance(num_classes, bool) or not isinstance(num_classes, int) or num_classes < 1:
        raise ParseError(path, 0, f"'num_classes' must be a positive integer, got {num_classes!r}")
    if not isinstance(manifest.get("triplets"), list):
        raise ParseError(path, 0, "'triplets' must be a list")
    for i, entry in enumerate(manifest["triplets"]):
        if not isinstance(entry, dict):
            raise ParseError(path, 0, f"triplet {i} is not an object")
        for key in ("id", "image", "fine"):
            if not isinstance(entry.get(key), str):
                raise ParseError(path, 0, f"triplet {i} is missing the string field '{key}'")
        if entry.get("coarse") is not None and not isinstance(entry["coarse"], str):
            raise ParseError(path, 0, f"triplet {i} has a non-string 'coarse' field")
    return manifest


def read_dataset(directory) -> list[SampleTriplet]:
    """
    Read a dataset written by write_dataset.

    Raises:
        - ParseError: missing or malformed manifest / image / mask, naming the file
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    triplets = []
    for entry in manifest["triplets"]:
        image = read_ppm(directory / entry["image"]).transpose(2, 0, 1).astype(np.float32) / 255.0
        fine = LabelMask(read_pgm(directory / entry["fine"]))
        coarse = None if entry.get("coarse") is None else LabelMask(read_pgm(directory / entry["coarse"]))
        try:
            triplets.append(SampleTriplet(image, fine, coarse))
        except ShapeError as err:
            raise ParseError(directory / entry["fine"], 0, str(err)) from None
    return triplets


def write_mask_dir(directory, ids: list[str], masks: list[LabelMask], suffix: str = "detailed") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for ident, mask in zip(ids, masks):
        write_pgm(directory / f"{ident}_{suffix}.pgm", mask.labels)
