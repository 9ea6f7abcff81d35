"""Synthetic shape-scene corpus with a planted exclusive co-occurrence pair.

Scenes are flat-colored shapes on a uniform gray background. Two instances are
special: a yellow circle and a blue triangle, which either appear together or
not at all. All other objects are distractors drawn uniformly over the five
shape classes, colored by a fixed per-class palette chosen so that no
distractor is ever a yellow circle or a blue triangle.

Everything is a pure function of (spec, seed); images round-trip losslessly
through 8-bit PNG because all colors are defined on the 0..255 grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .rle import RleMask, rle_area, rle_decode, rle_encode

SHAPE_CLASSES = ("circle", "triangle", "square", "cross", "hexagon")

PAIR_CLASSES = ("circle", "triangle")  # the exclusive co-occurrence pair


def _rgb(r: int, g: int, b: int) -> tuple[float, float, float]:
    return (r / 255.0, g / 255.0, b / 255.0)


BACKGROUND = _rgb(128, 128, 128)

# Colors of the two pair instances.
PAIR_COLORS = {"circle": _rgb(255, 255, 0), "triangle": _rgb(0, 0, 255)}

# Distractor palette, one fixed color per class. Distractor circles are red and
# distractor triangles green so the pair colors stay exclusive to the pair.
DISTRACTOR_COLORS = {
    "circle": _rgb(230, 25, 25),
    "triangle": _rgb(0, 190, 0),
    "square": _rgb(230, 0, 230),
    "cross": _rgb(0, 215, 215),
    "hexagon": _rgb(255, 255, 255),
}

# Full palette used by evaluation judges for nearest-color lookup.
PALETTE = {
    "yellow": PAIR_COLORS["circle"],
    "blue": PAIR_COLORS["triangle"],
    "red": DISTRACTOR_COLORS["circle"],
    "green": DISTRACTOR_COLORS["triangle"],
    "magenta": DISTRACTOR_COLORS["square"],
    "cyan": DISTRACTOR_COLORS["cross"],
    "white": DISTRACTOR_COLORS["hexagon"],
}

GENERATOR_VERSION = "1"

# Minimum pixel gap kept between objects so they stay separable by
# connected-component labeling.
SEPARATION_PX = 2

MAX_PLACE_ATTEMPTS = 1000


class PlacementError(RuntimeError):
    """Raised when an object cannot be placed without overlap."""


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple[int, int] = (64, 64)
    object_count_range: tuple[int, int] = (2, 5)
    pair_probability: float = 0.5
    color_table: dict = field(default_factory=lambda: dict(DISTRACTOR_COLORS))
    # When set, the pair's colors are re-drawn per scene (consistently for
    # both members) instead of the fixed yellow/blue.
    color_randomize: bool = False

    def validate(self) -> None:
        h, w = self.image_size
        if h < 32 or w < 32:
            raise ValueError(f"image_size must be at least 32x32, got {self.image_size}")
        lo, hi = self.object_count_range
        if not (0 <= lo <= hi <= 8):
            raise ValueError(f"object_count_range must lie within [0, 8], got {self.object_count_range}")
        if not (0.0 <= self.pair_probability <= 1.0):
            raise ValueError(f"pair_probability must be in [0, 1], got {self.pair_probability}")


@dataclass
class ObjectAnnotation:
    id: int
    shape: str | None
    color: tuple[float, float, float]
    coarse_mask: RleMask
    bbox: tuple[int, int, int, int]  # x, y, w, h
    pixel_count: int

    def mask_array(self) -> np.ndarray:
        return rle_decode(self.coarse_mask)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "shape": self.shape,
            "color": list(self.color),
            "bbox": list(self.bbox),
            "rle": self.coarse_mask.to_json(),
        }

    @staticmethod
    def from_json(obj: dict) -> "ObjectAnnotation":
        rle = RleMask.from_json(obj["rle"])
        return ObjectAnnotation(
            id=int(obj["id"]),
            shape=obj["shape"],
            color=tuple(obj["color"]),
            coarse_mask=rle,
            bbox=tuple(int(v) for v in obj["bbox"]),
            pixel_count=rle_area(rle),
        )


@dataclass
class Scene:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    objects: list[ObjectAnnotation]
    has_context_pair: bool
    seed: int


@dataclass
class DatasetManifest:
    image_size: tuple[int, int]
    generator_version: str
    entries: list[dict]

    def save(self, path: Path | str) -> None:
        payload = {
            "image_size": list(self.image_size),
            "generator_version": self.generator_version,
            "entries": self.entries,
        }
        Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))

    @staticmethod
    def load(path: Path | str) -> "DatasetManifest":
        obj = json.loads(Path(path).read_text())
        return DatasetManifest(
            image_size=tuple(obj["image_size"]),
            generator_version=obj["generator_version"],
            entries=obj["entries"],
        )


# ---------------------------------------------------------------------------
# Shape rasterizers
# ---------------------------------------------------------------------------


def shape_tile(shape: str, size: int) -> np.ndarray:
    """Boolean size x size tile of the shape, sampled at pixel centers."""
    u = (np.arange(size) + 0.5) / size
    uu, vv = np.meshgrid(u, u)  # uu: columns, vv: rows
    if shape == "circle":
        return (uu - 0.5) ** 2 + (vv - 0.5) ** 2 <= 0.25
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "triangle":
        # Apex at top center, base along the bottom edge.
        return vv >= 2.0 * np.abs(uu - 0.5)
    if shape == "cross":
        third = 1.0 / 6.0
        return (np.abs(uu - 0.5) <= third) | (np.abs(vv - 0.5) <= third)
    if shape == "hexagon":
        return np.abs(vv - 0.5) <= np.minimum(0.5, 1.0 - 2.0 * np.abs(uu - 0.5))
    raise ValueError(f"unknown shape class {shape!r}")


def _tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    y0, y1 = int(rows[0]), int(rows[-1])
    x0, x1 = int(cols[0]), int(cols[-1])
    return (x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def _annotation_from_mask(obj_id: int, shape: str | None, color, mask: np.ndarray) -> ObjectAnnotation:
    return ObjectAnnotation(
        id=obj_id,
        shape=shape,
        color=tuple(color),
        coarse_mask=rle_encode(mask),
        bbox=_tight_bbox(mask),
        pixel_count=int(mask.sum()),
    )


# ---------------------------------------------------------------------------
# Scene sampling
# ---------------------------------------------------------------------------


def _place_object(rng, spec: SceneSpec, blocked: np.ndarray, shape: str) -> np.ndarray:
    """Rejection-sample a placement; returns the object's full-image mask."""
    h, w = spec.image_size
    side = min(h, w)
    lo, hi = max(4, side // 8), side // 4
    for _ in range(MAX_PLACE_ATTEMPTS):
        size = int(rng.integers(lo, hi + 1))
        x0 = int(rng.integers(0, w - size + 1))
        y0 = int(rng.integers(0, h - size + 1))
        tile = shape_tile(shape, size)
        window = blocked[y0 : y0 + size, x0 : x0 + size]
        if not (tile & window).any():
            mask = np.zeros((h, w), dtype=bool)
            mask[y0 : y0 + size, x0 : x0 + size] = tile
            return mask
    raise PlacementError(
        f"could not place a {shape} after {MAX_PLACE_ATTEMPTS} attempts; "
        f"image {h}x{w} is too crowded for the requested object count"
    )


def sample_scene(spec: SceneSpec, seed: int) -> Scene:
    """Draw one scene. Identical (spec, seed) gives a bit-identical Scene."""
    spec.validate()
    rng = np.random.default_rng(seed)
    h, w = spec.image_size

    count = int(rng.integers(spec.object_count_range[0], spec.object_count_range[1] + 1))
    has_pair = bool(rng.random() < spec.pair_probability) and count >= 2

    pair_colors = dict(PAIR_COLORS)
    if spec.color_randomize:
        names = sorted(PALETTE)
        pair_colors["circle"] = PALETTE[names[int(rng.integers(len(names)))]]
        pair_colors["triangle"] = PALETTE[names[int(rng.integers(len(names)))]]

    # 'blocked' carries already-placed masks dilated by the separation margin.
    blocked = np.zeros((h, w), dtype=bool)
    objects: list[ObjectAnnotation] = []

    def add(shape: str, color) -> None:
        mask = _place_object(rng, spec, blocked, shape)
        objects.append(_annotation_from_mask(len(objects), shape, color, mask))
        blocked[:] |= ndimage.binary_dilation(mask, iterations=SEPARATION_PX)

    if has_pair:
        add("circle", pair_colors["circle"])
        add("triangle", pair_colors["triangle"])
    for _ in range(count - 2 * has_pair):
        shape = SHAPE_CLASSES[int(rng.integers(len(SHAPE_CLASSES)))]
        add(shape, spec.color_table[shape])

    scene = Scene(image=None, objects=objects, has_context_pair=has_pair, seed=seed)
    scene.image = render_scene(scene, image_size=spec.image_size)
    return scene


def render_scene(scene: Scene, image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Rasterize: uniform background, each object painted in its own color.

    The painted pixel set of each object equals its coarse mask exactly.
    """
    if image_size is None:
        image_size = scene.objects[0].coarse_mask.size if scene.objects else scene.image.shape[:2]
    h, w = image_size
    img = np.empty((h, w, 3), dtype=np.float32)
    img[:] = BACKGROUND
    for obj in scene.objects:
        img[obj.mask_array()] = np.asarray(obj.color, dtype=np.float32)
    return img


def derive_seed(master_seed: int, *indices: int) -> int:
    """Per-item seed splitting rule used by all dataset generators."""
    return int(np.random.SeedSequence([master_seed, *indices]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Image file IO
# ---------------------------------------------------------------------------


def save_image(image: np.ndarray, path: Path | str) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(str(path), format="PNG")


def load_image(path: Path | str) -> np.ndarray:
    with Image.open(str(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------


def generate_dataset(spec: SceneSpec, n: int, seed: int, out_dir: Path | str) -> DatasetManifest:
    """Write n scenes as PNGs plus manifest.json; returns the manifest.

    Scene i uses derive_seed(seed, i), so any scene can be regenerated alone.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        scene_seed = derive_seed(seed, i)
        scene = sample_scene(spec, scene_seed)
        rel = f"images/scene_{i:05d}.png"
        save_image(scene.image, out_dir / rel)
        entries.append(
            {
                "image_path": rel,
                "seed": scene_seed,
                "has_context_pair": scene.has_context_pair,
                "objects": [o.to_json() for o in scene.objects],
            }
        )
    manifest = DatasetManifest(image_size=spec.image_size, generator_version=GENERATOR_VERSION, entries=entries)
    manifest.save(out_dir / "manifest.json")
    return manifest


def foreground_mask(scene: Scene) -> np.ndarray:
    """Union of all object masks."""
    h, w = scene.image.shape[:2]
    out = np.zeros((h, w), dtype=bool)
    for obj in scene.objects:
        out |= obj.mask_array()
    return out


def compose_prompt_grid(example: Scene, query: Scene) -> tuple[np.ndarray, list[ObjectAnnotation], RleMask]:
    """Assemble one 2x2 prompt canvas.

    Quadrants: top-left example scene, top-right its foreground mask rendered
    white-on-black, bottom-left query scene, bottom-right the query mask (the
    prediction target). Returns (canvas, canvas annotations, bottom-right gt).
    """
    h, w = example.image.shape[:2]
    canvas = np.zeros((2 * h, 2 * w, 3), dtype=np.float32)
    ex_fg = foreground_mask(example)
    q_fg = foreground_mask(query)
    canvas[:h, :w] = example.image
    canvas[:h, w:] = ex_fg[..., None].astype(np.float32)
    canvas[h:, :w] = query.image
    canvas[h:, w:] = q_fg[..., None].astype(np.float32)

    annotations: list[ObjectAnnotation] = []

    def shifted(objs: list[ObjectAnnotation], dy: int, dx: int, white: bool) -> None:
        for obj in objs:
            mask = np.zeros((2 * h, 2 * w), dtype=bool)
            mask[dy : dy + h, dx : dx + w] = obj.mask_array()
            color = (1.0, 1.0, 1.0) if white else obj.color
            annotations.append(_annotation_from_mask(len(annotations), obj.shape, color, mask))

    shifted(example.objects, 0, 0, white=False)
    shifted(example.objects, 0, w, white=True)
    shifted(query.objects, h, 0, white=False)
    shifted(query.objects, h, w, white=True)
    return canvas, annotations, rle_encode(q_fg)


def generate_prompt_grid_dataset(spec: SceneSpec, n: int, seed: int, out_dir: Path | str) -> DatasetManifest:
    """Write n prompt-grid canvases (side = 2x scene side) plus manifest.

    The bottom-right ground-truth quadrant is stored separately per entry as
    'gt_quadrant' so evaluation never has to re-derive it from pixels.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    h, w = spec.image_size
    entries = []
    for i in range(n):
        example = sample_scene(spec, derive_seed(seed, i, 0))
        query = sample_scene(spec, derive_seed(seed, i, 1))
        canvas, annotations, gt = compose_prompt_grid(example, query)
        rel = f"images/grid_{i:05d}.png"
        save_image(canvas, out_dir / rel)
        entries.append(
            {
                "image_path": rel,
                "seed": derive_seed(seed, i, 0),
                "has_context_pair": False,
                "objects": [o.to_json() for o in annotations],
                "gt_quadrant": gt.to_json(),
            }
        )
    manifest = DatasetManifest(image_size=(2 * h, 2 * w), generator_version=GENERATOR_VERSION, entries=entries)
    manifest.save(out_dir / "manifest.json")
    return manifest


def pair_scene_spec(spec: SceneSpec) -> SceneSpec:
    """Spec variant producing scenes that always contain the context pair."""
    return replace(spec, pair_probability=1.0)
