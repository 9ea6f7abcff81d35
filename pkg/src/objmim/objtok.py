"""Tokenization and mask planning.

Patchification splits an image into non-overlapping c x c patches in row-major
order. Mask plans decide which patches are hidden: either a uniform random
selection at a fixed ratio, or whole objects (coarse masks expanded to
patch-aligned regions) plus random top-up patches so every image in a batch
hides exactly the same number of patches.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .rle import rle_decode, rle_encode
from .scenegen import ObjectAnnotation, _annotation_from_mask, load_image

# 4-connectivity structure for component labeling.
_CONN4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class PatchGrid:
    patch_size: int
    grid_shape: tuple[int, int]  # (H/c, W/c)
    patches: np.ndarray  # (M, c*c*3), row-major patch order

    @property
    def M(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]


def patchify(image: np.ndarray, c: int) -> PatchGrid:
    image = np.asarray(image)
    h, w = image.shape[:2]
    if h % c or w % c:
        raise ValueError(f"image size {h}x{w} not divisible by patch size {c}")
    gh, gw = h // c, w // c
    patches = (
        image.reshape(gh, c, gw, c, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, c * c * 3)
    )
    return PatchGrid(patch_size=c, grid_shape=(gh, gw), patches=patches)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    gh, gw = grid.grid_shape
    c = grid.patch_size
    if grid.patches.shape != (gh * gw, c * c * 3):
        raise ValueError(f"patch sequence has shape {grid.patches.shape}, expected {(gh * gw, c * c * 3)}")
    return (
        grid.patches.reshape(gh, gw, c, c, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * c, gw * c, 3)
    )


# ---------------------------------------------------------------------------
# Mask plans
# ---------------------------------------------------------------------------


@dataclass
class MaskPlan:
    m: np.ndarray  # bool (M,), True = masked
    visible_idx: np.ndarray  # sorted int indices
    masked_idx: np.ndarray  # sorted int indices
    object_patches: dict[int, np.ndarray]  # object id -> expanded patch set (masked objects)
    masked_object_ids: list[int]
    mode: str  # 'random_patch' or 'object'
    no_object_fallback: bool = False

    @property
    def M(self) -> int:
        return int(self.m.size)


def _plan_from_masked(M: int, masked: np.ndarray, mode: str, **kw) -> MaskPlan:
    m = np.zeros(M, dtype=bool)
    m[masked] = True
    return MaskPlan(
        m=m,
        visible_idx=np.flatnonzero(~m),
        masked_idx=np.flatnonzero(m),
        object_patches=kw.pop("object_patches", {}),
        masked_object_ids=kw.pop("masked_object_ids", []),
        mode=mode,
        **kw,
    )


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def plan_random_mask(M: int, r_patch: float, seed) -> MaskPlan:
    """Mask exactly floor(M * r_patch) patches, uniformly without replacement."""
    if not 0.0 < r_patch < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {r_patch}")
    rng = _as_rng(seed)
    n_masked = int(M * r_patch)
    masked = rng.permutation(M)[:n_masked]
    return _plan_from_masked(M, masked, mode="random_patch")


def expand_mask(obj: ObjectAnnotation, mode: str, c: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Patch indices covering the object under the given expansion mode.

    'exact' takes patches intersecting the coarse mask, 'bbox' every patch
    intersecting the bounding rectangle (always a superset), and 'combined'
    flips a fair coin per object between the two using the caller's generator.
    """
    h, w = obj.coarse_mask.size
    gh, gw = h // c, w // c
    if mode == "combined":
        if rng is None:
            raise ValueError("combined mode needs the plan's seeded generator")
        mode = "exact" if rng.random() < 0.5 else "bbox"
    if mode == "exact":
        mask = rle_decode(obj.coarse_mask)
        hit = mask.reshape(gh, c, gw, c).any(axis=(1, 3))
        return np.flatnonzero(hit.ravel())
    if mode == "bbox":
        x, y, bw, bh = obj.bbox
        rows = np.arange(y // c, (y + bh - 1) // c + 1)
        cols = np.arange(x // c, (x + bw - 1) // c + 1)
        return (rows[:, None] * gw + cols[None, :]).ravel()
    raise ValueError(f"unknown expansion mode {mode!r}")


def plan_object_mask(
    objects: list[ObjectAnnotation],
    M: int,
    r_obj: float,
    patch_cap: float,
    pixel_budget: int,
    mode: str,
    seed,
) -> MaskPlan:
    """Mask whole objects, then top up to exactly floor(M * patch_cap) patches.

    Objects are visited in seeded-shuffle order and selected until
    floor(len(objects) * r_obj) are masked, skipping any whose pixel count
    would blow the budget or whose expanded patches would push the masked
    count past the cap. Top-up patches are drawn uniformly from patches that
    touch no object at all (falling back to any still-visible patch only if
    that pool runs dry).
    """
    if not 0.0 < r_obj <= 1.0:
        raise ValueError(f"object ratio must lie in (0, 1], got {r_obj}")
    if not 0.0 < patch_cap < 1.0:
        raise ValueError(f"patch cap must lie in (0, 1), got {patch_cap}")
    rng = _as_rng(seed)
    if not objects:
        plan = plan_random_mask(M, patch_cap, rng)
        plan.no_object_fallback = True
        return plan

    h, w = objects[0].coarse_mask.size
    c = int(round((h * w / M) ** 0.5))
    cap_count = int(M * patch_cap)
    target = int(len(objects) * r_obj)

    m = np.zeros(M, dtype=bool)
    object_patches: dict[int, np.ndarray] = {}
    selected: list[int] = []
    budget_used = 0
    for i in rng.permutation(len(objects)):
        if len(selected) == target:
            break
        obj = objects[int(i)]
        patches = expand_mask(obj, mode, c, rng)
        if budget_used + obj.pixel_count > pixel_budget:
            continue
        trial = m.copy()
        trial[patches] = True
        if int(trial.sum()) > cap_count:
            continue
        m = trial
        budget_used += obj.pixel_count
        selected.append(obj.id)
        object_patches[obj.id] = patches

    # Fixed-length top-up keeps visible-sequence length constant across a batch.
    any_object = np.zeros(M, dtype=bool)
    for obj in objects:
        any_object[expand_mask(obj, "exact", c)] = True
    need = cap_count - int(m.sum())
    pool = np.flatnonzero(~m & ~any_object)
    pick = rng.permutation(pool.size)[:need]
    extra = pool[pick]
    if extra.size < need:
        rest = np.flatnonzero(~m)
        rest = rest[~np.isin(rest, extra)]
        extra = np.concatenate([extra, rest[rng.permutation(rest.size)[: need - extra.size]]])
    m[extra] = True

    return _plan_from_masked(
        M, np.flatnonzero(m), mode="object", object_patches=object_patches, masked_object_ids=selected
    )


def apply_mask(grid: PatchGrid, plan: MaskPlan) -> tuple[np.ndarray, MaskPlan]:
    """Visible patches in original order; masked pixel values never leave."""
    if plan.M != grid.M:
        raise ValueError(f"plan covers {plan.M} patches, grid has {grid.M}")
    return grid.patches[plan.visible_idx], plan


# ---------------------------------------------------------------------------
# Object extraction backends
# ---------------------------------------------------------------------------


@dataclass
class TokenizerBackend:
    kind: str = "oracle"  # 'oracle' or 'connected_components'
    quant_levels: int = 8
    min_area: int = 4
    segmentations: int = 0  # number of connected-component runs executed

    def config_json(self) -> dict:
        return {"kind": self.kind, "quant_levels": self.quant_levels, "min_area": self.min_area}


def extract_objects(
    image: np.ndarray,
    backend: TokenizerBackend,
    annotations: list[ObjectAnnotation] | None = None,
) -> list[ObjectAnnotation]:
    """Coarse per-object masks for one image.

    The oracle backend passes stored annotations through unchanged; the
    connected-components backend quantizes colors, treats the dominant color
    as background, and labels each remaining color 4-connectedly.
    """
    if backend.kind == "oracle":
        if annotations is None:
            raise ValueError("oracle backend requires annotations")
        return annotations
    if backend.kind != "connected_components":
        raise ValueError(f"unknown backend {backend.kind!r}")

    backend.segmentations += 1
    levels = backend.quant_levels
    quant = np.minimum((np.asarray(image) * levels).astype(np.int32), levels - 1)
    codes = (quant[..., 0] * levels + quant[..., 1]) * levels + quant[..., 2]
    values, counts = np.unique(codes, return_counts=True)
    background = values[np.argmax(counts)]

    out: list[ObjectAnnotation] = []
    for value in values:
        if value == background:
            continue
        labels, n = ndimage.label(codes == value, structure=_CONN4)
        for comp in range(1, n + 1):
            mask = labels == comp
            if int(mask.sum()) < backend.min_area:
                continue
            color = tuple(float(x) for x in np.asarray(image)[mask].mean(axis=0))
            out.append(_annotation_from_mask(len(out), None, color, mask))
    return out


# ---------------------------------------------------------------------------
# Mask preprocessing cache
# ---------------------------------------------------------------------------


def image_content_hash(path: Path | str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _cache_path(cache_dir: Path, image_hash: str) -> Path:
    return cache_dir / f"{image_hash}.json"


def _write_cache_entry(cache_dir: Path, image_hash: str, backend: TokenizerBackend, objects: list[ObjectAnnotation]) -> Path:
    payload = {
        "image_hash": image_hash,
        "backend": backend.config_json(),
        "objects": [o.to_json() for o in objects],
    }
    final = _cache_path(cache_dir, image_hash)
    tmp = final.with_suffix(f".tmp.{os.getpid()}")
    tmp.write_text(json.dumps(payload, sort_keys=True))
    tmp.rename(final)  # write-once-then-rename: readers never see torn files
    return final


def cached_extract(
    image_path: Path | str,
    backend: TokenizerBackend,
    cache_dir: Path | str | None,
    annotations: list[ObjectAnnotation] | None = None,
) -> list[ObjectAnnotation]:
    """Extract objects, consulting the on-disk cache when one is configured.

    Cache keys are content hashes of the source image, so edited images miss
    the cache and get re-segmented.
    """
    if backend.kind == "oracle":
        return extract_objects(None, backend, annotations)
    if cache_dir is None:
        return extract_objects(load_image(image_path), backend)
    cache_dir = Path(cache_dir)
    image_hash = image_content_hash(image_path)
    path = _cache_path(cache_dir, image_hash)
    if path.exists():
        payload = json.loads(path.read_text())
        if payload["backend"] == backend.config_json():
            return [ObjectAnnotation.from_json(o) for o in payload["objects"]]
    objects = extract_objects(load_image(image_path), backend)
    cache_dir.mkdir(parents=True, exist_ok=True)
    _write_cache_entry(cache_dir, image_hash, backend, objects)
    return objects


def preprocess_masks(manifest, backend: TokenizerBackend, cache_dir: Path | str, data_dir: Path | str) -> dict:
    """Segment every manifest image once and persist the masks as RLE JSON.

    Returns (and writes) a cache index mapping image paths to cache files.
    Training afterwards reads the cache instead of re-running segmentation.
    """
    cache_dir = Path(cache_dir)
    data_dir = Path(data_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for entry in manifest.entries:
        image_path = data_dir / entry["image_path"]
        image_hash = image_content_hash(image_path)
        if not _cache_path(cache_dir, image_hash).exists():
            if backend.kind == "oracle":
                objects = [ObjectAnnotation.from_json(o) for o in entry["objects"]]
            else:
                objects = extract_objects(load_image(image_path), backend)
            _write_cache_entry(cache_dir, image_hash, backend, objects)
        entries.append(
            {
                "image_path": entry["image_path"],
                "image_hash": image_hash,
                "cache_file": f"{image_hash}.json",
            }
        )
    index = {"backend": backend.config_json(), "entries": entries}
    (cache_dir / "cache_index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return index
