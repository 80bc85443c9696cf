"""Synthetic episodic segmentation benchmark.

Classes are (shape kind x texture family) combinations with a distinct base
color per class, drawn over a two-region background, so a tiny backbone can
tell them apart. The sampler deliberately supports planting unannotated
novel-class objects into training-scene backgrounds: that hidden-novel bias
is the failure mode the class-agnostic branch is meant to fix, and
`bias_rate` is the knob that controls it.

Everything here is a pure function of explicit inputs (rng included), so
episodes are bit-identical across runs for the same seed.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DegenerateEpisodeError,
    DegenerateSceneError,
    SamplingError,
)

SHAPE_KINDS = ("circle", "square", "triangle", "diamond")
TEXTURE_KINDS = ("solid", "hstripes", "vstripes", "checker")

MAX_SCENE_RETRIES = 60


# ---------------------------------------------------------------------------
# class splits


@dataclass(frozen=True)
class ClassSplit:
    num_classes: int
    fold: int
    base_ids: tuple[int, ...]
    novel_ids: tuple[int, ...]


def make_class_split(num_classes: int, fold: int, num_folds: int) -> ClassSplit:
    """Contiguous-block novel fold: fold f hides classes [f*C/F, (f+1)*C/F)."""
    if num_folds <= 0 or num_classes % num_folds != 0:
        raise ConfigError(f"num_folds={num_folds} must divide num_classes={num_classes}")
    if not (0 <= fold < num_folds):
        raise ConfigError(f"fold={fold} out of range [0, {num_folds})")
    per = num_classes // num_folds
    novel = tuple(range(fold * per, (fold + 1) * per))
    base = tuple(c for c in range(num_classes) if c not in novel)
    return ClassSplit(num_classes=num_classes, fold=fold, base_ids=base, novel_ids=novel)


# ---------------------------------------------------------------------------
# scene specification and rendering


@dataclass(frozen=True)
class ObjectSpec:
    class_id: int
    shape: str
    center: tuple[int, int]  # (row, col)
    radius: int
    phase: int  # texture offset, object-local variation
    gain: float = 1.0  # brightness jitter so instances of a class vary


@dataclass(frozen=True)
class BackgroundSpec:
    split_axis: int  # 0: horizontal bands, 1: vertical bands
    split_frac: float
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float]
    noise: float


@dataclass(frozen=True)
class SceneSpec:
    image_size: tuple[int, int]
    objects: tuple[ObjectSpec, ...]
    background: BackgroundSpec
    rng_seed: int

    def __post_init__(self) -> None:
        if len(self.objects) < 1:
            raise ConfigError("a scene needs at least one object")
        h, w = self.image_size
        for obj in self.objects:
            r, (cy, cx) = obj.radius, obj.center
            if r < 1 or cy - r < 0 or cx - r < 0 or cy + r > h - 1 or cx + r > w - 1:
                raise ConfigError(f"object {obj} does not fit inside {self.image_size}")
            if obj.shape not in SHAPE_KINDS:
                raise ConfigError(f"unknown shape {obj.shape!r}")

    def to_dict(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "rng_seed": self.rng_seed,
            "background": {
                "split_axis": self.background.split_axis,
                "split_frac": self.background.split_frac,
                "color_a": list(self.background.color_a),
                "color_b": list(self.background.color_b),
                "noise": self.background.noise,
            },
            "objects": [
                {
                    "class_id": o.class_id,
                    "shape": o.shape,
                    "center": list(o.center),
                    "radius": o.radius,
                    "phase": o.phase,
                    "gain": o.gain,
                }
                for o in self.objects
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        bg = d["background"]
        return cls(
            image_size=tuple(d["image_size"]),
            rng_seed=int(d["rng_seed"]),
            background=BackgroundSpec(
                split_axis=int(bg["split_axis"]),
                split_frac=float(bg["split_frac"]),
                color_a=tuple(bg["color_a"]),
                color_b=tuple(bg["color_b"]),
                noise=float(bg["noise"]),
            ),
            objects=tuple(
                ObjectSpec(
                    class_id=int(o["class_id"]),
                    shape=o["shape"],
                    center=tuple(o["center"]),
                    radius=int(o["radius"]),
                    phase=int(o["phase"]),
                    gain=float(o["gain"]),
                )
                for o in d["objects"]
            ),
        )


_HUES = (0.0, 0.2, 0.4, 0.6, 0.8)


def class_hue_index(class_id: int) -> int:
    return class_id % len(_HUES)


def class_style(class_id: int) -> tuple[str, str, tuple[float, float, float]]:
    """Deterministic (shape, texture, base color) for a class id.

    Classes tile a (hue x texture) Latin square: each of the 5 hues pairs
    with each of the 4 textures exactly once over 20 ids, and any contiguous
    fold of classes spans several hues AND several textures. Classes
    therefore share hues and share textures with other classes; telling them
    apart needs the combination, the same way real classes are only
    separable by feature combinations.
    """
    hue_idx = class_id % len(_HUES)
    texture = TEXTURE_KINDS[(hue_idx + class_id // len(_HUES)) % len(TEXTURE_KINDS)]
    shape = SHAPE_KINDS[class_id % len(SHAPE_KINDS)]
    color = colorsys.hsv_to_rgb(_HUES[hue_idx], 0.85, 0.95)
    return shape, texture, color


def shape_mask(shape: str, center: tuple[int, int], radius: int, h: int, w: int) -> np.ndarray:
    cy, cx = center
    yy, xx = np.ogrid[:h, :w]
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return (dy * dy + dx * dx) <= radius * radius
    if shape == "square":
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if shape == "diamond":
        return (np.abs(dy) + np.abs(dx)) <= radius
    if shape == "triangle":
        # apex up: half-width grows linearly from apex row to base row
        t = (dy + radius) / 2.0
        return (dy >= -radius) & (dy <= radius) & (np.abs(dx) <= t)
    raise ConfigError(f"unknown shape {shape!r}")


def _paint_texture(canvas: np.ndarray, footprint: np.ndarray, obj: ObjectSpec) -> None:
    _, texture, color = class_style(obj.class_id)
    h, w, _ = canvas.shape
    yy, xx = np.mgrid[:h, :w]
    color_arr = np.clip(obj.gain * np.asarray(color, dtype=np.float64), 0.0, 1.0)
    dark = 0.45 * color_arr
    if texture == "solid":
        pattern = np.ones((h, w), dtype=bool)
    elif texture == "hstripes":
        pattern = ((yy + obj.phase) // 2) % 2 == 0
    elif texture == "vstripes":
        pattern = ((xx + obj.phase) // 2) % 2 == 0
    else:  # checker
        pattern = ((yy // 2 + xx // 2 + obj.phase) % 2) == 0
    values = np.where(pattern[..., None], color_arr, dark)
    canvas[footprint] = values[footprint]


def render_scene(spec: SceneSpec) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Render a scene to (image, per-class masks).

    Later objects occlude earlier ones; an object with no visible pixels
    raises `DegenerateSceneError` so the sampler can re-roll. Masks of
    distinct classes are disjoint by construction (per-pixel ownership goes
    to the last object covering it).
    """
    h, w = spec.image_size
    rng = np.random.default_rng(spec.rng_seed)
    bg = spec.background
    base = np.empty((h, w, 3), dtype=np.float64)
    yy, xx = np.mgrid[:h, :w]
    pos = yy if bg.split_axis == 0 else xx
    extent = h if bg.split_axis == 0 else w
    in_a = pos < int(round(bg.split_frac * extent))
    base[in_a] = np.asarray(bg.color_a)
    base[~in_a] = np.asarray(bg.color_b)

    footprints = [shape_mask(o.shape, o.center, o.radius, h, w) for o in spec.objects]
    image = base
    owner = np.full((h, w), -1, dtype=np.int64)
    for i, (obj, fp) in enumerate(zip(spec.objects, footprints)):
        _paint_texture(image, fp, obj)
        owner[fp] = i

    per_class: dict[int, np.ndarray] = {}
    for i, obj in enumerate(spec.objects):
        visible = owner == i
        if not visible.any():
            raise DegenerateSceneError(f"object {i} (class {obj.class_id}) fully occluded")
        mask = per_class.setdefault(obj.class_id, np.zeros((h, w), dtype=np.uint8))
        mask |= visible.astype(np.uint8)

    image = image + rng.uniform(-bg.noise, bg.noise, size=(h, w, 3))
    np.clip(image, 0.0, 1.0, out=image)
    return image, per_class


# ---------------------------------------------------------------------------
# mask resampling


def _nn_index(n_out: int, n_in: int) -> np.ndarray:
    return (np.arange(n_out) * n_in) // n_out


def downsample_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbor downsample of a binary mask to (h, w).

    Raises `DegenerateEpisodeError` when the result is empty: the object was
    too small to survive at feature resolution and the episode should be
    resampled.
    """
    big_h, big_w = mask.shape
    if h > big_h or w > big_w:
        raise ContractError(f"cannot downsample {mask.shape} to larger ({h}, {w})")
    _check_binary(mask)
    out = mask[np.ix_(_nn_index(h, big_h), _nn_index(w, big_w))].astype(np.uint8)
    if out.sum() == 0:
        raise DegenerateEpisodeError("mask vanished at feature resolution")
    return out


def upsample_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbor upsample of a binary mask to (h, w)."""
    small_h, small_w = mask.shape
    return mask[np.ix_((np.arange(h) * small_h) // h, (np.arange(w) * small_w) // w)].astype(np.uint8)


def _check_binary(mask: np.ndarray) -> None:
    if mask.ndim != 2 or not np.isin(mask, (0, 1)).all():
        raise ContractError("mask must be a binary 2-d grid")


# ---------------------------------------------------------------------------
# episode sampling


@dataclass(frozen=True)
class SceneParams:
    """Scene-composition knobs; mirrors the DataConfig fields."""

    image_size: tuple[int, int] = (32, 32)
    radius_frac: tuple[float, float] = (0.17, 0.28)
    distractor_prob: float = 0.5
    max_distractors: int = 1
    min_visible_frac: float = 0.5
    gain_range: tuple[float, float] = (0.75, 1.1)
    # probability that planted novel objects share the target's hue, making
    # them confusable with the annotated class (the bias has no teeth if the
    # hidden objects never resemble anything the comparator cares about)
    confusable_prob: float = 0.8
    bg_two_region_prob: float = 1.0
    # planted novel objects may use their own size range; None = radius_frac
    plant_radius_frac: tuple[float, float] | None = None


@dataclass
class Episode:
    class_id: int
    support: tuple[tuple[np.ndarray, np.ndarray], ...]  # k (image, mask) pairs
    query_image: np.ndarray
    query_mask: np.ndarray
    k: int
    # provenance for inspection/tests; not part of the episode contract
    support_specs: tuple[SceneSpec, ...] | None = field(default=None, repr=False)
    query_spec: SceneSpec | None = field(default=None, repr=False)


def _draw_background(rng: np.random.Generator, two_region_prob: float = 1.0) -> BackgroundSpec:
    def muted() -> tuple[float, float, float]:
        hue = rng.uniform(0.0, 1.0)
        sat = rng.uniform(0.05, 0.25)
        val = rng.uniform(0.25, 0.55)
        return colorsys.hsv_to_rgb(hue, sat, val)

    color_a = muted()
    color_b = muted() if rng.random() < two_region_prob else color_a
    return BackgroundSpec(
        split_axis=int(rng.integers(2)),
        split_frac=float(rng.uniform(0.3, 0.7)),
        color_a=color_a,
        color_b=color_b,
        noise=0.03,
    )


def _draw_object(
    rng: np.random.Generator, class_id: int, params: SceneParams, radius_frac: tuple[float, float] | None = None
) -> ObjectSpec:
    h, w = params.image_size
    frac = params.radius_frac if radius_frac is None else radius_frac
    lo = max(2, int(round(frac[0] * min(h, w))))
    hi = max(lo, int(round(frac[1] * min(h, w))))
    radius = int(rng.integers(lo, hi + 1))
    cy = int(rng.integers(radius, h - radius))
    cx = int(rng.integers(radius, w - radius))
    shape, _, _ = class_style(class_id)
    return ObjectSpec(
        class_id=class_id,
        shape=shape,
        center=(cy, cx),
        radius=radius,
        phase=int(rng.integers(4)),
        gain=float(rng.uniform(*params.gain_range)),
    )


def _sample_scene(
    rng: np.random.Generator,
    class_id: int,
    split: ClassSplit,
    plant_novel: bool,
    params: SceneParams,
    feature_hw: tuple[int, int] | None,
) -> tuple[SceneSpec, np.ndarray, np.ndarray]:
    """One scene containing the target class; returns (spec, image, target mask).

    Draw order puts the target last so it is never occluded; distractors and
    planted novel objects may partially occlude each other.
    """
    distractor_pool = [c for c in split.base_ids if c != class_id]
    confusable_pool = [c for c in split.novel_ids if class_hue_index(c) == class_hue_index(class_id)]
    for _ in range(MAX_SCENE_RETRIES):
        objects: list[ObjectSpec] = []
        n_extra = 0
        if params.max_distractors > 0 and rng.random() < params.distractor_prob:
            n_extra = int(rng.integers(1, params.max_distractors + 1))
        for _ in range(n_extra):
            if distractor_pool:
                objects.append(_draw_object(rng, distractor_pool[int(rng.integers(len(distractor_pool)))], params))
        if plant_novel:
            if confusable_pool and rng.random() < params.confusable_prob:
                planted = confusable_pool[int(rng.integers(len(confusable_pool)))]
            else:
                planted = split.novel_ids[int(rng.integers(len(split.novel_ids)))]
            objects.append(_draw_object(rng, planted, params, params.plant_radius_frac))
        objects.append(_draw_object(rng, class_id, params))
        spec = SceneSpec(
            image_size=params.image_size,
            objects=tuple(objects),
            background=_draw_background(rng, params.bg_two_region_prob),
            rng_seed=int(rng.integers(np.iinfo(np.int64).max)),
        )
        try:
            image, per_class = render_scene(spec)
        except DegenerateSceneError:
            continue
        # require each object to stay mostly visible so planted objects still
        # read as their class
        footprints = [shape_mask(o.shape, o.center, o.radius, *params.image_size) for o in spec.objects]
        covered_by_later = np.zeros(params.image_size, dtype=bool)
        footprint_ok = True
        for fp in reversed(footprints):
            visible_frac = (fp & ~covered_by_later).sum() / fp.sum()
            if visible_frac < params.min_visible_frac:
                footprint_ok = False
                break
            covered_by_later |= fp
        if not footprint_ok:
            continue
        mask = per_class[class_id]
        if mask.sum() == 0:
            continue
        if feature_hw is not None:
            try:
                downsample_mask(mask, *feature_hw)
            except DegenerateEpisodeError:
                continue
        return spec, image, mask
    raise SamplingError(f"no valid scene for class {class_id} after {MAX_SCENE_RETRIES} retries")


def sample_episode(
    split: ClassSplit,
    phase: str,
    k: int,
    bias_rate: float,
    rng: np.random.Generator,
    *,
    params: SceneParams = SceneParams(),
    feature_hw: tuple[int, int] | None = None,
    class_id: int | None = None,
) -> Episode:
    """Sample one support/query episode.

    phase="train" draws the target from base classes and, per scene with
    probability `bias_rate`, plants an unannotated novel-class object into
    the background. phase="test" draws from novel classes and never plants.
    """
    if phase not in ("train", "test"):
        raise ConfigError(f"phase must be train|test, got {phase!r}")
    if k < 1:
        raise ConfigError("k must be >= 1")
    pool = split.base_ids if phase == "train" else split.novel_ids
    if class_id is None:
        class_id = int(pool[int(rng.integers(len(pool)))])
    elif class_id not in pool:
        raise ConfigError(f"class {class_id} not in the {phase} pool")

    def plant() -> bool:
        return phase == "train" and bias_rate > 0 and rng.random() < bias_rate

    support = []
    support_specs = []
    for _ in range(k):
        spec, image, mask = _sample_scene(rng, class_id, split, plant(), params, feature_hw)
        support.append((image, mask))
        support_specs.append(spec)
    q_spec, q_image, q_mask = _sample_scene(rng, class_id, split, plant(), params, feature_hw)
    return Episode(
        class_id=class_id,
        support=tuple(support),
        query_image=q_image,
        query_mask=q_mask,
        k=k,
        support_specs=tuple(support_specs),
        query_spec=q_spec,
    )


# ---------------------------------------------------------------------------
# episode inspection dumps


def dump_episode(episode: Episode, out_dir: str | Path) -> list[Path]:
    """Write an episode as lossless PNGs plus a small JSON descriptor."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def save_image(arr: np.ndarray, name: str) -> None:
        path = out / name
        Image.fromarray((arr * 255).round().astype(np.uint8)).save(path)
        written.append(path)

    def save_mask(mask: np.ndarray, name: str) -> None:
        path = out / name
        Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(path)
        written.append(path)

    for i, (img, mask) in enumerate(episode.support):
        save_image(img, f"support_{i}.png")
        save_mask(mask, f"support_{i}_mask.png")
    save_image(episode.query_image, "query.png")
    save_mask(episode.query_mask, "query_mask.png")
    desc = out / "episode.json"
    record = {"class_id": episode.class_id, "k": episode.k}
    if episode.query_spec is not None:
        record["query_spec"] = episode.query_spec.to_dict()
    if episode.support_specs is not None:
        record["support_specs"] = [s.to_dict() for s in episode.support_specs]
    desc.write_text(json.dumps(record, indent=2) + "\n")
    written.append(desc)
    return written
