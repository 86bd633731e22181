"""Synthetic grid scenes of colored shapes with templated, grounded QA pairs.

A scene puts at most one shape in each cell of an N x N grid. Every question
records the cells of the object(s) it refers to, so attention maps can be
scored against ground truth. Images are stored as binary PPM and per-cell
features are an HSV histogram plus the mean RGB color.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
}
# shapes keep the hue of their color but differ in saturation, so the cell
# histogram sees shape identity and not only the covered area
SHAPE_SATURATION = {"circle": 1.0, "square": 0.7, "triangle": 0.4}
BACKGROUND = (128, 128, 128)
NUMBER_WORDS = ("one", "two", "three", "four", "five", "six", "seven", "eight", "nine")
POSITIONS = ("top", "bottom", "left", "right", "center")
CATEGORIES = ("object", "number", "color", "location")
# Toronto COCO-QA training split break-down
DEFAULT_PROPORTIONS = {"object": 0.6984, "number": 0.0747, "color": 0.1659, "location": 0.0610}

HUE_BINS, SAT_BINS, VAL_BINS = 10, 6, 3
HIST_BINS = HUE_BINS * SAT_BINS * VAL_BINS
SHAPE_EXTENT = 0.6


class UnanswerableError(LookupError):
    """The requested question category cannot be asked about this scene."""


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cell: tuple[int, int]


@dataclass
class Scene:
    grid: int
    objects: list[SceneObject]
    background: tuple[int, int, int] = BACKGROUND

    def __post_init__(self):
        cells = [o.cell for o in self.objects]
        if not cells:
            raise ValueError("a scene needs at least one object")
        if len(set(cells)) != len(cells):
            raise ValueError("at most one object per cell")
        if any(not (0 <= r < self.grid and 0 <= c < self.grid) for r, c in cells):
            raise ValueError("object outside the grid")


@dataclass
class QAItem:
    image_path: str
    question: str
    answer: str
    category: str
    gt_cells: list[tuple[int, int]] = field(default_factory=list)

    def to_json(self) -> str:
        rec = asdict(self)
        rec["gt_cells"] = [list(c) for c in self.gt_cells]
        return json.dumps(rec)

    @classmethod
    def from_json(cls, line: str) -> "QAItem":
        rec = json.loads(line)
        rec["gt_cells"] = [tuple(c) for c in rec.get("gt_cells", [])]
        return cls(**rec)


def generate_scene(
    rng: np.random.Generator, grid: int = 3, count_range: tuple[int, int] = (2, 5)
) -> Scene:
    lo, hi = count_range
    if lo < 1 or hi < lo or hi > grid * grid:
        raise ValueError(f"cannot place {count_range} objects on a {grid}x{grid} grid")
    n = int(rng.integers(lo, hi + 1))
    cells = rng.choice(grid * grid, size=n, replace=False)
    objects = []
    for idx in sorted(int(c) for c in cells):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = list(COLORS)[int(rng.integers(len(COLORS)))]
        objects.append(SceneObject(shape, color, divmod(idx, grid)))
    return Scene(grid, objects)


def _shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean mask of a shape centered in a size x size cell, sampled at pixel centers."""
    c = np.arange(size) + 0.5
    y, x = np.meshgrid(c, c, indexing="ij")
    mid = size / 2.0
    half = SHAPE_EXTENT * size / 2.0
    if shape == "circle":
        return (x - mid) ** 2 + (y - mid) ** 2 <= half**2
    if shape == "square":
        return (np.abs(x - mid) <= half) & (np.abs(y - mid) <= half)
    if shape == "triangle":
        top, bottom = mid - half, mid + half
        t = (y - top) / (bottom - top)  # 0 at apex, 1 at base
        return (t >= 0) & (t <= 1) & (np.abs(x - mid) <= half * t)
    raise ValueError(f"unknown shape {shape!r}")


def shape_rgb(color: str, shape: str) -> tuple[int, int, int]:
    """Pure hue of ``color`` blended toward white down to the shape's saturation."""
    sat = SHAPE_SATURATION[shape]
    return tuple(int(round(255 - sat * (255 - ch))) for ch in COLORS[color])


def render(scene: Scene, cell_size: int = 20) -> np.ndarray:
    """H x W x 3 uint8 raster."""
    n = scene.grid
    img = np.empty((n * cell_size, n * cell_size, 3), dtype=np.uint8)
    img[...] = scene.background
    for obj in scene.objects:
        r, c = obj.cell
        block = img[r * cell_size : (r + 1) * cell_size, c * cell_size : (c + 1) * cell_size]
        block[_shape_mask(obj.shape, cell_size)] = shape_rgb(obj.color, obj.shape)
    return img


def write_ppm(img: np.ndarray, path: str | Path) -> None:
    PILImage.fromarray(np.asarray(img, dtype=np.uint8), mode="RGB").save(path, format="PPM")


def read_image(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


# ---------------------------------------------------------------- questions


def location_word(cell: tuple[int, int], grid: int) -> str | None:
    """Single-word position of a cell; None when it is not on the middle row/column."""
    if grid % 2 == 0:
        return None
    mid = grid // 2
    r, c = cell
    if (r, c) == (mid, mid):
        return "center"
    if c == mid:
        return "top" if r < mid else "bottom"
    if r == mid:
        return "left" if c < mid else "right"
    return None


def _unique(objects: Sequence[SceneObject], **attrs) -> SceneObject | None:
    hits = [o for o in objects if all(getattr(o, k) == v for k, v in attrs.items())]
    return hits[0] if len(hits) == 1 else None


def _pick(rng: np.random.Generator, options: list):
    if not options:
        raise UnanswerableError
    return options[int(rng.integers(len(options)))]


def generate_qa(scene: Scene, category: str, rng: np.random.Generator, image_path: str = "") -> QAItem:
    objs = scene.objects
    if category == "color":
        # one shape that occurs exactly once
        target = _pick(rng, [o for o in objs if _unique(objs, shape=o.shape)])
        template = _pick(rng, ["what is the color of the {s}", "what color is the {s}"])
        q, a, gt = template.format(s=target.shape), target.color, [target.cell]
    elif category == "object":
        target = _pick(rng, [o for o in objs if _unique(objs, color=o.color)])
        template = _pick(rng, ["what is the {c} object", "what object is {c}", "what is the {c} thing"])
        q, a, gt = template.format(c=target.color), target.shape, [target.cell]
    elif category == "number":
        kind = _pick(rng, ["shape", "color"])
        if kind == "shape":
            key = _pick(rng, sorted({o.shape for o in objs}))
            hits = [o for o in objs if o.shape == key]
            q = f"how many {key}s are there"
        else:
            key = _pick(rng, sorted({o.color for o in objs}))
            hits = [o for o in objs if o.color == key]
            q = f"how many {key} objects are there"
        if len(hits) > len(NUMBER_WORDS):
            raise UnanswerableError
        a, gt = NUMBER_WORDS[len(hits) - 1], [o.cell for o in hits]
    elif category == "location":
        candidates = []
        for o in objs:
            if location_word(o.cell, scene.grid) is None:
                continue
            if _unique(objs, shape=o.shape):
                candidates.append((o, f"where is the {o.shape}"))
            if _unique(objs, color=o.color):
                candidates.append((o, f"where is the {o.color} object"))
            if _unique(objs, shape=o.shape, color=o.color):
                candidates.append((o, f"where is the {o.color} {o.shape}"))
        target, q = _pick(rng, candidates)
        a, gt = location_word(target.cell, scene.grid), [target.cell]
    else:
        raise ValueError(f"unknown category {category!r}")
    return QAItem(image_path, q, a, category, sorted(gt))


# ---------------------------------------------------------------- features


def rgb_to_hsv(pixel) -> tuple[float, float, float]:
    """Hexcone conversion of one 8-bit pixel: hue in degrees, s and v in [0, 1]."""
    h, s, v = rgb_to_hsv_array(np.asarray(pixel, dtype=np.uint8).reshape(1, 3))[0]
    return float(h), float(s), float(v)


def rgb_to_hsv_array(rgb: np.ndarray) -> np.ndarray:
    x = np.asarray(rgb, dtype=np.float64) / 255.0
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    mx = x.max(axis=-1)
    mn = x.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    hue = np.where(
        mx == r,
        ((g - b) / safe) % 6.0,
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    hue = np.where(delta > 0, 60.0 * hue, 0.0) % 360.0
    sat = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([hue, sat, mx], axis=-1)


def hsv_bin(hsv: np.ndarray) -> np.ndarray:
    hb = np.minimum((hsv[..., 0] / (360.0 / HUE_BINS)).astype(int), HUE_BINS - 1)
    sb = np.minimum((hsv[..., 1] * SAT_BINS).astype(int), SAT_BINS - 1)
    vb = np.minimum((hsv[..., 2] * VAL_BINS).astype(int), VAL_BINS - 1)
    return (hb * SAT_BINS + sb) * VAL_BINS + vb


FEATURE_DIM = HIST_BINS + 3


def cell_features(image: np.ndarray, grid: int = 3) -> np.ndarray:
    """(180 + 3) x N x N map: normalized joint HSV histogram then mean RGB in [0, 1]."""
    image = np.asarray(image)
    H, W = image.shape[:2]
    if H % grid or W % grid:
        raise ValueError(f"image {W}x{H} is not divisible into a {grid}x{grid} grid")
    ch, cw = H // grid, W // grid
    bins = hsv_bin(rgb_to_hsv_array(image))
    out = np.zeros((FEATURE_DIM, grid, grid))
    for r in range(grid):
        for c in range(grid):
            cell_bins = bins[r * ch : (r + 1) * ch, c * cw : (c + 1) * cw]
            hist = np.bincount(cell_bins.ravel(), minlength=HIST_BINS).astype(np.float64)
            out[:HIST_BINS, r, c] = hist / hist.sum()
            rgb = image[r * ch : (r + 1) * ch, c * cw : (c + 1) * cw].reshape(-1, 3)
            out[HIST_BINS:, r, c] = rgb.mean(axis=0) / 255.0
    return out


# ---------------------------------------------------------------- taxonomy


def taxonomy_lines() -> list[str]:
    lines = ["entity ROOT"]
    for parent, words in (
        ("color", list(COLORS)),
        ("shape", list(SHAPES)),
        ("number", list(NUMBER_WORDS)),
        ("position", list(POSITIONS)),
    ):
        lines.append(f"{parent} entity")
        lines.extend(f"{w} {parent}" for w in words)
    return lines


# ---------------------------------------------------------------- dataset generation


def category_counts(n: int, proportions: dict[str, float]) -> dict[str, int]:
    """Largest-remainder allocation of n items to categories."""
    total = sum(proportions.values())
    if any(p < 0 for p in proportions.values()) or abs(total - 1.0) > 1e-6:
        raise ValueError(f"proportions must be non-negative and sum to 1, got {total}")
    raw = {k: n * p for k, p in proportions.items()}
    counts = {k: int(np.floor(v)) for k, v in raw.items()}
    left = n - sum(counts.values())
    for k in sorted(raw, key=lambda k: (counts[k] - raw[k], list(raw).index(k)))[:left]:
        counts[k] += 1
    return counts


@dataclass
class GeneratorConfig:
    seed: int = 0
    n_train: int = 2000
    n_test: int = 400
    grid: int = 3
    cell_size: int = 20
    min_objects: int = 2
    max_objects: int = 5
    proportions: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_PROPORTIONS))


_SPLIT_IDS = {"train": 0, "test": 1}


def generate_split(cfg: GeneratorConfig, split: str) -> list[tuple[QAItem, Scene]]:
    n = cfg.n_train if split == "train" else cfg.n_test
    counts = category_counts(n, cfg.proportions)
    cats = [c for c in CATEGORIES if c in counts for _ in range(counts[c])]
    order_rng = np.random.default_rng([cfg.seed, _SPLIT_IDS[split], 0xC47])
    cats = [cats[i] for i in order_rng.permutation(len(cats))]
    out = []
    for i, cat in enumerate(cats):
        for attempt in range(1000):
            rng = np.random.default_rng([cfg.seed, _SPLIT_IDS[split], i, attempt])
            scene = generate_scene(rng, cfg.grid, (cfg.min_objects, cfg.max_objects))
            try:
                qa = generate_qa(scene, cat, rng, f"images/{split}_{i:05d}.ppm")
            except UnanswerableError:
                continue
            out.append((qa, scene))
            break
        else:
            raise RuntimeError(f"could not generate a {cat} question for {split} item {i}")
    return out


def write_jsonl(items: Sequence[QAItem], path: str | Path) -> None:
    Path(path).write_text("".join(it.to_json() + "\n" for it in items), encoding="utf-8")


def read_jsonl(path: str | Path) -> list[QAItem]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [QAItem.from_json(line) for line in lines if line.strip()]


def write_dataset(cfg: GeneratorConfig, out_dir: str | Path) -> dict:
    """Write images, QA files, dictionaries, taxonomy and a manifest; returns the manifest."""
    from .answer import AnswerVocabulary
    from .question import Vocabulary

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    splits = {}
    for split in ("train", "test"):
        pairs = generate_split(cfg, split)
        for qa, scene in pairs:
            write_ppm(render(scene, cfg.cell_size), out / qa.image_path)
        splits[split] = [qa for qa, _ in pairs]
        write_jsonl(splits[split], out / f"{split}.jsonl")
    Vocabulary.build(q.question for q in splits["train"]).save(out / "question_vocab.txt")
    AnswerVocabulary(q.answer for q in splits["train"]).save(out / "answer_vocab.txt")
    (out / "taxonomy.txt").write_text("\n".join(taxonomy_lines()) + "\n", encoding="utf-8")
    manifest = {
        "generator": "shapeworld",
        "seed": cfg.seed,
        "n_train": cfg.n_train,
        "n_test": cfg.n_test,
        "grid": cfg.grid,
        "cell_size": cfg.cell_size,
        "objects": [cfg.min_objects, cfg.max_objects],
        "proportions": cfg.proportions,
        "feature_dim": FEATURE_DIM,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
