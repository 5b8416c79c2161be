"""Synthetic part-composed image dataset whose layouts obey knowledge triples.

Each category is a set of geometric parts plus relations drawn from the
spatial relation vocabulary (is/top/of, is/below/of, is/left/of, is/right/of,
is/middle/of, is/adjacent/to, is/front/of, has/part). The renderer solves the
relations into a banded layout per axis, applies seeded jitter and noise, and
then re-verifies every relation from the drawn bounding boxes, so a successful
render is its own layout oracle. Contradictory relations raise
UnsatisfiableLayout.

On disk a dataset is PNG images under images/<split>/<category>/, one strict
TSV triple file per category under knowledge/, a wide-graph external_graph.tsv,
per-split object bounding boxes, and manifest.json.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import CorruptImage, MissingSplit, UnsatisfiableLayout
from .knowledge import Triple, write_triples
from .seeding import derive_rng

REL_TOP = "is/top/of"
REL_BELOW = "is/below/of"
REL_LEFT = "is/left/of"
REL_RIGHT = "is/right/of"
REL_MIDDLE = "is/middle/of"
REL_ADJACENT = "is/adjacent/to"
REL_FRONT = "is/front/of"
REL_HAS_PART = "has/part"

SPATIAL_RELATIONS = {
    REL_TOP, REL_BELOW, REL_LEFT, REL_RIGHT, REL_MIDDLE, REL_ADJACENT, REL_FRONT,
}

ADJACENCY_GAP = 2.0
BASE_RESOLUTION = 64


@dataclass(frozen=True)
class PartSpec:
    shape: str  # rect | ellipse | tri_up | tri_down
    size: tuple[int, int]  # (width, height) at the 64px base resolution
    color: tuple[int, int, int]

    def __post_init__(self) -> None:
        if self.shape not in ("rect", "ellipse", "tri_up", "tri_down"):
            raise ValueError(f"unknown shape kind {self.shape!r}")


@dataclass(frozen=True)
class CategorySpec:
    name: str
    parts: dict[str, PartSpec]
    relations: tuple[tuple[str, str, str], ...]  # (part, relation, part)

    def __post_init__(self) -> None:
        for a, rel, b in self.relations:
            if rel not in SPATIAL_RELATIONS:
                raise ValueError(f"{self.name}: unsupported relation {rel!r}")
            for endpoint in (a, b):
                if endpoint not in self.parts:
                    raise ValueError(
                        f"{self.name}: relation endpoint {endpoint!r} is not a part"
                    )

    def triples(self) -> list[Triple]:
        out = [Triple(self.name, REL_HAS_PART, part) for part in self.parts]
        out.extend(Triple(a, rel, b) for a, rel, b in self.relations)
        return out


@dataclass
class DatasetManifest:
    categories: tuple[str, ...]
    train_per_category: int = 200
    val_per_category: int = 50
    resolution: int = 64
    seed: int = 0
    jitter: float = 2.0
    noise: int = 10
    speckles: int = 30

    def __post_init__(self) -> None:
        if self.train_per_category < 1 or self.val_per_category < 1:
            raise ValueError("split sizes must be >= 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        raw = json.loads(text)
        raw["categories"] = tuple(raw["categories"])
        return cls(**raw)


# -- layout solving -----------------------------------------------------------


def _layer_assignment(names, edges, axis, category):
    """Longest-path layers over the ordering DAG; None for unconstrained parts."""
    preds = {n: set() for n in names}
    succs = {n: set() for n in names}
    involved = set()
    for a, b in edges:  # a precedes b on this axis
        preds[b].add(a)
        succs[a].add(b)
        involved.update((a, b))
    layers: dict[str, int] = {}
    ready = [n for n in names if n in involved and not preds[n]]
    pending = {n: len(preds[n]) for n in involved}
    order = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        layers[n] = max((layers[p] + 1 for p in preds[n]), default=0)
        for s in sorted(succs[n]):
            pending[s] -= 1
            if pending[s] == 0:
                ready.append(s)
    if len(order) != len(involved):
        raise UnsatisfiableLayout(
            f"{category}: cyclic {axis} ordering among {sorted(involved - set(order))}"
        )
    return layers


def _draw_order(spec: CategorySpec) -> list[str]:
    """Declaration order refined by is/front/of (front parts drawn later)."""
    names = list(spec.parts)
    preds = {n: set() for n in names}  # drawn-before requirements
    for a, rel, b in spec.relations:
        if rel == REL_FRONT:
            preds[a].add(b)
    order: list[str] = []
    marked: set[str] = set()
    in_progress: set[str] = set()

    def visit(n: str) -> None:
        if n in marked:
            return
        if n in in_progress:
            raise UnsatisfiableLayout(f"{spec.name}: cyclic is/front/of chain")
        in_progress.add(n)
        for p in sorted(preds[n]):
            visit(p)
        in_progress.discard(n)
        marked.add(n)
        order.append(n)

    for n in names:
        visit(n)
    return order


def _box_gap(a, b) -> float:
    gx = max(b[0] - a[2], a[0] - b[2], 0.0)
    gy = max(b[1] - a[3], a[1] - b[3], 0.0)
    return max(gx, gy)


def verify_layout(spec: CategorySpec, boxes: dict[str, tuple], resolution: int) -> list[str]:
    """All violated relations, judged from the drawn bounding boxes."""
    def cx(p):
        return (boxes[p][0] + boxes[p][2]) / 2

    def cy(p):
        return (boxes[p][1] + boxes[p][3]) / 2

    bad = []
    for name, box in boxes.items():
        if box[0] < 0 or box[1] < 0 or box[2] > resolution or box[3] > resolution:
            bad.append(f"{name} out of canvas {box}")
    for a, rel, b in spec.relations:
        if rel == REL_TOP and not cy(a) < cy(b):
            bad.append(f"{a} {rel} {b}")
        elif rel == REL_BELOW and not cy(a) > cy(b):
            bad.append(f"{a} {rel} {b}")
        elif rel == REL_LEFT and not cx(a) < cx(b):
            bad.append(f"{a} {rel} {b}")
        elif rel == REL_RIGHT and not cx(a) > cx(b):
            bad.append(f"{a} {rel} {b}")
        elif rel == REL_MIDDLE and not abs(cx(a) - cx(b)) <= ADJACENCY_GAP:
            bad.append(f"{a} {rel} {b}")
        elif rel == REL_ADJACENT and not _box_gap(boxes[a], boxes[b]) <= ADJACENCY_GAP:
            bad.append(f"{a} {rel} {b}")
    return bad


def render(
    spec: CategorySpec, resolution: int, rng: np.random.Generator,
    jitter: float = 2.0, noise: int = 10, speckles: int = 30,
) -> tuple[np.ndarray, dict[str, tuple[int, int, int, int]]]:
    """Render one image; returns (HxWx3 uint8 array, part name -> bbox)."""
    from PIL import ImageDraw

    s = resolution / BASE_RESOLUTION
    margin = 8.0 * s
    span = resolution - 2 * margin

    y_edges, x_edges = [], []
    middles = []
    for a, rel, b in spec.relations:
        if rel == REL_TOP:
            y_edges.append((a, b))
        elif rel == REL_BELOW:
            y_edges.append((b, a))
        elif rel == REL_LEFT:
            x_edges.append((a, b))
        elif rel == REL_RIGHT:
            x_edges.append((b, a))
        elif rel == REL_MIDDLE:
            middles.append((a, b))
    names = list(spec.parts)
    y_layers = _layer_assignment(names, y_edges, "vertical", spec.name)
    x_layers = _layer_assignment(names, x_edges, "horizontal", spec.name)
    ny = max(y_layers.values(), default=0) + 1
    nx = max(x_layers.values(), default=0) + 1

    def band_center(layer: int | None, count: int) -> float:
        if layer is None:
            return resolution / 2.0
        return margin + span * (layer + 0.5) / count

    centers: dict[str, list[float]] = {}
    for name in names:
        cx = band_center(x_layers.get(name), nx) + rng.uniform(-jitter, jitter)
        cy = band_center(y_layers.get(name), ny) + rng.uniform(-jitter, jitter)
        centers[name] = [cx, cy]
    for a, b in middles:
        centers[a][0] = centers[b][0] + rng.uniform(-1.0, 1.0)

    def box_of(name: str) -> tuple[float, float, float, float]:
        w, h = spec.parts[name].size
        w, h = w * s, h * s
        cx, cy = centers[name]
        return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    boxes = {name: box_of(name) for name in names}
    # pull adjacency subjects toward their objects, axis by axis
    for a, rel, b in spec.relations:
        if rel != REL_ADJACENT:
            continue
        ax0, ay0, ax1, ay1 = boxes[a]
        bx = boxes[b]
        gx = max(bx[0] - ax1, ax0 - bx[2], 0.0)
        if gx > ADJACENCY_GAP:
            shift = (gx - 1.0) * (1.0 if bx[0] - ax1 > 0 else -1.0)
            centers[a][0] += shift
        gy = max(bx[1] - ay1, ay0 - bx[3], 0.0)
        if gy > ADJACENCY_GAP:
            shift = (gy - 1.0) * (1.0 if bx[1] - ay1 > 0 else -1.0)
            centers[a][1] += shift
        boxes[a] = box_of(a)

    int_boxes = {
        name: tuple(int(round(v)) for v in boxes[name]) for name in names
    }
    violations = verify_layout(spec, int_boxes, resolution)
    if violations:
        raise UnsatisfiableLayout(f"{spec.name}: {violations}")

    img = Image.new("RGB", (resolution, resolution), (22, 26, 31))
    draw = ImageDraw.Draw(img)
    for _ in range(speckles):
        px, py = rng.integers(0, resolution, size=2)
        shade = int(rng.integers(30, 80))
        draw.point((int(px), int(py)), fill=(shade, shade, shade))
    for name in _draw_order(spec):
        part = spec.parts[name]
        x0, y0, x1, y1 = int_boxes[name]
        color = tuple(
            int(np.clip(c + rng.integers(-12, 13), 0, 255)) for c in part.color
        )
        if part.shape == "rect":
            draw.rectangle((x0, y0, x1, y1), fill=color)
        elif part.shape == "ellipse":
            draw.ellipse((x0, y0, x1, y1), fill=color)
        elif part.shape == "tri_up":
            draw.polygon([((x0 + x1) // 2, y0), (x0, y1), (x1, y1)], fill=color)
        else:  # tri_down
            draw.polygon([(x0, y0), (x1, y0), ((x0 + x1) // 2, y1)], fill=color)
    arr = np.asarray(img, dtype=np.int16)
    if noise > 0:
        arr = arr + rng.integers(-noise, noise + 1, size=arr.shape)
    return np.clip(arr, 0, 255).astype(np.uint8), int_boxes


# -- default category inventory -------------------------------------------------


def default_category_specs() -> list[CategorySpec]:
    gray = (150, 150, 155)
    cyan = (90, 200, 230)
    return [
        CategorySpec(
            name="rocket",
            parts={
                "nose": PartSpec("tri_up", (16, 10), (200, 60, 50)),
                "body": PartSpec("rect", (14, 22), gray),
                "window": PartSpec("ellipse", (6, 6), cyan),
                "left fin": PartSpec("tri_up", (8, 8), (160, 40, 40)),
                "right fin": PartSpec("tri_up", (8, 8), (160, 40, 40)),
                "flame": PartSpec("tri_down", (10, 10), (245, 150, 40)),
            },
            relations=(
                ("nose", REL_TOP, "body"),
                ("nose", REL_ADJACENT, "body"),
                ("body", REL_TOP, "flame"),
                ("flame", REL_ADJACENT, "body"),
                ("window", REL_MIDDLE, "body"),
                ("window", REL_FRONT, "body"),
                ("left fin", REL_LEFT, "body"),
                ("left fin", REL_ADJACENT, "body"),
                ("right fin", REL_RIGHT, "body"),
                ("right fin", REL_ADJACENT, "body"),
            ),
        ),
        CategorySpec(
            name="house",
            parts={
                "roof": PartSpec("tri_up", (26, 12), (170, 70, 50)),
                "wall": PartSpec("rect", (24, 18), (220, 205, 170)),
                "door": PartSpec("rect", (7, 12), (110, 70, 40)),
                "window": PartSpec("ellipse", (6, 6), cyan),
            },
            relations=(
                ("roof", REL_TOP, "wall"),
                ("roof", REL_ADJACENT, "wall"),
                ("door", REL_FRONT, "wall"),
                ("window", REL_FRONT, "wall"),
                ("window", REL_TOP, "door"),
                ("window", REL_LEFT, "door"),
            ),
        ),
        CategorySpec(
            name="boat",
            parts={
                "sail": PartSpec("tri_up", (16, 14), (235, 235, 225)),
                "mast": PartSpec("rect", (3, 18), (120, 80, 50)),
                "hull": PartSpec("rect", (26, 9), (40, 70, 140)),
                "cabin": PartSpec("rect", (9, 7), gray),
            },
            relations=(
                ("mast", REL_TOP, "hull"),
                ("cabin", REL_TOP, "hull"),
                ("cabin", REL_ADJACENT, "hull"),
                ("sail", REL_LEFT, "mast"),
                ("sail", REL_ADJACENT, "mast"),
                ("cabin", REL_RIGHT, "mast"),
            ),
        ),
        CategorySpec(
            name="truck",
            parts={
                "cargo box": PartSpec("rect", (20, 12), (70, 140, 80)),
                "cabin": PartSpec("rect", (10, 10), gray),
                "back wheel": PartSpec("ellipse", (7, 7), (25, 25, 25)),
                "front wheel": PartSpec("ellipse", (7, 7), (25, 25, 25)),
            },
            relations=(
                ("cabin", REL_RIGHT, "cargo box"),
                ("cabin", REL_ADJACENT, "cargo box"),
                ("cargo box", REL_TOP, "back wheel"),
                ("cabin", REL_TOP, "front wheel"),
                ("back wheel", REL_LEFT, "front wheel"),
                ("front wheel", REL_ADJACENT, "cabin"),
            ),
        ),
        CategorySpec(
            name="windmill",
            parts={
                "tower": PartSpec("rect", (8, 24), (210, 195, 160)),
                "hub": PartSpec("ellipse", (6, 6), (60, 60, 65)),
                "left blade": PartSpec("tri_up", (10, 12), (240, 240, 235)),
                "right blade": PartSpec("tri_up", (10, 12), (240, 240, 235)),
            },
            relations=(
                ("hub", REL_TOP, "tower"),
                ("hub", REL_ADJACENT, "tower"),
                ("hub", REL_FRONT, "tower"),
                ("left blade", REL_LEFT, "hub"),
                ("left blade", REL_ADJACENT, "hub"),
                ("right blade", REL_RIGHT, "hub"),
                ("right blade", REL_ADJACENT, "hub"),
            ),
        ),
        CategorySpec(
            name="plane",
            parts={
                "fuselage": PartSpec("rect", (28, 8), (190, 195, 205)),
                "wing": PartSpec("tri_up", (12, 10), (90, 95, 105)),
                "tail": PartSpec("tri_up", (8, 9), (200, 60, 50)),
                "cockpit": PartSpec("ellipse", (6, 5), cyan),
            },
            relations=(
                ("tail", REL_TOP, "fuselage"),
                ("tail", REL_ADJACENT, "fuselage"),
                ("wing", REL_MIDDLE, "fuselage"),
                ("wing", REL_FRONT, "fuselage"),
                ("wing", REL_ADJACENT, "fuselage"),
                ("tail", REL_LEFT, "wing"),
                ("cockpit", REL_RIGHT, "wing"),
                ("cockpit", REL_FRONT, "fuselage"),
            ),
        ),
    ]


def default_wide_triples() -> list[Triple]:
    """Wide-scale knowledge linking categories to broader concepts."""
    rows = [
        ("rocket", "is/kind/of", "vehicle"),
        ("rocket", "travels/in", "sky"),
        ("plane", "is/kind/of", "vehicle"),
        ("plane", "travels/in", "sky"),
        ("boat", "is/kind/of", "vehicle"),
        ("boat", "travels/in", "water"),
        ("truck", "is/kind/of", "vehicle"),
        ("truck", "travels/on", "road"),
        ("house", "is/kind/of", "building"),
        ("windmill", "is/kind/of", "building"),
        ("windmill", "powered/by", "wind"),
        ("boat", "powered/by", "wind"),
        ("vehicle", "used/for", "transport"),
        ("building", "used/for", "shelter"),
        ("sky", "is/above", "ground"),
        ("road", "is/part/of", "ground"),
        ("water", "is/next/to", "ground"),
        ("wind", "is/part/of", "sky"),
    ]
    return [Triple(*row) for row in rows]


# -- dataset generation and loading ---------------------------------------------


@dataclass
class Dataset:
    categories: tuple[str, ...]
    train_images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    manifest: DatasetManifest
    train_boxes: list[tuple[int, int, int, int]] = field(default_factory=list)
    val_boxes: list[tuple[int, int, int, int]] = field(default_factory=list)


def _category_filename(category: str) -> str:
    return category.replace(" ", "-")


def generate_dataset(
    manifest: DatasetManifest,
    specs: Sequence[CategorySpec],
    out_dir: str | Path,
    wide_triples: Sequence[Triple] | None = None,
) -> Path:
    """Write images, per-category knowledge TSVs, the wide graph, object
    bounding boxes, and the manifest under ``out_dir``."""
    by_name = {spec.name: spec for spec in specs}
    missing = [c for c in manifest.categories if c not in by_name]
    if missing:
        raise ValueError(f"no category spec for {missing}")
    out = Path(out_dir)
    (out / "knowledge").mkdir(parents=True, exist_ok=True)
    for category in manifest.categories:
        write_triples(
            out / "knowledge" / f"{_category_filename(category)}.tsv",
            by_name[category].triples(),
        )
    write_triples(
        out / "external_graph.tsv",
        default_wide_triples() if wide_triples is None else wide_triples,
    )
    splits = {
        "train": manifest.train_per_category,
        "val": manifest.val_per_category,
    }
    for split, per_cat in splits.items():
        boxes: dict[str, list[int]] = {}
        for category in manifest.categories:
            cat_dir = out / "images" / split / _category_filename(category)
            cat_dir.mkdir(parents=True, exist_ok=True)
            for i in range(per_cat):
                rng = derive_rng(manifest.seed, "render", split, category, i)
                pixels, part_boxes = render(
                    by_name[category],
                    manifest.resolution,
                    rng,
                    jitter=manifest.jitter,
                    noise=manifest.noise,
                    speckles=manifest.speckles,
                )
                name = f"{i:04d}.png"
                Image.fromarray(pixels).save(cat_dir / name)
                xs0, ys0, xs1, ys1 = zip(*part_boxes.values())
                boxes[f"{_category_filename(category)}/{name}"] = [
                    min(xs0), min(ys0), max(xs1), max(ys1),
                ]
        (out / f"boxes_{split}.json").write_text(json.dumps(boxes, indent=0) + "\n")
    (out / "manifest.json").write_text(manifest.to_json())
    return out


def _load_split(root: Path, split: str, manifest: DatasetManifest):
    split_dir = root / "images" / split
    if not split_dir.is_dir():
        raise MissingSplit(f"{split_dir} does not exist")
    boxes_file = root / f"boxes_{split}.json"
    boxes_map = json.loads(boxes_file.read_text()) if boxes_file.exists() else {}
    images, labels, boxes = [], [], []
    for label, category in enumerate(manifest.categories):
        cat_dir = split_dir / _category_filename(category)
        if not cat_dir.is_dir():
            raise MissingSplit(f"{cat_dir} does not exist")
        for path in sorted(cat_dir.glob("*.png")):
            try:
                with Image.open(path) as img:
                    arr = np.asarray(img.convert("RGB"), dtype=np.float32)
            except (OSError, UnidentifiedImageError, SyntaxError) as exc:
                raise CorruptImage(f"{path}: {exc}") from exc
            if arr.shape != (manifest.resolution, manifest.resolution, 3):
                raise CorruptImage(f"{path}: unexpected extents {arr.shape}")
            images.append(arr.transpose(2, 0, 1) / 255.0)
            labels.append(label)
            boxes.append(tuple(boxes_map.get(f"{_category_filename(category)}/{path.name}", ())))
    if not images:
        raise MissingSplit(f"{split_dir} holds no images")
    return (
        np.stack(images).astype(np.float32),
        np.asarray(labels, dtype=np.int64),
        boxes,
    )


def load_dataset(path: str | Path) -> Dataset:
    """Load a generated dataset; deterministic sample order, pixels in [0, 1]."""
    root = Path(path)
    manifest = DatasetManifest.from_json((root / "manifest.json").read_text())
    train_images, train_labels, train_boxes = _load_split(root, "train", manifest)
    val_images, val_labels, val_boxes = _load_split(root, "val", manifest)
    return Dataset(
        categories=manifest.categories,
        train_images=train_images,
        train_labels=train_labels,
        val_images=val_images,
        val_labels=val_labels,
        manifest=manifest,
        train_boxes=train_boxes,
        val_boxes=val_boxes,
    )
