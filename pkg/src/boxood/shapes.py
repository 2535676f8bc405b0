"""Procedural shapes datasets for desk-scale runs.

In-distribution objects are flat-coloured circles and squares. The held-out
OOD classes (triangles and crosses) never appear in training.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .dataset import Annotation, BoundingBox, DetectionDataset, ImageRecord, save_dataset

IN_CLASSES = ("circle", "square")
OOD_CLASSES = ("triangle", "cross")
IMAGE_SIZE = 64


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    c0, c1 = rng.uniform(40, 215, size=(2, 3))
    t = np.linspace(0.0, 1.0, size)
    if rng.random() < 0.5:
        ramp = t[None, :, None]
    else:
        ramp = t[:, None, None]
    img = c0 * (1 - ramp) + c1 * ramp + rng.normal(0, 6, size=(size, size, 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def _draw(draw: ImageDraw.ImageDraw, shape: str, x0: int, y0: int, s: int, color) -> None:
    x1, y1 = x0 + s - 1, y0 + s - 1
    if shape == "circle":
        draw.ellipse([x0, y0, x1, y1], fill=color)
    elif shape == "square":
        draw.rectangle([x0, y0, x1, y1], fill=color)
    elif shape == "triangle":
        draw.polygon([(x0 + s / 2, y0), (x1, y1), (x0, y1)], fill=color)
    elif shape == "cross":
        t = max(s // 3, 2)
        c = s // 2
        draw.rectangle([x0 + c - t // 2, y0, x0 + c - t // 2 + t - 1, y1], fill=color)
        draw.rectangle([x0, y0 + c - t // 2, x1, y0 + c - t // 2 + t - 1], fill=color)
    else:
        raise ValueError(f"unknown shape {shape!r}")


def _color(rng: np.random.Generator, bg: np.ndarray, x0: int, y0: int, s: int) -> tuple:
    # Keep objects readable against the local background.
    local = bg[y0:y0 + s, x0:x0 + s].reshape(-1, 3).mean(axis=0)
    for _ in range(20):
        c = rng.integers(0, 256, size=3)
        if np.abs(c - local).sum() > 180:
            break
    return tuple(int(v) for v in c)


def render_image(rng: np.random.Generator, shapes: list[str], size: int = IMAGE_SIZE,
                 min_side: int = 14, max_side: int = 58):
    """Draw ``shapes`` (first one large) and return pixels plus boxes as (x, y, s, shape)."""
    img = _background(rng, size)
    canvas = Image.fromarray(img)
    draw = ImageDraw.Draw(canvas)
    placed = []
    for k, shape in enumerate(shapes):
        s = int(rng.integers(46, max_side + 1)) if k == 0 else int(rng.integers(min_side, 30))
        x0 = int(rng.integers(0, size - s + 1))
        y0 = int(rng.integers(0, size - s + 1))
        _draw(draw, shape, x0, y0, s, _color(rng, img, x0, y0, s))
        placed.append((x0, y0, s, shape))
    return np.asarray(canvas, dtype=np.uint8), placed


def make_shapes_dataset(out_dir, n_images: int, seed: int, classes=IN_CLASSES,
                        extra_classes=(), extra_rate: float = 0.0, second_object_rate: float = 0.4,
                        name: str = "annotations.json") -> DetectionDataset:
    """Write ``n_images`` PNGs under ``out_dir/images`` plus a COCO-style file.

    Each image holds one large object and, with ``second_object_rate``, a
    second small one drawn on top. With probability ``extra_rate`` the small
    object comes from ``extra_classes`` instead of ``classes``.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = list(classes) + [c for c in extra_classes if c not in classes]
    cat_id = {n: k + 1 for k, n in enumerate(names)}
    images, anns = [], []
    for i in range(1, n_images + 1):
        shapes = [classes[int(rng.integers(len(classes)))]]
        if rng.random() < second_object_rate:
            pool = extra_classes if extra_classes and rng.random() < extra_rate else classes
            shapes.append(pool[int(rng.integers(len(pool)))])
        pixels, placed = render_image(rng, shapes)
        rel = f"images/{i:05d}.png"
        Image.fromarray(pixels).save(out_dir / rel)
        images.append(ImageRecord(i, rel, IMAGE_SIZE, IMAGE_SIZE))
        for x0, y0, s, shape in placed:
            anns.append(Annotation(i, BoundingBox(x0, y0, s, s, cat_id[shape])))
    ds = DetectionDataset([(cat_id[n], n) for n in names], images, anns, root=str(out_dir))
    save_dataset(ds, out_dir / name)
    return ds


def make_desk_fixture(root, seed: int = 2024, n_train: int = 500, n_test: int = 150,
                      n_ood: int = 150) -> dict[str, Path]:
    """Create train / in-distribution test / OOD test splits under ``root``.

    The raw OOD split mixes in some in-distribution objects on purpose, so
    it must go through :func:`boxood.dataset.filter_ood_test` before use.
    """
    root = Path(root)
    make_shapes_dataset(root / "train", n_train, seed)
    make_shapes_dataset(root / "test", n_test, seed + 1)
    make_shapes_dataset(root / "ood_raw", n_ood, seed + 2, classes=OOD_CLASSES,
                        extra_classes=IN_CLASSES, extra_rate=0.5)
    return {
        "train": root / "train" / "annotations.json",
        "test": root / "test" / "annotations.json",
        "ood_test": root / "ood_raw" / "annotations.json",
    }
