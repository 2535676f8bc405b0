"""COCO-style detection datasets: loading, validation, sampling and filtering."""

from __future__ import annotations

import json
import math
import os
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

OOD_CATEGORY_NAME = "ood"
MIN_SYNTHESIS_AREA = 2000

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle",
    "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person",
    "pottedplant", "sheep", "sofa", "train", "tvmonitor",
)


class DatasetError(ValueError):
    """Raised for unparsable or inconsistent annotation files."""


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float
    category_id: int

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DatasetError(f"degenerate box w={self.w} h={self.h}")

    def fits(self, width: float, height: float) -> bool:
        return (self.x >= 0 and self.y >= 0
                and self.x + self.w <= width and self.y + self.h <= height)

    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x + self.w, self.y + self.h)


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_path: str
    width: int
    height: int


@dataclass(frozen=True)
class Annotation:
    image_id: int
    box: BoundingBox
    is_ood: bool = False
    id: int | None = field(default=None, compare=False)


@dataclass(frozen=True)
class DetectionDataset:
    """Immutable detection dataset.

    ``root`` is the directory image ``file_path`` values are relative to.
    Annotation order within an image defines the box index used throughout
    synthesis and evaluation.
    """

    categories: tuple[tuple[int, str], ...]
    images: tuple[ImageRecord, ...]
    annotations: tuple[Annotation, ...]
    root: str = "."
    _by_image: dict = field(default=None, init=False, repr=False, compare=False)
    _image_map: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(tuple(c) for c in self.categories))
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        validate(self)
        groups: dict[int, list[Annotation]] = {im.id: [] for im in self.images}
        for ann in self.annotations:
            groups[ann.image_id].append(ann)
        object.__setattr__(self, "_by_image", {k: tuple(v) for k, v in groups.items()})
        object.__setattr__(self, "_image_map", {im.id: im for im in self.images})

    @property
    def category_names(self) -> dict[int, str]:
        return dict(self.categories)

    def category_id(self, name: str) -> int:
        for cid, cname in self.categories:
            if cname == name:
                return cid
        raise KeyError(name)

    def image(self, image_id: int) -> ImageRecord:
        return self._image_map[image_id]

    def annotations_for(self, image_id: int) -> tuple[Annotation, ...]:
        return self._by_image[image_id]

    def image_path(self, record: ImageRecord) -> Path:
        return Path(self.root) / record.file_path

    def counts(self) -> tuple[int, int, int]:
        return len(self.categories), len(self.images), len(self.annotations)

    def in_distribution_categories(self) -> list[tuple[int, str]]:
        """Categories excluding the reserved ``ood`` sentinel, sorted by id."""
        return sorted((c for c in self.categories if c[1] != OOD_CATEGORY_NAME))


def validate(ds: DetectionDataset) -> None:
    problems = []
    cat_ids = [c[0] for c in ds.categories]
    if len(set(cat_ids)) != len(cat_ids):
        problems.append("duplicate category ids")
    dup = sorted(i for i, n in Counter(im.id for im in ds.images).items() if n > 1)
    if dup:
        problems.append(f"duplicate image ids {dup}")
    for im in ds.images:
        if im.width <= 0 or im.height <= 0:
            problems.append(f"image {im.id} has non-positive size {im.width}x{im.height}")
    images = {im.id: im for im in ds.images}
    cats = set(cat_ids)
    missing_images = sorted({a.image_id for a in ds.annotations if a.image_id not in images})
    if missing_images:
        problems.append(f"annotations reference unknown image ids {missing_images}")
    missing_cats = sorted({a.box.category_id for a in ds.annotations if a.box.category_id not in cats})
    if missing_cats:
        problems.append(f"annotations reference unknown category ids {missing_cats}")
    outside = []
    for k, a in enumerate(ds.annotations):
        im = images.get(a.image_id)
        if im is not None and not a.box.fits(im.width, im.height):
            outside.append(a.id if a.id is not None else k)
    if outside:
        problems.append(f"boxes outside their image: annotations {outside}")
    if problems:
        raise DatasetError("; ".join(problems))


def box_area(box: BoundingBox) -> float:
    return box.w * box.h


def synthesis_eligible(box: BoundingBox) -> bool:
    # Very small masks tend to get erased by the inpainter instead of filled.
    return box_area(box) > MIN_SYNTHESIS_AREA


def eligible_indices(anns: Sequence[Annotation]) -> list[int]:
    return [k for k, a in enumerate(anns) if synthesis_eligible(a.box)]


def _parse_json(text: str, source: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        context = lines[exc.lineno - 1] if 0 < exc.lineno <= len(lines) else ""
        raise DatasetError(
            f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {context.strip()[:200]}"
        ) from exc


def from_coco(data: dict, root: str = ".") -> DetectionDataset:
    for key in ("images", "annotations", "categories"):
        if key not in data:
            raise DatasetError(f"missing top-level key {key!r}")
    try:
        categories = [(int(c["id"]), str(c["name"])) for c in data["categories"]]
        images = [
            ImageRecord(int(im["id"]), str(im["file_name"]), int(im["width"]), int(im["height"]))
            for im in data["images"]
        ]
        annotations = []
        for a in data["annotations"]:
            x, y, w, h = (float(v) for v in a["bbox"])
            annotations.append(Annotation(
                image_id=int(a["image_id"]),
                box=BoundingBox(x, y, w, h, int(a["category_id"])),
                is_ood=bool(a.get("is_ood", False)),
                id=int(a["id"]) if "id" in a else None,
            ))
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"malformed record: {exc!r}") from exc
    return DetectionDataset(categories, images, annotations, root=root)


def to_coco(ds: DetectionDataset) -> dict:
    anns = []
    for k, a in enumerate(ds.annotations):
        anns.append({
            "id": a.id if a.id is not None else k + 1,
            "image_id": a.image_id,
            "category_id": a.box.category_id,
            "bbox": [a.box.x, a.box.y, a.box.w, a.box.h],
            "area": box_area(a.box),
            "iscrowd": 0,
            "is_ood": a.is_ood,
        })
    return {
        "images": [
            {"id": im.id, "file_name": im.file_path, "width": im.width, "height": im.height}
            for im in ds.images
        ],
        "annotations": anns,
        "categories": [{"id": cid, "name": name} for cid, name in ds.categories],
    }


def load_dataset(path, image_root: str | os.PathLike | None = None) -> DetectionDataset:
    """Load a COCO-style annotation file.

    Image files are not touched; ``image_root`` defaults to the directory
    holding the annotation file.
    """
    path = Path(path)
    data = _parse_json(path.read_text(), str(path))
    root = str(image_root) if image_root is not None else str(path.parent)
    return from_coco(data, root=root)


def save_dataset(ds: DetectionDataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_coco(ds), indent=1))


def sample_with_repetition(ds: DetectionDataset, n: int, seed: int) -> list[int]:
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return []
    if not ds.images:
        raise DatasetError("cannot sample from an empty dataset")
    rng = np.random.default_rng(seed)
    ids = np.array([im.id for im in ds.images])
    return [int(i) for i in ids[rng.integers(0, len(ids), size=n)]]


def filter_ood_test(ood: DetectionDataset, in_dist_category_names: Iterable[str]) -> DetectionDataset:
    """Keep only images with no annotation of an in-distribution class."""
    names = set(in_dist_category_names)
    bad_cats = {cid for cid, name in ood.categories if name in names}
    dropped = {a.image_id for a in ood.annotations if a.box.category_id in bad_cats}
    images = [im for im in ood.images if im.id not in dropped]
    anns = [a for a in ood.annotations if a.image_id not in dropped]
    return DetectionDataset(ood.categories, images, anns, root=ood.root)


def merge_datasets(d_in: DetectionDataset, d_ood: DetectionDataset) -> DetectionDataset:
    """Union of two datasets; ``d_ood`` images and categories are re-keyed.

    Categories are matched by name. File paths of ``d_ood`` are rewritten
    relative to ``d_in.root`` so one root serves both.
    """
    categories = list(d_in.categories)
    name_to_id = {name: cid for cid, name in categories}
    next_cat = max(name_to_id.values(), default=0) + 1
    cat_map = {}
    for cid, name in d_ood.categories:
        if name not in name_to_id:
            name_to_id[name] = next_cat
            categories.append((next_cat, name))
            next_cat += 1
        cat_map[cid] = name_to_id[name]

    offset = max((im.id for im in d_in.images), default=0)
    in_root = Path(d_in.root).resolve()
    images = list(d_in.images)
    for im in d_ood.images:
        full = (Path(d_ood.root) / im.file_path).resolve()
        rel = os.path.relpath(full, in_root)
        images.append(ImageRecord(im.id + offset, rel, im.width, im.height))
    anns = list(d_in.annotations)
    for a in d_ood.annotations:
        b = a.box
        anns.append(Annotation(a.image_id + offset,
                               BoundingBox(b.x, b.y, b.w, b.h, cat_map[b.category_id]),
                               a.is_ood))
    return DetectionDataset(categories, images, anns, root=d_in.root)


def subset(ds: DetectionDataset, image_ids: Iterable[int]) -> DetectionDataset:
    keep = set(image_ids)
    return DetectionDataset(
        ds.categories,
        [im for im in ds.images if im.id in keep],
        [a for a in ds.annotations if a.image_id in keep],
        root=ds.root,
    )


def convert_voc(voc_root, image_sets: Sequence[tuple[str, str]], out_path,
                classes: Sequence[str] = VOC_CLASSES, include_difficult: bool = False) -> DetectionDataset:
    """Convert Pascal VOC XML annotations to one COCO-style JSON file.

    ``image_sets`` holds ``(year_dir, split)`` pairs such as
    ``("VOC2007", "trainval")``. VOC corners are 1-based and inclusive.
    """
    voc_root = Path(voc_root)
    out_path = Path(out_path)
    cat_ids = {name: k + 1 for k, name in enumerate(classes)}
    images, anns = [], []
    next_id = 1
    for year_dir, split in image_sets:
        base = voc_root / year_dir
        ids = (base / "ImageSets" / "Main" / f"{split}.txt").read_text().split()
        for stem in ids:
            tree = ET.parse(base / "Annotations" / f"{stem}.xml")
            size = tree.find("size")
            width = int(size.find("width").text)
            height = int(size.find("height").text)
            rel = os.path.relpath(base / "JPEGImages" / f"{stem}.jpg", out_path.parent)
            images.append(ImageRecord(next_id, rel, width, height))
            for obj in tree.findall("object"):
                name = obj.find("name").text.strip()
                difficult = obj.find("difficult")
                if difficult is not None and int(difficult.text) and not include_difficult:
                    continue
                if name not in cat_ids:
                    continue
                bb = obj.find("bndbox")
                x0 = max(float(bb.find("xmin").text) - 1, 0.0)
                y0 = max(float(bb.find("ymin").text) - 1, 0.0)
                x1 = min(float(bb.find("xmax").text), float(width))
                y1 = min(float(bb.find("ymax").text), float(height))
                if x1 <= x0 or y1 <= y0:
                    continue
                anns.append(Annotation(next_id, BoundingBox(x0, y0, x1 - x0, y1 - y0, cat_ids[name])))
            next_id += 1
    ds = DetectionDataset([(cid, name) for name, cid in cat_ids.items()], images, anns,
                          root=str(out_path.parent))
    save_dataset(ds, out_path)
    return ds


def rasterize_bounds(box: BoundingBox, width: int, height: int) -> tuple[int, int, int, int]:
    """Outward-rounded integer pixel bounds of ``box`` clamped to the image."""
    x0 = max(int(math.floor(box.x)), 0)
    y0 = max(int(math.floor(box.y)), 0)
    x1 = min(int(math.ceil(box.x + box.w)), width)
    y1 = min(int(math.ceil(box.y + box.h)), height)
    return x0, y0, x1, y1
