import json

import numpy as np
import pytest
from PIL import Image

from boxood.dataset import Annotation, BoundingBox, DetectionDataset, ImageRecord, save_dataset


def write_dataset(root, specs, categories=((1, "circle"), (2, "square")), seed=0):
    """Write random RGB images plus annotations.

    ``specs`` is a list of ``(width, height, [(x, y, w, h, cat), ...])``.
    """
    rng = np.random.default_rng(seed)
    (root / "images").mkdir(parents=True, exist_ok=True)
    images, anns = [], []
    for i, (w, h, boxes) in enumerate(specs, start=1):
        rel = f"images/{i:04d}.png"
        Image.fromarray(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)).save(root / rel)
        images.append(ImageRecord(i, rel, w, h))
        for x, y, bw, bh, c in boxes:
            anns.append(Annotation(i, BoundingBox(x, y, bw, bh, c)))
    ds = DetectionDataset(categories, images, anns, root=str(root))
    save_dataset(ds, root / "annotations.json")
    return ds


@pytest.fixture
def small_dataset(tmp_path):
    specs = [
        (64, 64, [(2, 3, 50, 50, 1), (40, 40, 10, 10, 2)]),
        (64, 64, [(10, 10, 20, 20, 2)]),
        (80, 60, [(0, 0, 45, 45, 2), (30, 10, 48, 44, 1)]),
    ]
    return write_dataset(tmp_path / "d_in", specs)


@pytest.fixture
def coco_file(tmp_path):
    def make(data):
        p = tmp_path / "ann.json"
        p.write_text(json.dumps(data) if not isinstance(data, str) else data)
        return p
    return make


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one verdict line per criterion; they are echoed in the terminal summary."""
    def record(tag, ok, detail):
        line = f"{tag} {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)
