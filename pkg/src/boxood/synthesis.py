"""Object-wise outlier synthesis by sequential box inpainting."""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .dataset import (
    OOD_CATEGORY_NAME,
    Annotation,
    BoundingBox,
    DatasetError,
    DetectionDataset,
    ImageRecord,
    eligible_indices,
    rasterize_bounds,
    save_dataset,
    synthesis_eligible,
)
from .prompts import (
    PromptSpec,
    embed_class_name,
    perturb_embedding,
    random_generic_prompt,
)
from .transport import ContractError, post_json

log = logging.getLogger(__name__)

STRATEGIES = ("generic", "distance")
RETRY_FACTOR = 100
OOD_IMAGE_DIR = "ood_images"
ANNOTATION_FILE = "ood_annotations.json"
MANIFEST_FILE = "manifest.jsonl"


class SynthesisError(RuntimeError):
    pass


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed from a tuple of integers (independent of global RNG state)."""
    h = hashlib.sha256(json.dumps([int(k) for k in keys]).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1


@dataclass(frozen=True)
class MaskSpec:
    image_width: int
    image_height: int
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 <= self.image_width
                and 0 <= self.y0 < self.y1 <= self.image_height):
            raise SynthesisError(f"invalid mask region {self}")

    @property
    def region(self) -> tuple[int, int, int, int]:
        return self.x0, self.y0, self.x1, self.y1

    def as_array(self) -> np.ndarray:
        m = np.zeros((self.image_height, self.image_width), dtype=bool)
        m[self.y0:self.y1, self.x0:self.x1] = True
        return m


def mask_from_box(box: BoundingBox, image_width: int, image_height: int) -> MaskSpec:
    if box.w <= 0 or box.h <= 0:
        raise SynthesisError(f"degenerate box {box}")
    if not box.fits(image_width, image_height):
        raise SynthesisError(f"box {box} does not fit a {image_width}x{image_height} image")
    return MaskSpec(image_width, image_height, *rasterize_bounds(box, image_width, image_height))


@dataclass(frozen=True)
class GeneratorRequest:
    image: np.ndarray
    mask: MaskSpec
    prompt: PromptSpec
    seed: int

    def __post_init__(self):
        if self.image.dtype != np.uint8 or self.image.ndim != 3 or self.image.shape[2] != 3:
            raise SynthesisError("generator input must be an HxWx3 uint8 array")
        if self.image.shape[:2] != (self.mask.image_height, self.mask.image_width):
            raise SynthesisError(
                f"image {self.image.shape[:2]} does not match mask "
                f"{(self.mask.image_height, self.mask.image_width)}")


@dataclass(frozen=True)
class GeneratorResult:
    image: np.ndarray
    generator_id: str
    latency: float


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    kind = rng.integers(4)
    freq = rng.uniform(0.35, 0.9)
    if kind == 0:
        theta = rng.uniform(0, np.pi)
        t = np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta)))
    elif kind == 1:
        t = np.sign(np.sin(freq * xx) * np.sin(freq * yy))
    elif kind == 2:
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        t = np.sin(freq * np.hypot(yy - cy, xx - cx))
    else:
        t = rng.uniform(-1, 1, size=(h, w))
    a, b = rng.integers(0, 256, size=(2, 3))
    mix = (0.5 * (t + 1.0))[..., None]
    tex = mix * a + (1 - mix) * b + rng.normal(0, 24, size=(h, w, 3))
    return np.clip(tex, 0, 255).astype(np.uint8)


def _context_fill(rng: np.random.Generator, image: np.ndarray, m: "MaskSpec") -> np.ndarray:
    """Background for the hole: the mean colour of a 2-pixel ring around it, plus noise."""
    h, w = image.shape[:2]
    ring = np.zeros((h, w), dtype=bool)
    ring[max(m.y0 - 2, 0):m.y1 + 2, max(m.x0 - 2, 0):m.x1 + 2] = True
    ring[m.y0:m.y1, m.x0:m.x1] = False
    base = image[ring].mean(axis=0) if ring.any() else rng.uniform(40, 215, 3)
    hh, ww = m.y1 - m.y0, m.x1 - m.x0
    fill = base + rng.normal(0, 6, size=(hh, ww, 3))
    return np.clip(fill, 0, 255)


def _blob_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """An irregular polygon roughly centred in an h x w box."""
    k = int(rng.integers(3, 10))
    angles = np.sort(rng.uniform(0, 2 * np.pi, k))
    radii = rng.uniform(0.35, 1.0, k)
    cy, cx = h / 2 + rng.uniform(-0.1, 0.1) * h, w / 2 + rng.uniform(-0.1, 0.1) * w
    pts = [(float(cx + r * np.cos(a) * w * 0.48), float(cy + r * np.sin(a) * h * 0.48))
           for a, r in zip(angles, radii)]
    canvas = Image.new("L", (w, h), 0)
    ImageDraw.Draw(canvas).polygon(pts, fill=255)
    return np.asarray(canvas) > 0


def mock_generate(request: GeneratorRequest) -> GeneratorResult:
    """Inpaint an irregular object into the mask; leave every other pixel untouched.

    The hole is refilled with the surrounding colour, then a random polygon
    is painted on top, either flat-coloured or textured. Output is keyed by
    (prompt digest, seed, region), so repeated requests return identical bytes.
    """
    start = time.perf_counter()
    m = request.mask
    key = hashlib.sha256(
        f"{request.prompt.digest()}|{request.seed}|{m.region}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(key[:8], "little"))
    h, w = m.y1 - m.y0, m.x1 - m.x0
    patch = _context_fill(rng, request.image, m)
    blob = _blob_mask(rng, h, w)
    if rng.random() < 0.6:
        color = rng.integers(0, 256, size=3).astype(np.float64)
        obj = color + rng.normal(0, 4, size=(h, w, 3))
    else:
        obj = _texture(rng, h, w).astype(np.float64)
    patch[blob] = obj[blob]
    out = request.image.copy()
    out[m.y0:m.y1, m.x0:m.x1] = np.clip(patch, 0, 255).astype(np.uint8)
    return GeneratorResult(out, MockGenerator.generator_id, time.perf_counter() - start)


class MockGenerator:
    generator_id = "mock-procedural-v2"
    max_in_flight = 64

    def generate(self, request: GeneratorRequest) -> GeneratorResult:
        return mock_generate(request)


def encode_png(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def generator_payload(request: GeneratorRequest) -> dict:
    p = request.prompt
    return {
        "image_png_b64": base64.b64encode(encode_png(request.image)).decode("ascii"),
        "mask": {"x0": request.mask.x0, "y0": request.mask.y0,
                 "x1": request.mask.x1, "y1": request.mask.y1},
        "prompt": p.text if p.kind == "generic_text" else None,
        "embedding": list(p.embedding) if p.kind == "perturbed_embedding" else None,
        "seed": int(request.seed),
    }


class HttpGenerator:
    """Client for a remote inpainting service (PNG in, PNG out, base64 in JSON)."""

    def __init__(self, url: str, timeout: float = 120.0, retries: int = 2, max_in_flight: int = 1):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.max_in_flight = max_in_flight
        self.generator_id = url

    def generate(self, request: GeneratorRequest) -> GeneratorResult:
        start = time.perf_counter()
        body = post_json(self.url, generator_payload(request), timeout=self.timeout,
                         retries=self.retries)
        try:
            image = decode_png(base64.b64decode(body["image_png_b64"]))
            gid = str(body["generator_id"])
        except (KeyError, TypeError, ValueError, OSError) as exc:
            raise ContractError(f"malformed generator response: {exc!r}") from exc
        if image.shape != request.image.shape:
            raise ContractError(f"generator changed image shape {request.image.shape} -> {image.shape}")
        self.generator_id = gid
        return GeneratorResult(image, gid, time.perf_counter() - start)


@dataclass
class InpaintResult:
    image: np.ndarray
    replaced: list[int]
    prompts: list[PromptSpec] = field(default_factory=list)
    object_seeds: list[int] = field(default_factory=list)
    generator_id: str | None = None


def inpaint_sequence(image: np.ndarray, boxes: Sequence[BoundingBox],
                     prompt_for: Callable[[str, int], PromptSpec], generator, seed: int,
                     class_names: Mapping[int, str]) -> InpaintResult:
    """Inpaint every eligible box in order, each step feeding on the previous output.

    ``prompt_for(class_name, object_seed)`` builds the conditioning for one
    object. Any exception aborts the whole image; the caller's buffer is
    never modified.
    """
    h, w = image.shape[:2]
    current = image
    result = InpaintResult(image, [])
    for i, box in enumerate(boxes):
        if not synthesis_eligible(box):
            continue
        obj_seed = derive_seed(seed, i)
        prompt = prompt_for(class_names[box.category_id], obj_seed)
        req = GeneratorRequest(current, mask_from_box(box, w, h), prompt, obj_seed)
        out = generator.generate(req)
        if out.image.shape != current.shape:
            raise ContractError("generator output shape differs from input")
        current = out.image
        result.replaced.append(i)
        result.prompts.append(prompt)
        result.object_seeds.append(obj_seed)
        result.generator_id = out.generator_id
    result.image = current if result.replaced else image.copy()
    return result


@dataclass(frozen=True)
class ManifestEntry:
    source_image_id: int
    output_image_id: int
    replaced_boxes: tuple[int, ...]
    replaced_classes: tuple[str, ...]
    strategy: str
    prompts: tuple[dict, ...]
    object_seeds: tuple[int, ...]
    generator_id: str
    seed: int
    sigma: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ManifestEntry":
        d = json.loads(line)
        for key in ("replaced_boxes", "replaced_classes", "prompts", "object_seeds"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class SynthesisManifest:
    entries: tuple[ManifestEntry, ...]

    def __post_init__(self):
        outs = [e.output_image_id for e in self.entries]
        if len(set(outs)) != len(outs):
            raise SynthesisError("output image ids repeat in manifest")

    def __len__(self):
        return len(self.entries)

    def write(self, path) -> None:
        Path(path).write_text("".join(e.to_json() + "\n" for e in self.entries))

    @classmethod
    def read(cls, path) -> "SynthesisManifest":
        lines = Path(path).read_text().splitlines()
        return cls(tuple(ManifestEntry.from_json(ln) for ln in lines if ln.strip()))


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def save_png(image: np.ndarray, path) -> None:
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


@dataclass
class SynthesisSummary:
    sampled: int = 0
    rejected_ineligible: int = 0
    boxes_replaced: int = 0
    boxes_skipped_small: int = 0
    failures: int = 0


def _draw_sources(d_in: DetectionDataset, n: int, seed: int, summary: SynthesisSummary) -> list[int]:
    ids = [im.id for im in d_in.images]
    if n > 0 and not ids:
        raise DatasetError("cannot sample from an empty dataset")
    ok = {im.id: bool(eligible_indices(d_in.annotations_for(im.id))) for im in d_in.images}
    frac = sum(ok.values()) / len(ids) if ids else 0.0
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    cap = RETRY_FACTOR * n
    while len(chosen) < n:
        if frac == 0.0 or summary.rejected_ineligible > cap:
            raise SynthesisError(
                f"retry cap {cap} exhausted after {summary.rejected_ineligible} rejections; "
                f"only {frac:.2%} of images have a box larger than the area threshold")
        image_id = ids[int(rng.integers(len(ids)))]
        if ok[image_id]:
            chosen.append(image_id)
        else:
            summary.rejected_ineligible += 1
    summary.sampled = len(chosen)
    return chosen


def build_ood_dataset(d_in: DetectionDataset, n: int, strategy: str, generator, out_dir,
                      sigma: float | None = None, embedder=None, seed: int = 0,
                      workers: int = 1) -> tuple[DetectionDataset, SynthesisManifest, SynthesisSummary]:
    """Sample ``n`` source images with replacement and turn their boxes into outliers.

    Writes ``ood_images/*.png``, ``ood_annotations.json`` and
    ``manifest.jsonl`` under ``out_dir``. On any failure everything written
    by this call is removed before the exception propagates.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    if strategy == "distance" and (sigma is None or embedder is None):
        raise ValueError("distance strategy needs sigma and an embedder")
    if n < 0:
        raise ValueError("n must be non-negative")

    summary = SynthesisSummary()
    sources = _draw_sources(d_in, n, seed, summary)
    names = d_in.category_names

    embeddings = {}
    if strategy == "distance":
        for cid, name in d_in.in_distribution_categories():
            embeddings[name] = embed_class_name(name, embedder)

        def prompt_for(class_name: str, obj_seed: int) -> PromptSpec:
            return perturb_embedding(embeddings[class_name], sigma, obj_seed)
    else:
        prompt_for = random_generic_prompt

    out_dir = Path(out_dir)
    img_dir = out_dir / OOD_IMAGE_DIR
    created_dir = not img_dir.exists()
    img_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def work(j: int):
        src = d_in.image(sources[j])
        anns = d_in.annotations_for(src.id)
        pixels = load_rgb(d_in.image_path(src))
        if pixels.shape[:2] != (src.height, src.width):
            raise DatasetError(f"image {src.id} is {pixels.shape[1]}x{pixels.shape[0]}, "
                               f"annotations say {src.width}x{src.height}")
        res = inpaint_sequence(pixels, [a.box for a in anns], prompt_for, generator,
                               derive_seed(seed, j), names)
        return j, res

    ood_cat = max((cid for cid, _ in d_in.categories), default=0) + 1
    categories = list(d_in.categories)
    if OOD_CATEGORY_NAME in names.values():
        ood_cat = d_in.category_id(OOD_CATEGORY_NAME)
    else:
        categories.append((ood_cat, OOD_CATEGORY_NAME))

    images, annotations, entries = [], [], []
    limit = max(1, min(workers, getattr(generator, "max_in_flight", 1)))
    try:
        with ThreadPoolExecutor(max_workers=limit) as pool:
            for j, res in pool.map(work, range(n)):
                out_id = j + 1
                src = d_in.image(sources[j])
                rel = f"{OOD_IMAGE_DIR}/{out_id:06d}.png"
                path = out_dir / rel
                save_png(res.image, path)
                written.append(path)
                anns = d_in.annotations_for(src.id)
                replaced = set(res.replaced)
                summary.boxes_replaced += len(replaced)
                summary.boxes_skipped_small += len(anns) - len(replaced)
                images.append(ImageRecord(out_id, rel, src.width, src.height))
                for k, a in enumerate(anns):
                    if k in replaced:
                        b = a.box
                        annotations.append(Annotation(out_id, BoundingBox(b.x, b.y, b.w, b.h, ood_cat), True))
                    else:
                        annotations.append(Annotation(out_id, a.box, False))
                entries.append(ManifestEntry(
                    source_image_id=src.id,
                    output_image_id=out_id,
                    replaced_boxes=tuple(res.replaced),
                    replaced_classes=tuple(names[anns[k].box.category_id] for k in res.replaced),
                    strategy=strategy,
                    prompts=tuple(p.record() for p in res.prompts),
                    object_seeds=tuple(res.object_seeds),
                    generator_id=res.generator_id or getattr(generator, "generator_id", "unknown"),
                    seed=derive_seed(seed, j),
                    sigma=float(sigma) if strategy == "distance" else None,
                ))
        d_ood = DetectionDataset(categories, images, annotations, root=str(out_dir))
        manifest = SynthesisManifest(tuple(entries))
        save_dataset(d_ood, out_dir / ANNOTATION_FILE)
        written.append(out_dir / ANNOTATION_FILE)
        manifest.write(out_dir / MANIFEST_FILE)
        written.append(out_dir / MANIFEST_FILE)
    except BaseException:
        summary.failures += 1
        for p in written:
            p.unlink(missing_ok=True)
        if created_dir:
            shutil.rmtree(img_dir, ignore_errors=True)
        raise
    log.info("synthesized %d images (%d boxes replaced, %d small boxes kept, %d rejected draws)",
             n, summary.boxes_replaced, summary.boxes_skipped_small, summary.rejected_ineligible)
    return d_ood, manifest, summary
