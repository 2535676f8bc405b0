"""Desk-scale detector: a ground-truth-crop classifier with objectness and OOD heads.

Supervision follows the outlier-aware recipe for two-stage detectors:

* the class head sees in-distribution crops only,
* the objectness head treats in-distribution *and* OOD crops as objects and
  random background crops as non-objects,
* the scalar OOD head is fit on the energies of both object populations.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .dataset import BoundingBox, DetectionDataset, rasterize_bounds
from .energy import OODHeadParams
from .metrics import iou

log = logging.getLogger(__name__)

LOSS_VARIANTS = ("focal", "bce")
LOG_COLUMNS = ("epoch", "step", "lr", "cls_loss", "objness_loss", "ood_loss", "total")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 18
    batch_size: int = 16
    learning_rate: float = 0.02
    lr_decay_epochs: tuple[int, ...] = (12, 16)
    lr_decay_factor: float = 0.1
    weight_decay: float = 1e-5
    ood_loss_weight: float = 10.0
    loss_variant: str = "focal"
    focal_gamma: float = 2.0
    seed: int = 0
    crop_size: int = 32
    head_hidden: int = 16
    head_activation: str = "softplus"
    backgrounds_per_image: int = 1
    grad_clip_norm: float | None = 5.0

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        if self.learning_rate <= 0 or self.weight_decay < 0 or not 0 < self.lr_decay_factor <= 1:
            raise ValueError("rates must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if any(e >= self.epochs for e in self.lr_decay_epochs):
            raise ValueError("decay epochs must precede the final epoch")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive or null")
        if self.focal_gamma < 0 or self.ood_loss_weight < 0:
            raise ValueError("focal_gamma and ood_loss_weight must be non-negative")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``; decays apply once an epoch boundary is passed."""
        n = sum(1 for e in self.lr_decay_epochs if epoch > e)
        return self.learning_rate * self.lr_decay_factor ** n


class TorchOODHead(nn.Module):
    def __init__(self, hidden: int = 16, activation: str = "softplus"):
        super().__init__()
        self.fc1 = nn.Linear(1, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        self.activation = activation

    def forward(self, energy: torch.Tensor) -> torch.Tensor:
        z = self.fc1(energy[:, None])
        a = F.softplus(z) if self.activation == "softplus" else torch.tanh(z)
        return self.fc2(a)[:, 0]

    def export(self) -> OODHeadParams:
        return OODHeadParams(
            self.fc1.weight.detach().double().numpy()[:, 0],
            self.fc1.bias.detach().double().numpy(),
            self.fc2.weight.detach().double().numpy()[0],
            float(self.fc2.bias.detach()),
            self.activation,
        )


class CropDetector(nn.Module):
    def __init__(self, num_classes: int, feature_dim: int = 64, head_hidden: int = 16,
                 head_activation: str = "softplus"):
        super().__init__()
        self.num_classes = num_classes
        self.backbone = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.BatchNorm2d(16), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1), nn.BatchNorm2d(32), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(32, 32, 3, padding=1), nn.BatchNorm2d(32), nn.ReLU(), nn.MaxPool2d(2),
            nn.Flatten(),
        )
        self.penultimate = nn.LazyLinear(feature_dim)
        self.cls_head = nn.Linear(feature_dim, num_classes)
        self.obj_head = nn.Linear(feature_dim, 1)
        self.ood_head = TorchOODHead(head_hidden, head_activation)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.penultimate(self.backbone(x)))

    def forward(self, x: torch.Tensor):
        v = self.features(x)
        return v, self.cls_head(v), self.obj_head(v)[:, 0]


def torch_energy(logits: torch.Tensor) -> torch.Tensor:
    return -torch.logsumexp(logits, dim=1)


def torch_ood_loss(phi: torch.Tensor, is_in: torch.Tensor, variant: str, gamma: float) -> torch.Tensor:
    """Sum of per-population mean losses; ``phi`` is the in-distribution logit."""
    sign = torch.where(is_in, 1.0, -1.0).to(phi.dtype)
    u = sign * phi
    nll = F.softplus(-u)
    terms = nll if variant == "bce" or gamma == 0 else torch.sigmoid(-u) ** gamma * nll
    loss = phi.new_zeros(())
    for sel in (is_in, ~is_in):
        if bool(sel.any()):
            loss = loss + terms[sel].mean()
    return loss


# -- crop extraction -------------------------------------------------------

@dataclass
class CropSet:
    pixels: torch.Tensor          # N x 3 x S x S, float32 in [0, 1]
    labels: torch.Tensor          # class index, -1 for OOD, -2 for background
    sources: list = field(default_factory=list)

    @property
    def kind(self) -> torch.Tensor:
        return torch.where(self.labels >= 0, 0, torch.where(self.labels == -1, 1, 2))

    def __len__(self):
        return len(self.labels)


def _crop(image: Image.Image, bounds, size: int) -> np.ndarray:
    c = image.crop(bounds).resize((size, size), Image.BILINEAR)
    return np.asarray(c, dtype=np.float32).transpose(2, 0, 1) / 255.0


def _background_box(rng, width, height, boxes, attempts: int = 30):
    for _ in range(attempts):
        s = int(rng.integers(12, max(13, min(width, height) // 2 + 1)))
        x = int(rng.integers(0, width - s + 1))
        y = int(rng.integers(0, height - s + 1))
        cand = BoundingBox(x, y, s, s, 0)
        if all(iou(cand, b) < 0.3 for b in boxes):
            return (x, y, x + s, y + s)
    return None


def class_index_map(ds: DetectionDataset) -> dict[int, int]:
    """Category id -> contiguous class index over in-distribution categories."""
    return {cid: k for k, (cid, _) in enumerate(ds.in_distribution_categories())}


def extract_crops(ds: DetectionDataset, crop_size: int, class_index: dict[int, int] | None = None,
                  backgrounds_per_image: int = 0, seed: int = 0) -> CropSet:
    """Crop every annotation (and optional background patches) to ``crop_size``.

    Labels are the contiguous class index, -1 for OOD annotations and -2 for
    background patches; without ``class_index`` every object gets label 0.
    """
    missing = [str(ds.image_path(im)) for im in ds.images if not ds.image_path(im).exists()]
    if missing:
        raise FileNotFoundError(f"missing image files: {missing[:10]}"
                                + (f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""))
    rng = np.random.default_rng(seed)
    pix, labels, sources = [], [], []
    for im in ds.images:
        anns = ds.annotations_for(im.id)
        with Image.open(ds.image_path(im)) as raw:
            image = raw.convert("RGB")
            for k, a in enumerate(anns):
                pix.append(_crop(image, rasterize_bounds(a.box, im.width, im.height), crop_size))
                labels.append(-1 if a.is_ood else (class_index[a.box.category_id] if class_index else 0))
                sources.append((im.id, k))
            for _ in range(backgrounds_per_image):
                bounds = _background_box(rng, im.width, im.height, [a.box for a in anns])
                if bounds is not None:
                    pix.append(_crop(image, bounds, crop_size))
                    labels.append(-2)
                    sources.append((im.id, -1))
    if not pix:
        return CropSet(torch.zeros(0, 3, crop_size, crop_size), torch.zeros(0, dtype=torch.long), [])
    return CropSet(torch.from_numpy(np.stack(pix)), torch.tensor(labels, dtype=torch.long), sources)


# -- training --------------------------------------------------------------

def classification_loss(model: CropDetector, x_in: torch.Tensor, y_in: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over in-distribution crops only.

    The sub-batch is forwarded on its own, so OOD crops sharing the
    training batch cannot influence this loss or its gradients.
    """
    if len(y_in) == 0:
        return model.cls_head.weight.new_zeros(())
    _, logits, _ = model(x_in)
    return F.cross_entropy(logits, y_in)


def split_batch(pixels: torch.Tensor, labels: torch.Tensor):
    is_in = labels >= 0
    return pixels[is_in], labels[is_in], pixels[~is_in], labels[~is_in]


def batch_losses(model: CropDetector, pixels: torch.Tensor, labels: torch.Tensor,
                 config: TrainConfig, use_ood: bool = True) -> dict[str, torch.Tensor]:
    x_in, y_in, x_rest, y_rest = split_batch(pixels, labels)
    cls = classification_loss(model, x_in, y_in)

    x_all = torch.cat([x_in, x_rest])
    labels_all = torch.cat([y_in, y_rest])
    _, logits, obj = model(x_all)
    is_object = labels_all != -2
    obj_loss = F.binary_cross_entropy_with_logits(obj, is_object.to(obj.dtype))

    ood = obj.new_zeros(())
    if use_ood and config.ood_loss_weight > 0:
        sel = is_object
        if bool(sel.any()):
            phi = model.ood_head(torch_energy(logits[sel]))
            ood = torch_ood_loss(phi, labels_all[sel] >= 0, config.loss_variant, config.focal_gamma)
    total = cls + obj_loss + config.ood_loss_weight * ood
    return {"cls_loss": cls, "objness_loss": obj_loss, "ood_loss": ood, "total": total}


def classification_head_grad(model: CropDetector, pixels: torch.Tensor, labels: torch.Tensor):
    """Gradient of the classification loss w.r.t. the class-head weight and bias."""
    x_in, y_in, _, _ = split_batch(pixels, labels)
    loss = classification_loss(model, x_in, y_in)
    return torch.autograd.grad(loss, [model.cls_head.weight, model.cls_head.bias])


@dataclass
class TrainResult:
    model: CropDetector
    head: OODHeadParams
    log: list[dict]
    config: TrainConfig
    categories: list
    seconds: float = 0.0


def train_toy_detector(ds: DetectionDataset, config: TrainConfig, seed: int | None = None,
                       baseline: bool = False, crops: CropSet | None = None) -> TrainResult:
    """Train on a combined in-distribution + OOD dataset.

    ``baseline=True`` trains the same network without OOD crops or OOD loss,
    the reference for in-distribution accuracy.
    """
    seed = config.seed if seed is None else seed
    if not baseline and not any(a.is_ood for a in ds.annotations):
        raise TrainingError("dataset holds no OOD annotations; the in/out loss needs both "
                            "an in-distribution and an OOD population")
    class_index = class_index_map(ds)
    if crops is None:
        crops = extract_crops(ds, config.crop_size, class_index, config.backgrounds_per_image, seed)
    if baseline:
        keep = crops.labels != -1
        crops = CropSet(crops.pixels[keep], crops.labels[keep],
                        [s for s, k in zip(crops.sources, keep.tolist()) if k])

    torch.manual_seed(seed)
    model = CropDetector(len(class_index), head_hidden=config.head_hidden,
                         head_activation=config.head_activation)
    with torch.no_grad():
        model(crops.pixels[:1])  # materialize lazy layers before building the optimizer
    torch.manual_seed(seed)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            m.reset_parameters()
    opt = torch.optim.SGD(model.parameters(), lr=config.learning_rate, momentum=0.0,
                          weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(seed)
    rows = []
    start = time.perf_counter()
    step = 0
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        order = torch.randperm(len(crops), generator=gen)
        sums = dict.fromkeys(LOG_COLUMNS[3:], 0.0)
        nb = 0
        for b in range(0, len(order), config.batch_size):
            idx = order[b:b + config.batch_size]
            losses = batch_losses(model, crops.pixels[idx], crops.labels[idx], config,
                                  use_ood=not baseline)
            opt.zero_grad()
            losses["total"].backward()
            if config.grad_clip_norm is not None:
                nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
            opt.step()
            step += 1
            nb += 1
            for k in sums:
                sums[k] += losses[k].item()
        row = {"epoch": epoch, "step": step, "lr": lr}
        row.update({k: v / max(nb, 1) for k, v in sums.items()})
        rows.append(row)
        log.info("epoch %d lr %.4g total %.4f cls %.4f obj %.4f ood %.4f", epoch, lr,
                 row["total"], row["cls_loss"], row["objness_loss"], row["ood_loss"])
    model.eval()
    return TrainResult(model, model.ood_head.export(), rows, config,
                       list(ds.in_distribution_categories()), time.perf_counter() - start)


def write_training_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in LOG_COLUMNS})


def read_training_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in r.items()}
                for r in csv.DictReader(fh)]


# -- representations and checkpoints ---------------------------------------

@dataclass(frozen=True)
class ObjectRepresentation:
    feature: np.ndarray
    logits: np.ndarray
    source: tuple[int, int]
    is_ood: bool | None = None
    category_id: int | None = None
    objectness: float = 0.0


@torch.no_grad()
def extract_representations(model: CropDetector, ds: DetectionDataset,
                            crop_size: int = 32, batch_size: int = 256) -> list[ObjectRepresentation]:
    """One representation per annotation: penultimate features and class logits."""
    crops = extract_crops(ds, crop_size)
    model.eval()
    feats, logits, objs = [], [], []
    for b in range(0, len(crops), batch_size):
        v, g, o = model(crops.pixels[b:b + batch_size])
        feats.append(v.double().numpy())
        logits.append(g.double().numpy())
        objs.append(o.double().numpy())
    if not feats:
        return []
    feats, logits, objs = np.concatenate(feats), np.concatenate(logits), np.concatenate(objs)
    reps = []
    for r, (image_id, k) in enumerate(crops.sources):
        ann = ds.annotations_for(image_id)[k]
        reps.append(ObjectRepresentation(feats[r], logits[r], (image_id, k), ann.is_ood,
                                         ann.box.category_id, float(objs[r])))
    return reps


def save_checkpoint(result: TrainResult, path, seed: int | None = None) -> None:
    torch.save({
        "format": "boxood-crop-detector-v1",
        "state_dict": result.model.state_dict(),
        "ood_head": result.head.to_dict(),
        "train_config": asdict(result.config),
        "seed": result.config.seed if seed is None else seed,
        "categories": [list(c) for c in result.categories],
        "num_classes": result.model.num_classes,
    }, path)


def load_checkpoint(path) -> tuple[CropDetector, OODHeadParams, TrainConfig, list]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != "boxood-crop-detector-v1":
        raise TrainingError(f"{path} is not a crop-detector checkpoint")
    cfg = TrainConfig(**blob["train_config"])
    model = CropDetector(blob["num_classes"], head_hidden=cfg.head_hidden,
                         head_activation=cfg.head_activation)
    with torch.no_grad():
        model(torch.zeros(1, 3, cfg.crop_size, cfg.crop_size))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, OODHeadParams.from_dict(blob["ood_head"]), cfg, [tuple(c) for c in blob["categories"]]
