"""Stage runners shared by the command line and the notebooks.

Layout of one run (``<output_root>/<run_id>/``)::

    config.json
    <variant>/synth/{ood_images/, ood_annotations.json, manifest.jsonl}
    <variant>/train/{checkpoint.pt, training_log.csv}
    <variant>/eval/{report.json, scores.csv, row.md, row.csv, outliers.png}
    baseline/train/...            (no OOD data, no OOD loss)
    sigma_sweep.png, report.md, report.csv

``<variant>`` is ``generic`` or ``sigma_<value>``. Each stage drops a
``.done`` marker; re-running a finished stage is a no-op.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import energy as E
from .config import PipelineConfig, validate
from .dataset import (
    BoundingBox,
    DetectionDataset,
    filter_ood_test,
    load_dataset,
    merge_datasets,
)
from .detector import (
    TrainingError,
    class_index_map,
    extract_representations,
    load_checkpoint,
    save_checkpoint,
    train_toy_detector,
    write_training_log,
)
from .metrics import (
    IN,
    OOD,
    Detection,
    MetricsError,
    MetricsReport,
    ScoredInstance,
    auroc,
    csv_rows,
    fpr_at_95_tpr,
    markdown_table,
    mean_average_precision,
    write_scores,
)
from .prompts import HttpEmbedder, MockEmbedder
from .synthesis import (
    ANNOTATION_FILE,
    MANIFEST_FILE,
    HttpGenerator,
    MockGenerator,
    SynthesisManifest,
    build_ood_dataset,
)

log = logging.getLogger(__name__)
DONE = ".done"


class EvaluationError(RuntimeError):
    pass


def variant_name(sigma) -> str:
    return "generic" if sigma is None else f"sigma_{sigma:g}"


def _done(path: Path) -> bool:
    return (path / DONE).exists()


def _mark(path: Path, info: dict) -> None:
    (path / DONE).write_text(json.dumps(info, indent=2, sort_keys=True))


def make_generator(cfg: PipelineConfig):
    g = cfg.generator
    if g.mock:
        return MockGenerator()
    return HttpGenerator(g.url, timeout=g.timeout, retries=g.retries, max_in_flight=g.max_in_flight)


def make_embedder(cfg: PipelineConfig):
    e = cfg.embedder
    if e.mock:
        return MockEmbedder(e.dim)
    return HttpEmbedder(e.url, timeout=e.timeout, retries=e.retries, max_in_flight=e.max_in_flight)


def load_in_dist(cfg: PipelineConfig) -> DetectionDataset:
    return load_dataset(cfg.resolve(cfg.paths.in_annotations), cfg.resolve(cfg.paths.in_images))


def prepare_run(cfg: PipelineConfig) -> Path:
    run = cfg.run_dir()
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.json").write_text(json.dumps(cfg.as_dict(), indent=2, sort_keys=True, default=list))
    return run


def synthesize(cfg: PipelineConfig) -> list[dict]:
    validate(cfg)
    d_in = load_in_dist(cfg)
    run = prepare_run(cfg)
    generator = make_generator(cfg)
    embedder = make_embedder(cfg) if cfg.strategy == "distance" else None
    summaries = []
    for sigma in cfg.sigmas:
        out = run / variant_name(sigma) / "synth"
        if _done(out):
            info = json.loads((out / DONE).read_text())
            info["status"] = "already complete"
            summaries.append(info)
            continue
        out.mkdir(parents=True, exist_ok=True)
        _, manifest, summary = build_ood_dataset(
            d_in, cfg.n_outlier_images, cfg.strategy, generator, out, sigma=sigma,
            embedder=embedder, seed=cfg.seed, workers=cfg.workers)
        info = {"variant": variant_name(sigma), "images": len(manifest), **asdict(summary),
                "output": str(out), "status": "complete"}
        _mark(out, info)
        summaries.append(info)
    return summaries


def train(cfg: PipelineConfig) -> list[dict]:
    validate(cfg)
    d_in = load_in_dist(cfg)
    run = cfg.run_dir()
    jobs = [(variant_name(s), False) for s in cfg.sigmas]
    if cfg.train_baseline:
        jobs.append(("baseline", True))
    for name, baseline in jobs:
        if not baseline:
            ann = run / name / "synth" / ANNOTATION_FILE
            if not ann.is_file():
                raise TrainingError(
                    f"no synthesized OOD dataset at {ann}: the in/out loss is an expectation over "
                    "both an in-distribution and an OOD population, run `synthesize` first")
    prepare_run(cfg)
    results = []
    for name, baseline in jobs:
        out = run / name / "train"
        if _done(out):
            results.append({**json.loads((out / DONE).read_text()), "status": "already complete"})
            continue
        data = d_in if baseline else merge_datasets(d_in, load_dataset(run / name / "synth" / ANNOTATION_FILE))
        res = train_toy_detector(data, cfg.train, baseline=baseline)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(res, out / "checkpoint.pt", seed=cfg.seed)
        write_training_log(res.log, out / "training_log.csv")
        info = {"variant": name, "epochs": len(res.log), "final_total": res.log[-1]["total"],
                "seconds": round(res.seconds, 2), "status": "complete"}
        _mark(out, info)
        results.append(info)
    return results


def score_dataset(model, head, ds: DetectionDataset, crop_size: int, truth: str):
    reps = extract_representations(model, ds, crop_size)
    inst = [ScoredInstance(E.ood_probability(r.logits, head), truth, r.source) for r in reps]
    return reps, inst


def detections_from(reps, ds: DetectionDataset, class_ids: list[int]) -> list[Detection]:
    """Treat each ground-truth crop as a proposal labelled with its top class.

    Confidence is the class softmax probability times the objectness
    probability, mirroring a two-stage detector's final score.
    """
    dets = []
    for r in reps:
        p = E.softmax(r.logits)
        k = int(np.argmax(p))
        b = ds.annotations_for(r.source[0])[r.source[1]].box
        dets.append(Detection(r.source[0], BoundingBox(b.x, b.y, b.w, b.h, class_ids[k]),
                              float(p[k] * E.sigmoid(r.objectness)), r.source[1]))
    return dets


def evaluate(cfg: PipelineConfig, checkpoint=None) -> list[MetricsReport]:
    """Score every variant of the run; ``checkpoint`` overrides a single-variant run's weights."""
    validate(cfg, stages=("evaluate",))
    if checkpoint is not None and len(cfg.sigmas) != 1:
        raise EvaluationError("an explicit checkpoint only applies to single-variant runs")
    run = cfg.run_dir()
    test = load_dataset(cfg.resolve(cfg.paths.in_test_annotations))
    in_names = [n for _, n in test.in_distribution_categories()]
    ood_test = filter_ood_test(load_dataset(cfg.resolve(cfg.paths.ood_test_annotations)), in_names)
    if not ood_test.annotations:
        raise EvaluationError("OOD test set is empty after removing in-distribution classes")

    baseline_acc = None
    if cfg.train_baseline and (run / "baseline" / "train" / "checkpoint.pt").is_file():
        model, _, tcfg, cats = load_checkpoint(run / "baseline" / "train" / "checkpoint.pt")
        _check_categories(cats, test)
        baseline_acc = crop_accuracy(extract_representations(model, test, tcfg.crop_size), test)

    reports = []
    for sigma in cfg.sigmas:
        name = variant_name(sigma)
        ckpt = Path(checkpoint) if checkpoint is not None else run / name / "train" / "checkpoint.pt"
        if not ckpt.is_file():
            raise EvaluationError(f"missing checkpoint {ckpt}; run `train` first")
        model, head, tcfg, cats = load_checkpoint(ckpt)
        _check_categories(cats, test)
        reps_in, inst_in = score_dataset(model, head, test, tcfg.crop_size, IN)
        _, inst_ood = score_dataset(model, head, ood_test, tcfg.crop_size, OOD)
        instances = inst_in + inst_ood
        class_ids = [cid for cid, _ in cats]
        dets = detections_from(reps_in, test, class_ids)
        mp = mean_average_precision(dets, test, cfg.metrics.iou_threshold)
        extra = {"crop_accuracy": crop_accuracy(reps_in, test),
                 "baseline_crop_accuracy": baseline_acc, "sigma": sigma, "strategy": cfg.strategy,
                 "ood_test_images": len(ood_test.images)}
        report = MetricsReport.from_fractions(
            auroc(instances), fpr_at_95_tpr(instances), mp["per_class_ap"], mp["map"],
            (len(inst_in), len(inst_ood)), config_digest=cfg.digest(),
            label=f"{cfg.strategy}" + ("" if sigma is None else f" (sigma={sigma:g})"), extra=extra)
        out = run / name / "eval"
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
        write_scores(instances, out / "scores.csv")
        (out / "row.md").write_text(markdown_table([report]))
        (out / "row.csv").write_text(csv_rows([report]))
        _outlier_figure(run / name / "synth", out / "outliers.png")
        reports.append(report)

    if len(reports) > 1:
        from .plots import sigma_sweep_plot
        sigma_sweep_plot(reports, [s for s in cfg.sigmas], run / "sigma_sweep.png")
    write_report(run, reports, cfg.metrics.include_reference_rows)
    return reports


def _check_categories(cats, test: DetectionDataset) -> None:
    expected = list(test.in_distribution_categories())
    if [tuple(c) for c in cats] != expected:
        raise EvaluationError(
            f"checkpoint trained on {len(cats)} categories {cats}, "
            f"evaluation set has {len(expected)} {expected}")


def crop_accuracy(reps, ds: DetectionDataset) -> float:
    ci = class_index_map(ds)
    hits = [int(np.argmax(r.logits)) == ci[r.category_id] for r in reps if not r.is_ood]
    if not hits:
        raise MetricsError("no in-distribution crops to score")
    return float(np.mean(hits))


def _outlier_figure(synth_dir: Path, path: Path) -> None:
    if not (synth_dir / MANIFEST_FILE).is_file():
        return
    from .plots import outlier_grid
    manifest = SynthesisManifest.read(synth_dir / MANIFEST_FILE)
    outlier_grid(manifest, synth_dir, path)


def write_report(run: Path, reports, include_reference: bool = True) -> str:
    md = markdown_table(reports, include_reference=include_reference)
    (run / "report.md").write_text(md)
    (run / "report.csv").write_text(csv_rows(reports))
    return md


def collect_reports(run: Path) -> list[MetricsReport]:
    return [MetricsReport.from_json(p.read_text()) for p in sorted(run.glob("*/eval/report.json"))]
