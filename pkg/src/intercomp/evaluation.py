"""Bench harness: background-preservation SSIM, region IoU, ablation grids.

Native metrics are computed locally; heavyweight learned metrics (FID-like,
prompt-alignment, interaction detectors) enter only through the
ExternalScorer interface so the harness stays runnable on a laptop. A bench
run writes per-instance JSONL, an aggregate metrics JSON, a Markdown summary
table, a contact sheet, and a small figure, all under one output directory.
"""

import concurrent.futures
import dataclasses
import json
import logging
import os
import threading

import numpy as np

from .conditioning import build_bundle
from .errors import (
    DimensionError,
    EmptyComplementError,
    ParameterError,
    ValidationError,
)
from .geometry import Box, Mask, rasterize_box
from .losses import LossCoefficients
from .model import TrainSettings, sample, samples_from_manifest, train
from .records import load_mask, load_record, read_manifest, save_image
from .region_guidance import InteractionSpec, propose_interaction
from . import reporting

log = logging.getLogger(__name__)

IOU_THRESHOLDS = (0.3, 0.5, 0.7)

# Full-scale reference numbers, shown in summaries for context only. This
# desk-scale harness does not attempt to reproduce them.
REFERENCE_SSIM_BG = 96.57
REFERENCE_HOI = 87.39
REFERENCE_FOOTER = (
    f"Full-scale reference: SSIM(BG)={REFERENCE_SSIM_BG}, HOI={REFERENCE_HOI} "
    "(context only; not reproduced at desk scale)."
)

_WINDOW = 11
_SIGMA = 1.5
_C1 = (0.01 * 1.0) ** 2
_C2 = (0.03 * 1.0) ** 2


def _ssim_window() -> np.ndarray:
    half = (_WINDOW - 1) / 2.0
    xs = np.arange(_WINDOW, dtype=np.float64) - half
    g = np.exp(-(xs**2) / (2.0 * _SIGMA**2))
    g /= g.sum()
    return g


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a 2-d image with a 1-d kernel."""
    k = kernel.shape[0]
    rows = np.stack([np.convolve(row, kernel[::-1], mode="valid") for row in img])
    cols = np.stack(
        [np.convolve(col, kernel[::-1], mode="valid") for col in rows.T]
    ).T
    assert cols.shape == (img.shape[0] - k + 1, img.shape[1] - k + 1)
    return cols


def ssim_bg(generated, reference, interaction_region: Box) -> float:
    """Mean SSIM over windows lying fully outside the interaction region.

    Standard single-scale SSIM (11x11 Gaussian window, sigma 1.5, constants
    C1=(0.01L)^2 and C2=(0.03L)^2 with L=1 for float images), computed per
    channel and averaged. Any window whose footprint intersects the
    rasterized region is excluded, so region pixels never contaminate the
    complement statistics.
    """
    a = np.asarray(generated, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.ndim != 3:
        raise DimensionError(f"expected (H, W, C) images, got shape {a.shape}")
    h, w = a.shape[:2]
    if h < _WINDOW or w < _WINDOW:
        raise EmptyComplementError(
            f"image {h}x{w} smaller than the {_WINDOW}x{_WINDOW} SSIM window"
        )
    region = rasterize_box(interaction_region, h, w).values
    ones = np.ones(_WINDOW, dtype=np.float64)
    touched = _filter_valid(region.astype(np.float64), ones)
    keep = touched == 0.0
    if not keep.any():
        raise EmptyComplementError(
            "interaction region leaves no SSIM window untouched"
        )
    kernel = _ssim_window()
    values = []
    for c in range(a.shape[2]):
        x = a[:, :, c]
        y = b[:, :, c]
        mu_x = _filter_valid(x, kernel)
        mu_y = _filter_valid(y, kernel)
        xx = _filter_valid(x * x, kernel) - mu_x * mu_x
        yy = _filter_valid(y * y, kernel) - mu_y * mu_y
        xy = _filter_valid(x * y, kernel) - mu_x * mu_y
        ssim_map = ((2 * mu_x * mu_y + _C1) * (2 * xy + _C2)) / (
            (mu_x**2 + mu_y**2 + _C1) * (xx + yy + _C2)
        )
        values.append(ssim_map[keep])
    return float(np.mean(np.concatenate(values)))


def region_iou(predicted: Box, ground_truth: Box) -> float:
    """Intersection over union of two normalized boxes."""
    inter = predicted.intersect(ground_truth)
    if inter is None:
        return 0.0
    union = predicted.area + ground_truth.area - inter.area
    return float(inter.area / union)


def mask_iou(a: Mask, b: Mask) -> float:
    if a.values.shape != b.values.shape:
        raise DimensionError(
            f"mask shapes differ: {a.values.shape} vs {b.values.shape}"
        )
    av = a.binarize().values > 0.5
    bv = b.binarize().values > 0.5
    union = np.logical_or(av, bv).sum()
    if union == 0:
        raise ValidationError("mask IoU undefined: both masks are empty")
    return float(np.logical_and(av, bv).sum() / union)


def object_color_mask(image, color, tol: float = 0.25) -> Mask:
    """Binary mask of pixels within ``tol`` (euclidean RGB) of a known color."""
    img = np.asarray(image, dtype=np.float64)
    ref = np.asarray(color, dtype=np.float64).reshape(1, 1, 3)
    dist = np.sqrt(((img - ref) ** 2).sum(axis=2))
    return Mask((dist < tol).astype(np.float32), binary=True)


def foreground_iou(generated, object_mask: Mask, object_color, tol: float = 0.25) -> float:
    """IoU between the color-segmented object in a render and its target mask."""
    return mask_iou(object_color_mask(generated, object_color, tol=tol), object_mask)


class ExternalScorer:
    """Interface for heavyweight learned metrics.

    Implementations must be deterministic for a fixed checkpoint and say
    whether concurrent calls are safe via ``reentrant``.
    """

    name = "external"
    version = "0"
    reentrant = True

    def score(self, images, references=None, prompts=None) -> float:
        raise NotImplementedError

    @property
    def report_key(self) -> str:
        return f"{self.name}@{self.version}"


class NullScorer(ExternalScorer):
    """Placeholder scorer: always 0.0. Keeps report plumbing testable."""

    name = "null"
    version = "1"

    def score(self, images, references=None, prompts=None) -> float:
        return 0.0


class FixtureScorer(ExternalScorer):
    """Replays recorded values keyed by instance id (or a default)."""

    name = "fixture"
    version = "1"

    def __init__(self, values: dict, default: float = None):
        self.values = dict(values)
        self.default = default
        self._key = None

    def bind(self, instance_id: str):
        self._key = instance_id

    def score(self, images, references=None, prompts=None) -> float:
        if self._key in self.values:
            return float(self.values[self._key])
        if self.default is None:
            raise ValidationError(f"no fixture value for instance {self._key!r}")
        return float(self.default)


SCORER_REGISTRY = {"null": NullScorer, "fixture": FixtureScorer}


def register_scorer(name: str, factory):
    SCORER_REGISTRY[name] = factory


def make_scorer(spec) -> ExternalScorer:
    """Build a scorer from a registry name or {'name': ..., **kwargs} dict."""
    if isinstance(spec, str):
        name, kwargs = spec, {}
    elif isinstance(spec, dict):
        kwargs = dict(spec)
        name = kwargs.pop("name", None)
    else:
        raise ParameterError(f"scorer spec must be a name or dict, got {type(spec)}")
    if name not in SCORER_REGISTRY:
        raise ParameterError(
            f"unknown scorer {name!r}; registered: {sorted(SCORER_REGISTRY)}"
        )
    return SCORER_REGISTRY[name](**kwargs)


@dataclasses.dataclass
class BenchInstance:
    instance_id: str
    background: np.ndarray
    foreground: np.ndarray
    expected: InteractionSpec = None
    reference: np.ndarray = None
    object_mask: Mask = None
    object_color: tuple = None

    def __post_init__(self):
        if self.background is None or self.foreground is None:
            raise ValidationError(f"instance {self.instance_id}: images must be readable")


@dataclasses.dataclass
class BenchSpec:
    instances: list
    seeds: tuple = (0,)
    sample_steps: int = 20
    guidance_scale: float = None
    workers: int = 1

    def __post_init__(self):
        if not self.instances:
            raise ValidationError("bench spec needs at least one instance")
        if not self.seeds:
            raise ValidationError("bench spec needs at least one seed")
        if self.workers < 1:
            raise ParameterError(f"workers must be >= 1, got {self.workers}")


def bench_from_manifest(
    manifest_path: str,
    root: str = None,
    limit: int = None,
    seeds: tuple = (0,),
    sample_steps: int = 20,
    guidance_scale: float = None,
    workers: int = 1,
) -> BenchSpec:
    """Assemble bench instances (with ground truth) from a dataset manifest."""
    root = root or os.path.dirname(os.path.abspath(manifest_path))
    rows = read_manifest(manifest_path)
    if limit is not None:
        rows = rows[:limit]
    instances = []
    for row in rows:
        record, extras = load_record(row, root)
        object_mask = None
        if "object_mask" in extras:
            object_mask = load_mask(os.path.join(root, extras["object_mask"]))
        color = extras.get("object_color")
        instances.append(
            BenchInstance(
                instance_id=record.record_id,
                background=record.background,
                foreground=record.foreground,
                expected=InteractionSpec(
                    prompt=record.prompt,
                    object_box=record.object_box,
                    interaction_region=record.interaction_region,
                    foreground_span=record.foreground_span,
                ),
                reference=record.composite,
                object_mask=object_mask,
                object_color=tuple(color) if color is not None else None,
            )
        )
    return BenchSpec(
        instances=instances,
        seeds=tuple(seeds),
        sample_steps=sample_steps,
        guidance_scale=guidance_scale,
        workers=workers,
    )


def _bench_one(spec, state, instance, seed, client, scorers, templates, encoders, images_dir):
    row = {"instance_id": instance.instance_id, "seed": seed}
    proposed = instance.expected
    if client is not None:
        proposed = propose_interaction(
            client, instance.foreground, instance.background, templates=templates
        )
    if proposed is None:
        raise ValidationError(
            f"instance {instance.instance_id}: no ground truth and no region client"
        )
    bundle = build_bundle(
        background=instance.background,
        foreground=instance.foreground,
        prompt=proposed.prompt,
        foreground_span=proposed.foreground_span,
        interaction_region=proposed.interaction_region,
        encoders=encoders,
        latent_grid=state.config.grid,
    )
    image = sample(
        state,
        bundle,
        seed=seed,
        steps=spec.sample_steps,
        guidance_scale=spec.guidance_scale,
    )
    if images_dir is not None:
        rel = os.path.join("images", f"{instance.instance_id}_s{seed}.png")
        save_image(image, os.path.join(os.path.dirname(images_dir), rel))
        row["image"] = rel
    region_for_ssim = (
        instance.expected.interaction_region
        if instance.expected is not None
        else proposed.interaction_region
    )
    if instance.reference is not None:
        row["ssim_bg"] = ssim_bg(image, instance.reference, region_for_ssim)
    if client is not None and instance.expected is not None:
        row["region_iou"] = region_iou(
            proposed.interaction_region, instance.expected.interaction_region
        )
    if instance.object_mask is not None and instance.object_color is not None:
        row["foreground_iou"] = foreground_iou(
            image, instance.object_mask, instance.object_color
        )
    for scorer in scorers:
        if hasattr(scorer, "bind"):
            scorer.bind(instance.instance_id)
        row[scorer.report_key] = float(
            scorer.score([image], references=[instance.reference], prompts=[proposed.prompt])
        )
    return row, image


def _aggregate(rows: list) -> dict:
    """Mean per metric over successful rows, plus IoU threshold accuracies.

    Computed twice by independent routes (running sum and np.mean) and
    cross-checked, so a reweighting bug cannot slip into the summary.
    """
    ok = [r for r in rows if "error" not in r]
    agg = {"instances": len(rows), "ok": len(ok), "failed": len(rows) - len(ok)}
    keys = sorted({k for r in ok for k in r if isinstance(r[k], (int, float)) and k != "seed"})
    for key in keys:
        vals = [float(r[key]) for r in ok if key in r]
        if not vals:
            continue
        total = 0.0
        for v in vals:
            total += v
        mean_a = total / len(vals)
        mean_b = float(np.mean(np.asarray(vals, dtype=np.float64)))
        if abs(mean_a - mean_b) > 1e-9:
            raise ValidationError(f"aggregate cross-check failed for {key!r}")
        agg[f"{key}_mean"] = mean_b
        agg[f"{key}_count"] = len(vals)
    if any("region_iou" in r for r in ok):
        ious = [float(r["region_iou"]) for r in ok if "region_iou" in r]
        for thr in IOU_THRESHOLDS:
            agg[f"region_acc@{thr}"] = float(
                sum(1 for v in ious if v >= thr) / len(ious)
            )
    return agg


def _summary_markdown(rows: list, agg: dict) -> str:
    metric_keys = sorted(
        {k for r in rows for k in r if k not in ("instance_id", "seed", "image", "error")}
    )
    lines = ["# Bench summary", ""]
    header = ["instance", "seed"] + metric_keys + ["notes"]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for r in sorted(rows, key=lambda r: (r["instance_id"], r["seed"])):
        cells = [r["instance_id"], str(r["seed"])]
        for k in metric_keys:
            v = r.get(k)
            cells.append(f"{v:.4f}" if isinstance(v, (int, float)) else "")
        cells.append(f"error: {r['error']}" if "error" in r else "")
        lines.append("| " + " | ".join(cells) + " |")
    lines.append("")
    lines.append("## Aggregates")
    lines.append("")
    for k in sorted(agg):
        v = agg[k]
        lines.append(f"- {k}: {v:.6f}" if isinstance(v, float) else f"- {k}: {v}")
    lines.append("")
    lines.append(REFERENCE_FOOTER)
    lines.append("")
    return "\n".join(lines)


def run_bench(
    spec: BenchSpec,
    state,
    client=None,
    scorers: list = (),
    out_dir: str = None,
    templates=None,
) -> dict:
    """Render and score every bench instance; failures recorded, never fatal.

    Returns {"rows": per-instance dicts, "aggregates": means and accuracies,
    "paths": written files}. With ``out_dir`` set, writes instances.jsonl,
    metrics.json, summary.md, a contact sheet, and an aggregate figure.
    """
    encoders = state.encoders()
    images_dir = None
    if out_dir:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
        images_dir = os.path.join(out_dir, "images")

    jobs = [(inst, seed) for inst in spec.instances for seed in spec.seeds]
    rows = []
    renders = {}
    lock = threading.Lock()

    def runner(job):
        inst, seed = job
        try:
            row, image = _bench_one(
                spec, state, inst, seed, client, scorers, templates, encoders, images_dir
            )
        except Exception as exc:  # a bad instance must never abort the run
            log.warning("bench instance %s seed %s failed: %s", inst.instance_id, seed, exc)
            row, image = {"instance_id": inst.instance_id, "seed": seed, "error": str(exc)}, None
        with lock:
            rows.append(row)
            if image is not None:
                renders[(inst.instance_id, seed)] = image

    reentrant = all(getattr(s, "reentrant", False) for s in scorers)
    if spec.workers > 1 and reentrant:
        with concurrent.futures.ThreadPoolExecutor(max_workers=spec.workers) as pool:
            list(pool.map(runner, jobs))
    else:
        for job in jobs:
            runner(job)

    rows.sort(key=lambda r: (r["instance_id"], r["seed"]))
    agg = _aggregate(rows)
    report = {"rows": rows, "aggregates": agg, "paths": {}}

    if out_dir:
        inst_path = os.path.join(out_dir, "instances.jsonl")
        with open(inst_path, "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        metrics_path = os.path.join(out_dir, "metrics.json")
        with open(metrics_path, "w", encoding="utf-8") as fh:
            json.dump(agg, fh, indent=2, sort_keys=True)
        summary_path = os.path.join(out_dir, "summary.md")
        with open(summary_path, "w", encoding="utf-8") as fh:
            fh.write(_summary_markdown(rows, agg))
        report["paths"] = {
            "instances": inst_path,
            "metrics": metrics_path,
            "summary": summary_path,
        }
        ordered = [renders[key] for key in sorted(renders)]
        if ordered:
            report["paths"]["contact_sheet"] = reporting.contact_sheet(
                ordered, os.path.join(out_dir, "contact_sheet.png")
            )
        scalar_agg = {
            k: v
            for k, v in agg.items()
            if isinstance(v, float) and (k.endswith("_mean") or k.startswith("region_acc"))
        }
        if scalar_agg:
            report["paths"]["figure"] = reporting.bench_summary_figure(
                scalar_agg, os.path.join(out_dir, "aggregates.png")
            )
    return report


MODULATION_LABELS = {
    "residual": "Residual Strategy",
    "non_residual": "Non-residual Strategy",
    "off": "modulation off",
}

ABLATION_AXES = ("background_coefficient", "modulation", "views", "guidance")


def _cell_label(axis: str, value) -> str:
    if axis == "modulation":
        return MODULATION_LABELS.get(value, str(value))
    return str(value)


def run_ablation_grid(
    axis: str,
    values: list,
    train_samples: list,
    bench: BenchSpec,
    config=None,
    coeffs: LossCoefficients = None,
    settings: TrainSettings = None,
    seeds: tuple = (0,),
    out_dir: str = None,
) -> dict:
    """One training + bench run per (axis value, seed); failures don't abort.

    Returns {"axis", "cells": [{value, label, seed, aggregates | error}],
    "table": Markdown}. Every cell shares the same base configuration and
    seed so paired comparisons along the axis are meaningful.
    """
    if axis not in ABLATION_AXES:
        raise ParameterError(f"axis must be one of {ABLATION_AXES}, got {axis!r}")
    if not values:
        raise ParameterError("ablation needs at least one axis value")
    coeffs = coeffs or LossCoefficients()
    settings = settings or TrainSettings()

    cells = []
    for value in values:
        for seed in seeds:
            cell = {"value": value, "label": _cell_label(axis, value), "seed": seed}
            cell_coeffs = coeffs
            cell_settings = dataclasses.replace(settings, seed=seed)
            cell_bench = bench
            try:
                if axis == "background_coefficient":
                    cell_coeffs = dataclasses.replace(coeffs, alpha2=float(value))
                elif axis == "modulation":
                    cell_settings = dataclasses.replace(cell_settings, modulation=str(value))
                elif axis == "views":
                    cell_settings = dataclasses.replace(cell_settings, views=int(value))
                elif axis == "guidance":
                    cell_bench = dataclasses.replace(bench, guidance_scale=float(value))
                run_dir = None
                if out_dir:
                    tag = str(value).replace(".", "p").replace("-", "m")
                    run_dir = os.path.join(out_dir, "cells", f"{axis}_{tag}_s{seed}")
                state, _ = train(
                    train_samples,
                    config=config,
                    coeffs=cell_coeffs,
                    settings=cell_settings,
                    run_dir=run_dir,
                )
                bench_out = os.path.join(run_dir, "bench") if run_dir else None
                result = run_bench(cell_bench, state, out_dir=bench_out)
                cell["aggregates"] = result["aggregates"]
            except Exception as exc:  # record the cell and keep sweeping
                log.warning("ablation cell %s=%r seed %s failed: %s", axis, value, seed, exc)
                cell["error"] = str(exc)
            cells.append(cell)

    metric_keys = sorted(
        {k for c in cells if "aggregates" in c for k in c["aggregates"] if isinstance(c["aggregates"][k], float)}
    )
    lines = [f"# Ablation: {axis}", ""]
    header = ["setting", "seed"] + metric_keys
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    for c in cells:
        row = [c["label"], str(c["seed"])]
        if "error" in c:
            row += ["error: " + c["error"]] + [""] * (len(metric_keys) - 1 if metric_keys else 0)
        else:
            row += [f"{c['aggregates'].get(k, float('nan')):.4f}" for k in metric_keys]
        lines.append("| " + " | ".join(row) + " |")
    lines.append("")
    table = "\n".join(lines)

    grid = {"axis": axis, "cells": cells, "table": table}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "grid.json"), "w", encoding="utf-8") as fh:
            json.dump({"axis": axis, "cells": cells}, fh, indent=2, sort_keys=True, default=str)
        with open(os.path.join(out_dir, "grid.md"), "w", encoding="utf-8") as fh:
            fh.write(table + "\n")
        labels = [_cell_label(axis, v) for v in values]
        series = {}
        for key in metric_keys:
            if not key.endswith("_mean"):
                continue
            per_value = []
            for v in values:
                vals = [
                    c["aggregates"][key]
                    for c in cells
                    if c["value"] == v and "aggregates" in c and key in c["aggregates"]
                ]
                per_value.append(float(np.mean(vals)) if vals else None)
            series[key] = per_value
        if series:
            grid["figure"] = reporting.ablation_figure(
                axis, labels, series, os.path.join(out_dir, "grid.png")
            )
    return grid


def heldout_spec_and_samples(
    manifest_path: str,
    root: str = None,
    config=None,
    limit: int = None,
):
    """Convenience: training samples and a bench spec from the same manifest."""
    samples, _ = samples_from_manifest(manifest_path, root=root, config=config, limit=limit)
    bench = bench_from_manifest(manifest_path, root=root, limit=limit)
    return samples, bench
