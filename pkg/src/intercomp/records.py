"""Dataset records: the unit of training/eval data, plus PNG/JSONL persistence.

A record bundles the six things one composition needs: the clean background
scene with the person, the isolated foreground object, the ground-truth
composite, the text prompt with the character span naming the object, the
interaction region box, and the binary mask of pixels the composition must
not touch. The mask and the region are redundant by construction (the region
is the bounding box of the mask's complement); `validate_record` checks that
redundancy instead of trusting it.

On disk a dataset is a root directory with ``images/``, ``masks/``, and a
``manifest.jsonl`` whose rows reference those files by relative path. PNG
round trips are byte-exact: images are stored as 8-bit RGB, masks as 8-bit
grayscale 0/255.
"""

import dataclasses
import json
import os

import numpy as np
from PIL import Image

from .errors import ShapeError, ValidationError
from .geometry import Box, EmptyRegionError, Mask, bbox_of_mask, invert_mask

MANIFEST_NAME = "manifest.jsonl"


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Float [0,1] -> uint8 with round-half-away behaviour stable across platforms."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6:
        raise ValidationError(
            f"image values must lie in [0, 1], got range [{arr.min():.4g}, {arr.max():.4g}]"
        )
    return np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)


def to_float(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float32) / np.float32(255.0)


def save_image(image: np.ndarray, path: str):
    """Write an (H, W, 3) float [0,1] array as RGB PNG."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got shape {arr.shape}")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(to_uint8(arr), mode="RGB").save(path, format="PNG")


def load_image(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return to_float(np.asarray(im.convert("RGB")))


def save_mask(mask: Mask, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    data = to_uint8(mask.values)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def load_mask(path: str, binary: bool = True) -> Mask:
    with Image.open(path) as im:
        arr = to_float(np.asarray(im.convert("L")))
    if binary:
        return Mask((arr >= 0.5).astype(np.float32), binary=True)
    return Mask(arr, binary=False)


@dataclasses.dataclass
class CompositionRecord:
    """One training/eval sample for interaction-aware composition."""

    record_id: str
    background: np.ndarray  # (H, W, 3) float32 in [0, 1], person without object
    foreground: np.ndarray  # (H, W, 3) float32 in [0, 1], object on neutral ground
    composite: np.ndarray  # (H, W, 3) float32 in [0, 1], ground-truth result
    prompt: str
    foreground_span: tuple  # (start, end) character span naming the object
    interaction_region: Box
    object_box: Box
    unchanged_mask: Mask  # binary, 1 = pixel must stay untouched

    def image_shape(self) -> tuple:
        return self.background.shape[:2]


def _span_ok(span, prompt: str) -> bool:
    try:
        start, end = int(span[0]), int(span[1])
    except (TypeError, ValueError, IndexError):
        return False
    return 0 <= start < end <= len(prompt)


def validate_record(record: CompositionRecord, pixel_tolerance: int = 1) -> list:
    """Return a list of violation strings; empty means the record is sound.

    Checks, in order: image shapes agree, mask matches those shapes and is
    binary, the prompt and its object span are usable, box coordinates are
    finite (guaranteed by Box), and the interaction region agrees with the
    bounding box of the mask's complement to within ``pixel_tolerance``
    pixels per edge.
    """
    violations = []
    shapes = {
        "background": record.background.shape,
        "foreground": record.foreground.shape,
        "composite": record.composite.shape,
    }
    for name, shape in shapes.items():
        if len(shape) != 3 or shape[2] != 3:
            violations.append(f"{name} image is not (H, W, 3)")
    base = record.background.shape
    for name in ("foreground", "composite"):
        if shapes[name][:2] != base[:2]:
            violations.append(f"image dimension mismatch: {name} {shapes[name][:2]} vs background {base[:2]}")

    if not record.unchanged_mask.binary:
        violations.append("unchanged mask is not binary")
    if record.unchanged_mask.shape != base[:2]:
        violations.append(
            f"mask dimension mismatch: {record.unchanged_mask.shape} vs image {base[:2]}"
        )

    if not record.prompt.strip():
        violations.append("prompt is empty")
    if not _span_ok(record.foreground_span, record.prompt):
        violations.append("foreground span out of bounds for prompt")

    if record.unchanged_mask.binary and record.unchanged_mask.shape == base[:2]:
        h, w = record.unchanged_mask.shape
        try:
            derived = bbox_of_mask(invert_mask(record.unchanged_mask))
        except EmptyRegionError:
            violations.append("region/mask mismatch: unchanged mask has no complement")
        else:
            tol_x = pixel_tolerance / w + 1e-9
            tol_y = pixel_tolerance / h + 1e-9
            region = record.interaction_region
            deltas = (
                abs(region.x0 - derived.x0) > tol_x,
                abs(region.y0 - derived.y0) > tol_y,
                abs(region.x1 - derived.x1) > tol_x,
                abs(region.y1 - derived.y1) > tol_y,
            )
            if any(deltas):
                violations.append(
                    "region/mask mismatch: interaction region "
                    f"{[round(v, 4) for v in region.as_list()]} vs mask complement "
                    f"{[round(v, 4) for v in derived.as_list()]}"
                )
    return violations


def record_notes(record: CompositionRecord) -> list:
    """Informational (non-fatal) observations about a record."""
    notes = []
    if not record.interaction_region.contains_box(record.object_box):
        notes.append("object box extends outside the interaction region")
    return notes


def save_record(record: CompositionRecord, root: str, extras: dict = None) -> dict:
    """Write a record's images/masks under ``root`` and return its manifest row."""
    rid = record.record_id
    paths = {
        "background": os.path.join("images", f"{rid}_bg.png"),
        "foreground": os.path.join("images", f"{rid}_fg.png"),
        "composite": os.path.join("images", f"{rid}_gt.png"),
        "unchanged_mask": os.path.join("masks", f"{rid}_unchanged.png"),
    }
    save_image(record.background, os.path.join(root, paths["background"]))
    save_image(record.foreground, os.path.join(root, paths["foreground"]))
    save_image(record.composite, os.path.join(root, paths["composite"]))
    save_mask(record.unchanged_mask, os.path.join(root, paths["unchanged_mask"]))
    row = {
        "id": rid,
        "background": paths["background"],
        "foreground": paths["foreground"],
        "composite": paths["composite"],
        "unchanged_mask": paths["unchanged_mask"],
        "prompt": record.prompt,
        "foreground_span": [int(record.foreground_span[0]), int(record.foreground_span[1])],
        "interaction_region": record.interaction_region.as_list(),
        "object_box": record.object_box.as_list(),
    }
    if extras:
        overlap = set(extras) & set(row)
        if overlap:
            raise ValidationError(f"extras would shadow record fields: {sorted(overlap)}")
        row.update(extras)
    return row


_ROW_FIELDS = {
    "id",
    "background",
    "foreground",
    "composite",
    "unchanged_mask",
    "prompt",
    "foreground_span",
    "interaction_region",
    "object_box",
}


def load_record(row: dict, root: str):
    """Inverse of save_record: returns (CompositionRecord, extras dict)."""
    missing = _ROW_FIELDS - set(row)
    if missing:
        raise ValidationError(f"manifest row missing fields: {sorted(missing)}")
    record = CompositionRecord(
        record_id=str(row["id"]),
        background=load_image(os.path.join(root, row["background"])),
        foreground=load_image(os.path.join(root, row["foreground"])),
        composite=load_image(os.path.join(root, row["composite"])),
        prompt=row["prompt"],
        foreground_span=(int(row["foreground_span"][0]), int(row["foreground_span"][1])),
        interaction_region=Box.from_list(row["interaction_region"]),
        object_box=Box.from_list(row["object_box"]),
        unchanged_mask=load_mask(os.path.join(root, row["unchanged_mask"])),
    )
    extras = {k: v for k, v in row.items() if k not in _ROW_FIELDS}
    return record, extras


def write_manifest(rows: list, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_manifest(path: str) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{line_no}: invalid JSON row") from exc
    return rows
