"""Procedural synthetic scenes: articulated stick figures interacting with
simple object glyphs, rendered with full ground truth.

Every sample carries exactly what the rest of the pipeline needs: a
pre-interaction scene (person, no object), an object cutout on neutral gray,
the post-interaction composite, joint positions (stamped into the images as
small unique-color markers so the color-keyed pose estimator can find them),
the object silhouette, the interaction region, and the unchanged mask.

The changed area between pre and post is snapped to its bounding rectangle:
the unchanged mask is defined as the complement of the rasterized interaction
region, so region and mask tile the canvas exactly. Pixel-level diffing
(`derive_unchanged_mask`) is still exposed and is what the snap starts from.

The generator doubles as the only bundled backend of the importer interface;
real-data importers can implement `DatasetImporter` and reuse the same
manifest/statistics plumbing.
"""

import dataclasses
import json
import math
import os

import numpy as np
from PIL import Image, ImageDraw

from .errors import (
    GenerationError,
    ParameterError,
    ShapeError,
)
from .geometry import (
    KeypointSet,
    Mask,
    bbox_of_mask,
    invert_mask,
    rasterize_box,
    register_skeleton,
)
from .losses import ColorMarkerPoseEstimator
from .records import (
    CompositionRecord,
    load_record,
    read_manifest,
    save_mask,
    save_record,
    validate_record,
    write_manifest,
)

SKELETON_ID = "stick9"

JOINT_NAMES = (
    "head",
    "neck",
    "hip",
    "l_elbow",
    "l_hand",
    "r_elbow",
    "r_hand",
    "l_foot",
    "r_foot",
)

# One saturated, well-separated marker color per joint; the pose estimator
# keys on these, so they must stay far from object/background palettes.
JOINT_COLORS = {
    "head": (1.00, 0.00, 0.00),
    "neck": (0.00, 0.90, 0.00),
    "hip": (0.10, 0.10, 1.00),
    "l_elbow": (1.00, 1.00, 0.00),
    "l_hand": (1.00, 0.00, 1.00),
    "r_elbow": (0.00, 1.00, 1.00),
    "r_hand": (1.00, 0.55, 0.00),
    "l_foot": (0.55, 0.00, 1.00),
    "r_foot": (0.00, 0.55, 0.55),
}

OBJECT_PALETTE = {
    "pink": (1.00, 0.75, 0.80),
    "azure": (0.68, 0.85, 0.90),
    "mint": (0.60, 0.98, 0.60),
    "sand": (0.96, 0.87, 0.70),
    "plum": (0.87, 0.63, 0.87),
}

BACKGROUND_PALETTE = (
    (0.15, 0.15, 0.18),
    (0.18, 0.20, 0.15),
    (0.12, 0.16, 0.20),
    (0.20, 0.15, 0.15),
)

LIMB_COLOR = (0.06, 0.06, 0.06)
NEUTRAL_GRAY = 0.5

INTERACTION_TYPES = ("hold", "lift", "wear")
GLYPHS = ("ball", "box", "hat")

register_skeleton(SKELETON_ID, len(JOINT_NAMES))

_PROMPTS = {
    "hold": (
        "A figure is holding a {color} {noun}.",
        "A person holds a {color} {noun} in one hand.",
        "Someone is holding a {color} {noun}.",
    ),
    "lift": (
        "A figure lifts a {color} {noun} overhead.",
        "A person is lifting a {color} {noun} above their head.",
        "Someone raises a {color} {noun} overhead.",
    ),
    "wear": (
        "A figure is wearing a {color} {noun}.",
        "A person wears a {color} {noun} on their head.",
        "Someone has a {color} {noun} on their head.",
    ),
}

_MAX_ANGLE = math.pi


@dataclasses.dataclass
class SyntheticSceneSpec:
    """Full parameterization of one scene pair (pre + post interaction)."""

    canvas: int = 64
    interaction: str = "hold"
    glyph: str = "ball"
    object_scale: float = 0.12  # half-extent as a fraction of canvas side
    object_color_name: str = "pink"
    background_color: tuple = BACKGROUND_PALETTE[0]
    figure_x: float = 0.5
    leg_spread: float = 0.07
    # (left shoulder, left elbow, right shoulder, right elbow) radians,
    # measured from straight-down; shoulders swing arms outward.
    arm_angles_pre: tuple = (0.15, 0.1, 0.15, 0.1)
    arm_angles_post: tuple = (0.2, 0.15, 1.5, 0.3)

    def __post_init__(self):
        if self.canvas < 16:
            raise ParameterError(f"canvas must be >= 16 px, got {self.canvas}")
        if self.interaction not in INTERACTION_TYPES:
            raise ParameterError(
                f"unknown interaction {self.interaction!r}, expected one of {INTERACTION_TYPES}"
            )
        if self.glyph not in GLYPHS:
            raise ParameterError(f"unknown glyph {self.glyph!r}, expected one of {GLYPHS}")
        if self.object_scale <= 0:
            raise ParameterError(f"object scale must be positive, got {self.object_scale}")
        if self.object_color_name not in OBJECT_PALETTE:
            raise ParameterError(f"unknown object color {self.object_color_name!r}")
        if not (0.0 < self.figure_x < 1.0):
            raise ParameterError(f"figure_x must be in (0, 1), got {self.figure_x}")
        for angles in (self.arm_angles_pre, self.arm_angles_post):
            if len(angles) != 4 or any(abs(a) > _MAX_ANGLE for a in angles):
                raise GenerationError(
                    f"arm angles out of articulation limits (|a| <= pi): {angles}"
                )

    @property
    def object_color(self) -> tuple:
        return OBJECT_PALETTE[self.object_color_name]


def _joint_positions(spec: SyntheticSceneSpec, pose: str) -> dict:
    if pose not in ("pre", "post"):
        raise ParameterError(f"pose must be 'pre' or 'post', got {pose!r}")
    angles = spec.arm_angles_pre if pose == "pre" else spec.arm_angles_post
    l_sh, l_el, r_sh, r_el = angles
    cx = spec.figure_x
    neck = (cx, 0.40)
    hip = (cx, 0.62)
    head = (cx, 0.285)
    upper, lower = 0.13, 0.12

    def arm(base, sh, el, side):
        ex = base[0] + side * upper * math.sin(sh)
        ey = base[1] + upper * math.cos(sh)
        hx = ex + side * lower * math.sin(sh + el)
        hy = ey + lower * math.cos(sh + el)
        return (ex, ey), (hx, hy)

    l_elbow, l_hand = arm(neck, l_sh, l_el, -1.0)
    r_elbow, r_hand = arm(neck, r_sh, r_el, +1.0)
    l_foot = (cx - spec.leg_spread, hip[1] + 0.26)
    r_foot = (cx + spec.leg_spread, hip[1] + 0.26)
    return {
        "head": head,
        "neck": neck,
        "hip": hip,
        "l_elbow": l_elbow,
        "l_hand": l_hand,
        "r_elbow": r_elbow,
        "r_hand": r_hand,
        "l_foot": l_foot,
        "r_foot": r_foot,
    }


def _object_extent(spec: SyntheticSceneSpec) -> tuple:
    """(half width, half height) of the glyph in normalized units."""
    s = spec.object_scale
    if spec.glyph == "hat":
        return (1.1 * s, 0.7 * s)
    return (s, s)


def _object_center(spec: SyntheticSceneSpec, joints: dict) -> tuple:
    ex, ey = _object_extent(spec)
    if spec.interaction == "hold":
        return joints["r_hand"]
    if spec.interaction == "lift":
        hands_y = min(joints["l_hand"][1], joints["r_hand"][1])
        # Held between the raised hands; keep the top edge on canvas.
        return (spec.figure_x, max(hands_y - 0.2 * ey, ey + 0.015))
    head_top = joints["head"][1] - 0.055
    return (spec.figure_x, head_top - 0.55 * ey)


def _to_px(xy: tuple, canvas: int) -> tuple:
    return (xy[0] * canvas, xy[1] * canvas)


def _draw_glyph(draw: ImageDraw.ImageDraw, spec: SyntheticSceneSpec, center: tuple, canvas: int, fill):
    ex, ey = _object_extent(spec)
    cx, cy = _to_px(center, canvas)
    ex_px, ey_px = ex * canvas, ey * canvas
    if spec.glyph == "ball":
        draw.ellipse([cx - ex_px, cy - ey_px, cx + ex_px, cy + ey_px], fill=fill)
    elif spec.glyph == "box":
        draw.rectangle([cx - ex_px, cy - ey_px, cx + ex_px, cy + ey_px], fill=fill)
    else:  # hat: triangle crown over a thin brim
        draw.polygon(
            [(cx - ex_px, cy + ey_px * 0.4), (cx + ex_px, cy + ey_px * 0.4), (cx, cy - ey_px)],
            fill=fill,
        )
        draw.rectangle(
            [cx - ex_px, cy + ey_px * 0.4, cx + ex_px, cy + ey_px], fill=fill
        )


def _rgb255(color) -> tuple:
    return tuple(int(round(255 * c)) for c in color)


def render_scene(spec: SyntheticSceneSpec, pose: str, with_object: bool):
    """Render one scene; returns (image float32, joints dict, object Mask).

    The object mask is all zeros when ``with_object`` is false. Raises
    GenerationError when the glyph would leave the canvas.
    """
    canvas = spec.canvas
    joints = _joint_positions(spec, pose)
    img = Image.new("RGB", (canvas, canvas), _rgb255(spec.background_color))
    draw = ImageDraw.Draw(img)
    limb_w = max(1, round(canvas / 32))
    limb = _rgb255(LIMB_COLOR)
    bones = (
        ("head", "neck"),
        ("neck", "hip"),
        ("neck", "l_elbow"),
        ("l_elbow", "l_hand"),
        ("neck", "r_elbow"),
        ("r_elbow", "r_hand"),
        ("hip", "l_foot"),
        ("hip", "r_foot"),
    )
    for a, b in bones:
        draw.line([_to_px(joints[a], canvas), _to_px(joints[b], canvas)], fill=limb, width=limb_w)
    hx, hy = _to_px(joints["head"], canvas)
    hr = 0.055 * canvas
    draw.ellipse([hx - hr, hy - hr, hx + hr, hy + hr], outline=limb, width=limb_w)

    object_mask = np.zeros((canvas, canvas), dtype=np.float32)
    if with_object:
        center = _object_center(spec, joints)
        ex, ey = _object_extent(spec)
        if (
            center[0] - ex < 0.01
            or center[0] + ex > 0.99
            or center[1] - ey < 0.01
            or center[1] + ey > 0.99
        ):
            raise GenerationError(
                f"object at {center} with extent ({ex:.3f}, {ey:.3f}) leaves the canvas"
            )
        overlay = Image.new("L", (canvas, canvas), 0)
        _draw_glyph(ImageDraw.Draw(overlay), spec, center, canvas, fill=255)
        object_mask = (np.asarray(overlay) > 0).astype(np.float32)
        _draw_glyph(draw, spec, center, canvas, fill=_rgb255(spec.object_color))

    # Joint markers go on top so the pose estimator always sees them.
    mr = max(1, round(canvas / 32))
    for name in JOINT_NAMES:
        jx, jy = _to_px(joints[name], canvas)
        draw.rectangle(
            [jx - mr, jy - mr, jx + mr, jy + mr], fill=_rgb255(JOINT_COLORS[name])
        )

    arr = np.asarray(img, dtype=np.float32) / np.float32(255.0)
    return arr, joints, Mask(object_mask, binary=True)


def render_object_cutout(spec: SyntheticSceneSpec):
    """The foreground input: glyph centered on neutral gray, plus its mask."""
    canvas = spec.canvas
    img = Image.new("RGB", (canvas, canvas), _rgb255((NEUTRAL_GRAY,) * 3))
    overlay = Image.new("L", (canvas, canvas), 0)
    center = (0.5, 0.5)
    _draw_glyph(ImageDraw.Draw(img), spec, center, canvas, fill=_rgb255(spec.object_color))
    _draw_glyph(ImageDraw.Draw(overlay), spec, center, canvas, fill=255)
    arr = np.asarray(img, dtype=np.float32) / np.float32(255.0)
    mask = Mask((np.asarray(overlay) > 0).astype(np.float32), binary=True)
    return arr, mask


def derive_unchanged_mask(pre: np.ndarray, post: np.ndarray, tolerance: float = 2.0 / 255.0) -> Mask:
    """Binary mask, 1 where max-channel |pre - post| <= tolerance."""
    a = np.asarray(pre, dtype=np.float64)
    b = np.asarray(post, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        diff = np.abs(a - b).max(axis=2)
    else:
        diff = np.abs(a - b)
    return Mask((diff <= tolerance).astype(np.float32), binary=True)


def pose_category(spec: SyntheticSceneSpec) -> str:
    l_sh, _l_el, r_sh, _r_el = spec.arm_angles_post
    peak = max(abs(l_sh), abs(r_sh))
    if peak < 0.6:
        return "arms-down"
    if peak < 2.0:
        return "arm-forward"
    return "arms-raised"


@dataclasses.dataclass
class SyntheticSample:
    record: CompositionRecord
    joints: KeypointSet  # post-interaction joint positions
    object_mask: Mask  # object silhouette in scene coordinates
    extras: dict


def generate_synthetic_record(
    spec: SyntheticSceneSpec, seed: int = 0, record_id: str = None
) -> SyntheticSample:
    """Render a fully labeled sample from a scene spec.

    ``seed`` picks the prompt template; everything visual comes from the
    spec, so a fixed (spec, seed) pair reproduces byte-identical images.
    """
    pre_img, _joints_pre, _ = render_scene(spec, "pre", with_object=False)
    post_img, joints_post, object_mask = render_scene(spec, "post", with_object=True)

    diff_unchanged = derive_unchanged_mask(pre_img, post_img)
    region = bbox_of_mask(invert_mask(diff_unchanged))
    h, w = pre_img.shape[:2]
    # Snap to a rectangle: unchanged mask = complement of the rasterized
    # region, so the two tile the canvas exactly.
    region_mask = rasterize_box(region, h, w)
    unchanged = invert_mask(region_mask)

    fg_img, _fg_mask = render_object_cutout(spec)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CE11E]))
    template = _PROMPTS[spec.interaction][int(rng.integers(len(_PROMPTS[spec.interaction])))]
    noun = spec.glyph
    prompt = template.format(color=spec.object_color_name, noun=noun)
    start = prompt.rfind(noun)
    span = (start, start + len(noun))

    points = np.array(
        [[joints_post[n][0], joints_post[n][1], 1.0] for n in JOINT_NAMES], dtype=np.float64
    )
    if points[:, :2].min() < 0.0 or points[:, :2].max() > 1.0:
        raise GenerationError("a joint left the canvas; shrink the figure or move its anchor")
    joints = KeypointSet(points=points, skeleton_id=SKELETON_ID)

    record = CompositionRecord(
        record_id=record_id or f"rec{seed:06d}",
        background=pre_img,
        foreground=fg_img,
        composite=post_img,
        prompt=prompt,
        foreground_span=span,
        interaction_region=region,
        object_box=bbox_of_mask(object_mask),
        unchanged_mask=unchanged,
    )
    extras = {
        "interaction_type": spec.interaction,
        "pose_category": pose_category(spec),
        "glyph": spec.glyph,
        "object_color_name": spec.object_color_name,
        "object_color": list(spec.object_color),
        "object_area_ratio": float(object_mask.values.mean()),
        "joints": points.tolist(),
        "skeleton_id": SKELETON_ID,
    }
    return SyntheticSample(record=record, joints=joints, object_mask=object_mask, extras=extras)


def random_scene_spec(rng: np.random.Generator, interaction: str = None, canvas: int = 64) -> SyntheticSceneSpec:
    """Sample a well-formed spec; placement is kept on-canvas by construction."""
    interaction = interaction or INTERACTION_TYPES[int(rng.integers(len(INTERACTION_TYPES)))]
    glyph = "hat" if interaction == "wear" else GLYPHS[int(rng.integers(2))]
    color = list(OBJECT_PALETTE)[int(rng.integers(len(OBJECT_PALETTE)))]
    background = BACKGROUND_PALETTE[int(rng.integers(len(BACKGROUND_PALETTE)))]
    jitter = rng.uniform(-0.05, 0.05)

    def arms_down():
        return (
            rng.uniform(0.08, 0.3),
            rng.uniform(0.05, 0.25),
            rng.uniform(0.08, 0.3),
            rng.uniform(0.05, 0.25),
        )

    if interaction == "hold":
        scale = float(rng.uniform(0.08, 0.16))
        figure_x = float(rng.uniform(0.35, 0.5))
        post = (
            rng.uniform(0.1, 0.3),
            rng.uniform(0.05, 0.2),
            rng.uniform(1.3, 1.7),
            rng.uniform(0.1, 0.5),
        )
    elif interaction == "lift":
        scale = float(rng.uniform(0.08, 0.13))
        figure_x = float(rng.uniform(0.4, 0.6))
        post = (
            rng.uniform(2.4, 2.9),
            rng.uniform(0.05, 0.3),
            rng.uniform(2.4, 2.9),
            rng.uniform(0.05, 0.3),
        )
    else:  # wear
        scale = float(rng.uniform(0.09, 0.14))
        figure_x = float(rng.uniform(0.4, 0.6))
        post = (
            rng.uniform(0.4, 0.7),
            rng.uniform(0.2, 0.5),
            rng.uniform(0.4, 0.7),
            rng.uniform(0.2, 0.5),
        )
    return SyntheticSceneSpec(
        canvas=canvas,
        interaction=interaction,
        glyph=glyph,
        object_scale=scale,
        object_color_name=color,
        background_color=tuple(min(max(c + jitter, 0.02), 0.35) for c in background),
        figure_x=figure_x,
        leg_spread=float(rng.uniform(0.05, 0.1)),
        arm_angles_pre=arms_down(),
        arm_angles_post=tuple(post),
    )


def default_pose_estimator(beta: float = 60.0) -> ColorMarkerPoseEstimator:
    colors = np.array([JOINT_COLORS[n] for n in JOINT_NAMES], dtype=np.float64)
    return ColorMarkerPoseEstimator(colors, skeleton_id=SKELETON_ID, beta=beta)


class DatasetImporter:
    """Contract for dataset backends.

    ``import_records(out_dir)`` must write per-record rows (JSON files under
    ``rows/``) plus their images/masks, and return the row file paths;
    ``build_manifest`` then validates and assembles the manifest. ``keep``
    is a predicate hook (record, extras) -> bool for exclusion rules
    (e.g. multi-person or occlusion filters in real-data backends).
    """

    def import_records(self, out_dir: str) -> list:
        raise NotImplementedError


class SyntheticImporter(DatasetImporter):
    def __init__(self, count: int, seed: int = 0, canvas: int = 64, interactions=None, keep=None):
        if count < 0:
            raise ParameterError(f"count must be >= 0, got {count}")
        self.count = count
        self.seed = seed
        self.canvas = canvas
        self.interactions = tuple(interactions) if interactions else INTERACTION_TYPES
        for it in self.interactions:
            if it not in INTERACTION_TYPES:
                raise ParameterError(f"unknown interaction type {it!r}")
        self.keep = keep

    def import_records(self, out_dir: str) -> list:
        rows_dir = os.path.join(out_dir, "rows")
        os.makedirs(rows_dir, exist_ok=True)
        paths = []
        for i in range(self.count):
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, i]))
            interaction = self.interactions[i % len(self.interactions)]
            spec = random_scene_spec(rng, interaction=interaction, canvas=self.canvas)
            rid = f"rec{i:05d}"
            sample = generate_synthetic_record(
                spec, seed=int(rng.integers(2 ** 31)), record_id=rid
            )
            if self.keep is not None and not self.keep(sample.record, sample.extras):
                continue
            mask_path = os.path.join("masks", f"{rid}_object.png")
            save_mask(sample.object_mask, os.path.join(out_dir, mask_path))
            extras = dict(sample.extras)
            extras["object_mask"] = mask_path
            row = save_record(sample.record, out_dir, extras=extras)
            row_path = os.path.join(rows_dir, f"{rid}.json")
            with open(row_path, "w", encoding="utf-8") as fh:
                json.dump(row, fh, sort_keys=True)
            paths.append(row_path)
        return paths


def size_bucket(area_ratio: float) -> str:
    if area_ratio < 0.10:
        return "small"
    if area_ratio <= 0.30:
        return "medium"
    return "large"


def build_manifest(records_dir: str):
    """Validate every row under ``records_dir``/rows and assemble the manifest.

    Returns (manifest_path, stats dict). Invalid or unreadable records land
    in rejects.jsonl with their violation strings; they never abort the run.
    """
    rows_dir = os.path.join(records_dir, "rows")
    row_files = []
    if os.path.isdir(rows_dir):
        row_files = sorted(
            os.path.join(rows_dir, f) for f in os.listdir(rows_dir) if f.endswith(".json")
        )
    accepted, rejected = [], []
    stats = {
        "total": 0,
        "by_interaction": {},
        "by_pose_category": {},
        "by_size_bucket": {},
    }
    for path in row_files:
        try:
            with open(path, encoding="utf-8") as fh:
                row = json.load(fh)
            record, extras = load_record(row, records_dir)
            violations = validate_record(record)
        except Exception as exc:
            rejected.append({"row_file": os.path.basename(path), "violations": [f"{type(exc).__name__}: {exc}"]})
            continue
        if violations:
            rejected.append({"row_file": os.path.basename(path), "id": row.get("id"), "violations": violations})
            continue
        accepted.append(row)
        stats["total"] += 1
        for key, value in (
            ("by_interaction", extras.get("interaction_type", "unknown")),
            ("by_pose_category", extras.get("pose_category", "unknown")),
            (
                "by_size_bucket",
                size_bucket(float(extras["object_area_ratio"]))
                if "object_area_ratio" in extras
                else "unknown",
            ),
        ):
            stats[key][value] = stats[key].get(value, 0) + 1

    manifest_path = os.path.join(records_dir, "manifest.jsonl")
    write_manifest(accepted, manifest_path)
    rejects_path = os.path.join(records_dir, "rejects.jsonl")
    with open(rejects_path, "w", encoding="utf-8") as fh:
        for item in rejected:
            fh.write(json.dumps(item, sort_keys=True) + "\n")
    stats["rejected"] = len(rejected)
    with open(os.path.join(records_dir, "stats.json"), "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
    return manifest_path, stats


def generate_dataset(
    out_dir: str,
    count: int,
    seed: int = 0,
    canvas: int = 64,
    interactions=None,
):
    """Generate, serialize, validate, and index a synthetic dataset."""
    importer = SyntheticImporter(count, seed=seed, canvas=canvas, interactions=interactions)
    importer.import_records(out_dir)
    return build_manifest(out_dir)


def split_dataset(manifest_path: str, ratios, seed: int = 0) -> dict:
    """Stratified train/val/test split by interaction type.

    ``ratios`` are three non-negative numbers summing to 1. Within each
    interaction type, records are seed-shuffled and allocated by largest
    remainder, so per-type proportions stay within one record of the
    requested ratios. Writes manifest_<split>.jsonl next to the input.
    """
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ParameterError(f"need three non-negative ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ParameterError(f"ratios must sum to 1, got sum {sum(ratios)}")
    rows = read_manifest(manifest_path)
    by_type = {}
    for row in rows:
        by_type.setdefault(row.get("interaction_type", "unknown"), []).append(row)

    split_names = ("train", "val", "test")
    buckets = {name: [] for name in split_names}
    for type_idx, type_name in enumerate(sorted(by_type)):
        group = sorted(by_type[type_name], key=lambda r: r["id"])
        rng = np.random.default_rng(np.random.SeedSequence([seed, type_idx]))
        rng.shuffle(group)
        n = len(group)
        ideal = [n * r for r in ratios]
        counts = [int(math.floor(v)) for v in ideal]
        remainder = n - sum(counts)
        by_frac = sorted(range(3), key=lambda i: (-(ideal[i] - counts[i]), i))
        for i in range(remainder):
            counts[by_frac[i % 3]] += 1
        offset = 0
        for name, c in zip(split_names, counts):
            buckets[name].extend(group[offset : offset + c])
            offset += c

    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    out = {}
    for name in split_names:
        path = os.path.join(base_dir, f"manifest_{name}.jsonl")
        write_manifest(sorted(buckets[name], key=lambda r: r["id"]), path)
        out[name] = path
    return out
