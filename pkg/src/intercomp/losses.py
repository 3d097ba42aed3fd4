"""Training objective: denoising + pose + background + appearance terms.

The composite objective is

    total = denoising + a1 * pose + a2 * background + a3 * appearance

with defaults (a1, a2, a3) = (1, 0.5, 0.8). Each auxiliary term compares the
one-step denoised estimate against ground truth in pixel space:

* pose: mean squared keypoint displacement, counting only keypoints whose
  ground-truth location falls inside the interaction region (membership is
  decided by ground truth so the count never depends on the model). Zero
  when no keypoint is inside.
* background: plain sum of masked squared pixel differences (channels summed
  inside the norm); kept as a sum, with an opt-in area normalization.
* appearance: mean over k paired synthetic views of (1 - cosine similarity)
  between semantic features of the predicted object and the reference
  cutout; bounded by [0, 2].

The perception backends (pose estimator, multi-view generator, feature
extractor) are deterministic differentiable toys so gradients reach the
generator during tests and desk-scale training; real backends can replace
them behind the same small interfaces.
"""

import dataclasses
import json
import math

import numpy as np
import torch

from .errors import (
    DegenerateFeatureError,
    EmptyObjectError,
    EstimationError,
    NumericError,
    ParameterError,
    ShapeError,
    ValidationError,
)
from .geometry import Box, KeypointSet, Mask


def _tensor(x, like: torch.Tensor = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    arr = np.asarray(x)
    if not arr.flags.writeable:
        arr = arr.copy()
    t = torch.as_tensor(arr)
    if like is not None:
        t = t.to(like.dtype)
    return t


@dataclasses.dataclass(frozen=True)
class LossCoefficients:
    """Weights of the composite objective plus the modulation strength."""

    alpha1: float = 1.0  # pose
    alpha2: float = 0.5  # background
    alpha3: float = 0.8  # appearance
    alpha: float = 1.0  # attention modulation strength

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3", "alpha"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v)) or v < 0:
                raise ParameterError(f"{name} must be a finite non-negative number, got {v}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LossCoefficients":
        return cls(**data)


@dataclasses.dataclass
class LossReport:
    """Per-step breakdown of the objective, JSON-line serializable."""

    denoising: float
    pose: float
    background: float
    appearance: float
    total: float
    coefficients: LossCoefficients
    pose_points: int = None
    step: int = None

    def to_dict(self) -> dict:
        out = {
            "step": self.step,
            "denoising": self.denoising,
            "pose": self.pose,
            "background": self.background,
            "appearance": self.appearance,
            "total": self.total,
            "coefficients": self.coefficients.to_dict(),
            "pose_points": self.pose_points,
        }
        return out

    def to_json_line(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "LossReport":
        return cls(
            denoising=data["denoising"],
            pose=data["pose"],
            background=data["background"],
            appearance=data["appearance"],
            total=data["total"],
            coefficients=LossCoefficients.from_dict(data["coefficients"]),
            pose_points=data.get("pose_points"),
            step=data.get("step"),
        )


class ColorMarkerPoseEstimator:
    """Differentiable keypoint locator keyed to unique joint marker colors.

    The synthetic renderer stamps a small solid-color marker at each joint;
    per joint this estimator builds a similarity heatmap exp(-beta *
    ||pixel - color||^2), normalizes it, and takes the soft-argmax. Gradients
    flow from the returned coordinates back into the image.
    """

    def __init__(self, marker_colors, skeleton_id: str, beta: float = 60.0):
        colors = np.asarray(marker_colors, dtype=np.float64)
        if colors.ndim != 2 or colors.shape[1] != 3 or colors.shape[0] < 1:
            raise ParameterError(f"marker colors must be (n, 3), got {colors.shape}")
        if beta <= 0:
            raise ParameterError(f"beta must be positive, got {beta}")
        self.marker_colors = colors
        self.skeleton_id = skeleton_id
        self.beta = beta

    def locate(self, image: torch.Tensor) -> torch.Tensor:
        """Tensor path: (H, W, 3) image -> (n, 2) normalized xy coordinates."""
        if image.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"expected (H, W, 3) image, got {tuple(image.shape)}")
        h, w = image.shape[:2]
        colors = torch.as_tensor(self.marker_colors, dtype=image.dtype)
        # (n, H, W) squared color distances
        diff = image[None] - colors[:, None, None, :]
        dist2 = (diff ** 2).sum(dim=-1)
        logits = (-self.beta * dist2).reshape(len(colors), -1)
        weights = torch.softmax(logits, dim=-1).reshape(len(colors), h, w)
        ys = (torch.arange(h, dtype=image.dtype) + 0.5) / h
        xs = (torch.arange(w, dtype=image.dtype) + 0.5) / w
        cy = (weights.sum(dim=2) * ys[None]).sum(dim=1)
        cx = (weights.sum(dim=1) * xs[None]).sum(dim=1)
        return torch.stack([cx, cy], dim=1)

    def estimate(self, image: np.ndarray) -> KeypointSet:
        with torch.no_grad():
            coords = self.locate(torch.as_tensor(np.asarray(image, dtype=np.float64)))
        pts = np.concatenate(
            [coords.numpy(), np.ones((len(self.marker_colors), 1))], axis=1
        )
        return KeypointSet(points=np.clip(pts, 0.0, 1.0), skeleton_id=self.skeleton_id)


class AffineJitterViews:
    """k deterministic affine + channel-gain views of an image.

    View i's parameters depend only on (seed, i), so view lists for paired
    images line up and a given k is a prefix of any larger k. The torch path
    is differentiable end to end.
    """

    def __init__(self, seed: int = 0, max_rotation: float = 25.0, max_shift: float = 0.1):
        self.seed = seed
        self.max_rotation = max_rotation
        self.max_shift = max_shift

    def _params(self, index: int):
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, index, 0x71E25]))
        angle = math.radians(rng.uniform(-self.max_rotation, self.max_rotation))
        scale = rng.uniform(0.85, 1.15)
        tx, ty = rng.uniform(-self.max_shift, self.max_shift, size=2)
        gains = rng.uniform(0.8, 1.2, size=3)
        return angle, scale, tx, ty, gains

    def _one_view(self, image: torch.Tensor, index: int) -> torch.Tensor:
        angle, scale, tx, ty, gains = self._params(index)
        cos_a, sin_a = math.cos(angle) / scale, math.sin(angle) / scale
        theta = torch.tensor(
            [[cos_a, -sin_a, tx], [sin_a, cos_a, ty]], dtype=image.dtype
        )[None]
        chw = image.permute(2, 0, 1)[None]
        grid = torch.nn.functional.affine_grid(theta, chw.shape, align_corners=False)
        warped = torch.nn.functional.grid_sample(
            chw, grid, mode="bilinear", padding_mode="border", align_corners=False
        )
        gains_t = torch.as_tensor(gains, dtype=image.dtype).reshape(1, 3, 1, 1)
        return (warped * gains_t).clamp(0.0, 1.5)[0].permute(1, 2, 0)

    def generate(self, image, k: int) -> list:
        if k < 1:
            raise ParameterError(f"view count must be >= 1, got {k}")
        is_np = not isinstance(image, torch.Tensor)
        t = torch.as_tensor(np.asarray(image, dtype=np.float64)) if is_np else image
        if t.ndim != 3 or t.shape[2] != 3:
            raise ShapeError(f"expected (H, W, 3) image, got {tuple(t.shape)}")
        views = [self._one_view(t, i) for i in range(k)]
        if is_np:
            return [v.numpy() for v in views]
        return views


class PooledFeatureExtractor:
    """Semantic stand-in: average-pool to a small grid, fixed seeded linear.

    The fixed bias keeps the feature norm away from zero even for flat
    images, preserving the nonzero-norm invariant cosine similarity needs.
    """

    def __init__(self, dim: int = 64, pool: int = 8, seed: int = 0):
        if dim < 1 or pool < 1:
            raise ParameterError(f"dim and pool must be >= 1, got {dim}, {pool}")
        self.dim = dim
        self.pool = pool
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFEA7]))
        fan_in = pool * pool * 3
        self.weight = (rng.standard_normal((fan_in, dim)) / math.sqrt(fan_in)).astype(
            np.float64
        )
        self.bias = (0.05 * rng.standard_normal(dim)).astype(np.float64)

    def extract(self, image):
        is_np = not isinstance(image, torch.Tensor)
        t = torch.as_tensor(np.asarray(image, dtype=np.float64)) if is_np else image
        if t.ndim != 3 or t.shape[2] != 3:
            raise ShapeError(f"expected (H, W, 3) image, got {tuple(t.shape)}")
        chw = t.permute(2, 0, 1)[None]
        pooled = torch.nn.functional.adaptive_avg_pool2d(chw, self.pool)
        flat = pooled.reshape(-1)
        w = torch.as_tensor(self.weight, dtype=t.dtype)
        b = torch.as_tensor(self.bias, dtype=t.dtype)
        feat = flat @ w + b
        return feat.numpy() if is_np else feat


def pose_loss(gt_image, pred_image, region: Box, estimator, with_count: bool = False):
    """Mean squared keypoint displacement inside the interaction region.

    Ground-truth keypoint locations (estimated from ``gt_image``) decide
    membership via closed-interval containment. Returns a scalar tensor
    (and the in-region count when ``with_count``); exactly 0 when the count
    is 0. Estimator exceptions surface as EstimationError, never as a
    silent zero.
    """
    gt_t = _tensor(gt_image)
    pred_t = _tensor(pred_image)
    if gt_t.shape != pred_t.shape:
        raise ShapeError(
            f"image shapes differ: {tuple(gt_t.shape)} vs {tuple(pred_t.shape)}"
        )
    if gt_t.dtype != pred_t.dtype:
        gt_t = gt_t.to(pred_t.dtype)
    try:
        if hasattr(estimator, "locate"):
            with torch.no_grad():
                gt_xy = estimator.locate(gt_t)
            pred_xy = estimator.locate(pred_t)
        else:
            gt_xy = torch.as_tensor(
                estimator.estimate(np.asarray(gt_image)).points[:, :2],
                dtype=pred_t.dtype,
            )
            pred_xy = torch.as_tensor(
                estimator.estimate(np.asarray(pred_image)).points[:, :2],
                dtype=pred_t.dtype,
            )
    except (ShapeError, ParameterError):
        raise
    except Exception as exc:
        raise EstimationError(f"pose backend failed: {exc}") from exc
    if gt_xy.shape != pred_xy.shape:
        raise EstimationError(
            f"pose backend returned mismatched keypoint counts: "
            f"{tuple(gt_xy.shape)} vs {tuple(pred_xy.shape)}"
        )
    with torch.no_grad():
        xs, ys = gt_xy[:, 0], gt_xy[:, 1]
        inside = (
            (xs >= region.x0) & (xs <= region.x1) & (ys >= region.y0) & (ys <= region.y1)
        )
    n = int(inside.sum())
    if n == 0:
        value = pred_t.sum() * 0.0
    else:
        sq = ((gt_xy[inside] - pred_xy[inside]) ** 2).sum(dim=1)
        value = sq.mean()
    if with_count:
        return value, n
    return value


def _binary_check(mask_values: torch.Tensor):
    with torch.no_grad():
        ok = ((mask_values - 0.0).abs() < 1e-6) | ((mask_values - 1.0).abs() < 1e-6)
        if not bool(ok.all()):
            raise ValidationError("background loss needs a binary mask")


def background_loss(gt_image, pred_image, unchanged_mask, normalize: bool = False):
    """Sum of masked squared pixel differences (channels summed per pixel).

    ``unchanged_mask`` may be a Mask or an (H, W) binary array. With
    ``normalize`` the sum is divided by the masked pixel count (0 stays 0).
    """
    gt_t = _tensor(gt_image)
    pred_t = _tensor(pred_image)
    if gt_t.shape != pred_t.shape:
        raise ShapeError(
            f"image shapes differ: {tuple(gt_t.shape)} vs {tuple(pred_t.shape)}"
        )
    gt_t = gt_t.to(pred_t.dtype)
    m = unchanged_mask.values if isinstance(unchanged_mask, Mask) else unchanged_mask
    m_t = _tensor(m, like=pred_t).to(pred_t.dtype)
    if m_t.shape != pred_t.shape[:2]:
        raise ShapeError(
            f"mask shape {tuple(m_t.shape)} does not match image {tuple(pred_t.shape[:2])}"
        )
    _binary_check(m_t)
    diff2 = (gt_t - pred_t) ** 2
    if diff2.ndim == 3:
        per_pixel = diff2.sum(dim=2)
    else:
        per_pixel = diff2
    total = (m_t * per_pixel).sum()
    if normalize:
        count = m_t.sum()
        if float(count) > 0:
            total = total / count
    return total


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na = torch.linalg.vector_norm(a)
    nb = torch.linalg.vector_norm(b)
    if float(na.detach()) < 1e-12 or float(nb.detach()) < 1e-12:
        raise DegenerateFeatureError("feature vector has (near) zero norm")
    return (a * b).sum() / (na * nb)


def _center_on_neutral(image: torch.Tensor, mask_values: np.ndarray) -> torch.Tensor:
    """Torch mirror of foreground preprocessing: matte onto neutral gray and
    translate the mask centroid to the canvas center (integer shift)."""
    m = np.asarray(mask_values, dtype=np.float64)
    total = m.sum()
    if total <= 0:
        raise EmptyObjectError("segmentation found no foreground pixels")
    h, w = m.shape
    side = max(h, w)
    rows, cols = np.nonzero(m > 0)
    cy = rows.sum() / total
    cx = cols.sum() / total
    dy = int(round((side - 1) / 2.0 - cy))
    dx = int(round((side - 1) / 2.0 - cx))
    m_t = torch.as_tensor(m, dtype=image.dtype)[:, :, None]
    out = torch.full((side, side, 3), 0.5, dtype=image.dtype)
    src_r0, src_r1 = max(0, -dy), min(h, side - dy)
    src_c0, src_c1 = max(0, -dx), min(w, side - dx)
    if src_r0 < src_r1 and src_c0 < src_c1:
        dst_r0, dst_c0 = src_r0 + dy, src_c0 + dx
        patch_m = m_t[src_r0:src_r1, src_c0:src_c1]
        patch = image[src_r0:src_r1, src_c0:src_c1, :3]
        base = out[dst_r0 : dst_r0 + (src_r1 - src_r0), dst_c0 : dst_c0 + (src_c1 - src_c0)]
        out = out.clone()
        out[dst_r0 : dst_r0 + (src_r1 - src_r0), dst_c0 : dst_c0 + (src_c1 - src_c0)] = (
            patch_m * patch + (1.0 - patch_m) * base
        )
    return out


def appearance_loss(
    pred_composite,
    fg_input,
    segmenter,
    generator,
    extractor,
    k: int = 6,
):
    """Mean over k paired views of (1 - cosine similarity) of semantic features.

    The object is cut out of the predicted composite with ``segmenter``
    (ground-truth object mask during training), centered on neutral gray,
    and compared view-by-view against the reference cutout ``fg_input``
    under the same deterministic view transforms.
    """
    if k < 1:
        raise ParameterError(f"view count must be >= 1, got {k}")
    pred_t = _tensor(pred_composite)
    if pred_t.ndim != 3 or pred_t.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) composite, got {tuple(pred_t.shape)}")
    mask = segmenter.segment(
        pred_t.detach().numpy() if isinstance(pred_composite, torch.Tensor) else np.asarray(pred_composite)
    )
    pred_obj = _center_on_neutral(pred_t, mask.values)
    fg_t = _tensor(fg_input, like=pred_t).to(pred_t.dtype)
    if fg_t.ndim != 3 or fg_t.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) reference cutout, got {tuple(fg_t.shape)}")
    pred_views = generator.generate(pred_obj, k)
    gt_views = generator.generate(fg_t, k)
    total = None
    for pv, gv in zip(pred_views, gt_views):
        f_pred = extractor.extract(pv)
        f_gt = extractor.extract(gv)
        term = 1.0 - cosine_similarity(f_pred, f_gt)
        total = term if total is None else total + term
    return total / k


def denoising_loss(output, target):
    """Plain mean squared error between prediction and target."""
    out_t = _tensor(output)
    tgt_t = _tensor(target, like=out_t).to(out_t.dtype)
    if out_t.shape != tgt_t.shape:
        raise ShapeError(
            f"output shape {tuple(out_t.shape)} does not match target {tuple(tgt_t.shape)}"
        )
    return ((out_t - tgt_t) ** 2).mean()


def weighted_total(denoising, pose, background, appearance, coeffs: LossCoefficients):
    """The composite objective as tensor math (differentiable)."""
    return (
        denoising
        + coeffs.alpha1 * pose
        + coeffs.alpha2 * background
        + coeffs.alpha3 * appearance
    )


def _finite_scalar(name: str, value) -> float:
    v = float(value)
    if not math.isfinite(v):
        raise NumericError(f"loss term {name!r} is not finite: {v}")
    return v


def total_loss(
    denoising,
    pose,
    background,
    appearance,
    coeffs: LossCoefficients = None,
    pose_points: int = None,
    step: int = None,
) -> LossReport:
    """Validated composite objective with a per-term breakdown."""
    coeffs = coeffs or LossCoefficients()
    d = _finite_scalar("denoising", denoising)
    p = _finite_scalar("pose", pose)
    b = _finite_scalar("background", background)
    a = _finite_scalar("appearance", appearance)
    total = d + coeffs.alpha1 * p + coeffs.alpha2 * b + coeffs.alpha3 * a
    return LossReport(
        denoising=d,
        pose=p,
        background=b,
        appearance=a,
        total=_finite_scalar("total", total),
        coefficients=coeffs,
        pose_points=pose_points,
        step=step,
    )
