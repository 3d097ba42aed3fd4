"""Geometric primitives: normalized boxes, dense masks, keypoint sets.

Conventions used throughout the package:

* Boxes are axis-aligned, ``(x0, y0, x1, y1)`` in normalized image
  coordinates with the origin at the top-left, ``x`` growing rightwards and
  ``y`` growing downwards. ``x0 < x1`` and ``y0 < y1`` are structural
  invariants, so an "empty box" cannot be constructed.
* Masks are ``(height, width)`` float32 arrays with values in ``[0, 1]``.
  A mask flagged binary contains only exact 0.0 / 1.0.
* Keypoints are ``(n, 3)`` rows of ``(x, y, confidence)``, all in ``[0, 1]``.
* Pixel ``(r, c)`` covers the normalized rectangle
  ``[c/w, (c+1)/w) x [r/h, (r+1)/h)`` and its center sits at
  ``((c + 0.5)/w, (r + 0.5)/h)``.
"""

import dataclasses

import numpy as np

from .errors import (
    DimensionError,
    EmptyRegionError,
    GeometryError,
    ParameterError,
    ValidationError,
)

_COORD_TOL = 1e-9


@dataclasses.dataclass(frozen=True)
class Box:
    """Axis-aligned box in normalized coordinates, top-left origin."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        vals = (self.x0, self.y0, self.x1, self.y1)
        for v in vals:
            if not np.isfinite(v):
                raise GeometryError(f"box coordinates must be finite, got {vals}")
            if v < -_COORD_TOL or v > 1.0 + _COORD_TOL:
                raise GeometryError(f"box coordinates must lie in [0, 1], got {vals}")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise GeometryError(
                f"box must have positive extent (x0 < x1 and y0 < y1), got {vals}"
            )
        # Snap float fuzz onto the unit interval so downstream comparisons are clean.
        object.__setattr__(self, "x0", float(min(max(self.x0, 0.0), 1.0)))
        object.__setattr__(self, "y0", float(min(max(self.y0, 0.0), 1.0)))
        object.__setattr__(self, "x1", float(min(max(self.x1, 0.0), 1.0)))
        object.__setattr__(self, "y1", float(min(max(self.y1, 0.0), 1.0)))

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    def contains_point(self, x: float, y: float) -> bool:
        """Closed-interval membership test, boundary points count as inside."""
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def contains_box(self, other: "Box") -> bool:
        return (
            self.x0 <= other.x0
            and self.y0 <= other.y0
            and self.x1 >= other.x1
            and self.y1 >= other.y1
        )

    def intersect(self, other: "Box"):
        """Intersection box, or None when interiors do not overlap."""
        x0 = max(self.x0, other.x0)
        y0 = max(self.y0, other.y0)
        x1 = min(self.x1, other.x1)
        y1 = min(self.y1, other.y1)
        if x0 >= x1 or y0 >= y1:
            return None
        return Box(x0, y0, x1, y1)

    def as_list(self) -> list:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def from_list(cls, values) -> "Box":
        vals = list(values)
        if len(vals) != 4:
            raise GeometryError(f"expected 4 coordinates, got {len(vals)}")
        return cls(float(vals[0]), float(vals[1]), float(vals[2]), float(vals[3]))


@dataclasses.dataclass(frozen=True, eq=False)
class Mask:
    """Dense (height, width) float32 mask with values in [0, 1]."""

    values: np.ndarray
    binary: bool = True

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float32)
        if arr.ndim != 2:
            raise DimensionError(f"mask must be 2-d, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"mask must be non-empty, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("mask contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError(
                f"mask values must lie in [0, 1], got range "
                f"[{arr.min():.4g}, {arr.max():.4g}]"
            )
        if self.binary and not np.isin(arr, (0.0, 1.0)).all():
            raise ValidationError("mask flagged binary but holds fractional values")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def area_fraction(self) -> float:
        return float(self.values.mean())

    def binarize(self, threshold: float = 0.5) -> "Mask":
        return Mask((self.values >= threshold).astype(np.float32), binary=True)

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.binary == other.binary and np.array_equal(self.values, other.values)

    @classmethod
    def zeros(cls, height: int, width: int) -> "Mask":
        if height <= 0 or width <= 0:
            raise DimensionError(f"mask dims must be positive, got {height}x{width}")
        return cls(np.zeros((height, width), dtype=np.float32), binary=True)

    @classmethod
    def ones(cls, height: int, width: int) -> "Mask":
        if height <= 0 or width <= 0:
            raise DimensionError(f"mask dims must be positive, got {height}x{width}")
        return cls(np.ones((height, width), dtype=np.float32), binary=True)


# Known skeleton layouts. Maps skeleton id -> joint count; unknown ids are
# allowed so external pose backends can plug in their own layouts.
SKELETON_SIZES = {}


def register_skeleton(skeleton_id: str, joint_count: int):
    if joint_count < 1:
        raise ParameterError("skeleton must have at least one joint")
    existing = SKELETON_SIZES.get(skeleton_id)
    if existing is not None and existing != joint_count:
        raise ValidationError(
            f"skeleton {skeleton_id!r} already registered with {existing} joints"
        )
    SKELETON_SIZES[skeleton_id] = joint_count


@dataclasses.dataclass(frozen=True, eq=False)
class KeypointSet:
    """Keypoints as (n, 3) rows of (x, y, confidence), all normalized."""

    points: np.ndarray
    skeleton_id: str

    def __post_init__(self):
        arr = np.asarray(self.points, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise GeometryError(f"keypoints must be (n, 3), got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise GeometryError("keypoints contain non-finite values")
        if arr.size and (arr.min() < -_COORD_TOL or arr.max() > 1.0 + _COORD_TOL):
            raise GeometryError("keypoint coordinates and confidences must lie in [0, 1]")
        expected = SKELETON_SIZES.get(self.skeleton_id)
        if expected is not None and arr.shape[0] != expected:
            raise GeometryError(
                f"skeleton {self.skeleton_id!r} expects {expected} joints, "
                f"got {arr.shape[0]}"
            )
        arr = np.clip(arr, 0.0, 1.0)
        arr.setflags(write=False)
        object.__setattr__(self, "points", arr)

    def __len__(self):
        return self.points.shape[0]

    def __eq__(self, other):
        if not isinstance(other, KeypointSet):
            return NotImplemented
        return self.skeleton_id == other.skeleton_id and np.array_equal(
            self.points, other.points
        )

    def inside(self, box: Box) -> np.ndarray:
        """Boolean membership per keypoint, closed-interval containment."""
        xs, ys = self.points[:, 0], self.points[:, 1]
        return (
            (xs >= box.x0) & (xs <= box.x1) & (ys >= box.y0) & (ys <= box.y1)
        )


def rasterize_box(box: Box, height: int, width: int) -> Mask:
    """Render a normalized box as a binary mask over a pixel grid.

    A pixel belongs to the box when its center falls inside ``[x0, x1) x
    [y0, y1)`` (half-open, so abutting boxes never share a pixel). If the
    box is so thin along an axis that no pixel center is covered, the single
    pixel nearest the box center on that axis is used instead; the result
    therefore always has at least one pixel set.
    """
    if height <= 0 or width <= 0:
        raise DimensionError(f"raster dims must be positive, got {height}x{width}")

    def covered(lo: float, hi: float, n: int) -> np.ndarray:
        centers = (np.arange(n) + 0.5) / n
        sel = np.nonzero((centers >= lo) & (centers < hi))[0]
        if sel.size == 0:
            mid = 0.5 * (lo + hi)
            sel = np.array([int(np.clip(round(mid * n - 0.5), 0, n - 1))])
        return sel

    rows = covered(box.y0, box.y1, height)
    cols = covered(box.x0, box.x1, width)
    values = np.zeros((height, width), dtype=np.float32)
    values[np.ix_(rows, cols)] = 1.0
    return Mask(values, binary=True)


def bbox_of_mask(mask: Mask) -> Box:
    """Tight normalized bounding box of a binary mask's support.

    Uses outer pixel edges: a single set pixel ``(r, c)`` on an ``h x w``
    grid yields ``(c/w, r/h, (c+1)/w, (r+1)/h)``.
    """
    if not mask.binary:
        raise ValidationError("bbox_of_mask requires a binary mask")
    on = mask.values > 0.5
    if not on.any():
        raise EmptyRegionError("mask has no set pixels, bounding box undefined")
    row_any = np.nonzero(on.any(axis=1))[0]
    col_any = np.nonzero(on.any(axis=0))[0]
    h, w = mask.shape
    return Box(
        col_any[0] / w,
        row_any[0] / h,
        (col_any[-1] + 1) / w,
        (row_any[-1] + 1) / h,
    )


def invert_mask(mask: Mask) -> Mask:
    """Binary complement; rejects soft masks since 1-x is not a complement there."""
    if not mask.binary:
        raise ValidationError("invert_mask requires a binary mask")
    return Mask(1.0 - mask.values, binary=True)


def _bilinear_at(grid: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``grid`` at the outer product of fractional coords ys x xs."""
    y0 = np.clip(np.floor(ys).astype(int), 0, grid.shape[0] - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, grid.shape[1] - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[np.ix_(y0, x0)]
    g01 = grid[np.ix_(y0, x0 + 1)]
    g10 = grid[np.ix_(y0 + 1, x0)]
    g11 = grid[np.ix_(y0 + 1, x0 + 1)]
    return g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx + g10 * fy * (1 - fx) + g11 * fy * fx

def downsample_mask_to_tokens(mask: Mask, grid: tuple, binarize: bool = False):
    """Area-average a mask onto a token grid.

    Each output cell holds the exact mean of the mask over the image area the
    cell covers (computed via the mask's integral image, which is piecewise
    bilinear, so sampling it at cell corners is exact even for non-divisible
    grids). With ``binarize`` the averages are thresholded at 0.5.

    Returns a ``(grid_h, grid_w)`` float64 array (float32 binary if
    ``binarize``).
    """
    grid_h, grid_w = int(grid[0]), int(grid[1])
    if grid_h <= 0 or grid_w <= 0:
        raise DimensionError(f"token grid dims must be positive, got {grid}")
    v = mask.values.astype(np.float64)
    h, w = v.shape
    integral = np.zeros((h + 1, w + 1), dtype=np.float64)
    integral[1:, 1:] = v.cumsum(axis=0).cumsum(axis=1)
    ys = np.linspace(0.0, h, grid_h + 1)
    xs = np.linspace(0.0, w, grid_w + 1)
    corner = _bilinear_at(integral, ys, xs)
    cell_mass = (
        corner[1:, 1:] - corner[:-1, 1:] - corner[1:, :-1] + corner[:-1, :-1]
    )
    cell_area = (h / grid_h) * (w / grid_w)
    out = cell_mass / cell_area
    out = np.clip(out, 0.0, 1.0)
    if binarize:
        return (out >= 0.5).astype(np.float32)
    return out
