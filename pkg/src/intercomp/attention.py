"""Joint attention over a mixed token stream, plus shape-steered modulation.

The denoiser attends over one concatenated sequence of image, text, identity,
detail, region, and background tokens. After the softmax, the sub-blocks
formed by image-token queries against (a) the text tokens naming the object
and (b) the identity tokens are nudged per row: where the per-token shape
mask says "object here", entries move toward the row maximum; elsewhere they
move toward the row minimum. The residual variant

    A' = A + alpha * (m * (A_max - A) - (1 - m) * (A - A_min))

interpolates within each row's observed range (so alpha in [0, 1] can never
leave [A_min, A_max]); the naive variant adds alpha * (2m - 1) directly and
has to be clamped. Modulated rows are spliced back without renormalizing,
since renormalizing would partially undo the intended suppression.

Everything here is a pure function of tensors; the denoiser reuses the same
math per head via `residual_modulation` / `nonresidual_modulation`.
"""

import dataclasses

import numpy as np
import torch

from .errors import ConfigurationError, ParameterError, ShapeError, ValidationError

SEG_IMAGE = "image"
SEG_TEXT = "text"
SEG_ID = "id"
SEG_DETAIL = "detail"
SEG_REGION = "region"
SEG_BACKGROUND = "background"

VALID_SEGMENTS = (SEG_IMAGE, SEG_TEXT, SEG_ID, SEG_DETAIL, SEG_REGION, SEG_BACKGROUND)

_ROW_SUM_TOL = 1e-6


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def joint_attention(queries, keys, values, segment_labels=None):
    """Scaled dot-product attention; returns (output, post-softmax matrix).

    Shapes: queries (..., N, d), keys (..., M, d), values (..., M, dv).
    ``segment_labels``, when given, must tag each of the M key positions and
    is validated only (slicing happens in `extract_fg_slices`).
    """
    q = _as_tensor(queries)
    k = _as_tensor(keys)
    v = _as_tensor(values)
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise ShapeError("queries/keys/values must be at least 2-d")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(
            f"query dim {q.shape[-1]} does not match key dim {k.shape[-1]}"
        )
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(
            f"key count {k.shape[-2]} does not match value count {v.shape[-2]}"
        )
    if segment_labels is not None and len(segment_labels) != k.shape[-2]:
        raise ShapeError(
            f"{len(segment_labels)} segment labels for {k.shape[-2]} keys"
        )
    d = q.shape[-1]
    logits = torch.matmul(q, k.transpose(-1, -2)) / (d ** 0.5)
    attn = torch.softmax(logits, dim=-1)
    return torch.matmul(attn, v), attn


@dataclasses.dataclass
class SubBlock:
    """A rectangular sub-block of an attention matrix plus its coordinates."""

    rows: np.ndarray
    cols: np.ndarray
    matrix: torch.Tensor

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        if self.matrix.shape[-2:] != (len(self.rows), len(self.cols)):
            raise ShapeError(
                f"matrix {tuple(self.matrix.shape)} does not match "
                f"{len(self.rows)} rows x {len(self.cols)} cols"
            )


def segment_indices(segment_labels, segment: str) -> np.ndarray:
    labels = np.asarray(segment_labels)
    return np.nonzero(labels == segment)[0]


def extract_fg_slices(attn, segment_labels, fg_token_indices):
    """Cut out the (image queries x object-text keys) and (image queries x
    identity keys) sub-blocks of a joint self-attention matrix.

    ``fg_token_indices`` index into the text segment, not the joint stream.
    Returns (text SubBlock, id SubBlock).
    """
    attn = _as_tensor(attn)
    labels = np.asarray(segment_labels)
    if attn.shape[-1] != len(labels):
        raise ShapeError(
            f"attention has {attn.shape[-1]} key columns but {len(labels)} labels"
        )
    if attn.shape[-2] != len(labels):
        raise ShapeError("expected a square self-attention matrix over the joint stream")
    unknown = set(labels.tolist()) - set(VALID_SEGMENTS)
    if unknown:
        raise ValidationError(f"unknown segment labels: {sorted(unknown)}")
    img_rows = segment_indices(labels, SEG_IMAGE)
    text_cols = segment_indices(labels, SEG_TEXT)
    id_cols = segment_indices(labels, SEG_ID)
    if len(img_rows) == 0:
        raise ConfigurationError("no image-token rows in the stream")
    fg = tuple(fg_token_indices)
    if not fg:
        raise ConfigurationError("foreground token index set is empty")
    if any(i < 0 or i >= len(text_cols) for i in fg):
        raise ConfigurationError(
            f"foreground indices {fg} out of range for {len(text_cols)} text tokens"
        )
    fg_cols = text_cols[list(fg)]
    text_block = SubBlock(
        img_rows, fg_cols, attn[..., img_rows, :][..., :, fg_cols]
    )
    id_block = SubBlock(img_rows, id_cols, attn[..., img_rows, :][..., :, id_cols])
    return text_block, id_block


@dataclasses.dataclass
class AttentionSlice:
    """One modulation target: sub-block values plus per-row context.

    ``matrix`` is (N, M) with values in [0, 1]; ``row_max`` / ``row_min`` are
    the per-row extrema of the matrix; ``shape_mask`` holds one value in
    [0, 1] per row (how much of that image token the object covers); ``alpha``
    is the modulation strength.
    """

    matrix: torch.Tensor
    row_max: torch.Tensor
    row_min: torch.Tensor
    shape_mask: torch.Tensor
    alpha: float = 1.0

    def __post_init__(self):
        self.matrix = _as_tensor(self.matrix)
        self.row_max = _as_tensor(self.row_max)
        self.row_min = _as_tensor(self.row_min)
        self.shape_mask = _as_tensor(self.shape_mask)
        if self.matrix.ndim != 2:
            raise ShapeError(f"slice matrix must be 2-d, got {tuple(self.matrix.shape)}")
        n = self.matrix.shape[0]
        for name, t in (
            ("row_max", self.row_max),
            ("row_min", self.row_min),
            ("shape_mask", self.shape_mask),
        ):
            if t.shape != (n,):
                raise ShapeError(f"{name} must be ({n},), got {tuple(t.shape)}")
        if self.alpha < 0:
            raise ParameterError(f"alpha must be >= 0, got {self.alpha}")
        with torch.no_grad():
            vals = self.matrix
            if vals.numel():
                if float(vals.min()) < -1e-6 or float(vals.max()) > 1.0 + 1e-6:
                    raise ValidationError("slice values must lie in [0, 1]")
                row_sums = vals.sum(dim=-1)
                if float(row_sums.max()) > 1.0 + _ROW_SUM_TOL:
                    raise ValidationError(
                        "slice rows sum above 1; not a sub-block of a softmax row"
                    )
                if not torch.allclose(self.row_max, vals.max(dim=-1).values, atol=1e-6):
                    raise ValidationError("row_max does not match matrix row maxima")
                if not torch.allclose(self.row_min, vals.min(dim=-1).values, atol=1e-6):
                    raise ValidationError("row_min does not match matrix row minima")
            m = self.shape_mask
            if m.numel() and (float(m.min()) < -1e-6 or float(m.max()) > 1.0 + 1e-6):
                raise ValidationError("shape mask values must lie in [0, 1]")

    @classmethod
    def from_matrix(cls, matrix, shape_mask, alpha: float = 1.0) -> "AttentionSlice":
        matrix = _as_tensor(matrix)
        return cls(
            matrix=matrix,
            row_max=matrix.max(dim=-1).values,
            row_min=matrix.min(dim=-1).values,
            shape_mask=_as_tensor(shape_mask),
            alpha=alpha,
        )


def residual_modulation(matrix, shape_mask, alpha, row_max=None, row_min=None):
    """Row-range interpolation; broadcasts over leading (batch/head) dims.

    ``matrix`` (..., N, M), ``shape_mask`` (N,) or broadcastable to (..., N).
    """
    matrix = _as_tensor(matrix)
    m = _as_tensor(shape_mask).to(matrix.dtype).unsqueeze(-1)
    a_max = matrix.amax(dim=-1, keepdim=True) if row_max is None else _as_tensor(row_max).unsqueeze(-1)
    a_min = matrix.amin(dim=-1, keepdim=True) if row_min is None else _as_tensor(row_min).unsqueeze(-1)
    return matrix + alpha * (m * (a_max - matrix) - (1.0 - m) * (matrix - a_min))


def nonresidual_modulation(matrix, shape_mask, alpha):
    """Naive additive variant; clamped to [0, 1] after the shift."""
    matrix = _as_tensor(matrix)
    m = _as_tensor(shape_mask).to(matrix.dtype).unsqueeze(-1)
    return torch.clamp(matrix + alpha * (2.0 * m - 1.0), 0.0, 1.0)


def modulate_residual(slice_: AttentionSlice) -> torch.Tensor:
    return residual_modulation(
        slice_.matrix,
        slice_.shape_mask,
        slice_.alpha,
        row_max=slice_.row_max,
        row_min=slice_.row_min,
    )


def modulate_nonresidual(slice_: AttentionSlice) -> torch.Tensor:
    return nonresidual_modulation(slice_.matrix, slice_.shape_mask, slice_.alpha)


def apply_modulated(attn, values, splices):
    """Write modulated sub-blocks back and aggregate values with the result.

    ``splices`` is a list of (SubBlock, modulated matrix) pairs whose
    positions must not overlap. No re-softmax: the spliced matrix is used as
    is. Returns (output tokens, spliced matrix). 2-d matrices only; the
    denoiser handles its batched case internally with the same math.
    """
    attn = _as_tensor(attn)
    values = _as_tensor(values)
    if attn.ndim != 2:
        raise ShapeError("apply_modulated expects a 2-d attention matrix")
    if attn.shape[-1] != values.shape[-2]:
        raise ShapeError(
            f"attention columns {attn.shape[-1]} do not match value count {values.shape[-2]}"
        )
    occupied = np.zeros(attn.shape, dtype=bool)
    spliced = attn.clone()
    for block, modulated in splices:
        modulated = _as_tensor(modulated)
        if modulated.shape != block.matrix.shape:
            raise ShapeError(
                f"modulated block {tuple(modulated.shape)} does not match "
                f"original {tuple(block.matrix.shape)}"
            )
        cell = np.ix_(block.rows, block.cols)
        if occupied[cell].any():
            raise ConfigurationError("modulated slices overlap")
        occupied[cell] = True
        spliced[torch.from_numpy(block.rows)[:, None], torch.from_numpy(block.cols)[None, :]] = (
            modulated.to(spliced.dtype)
        )
    return torch.matmul(spliced, values), spliced
