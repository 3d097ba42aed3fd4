"""Conditioning assembly: everything the denoiser sees besides the noisy latent.

For one composition that is: text tokens for the prompt (with the indices of
the tokens naming the object), identity tokens for the object cutout, detail
tokens from a high-frequency map of the cutout, the interaction region
rasterized at the latent grid, and (during training only) a per-token
shape mask area-averaged from the ground-truth object mask.

The encoders here are deliberately tiny, deterministic stand-ins wired to
fixed seeded projections; real text/identity encoders can replace them
behind the same interfaces.
"""

import dataclasses
import hashlib
import math
import re

import numpy as np
import torch

from .errors import (
    ConfigurationError,
    EmptyObjectError,
    ParameterError,
    ShapeError,
    ValidationError,
)
from .geometry import Box, Mask, downsample_mask_to_tokens, rasterize_box

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D normalized Gaussian with radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(gray: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur of a 2-d array with reflect padding."""
    arr = np.asarray(gray, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected 2-d array, got shape {arr.shape}")
    k = gaussian_kernel(sigma)
    radius = (len(k) - 1) // 2
    # np.pad 'reflect' needs pad < axis length; fall back to edge replication
    # for kernels wider than a tiny image.
    mode = "reflect" if radius < min(arr.shape) else "edge"
    padded = np.pad(arr, radius, mode=mode)
    tmp = np.apply_along_axis(lambda row: np.convolve(row, k, mode="valid"), 1, padded)
    out = np.apply_along_axis(lambda col: np.convolve(col, k, mode="valid"), 0, tmp)
    return out


def detail_map(image: np.ndarray, sigma: float = 2.0) -> np.ndarray:
    """High-frequency map: luma grayscale minus its Gaussian blur, in [-1, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError("image must be non-empty")
    gray = arr @ _LUMA
    out = gray - gaussian_blur(gray, sigma)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


class AlphaSegmenter:
    """Foreground = alpha >= threshold. Input must carry an alpha channel."""

    def __init__(self, threshold: float = 0.5):
        if not (0.0 < threshold <= 1.0):
            raise ParameterError(f"alpha threshold must be in (0, 1], got {threshold}")
        self.threshold = threshold

    def segment(self, image: np.ndarray) -> Mask:
        arr = np.asarray(image)
        if arr.ndim != 3 or arr.shape[2] != 4:
            raise ShapeError(
                f"alpha segmentation needs an (H, W, 4) image, got shape {arr.shape}"
            )
        return Mask((arr[:, :, 3] >= self.threshold).astype(np.float32), binary=True)


class FixedMaskSegmenter:
    """Returns a pre-computed mask (e.g. the dataset's object mask)."""

    def __init__(self, mask: Mask):
        self.mask = mask

    def segment(self, image: np.ndarray) -> Mask:
        arr = np.asarray(image)
        if arr.shape[:2] != self.mask.shape:
            raise ShapeError(
                f"mask {self.mask.shape} does not cover image {arr.shape[:2]}"
            )
        return self.mask


class ColorDistanceSegmenter:
    """Foreground = pixels far from a flat backdrop color.

    Suits object cutouts rendered on a uniform neutral ground; the backdrop
    color defaults to the median of the four image corners.
    """

    def __init__(self, backdrop=None, tolerance: float = 0.08):
        if tolerance <= 0:
            raise ParameterError(f"tolerance must be positive, got {tolerance}")
        self.backdrop = None if backdrop is None else np.asarray(backdrop, dtype=np.float64)
        self.tolerance = tolerance

    def segment(self, image: np.ndarray) -> Mask:
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] not in (3, 4):
            raise ShapeError(f"expected (H, W, 3|4) image, got shape {arr.shape}")
        rgb = arr[:, :, :3]
        backdrop = self.backdrop
        if backdrop is None:
            corners = np.stack(
                [rgb[0, 0], rgb[0, -1], rgb[-1, 0], rgb[-1, -1]], axis=0
            )
            backdrop = np.median(corners, axis=0)
        dist = np.sqrt(((rgb - backdrop) ** 2).sum(axis=2))
        return Mask((dist > self.tolerance).astype(np.float32), binary=True)


NEUTRAL_GRAY = 0.5


def preprocess_foreground(image: np.ndarray, segmenter) -> np.ndarray:
    """Matte the object onto neutral gray, center it, and pad square.

    The object's mask centroid lands on the (rounded) center of the output;
    the output side is the larger input dimension.
    """
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise ShapeError(f"expected (H, W, 3|4) image, got shape {arr.shape}")
    mask = segmenter.segment(arr)
    m = mask.values
    total = m.sum()
    if total <= 0:
        raise EmptyObjectError("segmentation found no foreground pixels")
    rgb = arr[:, :, :3]
    h, w = m.shape
    side = max(h, w)
    out = np.full((side, side, 3), NEUTRAL_GRAY, dtype=np.float32)

    rows, cols = np.nonzero(m > 0)
    cy = (rows * 1.0).sum() / total
    cx = (cols * 1.0).sum() / total
    dy = int(round((side - 1) / 2.0 - cy))
    dx = int(round((side - 1) / 2.0 - cx))

    src_r0, src_r1 = max(0, -dy), min(h, side - dy)
    src_c0, src_c1 = max(0, -dx), min(w, side - dx)
    if src_r0 < src_r1 and src_c0 < src_c1:
        dst_r0, dst_c0 = src_r0 + dy, src_c0 + dx
        patch_m = m[src_r0:src_r1, src_c0:src_c1][:, :, None]
        patch_rgb = rgb[src_r0:src_r1, src_c0:src_c1]
        dst = out[dst_r0 : dst_r0 + (src_r1 - src_r0), dst_c0 : dst_c0 + (src_c1 - src_c0)]
        out[dst_r0 : dst_r0 + (src_r1 - src_r0), dst_c0 : dst_c0 + (src_c1 - src_c0)] = (
            patch_m * patch_rgb + (1.0 - patch_m) * dst
        )
    return out


def resize_bilinear(image: np.ndarray, out_hw: tuple) -> np.ndarray:
    """Bilinear resize with half-pixel centers; works on (H, W) and (H, W, C)."""
    arr = np.asarray(image, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeError(f"expected 2-d or 3-d array, got shape {arr.shape}")
    h, w = arr.shape[:2]
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if oh <= 0 or ow <= 0:
        raise ParameterError(f"output dims must be positive, got {out_hw}")
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = arr[np.ix_(y0, x0)] * (1 - fx) + arr[np.ix_(y0, x1)] * fx
    bot = arr[np.ix_(y1, x0)] * (1 - fx) + arr[np.ix_(y1, x1)] * fx
    out = top * (1 - fy) + bot * fy
    return out[:, :, 0] if squeeze else out


_TOKEN_RE = re.compile(r"\S+")


def tokenize(prompt: str) -> list:
    """Whitespace tokens with their character spans: [(token, start, end), ...]."""
    return [(m.group(0), m.start(), m.end()) for m in _TOKEN_RE.finditer(prompt)]


def tokens_overlapping_span(prompt: str, span: tuple) -> tuple:
    """Indices of whitespace tokens overlapping a character span."""
    start, end = int(span[0]), int(span[1])
    hits = []
    for idx, (_tok, s, e) in enumerate(tokenize(prompt)):
        if s < end and e > start:
            hits.append(idx)
    return tuple(hits)


class HashTextEmbedder:
    """Seeded per-word embeddings; same word always maps to the same vector.

    Vectors are drawn from a generator keyed by sha256 of the lowercased
    token plus the embedder seed, so embeddings are stable across processes
    (unlike anything based on Python's randomized `hash`).
    """

    def __init__(self, d_model: int, seed: int = 0):
        if d_model < 1:
            raise ParameterError(f"d_model must be >= 1, got {d_model}")
        self.d_model = d_model
        self.seed = seed
        self._cache = {}

    def _vector(self, token: str) -> np.ndarray:
        key = token.lower()
        vec = self._cache.get(key)
        if vec is None:
            digest = hashlib.sha256(f"{self.seed}:{key}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = rng.standard_normal(self.d_model).astype(np.float32)
            vec /= np.float32(math.sqrt(self.d_model))
            self._cache[key] = vec
        return vec

    def embed(self, prompt: str):
        """Returns (tokens (T, d_model) float32, list of (start, end) spans)."""
        if not prompt.strip():
            raise ValidationError("cannot embed an empty prompt")
        parts = tokenize(prompt)
        mat = np.stack([self._vector(tok) for tok, _s, _e in parts], axis=0)
        return mat, [(s, e) for _tok, s, e in parts]


class PatchProjectionEncoder:
    """Identity tokens: resize, patchify, fixed seeded linear projection."""

    def __init__(self, d_model: int, input_size: int = 32, patch_size: int = 8, seed: int = 0):
        if input_size % patch_size != 0:
            raise ConfigurationError(
                f"input_size {input_size} not divisible by patch_size {patch_size}"
            )
        self.d_model = d_model
        self.input_size = input_size
        self.patch_size = patch_size
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1DE57]))
        dim_in = patch_size * patch_size * 3
        self.weight = (
            rng.standard_normal((dim_in, d_model)) / math.sqrt(dim_in)
        ).astype(np.float32)

    @property
    def token_count(self) -> int:
        return (self.input_size // self.patch_size) ** 2

    def encode(self, image: np.ndarray) -> np.ndarray:
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError(f"expected (H, W, 3) image, got shape {arr.shape}")
        resized = resize_bilinear(arr, (self.input_size, self.input_size))
        p = self.patch_size
        n = self.input_size // p
        patches = (
            resized.reshape(n, p, n, p, 3).transpose(0, 2, 1, 3, 4).reshape(n * n, -1)
        )
        return (patches.astype(np.float32) @ self.weight).astype(np.float32)


class ConvDetailEncoder:
    """Detail tokens: a small strided conv stack over the high-frequency map.

    Fixed seeded weights (no training); depth is configurable, each layer
    halves the spatial size, and the final feature map is flattened into
    tokens of width d_model.
    """

    def __init__(self, d_model: int, input_size: int = 32, layers: int = 3, seed: int = 0):
        if layers < 1:
            raise ParameterError(f"need at least one conv layer, got {layers}")
        if input_size % (2 ** layers) != 0:
            raise ConfigurationError(
                f"input_size {input_size} not divisible by 2^{layers}"
            )
        self.d_model = d_model
        self.input_size = input_size
        self.layers = layers
        gen = torch.Generator().manual_seed(seed ^ 0x0DE7A11)
        chans = [1] + [min(d_model, 8 * (2 ** i)) for i in range(layers - 1)] + [d_model]
        self.weights = []
        for i in range(layers):
            w = torch.empty(chans[i + 1], chans[i], 3, 3)
            torch.nn.init.kaiming_uniform_(w, a=math.sqrt(5), generator=gen)
            b = torch.zeros(chans[i + 1])
            self.weights.append((w, b))

    @property
    def token_count(self) -> int:
        side = self.input_size // (2 ** self.layers)
        return side * side

    def encode(self, detail: np.ndarray) -> np.ndarray:
        arr = np.asarray(detail, dtype=np.float32)
        if arr.ndim != 2:
            raise ShapeError(f"expected 2-d detail map, got shape {arr.shape}")
        resized = resize_bilinear(arr, (self.input_size, self.input_size))
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(resized, dtype=np.float32))
            x = x[None, None]
            for i, (w, b) in enumerate(self.weights):
                x = torch.nn.functional.conv2d(x, w, b, stride=2, padding=1)
                if i < self.layers - 1:
                    x = torch.nn.functional.gelu(x)
            # (1, d_model, s, s) -> (s*s, d_model)
            out = x[0].permute(1, 2, 0).reshape(-1, self.d_model)
        return out.numpy().astype(np.float32)


@dataclasses.dataclass
class EncoderStack:
    """The fixed (non-trained) encoders used to build bundles."""

    text: HashTextEmbedder
    identity: PatchProjectionEncoder
    detail: ConvDetailEncoder
    sigma: float = 2.0

    @property
    def d_model(self) -> int:
        return self.text.d_model


def default_encoders(d_model: int, seed: int = 0, sigma: float = 2.0) -> EncoderStack:
    return EncoderStack(
        text=HashTextEmbedder(d_model, seed=seed),
        identity=PatchProjectionEncoder(d_model, seed=seed),
        detail=ConvDetailEncoder(d_model, seed=seed),
        sigma=sigma,
    )


@dataclasses.dataclass
class ConditioningBundle:
    """Everything the denoiser consumes besides the noisy latent and timestep."""

    prompt: str
    text_tokens: np.ndarray  # (T, d_model)
    foreground_token_indices: tuple  # indices into text_tokens naming the object
    id_tokens: np.ndarray  # (M_id, d_model)
    detail_tokens: np.ndarray  # (M_d, d_model)
    region_mask_latent: np.ndarray  # (grid_h, grid_w) rasterized interaction region
    background: np.ndarray  # (H, W, 3) scene the composition must respect
    shape_mask_tokens: np.ndarray = None  # (grid_h*grid_w,) in [0,1]; training only

    def __post_init__(self):
        d = self.text_tokens.shape[1]
        for name, toks in (("id_tokens", self.id_tokens), ("detail_tokens", self.detail_tokens)):
            if toks.ndim != 2 or toks.shape[1] != d:
                raise ConfigurationError(
                    f"{name} width {toks.shape} does not match text width {d}"
                )
        if not self.foreground_token_indices:
            raise ConfigurationError("foreground token index set is empty")
        t = self.text_tokens.shape[0]
        if any(i < 0 or i >= t for i in self.foreground_token_indices):
            raise ConfigurationError(
                f"foreground indices {self.foreground_token_indices} out of range for {t} tokens"
            )
        if self.region_mask_latent.ndim != 2:
            raise ShapeError("region_mask_latent must be 2-d")
        if self.shape_mask_tokens is not None:
            expected = self.region_mask_latent.size
            if self.shape_mask_tokens.shape != (expected,):
                raise ShapeError(
                    f"shape_mask_tokens must have one value per image token "
                    f"({expected}), got shape {self.shape_mask_tokens.shape}"
                )

    @property
    def d_model(self) -> int:
        return self.text_tokens.shape[1]

    @property
    def latent_grid(self) -> tuple:
        return self.region_mask_latent.shape


def build_bundle(
    background: np.ndarray,
    foreground: np.ndarray,
    prompt: str,
    foreground_span: tuple,
    interaction_region: Box,
    encoders: EncoderStack,
    latent_grid: tuple,
    object_mask: Mask = None,
) -> ConditioningBundle:
    """Assemble the conditioning for one composition.

    ``object_mask`` (the ground-truth object silhouette) is only available
    during training; when given it is area-averaged onto the token grid to
    become the per-token shape mask driving attention modulation.
    """
    text_tokens, _spans = encoders.text.embed(prompt)
    fg_indices = tokens_overlapping_span(prompt, foreground_span)
    if not fg_indices:
        raise ConfigurationError(
            f"span {foreground_span} overlaps no tokens of prompt {prompt!r}"
        )
    id_tokens = encoders.identity.encode(np.asarray(foreground)[:, :, :3])
    detail_tokens = encoders.detail.encode(detail_map(np.asarray(foreground)[:, :, :3], encoders.sigma))
    region = rasterize_box(interaction_region, latent_grid[0], latent_grid[1])
    shape_tokens = None
    if object_mask is not None:
        shape_tokens = downsample_mask_to_tokens(object_mask, latent_grid).astype(
            np.float32
        ).ravel()
    return ConditioningBundle(
        prompt=prompt,
        text_tokens=text_tokens,
        foreground_token_indices=fg_indices,
        id_tokens=id_tokens,
        detail_tokens=detail_tokens,
        region_mask_latent=region.values,
        background=np.asarray(background, dtype=np.float32),
        shape_mask_tokens=shape_tokens,
    )
