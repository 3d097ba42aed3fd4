"""Desk-scale diffusion transformer for interaction-aware composition.

The denoiser attends jointly over six token segments: noisy image latents,
prompt text, object identity, object detail, the rasterized interaction
region, and the background latents. Shape-steered attention modulation (see
`attention`) hooks into every block during training; at inference the model
runs unmodulated because the per-token shape mask comes from ground truth.

Scale is deliberately tiny (a couple of blocks, 64 px images, a fixed
orthogonal patch codec instead of a learned autoencoder) so the full
objective (denoising + pose + background + appearance) trains in minutes
on a CPU while exercising every conditioning path. Low-rank adapters sit on
all attention projections; base-frozen mode updates only them.
"""

import dataclasses
import json
import math
import os

import numpy as np
import torch
from torch import nn

from .attention import nonresidual_modulation, residual_modulation
from .conditioning import ConditioningBundle, EncoderStack, build_bundle, default_encoders
from .errors import (
    ConfigurationError,
    NumericError,
    ParameterError,
    ShapeError,
    ValidationError,
)
from .geometry import Box, Mask, rasterize_box
from .losses import (
    AffineJitterViews,
    LossCoefficients,
    PooledFeatureExtractor,
    appearance_loss,
    background_loss,
    denoising_loss,
    pose_loss,
    total_loss,
    weighted_total,
)
from .conditioning import FixedMaskSegmenter
from .records import load_mask, load_record, read_manifest

PREDICTION_KINDS = ("epsilon", "velocity")
MODULATION_VARIANTS = ("residual", "non_residual", "off")


@dataclasses.dataclass
class DenoiserConfig:
    image_size: int = 64
    patch_size: int = 4
    d_model: int = 64
    heads: int = 4
    blocks: int = 2
    adapter_rank: int = 16
    guidance_scale: float = 3.5
    timesteps: int = 100
    prediction: str = "epsilon"
    text_max_tokens: int = 32
    modulation_blocks: object = "all"  # "all" or list of block indices
    encoder_seed: int = 0
    codec_seed: int = 0
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.d_model % self.heads != 0:
            raise ConfigurationError(
                f"d_model {self.d_model} not divisible by heads {self.heads}"
            )
        if self.adapter_rank < 1:
            raise ConfigurationError(f"adapter rank must be >= 1, got {self.adapter_rank}")
        if self.timesteps < 2:
            raise ConfigurationError(f"need >= 2 timesteps, got {self.timesteps}")
        if self.prediction not in PREDICTION_KINDS:
            raise ConfigurationError(
                f"prediction must be one of {PREDICTION_KINDS}, got {self.prediction!r}"
            )
        if self.modulation_blocks != "all":
            self.modulation_blocks = tuple(int(b) for b in self.modulation_blocks)
            if any(b < 0 or b >= self.blocks for b in self.modulation_blocks):
                raise ConfigurationError(
                    f"modulation blocks {self.modulation_blocks} out of range for "
                    f"{self.blocks} blocks"
                )

    @property
    def grid(self) -> tuple:
        side = self.image_size // self.patch_size
        return (side, side)

    @property
    def image_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        if isinstance(out["modulation_blocks"], tuple):
            out["modulation_blocks"] = list(out["modulation_blocks"])
        return out


@dataclasses.dataclass
class ModulationSpec:
    """How (and where) to steer attention during a forward pass."""

    variant: str = "residual"
    alpha: float = 1.0
    blocks: object = "all"

    def __post_init__(self):
        if self.variant not in MODULATION_VARIANTS:
            raise ConfigurationError(
                f"modulation variant must be one of {MODULATION_VARIANTS}, got {self.variant!r}"
            )
        if self.alpha < 0:
            raise ParameterError(f"alpha must be >= 0, got {self.alpha}")

    @property
    def enabled(self) -> bool:
        return self.variant != "off"

    def active_for(self, block_index: int) -> bool:
        if not self.enabled:
            return False
        if self.blocks == "all":
            return True
        return block_index in self.blocks


def timestep_embedding(t: int, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32) / max(half, 1)
    )
    angles = float(t) * freqs
    emb = torch.cat([torch.sin(angles), torch.cos(angles)])
    if emb.shape[0] < dim:
        emb = torch.cat([emb, torch.zeros(dim - emb.shape[0])])
    return emb


def sincos_grid(grid_h: int, grid_w: int, dim: int) -> torch.Tensor:
    """Fixed 2-d sin/cos positions, (grid_h*grid_w, dim)."""
    quarter = max(dim // 4, 1)
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(quarter, dtype=torch.float32) / quarter
    )
    ys, xs = torch.meshgrid(
        torch.arange(grid_h, dtype=torch.float32),
        torch.arange(grid_w, dtype=torch.float32),
        indexing="ij",
    )
    parts = []
    for coord in (ys.reshape(-1), xs.reshape(-1)):
        angles = coord[:, None] * freqs[None, :]
        parts.extend([torch.sin(angles), torch.cos(angles)])
    pos = torch.cat(parts, dim=1)
    if pos.shape[1] < dim:
        pos = torch.cat([pos, torch.zeros(pos.shape[0], dim - pos.shape[1])], dim=1)
    return pos[:, :dim]


class LowRankLinear(nn.Module):
    """Linear layer with an additive low-rank adapter (zero-initialized up-proj).

    At init the adapter contributes exactly nothing, so base-only and adapted
    forward passes agree until the adapter trains.
    """

    def __init__(self, dim_in: int, dim_out: int, rank: int):
        super().__init__()
        self.base = nn.Linear(dim_in, dim_out)
        self.lora_down = nn.Parameter(torch.randn(rank, dim_in) * 0.02)
        self.lora_up = nn.Parameter(torch.zeros(dim_out, rank))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + (x @ self.lora_down.T) @ self.lora_up.T


class _Block(nn.Module):
    def __init__(self, d_model: int, heads: int, rank: int):
        super().__init__()
        self.heads = heads
        self.head_dim = d_model // heads
        self.ln1 = nn.LayerNorm(d_model)
        self.ln2 = nn.LayerNorm(d_model)
        self.proj_q = LowRankLinear(d_model, d_model, rank)
        self.proj_k = LowRankLinear(d_model, d_model, rank)
        self.proj_v = LowRankLinear(d_model, d_model, rank)
        self.proj_out = LowRankLinear(d_model, d_model, rank)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model)
        )

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        n, d = x.shape
        return x.reshape(n, self.heads, self.head_dim).permute(1, 0, 2)

    def forward(self, x, ctx=None, capture=None):
        h = self.ln1(x)
        q = self._heads(self.proj_q(h))
        k = self._heads(self.proj_k(h))
        v = self._heads(self.proj_v(h))
        attn = torch.softmax(
            torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(self.head_dim), dim=-1
        )
        if ctx is not None:
            attn = self._steer(attn, ctx, capture)
        out = torch.matmul(attn, v)  # (heads, N, head_dim)
        out = out.permute(1, 0, 2).reshape(x.shape[0], -1)
        x = x + self.proj_out(out)
        x = x + self.mlp(self.ln2(x))
        return x

    @staticmethod
    def _steer(attn, ctx, capture=None):
        """Modulate (and optionally record) the image->foreground sub-blocks."""
        n_img = ctx["n_img"]
        variant = ctx["variant"]
        rows = torch.arange(n_img)
        new_attn = attn.clone() if variant is not None else attn
        for key, cols in (("text", ctx["fg_cols"]), ("id", ctx["id_cols"])):
            if cols.numel() == 0:
                continue
            sub = attn[:, :n_img, :][:, :, cols]
            mod = sub
            if variant == "residual":
                mod = residual_modulation(sub, ctx["shape_mask"], ctx["alpha"])
            elif variant == "non_residual":
                mod = nonresidual_modulation(sub, ctx["shape_mask"], ctx["alpha"])
            if variant is not None:
                new_attn[:, rows[:, None], cols[None, :]] = mod
            if capture is not None:
                capture[key] = {
                    "before": sub.detach().mean(dim=0).numpy(),
                    "after": mod.detach().mean(dim=0).numpy(),
                }
        return new_attn


@dataclasses.dataclass
class PackedConditioning:
    """Bundle contents as torch tensors, ready for the denoiser."""

    text: torch.Tensor
    fg_indices: torch.Tensor
    id_tokens: torch.Tensor
    detail_tokens: torch.Tensor
    region: torch.Tensor  # (n_img,)
    background_tokens: torch.Tensor  # (n_img, patch_dim)
    shape_mask: torch.Tensor = None  # (n_img,) or None


class ToyLatentCodec:
    """Fixed orthogonal patchify/unpatchify pair mapping pixels <-> latents.

    Pixels are shifted to [-1, 1] and each non-overlapping patch is rotated
    by a seeded orthogonal matrix, so encode/decode round-trips exactly and
    gradients pass straight through decode.
    """

    def __init__(self, patch_size: int = 4, seed: int = 0):
        self.patch_size = patch_size
        dim = patch_size * patch_size * 3
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0DE]))
        mat = rng.standard_normal((dim, dim))
        q, r = np.linalg.qr(mat)
        q = q * np.sign(np.diag(r))[None, :]
        self.proj = torch.as_tensor(q, dtype=torch.float32)

    def encode(self, image) -> torch.Tensor:
        """(H, W, 3) pixels in [0, 1] -> (h, w, patch_dim) latent tokens."""
        t = image if isinstance(image, torch.Tensor) else torch.from_numpy(
            np.array(image, dtype=np.float32)
        )
        if t.ndim != 3 or t.shape[2] != 3:
            raise ShapeError(f"expected (H, W, 3) image, got {tuple(t.shape)}")
        p = self.patch_size
        hp, wp = t.shape[0] // p, t.shape[1] // p
        if hp * p != t.shape[0] or wp * p != t.shape[1]:
            raise ShapeError(
                f"image {tuple(t.shape[:2])} not divisible by patch size {p}"
            )
        x = t.to(torch.float32) * 2.0 - 1.0
        patches = x.reshape(hp, p, wp, p, 3).permute(0, 2, 1, 3, 4).reshape(hp, wp, -1)
        return patches @ self.proj

    def decode(self, tokens: torch.Tensor) -> torch.Tensor:
        """(h, w, patch_dim) -> (H, W, 3) image in [0, 1] space (unclipped)."""
        if tokens.ndim != 3 or tokens.shape[2] != self.proj.shape[0]:
            raise ShapeError(
                f"expected (h, w, {self.proj.shape[0]}) tokens, got {tuple(tokens.shape)}"
            )
        hp, wp = tokens.shape[:2]
        p = self.patch_size
        patches = tokens @ self.proj.T
        x = patches.reshape(hp, wp, p, p, 3).permute(0, 2, 1, 3, 4).reshape(hp * p, wp * p, 3)
        return (x + 1.0) / 2.0


class ToyDenoiser(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        rank = config.adapter_rank
        self.img_in = nn.Linear(config.patch_dim, d)
        self.bg_in = nn.Linear(config.patch_dim, d)
        self.region_in = nn.Linear(1, d)
        self.text_in = nn.Linear(d, d)
        self.id_in = nn.Linear(d, d)
        self.detail_in = nn.Linear(d, d)
        self.t_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.text_pos = nn.Embedding(config.text_max_tokens, d)
        grid_h, grid_w = config.grid
        self.register_buffer("img_pos", sincos_grid(grid_h, grid_w, d))
        self.blocks = nn.ModuleList(
            [_Block(d, config.heads, rank) for _ in range(config.blocks)]
        )
        self.ln_f = nn.LayerNorm(d)
        self.out_proj = nn.Linear(d, config.patch_dim)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(
        self,
        z_tokens: torch.Tensor,
        t_index: int,
        cond: PackedConditioning,
        modulation: ModulationSpec = None,
        drop_conditioning: bool = False,
        capture: list = None,
    ) -> torch.Tensor:
        n_img = self.config.image_tokens
        if z_tokens.shape != (n_img, self.config.patch_dim):
            raise ShapeError(
                f"latent tokens must be ({n_img}, {self.config.patch_dim}), "
                f"got {tuple(z_tokens.shape)}"
            )
        t_emb = self.t_mlp(timestep_embedding(int(t_index), self.config.d_model))
        img = self.img_in(z_tokens) + self.img_pos + t_emb
        region = self.region_in(cond.region.unsqueeze(-1)) + self.img_pos
        bg = self.bg_in(cond.background_tokens) + self.img_pos + t_emb

        segments = [img]
        fg_cols = torch.empty(0, dtype=torch.long)
        id_cols = torch.empty(0, dtype=torch.long)
        offset = n_img
        if not drop_conditioning:
            t_count = cond.text.shape[0]
            text = self.text_in(cond.text) + self.text_pos.weight[:t_count]
            idt = self.id_in(cond.id_tokens)
            det = self.detail_in(cond.detail_tokens)
            segments.extend([text, idt, det])
            fg_cols = offset + cond.fg_indices
            offset += t_count
            id_cols = torch.arange(offset, offset + idt.shape[0], dtype=torch.long)
            offset += idt.shape[0] + det.shape[0]
        segments.extend([region, bg])
        x = torch.cat(segments, dim=0)

        modulating = modulation is not None and modulation.enabled and not drop_conditioning
        if modulating and cond.shape_mask is None:
            raise ConfigurationError(
                "attention modulation requested but the bundle has no shape mask"
            )
        base_ctx = None
        if modulating or (capture is not None and not drop_conditioning):
            base_ctx = {
                "n_img": n_img,
                "fg_cols": fg_cols,
                "id_cols": id_cols,
                "shape_mask": cond.shape_mask,
                "alpha": modulation.alpha if modulating else 0.0,
                "variant": None,
            }

        for i, block in enumerate(self.blocks):
            ctx = None
            if base_ctx is not None:
                active = modulating and modulation.active_for(i)
                if active or capture is not None:
                    ctx = dict(base_ctx)
                    ctx["variant"] = modulation.variant if active else None
            cap = {} if (capture is not None and ctx is not None) else None
            x = block(x, ctx=ctx, capture=cap)
            if cap:
                cap["block"] = i
                capture.append(cap)
        x = self.ln_f(x)
        return self.out_proj(x[:n_img])


class DiffusionSchedule:
    """Linear-beta schedule with helpers for both prediction conventions."""

    def __init__(self, timesteps: int, beta_start: float = 1e-4, beta_end: float = 0.02):
        if timesteps < 2:
            raise ParameterError(f"need >= 2 timesteps, got {timesteps}")
        betas = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
        alphas_bar = torch.cumprod(1.0 - betas, dim=0)
        self.timesteps = timesteps
        self.sqrt_ab = torch.sqrt(alphas_bar).to(torch.float32)
        self.sqrt_1mab = torch.sqrt(1.0 - alphas_bar).to(torch.float32)

    def add_noise(self, z0: torch.Tensor, eps: torch.Tensor, t: int) -> torch.Tensor:
        return self.sqrt_ab[t] * z0 + self.sqrt_1mab[t] * eps

    def target(self, z0: torch.Tensor, eps: torch.Tensor, t: int, prediction: str) -> torch.Tensor:
        if prediction == "epsilon":
            return eps
        return self.sqrt_ab[t] * eps - self.sqrt_1mab[t] * z0

    def predict_x0(self, z_t: torch.Tensor, pred: torch.Tensor, t: int, prediction: str) -> torch.Tensor:
        if prediction == "epsilon":
            return (z_t - self.sqrt_1mab[t] * pred) / self.sqrt_ab[t]
        return self.sqrt_ab[t] * z_t - self.sqrt_1mab[t] * pred

    def eps_from_x0(self, z_t: torch.Tensor, x0: torch.Tensor, t: int) -> torch.Tensor:
        return (z_t - self.sqrt_ab[t] * x0) / self.sqrt_1mab[t]

    def ddim_indices(self, steps: int) -> list:
        if steps < 1:
            raise ParameterError(f"need >= 1 sampling steps, got {steps}")
        steps = min(steps, self.timesteps)
        idx = np.round(np.linspace(self.timesteps - 1, 0, steps)).astype(int)
        out = []
        for i in idx.tolist():
            if not out or i != out[-1]:
                out.append(i)
        return out


@dataclasses.dataclass
class TrainSettings:
    steps: int = 500
    batch_size: int = 2
    lr: float = 2e-3
    grad_clip: float = 1.0
    adapter_only: bool = False
    modulation: str = "residual"  # 'residual' | 'non_residual' | 'off'
    views: int = 6
    checkpoint_interval: int = 200
    seed: int = 0
    normalize_background: bool = False

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ParameterError("steps must be >= 0 and batch_size >= 1")
        if self.modulation not in MODULATION_VARIANTS:
            raise ConfigurationError(
                f"modulation must be one of {MODULATION_VARIANTS}, got {self.modulation!r}"
            )
        if self.views < 1:
            raise ParameterError(f"views must be >= 1, got {self.views}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass
class TrainBackends:
    """Differentiable perception backends used by the pixel-space losses."""

    pose_estimator: object
    view_generator: object
    feature_extractor: object


def default_backends(seed: int = 0) -> TrainBackends:
    from .synthetic import default_pose_estimator

    return TrainBackends(
        pose_estimator=default_pose_estimator(),
        view_generator=AffineJitterViews(seed=seed),
        feature_extractor=PooledFeatureExtractor(seed=seed),
    )


@dataclasses.dataclass
class TrainingSample:
    record_id: str
    bundle: ConditioningBundle
    composite: np.ndarray
    interaction_region: Box
    unchanged_mask: Mask
    foreground: np.ndarray
    object_mask: Mask


@dataclasses.dataclass
class TrainState:
    model: ToyDenoiser
    codec: ToyLatentCodec
    schedule: DiffusionSchedule
    config: DenoiserConfig
    coefficients: LossCoefficients
    settings: TrainSettings
    step: int
    seed: int

    def encoders(self) -> EncoderStack:
        return default_encoders(self.config.d_model, seed=self.config.encoder_seed)


def pack_bundle(bundle: ConditioningBundle, codec: ToyLatentCodec, config: DenoiserConfig) -> PackedConditioning:
    if bundle.latent_grid != config.grid:
        raise ConfigurationError(
            f"bundle grid {bundle.latent_grid} does not match config grid {config.grid}"
        )
    if bundle.d_model != config.d_model:
        raise ConfigurationError(
            f"bundle d_model {bundle.d_model} does not match config {config.d_model}"
        )
    if bundle.text_tokens.shape[0] > config.text_max_tokens:
        raise ConfigurationError(
            f"prompt has {bundle.text_tokens.shape[0]} tokens; config allows "
            f"{config.text_max_tokens}"
        )
    bg_tokens = codec.encode(bundle.background).reshape(-1, config.patch_dim)
    shape_mask = None
    if bundle.shape_mask_tokens is not None:
        shape_mask = torch.as_tensor(bundle.shape_mask_tokens, dtype=torch.float32)
    return PackedConditioning(
        text=torch.as_tensor(bundle.text_tokens, dtype=torch.float32),
        fg_indices=torch.as_tensor(list(bundle.foreground_token_indices), dtype=torch.long),
        id_tokens=torch.as_tensor(bundle.id_tokens, dtype=torch.float32),
        detail_tokens=torch.as_tensor(bundle.detail_tokens, dtype=torch.float32),
        region=torch.from_numpy(
            np.array(bundle.region_mask_latent, dtype=np.float32)
        ).reshape(-1),
        background_tokens=bg_tokens,
        shape_mask=shape_mask,
    )


def denoise_step(
    state: TrainState,
    z_tokens: torch.Tensor,
    t_index: int,
    bundle: ConditioningBundle,
    modulation: ModulationSpec = None,
    drop_conditioning: bool = False,
    capture: list = None,
) -> torch.Tensor:
    """One forward pass of the denoiser on a conditioning bundle."""
    packed = pack_bundle(bundle, state.codec, state.config)
    return state.model(
        z_tokens,
        t_index,
        packed,
        modulation=modulation,
        drop_conditioning=drop_conditioning,
        capture=capture,
    )


def initial_state(
    config: DenoiserConfig = None,
    coeffs: LossCoefficients = None,
    settings: TrainSettings = None,
) -> TrainState:
    config = config or DenoiserConfig()
    coeffs = coeffs or LossCoefficients()
    settings = settings or TrainSettings()
    torch.manual_seed(settings.seed)
    model = ToyDenoiser(config)
    if settings.adapter_only:
        # The output head is zero-initialized, which blocks every upstream
        # gradient. That is fine when the head itself trains, but in
        # base-frozen mode it would freeze the model at "always predict 0",
        # so the (still frozen) head gets a small deterministic init instead.
        nn.init.normal_(model.out_proj.weight, std=0.02)
    return TrainState(
        model=model,
        codec=ToyLatentCodec(config.patch_size, seed=config.codec_seed),
        schedule=DiffusionSchedule(config.timesteps, config.beta_start, config.beta_end),
        config=config,
        coefficients=coeffs,
        settings=settings,
        step=0,
        seed=settings.seed,
    )


def save_checkpoint(state: TrainState, ckpt_dir: str):
    os.makedirs(ckpt_dir, exist_ok=True)
    torch.save(state.model.state_dict(), os.path.join(ckpt_dir, "weights.pt"))
    meta = {
        "config": state.config.to_dict(),
        "coefficients": state.coefficients.to_dict(),
        "settings": state.settings.to_dict(),
        "step": state.step,
        "seed": state.seed,
    }
    with open(os.path.join(ckpt_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_checkpoint(ckpt_dir: str) -> TrainState:
    meta_path = os.path.join(ckpt_dir, "meta.json")
    if not os.path.exists(meta_path):
        raise ValidationError(f"no checkpoint metadata at {meta_path}")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    config = DenoiserConfig(**meta["config"])
    coeffs = LossCoefficients.from_dict(meta["coefficients"])
    settings = TrainSettings(**meta["settings"])
    state = initial_state(config, coeffs, settings)
    state.model.load_state_dict(
        torch.load(os.path.join(ckpt_dir, "weights.pt"), weights_only=True)
    )
    state.step = int(meta["step"])
    state.seed = int(meta["seed"])
    return state


def samples_from_manifest(
    manifest_path: str,
    root: str = None,
    config: DenoiserConfig = None,
    encoders: EncoderStack = None,
    limit: int = None,
):
    """Load training samples (records + bundles with shape masks) from a manifest."""
    config = config or DenoiserConfig()
    encoders = encoders or default_encoders(config.d_model, seed=config.encoder_seed)
    root = root or os.path.dirname(os.path.abspath(manifest_path))
    rows = read_manifest(manifest_path)
    if limit is not None:
        rows = rows[:limit]
    samples = []
    for row in rows:
        record, extras = load_record(row, root)
        h, w = record.image_shape()
        if (h, w) != (config.image_size, config.image_size):
            raise ConfigurationError(
                f"record {record.record_id} is {h}x{w}, config expects "
                f"{config.image_size}x{config.image_size}"
            )
        if "object_mask" in extras:
            object_mask = load_mask(os.path.join(root, extras["object_mask"]))
        else:
            object_mask = rasterize_box(record.object_box, h, w)
        bundle = build_bundle(
            background=record.background,
            foreground=record.foreground,
            prompt=record.prompt,
            foreground_span=record.foreground_span,
            interaction_region=record.interaction_region,
            encoders=encoders,
            latent_grid=config.grid,
            object_mask=object_mask,
        )
        samples.append(
            TrainingSample(
                record_id=record.record_id,
                bundle=bundle,
                composite=record.composite,
                interaction_region=record.interaction_region,
                unchanged_mask=record.unchanged_mask,
                foreground=record.foreground,
                object_mask=object_mask,
            )
        )
    return samples, encoders


def train(
    samples: list,
    config: DenoiserConfig = None,
    coeffs: LossCoefficients = None,
    settings: TrainSettings = None,
    run_dir: str = None,
    backends: TrainBackends = None,
):
    """Optimize the composite objective; returns (TrainState, loss reports).

    Deterministic for a fixed seed: batch order, timesteps, and noise all come
    from seeded generators. When ``run_dir`` is given, per-step reports stream
    into losses.jsonl and checkpoints land under checkpoints/. A non-finite
    total aborts with NumericError after leaving the last periodic checkpoint
    in place.
    """
    if not samples:
        raise ValidationError("training needs at least one sample")
    config = config or DenoiserConfig()
    coeffs = coeffs or LossCoefficients()
    settings = settings or TrainSettings()
    backends = backends or default_backends(seed=settings.seed)

    state = initial_state(config, coeffs, settings)
    model = state.model
    schedule = state.schedule
    codec = state.codec

    if settings.adapter_only:
        for name, param in model.named_parameters():
            param.requires_grad_("lora_" in name)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=settings.lr)

    modulation = None
    if settings.modulation != "off":
        modulation = ModulationSpec(
            variant=settings.modulation,
            alpha=coeffs.alpha,
            blocks=config.modulation_blocks,
        )

    # Precompute per-sample constants once; training touches them every step.
    prepared = []
    for s in samples:
        packed = pack_bundle(s.bundle, codec, config)
        if modulation is not None and packed.shape_mask is None:
            raise ConfigurationError(
                f"sample {s.record_id} lacks a shape mask but modulation is on"
            )
        prepared.append(
            {
                "packed": packed,
                "z0": codec.encode(s.composite).reshape(-1, config.patch_dim),
                "composite": torch.as_tensor(np.asarray(s.composite, dtype=np.float32)),
                "foreground": torch.as_tensor(np.asarray(s.foreground, dtype=np.float32)),
                "segmenter": FixedMaskSegmenter(s.object_mask),
                "region": s.interaction_region,
                "mask": s.unchanged_mask,
            }
        )

    rng = np.random.default_rng(np.random.SeedSequence([settings.seed, 0x7EA1]))
    noise_gen = torch.Generator().manual_seed(settings.seed)
    grid_h, grid_w = config.grid

    reports = []
    loss_fh = None
    ckpt_root = None
    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        loss_fh = open(os.path.join(run_dir, "losses.jsonl"), "w", encoding="utf-8")
        ckpt_root = os.path.join(run_dir, "checkpoints")

    def write_checkpoint(tag: str):
        if ckpt_root:
            save_checkpoint(state, os.path.join(ckpt_root, tag))

    try:
        model.train()
        for step in range(1, settings.steps + 1):
            idx = rng.choice(
                len(prepared),
                size=settings.batch_size,
                replace=len(prepared) < settings.batch_size,
            )
            terms = {"denoising": [], "pose": [], "background": [], "appearance": []}
            pose_points = 0
            for i in idx:
                item = prepared[int(i)]
                t = int(rng.integers(0, schedule.timesteps))
                eps = torch.randn(item["z0"].shape, generator=noise_gen)
                z_t = schedule.add_noise(item["z0"], eps, t)
                pred = model(z_t, t, item["packed"], modulation=modulation)
                target = schedule.target(item["z0"], eps, t, config.prediction)
                terms["denoising"].append(denoising_loss(pred, target))

                x0_tokens = schedule.predict_x0(z_t, pred, t, config.prediction)
                x0_tokens = torch.clamp(x0_tokens, -8.0, 8.0)
                pred_img = codec.decode(x0_tokens.reshape(grid_h, grid_w, -1))
                p_loss, n_in = pose_loss(
                    item["composite"],
                    pred_img,
                    item["region"],
                    backends.pose_estimator,
                    with_count=True,
                )
                pose_points += n_in
                terms["pose"].append(p_loss)
                terms["background"].append(
                    background_loss(
                        item["composite"],
                        pred_img,
                        item["mask"],
                        normalize=settings.normalize_background,
                    )
                )
                terms["appearance"].append(
                    appearance_loss(
                        pred_img,
                        item["foreground"],
                        item["segmenter"],
                        backends.view_generator,
                        backends.feature_extractor,
                        k=settings.views,
                    )
                )

            mean_terms = {k: torch.stack(v).mean() for k, v in terms.items()}
            total = weighted_total(
                mean_terms["denoising"],
                mean_terms["pose"],
                mean_terms["background"],
                mean_terms["appearance"],
                coeffs,
            )
            if not torch.isfinite(total):
                raise NumericError(
                    f"non-finite total loss at step {step}; last checkpoint retained"
                )
            optimizer.zero_grad()
            total.backward()
            if settings.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(trainable, settings.grad_clip)
            optimizer.step()

            state.step = step
            report = total_loss(
                float(mean_terms["denoising"].detach()),
                float(mean_terms["pose"].detach()),
                float(mean_terms["background"].detach()),
                float(mean_terms["appearance"].detach()),
                coeffs,
                pose_points=pose_points,
                step=step,
            )
            reports.append(report)
            if loss_fh:
                loss_fh.write(report.to_json_line() + "\n")
                loss_fh.flush()
            if ckpt_root and settings.checkpoint_interval > 0 and step % settings.checkpoint_interval == 0:
                write_checkpoint(f"step_{step:06d}")
        write_checkpoint("final")
    finally:
        if loss_fh:
            loss_fh.close()
    model.eval()
    return state, reports


def sample(
    state: TrainState,
    bundle: ConditioningBundle,
    seed: int = 0,
    steps: int = 20,
    guidance_scale: float = None,
    capture_attention: list = None,
) -> np.ndarray:
    """DDIM sampling with classifier-free guidance; returns (H, W, 3) float32.

    The unconditional branch drops the text/identity/detail segments but
    keeps region and background tokens. ``guidance_scale`` 1.0 short-circuits
    to the conditional branch alone. Inference never modulates attention (the
    shape mask is a training-time signal); pass ``capture_attention`` (a list)
    to collect the unmodulated image->text and image->identity slices from
    the final denoising step.
    """
    gs = state.config.guidance_scale if guidance_scale is None else float(guidance_scale)
    if gs < 0:
        raise ParameterError(f"guidance scale must be >= 0, got {gs}")
    packed = pack_bundle(bundle, state.codec, state.config)
    schedule = state.schedule
    config = state.config
    grid_h, grid_w = config.grid
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn((config.image_tokens, config.patch_dim), generator=gen)
    indices = schedule.ddim_indices(steps)
    state.model.eval()
    with torch.no_grad():
        for pos, t in enumerate(indices):
            cap = capture_attention if pos + 1 == len(indices) else None
            pred_c = state.model(z, t, packed, capture=cap)
            if gs != 1.0:
                pred_u = state.model(z, t, packed, drop_conditioning=True)
                pred = pred_u + gs * (pred_c - pred_u)
            else:
                pred = pred_c
            x0 = schedule.predict_x0(z, pred, t, config.prediction)
            x0 = torch.clamp(x0, -8.0, 8.0)
            if pos + 1 < len(indices):
                t_prev = indices[pos + 1]
                eps_hat = schedule.eps_from_x0(z, x0, t)
                z = schedule.sqrt_ab[t_prev] * x0 + schedule.sqrt_1mab[t_prev] * eps_hat
            else:
                z = x0
        image = state.codec.decode(z.reshape(grid_h, grid_w, -1))
    return np.clip(image.numpy(), 0.0, 1.0).astype(np.float32)
