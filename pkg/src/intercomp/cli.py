"""Command-line entry point.

Subcommands cover the whole pipeline: synthetic dataset generation, region
proposal queries, training, sampling, benchmarking, ablation grids, and
dataset validation. Exit codes: 0 success, 1 domain error, 2 usage error.
Every subcommand that takes --out confines its writes to that directory and
drops the resolved configuration there for provenance.
"""

import argparse
import json
import logging
import os
import sys

from . import config as config_mod
from . import reporting
from .errors import ConfigurationError, PipelineError
from .evaluation import (
    bench_from_manifest,
    make_scorer,
    run_ablation_grid,
    run_bench,
)
from .conditioning import build_bundle
from .losses import LossCoefficients
from .model import (
    DenoiserConfig,
    TrainSettings,
    load_checkpoint,
    sample,
    samples_from_manifest,
    train,
)
from .records import load_record, read_manifest, save_image, validate_record
from .region_guidance import (
    HttpMllmClient,
    MockMllmClient,
    propose_interaction,
    write_trace,
)
from .synthetic import generate_dataset, split_dataset

log = logging.getLogger("intercomp")


def _resolve(args, keys) -> config_mod.RunConfig:
    file_values = config_mod.load_config_file(args.config) if getattr(args, "config", None) else None
    flags = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    return config_mod.resolve(file_values=file_values, flag_values=flags)


def _denoiser_config(cfg: config_mod.RunConfig) -> DenoiserConfig:
    return DenoiserConfig(
        image_size=cfg.image_size,
        patch_size=cfg.patch_size,
        d_model=cfg.d_model,
        heads=cfg.heads,
        blocks=cfg.blocks,
        adapter_rank=cfg.adapter_rank,
        guidance_scale=cfg.guidance_scale,
        timesteps=cfg.timesteps,
        prediction=cfg.prediction,
        encoder_seed=cfg.encoder_seed,
        codec_seed=cfg.codec_seed,
    )


def _coefficients(cfg: config_mod.RunConfig) -> LossCoefficients:
    return LossCoefficients(
        alpha1=cfg.alpha1, alpha2=cfg.alpha2, alpha3=cfg.alpha3, alpha=cfg.alpha
    )


def _settings(cfg: config_mod.RunConfig) -> TrainSettings:
    return TrainSettings(
        steps=cfg.steps,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        grad_clip=cfg.grad_clip,
        adapter_only=cfg.adapter_only,
        modulation=cfg.modulation,
        views=cfg.views,
        checkpoint_interval=cfg.checkpoint_interval,
        seed=cfg.seed,
        normalize_background=cfg.normalize_background,
    )


_MODEL_KEYS = (
    "image_size",
    "patch_size",
    "d_model",
    "heads",
    "blocks",
    "adapter_rank",
    "guidance_scale",
    "timesteps",
    "prediction",
    "encoder_seed",
    "codec_seed",
)
_TRAIN_KEYS = (
    "steps",
    "batch_size",
    "lr",
    "grad_clip",
    "adapter_only",
    "modulation",
    "views",
    "checkpoint_interval",
    "normalize_background",
    "alpha1",
    "alpha2",
    "alpha3",
    "alpha",
    "seed",
    "limit",
)


def _add_model_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("model")
    g.add_argument("--image-size", dest="image_size", type=int)
    g.add_argument("--patch-size", dest="patch_size", type=int)
    g.add_argument("--d-model", dest="d_model", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--blocks", type=int)
    g.add_argument("--adapter-rank", dest="adapter_rank", type=int)
    g.add_argument("--guidance-scale", dest="guidance_scale", type=float)
    g.add_argument("--timesteps", type=int)
    g.add_argument("--prediction", choices=("epsilon", "velocity"))
    g.add_argument("--encoder-seed", dest="encoder_seed", type=int)
    g.add_argument("--codec-seed", dest="codec_seed", type=int)


def _add_train_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("training")
    g.add_argument("--steps", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--grad-clip", dest="grad_clip", type=float)
    g.add_argument("--adapter-only", dest="adapter_only", action="store_const", const=True)
    g.add_argument("--modulation", choices=("residual", "non_residual", "off"))
    g.add_argument("--views", type=int)
    g.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    g.add_argument(
        "--normalize-background", dest="normalize_background", action="store_const", const=True
    )
    g.add_argument("--alpha1", type=float)
    g.add_argument("--alpha2", type=float)
    g.add_argument("--alpha3", type=float)
    g.add_argument("--alpha", type=float)
    g.add_argument("--limit", type=int)


def cmd_dataset_gen(args) -> int:
    cfg = _resolve(args, ("seed", "count", "canvas", "interactions", "split"))
    os.makedirs(args.out, exist_ok=True)
    config_mod.write_resolved(cfg, args.out)
    manifest, stats = generate_dataset(
        args.out,
        count=cfg.count,
        seed=cfg.seed,
        canvas=cfg.canvas,
        interactions=tuple(cfg.interactions),
    )
    if cfg.split:
        split_dataset(manifest, ratios=tuple(cfg.split), seed=cfg.seed)
    print(json.dumps({"manifest": manifest, "stats": stats}, indent=2, sort_keys=True))
    return 0


def _region_client(args, cfg, out_dir=None):
    if getattr(args, "mock", None):
        return MockMllmClient.from_file(args.mock)
    cache = os.path.join(out_dir, "mllm_cache") if out_dir else None
    return HttpMllmClient(
        endpoint=cfg.mllm_endpoint,
        api_key=cfg.mllm_api_key,
        model=cfg.mllm_model,
        cache_dir=cache,
    )


def cmd_mrpg(args) -> int:
    from .records import load_image

    cfg = _resolve(args, ("seed", "mllm_endpoint", "mllm_model", "mllm_retries"))
    foreground = load_image(args.fg)
    background = load_image(args.bg)
    client = _region_client(args, cfg, out_dir=args.out)
    trace = []
    spec = propose_interaction(
        client, foreground, background, retries=cfg.mllm_retries, trace=trace
    )
    payload = json.dumps(spec.to_dict(), indent=2, sort_keys=True)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        config_mod.write_resolved(cfg, args.out)
        with open(os.path.join(args.out, "interaction.json"), "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
        if args.trace:
            write_trace(trace, os.path.join(args.out, "trace.jsonl"))
    print(payload)
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args, _MODEL_KEYS + _TRAIN_KEYS)
    model_cfg = _denoiser_config(cfg)
    os.makedirs(args.out, exist_ok=True)
    config_mod.write_resolved(cfg, args.out)
    samples, _ = samples_from_manifest(args.manifest, config=model_cfg, limit=cfg.limit)
    state, reports = train(
        samples,
        config=model_cfg,
        coeffs=_coefficients(cfg),
        settings=_settings(cfg),
        run_dir=args.out,
    )
    if reports:
        reporting.loss_curves(reports, os.path.join(args.out, "loss_curves.png"))
        print(reports[-1].to_json_line())
    print(
        json.dumps(
            {
                "steps": state.step,
                "checkpoint": os.path.join(args.out, "checkpoints", "final"),
            },
            sort_keys=True,
        )
    )
    return 0


def _pick_row(rows, record_id=None, index=0):
    if record_id is not None:
        for row in rows:
            if row.get("id") == record_id:
                return row
        raise ConfigurationError(f"record id {record_id!r} not found in manifest")
    if index < 0 or index >= len(rows):
        raise ConfigurationError(f"record index {index} out of range (0..{len(rows) - 1})")
    return rows[index]


def cmd_sample(args) -> int:
    cfg = _resolve(args, ("seed", "sample_steps", "sample_guidance"))
    state = load_checkpoint(args.checkpoint)
    rows = read_manifest(args.manifest)
    row = _pick_row(rows, args.record_id, args.index)
    root = os.path.dirname(os.path.abspath(args.manifest))
    record, _ = load_record(row, root)
    bundle = build_bundle(
        background=record.background,
        foreground=record.foreground,
        prompt=record.prompt,
        foreground_span=record.foreground_span,
        interaction_region=record.interaction_region,
        encoders=state.encoders(),
        latent_grid=state.config.grid,
    )
    os.makedirs(args.out, exist_ok=True)
    config_mod.write_resolved(cfg, args.out)
    capture = [] if args.dump_attention else None
    image = sample(
        state,
        bundle,
        seed=cfg.seed,
        steps=cfg.sample_steps,
        guidance_scale=cfg.sample_guidance,
        capture_attention=capture,
    )
    out_png = os.path.join(args.out, "sample.png")
    save_image(image, out_png)
    meta = {
        "record_id": record.record_id,
        "seed": cfg.seed,
        "steps": cfg.sample_steps,
        "guidance_scale": cfg.sample_guidance
        if cfg.sample_guidance is not None
        else state.config.guidance_scale,
        "image": out_png,
    }
    if capture:
        meta["attention"] = reporting.attention_heatmaps(
            capture, state.config.grid, os.path.join(args.out, "attention.png")
        )
    with open(os.path.join(args.out, "sample.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    print(json.dumps(meta, indent=2, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve(
        args,
        ("seed", "limit", "sample_steps", "sample_guidance", "bench_seeds", "workers", "scorers"),
    )
    state = load_checkpoint(args.checkpoint)
    spec = bench_from_manifest(
        args.manifest,
        limit=cfg.limit,
        seeds=tuple(cfg.bench_seeds),
        sample_steps=cfg.sample_steps,
        guidance_scale=cfg.sample_guidance,
        workers=cfg.workers,
    )
    client = _region_client(args, cfg, out_dir=args.out) if (args.mock or args.live_mllm) else None
    scorers = [make_scorer(name) for name in cfg.scorers]
    os.makedirs(args.out, exist_ok=True)
    config_mod.write_resolved(cfg, args.out)
    report = run_bench(spec, state, client=client, scorers=scorers, out_dir=args.out)
    print(json.dumps(report["aggregates"], indent=2, sort_keys=True))
    return 0


_AXIS_CASTS = {
    "background_coefficient": float,
    "modulation": str,
    "views": int,
    "guidance": float,
}


def cmd_ablate(args) -> int:
    cfg = _resolve(
        args,
        _MODEL_KEYS
        + _TRAIN_KEYS
        + ("axis", "values", "ablation_seeds", "sample_steps", "bench_seeds"),
    )
    if not cfg.axis or not cfg.values:
        raise ConfigurationError("ablate needs --axis and --values")
    if cfg.axis not in _AXIS_CASTS:
        raise ConfigurationError(
            f"unknown ablation axis {cfg.axis!r}; choose from {sorted(_AXIS_CASTS)}"
        )
    values = [_AXIS_CASTS[cfg.axis](v) for v in cfg.values]
    model_cfg = _denoiser_config(cfg)
    samples, _ = samples_from_manifest(args.manifest, config=model_cfg, limit=cfg.limit)
    bench = bench_from_manifest(
        args.manifest,
        limit=cfg.limit,
        seeds=tuple(cfg.bench_seeds),
        sample_steps=cfg.sample_steps,
    )
    os.makedirs(args.out, exist_ok=True)
    config_mod.write_resolved(cfg, args.out)
    grid = run_ablation_grid(
        cfg.axis,
        values,
        samples,
        bench,
        config=model_cfg,
        coeffs=_coefficients(cfg),
        settings=_settings(cfg),
        seeds=tuple(cfg.ablation_seeds),
        out_dir=args.out,
    )
    print(grid["table"])
    failed = [c for c in grid["cells"] if "error" in c]
    if failed:
        print(f"{len(failed)} cell(s) failed; see grid.json", file=sys.stderr)
    return 0


def cmd_validate(args) -> int:
    rows = read_manifest(args.manifest)
    root = os.path.dirname(os.path.abspath(args.manifest))
    total = 0
    for row in rows:
        rid = row.get("id", "<missing id>")
        try:
            record, _ = load_record(row, root)
            violations = validate_record(record)
        except (PipelineError, OSError) as exc:
            # a single unreadable file is that record's violation, not a
            # reason to abort the whole sweep
            violations = [f"unreadable record: {exc}"]
        for v in violations:
            print(f"{rid}: {v}")
        total += len(violations)
    print(f"{total} violations")
    return 0 if total == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="intercomp",
        description="Interaction-aware human-object composition pipeline (desk scale).",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-gen", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--canvas", type=int)
    p.add_argument("--interactions", help="comma-separated subset of hold,lift,wear")
    p.add_argument("--split", help="train,val,test ratios, e.g. 0.8,0.1,0.1")
    p.set_defaults(func=cmd_dataset_gen)

    p = sub.add_parser("mrpg", help="query the region-proposal protocol")
    p.add_argument("--fg", required=True, help="foreground PNG")
    p.add_argument("--bg", required=True, help="background PNG")
    p.add_argument("--mock", help="fixture file for the mock client")
    p.add_argument("--out")
    p.add_argument("--trace", action="store_true", help="write trace.jsonl (needs --out)")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--mllm-endpoint", dest="mllm_endpoint")
    p.add_argument("--mllm-model", dest="mllm_model")
    p.add_argument("--retries", dest="mllm_retries", type=int)
    p.set_defaults(func=cmd_mrpg)

    p = sub.add_parser("train", help="train the toy denoiser")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample a composite from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--record-id", dest="record_id")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", dest="sample_steps", type=int)
    p.add_argument("--guidance", dest="sample_guidance", type=float)
    p.add_argument("--dump-attention", dest="dump_attention", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("bench", help="run the bench harness on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--limit", type=int)
    p.add_argument("--seeds", dest="bench_seeds", help="comma-separated sampling seeds")
    p.add_argument("--sample-steps", dest="sample_steps", type=int)
    p.add_argument("--guidance", dest="sample_guidance", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--scorers", help="comma-separated registry names")
    p.add_argument("--mock", help="fixture file; propose regions via the mock client")
    p.add_argument(
        "--live-mllm",
        dest="live_mllm",
        action="store_true",
        help="propose regions via the HTTP client (uses environment endpoint)",
    )
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="train/eval a one-axis ablation grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--axis", choices=sorted(_AXIS_CASTS))
    p.add_argument("--values", help="comma-separated axis values")
    p.add_argument("--seeds", dest="ablation_seeds", help="comma-separated training seeds")
    p.add_argument("--bench-seeds", dest="bench_seeds")
    p.add_argument("--sample-steps", dest="sample_steps", type=int)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("validate", help="validate every record in a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_validate)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (PipelineError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
