"""Run configuration: declared schema, file/flag/env merging, provenance.

Precedence is flags > config file > environment (API keys only) > defaults.
Every key a run consumes is declared in SCHEMA; an unknown key in a config
file or override dict is an error rather than a silent no-op. The resolved
configuration is written into the run directory so a run can always be
replayed from its artifacts.
"""

import json
import os

from .errors import ConfigurationError

try:
    import yaml
except ImportError:  # PyYAML is a declared dependency; guard for odd installs
    yaml = None


def _csv_str(value):
    if isinstance(value, str):
        return [p.strip() for p in value.split(",") if p.strip()]
    return list(value)


def _csv_int(value):
    return [int(p) for p in _csv_str(value)]


def _csv_float(value):
    return [float(p) for p in _csv_str(value)]


def _bool(value):
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
    raise ConfigurationError(f"expected a boolean, got {value!r}")


def _opt(cast):
    def convert(value):
        return None if value is None else cast(value)

    return convert


# key -> (default, caster). None-able keys use _opt casters.
SCHEMA = {
    # shared
    "seed": (0, int),
    "limit": (None, _opt(int)),
    # dataset generation
    "count": (64, int),
    "canvas": (64, int),
    "interactions": (["hold", "lift", "wear"], _csv_str),
    "split": (None, _opt(_csv_float)),
    # model
    "image_size": (64, int),
    "patch_size": (4, int),
    "d_model": (64, int),
    "heads": (4, int),
    "blocks": (2, int),
    "adapter_rank": (16, int),
    "guidance_scale": (3.5, float),
    "timesteps": (100, int),
    "prediction": ("epsilon", str),
    "encoder_seed": (0, int),
    "codec_seed": (0, int),
    # training
    "steps": (500, int),
    "batch_size": (2, int),
    "lr": (2e-3, float),
    "grad_clip": (1.0, float),
    "adapter_only": (False, _bool),
    "modulation": ("residual", str),
    "views": (6, int),
    "checkpoint_interval": (200, int),
    "normalize_background": (False, _bool),
    # loss coefficients
    "alpha1": (1.0, float),
    "alpha2": (0.5, float),
    "alpha3": (0.8, float),
    "alpha": (1.0, float),
    # sampling / bench
    "sample_steps": (20, int),
    "sample_guidance": (None, _opt(float)),
    "bench_seeds": ([0], _csv_int),
    "workers": (1, int),
    "scorers": ([], _csv_str),
    # ablation
    "axis": (None, _opt(str)),
    "values": (None, _opt(_csv_str)),
    "ablation_seeds": ([0, 1, 2], _csv_int),
    # MLLM backend (API key comes from the environment by default)
    "mllm_endpoint": (None, _opt(str)),
    "mllm_api_key": (None, _opt(str)),
    "mllm_model": (None, _opt(str)),
    "mllm_retries": (2, int),
}

_ENV_KEYS = {
    "mllm_endpoint": "INTERCOMP_MLLM_ENDPOINT",
    "mllm_api_key": "INTERCOMP_MLLM_API_KEY",
    "mllm_model": "INTERCOMP_MLLM_MODEL",
}

_REDACTED_KEYS = ("mllm_api_key",)


class RunConfig:
    """Immutable-ish resolved configuration with attribute access."""

    def __init__(self, values: dict):
        object.__setattr__(self, "_values", dict(values))

    def __getattr__(self, key):
        values = object.__getattribute__(self, "_values")
        if key in values:
            return values[key]
        raise AttributeError(key)

    def __setattr__(self, key, value):
        raise ConfigurationError("resolved configuration is read-only")

    def __getitem__(self, key):
        return self._values[key]

    def __contains__(self, key):
        return key in self._values

    def to_dict(self) -> dict:
        return dict(self._values)


def load_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigurationError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if path.endswith((".yaml", ".yml")):
        if yaml is None:
            raise ConfigurationError("YAML config requires PyYAML")
        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file must hold a mapping, got {type(data).__name__}")
    return data


def _check_known(values: dict, source: str):
    unknown = sorted(set(values) - set(SCHEMA))
    if unknown:
        raise ConfigurationError(f"unknown config key(s) in {source}: {', '.join(unknown)}")


def resolve(file_values: dict = None, flag_values: dict = None, env: dict = None) -> RunConfig:
    """Merge one layer per source under flags > file > env > defaults.

    ``flag_values`` entries that are None count as "not given" so argparse
    defaults can pass through without clobbering the file layer.
    """
    env = os.environ if env is None else env
    merged = {}
    for key, (default, cast) in SCHEMA.items():
        merged[key] = list(default) if isinstance(default, list) else default
    for key, env_name in _ENV_KEYS.items():
        if env.get(env_name):
            merged[key] = env[env_name]

    if file_values:
        _check_known(file_values, "config file")
        merged.update(file_values)
    if flag_values:
        given = {k: v for k, v in flag_values.items() if v is not None}
        _check_known(given, "flag overrides")
        merged.update(given)

    resolved = {}
    for key, (_, cast) in SCHEMA.items():
        try:
            resolved[key] = cast(merged[key])
        except ConfigurationError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad value for config key {key!r}: {exc}")
    return RunConfig(resolved)


def write_resolved(config: RunConfig, run_dir: str) -> str:
    """Persist the resolved config (secrets redacted) into the run directory."""
    os.makedirs(run_dir, exist_ok=True)
    payload = config.to_dict()
    for key in _REDACTED_KEYS:
        if payload.get(key):
            payload[key] = "<redacted>"
    path = os.path.join(run_dir, "config.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    return path
