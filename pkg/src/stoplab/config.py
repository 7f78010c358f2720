"""Flat ``key = value`` run configuration.

One key per line, ``#`` starts a comment.  Every key has a default listed
in :data:`DEFAULTS`; unknown keys are rejected.
"""
from __future__ import annotations

from pathlib import Path

from .errors import ConfigError

# key -> (default, help)
DEFAULTS = {
    "data.source": ("synthetic", "synthetic | idx"),
    "data.train_images": ("", "IDX image file for the train split (data.source = idx)"),
    "data.train_labels": ("", "IDX label file for the train split"),
    "data.test_images": ("", "IDX image file for the test split"),
    "data.test_labels": ("", "IDX label file for the test split"),
    "data.n_train": (4096, "synthetic train images"),
    "data.n_test": (1024, "synthetic test images"),
    "data.image_size": (32, "synthetic image side in pixels"),
    "data.channels": (1, "synthetic image channels (1 or 3)"),
    "data.num_classes": (4, "synthetic shape classes"),
    "data.seed": (0, "synthetic data seed (test split uses seed + 1)"),
    "data.patch": (8, "patch side in pixels"),
    "data.pixel_mean": (0.3, "pixel value subtracted before the patch projection"),
    "data.pixel_std": (0.3, "pixel scale divided out before the patch projection"),
    "data.mask": ("block", "block | random"),
    "data.mask_ratio": (0.75, "target fraction for random masks"),
    "data.num_targets": (4, "target blocks per block mask"),
    "data.target_scale_lo": (0.15, "min block area as a fraction of the grid"),
    "data.target_scale_hi": (0.25, "max block area as a fraction of the grid"),
    "data.aspect_lo": (0.75, "min block height/width ratio"),
    "data.aspect_hi": (1.5, "max block height/width ratio"),
    "data.per_image_masks": (False, "sample one mask per image instead of one per batch"),
    "model.enc_depth": (4, "encoder transformer blocks"),
    "model.d_e": (64, "encoder width"),
    "model.enc_heads": (4, "encoder attention heads"),
    "model.pred_depth": (2, "predictor transformer blocks"),
    "model.d_p": (32, "predictor width"),
    "model.pred_heads": (4, "predictor attention heads"),
    "model.mlp_ratio": (4.0, "MLP hidden width / model width"),
    "model.target_mode": ("latent_ema", "latent_ema | pixel"),
    "model.target_norm": (True, "layer-normalize regression targets per token"),
    "stop.sigma": (0.25, "noise variance of stochastic positions"),
    "stop.noise_target": ("masked_only", "masked_only | context_only | both | none"),
    "stop.embed_kind": ("stop", "stop | sincos | learned | fixed_cov"),
    "stop.reg": ("none", "none | l1 | l2 penalty on the tied projection"),
    "stop.reg_coeff": (0.0, "penalty coefficient for stop.reg"),
    "optim.batch": (64, "images per step"),
    "optim.lr": (1e-3, "peak learning rate"),
    "optim.warmup_frac": (0.05, "fraction of steps spent in linear warmup"),
    "optim.wd_lo": (0.04, "weight decay at step 0"),
    "optim.wd_hi": (0.4, "weight decay at the last step"),
    "optim.beta1": (0.9, "AdamW beta1"),
    "optim.beta2": (0.999, "AdamW beta2"),
    "optim.eps": (1e-8, "AdamW epsilon"),
    "optim.ema_lo": (0.996, "target-encoder EMA momentum at step 0"),
    "optim.ema_hi": (1.0, "target-encoder EMA momentum at the last step"),
    "train.steps": (2000, "optimizer steps"),
    "train.seed": (0, "model init / batch / mask / noise seed"),
    "train.ckpt_every": (500, "checkpoint period in steps (0 disables)"),
    "eval.epochs": (300, "linear-probe full-batch gradient steps"),
    "eval.lr": (0.5, "linear-probe learning rate"),
    "eval.l2": (0.0, "linear-probe L2 penalty"),
    "paths.run_dir": ("runs/default", "output directory"),
}

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(key, raw, default):
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in _BOOL_TRUE:
            return True
        if text in _BOOL_FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            if isinstance(raw, str) and "e" in raw.lower():
                raw = float(raw)
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {raw!r}") from None
    return str(raw)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


class RunConfig:
    """Validated flat configuration; behaves like a read-only mapping."""

    def __init__(self, values=None):
        self._values = {k: v for k, (v, _) in DEFAULTS.items()}
        for key, raw in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self._values[key] = _coerce(key, raw, DEFAULTS[key][0])

    @classmethod
    def from_text(cls, text, source="<string>"):
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
            values[key] = value
        return cls(values)

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        return cls.from_text(text, str(path))

    def with_overrides(self, **overrides):
        values = dict(self._values)
        for key, value in overrides.items():
            values[key.replace("__", ".")] = value
        return RunConfig(values)

    def override(self, mapping):
        values = dict(self._values)
        values.update(mapping)
        return RunConfig(values)

    def __getitem__(self, key):
        return self._values[key]

    def __contains__(self, key):
        return key in self._values

    def __iter__(self):
        return iter(self._values)

    def items(self):
        return self._values.items()

    def as_dict(self):
        return dict(self._values)

    def to_text(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in self._values.items())

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self._values == other._values

    def __repr__(self):
        changed = {k: v for k, v in self._values.items() if v != DEFAULTS[k][0]}
        return f"RunConfig({changed})"


def help_text():
    width = max(len(k) for k in DEFAULTS)
    lines = ["config keys (key = default  # meaning):"]
    for key, (default, doc) in DEFAULTS.items():
        lines.append(f"  {key.ljust(width)} = {_format(default)}  # {doc}")
    return "\n".join(lines)
