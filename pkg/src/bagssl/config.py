"""Plain key=value run configuration with dotted sections.

Unknown keys are fatal (typo protection) and every value is validated
before any work starts. The resolved ("effective") config can be written
back out and reproduces the run when fed in again.
"""

from __future__ import annotations

from .dataset_io import AugmentParams
from .errors import ConfigError

_REQUIRED = object()


def _bool(text: str) -> bool:
    if text in ("true", "1", "yes"):
        return True
    if text in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


DEFAULT_ENCODER = (
    "conv(3,2,8)|standardize|relu|conv(3,2,16)|standardize|relu|"
    "conv(3,2,32)|standardize|relu|pool|dense(64)"
)
DEFAULT_PROJECTOR = "dense(128)|relu|dense(32)"

# key -> (parser, default); _REQUIRED defaults must be supplied by the file.
KEYS: dict = {
    "dataset.name": (str, _REQUIRED),
    "dataset.path": (str, ""),
    "dataset.test_path": (str, ""),
    "dataset.images": (str, ""),
    "dataset.labels": (str, ""),
    "dataset.test_images": (str, ""),
    "dataset.test_labels": (str, ""),
    "dataset.limit": (int, 0),
    "dataset.test_limit": (int, 0),
    "patch.src_size": (int, 14),
    "patch.canonical": (int, 16),
    "patch.mode": (str, "fixed"),
    "patch.min_scale": (float, 0.08),
    "patch.max_scale": (float, 1.0),
    "augment.enabled": (_bool, True),
    "augment.brightness_lo": (float, 0.6),
    "augment.brightness_hi": (float, 1.4),
    "augment.contrast_lo": (float, 0.6),
    "augment.contrast_hi": (float, 1.4),
    "augment.saturation_lo": (float, 0.6),
    "augment.saturation_hi": (float, 1.4),
    "augment.grayscale_prob": (float, 0.2),
    "augment.flip_prob": (float, 0.5),
    "model.encoder": (str, DEFAULT_ENCODER),
    "model.projector": (str, DEFAULT_PROJECTOR),
    "loss.kind": (str, "spectral"),
    "loss.lambda": (float, 1.0),
    "loss.c_var": (float, 25.0),
    "loss.c_inv": (float, 25.0),
    "loss.c_cov": (float, 1.0),
    "loss.temperature": (float, 0.1),
    "optim.lr": (float, 0.02),
    "optim.momentum": (float, 0.9),
    "optim.weight_decay": (float, 1e-4),
    "optim.warmup_epochs": (int, 2),
    "optim.epochs": (int, 30),
    "optim.batch_size": (int, 128),
    "cooc.mode": (str, "grid_hash"),
    "cooc.q": (int, 2),
    "cooc.bits": (int, 2),
    "cooc.pairs_per_image": (int, 16),
    "cooc.augment": (_bool, True),
    "seed": (int, 0),
    "out": (str, ""),
    "threads": (int, 1),
}

_ENUMS = {
    "dataset.name": ("cifar10", "idx"),
    "patch.mode": ("fixed", "random_resized"),
    "loss.kind": ("spectral", "vicreg", "infonce"),
    "cooc.mode": ("grid_hash",),
}


class RunConfig:
    """Resolved configuration; keys become attributes with dots replaced
    by underscores (optim.lr -> cfg.optim_lr)."""

    def __init__(self, values: dict):
        self.values = values
        for key, val in values.items():
            setattr(self, key.replace(".", "_"), val)
        self._validate()

    def _validate(self):
        v = self.values
        for key, allowed in _ENUMS.items():
            if v[key] not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {v[key]!r}")
        if v["dataset.name"] == "cifar10" and not v["dataset.path"]:
            raise ConfigError("dataset.name=cifar10 requires dataset.path")
        if v["dataset.name"] == "idx" and not (v["dataset.images"] and v["dataset.labels"]):
            raise ConfigError("dataset.name=idx requires dataset.images and dataset.labels")
        for key in ("patch.src_size", "patch.canonical", "optim.epochs", "optim.batch_size",
                    "cooc.q", "cooc.bits", "cooc.pairs_per_image", "threads"):
            if key == "optim.epochs":
                if v[key] < 0:
                    raise ConfigError(f"{key} must be >= 0, got {v[key]}")
            elif v[key] < 1:
                raise ConfigError(f"{key} must be >= 1, got {v[key]}")
        if v["optim.batch_size"] < 2:
            raise ConfigError("optim.batch_size must be >= 2")
        if not (0.0 < v["patch.min_scale"] <= v["patch.max_scale"] <= 1.0):
            raise ConfigError("need 0 < patch.min_scale <= patch.max_scale <= 1")
        if v["optim.lr"] < 0 or v["optim.warmup_epochs"] < 0 or v["optim.weight_decay"] < 0:
            raise ConfigError("optimizer settings must be non-negative")
        if v["loss.temperature"] <= 0:
            raise ConfigError("loss.temperature must be positive")
        if v["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        try:
            self.augment_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def augment_params(self) -> AugmentParams:
        if not self.values["augment.enabled"]:
            return AugmentParams.identity()
        v = self.values
        return AugmentParams(
            (v["augment.brightness_lo"], v["augment.brightness_hi"]),
            (v["augment.contrast_lo"], v["augment.contrast_hi"]),
            (v["augment.saturation_lo"], v["augment.saturation_hi"]),
            v["augment.grayscale_prob"],
            v["augment.flip_prob"],
        )


def parse_config_text(text: str) -> dict:
    """Raw key -> string-value pairs; duplicate keys are errors."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def resolve_config(raw: dict, overrides: dict | None = None) -> RunConfig:
    """Apply defaults, parse types, reject unknown keys."""
    unknown = sorted(set(raw) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {}
    for key, (parser, default) in KEYS.items():
        if key in raw:
            try:
                values[key] = parser(raw[key])
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        elif default is _REQUIRED:
            raise ConfigError(f"missing required config key {key}")
        else:
            values[key] = default
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    return RunConfig(values)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return resolve_config(parse_config_text(text), overrides)


def effective_text(cfg: RunConfig) -> str:
    """Canonical serialized form of the resolved config."""
    lines = []
    for key in sorted(cfg.values):
        val = cfg.values[key]
        if isinstance(val, bool):
            text = "true" if val else "false"
        elif isinstance(val, float):
            text = repr(val)
        else:
            text = str(val)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
