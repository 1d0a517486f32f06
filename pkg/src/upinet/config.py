"""Flat key-value run configuration shared by every command.

A config file holds ``key = value`` lines (``#`` comments allowed); every
key has a documented default below and unknown keys are rejected. The
effective configuration (defaults plus overrides) is snapshotted into
each run directory and suffices to reproduce the run.
"""

from __future__ import annotations

from pathlib import Path

from .data import GenConfig
from .harness import TrainConfig
from .models import ArchitectureSpec


class ConfigError(ValueError):
    """Unknown key, unparsable value or malformed config line."""


# key -> (default, help)
DEFAULTS = {
    "gen.seed": (7, "dataset seed"),
    "gen.subjects": (49, "number of subject volumes"),
    "gen.slices_min": (28, "minimum slices per volume"),
    "gen.slices_max": (136, "maximum slices per volume"),
    "gen.height": (352, "slice height in px (>= 352)"),
    "gen.width": (512, "slice width in px (>= 512)"),
    "gen.grain": (1.6, "speckle grain scale (point-spread sigma, px)"),
    "gen.curve_points": (6, "spline control points of the interface curve"),
    "gen.curve_amplitude": (0.14, "vertical wander of the interface, fraction of height"),
    "gen.slice_step": (2.0, "control-point random-walk step across slices, px"),
    "gen.distractors_min": (1, "minimum distractor edges per slice"),
    "gen.distractors_max": (3, "maximum distractor edges per slice"),
    "gen.dropout_prob": (0.35, "probability of a signal-dropout band per slice"),
    "gen.bulge_prob": (31 / 49, "fraction of subjects with an invasion-like bulge"),
    "arch.topology": ("upinet", "one of hed, casenet, dsfpn, upinet"),
    "arch.gc_stages": (3, "global-context blocks on the first m stages (upinet)"),
    "arch.cge_stages": (2, "group-enhancement blocks on the last n stages (upinet)"),
    "arch.groups": (16, "channel groups of the enhancement blocks"),
    "arch.fusion_channels": (32, "channels of each aggregated stage feature"),
    "arch.coordconv": (True, "prepend normalized coordinate channels (upinet only)"),
    "arch.side_output": (True, "supervised side output from the last stage (upinet only)"),
    "arch.input_channels": (1, "1 for grayscale, 3 for the RGB-stem variant"),
    "arch.width_divisor": (1, "divide every stage width by this factor"),
    "train.seed": (7, "training seed (init, shuffling, crops)"),
    "train.lr": (0.0003, "Adam learning rate"),
    "train.weight_decay": (0.0002, "decoupled penalty on convolution weights"),
    "train.batch_size": (8, "mini-batch size"),
    "train.max_epochs": (40, "epoch budget"),
    "train.patience": (5, "early-stopping patience, epochs"),
    "train.crop_height": (320, "training/eval crop height"),
    "train.crop_width": (480, "training/eval crop width"),
    "train.val_fraction": (0.2, "fraction of non-test subjects held out for validation"),
    "cv.folds": (10, "outer cross-validation folds"),
    "cv.seed": (7, "fold-plan seed"),
    "eval.thin": (True, "thin binarized predictions before matching"),
    "eval.thresholds": (99, "size of the uniform threshold grid"),
}

# Named override bundles. "desk" is the documented reduced profile for
# CPU-scale runs (quarter widths, 12 subjects of 16 slices, 10 epochs);
# "micro" is a minimal smoke/protocol profile at full widths.
PROFILES = {
    "full": {},
    "desk": {
        "gen.subjects": 12, "gen.slices_min": 16, "gen.slices_max": 16,
        "arch.width_divisor": 4,
        "train.max_epochs": 10, "train.crop_height": 96, "train.crop_width": 144,
    },
    "micro": {
        "gen.subjects": 4, "gen.slices_min": 3, "gen.slices_max": 3,
        "train.max_epochs": 1, "train.batch_size": 4,
        "train.crop_height": 96, "train.crop_width": 144,
        "cv.folds": 4,
    },
}


def _parse_value(key: str, raw, default):
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            lowered = str(raw).lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(str(raw), 10)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into typed overrides."""
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        overrides[key] = _parse_value(key, raw, DEFAULTS[key][0])
    return overrides


def effective_config(config_path=None, profile: str | None = None,
                     overrides: dict | None = None) -> dict:
    """Defaults, then profile, then config file, then explicit overrides."""
    cfg = {k: v for k, (v, _) in DEFAULTS.items()}
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; valid: {', '.join(sorted(PROFILES))}")
        cfg.update(PROFILES[profile])
    if config_path is not None:
        text = Path(config_path).read_text(encoding="utf-8")
        cfg.update(parse_config_text(text))
    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        cfg[key] = _parse_value(key, value, DEFAULTS[key][0])
    return cfg


def snapshot_config(cfg: dict, path) -> None:
    lines = [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def gen_config_from(cfg: dict) -> GenConfig:
    gc = GenConfig(
        seed=cfg["gen.seed"], num_subjects=cfg["gen.subjects"],
        slices_min=cfg["gen.slices_min"], slices_max=cfg["gen.slices_max"],
        height=cfg["gen.height"], width=cfg["gen.width"],
        grain_scale=cfg["gen.grain"], curve_points=cfg["gen.curve_points"],
        curve_amplitude=cfg["gen.curve_amplitude"], slice_step=cfg["gen.slice_step"],
        distractors_min=cfg["gen.distractors_min"], distractors_max=cfg["gen.distractors_max"],
        dropout_prob=cfg["gen.dropout_prob"], bulge_prob=cfg["gen.bulge_prob"])
    gc.validate()
    return gc


def arch_spec_from(cfg: dict) -> ArchitectureSpec:
    spec = ArchitectureSpec(
        topology=cfg["arch.topology"], gc_stages=cfg["arch.gc_stages"],
        cge_stages=cfg["arch.cge_stages"], num_groups=cfg["arch.groups"],
        fusion_channels=cfg["arch.fusion_channels"],
        use_coordconv=cfg["arch.coordconv"], use_side_output=cfg["arch.side_output"],
        input_channels=cfg["arch.input_channels"], width_divisor=cfg["arch.width_divisor"])
    if spec.topology != "upinet":
        spec = ArchitectureSpec.default(
            spec.topology,
            fusion_channels=spec.fusion_channels,
            use_coordconv=False,
            input_channels=spec.input_channels, width_divisor=spec.width_divisor)
    spec.validate()
    return spec


def train_config_from(cfg: dict) -> TrainConfig:
    tc = TrainConfig(
        learning_rate=cfg["train.lr"], weight_decay=cfg["train.weight_decay"],
        batch_size=cfg["train.batch_size"], max_epochs=cfg["train.max_epochs"],
        patience=cfg["train.patience"], crop_height=cfg["train.crop_height"],
        crop_width=cfg["train.crop_width"], val_fraction=cfg["train.val_fraction"],
        seed=cfg["train.seed"])
    tc.validate()
    return tc
