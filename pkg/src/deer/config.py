"""Run configuration: ``section.key = value`` files merged with command-line overrides."""
from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field

from .data import AugmentConfig, DatasetConfig
from .evaluation import EvalConfig
from .model import ModelConfig
from .tensor import ConfigurationError
from .training import TrainConfig

SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DatasetConfig,
    "augment": AugmentConfig,
    "eval": EvalConfig,
}

DESCRIPTIONS = {
    "model.d_model": "token width",
    "model.enc_layers": "encoder layers (deformable self-attention)",
    "model.dec_layers": "decoder layers; odd layers deformable, even layers plain",
    "model.num_heads": "attention heads",
    "model.num_points": "sampling points per head and level",
    "model.charset": "recognised symbols",
    "model.max_text_len": "longest decodable word",
    "model.backbone_channels": "widths of the four backbone stages",
    "model.ffn_dim": "hidden width of feed-forward blocks",
    "model.db_k": "amplification factor of the approximate binary map",
    "model.alternate_attention": "alternate deformable and plain cross-attention",
    "model.seed": "weight initialisation seed",
    "train.lambda_s": "weight of the probability-map loss",
    "train.lambda_b": "weight of the binary-map loss",
    "train.lambda_t": "weight of the threshold-map loss",
    "train.lr_base": "peak learning rate",
    "train.lr_min": "final learning rate",
    "train.warmup_steps": "linear warmup length",
    "train.total_steps": "optimizer steps",
    "train.batch_size": "images per step",
    "train.n_instances": "words read per image per step",
    "train.perturb_enabled": "jitter training reference points",
    "train.detection_supervision": "train the location head",
    "train.point_mode": "center or inner reference points",
    "train.weight_decay": "decoupled weight decay",
    "train.grad_clip": "global gradient-norm clip (0 disables)",
    "train.augment": "apply rotation/resize/crop/jitter augmentation",
    "train.checkpoint_every": "checkpoint interval in steps",
    "train.seed": "data and sampling seed",
    "data.image_size": "synthetic image height,width",
    "data.min_words": "fewest words per image",
    "data.max_words": "most words per image",
    "data.min_len": "shortest word",
    "data.max_len": "longest word",
    "data.charset": "symbols drawn into words",
    "data.rotation": "word rotation range in degrees (symmetric)",
    "data.scale_range": "pixels per font unit",
    "data.noise": "Gaussian pixel noise",
    "data.shrink_ratio": "shrink factor for probability targets",
    "data.margin": "minimum spacing between words",
    "augment.rotation": "rotation range in degrees (symmetric)",
    "augment.resize_range": "uniform resize factor range",
    "augment.crop_size": "safe crop side length",
    "augment.jitter_prob": "probability of colour jitter",
    "augment.jitter": "brightness/contrast/saturation amplitude",
    "eval.long_side": "inference resize target for the longer side",
    "eval.iou_threshold": "IoU needed for a match",
    "eval.case_sensitive": "compare transcriptions case-sensitively",
    "eval.ic15_rules": "strip boundary punctuation and ignore words shorter than 3",
    "eval.gt_points": "read text at ground-truth reference points",
    "eval.point_mode": "center or inner reference points",
    "eval.prob_threshold": "probability-map binarisation threshold",
    "eval.dilation": "region dilation factor",
    "eval.min_score": "minimum mean region probability",
    "eval.min_area": "minimum region size in map pixels",
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetConfig = field(default_factory=DatasetConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _parse_value(text: str, typ, key: str):
    text = text.strip()
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
        if origin is tuple:
            args = [a for a in typing.get_args(typ) if a is not Ellipsis]
            conv = args[0] if args else float
            return tuple(conv(p) for p in text.replace("x", ",").split(",") if p.strip())
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {text!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigurationError(f"{key}: unsupported type {typ}")


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def parse_assignments(text: str, source: str = "<config>") -> list[tuple[str, str]]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        out.append((key, value))
    return out


def build_config(assignments: list[tuple[str, str]]) -> RunConfig:
    """Defaults overridden by ``(section.key, value)`` pairs in order; unknown keys are errors."""
    values: dict[str, dict[str, object]] = {s: {} for s in SECTIONS}
    for key, text in assignments:
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigurationError(f"unknown config key: {key}")
        types = _field_types(SECTIONS[section])
        if name not in types:
            raise ConfigurationError(f"unknown config key: {key}")
        values[section][name] = _parse_value(text, types[name], key)
    try:
        parts = {s: cls(**values[s]) for s, cls in SECTIONS.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from None
    return RunConfig(**parts)


def load_config(path: str | os.PathLike | None, overrides: list[tuple[str, str]] | None = None) -> RunConfig:
    assignments = []
    if path is not None:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path) as fh:
            assignments = parse_assignments(fh.read(), str(path))
    return build_config(assignments + list(overrides or []))


def format_config(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def reference_page() -> str:
    """Markdown table of every key with its default."""
    default = RunConfig()
    lines = ["# Configuration reference", "",
             "Files hold `section.key = value` lines; `#` starts a comment. Unknown keys are rejected.", ""]
    for section, cls in SECTIONS.items():
        lines += [f"## {section}", "", "| key | default | meaning |", "|---|---|---|"]
        obj = getattr(default, section)
        for f in dataclasses.fields(cls):
            key = f"{section}.{f.name}"
            lines.append(f"| `{key}` | `{_format_value(getattr(obj, f.name))}` | {DESCRIPTIONS.get(key, '')} |")
        lines.append("")
    return "\n".join(lines)
