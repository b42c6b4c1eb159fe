"""Configuration dataclasses, strict JSON parsing, and config fingerprints.

Every run is driven by a single JSON document with sections ``model``,
``loss``, ``train``, ``data``, ``eval`` and ``output_dir``. Unknown keys are
rejected, defaults are filled in, and the fully resolved config is echoed to
``config.resolved.json`` inside the run directory. The SHA-256 of the
canonical resolved JSON serves as the checkpoint fingerprint.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid configuration or violated operation precondition (CLI exit 2)."""


WEIGHT_MODES = ("ipw", "none", "random", "reverse")
NEGATIVES_SCOPES = ("intra_domain", "inter_domain")
TRAIN_MODES = ("udg", "dg")


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 64
    semantic_depth: int = 4
    variation_depth: int = 2
    decoder_depth: int = 1
    decoder_dim: int = 64
    num_heads: int = 4
    mask_ratio: float = 0.8
    num_domains: int = 3
    num_classes: int = 0
    # Disables the variation encoder and the decoder conditioning token,
    # turning the model into a plain single-encoder masked autoencoder.
    variation_enabled: bool = True

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_values(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def validate(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if not (0.0 <= self.mask_ratio < 1.0):
            raise ConfigError(f"mask_ratio {self.mask_ratio} must lie in [0, 1)")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.decoder_dim % self.num_heads != 0:
            raise ConfigError(
                f"decoder_dim {self.decoder_dim} is not divisible by num_heads {self.num_heads}"
            )
        # Fixed 2-D sine-cosine position tables need dims in multiples of 4.
        if self.embed_dim % 4 != 0 or self.decoder_dim % 4 != 0:
            raise ConfigError("embed_dim and decoder_dim must be divisible by 4")
        if self.num_domains < 2:
            raise ConfigError(f"num_domains {self.num_domains} must be >= 2")
        if self.num_classes < 0:
            raise ConfigError(f"num_classes {self.num_classes} must be >= 0")
        for name in ("semantic_depth", "variation_depth", "decoder_depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.channels < 1:
            raise ConfigError(f"channels {self.channels} must be >= 1")


@dataclass
class LossConfig:
    gamma: float = 0.008
    tau: float = 0.4
    lambda1: float = 1e-3
    lambda2: float = 1.0
    weight_mode: str = "ipw"
    p_clamp_min: float = 0.05
    max_negatives: int = 8  # 0 = all in-batch candidates
    negatives_scope: str = "intra_domain"

    def validate(self, num_domains: int | None = None) -> None:
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be >= 0")
        if self.p_clamp_min <= 0:
            raise ConfigError(f"p_clamp_min must be > 0, got {self.p_clamp_min}")
        if num_domains is not None and self.p_clamp_min > 1.0 / num_domains:
            raise ConfigError(
                f"p_clamp_min {self.p_clamp_min} exceeds 1/num_domains = {1.0 / num_domains:.6g}"
            )
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"unknown weight_mode {self.weight_mode!r}, expected one of {WEIGHT_MODES}")
        if self.negatives_scope not in NEGATIVES_SCOPES:
            raise ConfigError(
                f"unknown negatives_scope {self.negatives_scope!r}, expected one of {NEGATIVES_SCOPES}"
            )
        if self.max_negatives < 0:
            raise ConfigError(f"max_negatives must be >= 0, got {self.max_negatives}")


@dataclass
class TrainConfig:
    epochs: int = 100
    adaptive_interval: int = 15  # domain-classifier training every this many epochs
    adaptive_max_epoch: int = 100  # last epoch at which the classifier may train
    backbone_lr: float = 1e-4
    backbone_betas: tuple[float, float] = (0.9, 0.95)
    backbone_weight_decay: float = 0.05
    classifier_lr: float = 5e-4
    classifier_momentum: float = 0.99
    classifier_weight_decay: float = 0.05
    per_domain_batch: int = 16
    lambda_schedule: str = "constant"
    seed: int = 0
    checkpoint_interval: int = 0  # 0 = final checkpoint only
    mode: str = "udg"
    grad_clip: float = 1.0
    lr_schedule: str = "constant"  # "cosine" available but off by default
    classifier_pass: str = "full"  # or "single_batch"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.adaptive_interval < 1:
            raise ConfigError(f"adaptive_interval must be >= 1, got {self.adaptive_interval}")
        if self.adaptive_max_epoch < 0:
            raise ConfigError(f"adaptive_max_epoch must be >= 0, got {self.adaptive_max_epoch}")
        if self.per_domain_batch < 2:
            raise ConfigError(
                f"per_domain_batch must be >= 2 (each anchor needs an in-domain partner), "
                f"got {self.per_domain_batch}"
            )
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.lambda_schedule != "constant":
            raise ConfigError(f"only the constant lambda_schedule is supported, got {self.lambda_schedule!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.classifier_pass not in ("full", "single_batch"):
            raise ConfigError(f"classifier_pass must be 'full' or 'single_batch', got {self.classifier_pass!r}")


@dataclass
class DomainPalette:
    name: str
    foreground: list[list[float]] = field(default_factory=list)
    background: list[list[float]] = field(default_factory=list)
    texture: bool = False


def _default_domains() -> list[DomainPalette]:
    # Three training hue families plus one held-out family; cross-domain
    # colors stay at channel-wise distance >= 0.2 so the domain is decodable
    # from color alone. The validator in dismae.data enforces this.
    return [
        DomainPalette(
            name="crimson",
            foreground=[[0.95, 0.55, 0.50], [1.00, 0.45, 0.40]],
            background=[[0.70, 0.05, 0.05], [0.80, 0.12, 0.08]],
        ),
        DomainPalette(
            name="forest",
            foreground=[[0.55, 0.95, 0.50], [0.45, 1.00, 0.40]],
            background=[[0.05, 0.55, 0.08], [0.10, 0.65, 0.12]],
        ),
        DomainPalette(
            name="ocean",
            foreground=[[0.50, 0.60, 1.00], [0.40, 0.55, 0.95]],
            background=[[0.05, 0.10, 0.65], [0.08, 0.15, 0.75]],
        ),
    ]


@dataclass
class FactorSpec:
    num_classes: int = 10
    domains: list[DomainPalette] = field(default_factory=_default_domains)
    samples_per_class_per_domain: int = 20
    image_size: int = 32
    noise_std: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not (1 <= self.num_classes <= 10):
            raise ConfigError(f"num_classes must be in [1, 10] (procedural glyph set), got {self.num_classes}")
        if len(self.domains) < 2:
            raise ConfigError(f"need >= 2 domains, got {len(self.domains)}")
        if self.samples_per_class_per_domain < 1:
            raise ConfigError("samples_per_class_per_domain must be >= 1")
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate domain names in {names}")
        for d in self.domains:
            if not d.foreground or not d.background:
                raise ConfigError(f"domain {d.name!r} needs non-empty foreground and background palettes")


@dataclass
class DataConfig:
    # Either a folder of root/<domain>/[<class>/]*.png ...
    root: str | None = None
    labeled: bool = True
    # ... or an inline generator spec.
    factor: FactorSpec | None = None

    def validate(self) -> None:
        if (self.root is None) == (self.factor is None):
            raise ConfigError("data section must set exactly one of 'root' or 'factor'")
        if self.factor is not None:
            self.factor.validate()


@dataclass
class ProtocolConfig:
    label_fraction: float = 1.0
    dispatch_threshold: float = 0.10
    probe_lr: float | None = None  # None = scale the reference table by batch size
    probe_momentum: float = 0.9
    probe_batch: int = 64
    finetune_lr: float | None = None
    finetune_batch: int = 36
    epochs: int = 50
    val_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 < self.label_fraction <= 1.0):
            raise ConfigError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if not (0.0 < self.dispatch_threshold <= 1.0):
            raise ConfigError(f"dispatch_threshold must be in (0, 1], got {self.dispatch_threshold}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not (0.0 < self.val_fraction < 1.0):
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=lambda: DataConfig(factor=FactorSpec()))
    eval: ProtocolConfig = field(default_factory=ProtocolConfig)
    output_dir: str = "runs/run"

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate(self.model.num_domains)
        self.train.validate()
        self.data.validate()
        self.eval.validate()


_SECTION_TYPES = {
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": ProtocolConfig,
}


def _coerce(cls: type, raw: dict[str, Any], where: str) -> Any:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object, got {type(raw).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys {unknown} in {where}")
    kwargs: dict[str, Any] = {}
    for name, value in raw.items():
        if cls is DataConfig and name == "factor" and value is not None:
            value = _coerce(FactorSpec, value, f"{where}.factor")
        elif cls is FactorSpec and name == "domains":
            if not isinstance(value, list):
                raise ConfigError(f"{where}.domains must be a list")
            value = [_coerce(DomainPalette, v, f"{where}.domains[{i}]") for i, v in enumerate(value)]
        elif cls is TrainConfig and name == "backbone_betas":
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def run_config_from_dict(raw: dict[str, Any]) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    known = {"model", "loss", "train", "data", "eval", "output_dir"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    cfg = RunConfig()
    for section, cls in _SECTION_TYPES.items():
        if section in raw:
            setattr(cfg, section, _coerce(cls, raw[section], section))
    if "data" in raw:
        cfg.data = _coerce(DataConfig, raw["data"], "data")
    if "output_dir" in raw:
        cfg.output_dir = str(raw["output_dir"])
    cfg.validate()
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return run_config_from_dict(raw)


def _to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def resolved_dict(cfg: RunConfig) -> dict[str, Any]:
    return _to_plain(cfg)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_fingerprint(cfg: RunConfig) -> str:
    """Hash of the sections that determine a trained state (model, loss,
    train, data); eval-stage knobs and the output directory stay out so one
    pretrained checkpoint serves every downstream protocol stage."""
    full = resolved_dict(cfg)
    recipe = {k: full[k] for k in ("model", "loss", "train", "data")}
    return hashlib.sha256(canonical_json(recipe).encode("utf-8")).hexdigest()


def factor_spec_from_dict(raw: dict[str, Any]) -> FactorSpec:
    spec = _coerce(FactorSpec, raw, "factor spec")
    spec.validate()
    return spec


def write_resolved_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved.json"
    path.write_text(json.dumps(resolved_dict(cfg), indent=2, sort_keys=True) + "\n")
    return path


def resolve_seed(cfg: RunConfig, flag_seed: int | None = None) -> int:
    """Seed precedence: CLI flag > DISMAE_SEED env var > config."""
    if flag_seed is not None:
        return int(flag_seed)
    env = os.environ.get("DISMAE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"DISMAE_SEED must be an integer, got {env!r}") from None
    return cfg.train.seed
