"""Run configuration: model dimensions plus every training and data hyperparameter."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__
from .checkpoint import config_hash
from .model import ModelConfig


def desk_model(vocab_size: int = 80, **overrides) -> ModelConfig:
    """Model sized for the 48x48 synthetic corpus on one CPU core."""
    kw = dict(hidden=64, depth=4, heads=4, mlp=128, patch_size=8, vocab_size=vocab_size,
              max_text_len=32, max_patches=36, pos_grid=(6, 6))
    kw.update(overrides)
    return ModelConfig(**kw)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=desk_model)
    seed: int = 0
    steps: int = 2000
    batch_size: int = 32
    base_lr: float = 1e-4
    weight_decay: float = 1e-2
    warmup_frac: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    use_wpa: bool = True
    use_mpp: bool = False
    wwm: bool = True
    augment: bool = False
    mlm_prob: float = 0.15
    mpp_prob: float = 0.15
    itm_keep_prob: float = 0.5
    wpa_iters: int = 50
    max_patches: int = 200
    image_short: int = 384
    image_long: int = 640
    pixel_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    pixel_std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    augment_ops: int = 2
    augment_magnitude: float = 9
    ckpt_every: int = 500
    log_every: int = 1
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.betas = tuple(self.betas)
        self.pixel_mean = tuple(self.pixel_mean)
        self.pixel_std = tuple(self.pixel_std)
        if min(self.pixel_std) <= 0:
            raise ValueError("pixel_std entries must be positive")
        if not 0 < self.warmup_frac < 1:
            raise ValueError("warmup_frac must lie in (0, 1)")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["betas"] = list(self.betas)
        d["pixel_mean"] = list(self.pixel_mean)
        d["pixel_std"] = list(self.pixel_std)
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def provenance(self) -> dict:
        return {"config_hash": self.hash(), "code_version": __version__}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")

    def with_overrides(self, **overrides) -> "RunConfig":
        """Copy with overrides applied; ``model_<field>`` keys reach into the model config."""
        d = self.to_dict()
        for k, v in overrides.items():
            if v is None:
                continue
            if k.startswith("model_"):
                d["model"][k[len("model_"):]] = v
            else:
                d[k] = v
        return RunConfig.from_dict(d)


def desk_config(vocab_size: int = 80, **overrides) -> RunConfig:
    """Defaults for the synthetic 48x48 corpus."""
    kw = dict(model=desk_model(vocab_size), base_lr=1e-3, image_short=48, image_long=80,
              max_patches=36, batch_size=32, steps=2000,
              # per-channel statistics of generated scenes (mostly white background)
              pixel_mean=(0.958, 0.948, 0.934), pixel_std=(0.179, 0.182, 0.223))
    kw.update(overrides)
    return RunConfig(**kw)


# Ablation grid: (pre-training steps, whole-word masking, MPP, RandAugment at fine-tuning).
# Steps keep the 25K/50K/100K/200K ratios, scaled to the desk budget.
ABLATION_ROWS = (
    ("25K", False, False, False),
    ("50K", False, False, False),
    ("100K", False, False, False),
    ("100K", True, False, False),
    ("100K", True, True, False),
    ("100K", True, False, True),
    ("200K", True, False, True),
)
_STEP_SCALE = {"25K": 0.25, "50K": 0.5, "100K": 1.0, "200K": 2.0}


def ablation_configs(base: RunConfig, steps_100k: int | None = None) -> list[RunConfig]:
    """Runnable configs for the seven ablation rows; ``steps_100k`` is the desk stand-in for 100K."""
    unit = base.steps if steps_100k is None else steps_100k
    out = []
    for label, wwm, mpp, aug in ABLATION_ROWS:
        steps = max(1, int(round(unit * _STEP_SCALE[label])))
        out.append(base.with_overrides(steps=steps, wwm=wwm, use_mpp=mpp, augment=aug))
    return out
