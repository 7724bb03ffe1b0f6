"""Run configuration: flat dotted-key text format, canonical serialization,
and a config hash stamped into every artifact.

Example config file:

    model.dim = 64
    model.n_layers = 4
    diffusion.loss_region = half
    seed = 42
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

from .model import ATTENTION_MODES, CONDITIONING_MODES, DiTConfig, LoRAConfig


@dataclass
class ModelSection:
    dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 16
    mlp_ratio: int = 4
    lora_rank: int = 128
    lora_alpha: float = 128.0


@dataclass
class DiffusionSection:
    schedule_steps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    inference_steps: int = 50
    loss_region: str = "half"       # 'half' | 'all'


@dataclass
class DataSection:
    corpus: str = ""
    clip_len: int = 8
    height: int = 32
    width: int = 32
    patch: int = 4
    temporal_stride: int = 1


@dataclass
class OptimizerSection:
    lr: float = 1e-4
    weight_decay: float = 0.0
    epochs: int = 10
    max_steps: int = 0              # 0: derive from epochs * train clips
    batch: int = 1
    grad_accum: int = 1
    lr_schedule: str = "cosine"     # 'cosine' | 'constant'; lr is the peak
    warmup_steps: int = 100
    grad_clip: float = 1.0          # global L2 norm cap; 0 disables
    ema_decay: float = 0.999        # evaluation weights; 0 disables


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    data: DataSection = field(default_factory=DataSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    seed: int = 42
    conditioning_mode: str = "unified_sequence"
    attention_mode: str = "full"
    tuning: str = "full"            # 'full' | 'lora'

    def validate(self):
        if self.conditioning_mode not in CONDITIONING_MODES:
            raise ValueError(f"bad conditioning_mode {self.conditioning_mode!r}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"bad attention_mode {self.attention_mode!r}")
        if self.tuning not in ("full", "lora"):
            raise ValueError(f"bad tuning {self.tuning!r}")
        if self.diffusion.loss_region not in ("half", "all"):
            raise ValueError(f"bad loss_region {self.diffusion.loss_region!r}")
        if self.optimizer.batch != 1 or self.optimizer.grad_accum != 1:
            raise ValueError("only batch=1, grad_accum=1 is supported")
        if self.optimizer.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"bad lr_schedule {self.optimizer.lr_schedule!r}")
        if not 0.0 <= self.optimizer.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.optimizer.grad_clip < 0.0:
            raise ValueError("grad_clip must be >= 0")
        return self

    def dit_config(self) -> DiTConfig:
        return DiTConfig(dim=self.model.dim, n_layers=self.model.n_layers,
                         n_heads=self.model.n_heads,
                         head_dim=self.model.head_dim,
                         mlp_ratio=self.model.mlp_ratio,
                         attention_mode=self.attention_mode,
                         conditioning_mode=self.conditioning_mode)

    def lora_config(self) -> LoRAConfig:
        return LoRAConfig(rank=self.model.lora_rank,
                          alpha=self.model.lora_alpha,
                          enabled=self.tuning == "lora")


_SECTIONS = ("model", "diffusion", "data", "optimizer")


def to_text(cfg: RunConfig) -> str:
    """Canonical flat key = value serialization (sorted keys)."""
    items = {}
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            items[f"{sec}.{f.name}"] = getattr(obj, f.name)
    for key in ("seed", "conditioning_mode", "attention_mode", "tuning"):
        items[key] = getattr(cfg, key)
    return "".join(f"{k} = {items[k]}\n" for k in sorted(items))


def _coerce(raw: str, target_type):
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw


def from_text(text: str) -> RunConfig:
    """Parse the flat dotted-key format; unknown keys are an error."""
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in _SECTIONS:
                raise ValueError(f"line {lineno}: unknown section {sec!r}")
            obj = getattr(cfg, sec)
            fmap = {f.name: f for f in fields(obj)}
            if name not in fmap:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            setattr(obj, name, _coerce(raw, type(getattr(obj, name))))
        else:
            if key not in ("seed", "conditioning_mode", "attention_mode", "tuning"):
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            setattr(cfg, key, _coerce(raw, type(getattr(cfg, key))))
    return cfg.validate()


def load(path: str) -> RunConfig:
    with open(path) as f:
        return from_text(f.read())


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(to_text(cfg).encode()).hexdigest()[:16]
