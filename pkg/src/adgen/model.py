"""The full detector (feature extractor, co-attention head, meta-comparer) and checkpoint I/O."""

from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn

from .coattention import ProjectionHead
from .comparer import ComparerMLP
from .errors import ConfigError
from .features import ExtractorConfig, FeatureExtractor

CHECKPOINT_FORMAT = "adgen-checkpoint/1"


@dataclass(frozen=True)
class ModelConfig:
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    latent_dim: int = 64
    hidden: tuple[int, ...] = (128, 64)

    def __post_init__(self):
        if isinstance(self.extractor, dict):
            object.__setattr__(self, "extractor", ExtractorConfig(**_tuples(self.extractor)))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.latent_dim < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError("latent_dim and hidden widths must be positive")


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


class AnomalyModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.extractor.channels
        self.extractor = FeatureExtractor(config.extractor)
        self.head = ProjectionHead(c, config.latent_dim)
        self.mlp = ComparerMLP(c, config.hidden)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        return self.extractor(images)


def build_model(config: ModelConfig, seed: int = 0) -> AnomalyModel:
    """Construct a model with parameters drawn deterministically from ``seed``."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = AnomalyModel(config)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.eval()


def parameter_bytes(state_dict: dict[str, torch.Tensor]) -> bytes:
    """Canonical byte serialization of a state dict (sorted names + raw tensor data)."""
    buf = io.BytesIO()
    for name in sorted(state_dict):
        t = state_dict[name].detach().cpu().contiguous()
        buf.write(f"{name}:{t.dtype}:{tuple(t.shape)}\n".encode())
        buf.write(t.numpy().tobytes())
    return buf.getvalue()


def parameter_digest(model: nn.Module) -> str:
    return hashlib.sha256(parameter_bytes(model.state_dict())).hexdigest()


def save_checkpoint(
    path: Path | str,
    model: AnomalyModel,
    optimizer: torch.optim.Optimizer | None = None,
    step: int = 0,
    train_config: dict[str, Any] | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "model_config": asdict(model.config),
        "train_config": train_config,
        "step": step,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: Path | str) -> tuple[AnomalyModel, dict[str, Any]]:
    """Load a checkpoint; returns the model (eval mode) and the raw payload."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format {payload.get('format_version')!r}")
    model = AnomalyModel(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["model"])
    return model.eval(), payload
