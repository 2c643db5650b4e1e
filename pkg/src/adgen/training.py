"""Episodic meta-training over source domains."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .coattention import attention_loss, attention_matrix, guidance_scores
from .comparer import classification_loss, patch_scores, ranking_loss, sample_rank_pairs
from .data import DomainDataset, Episode, jitter_episode, sample_episode
from .errors import ConfigError, TrainingError
from .features import flatten_level, to_tensor
from .model import AnomalyModel, save_checkpoint

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd-momentum")


@dataclass(frozen=True)
class TrainConfig:
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)  # cls, att, rank
    steps: int = 2000
    batch_episodes: int = 8
    learning_rate: float = 1e-4
    seed: int = 0
    optimizer: str = "adam"
    n_ref: int = 1
    p_abnormal: float = 0.5
    n_pairs: int = 32
    rank_lambda: float = 1.0
    grad_clip: float = 5.0
    detach_guidance: bool = True
    episode_jitter: float = 0.0
    checkpoint_every: int = 0
    log_episodes: bool = True

    def __post_init__(self):
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            raise ConfigError("loss_weights must be three non-negative reals")
        if not any(w > 0 for w in self.loss_weights):
            raise ConfigError("at least one loss weight must be positive")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_episodes < 1 or self.n_ref < 1 or self.n_pairs < 1:
            raise ConfigError("batch_episodes, n_ref and n_pairs must be >= 1")
        if self.learning_rate <= 0 or self.rank_lambda <= 0:
            raise ConfigError("learning_rate and rank_lambda must be positive")
        if not 0.0 <= self.episode_jitter <= 1.0:
            raise ConfigError("episode_jitter must lie in [0, 1]")
        if not 0.0 <= self.p_abnormal <= 1.0:
            raise ConfigError("p_abnormal must lie in [0, 1]")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")


@dataclass
class LossBreakdown:
    cls: torch.Tensor
    att: torch.Tensor
    rank: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {"L_cls": self.cls.item(), "L_att": self.att.item(), "L_rank": self.rank.item(), "total": self.total.item()}


def episode_losses(
    episodes: Sequence[Episode],
    model: AnomalyModel,
    config: TrainConfig,
    rng: np.random.Generator,
) -> list[LossBreakdown]:
    """Loss breakdown for each episode; all images go through the extractor in one batch."""
    images, offsets = [], []
    for ep in episodes:
        offsets.append(len(images))
        images.extend([ep.query, *ep.reference])
    dtype = next(model.parameters()).dtype
    maps = model(to_tensor(images).to(dtype))
    a_cls, a_att, a_rank = config.loss_weights

    out = []
    for ep, start in zip(episodes, offsets):
        n_ref = len(ep.reference)
        A, scores = [], []
        for m in maps:
            q = flatten_level(m[start])
            r = flatten_level(m[start + 1 : start + 1 + n_ref]).reshape(-1, m.shape[1])
            A.append(attention_matrix(q, r, model.head))
            scores.append(patch_scores(q, r, model.mlp))
        guidance = [guidance_scores(a) for a in A]
        if config.detach_guidance:
            guidance = [g.detach() for g in guidance]
        y = ep.query.label
        l_cls = classification_loss(scores, y)
        l_att = attention_loss(A, y)
        pairs = sample_rank_pairs([s.shape[0] for s in scores], config.n_pairs, rng, config.rank_lambda)
        l_rank = ranking_loss(scores, guidance, pairs)
        total = a_cls * l_cls + a_att * l_att + a_rank * l_rank
        out.append(LossBreakdown(l_cls, l_att, l_rank, total))
    return out


def total_loss(
    episode: Episode, model: AnomalyModel, config: TrainConfig, rng: np.random.Generator
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted objective for one episode plus its float breakdown."""
    b = episode_losses([episode], model, config, rng)[0]
    return b.total, b.as_floats()


def make_optimizer(model: AnomalyModel, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=config.learning_rate, momentum=0.9)


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Per-step generator; lets a resumed run replay the exact episode stream."""
    return np.random.default_rng([seed, step])


def train(
    sources: Sequence[DomainDataset],
    model: AnomalyModel,
    config: TrainConfig,
    *,
    log_path: Path | str | None = None,
    checkpoint_dir: Path | str | None = None,
    optimizer_state: dict | None = None,
    start_step: int = 0,
    callback: Callable[[dict], None] | None = None,
) -> tuple[AnomalyModel, list[dict]]:
    """Run episodic training from ``start_step`` to ``config.steps``.

    Each step samples ``batch_episodes`` episodes with a generator seeded by
    ``(seed, step)``, averages their weighted losses and takes one optimizer
    step with global-norm gradient clipping. Returns the model (left in eval
    mode) and the per-step log records.
    """
    torch.use_deterministic_algorithms(True)
    optimizer = make_optimizer(model, config)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)

    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a" if start_step > 0 else "w")
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    records = []
    model.train()
    try:
        for step in range(start_step, config.steps):
            rng = step_rng(config.seed, step)
            episodes = [sample_episode(sources, config.n_ref, rng, config.p_abnormal) for _ in range(config.batch_episodes)]
            episodes = [jitter_episode(ep, rng, config.episode_jitter) for ep in episodes]
            parts = episode_losses(episodes, model, config, rng)
            loss = torch.stack([p.total for p in parts]).mean()
            if not torch.isfinite(loss):
                bad = [ep.sample_ids for ep, p in zip(episodes, parts) if not torch.isfinite(p.total)]
                raise TrainingError(f"non-finite loss at step {step}; offending episodes: {bad or [e.sample_ids for e in episodes]}")

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            optimizer.step()

            n = len(parts)
            record = {
                "step": step,
                "L_cls": sum(p.cls.item() for p in parts) / n,
                "L_att": sum(p.att.item() for p in parts) / n,
                "L_rank": sum(p.rank.item() for p in parts) / n,
                "total": loss.item(),
            }
            if config.log_episodes:
                record["episodes"] = [ep.sample_ids for ep in episodes]
            records.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
            if callback is not None:
                callback(record)
            if step % 100 == 0:
                log.info("step %d total %.4f cls %.4f att %.4f rank %.4f", step, record["total"],
                         record["L_cls"], record["L_att"], record["L_rank"])
            done = step + 1
            if ckpt_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0 and done < config.steps:
                save_checkpoint(ckpt_dir / f"step_{done:06d}.pt", model, optimizer, done, asdict(config))
    finally:
        if log_file is not None:
            log_file.close()
        model.eval()

    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "final.pt", model, optimizer, config.steps, asdict(config))
    return model, records


def mean_loss(records: Sequence[dict], key: str = "total") -> float:
    vals = [r[key] for r in records]
    return math.fsum(vals) / len(vals)
