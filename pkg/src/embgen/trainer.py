"""Mini-batch optimization of the hierarchical VAE with warmup and free-bits.

The optimizer is Adam with gradient-norm clipping; the KL coefficient ramps
linearly from 0 to 1 over the first ``warmup_fraction`` of the epoch budget.
All randomness (shuffling, reparameterization noise) is drawn from one seeded
generator, so runs are reproducible in single-threaded mode.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import NumericalError, ValidationError
from .hvae import HvaeModel, elbo, save_checkpoint
from .store import EmbeddingDataset, fit_normalizer, normalize


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 1024
    learning_rate: float = 1e-3
    warmup_fraction: float = 0.3
    free_bits_lambda: float = 0.1
    seed: int = 0
    checkpoint_every: int = 100
    grad_clip_norm: float = 100.0
    single_thread: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if not 0.0 < self.warmup_fraction <= 1.0:
            raise ValidationError("warmup_fraction must lie in (0, 1]")
        if self.free_bits_lambda < 0:
            raise ValidationError("free_bits_lambda must be >= 0")
        if self.checkpoint_every < 1:
            raise ValidationError("checkpoint_every must be >= 1")

    def to_json(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "warmup_fraction": self.warmup_fraction,
            "free_bits_lambda": self.free_bits_lambda,
            "seed": self.seed,
            "checkpoint_every": self.checkpoint_every,
            "grad_clip_norm": self.grad_clip_norm,
            "single_thread": self.single_thread,
        }


@dataclass
class EpochRecord:
    epoch: int
    total_loss: float
    recon_loglik: float
    kl_per_group: list[float]
    beta: float

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch,
            "total_loss": self.total_loss,
            "recon_loglik": self.recon_loglik,
            "kl_per_group": self.kl_per_group,
            "beta": self.beta,
        }


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    duration_seconds: float = 0.0
    checkpoint_path: Path | None = None

    def write_telemetry(self, path: str | Path) -> Path:
        """One JSON object per epoch, in training order."""
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.epochs:
                fh.write(json.dumps(rec.to_json()) + "\n")
        return path


def warmup_beta(epoch: int, config: TrainConfig) -> float:
    """Linear KL-coefficient ramp: 0 at epoch 0, exactly 1 from the ramp end on."""
    if epoch < 0:
        raise ValidationError("epoch must be >= 0")
    horizon = config.warmup_fraction * config.epochs
    if horizon <= 0:
        return 1.0
    return min(1.0, epoch / horizon)


def train(
    model: HvaeModel,
    data: EmbeddingDataset,
    config: TrainConfig,
    checkpoint_path: str | Path | None = None,
    fit_stats: bool = True,
) -> tuple[HvaeModel, TrainReport]:
    """Optimize the model in place; returns it with a per-epoch report.

    When ``fit_stats`` is set the normalizer is refit from ``data`` and stored
    on the model before training; otherwise the model's existing stats are
    applied as-is.
    """
    if config.single_thread:
        torch.set_num_threads(1)
    report = TrainReport()
    if config.epochs == 0:
        return model, report
    if fit_stats:
        model.norm_stats = fit_normalizer(data)
    x_all = torch.as_tensor(normalize(data.matrix(), model.norm_stats), dtype=model.dtype)
    n = x_all.shape[0]
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.net.parameters(), lr=config.learning_rate)
    checkpoint_path = Path(checkpoint_path) if checkpoint_path is not None else None
    last_checkpoint: Path | None = None

    def write_checkpoint(epochs_completed: int, beta: float) -> Path:
        return save_checkpoint(
            model,
            checkpoint_path,
            free_bits_lambda=config.free_bits_lambda,
            schedule={
                "epochs_completed": epochs_completed,
                "epochs_total": config.epochs,
                "beta": beta,
                "warmup_fraction": config.warmup_fraction,
            },
        )

    started = time.monotonic()
    for epoch in range(config.epochs):
        beta = warmup_beta(epoch, config)
        order = torch.randperm(n, generator=gen)
        sums = {"total": 0.0, "recon": 0.0}
        kl_sums = np.zeros(model.spec.total_groups)
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            batch = x_all[order[start : start + config.batch_size]]
            try:
                out = elbo(
                    model,
                    batch,
                    beta=beta,
                    free_bits_lambda=config.free_bits_lambda,
                    generator=gen,
                )
            except NumericalError as exc:
                raise NumericalError(
                    f"{exc} (epoch {epoch}, batch {batch_index}; "
                    f"last checkpoint: {last_checkpoint or 'none'})"
                ) from exc
            opt.zero_grad()
            out.total_loss.backward()
            torch.nn.utils.clip_grad_norm_(model.net.parameters(), config.grad_clip_norm)
            opt.step()
            bs = batch.shape[0]
            sums["total"] += out.total_loss.item() * bs
            sums["recon"] += out.recon_loglik.item() * bs
            kl_sums += np.asarray(out.kl_per_group.detach().tolist()) * bs
        report.epochs.append(
            EpochRecord(
                epoch=epoch,
                total_loss=sums["total"] / n,
                recon_loglik=sums["recon"] / n,
                kl_per_group=list(kl_sums / n),
                beta=beta,
            )
        )
        if checkpoint_path is not None and (
            (epoch + 1) % config.checkpoint_every == 0 or epoch == config.epochs - 1
        ):
            last_checkpoint = write_checkpoint(epoch + 1, beta)
    report.duration_seconds = time.monotonic() - started
    report.checkpoint_path = last_checkpoint
    model.trained = True
    return model, report
