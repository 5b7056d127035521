"""Ancestral sampling of novel embeddings with temperature control.

Sampling walks the top-down hierarchy: the first group is drawn from the
standard-normal base prior, every later group from its conditional prior
given the decoder state, with each prior's standard deviation scaled by the
temperature. The decoded observation mean is denormalized back to the
embedding's native scale; observation noise is never added, since it models
residual error rather than identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import StateError, ValidationError
from .hvae import HvaeModel, decode, encode
from .store import EmbeddingDataset, EmbeddingRecord, denormalize, normalize


@dataclass(frozen=True)
class SampleRequest:
    count: int
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValidationError("count must be >= 1")
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")


def sample_latent_groups(
    model: HvaeModel, count: int, temperature: float, seed: int
) -> list[torch.Tensor]:
    """Draw latent-group samples from the prior chain; no decoding."""
    zs, _ = _prior_pass(model, count, temperature, seed)
    return zs


def _prior_pass(model: HvaeModel, count: int, temperature: float, seed: int):
    gen = torch.Generator().manual_seed(seed)
    spec = model.spec
    noise = [
        temperature * torch.randn(count, spec.dims_per_group, generator=gen, dtype=model.dtype)
        for _ in range(spec.total_groups)
    ]
    with torch.no_grad():
        _, _, zs, x_mean, _ = model.net.topdown(noise=noise)
    return zs, x_mean


def sample_embeddings(model: HvaeModel, req: SampleRequest) -> EmbeddingDataset:
    """Generate ``req.count`` novel embeddings; deterministic given (model, req).

    Speaker ids follow the scheme ``gen-<seed>-<index>``, one record each, so
    downstream evaluation joins are reproducible.
    """
    if not getattr(model, "trained", False):
        raise StateError("model has not been trained; load a trained checkpoint first")
    _, x_mean = _prior_pass(model, req.count, req.temperature, req.seed)
    vectors = denormalize(x_mean.numpy(), model.norm_stats)
    records = [
        EmbeddingRecord(f"gen-{req.seed}-{i:05d}", f"gen-{req.seed}-{i:05d}",
                        vectors[i].astype(np.float32))
        for i in range(req.count)
    ]
    return EmbeddingDataset(
        dim=model.spec.input_dim,
        records=records,
        source_tag=f"sampled seed={req.seed} temperature={req.temperature}",
    )


def reconstruct(model: HvaeModel, x: np.ndarray) -> np.ndarray:
    """Posterior-mean round trip: normalize, encode, decode, denormalize."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.spec.input_dim,):
        raise ValidationError(
            f"expected a vector of dim {model.spec.input_dim}, got shape {x.shape}"
        )
    x_norm = normalize(x, model.norm_stats)
    posteriors = encode(model, x_norm)
    x_mean, _ = decode(model, [q.mean for q in posteriors])
    return denormalize(x_mean.numpy(), model.norm_stats)
