"""Planted Gaussian-mixture embedding tables for desk-scale experiments.

Each speaker is a Gaussian cluster: its center is drawn around one of
``clusters`` macro centers (or independently when ``clusters == 0``), and
utterances scatter around the speaker center with ``within_std``. The ground
truth parameters are returned alongside so tests can check recovery.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .store import EmbeddingDataset, EmbeddingRecord


@dataclass
class SynthConfig:
    speakers: int = 10
    utterances_per_speaker: int = 20
    dim: int = 16
    clusters: int = 0  # 0 = every speaker center drawn independently
    center_spread: float = 1.0
    center_jitter: float = 0.25  # speaker-center scatter around its macro center
    within_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.speakers < 1 or self.utterances_per_speaker < 1 or self.dim < 1:
            raise ValidationError("speakers, utterances_per_speaker and dim must be positive")
        if self.clusters < 0 or self.clusters > self.speakers:
            raise ValidationError("clusters must be in 0..speakers")


@dataclass
class SynthTruth:
    """Planted parameters of a generated table."""

    config: SynthConfig
    macro_centers: np.ndarray  # (clusters or speakers, D)
    speaker_centers: np.ndarray  # (speakers, D)
    speaker_cluster: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "speakers": self.config.speakers,
            "utterances_per_speaker": self.config.utterances_per_speaker,
            "dim": self.config.dim,
            "clusters": self.config.clusters,
            "center_spread": self.config.center_spread,
            "center_jitter": self.config.center_jitter,
            "within_std": self.config.within_std,
            "seed": self.config.seed,
            "macro_centers": self.macro_centers.tolist(),
            "speaker_centers": self.speaker_centers.tolist(),
            "speaker_cluster": self.speaker_cluster,
        }


def generate_dataset(config: SynthConfig) -> tuple[EmbeddingDataset, SynthTruth]:
    """Draw the planted mixture; deterministic given config.seed."""
    rng = np.random.default_rng(config.seed)
    n_macro = config.clusters if config.clusters > 0 else config.speakers
    macro = rng.normal(0.0, config.center_spread, size=(n_macro, config.dim))
    assignment = [s % n_macro for s in range(config.speakers)]
    if config.clusters > 0:
        centers = macro[assignment] + rng.normal(
            0.0, config.center_jitter, size=(config.speakers, config.dim)
        )
    else:
        centers = macro
    records = []
    for s in range(config.speakers):
        for u in range(config.utterances_per_speaker):
            vec = centers[s] + rng.normal(0.0, config.within_std, size=config.dim)
            records.append(
                EmbeddingRecord(f"spk{s:03d}-utt{u:03d}", f"spk{s:03d}", vec.astype(np.float32))
            )
    data = EmbeddingDataset(dim=config.dim, records=records, source_tag=f"synth-seed{config.seed}")
    truth = SynthTruth(config=config, macro_centers=macro, speaker_centers=centers,
                       speaker_cluster=assignment)
    return data, truth
