import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))  # makes oracles importable

from embgen.hvae import LatentHierarchySpec, build_model
from embgen.synth import SynthConfig, generate_dataset
from embgen.trainer import TrainConfig, train

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def planted_two_cluster():
    """D=16, 10 speakers around 2 macro centers, 200 utterances."""
    config = SynthConfig(speakers=10, utterances_per_speaker=20, dim=16, clusters=2,
                         center_spread=1.0, center_jitter=0.25, within_std=0.1, seed=404)
    return generate_dataset(config)


@pytest.fixture(scope="session")
def trained_small_model(planted_two_cluster):
    """The acceptance-scale model trained on the planted two-cluster table."""
    data, _ = planted_two_cluster
    spec = LatentHierarchySpec(levels=2, groups_per_level=2, dims_per_group=4,
                               hidden_size=32, input_dim=16)
    model = build_model(spec, seed=7)
    config = TrainConfig(epochs=300, batch_size=32, learning_rate=4e-3,
                         warmup_fraction=0.2, free_bits_lambda=0.05, seed=7,
                         checkpoint_every=1000)
    model, report = train(model, data, config)
    return model, report, data
