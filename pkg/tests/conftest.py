import sys

import numpy as np
import pytest

from erp_mtl.encoder import EncoderConfig, SequenceEncoder, Vocabulary
from erp_mtl.synthetic import GeneratorConfig, generate_synthetic


TINY_ENCODER = dict(embedding_dim=6, hidden_dim=8, output_dim=5, layers=2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
    return EncoderConfig(**TINY_ENCODER)


@pytest.fixture
def tiny_vocab():
    return Vocabulary.build([["the", "cat", "sat"], ["a", "dog", "ran", "home"]])


@pytest.fixture
def tiny_encoder(tiny_config, tiny_vocab):
    return SequenceEncoder(tiny_config, tiny_vocab, seed=0)


@pytest.fixture(scope="session")
def small_synthetic():
    return generate_synthetic(
        GeneratorConfig(seed=5, n_sentences=40, n_participants=3, lm_sentences=30, signals=("N400", "P600", "READ"))
    )


class RunInputs:
    """A small dataset, a random-init encoder and everything train_run needs."""

    def __init__(self, signals=("N400", "P600", "READ"), n_sentences=30, noise=0.5, seed=5):
        from erp_mtl.training import PreparedData, TrainConfig

        gen = generate_synthetic(GeneratorConfig(seed=seed, n_sentences=n_sentences, n_participants=3,
                                                 lm_sentences=0, signals=signals, noise_std=noise))
        self.synthetic = gen
        self.dataset = gen.dataset
        vocab = Vocabulary.build([s.words for s in gen.dataset.sentences])
        cfg = EncoderConfig(embedding_dim=6, hidden_dim=8, output_dim=5, layers=2)
        self.encoder = SequenceEncoder(cfg, vocab, seed=1)
        self.arrays = self.encoder.params.arrays()
        self.data = PreparedData.build(gen.dataset, self.encoder)
        self.config = TrainConfig(encoder=cfg, pair_dim=4, batch_size=8)


@pytest.fixture(scope="session")
def run_inputs():
    return RunInputs()


def quick_experiment(out_dir, **overrides):
    """A seconds-scale sweep config: tiny synthetic data, tiny encoder, 3-epoch schedule."""
    from erp_mtl.experiment import ExperimentConfig

    base = dict(
        data={"synthetic": {"seed": 2, "n_sentences": 20, "n_participants": 2, "lm_sentences": 10,
                            "signals": ["N400", "P600", "READ"]}},
        train={
            "encoder": {"embedding_dim": 4, "hidden_dim": 6, "output_dim": 4, "layers": 2},
            "pair_dim": 3,
            "batch_size": 8,
            "schedule": {"name": "quick", "stages": [[0, 2, "decoder-only"], [2, 3, "decoder+final-encoder-layer"]]},
        },
        master_seed=11,
        runs=2,
        sweep="joint-independent",
        targets=["N400", "P600"],
        workers=1,
        output_dir=str(out_dir),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
