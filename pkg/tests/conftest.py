import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from adaptermix.data import CorpusConfig, generate_corpus  # noqa: E402
from adaptermix.model import BackboneModel, ModelConfig  # noqa: E402
from adaptermix.training import TrainConfig, train  # noqa: E402

TINY_MODEL = dict(n_encoder_layers=1, n_decoder_layers=2, d_model=16, n_heads=2, d_ffn=32,
                  vocab_size=12, n_speakers=5, mel_dim=6, max_duration=3)
TINY_CORPUS = dict(n_speakers=3, n_new_speakers=2, utterances_per_speaker=12, new_speaker_utterances=20,
                   min_tokens=3, max_tokens=6, vocab_size=12, mel_dim=6, max_duration=3,
                   frames_per_minute=10, budgets_minutes=(1, 2))


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_corpus(CorpusConfig(**TINY_CORPUS))


@pytest.fixture(scope="session")
def tiny_pretrained(tiny_corpus):
    model = BackboneModel(ModelConfig(**TINY_MODEL))
    cfg = TrainConfig(base_lr=3e-3, warmup_steps=10, anneal_steps=(60, 70, 80), total_steps=100, batch_size=8)
    train(model, tiny_corpus.pretraining(), cfg)
    return model


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
