import numpy as np
import pytest

from adaptermix.data import (
    CorpusConfig,
    derive_seed,
    generate_corpus,
    read_corpus,
    speaker_profile,
    split_by_budget,
    splitmix64,
    write_corpus,
)
from adaptermix.errors import BudgetError

from conftest import TINY_CORPUS


def test_splitmix64_reference_values():
    # first outputs of the reference splitmix64 stream seeded with 0
    state, outs = 0, []
    for _ in range(3):
        outs.append(splitmix64(state))
        state = (state + 0x9E3779B97F4A7C15) & ((1 << 64) - 1)
    assert outs == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_derive_seed_separates_streams():
    seeds = {derive_seed(0, 2, s) for s in range(50)}
    assert len(seeds) == 50
    assert derive_seed(7, 1) != derive_seed(8, 1)


def test_regeneration_is_bit_identical():
    a = generate_corpus(CorpusConfig(**TINY_CORPUS))
    b = generate_corpus(CorpusConfig(**TINY_CORPUS))
    assert len(a.utterances) == len(b.utterances)
    for u, v in zip(a.utterances, b.utterances):
        assert u.frames.tobytes() == v.frames.tobytes()
        assert u.tokens.tolist() == v.tokens.tolist()


def test_speakers_differ_on_same_tokens(tiny_corpus):
    from adaptermix.data import _shared_tables, synthesize_utterance

    cfg = tiny_corpus.config
    shared = _shared_tables(cfg)
    tokens = np.array([1, 5, 2, 9])
    frames = []
    for s in (0, 1):
        rng = np.random.default_rng(0)
        u = synthesize_utterance(cfg, tiny_corpus.profiles[s], tokens, rng, shared)
        frames.append(u.frames)
    t = min(len(frames[0]), len(frames[1]))
    assert np.linalg.norm(frames[0][:t] - frames[1][:t]) > 0


def test_frames_match_durations(tiny_corpus):
    for u in tiny_corpus.utterances:
        assert u.n_frames == u.durations.sum()
        assert np.all(u.durations >= 1) and np.all(u.durations <= tiny_corpus.config.max_duration)
        assert np.all(np.isfinite(u.frames))


def test_profiles_well_conditioned():
    cfg = CorpusConfig()
    for s in range(cfg.total_speakers):
        assert speaker_profile(cfg, s).condition_number < 100


def test_new_speakers_absent_from_pretraining(tiny_corpus):
    new = set(tiny_corpus.config.new_speaker_ids)
    assert new and not new & {u.speaker for u in tiny_corpus.pretraining()}
    assert all(len(tiny_corpus.of_speaker(s)) > 0 for s in new)


def test_split_partition(tiny_corpus):
    utts = tiny_corpus.of_speaker(tiny_corpus.config.new_speaker_ids[0])
    total = sum(u.n_frames for u in utts)
    for budget in (1, 10, total // 2, total - utts[-1].n_frames, total):
        adapt, held = split_by_budget(utts, budget)
        assert adapt + held == utts
        assert sum(u.n_frames for u in adapt) >= budget
        assert sum(u.n_frames for u in adapt[:-1]) < budget or len(adapt) == 1


def test_split_tiny_budget_takes_one(tiny_corpus):
    utts = tiny_corpus.of_speaker(3)
    adapt, held = split_by_budget(utts, utts[0].n_frames)
    assert len(adapt) == 1 and len(held) == len(utts) - 1


def test_split_leaves_last_utterance_out(tiny_corpus):
    utts = tiny_corpus.of_speaker(3)
    total = sum(u.n_frames for u in utts)
    adapt, held = split_by_budget(utts, total - utts[-1].n_frames)
    assert held == [utts[-1]]


def test_split_over_budget():
    utts = generate_corpus(CorpusConfig(**TINY_CORPUS)).of_speaker(0)
    with pytest.raises(BudgetError):
        split_by_budget(utts, sum(u.n_frames for u in utts) + 1)


def test_corpus_file_roundtrip(tmp_path, tiny_corpus):
    path = tmp_path / "corpus.jsonl"
    write_corpus(tiny_corpus, path)
    back = read_corpus(path)
    assert back.config == tiny_corpus.config
    for u, v in zip(tiny_corpus.utterances, back.utterances):
        assert u.frames.tobytes() == v.frames.tobytes()
        assert u.pitch.tobytes() == v.pitch.tobytes()
        assert u.durations.tolist() == v.durations.tolist()
        assert u.speaker == v.speaker
    write_corpus(back, tmp_path / "again.jsonl")
    assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()
    header = path.read_text().splitlines()[0]
    assert '"seed"' in header and '"config"' in header
