import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptermix.errors import BudgetError, ContractError, DegenerateInputError, DimensionError
from adaptermix.evaluation import (
    MCD_SCALE,
    UNADAPTED,
    adapt_config_for,
    compare,
    cosine_similarity,
    mcd,
    read_report,
    split_speakers,
    train_embedder,
)
from adaptermix.model import AdaptationStrategy
from adaptermix.training import TrainConfig


# --- brute-force oracles ---------------------------------------------------------


def loop_mcd(ref, syn):
    t = min(len(ref), len(syn))
    total = 0.0
    for i in range(t):
        sq = 0.0
        for a, b in zip(ref[i], syn[i]):
            sq += (a - b) ** 2
        total += math.sqrt(2.0 * sq)
    return 10.0 / math.log(10.0) * total / t


def loop_cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


# --- mcd ---------------------------------------------------------------------------


def test_mcd_identical_is_zero():
    x = np.random.default_rng(0).normal(size=(7, 5))
    assert mcd(x, x) == 0.0


def test_mcd_unit_difference():
    ref = np.zeros((1, 4))
    syn = ref.copy()
    syn[0, 2] = 1.0
    assert abs(mcd(ref, syn) - 10.0 / math.log(10.0) * math.sqrt(2.0)) < 1e-6
    assert round(mcd(ref, syn), 4) == 6.1419


def test_mcd_doubling_difference_doubles():
    rng = np.random.default_rng(1)
    for _ in range(20):
        ref, diff = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        assert abs(mcd(ref, ref + 2 * diff) - 2 * mcd(ref, ref + diff)) < 1e-12


def test_mcd_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        t1, t2, d = rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 6)
        ref, syn = rng.normal(size=(t1, d)), rng.normal(size=(t2, d))
        assert abs(mcd(ref, syn) - loop_mcd(ref.tolist(), syn.tolist())) < 1e-9


def test_mcd_truncates_to_shorter():
    rng = np.random.default_rng(3)
    ref, syn = rng.normal(size=(5, 3)), rng.normal(size=(8, 3))
    assert mcd(ref, syn) == mcd(ref, syn[:5])


@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_mcd_symmetric_and_nonnegative(t, d, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(t, d)), rng.normal(size=(t, d))
    assert mcd(a, b) >= 0.0
    assert mcd(a, b) == mcd(b, a)


def test_mcd_errors():
    with pytest.raises(DegenerateInputError):
        mcd(np.zeros((0, 3)), np.zeros((4, 3)))
    with pytest.raises(DimensionError):
        mcd(np.zeros((2, 3)), np.zeros((2, 4)))


def test_mcd_scale_constant():
    assert MCD_SCALE == 10.0 / math.log(10.0)


# --- cosine ------------------------------------------------------------------------


@pytest.mark.parametrize("b, expected", [([1.0, 2.0, 3.0], 1.0), ([-1.0, -2.0, -3.0], -1.0), ([3.0, 0.0, -1.0], 0.0)])
def test_cosine_cases(b, expected):
    assert cosine_similarity([1.0, 2.0, 3.0], b) == pytest.approx(expected, abs=1e-15)


def test_cosine_matches_loop_oracle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        d = int(rng.integers(1, 12))
        a, b = rng.normal(size=d), rng.normal(size=d)
        assert abs(cosine_similarity(a, b) - loop_cosine(a.tolist(), b.tolist())) < 1e-9


def test_cosine_scale_invariance():
    rng = np.random.default_rng(5)
    for _ in range(50):
        a, b = rng.normal(size=8), rng.normal(size=8)
        s = float(rng.uniform(0.01, 100.0))
        assert abs(cosine_similarity(s * a, b) - cosine_similarity(a, b)) <= 1e-12
        assert abs(cosine_similarity(a, s * b) - cosine_similarity(a, b)) <= 1e-12


def test_cosine_errors():
    with pytest.raises(DegenerateInputError):
        cosine_similarity([0.0, 0.0], [1.0, 2.0])
    with pytest.raises(DimensionError):
        cosine_similarity([1.0, 2.0], [1.0, 2.0, 3.0])


# --- embedder ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def embedder(tiny_corpus):
    return train_embedder(tiny_corpus.pretraining(), embedding_dim=16, steps=300, seed=0)


def test_embedder_fits_training_speakers(embedder):
    assert embedder.train_accuracy >= 0.9
    assert embedder.embedding_dim == 16


def test_embedder_same_speaker_closer(tiny_corpus, embedder):
    utts = tiny_corpus.pretraining()
    vecs = [embedder.embed(u.frames) for u in utts]
    same, cross = [], []
    for i in range(len(utts)):
        for j in range(i + 1, len(utts)):
            (same if utts[i].speaker == utts[j].speaker else cross).append(cosine_similarity(vecs[i], vecs[j]))
    # regression bound; the observed margin is 0.35
    assert np.mean(same) - np.mean(cross) > 0.25


def test_embedding_ignores_frame_order(tiny_corpus, embedder):
    frames = tiny_corpus.utterances[0].frames
    perm = np.random.default_rng(6).permutation(len(frames))
    np.testing.assert_allclose(embedder.embed(frames[perm]), embedder.embed(frames), atol=1e-12)
    assert np.array_equal(embedder.embed(frames), embedder.embed(frames.copy()))


def test_embedder_training_is_deterministic(tiny_corpus, embedder):
    again = train_embedder(tiny_corpus.pretraining(), embedding_dim=16, steps=300, seed=0)
    assert np.array_equal(again.w_hidden, embedder.w_hidden)


def test_embedder_needs_two_speakers(tiny_corpus):
    with pytest.raises(ContractError):
        train_embedder(tiny_corpus.of_speaker(0))
    with pytest.raises(ValueError):
        train_embedder(tiny_corpus.pretraining(), embedding_dim=4)


# --- comparison grid -------------------------------------------------------------------


STRATEGIES = [
    AdaptationStrategy("single_adapter", decoder_r=4, variance_r=2),
    AdaptationStrategy("adapter_mix", decoder_r=4, variance_r=2, n_adapters=3, capacity=2.0),
    AdaptationStrategy("finetune"),
]
ADAPT = TrainConfig(base_lr=1e-2, warmup_steps=8, anneal_steps=(12, 14, 16), total_steps=20, batch_size=8, phase="adapt")


@pytest.fixture(scope="module")
def report(tiny_pretrained, tiny_corpus, embedder):
    return compare(tiny_pretrained, tiny_corpus, STRATEGIES, [2], ADAPT, embedder=embedder)


def test_report_has_one_row_per_cell(report):
    assert [(r.strategy, r.minutes) for r in report.rows] == [
        (UNADAPTED, 2), ("single_adapter", 2), ("adapter_mix", 2), ("finetune", 2)
    ]


def test_report_fractions(report):
    assert report.row("finetune", 2).fraction == 1.0
    single, mix = report.row("single_adapter", 2), report.row("adapter_mix", 2)
    assert 0 < single.fraction < mix.fraction < 1.0
    assert "100.00%" in report.to_text()


def test_adapting_beats_unadapted(report):
    base = report.row(UNADAPTED, 2).heldout_loss
    for s in STRATEGIES:
        assert report.row(s.kind, 2).heldout_loss < base


def test_compare_is_reproducible(report, tiny_pretrained, tiny_corpus, embedder):
    again = compare(tiny_pretrained, tiny_corpus, STRATEGIES, [2], ADAPT, embedder=embedder)
    assert again.to_jsonl() == report.to_jsonl()
    assert again.to_text() == report.to_text()


def test_report_round_trip(report, tmp_path):
    jsonl, text = report.write(tmp_path)
    assert read_report(jsonl).to_jsonl() == report.to_jsonl()
    assert text.read_text() == report.to_text()


def test_missing_row_raises(report):
    with pytest.raises(KeyError):
        report.row("adapter_mix", 99)


def test_split_speakers_pools_new_speakers(tiny_corpus):
    adapt, heldout = split_speakers(tiny_corpus, 2)
    assert {u.speaker for u in adapt} == set(tiny_corpus.config.new_speaker_ids)
    assert len(adapt) + len(heldout) == sum(len(tiny_corpus.of_speaker(s)) for s in tiny_corpus.config.new_speaker_ids)
    with pytest.raises(BudgetError):
        split_speakers(tiny_corpus, 1e6)


def test_small_budget_quarters_batch():
    assert adapt_config_for(ADAPT, 1, seed=3).batch_size == 2
    cfg = adapt_config_for(ADAPT, 10, seed=3)
    assert (cfg.batch_size, cfg.seed, cfg.phase) == (8, 3, "adapt")
