"""Deterministic synthetic multi-speaker corpus.

Each speaker is a hidden affine map on frame vectors plus a duration bias and a
pitch offset. An utterance's frames are built from a fixed token-to-frame table
(shared by all speakers), mixed with the previous token and the pitch, then
passed through the speaker's map::

    frame_t = A_s @ (E[tok_t] + 0.5 * E[tok_{t-1}] + pitch_t * p) + b_s + noise

Seeds are derived with splitmix64, one stream per speaker, so any speaker can
be regenerated on its own.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BudgetError

MASK64 = (1 << 64) - 1
CORPUS_FORMAT = "adaptermix-corpus/1"


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *stream: int) -> int:
    """Fold ``stream`` labels into ``seed`` with splitmix64."""
    state = splitmix64(seed & MASK64)
    for label in stream:
        state = splitmix64(state ^ (label & MASK64))
    return state


def stream_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *stream)))


_SHARED, _SPEAKER, _UTTERANCES = 1, 2, 3
SPEAKER_SPREAD = 0.6


@dataclass
class CorpusConfig:
    n_speakers: int = 8
    n_new_speakers: int = 2
    utterances_per_speaker: int = 60
    new_speaker_utterances: int = 160
    min_tokens: int = 8
    max_tokens: int = 16
    vocab_size: int = 40
    mel_dim: int = 16
    max_duration: int = 4
    frames_per_minute: int = 250
    budgets_minutes: tuple[float, ...] = (1.0, 10.0, 15.0)
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.budgets_minutes = tuple(self.budgets_minutes)
        if self.frames_per_minute <= 0 or any(b <= 0 for b in self.budgets_minutes):
            raise ValueError("frame budgets must be positive")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValueError(f"bad token length range [{self.min_tokens}, {self.max_tokens}]")
        if self.max_duration < 2:
            raise ValueError("max_duration must be at least 2")

    def budget_frames(self, minutes: float) -> int:
        return int(round(minutes * self.frames_per_minute))

    @property
    def new_speaker_ids(self) -> list[int]:
        return list(range(self.n_speakers, self.n_speakers + self.n_new_speakers))

    @property
    def total_speakers(self) -> int:
        return self.n_speakers + self.n_new_speakers


@dataclass
class SpeakerProfile:
    speaker: int
    transform: np.ndarray
    offset: np.ndarray
    duration_bias: int
    pitch_offset: float
    seed: int

    @property
    def condition_number(self) -> float:
        return float(np.linalg.cond(self.transform))


@dataclass
class Utterance:
    speaker: int
    tokens: np.ndarray
    durations: np.ndarray
    pitch: np.ndarray
    frames: np.ndarray

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class Corpus:
    config: CorpusConfig
    profiles: dict[int, SpeakerProfile]
    utterances: list[Utterance] = field(default_factory=list)

    def of_speaker(self, speaker: int) -> list[Utterance]:
        return [u for u in self.utterances if u.speaker == speaker]

    def pretraining(self) -> list[Utterance]:
        return [u for u in self.utterances if u.speaker < self.config.n_speakers]


@dataclass
class _SharedTables:
    token_frames: np.ndarray
    token_durations: np.ndarray
    token_pitch: np.ndarray
    pitch_direction: np.ndarray
    speaker_basis: np.ndarray


def _shared_tables(cfg: CorpusConfig) -> _SharedTables:
    rng = stream_rng(cfg.seed, _SHARED)
    return _SharedTables(
        token_frames=rng.normal(0.0, 1.0, size=(cfg.vocab_size, cfg.mel_dim)),
        token_durations=rng.integers(1, cfg.max_duration, size=cfg.vocab_size),
        token_pitch=rng.normal(0.0, 1.0, size=cfg.vocab_size),
        pitch_direction=rng.normal(0.0, 1.0 / np.sqrt(cfg.mel_dim), size=cfg.mel_dim),
        speaker_basis=rng.normal(0.0, 1.0 / np.sqrt(cfg.mel_dim), size=(4, cfg.mel_dim, cfg.mel_dim)),
    )


def speaker_profile(cfg: CorpusConfig, speaker: int, shared: _SharedTables | None = None) -> SpeakerProfile:
    shared = shared if shared is not None else _shared_tables(cfg)
    seed = derive_seed(cfg.seed, _SPEAKER, speaker)
    rng = np.random.Generator(np.random.PCG64(seed))
    z = rng.normal(0.0, 1.0, size=shared.speaker_basis.shape[0])
    raw = np.eye(cfg.mel_dim) + SPEAKER_SPREAD * np.tensordot(z, shared.speaker_basis, axes=1)
    # clip the spectrum so cond(A) <= 10
    u, s, vt = np.linalg.svd(raw)
    transform = (u * np.clip(s, 0.3, 3.0)) @ vt
    return SpeakerProfile(
        speaker=speaker,
        transform=transform,
        offset=rng.normal(0.0, 0.5, size=cfg.mel_dim),
        duration_bias=int(rng.integers(-1, 2)),
        pitch_offset=float(rng.normal(0.0, 0.5)),
        seed=seed,
    )


def synthesize_utterance(
    cfg: CorpusConfig,
    profile: SpeakerProfile,
    tokens: np.ndarray,
    rng: np.random.Generator,
    shared: _SharedTables,
) -> Utterance:
    tokens = np.asarray(tokens, dtype=np.int64)
    n = tokens.size
    durations = np.clip(shared.token_durations[tokens] + profile.duration_bias, 1, cfg.max_duration)
    pitch = shared.token_pitch[tokens] + 0.3 * np.sin(0.5 * np.arange(n)) + profile.pitch_offset
    base = shared.token_frames[tokens].copy()
    base[1:] += 0.5 * shared.token_frames[tokens[:-1]]
    base += pitch[:, None] * shared.pitch_direction
    per_token = base @ profile.transform.T + profile.offset
    frames = np.repeat(per_token, durations, axis=0)
    frames = frames + cfg.noise * rng.normal(0.0, 1.0, size=frames.shape)
    return Utterance(profile.speaker, tokens, durations.astype(np.int64), pitch, frames)


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    shared = _shared_tables(cfg)
    profiles = {s: speaker_profile(cfg, s, shared) for s in range(cfg.total_speakers)}
    utterances = []
    for s in range(cfg.total_speakers):
        count = cfg.utterances_per_speaker if s < cfg.n_speakers else cfg.new_speaker_utterances
        rng = stream_rng(cfg.seed, _UTTERANCES, s)
        for _ in range(count):
            n = int(rng.integers(cfg.min_tokens, cfg.max_tokens + 1))
            tokens = rng.integers(0, cfg.vocab_size, size=n)
            utterances.append(synthesize_utterance(cfg, profiles[s], tokens, rng, shared))
    return Corpus(cfg, profiles, utterances)


def split_by_budget(utterances: Sequence[Utterance], frame_budget: int) -> tuple[list[Utterance], list[Utterance]]:
    """Take utterances in order until their frames reach ``frame_budget``; hold out the rest."""
    total = sum(u.n_frames for u in utterances)
    if frame_budget > total:
        raise BudgetError(f"budget of {frame_budget} frames exceeds the {total} frames available")
    adapt, cum = [], 0
    for i, u in enumerate(utterances):
        if cum >= frame_budget and adapt:
            return adapt, list(utterances[i:])
        adapt.append(u)
        cum += u.n_frames
    return adapt, []


# ---------------------------------------------------------------------------
# corpus file: a JSON header line, then one utterance per line
# ---------------------------------------------------------------------------


def _utterance_record(u: Utterance) -> dict:
    return {
        "speaker": u.speaker,
        "tokens": u.tokens.tolist(),
        "durations": u.durations.tolist(),
        "pitch": u.pitch.tolist(),
        "frames": u.frames.tolist(),
    }


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    header = {"format": CORPUS_FORMAT, "config": asdict(corpus.config), "seed": corpus.config.seed}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(_utterance_record(u), sort_keys=True) for u in corpus.utterances]
    Path(path).write_text("\n".join(lines) + "\n")


def read_corpus(path: str | Path) -> Corpus:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != CORPUS_FORMAT:
            raise ValueError(f"{path}: not a corpus file (format {header.get('format')!r})")
        cfg = CorpusConfig(**header["config"])
        utterances = [_parse_utterance(json.loads(line)) for line in fh if line.strip()]
    shared = _shared_tables(cfg)
    profiles = {s: speaker_profile(cfg, s, shared) for s in range(cfg.total_speakers)}
    return Corpus(cfg, profiles, utterances)


def _parse_utterance(rec: dict) -> Utterance:
    return Utterance(
        speaker=int(rec["speaker"]),
        tokens=np.array(rec["tokens"], dtype=np.int64),
        durations=np.array(rec["durations"], dtype=np.int64),
        pitch=np.array(rec["pitch"], dtype=np.float64),
        frames=np.array(rec["frames"], dtype=np.float64).reshape(-1, len(rec["frames"][0]) if rec["frames"] else 0),
    )


def total_frames(utterances: Iterable[Utterance]) -> int:
    return sum(u.n_frames for u in utterances)
