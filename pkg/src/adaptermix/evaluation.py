"""Objective metrics and the strategy-by-budget comparison grid."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import Corpus, Utterance, split_by_budget, stream_rng
from .errors import ContractError, DegenerateInputError, DimensionError
from .model import (
    AdaptationStrategy,
    BackboneModel,
    build_trainable_mask,
    clone,
    count_parameters,
    insert_adapters,
)
from .numerics import Tensor
from .training import AdamState, TrainConfig, adam_step, train, utterance_losses

MCD_SCALE = 10.0 / math.log(10.0)
UNADAPTED = "unadapted"


def mcd(ref: np.ndarray, syn: np.ndarray) -> float:
    """Mel-cepstral distortion in dB over the overlapping frames.

    Frames are compared coefficient-by-coefficient as given, with no time
    warping; the longer sequence is truncated.
    """
    ref, syn = np.asarray(ref, dtype=np.float64), np.asarray(syn, dtype=np.float64)
    if ref.ndim != 2 or syn.ndim != 2 or ref.shape[1] != syn.shape[1]:
        raise DimensionError(f"mcd: frame matrices {ref.shape} and {syn.shape} are not comparable")
    t = min(ref.shape[0], syn.shape[0])
    if t == 0:
        raise DegenerateInputError("mcd: no overlapping frames")
    diff = ref[:t] - syn[:t]
    return float(MCD_SCALE * np.mean(np.sqrt(2.0 * np.sum(diff * diff, axis=1))))


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity: lengths {a.size} and {b.size} differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine_similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# toy speaker embedder
# ---------------------------------------------------------------------------


@dataclass
class SpeakerEmbedder:
    """Mean-pooled frames -> tanh hidden layer (the embedding) -> speaker logits."""

    mean: np.ndarray
    std: np.ndarray
    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    train_accuracy: float = float("nan")

    @property
    def embedding_dim(self) -> int:
        return self.w_hidden.shape[1]

    def embed(self, frames: np.ndarray) -> np.ndarray:
        pooled = (np.asarray(frames, dtype=np.float64).mean(axis=0) - self.mean) / self.std
        return np.tanh(pooled @ self.w_hidden + self.b_hidden)

    def classify(self, frames: np.ndarray) -> int:
        return int(np.argmax(self.embed(frames) @ self.w_out + self.b_out))


def train_embedder(
    utterances: Sequence[Utterance],
    embedding_dim: int = 64,
    steps: int = 400,
    lr: float = 1e-2,
    seed: int = 0,
) -> SpeakerEmbedder:
    speakers = sorted({u.speaker for u in utterances})
    if len(speakers) < 2:
        raise ContractError("a speaker embedder needs at least two speakers")
    if embedding_dim < 8:
        raise ValueError(f"embedding_dim must be >= 8, got {embedding_dim}")
    label_of = {s: i for i, s in enumerate(speakers)}
    pooled = np.stack([u.frames.mean(axis=0) for u in utterances])
    labels = np.array([label_of[u.speaker] for u in utterances])
    mean, std = pooled.mean(axis=0), pooled.std(axis=0) + 1e-8
    x = Tensor((pooled - mean) / std)

    rng = stream_rng(seed, 0xE3B)
    d = pooled.shape[1]
    params = {
        "w_hidden": Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, embedding_dim)), requires_grad=True),
        "b_hidden": Tensor(np.zeros(embedding_dim), requires_grad=True),
        "w_out": Tensor(rng.normal(0.0, 1.0 / math.sqrt(embedding_dim), size=(embedding_dim, len(speakers))),
                        requires_grad=True),
        "b_out": Tensor(np.zeros(len(speakers)), requires_grad=True),
    }
    mask = {name: True for name in params}
    state = AdamState()
    for _ in range(steps):
        for t in params.values():
            t.grad = None
        hidden = nx.tanh(nx.add_bias(x @ params["w_hidden"], params["b_hidden"]))
        logits = nx.add_bias(hidden @ params["w_out"], params["b_out"])
        nx.backward(nx.softmax_cross_entropy(logits, labels))
        adam_step(params, {k: t.grad for k, t in params.items()}, state, lr, mask)

    emb = SpeakerEmbedder(mean, std, *(params[k].data.copy() for k in ("w_hidden", "b_hidden", "w_out", "b_out")))
    predictions = np.array([emb.classify(u.frames) for u in utterances])
    emb.train_accuracy = float(np.mean(predictions == labels))
    return emb


# ---------------------------------------------------------------------------
# comparison grid
# ---------------------------------------------------------------------------


@dataclass
class ReportRow:
    strategy: str
    minutes: float
    adapt_frames: int
    trainable: int
    total: int
    fraction: float
    mcd: float
    cosine: float
    heldout_loss: float


@dataclass
class ComparisonReport:
    rows: list[ReportRow] = field(default_factory=list)

    def row(self, strategy: str, minutes: float) -> ReportRow:
        for r in self.rows:
            if r.strategy == strategy and r.minutes == minutes:
                return r
        raise KeyError((strategy, minutes))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.rows)

    def to_text(self) -> str:
        header = f"{'strategy':<16}{'budget':>8}{'frames':>8}{'params %':>10}{'MCD dB':>10}{'cos sim':>10}{'loss':>10}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.strategy:<16}{_minutes_label(r.minutes):>8}{r.adapt_frames:>8}{100 * r.fraction:>9.2f}%"
                f"{r.mcd:>10.4f}{r.cosine:>10.4f}{r.heldout_loss:>10.4f}"
            )
        return "\n".join(lines) + "\n"

    def write(self, directory: str | Path, stem: str = "report") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        jsonl, text = directory / f"{stem}.jsonl", directory / f"{stem}.txt"
        jsonl.write_text(self.to_jsonl())
        text.write_text(self.to_text())
        return jsonl, text


def _minutes_label(m: float) -> str:
    return f"{m:g}min"


def synthesize_all(model: BackboneModel, utterances: Sequence[Utterance], chunk: int = 32) -> list[np.ndarray]:
    """Inference frames (predicted durations and pitch) for each utterance."""
    saved = {name: t.requires_grad for name, t in model.named_parameters()}
    for _, t in model.named_parameters():
        t.requires_grad = False
    out = []
    try:
        for lo in range(0, len(utterances), chunk):
            part = utterances[lo:lo + chunk]
            res = model.forward_batch([(u.tokens, u.speaker) for u in part])
            out.extend(res.frames_of(i).copy() for i in range(len(part)))
    finally:
        for name, t in model.named_parameters():
            t.requires_grad = saved[name]
    return out


def evaluate(model: BackboneModel, heldout: Sequence[Utterance], embedder: SpeakerEmbedder) -> dict:
    synth = synthesize_all(model, heldout)
    return {
        "mcd": float(np.mean([mcd(u.frames, s) for u, s in zip(heldout, synth)])),
        "cosine": float(np.mean([cosine_similarity(embedder.embed(u.frames), embedder.embed(s))
                                 for u, s in zip(heldout, synth)])),
        "heldout_loss": float(np.mean(utterance_losses(model, heldout))),
    }


def split_speakers(corpus: Corpus, minutes: float) -> tuple[list[Utterance], list[Utterance]]:
    """Adapt/held-out sets pooled over the corpus's new speakers at one budget."""
    adapt, heldout = [], []
    frames = corpus.config.budget_frames(minutes)
    for s in corpus.config.new_speaker_ids:
        a, h = split_by_budget(corpus.of_speaker(s), frames)
        adapt += a
        heldout += h
    return adapt, heldout


def adapt_config_for(base: TrainConfig, minutes: float, seed: int) -> TrainConfig:
    """Quarter batch for the 1-minute budget, mirroring 16 vs 64 at full scale."""
    batch = max(1, base.batch_size // 4) if minutes <= 1 else base.batch_size
    fields = dict(base.__dict__)
    fields.update(batch_size=batch, seed=seed, phase="adapt")
    return TrainConfig(**fields)


def adapt_model(
    pretrained: BackboneModel,
    strategy: AdaptationStrategy,
    adapt_set: Sequence[Utterance],
    speakers: Sequence[int],
    cfg: TrainConfig,
    seed: int,
) -> tuple[BackboneModel, dict[str, bool], list[dict]]:
    model = clone(pretrained)
    if strategy.uses_adapters:
        insert_adapters(model, strategy, seed=seed)
    mask = build_trainable_mask(model, strategy, list(speakers))
    history = train(model, adapt_set, cfg, mask)
    return model, mask, history


def compare(
    pretrained: BackboneModel,
    corpus: Corpus,
    strategies: Sequence[AdaptationStrategy],
    budgets: Sequence[float],
    adapt_config: TrainConfig,
    seeds: Sequence[int] = (0,),
    embedder: SpeakerEmbedder | None = None,
    include_unadapted: bool = True,
) -> ComparisonReport:
    """Adapt a fresh copy of ``pretrained`` for every (strategy, budget) cell.

    Metrics are averaged over ``seeds``; the row order is fixed by the
    arguments so repeated runs produce identical reports.
    """
    if embedder is None:
        embedder = train_embedder(corpus.pretraining(), seed=corpus.config.seed)
    speakers = corpus.config.new_speaker_ids
    report = ComparisonReport()
    for minutes in budgets:
        adapt_set, heldout = split_speakers(corpus, minutes)
        n_frames = sum(u.n_frames for u in adapt_set)
        if include_unadapted:
            counts = count_parameters(pretrained, {name: False for name, _ in pretrained.named_parameters()})
            m = evaluate(pretrained, heldout, embedder)
            report.rows.append(ReportRow(UNADAPTED, minutes, n_frames, 0, counts["total"], 0.0, **m))
        for strategy in strategies:
            cells = []
            for seed in seeds:
                cfg = adapt_config_for(adapt_config, minutes, seed)
                model, mask, _ = adapt_model(pretrained, strategy, adapt_set, speakers, cfg, seed)
                cells.append((count_parameters(model, mask), evaluate(model, heldout, embedder)))
            counts = cells[0][0]
            avg = {key: float(np.mean([c[1][key] for c in cells])) for key in ("mcd", "cosine", "heldout_loss")}
            report.rows.append(ReportRow(
                strategy.kind, minutes, n_frames, counts["trainable"], counts["total"], counts["fraction"], **avg
            ))
    return report


def read_report(path: str | Path) -> ComparisonReport:
    rows = [ReportRow(**json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]
    return ComparisonReport(rows)
