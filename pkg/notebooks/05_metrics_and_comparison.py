"""
Objective metrics and the comparison grid
==========================================

Mel-cepstral distortion compares frames directly; speaker similarity is the
cosine between embeddings from a small classifier trained on the
pretraining speakers. ``compare`` runs every strategy at every budget.
"""

import math

import numpy as np

from adaptermix.data import CorpusConfig, generate_corpus
from adaptermix.evaluation import compare, cosine_similarity, mcd, train_embedder
from adaptermix.model import AdaptationStrategy, BackboneModel, ModelConfig
from adaptermix.training import TrainConfig, train

ref = np.zeros((1, 4))
syn = ref.copy()
syn[0, 0] = 1.0
print("unit difference:", mcd(ref, syn), "dB, expected", 10 / math.log(10) * math.sqrt(2))

###############################################################################
# The toy speaker embedder.

cfg = CorpusConfig(n_speakers=4, utterances_per_speaker=30, new_speaker_utterances=60,
                   min_tokens=6, max_tokens=10, frames_per_minute=100, budgets_minutes=(2, 4))
corpus = generate_corpus(cfg)
embedder = train_embedder(corpus.pretraining(), seed=0)
print("embedder training accuracy:", embedder.train_accuracy)
a, b, c = (corpus.of_speaker(s) for s in (0, 0, 1))
print("same speaker  :", cosine_similarity(embedder.embed(a[0].frames), embedder.embed(b[1].frames)))
print("other speaker :", cosine_similarity(embedder.embed(a[0].frames), embedder.embed(c[0].frames)))

###############################################################################
# A small grid. The report has one row per strategy and budget, plus the
# unadapted backbone for reference.

model = BackboneModel(ModelConfig(n_encoder_layers=1, n_decoder_layers=2, n_speakers=6))
train(model, corpus.pretraining(), TrainConfig(base_lr=3e-3, warmup_steps=120, anneal_steps=(180, 210, 240),
                                               total_steps=300, batch_size=16))
strategies = [
    AdaptationStrategy("single_adapter", 8, 4),
    AdaptationStrategy("adapter_mix", 8, 4, n_adapters=4, capacity=2.0),
    AdaptationStrategy("finetune"),
]
adapt = TrainConfig(base_lr=1e-2, warmup_steps=40, anneal_steps=(60, 70, 80), total_steps=100,
                    batch_size=16, phase="adapt")
report = compare(model, corpus, strategies, cfg.budgets_minutes, adapt, embedder=embedder)
print(report.to_text())
