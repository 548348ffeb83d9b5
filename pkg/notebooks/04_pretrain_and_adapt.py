"""
Pretraining a backbone, then adapting it three ways
====================================================

A small backbone is pretrained on the known speakers. A copy is then adapted
to the new speakers with full fine-tuning, one adapter per slot, or a mixture
of adapters. The frozen tensors are checked bit for bit afterwards.
"""

from adaptermix.data import CorpusConfig, generate_corpus
from adaptermix.evaluation import adapt_model, split_speakers
from adaptermix.model import AdaptationStrategy, BackboneModel, ModelConfig, count_parameters, parameter_digests
from adaptermix.training import TrainConfig, mean_loss, train

corpus = generate_corpus(CorpusConfig(n_speakers=4, utterances_per_speaker=30, new_speaker_utterances=60,
                                      min_tokens=6, max_tokens=10, frames_per_minute=100))
model = BackboneModel(ModelConfig(n_encoder_layers=1, n_decoder_layers=2, n_speakers=6))

pretrain = TrainConfig(base_lr=3e-3, warmup_steps=120, anneal_steps=(180, 210, 240), total_steps=300,
                       batch_size=16)
history = train(model, corpus.pretraining(), pretrain)
print(f"pretraining loss {history[0]['loss']:.3f} -> {history[-1]['loss']:.3f}")

###############################################################################
# Adapt on a 3-"minute" budget and score the held-out utterances.

adapt_set, heldout = split_speakers(corpus, 3)
adapt_cfg = TrainConfig(base_lr=1e-2, warmup_steps=40, anneal_steps=(60, 70, 80), total_steps=100,
                        batch_size=16, phase="adapt")
print(f"unadapted held-out loss {mean_loss(model, heldout):.3f}")

before = parameter_digests(model)
for strategy in (
    AdaptationStrategy("finetune"),
    AdaptationStrategy("single_adapter", decoder_r=8, variance_r=4),
    AdaptationStrategy("adapter_mix", decoder_r=8, variance_r=4, n_adapters=4, capacity=2.0),
):
    adapted, mask, _ = adapt_model(model, strategy, adapt_set, corpus.config.new_speaker_ids, adapt_cfg, seed=0)
    after = parameter_digests(adapted)
    frozen_ok = all(after[k] == before[k] for k, on in mask.items() if not on)
    counts = count_parameters(adapted, mask)
    print(f"{strategy.kind:>15}: held-out loss {mean_loss(adapted, heldout):.3f}, "
          f"trains {100 * counts['fraction']:.1f}% of parameters, frozen tensors intact: {frozen_ok}")
