"""
A deterministic multi-speaker corpus
=====================================

Speakers differ by an affine map on the frames, a duration bias and a pitch
offset. Every speaker has its own seed stream, so the corpus is reproducible
piece by piece.
"""

import numpy as np

from adaptermix.data import CorpusConfig, generate_corpus, speaker_profile, split_by_budget

cfg = CorpusConfig(utterances_per_speaker=20)
corpus = generate_corpus(cfg)
print(len(corpus.utterances), "utterances,", cfg.total_speakers, "speakers")
print("new speakers:", cfg.new_speaker_ids)

for s in (0, 1, cfg.n_speakers):
    p = corpus.profiles[s]
    print(f"speaker {s}: duration bias {p.duration_bias:+d}, pitch offset {p.pitch_offset:+.2f}, "
          f"cond(A) {p.condition_number:.2f}")

###############################################################################
# Regenerating one profile on its own gives the same numbers.

again = speaker_profile(cfg, 1)
print("profile reproducible:", np.array_equal(again.transform, corpus.profiles[1].transform))

###############################################################################
# Data budgets are frame counts. A "minute" is ``frames_per_minute`` frames;
# utterances are taken in order until the budget is met, the rest is held out.

new = corpus.of_speaker(cfg.new_speaker_ids[0])
for minutes in cfg.budgets_minutes:
    adapt, heldout = split_by_budget(new, cfg.budget_frames(minutes))
    print(f"{minutes:g} min: {len(adapt)} adapt utterances "
          f"({sum(u.n_frames for u in adapt)} frames), {len(heldout)} held out")
