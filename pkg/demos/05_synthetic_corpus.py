"""Generate the two-domain corpus and look at what the domain shift does."""

import numpy as np

from madi.features import compute_fbank
from madi.synth import CorpusConfig, generate_corpus

cfg = CorpusConfig(n_source=20, n_target=20, n_source_test=10, n_target_test=10, seed=0)
corpus = generate_corpus(cfg)
print("lexicon:", cfg.lexicon[:8], "...")
print({s: len(u) for s, u in corpus.splits.items()})

for split in ("source_train", "target_train"):
    u = corpus[split][0]
    feats = compute_fbank(u.waveform)
    print(f"{u.id}: '{u.transcript}' {u.waveform.duration:.2f}s, {feats.num_frames} frames")

# the target shift is rain noise at a per-utterance SNR; compare average spectra
def mean_logmel(split):
    return np.mean([compute_fbank(u.waveform).frames.mean(axis=0) for u in corpus[split]], axis=0)

diff = mean_logmel("target_train") - mean_logmel("source_train")
print("target - source log-mel, low/mid/high bins:", np.round(diff[[5, 40, 70]], 2))

# adaptation only ever sees this view of the target data
view = corpus.unlabeled("target_train")
print(type(view[0]).__name__, "has transcript:", hasattr(view[0], "transcript"))
