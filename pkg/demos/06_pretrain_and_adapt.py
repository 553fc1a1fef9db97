"""Pretrain on source, adapt with CMatch and MADI, compare target WER (one seed, about 2 minutes)."""

from madi.harness import ExperimentConfig, FeatureCache, adapt, centroid_spread, centroid_table, evaluate, pretrain
from madi.synth import generate_corpus

cfg = ExperimentConfig().with_seed(1)
corpus = generate_corpus(cfg.corpus)
cache = FeatureCache()

model, _ = pretrain(cfg, corpus, cache=cache)
src = evaluate(model, corpus["source_test"], cache)
tgt = evaluate(model, corpus["target_test"], cache)
print(f"source-only: source WER {src.wer:.3f}, target WER {tgt.wer:.3f}")

for method in ("CMatch", "MADI"):
    d = cfg.to_dict()
    d["adaptation"]["method"] = method
    adapted, log = adapt(model, ExperimentConfig.from_dict(d), corpus["source_train"],
                         corpus.unlabeled("target_train"), cache=cache)
    rep = evaluate(adapted, corpus["target_test"], cache)
    spread = centroid_spread(centroid_table(adapted, corpus["target_test"], cache))
    last = log[-1]
    print(f"{method}: target WER {rep.wer:.3f}, centroid spread {spread:.3f}, "
          f"final l_ma {last['l_ma']:.4f} l_di {last['l_di']:.4f}")

for ref, hyp in list(zip(tgt.references, tgt.hypotheses))[:3]:
    print(f"  ref '{ref}'  source-only hyp '{hyp}'")
