"""Experiment orchestration: source pretraining, adaptation, evaluation.

The protocol is two-stage.  A recognizer is first trained on labeled source
audio with the joint CTC-attention loss, then fine-tuned with one of the
adaptation objectives using paired source (labeled) and target (unlabeled)
batches.  Target transcripts never reach :func:`adapt`; it only accepts
:class:`~madi.synth.UnlabeledUtterance` for the target side.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import adaptation as da
from . import autodiff as ad
from .autodiff import OptimizerState, Tensor, adam_step
from .ctc import ctc_greedy_decode, min_frames
from .features import AugmentConfig, augment_chain, compute_fbank
from .model import EncodedBatch, EncoderConfig, LossBreakdown, Recognizer, SymbolTable, asr_loss
from .synth import Corpus, CorpusConfig, UnlabeledUtterance, Utterance, generate_corpus

log = logging.getLogger(__name__)

SEED_ENV = "MADI_SEED"


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient turns NaN/Inf."""


@dataclass
class TrainConfig:
    steps: int = 600
    batch_size: int = 8
    base_lr: float = 0.08
    warmup_steps: int = 100
    clip_norm: float = 5.0


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    adaptation: da.AdaptationConfig = field(default_factory=da.AdaptationConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    adapt: TrainConfig = field(default_factory=lambda: TrainConfig(steps=300, base_lr=0.01, warmup_steps=50))
    ctc_weight: float = 0.3
    feat_dim: int = 80
    eval_every: int = 0
    seed: int = 0
    output_dir: str = "runs"

    def __post_init__(self):
        if isinstance(self.corpus, dict):
            self.corpus = CorpusConfig.from_dict(self.corpus)
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.adaptation, dict):
            self.adaptation = da.AdaptationConfig(**self.adaptation)
        if isinstance(self.augment, dict):
            aug = dict(self.augment)
            if "pitch_factor_range" in aug:
                aug["pitch_factor_range"] = tuple(aug["pitch_factor_range"])
            self.augment = AugmentConfig(**aug)
        if isinstance(self.pretrain, dict):
            self.pretrain = TrainConfig(**self.pretrain)
        if isinstance(self.adapt, dict):
            self.adapt = TrainConfig(**self.adapt)
        if self.encoder.feat_dim != self.feat_dim:
            self.encoder.feat_dim = self.feat_dim
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc_weight must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        return cls(**d)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        """Read a JSON config; ``corpus`` may be a path to a corpus ``config.json``."""
        path = Path(path)
        raw = json.loads(path.read_text())
        raw.pop("matrix", None)
        if isinstance(raw.get("corpus"), str):
            ref = path.parent / raw["corpus"]
            if not ref.exists():
                raise FileNotFoundError(f"{path}: corpus config {ref} does not exist")
            raw["corpus"] = json.loads(ref.read_text())
        cfg = cls.from_dict(raw)
        override = os.environ.get(SEED_ENV)
        if override is not None:
            cfg = cfg.with_seed(int(override))
        return cfg

    def with_seed(self, seed: int) -> ExperimentConfig:
        d = self.to_dict()
        d["seed"] = seed
        d["corpus"]["seed"] = seed
        d["corpus"]["lexicon"] = None
        return ExperimentConfig.from_dict(d)


# ------------------------------------------------------------------ helpers
class FeatureCache:
    """Memoized FBANK matrices keyed by utterance id."""

    def __init__(self, num_bins: int = 80):
        self.num_bins = num_bins
        self._store: dict[str, np.ndarray] = {}

    def __call__(self, utt) -> np.ndarray:
        feats = self._store.get(utt.id)
        if feats is None:
            feats = self._store[utt.id] = compute_fbank(utt.waveform, self.num_bins).frames
        return feats


class MetricsWriter:
    """JSON-lines sink; keeps records in memory as well."""

    def __init__(self, path=None, header: dict | None = None):
        self.records: list[dict] = []
        self._fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w")
        if header is not None:
            self._write({"header": header})

    def _write(self, rec: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def log(self, rec: dict) -> None:
        self.records.append(rec)
        self._write(rec)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _check_finite(value: float, what: str, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"{what} became {value} at step {step}")


def _clip_and_collect(params: dict[str, Tensor], clip_norm: float, step: int) -> dict[str, np.ndarray]:
    grads = {k: p.grad for k, p in params.items() if p.grad is not None}
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    _check_finite(norm, "gradient norm", step)
    if clip_norm and norm > clip_norm:
        scale = clip_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    """Endless stream of shuffled index batches (epoch-wise without replacement)."""
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield order[i : i + batch_size]
        if n < batch_size:
            yield order


def _select(enc: EncodedBatch, start: int, stop: int) -> EncodedBatch:
    lengths = enc.lengths[start:stop]
    T = max(lengths)
    return EncodedBatch(enc.frames[start:stop, :T], enc.log_probs[start:stop, :T], lengths)


def _feasible(labels: Sequence[int], frames: int) -> bool:
    return 0 < len(labels) and min_frames(labels) <= frames


# ----------------------------------------------------------------- pretrain
def pretrain(
    cfg: ExperimentConfig,
    corpus: Corpus | None = None,
    utterances: Sequence[Utterance] | None = None,
    metrics_path=None,
    cache: FeatureCache | None = None,
) -> tuple[Recognizer, list[dict]]:
    """Train a recognizer from scratch on labeled source utterances."""
    if utterances is None:
        corpus = corpus or generate_corpus(cfg.corpus)
        utterances = corpus["source_train"]
    utterances = list(utterances)
    if not utterances or any(not u.transcript for u in utterances):
        raise ValueError("pretraining needs labeled source utterances")
    symbols = cfg.corpus.symbols
    cache = cache or FeatureCache(cfg.feat_dim)
    model = Recognizer(symbols, cfg.encoder, seed=cfg.seed)
    feats = [cache(u) for u in utterances]
    labels = [symbols.encode(u.transcript) for u in utterances]
    model.set_feature_stats(feats)

    tc = cfg.pretrain
    state = OptimizerState(base_lr=tc.base_lr, warmup_steps=tc.warmup_steps)
    rng = np.random.default_rng([cfg.seed, 1])
    header = {"stage": "pretrain", "lambda": cfg.ctc_weight, "seed": cfg.seed, "steps": tc.steps,
              "batch_size": tc.batch_size, "base_lr": tc.base_lr, "warmup_steps": tc.warmup_steps}
    writer = MetricsWriter(metrics_path, header)
    stream = _batches(len(utterances), tc.batch_size, rng)
    try:
        for step in range(1, tc.steps + 1):
            idx = next(stream)
            model.zero_grad()
            enc = model.encode([feats[i] for i in idx])
            ys = [labels[i] for i in idx]
            l_ctc = model.ctc_loss(enc, ys)
            l_att = model.attention_loss(enc, ys)
            loss = asr_loss(l_ctc, l_att, cfg.ctc_weight)
            _check_finite(loss.item(), "pretraining loss", step)
            ad.backward(loss)
            grads = _clip_and_collect(model.params, tc.clip_norm, step)
            lr = adam_step(model.params, grads, state)
            parts = LossBreakdown(l_asr=loss.item(), l_ctc=l_ctc.item(), l_att=l_att.item(), total=loss.item())
            writer.log({"step": step, "lr": lr, **parts.as_dict()})
    finally:
        writer.close()
    return model, writer.records


# -------------------------------------------------------------------- adapt
def _pseudo_transcripts(enc: EncodedBatch) -> list[list[int]]:
    return [ctc_greedy_decode(enc.utterance_log_probs(b)) for b in range(len(enc))]


def adapt(
    model: Recognizer,
    cfg: ExperimentConfig,
    source: Sequence[Utterance],
    target: Sequence[UnlabeledUtterance],
    metrics_path=None,
    cache: FeatureCache | None = None,
) -> tuple[Recognizer, list[dict]]:
    """Fine-tune a copy of ``model`` with the configured adaptation objective.

    ``target`` must be unlabeled; passing labeled utterances is rejected so the
    objective can never see target transcripts.
    """
    if any(not isinstance(u, UnlabeledUtterance) for u in target):
        raise TypeError("adapt() takes target data as UnlabeledUtterance only")
    acfg = cfg.adaptation
    method = acfg.method
    model = model.copy()
    tc = cfg.adapt
    header = {"stage": "adapt", "method": method, "alpha": acfg.alpha, "beta": acfg.beta, "tau": acfg.tau,
              "lambda": cfg.ctc_weight, "seed": cfg.seed, "steps": 0 if method == "SO" else tc.steps}
    writer = MetricsWriter(metrics_path, header)
    if method == "SO":
        writer.close()
        return model, writer.records

    symbols = model.symbols
    blank = symbols.blank
    cache = cache or FeatureCache(cfg.feat_dim)
    src_feats = [cache(u) for u in source]
    src_labels = [symbols.encode(u.transcript) for u in source]
    tgt_feats = [cache(u) for u in target]
    frozen = None if acfg.refresh_pseudo_labels else model.copy()

    params = dict(model.params)
    disc = {}
    if method == "DAT":
        disc = da.init_discriminator(cfg.encoder.hidden, seed=cfg.seed)
        disc_state = OptimizerState(base_lr=tc.base_lr * acfg.disc_lr_scale, warmup_steps=tc.warmup_steps)
    state = OptimizerState(base_lr=tc.base_lr, warmup_steps=tc.warmup_steps)
    rng = np.random.default_rng([cfg.seed, 2])
    aug_rng = np.random.default_rng([cfg.seed, cfg.augment.seed, 3])
    src_stream = _batches(len(source), tc.batch_size, rng)
    tgt_stream = _batches(len(target), tc.batch_size, rng)

    try:
        for step in range(1, tc.steps + 1):
            si = next(src_stream)
            ti = next(tgt_stream)
            batch = [src_feats[i] for i in si] + [tgt_feats[i] for i in ti]
            n_src, n_tgt = len(si), len(ti)
            if acfg.uses_augmentation:
                for i in ti:
                    wav = augment_chain(target[i].waveform, cfg.augment, aug_rng)
                    batch.append(compute_fbank(wav, cfg.feat_dim).frames)
            for p in list(params.values()) + list(disc.values()):
                p.grad = None
            enc = model.encode(batch)
            src = _select(enc, 0, n_src)
            tgt = _select(enc, n_src, n_src + n_tgt)
            aug = _select(enc, n_src + n_tgt, len(batch)) if acfg.uses_augmentation else None

            if frozen is not None:
                ref = frozen.encode(batch)
                ref_tgt = _select(ref, n_src, n_src + n_tgt)
                label_src = _select(ref, 0, n_src)
                label_aug = _select(ref, n_src + n_tgt, len(batch)) if aug is not None else None
            else:
                ref_tgt, label_src, label_aug = tgt, src, aug

            ys = [src_labels[i] for i in si]
            l_ctc = model.ctc_loss(src, ys)
            l_att = model.attention_loss(src, ys)
            if acfg.uses_target_ctc:
                pseudo = _pseudo_transcripts(ref_tgt)
                keep = [b for b, y in enumerate(pseudo) if _feasible(y, tgt.lengths[b])]
                if keep:
                    sub = EncodedBatch(tgt.log_probs[np.array(keep)], tgt.log_probs[np.array(keep)],
                                       [tgt.lengths[b] for b in keep])
                    l_ctc = l_ctc + model.ctc_loss(sub, [pseudo[b] for b in keep])
            l_asr = asr_loss(l_ctc, l_att, cfg.ctc_weight)

            l_ma: Tensor | float = 0.0
            l_di: Tensor | float = 0.0
            shared = 0
            if method in ("CMatch", "MADI"):
                src_sets = _labelled_sets(src, label_src, blank)
                tgt_sets = _labelled_sets(tgt, ref_tgt, blank)
                l_ma, shared = da.matching_loss(src_sets, tgt_sets, factors=acfg.bandwidth_factors)
            if method == "MADI":
                c_t = da.compute_centroids(_labelled_sets(tgt, ref_tgt, blank), "target")
                c_a = da.compute_centroids(_labelled_sets(aug, label_aug, blank), "augmented")
                l_di, _ = da.discrimination_loss(c_t, c_a, acfg.tau)
            elif method == "CDCL":
                c_s = da.compute_centroids(_labelled_sets(src, label_src, blank), "source")
                c_t = da.compute_centroids(_labelled_sets(tgt, ref_tgt, blank), "target")
                l_ma, shared = da.cdcl_loss(c_s, c_t, acfg.tau)
            elif method == "DAT":
                grl = da.grl_schedule(step / tc.steps, acfg.grl_strength, acfg.grl_ramp)
                l_ma, info = da.dat_loss(da.mean_pool(src), da.mean_pool(tgt), disc, grl)
                shared = 0

            total = da.total_loss(l_asr, l_ma, l_di, acfg.alpha, acfg.beta, method)
            _check_finite(total.item(), "adaptation loss", step)
            if method in ("CMatch", "MADI", "CDCL") and shared == 0:
                log.info("step %d: no character shared between views", step)
            ad.backward(total)
            grads = _clip_and_collect(params, tc.clip_norm, step)
            lr = adam_step(params, grads, state)
            if disc:
                adam_step(disc, _clip_and_collect(disc, tc.clip_norm, step), disc_state)
            parts = LossBreakdown(
                l_asr=l_asr.item(),
                l_ctc=l_ctc.item(),
                l_att=l_att.item(),
                l_ma=float(l_ma.item() if isinstance(l_ma, Tensor) else l_ma),
                l_di=float(l_di.item() if isinstance(l_di, Tensor) else l_di),
                shared_char_count=int(shared),
                total=total.item(),
            )
            writer.log({"step": step, "lr": lr, "method": method, **parts.as_dict()})
    finally:
        writer.close()
    return model, writer.records


def _labelled_sets(enc: EncodedBatch, labeler: EncodedBatch, blank: int) -> dict[int, Tensor]:
    """Character feature sets of ``enc`` using frame labels read off ``labeler``'s CTC outputs."""
    rows, cols = enc.valid_index()
    labels = da.assign_frame_labels(labeler.log_probs.data[rows, cols])
    return da.gather_character_features(enc.frames[rows, cols], labels, blank)


# ----------------------------------------------------------------- evaluate
def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance (unit-cost substitutions, insertions, deletions)."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def word_error_rate(refs: Sequence[str], hyps: Sequence[str]) -> float:
    errors = sum(edit_distance(r.split(), h.split()) for r, h in zip(refs, hyps))
    words = sum(len(r.split()) for r in refs)
    return errors / words if words else 0.0


def char_error_rate(refs: Sequence[str], hyps: Sequence[str]) -> float:
    errors = sum(edit_distance(list(r), list(h)) for r, h in zip(refs, hyps))
    chars = sum(len(r) for r in refs)
    return errors / chars if chars else 0.0


@dataclass
class EvalReport:
    ids: list[str]
    references: list[str]
    hypotheses: list[str]
    domains: list[str]
    wer: float
    cer: float
    by_domain: dict[str, dict[str, float]]

    def to_dict(self) -> dict:
        return {
            "wer": self.wer,
            "cer": self.cer,
            "by_domain": self.by_domain,
            "utterances": [
                {"id": i, "domain": d, "reference": r, "hypothesis": h}
                for i, d, r, h in zip(self.ids, self.domains, self.references, self.hypotheses)
            ],
        }


def decode(model: Recognizer, utterances: Sequence, cache: FeatureCache | None = None, batch_size: int = 32) -> list[str]:
    cache = cache or FeatureCache(model.config.feat_dim)
    hyps: list[str] = []
    for i in range(0, len(utterances), batch_size):
        chunk = utterances[i : i + batch_size]
        for ids in model.transcribe([cache(u) for u in chunk]):
            hyps.append(model.symbols.decode(ids))
    return hyps


def evaluate(model: Recognizer, utterances: Sequence[Utterance], cache: FeatureCache | None = None) -> EvalReport:
    hyps = decode(model, utterances, cache)
    refs = [u.transcript for u in utterances]
    domains = [u.domain for u in utterances]
    by_domain = {}
    for d in sorted(set(domains)):
        sel = [k for k, x in enumerate(domains) if x == d]
        r = [refs[k] for k in sel]
        h = [hyps[k] for k in sel]
        by_domain[d] = {"wer": word_error_rate(r, h), "cer": char_error_rate(r, h), "utterances": len(sel)}
    return EvalReport([u.id for u in utterances], refs, hyps, domains,
                      word_error_rate(refs, hyps), char_error_rate(refs, hyps), by_domain)


# ---------------------------------------------------------------- centroids
def centroid_table(model: Recognizer, utterances: Sequence, cache: FeatureCache | None = None,
                   batch_size: int = 32) -> list[tuple[str, str, int, np.ndarray]]:
    """Per-domain, per-character centroid rows ``(domain, char, count, vector)`` from pseudo labels."""
    cache = cache or FeatureCache(model.config.feat_dim)
    blank = model.symbols.blank
    sums: dict[tuple[str, int], np.ndarray] = {}
    counts: dict[tuple[str, int], int] = {}
    for i in range(0, len(utterances), batch_size):
        chunk = utterances[i : i + batch_size]
        enc = model.encode([cache(u) for u in chunk])
        for b, u in enumerate(chunk):
            n = enc.lengths[b]
            frames = enc.frames.data[b, :n]
            labels = da.assign_frame_labels(enc.log_probs.data[b, :n])
            for c in np.unique(labels):
                if c == blank:
                    continue
                key = (u.domain, int(c))
                sel = frames[labels == c]
                sums[key] = sums.get(key, 0.0) + sel.sum(axis=0)
                counts[key] = counts.get(key, 0) + len(sel)
    rows = []
    for (domain, c) in sorted(sums):
        rows.append((domain, model.symbols.characters[c], counts[(domain, c)], sums[(domain, c)] / counts[(domain, c)]))
    return rows


def write_centroids_csv(rows, path) -> None:
    if not rows:
        Path(path).write_text("domain,char,count\n")
        return
    H = len(rows[0][3])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "char", "count"] + [f"v{i + 1}" for i in range(H)])
        for domain, ch, count, vec in rows:
            w.writerow([domain, ch, count] + [repr(float(x)) for x in vec])


def dump_centroids(model: Recognizer, utterances: Sequence, path, cache: FeatureCache | None = None):
    rows = centroid_table(model, utterances, cache)
    write_centroids_csv(rows, path)
    return rows


def centroid_spread(rows, domain: str = "target") -> float:
    """Mean pairwise cosine distance between distinct character centroids of one domain."""
    vecs = np.array([v for d, _, _, v in rows if d == domain])
    if len(vecs) < 2:
        return 0.0
    z = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
    sim = z @ z.T
    iu = np.triu_indices(len(z), k=1)
    return float(np.mean(1.0 - sim[iu]))


# ---------------------------------------------------------------- run matrix
@dataclass
class MatrixCell:
    config: str
    method: str
    wer: float | None
    source_wer: float | None = None
    spread: float | None = None
    error: str | None = None


def run_matrix(
    configs: dict[str, ExperimentConfig],
    methods: Sequence[str] = da.METHODS,
    out_dir=None,
) -> tuple[list[MatrixCell], dict[str, float]]:
    """Pretrain once per config, adapt with every method, score on the target test split.

    Returns the cells and the per-method average WER across configs.  A
    failing cell is recorded with its error message instead of aborting.
    """
    cells: list[MatrixCell] = []
    for name, cfg in configs.items():
        corpus = generate_corpus(cfg.corpus)
        cache = FeatureCache(cfg.feat_dim)
        base, _ = pretrain(cfg, corpus, cache=cache,
                           metrics_path=None if out_dir is None else Path(out_dir) / name / "pretrain.jsonl")
        for method in methods:
            mcfg = ExperimentConfig.from_dict({**cfg.to_dict(), "adaptation": {**asdict(cfg.adaptation), "method": method}})
            try:
                model, _ = adapt(base, mcfg, corpus["source_train"], corpus.unlabeled("target_train"), cache=cache,
                                 metrics_path=None if out_dir is None else Path(out_dir) / name / f"adapt_{method}.jsonl")
                rep = evaluate(model, corpus["target_test"], cache)
                src = evaluate(model, corpus["source_test"], cache)
                spread = centroid_spread(centroid_table(model, corpus["target_test"], cache))
                cells.append(MatrixCell(name, method, rep.wer, src.wer, spread))
            except (TrainingDiverged, ValueError, FloatingPointError) as exc:
                cells.append(MatrixCell(name, method, None, error=str(exc)))
            log.info("%s %s done", name, method)
    averages = {}
    for method in methods:
        vals = [c.wer for c in cells if c.method == method and c.wer is not None]
        averages[method] = float(np.mean(vals)) if vals else float("nan")
    return cells, averages


def matrix_csv(cells: Sequence[MatrixCell], averages: dict[str, float], methods: Sequence[str] = da.METHODS) -> str:
    names = list(dict.fromkeys(c.config for c in cells))
    lookup = {(c.config, c.method): c for c in cells}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task"] + list(methods))
    for n in names:
        row = [n]
        for m in methods:
            c = lookup.get((n, m))
            row.append("" if c is None or c.wer is None else repr(c.wer))
        w.writerow(row)
    w.writerow(["Average"] + [repr(averages[m]) for m in methods])
    return buf.getvalue()


def format_matrix(cells: Sequence[MatrixCell], averages: dict[str, float], methods: Sequence[str] = da.METHODS) -> str:
    names = list(dict.fromkeys(c.config for c in cells))
    lookup = {(c.config, c.method): c for c in cells}
    width = max([len("Average")] + [len(n) for n in names]) + 2
    lines = ["Task".ljust(width) + "".join(m.rjust(9) for m in methods)]
    for n in names:
        vals = []
        for m in methods:
            c = lookup.get((n, m))
            vals.append("fail".rjust(9) if c is None or c.wer is None else f"{100 * c.wer:9.2f}")
        lines.append(n.ljust(width) + "".join(vals))
    lines.append("Average".ljust(width) + "".join(f"{100 * averages[m]:9.2f}" for m in methods))
    return "\n".join(lines)
