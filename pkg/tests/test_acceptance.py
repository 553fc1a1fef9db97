"""One test per acceptance criterion, each printing a PASS/FAIL line.

The matrix run behind criteria 6-8 takes several minutes on one core.
"""

import json
import time

import numpy as np
import pytest

from madi import adaptation as da
from madi import autodiff as ad
from madi.autodiff import Tensor
from madi.cli import main
from madi.ctc import ctc_nll, min_frames
from madi.harness import ExperimentConfig, FeatureCache, TrainConfig, evaluate, pretrain, run_matrix, word_error_rate
from madi.model import EncoderConfig, Recognizer, SymbolTable, asr_loss
from madi.synth import CorpusConfig, generate_corpus
from conftest import brute_force_ctc, random_log_probs, record_acceptance
from oracles import mmd_double_sum, nt_xent_pairs

SEEDS = (0, 1, 2)


# ------------------------------------------------------------------ C1
def sampled_rel_error(f, tensors, rng, per_tensor=6, h=1e-5, floor=1e-8):
    """Central differences at a few random coordinates of each tensor vs. the analytic gradient."""
    for t in tensors:
        t.grad = None
    ad.backward(f())
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst


SYMBOLS = SymbolTable(["a", "b", "c", " "])
TINY = EncoderConfig(feat_dim=6, hidden=8, heads=2, layers=1, ffn=12, subsampling=2)
PARAMS = ["sub.w", "enc0.att.wq", "enc0.ff.w1", "ctc.w", "dec.emb", "dec.att.wv", "dec.out.w"]


def model_instance(rng):
    model = Recognizer(SYMBOLS, TINY, seed=int(rng.integers(1 << 30)))
    feats = [rng.standard_normal((int(rng.integers(8, 16)), TINY.feat_dim)) for _ in range(2)]
    enc_len = [TINY.output_frames(len(f)) for f in feats]
    labels = []
    for n in enc_len:
        while True:
            y = list(rng.integers(0, SYMBOLS.num_chars, size=int(rng.integers(1, 4))))
            if min_frames(y) <= n:
                break
        labels.append(y)
    return model, feats, labels


def check_ctc(rng):
    model, feats, labels = model_instance(rng)
    return sampled_rel_error(lambda: model.ctc_loss(model.encode(feats), labels),
                             [model.params[k] for k in PARAMS[:4]], rng)


def check_att(rng):
    model, feats, labels = model_instance(rng)
    return sampled_rel_error(lambda: model.attention_loss(model.encode(feats), labels),
                             [model.params[k] for k in PARAMS], rng)


def check_joint(rng):
    model, feats, labels = model_instance(rng)

    def f():
        enc = model.encode(feats)
        return asr_loss(model.ctc_loss(enc, labels), model.attention_loss(enc, labels), 0.3)

    return sampled_rel_error(f, [model.params[k] for k in PARAMS], rng)


def random_sets(rng, chars, dim=3):
    return {c: Tensor(rng.standard_normal((int(rng.integers(1, 5)), dim)) + c, requires_grad=True) for c in chars}


def check_mmd(rng):
    src, tgt = random_sets(rng, range(0, 3)), random_sets(rng, range(1, 4))
    bw = list(rng.uniform(0.5, 5.0, size=3))
    return sampled_rel_error(lambda: da.matching_loss(src, tgt, bandwidths=bw)[0],
                             list(src.values()) + list(tgt.values()), rng)


def random_centroids(rng, view):
    chars = sorted(int(c) for c in rng.choice(6, size=int(rng.integers(2, 6)), replace=False))
    return da.CentroidSet(chars, Tensor(rng.standard_normal((len(chars), 4)), requires_grad=True), [1] * len(chars), view)


def check_di(rng):
    a, b = random_centroids(rng, "target"), random_centroids(rng, "augmented")
    tau = float(rng.uniform(0.1, 1.0))
    return sampled_rel_error(lambda: da.discrimination_loss(a, b, tau)[0], [a.vectors, b.vectors], rng, 24)


def check_cdcl(rng):
    a, b = random_centroids(rng, "source"), random_centroids(rng, "target")
    tau = float(rng.uniform(0.1, 1.0))
    return sampled_rel_error(lambda: da.cdcl_loss(a, b, tau)[0], [a.vectors, b.vectors], rng, 24)


def check_dat(rng):
    disc = da.init_discriminator(4, width=6, seed=int(rng.integers(1 << 30)))
    xs = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    xt = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    s = float(rng.uniform(0.1, 2.0))
    # discriminator parameters see the true gradient
    worst = sampled_rel_error(lambda: da.dat_loss(xs, xt, disc, s)[0], list(disc.values()), rng)
    # features see -s times the true gradient
    for t in (xs, xt):
        t.grad = None
    ad.backward(da.dat_loss(xs, xt, disc, s)[0])
    reversed_grads = [xs.grad.copy(), xt.grad.copy()]
    for t, g in zip((xs, xt), reversed_grads):
        num = ad.numerical_grad(lambda: da.dat_loss(xs, xt, disc, s)[0], t)
        err = np.abs(g + s * num) / np.maximum(np.maximum(np.abs(g), np.abs(s * num)), 1e-8)
        worst = max(worst, float(err.max()))
    return worst


def check_total(rng):
    model, feats, labels = model_instance(rng)
    tgt_feats = [f * 1.3 + 0.2 for f in feats]
    aug_feats = [f[::-1].copy() for f in tgt_feats]
    blank = SYMBOLS.blank

    def sets(enc, b0, b1):
        frames, lps = [], []
        for b in range(b0, b1):
            n = enc.lengths[b]
            frames.append(enc.frames[b, :n])
            lps.append(enc.log_probs.data[b, :n])
        return da.gather_character_features(ad.concat(frames), da.assign_frame_labels(np.concatenate(lps)), blank)

    def f():
        enc = model.encode(feats + tgt_feats + aug_feats)
        src = type(enc)(enc.frames[0:2], enc.log_probs[0:2], enc.lengths[0:2])
        l_asr = asr_loss(model.ctc_loss(src, labels), model.attention_loss(src, labels), 0.3)
        s, t, a = sets(enc, 0, 2), sets(enc, 2, 4), sets(enc, 4, 6)
        l_ma, _ = da.matching_loss(s, t, bandwidths=[2.0, 8.0, 32.0])
        l_di, _ = da.discrimination_loss(da.compute_centroids(t), da.compute_centroids(a), 0.1)
        return da.total_loss(l_asr, l_ma, l_di, 5.0, 5.0)

    return sampled_rel_error(f, [model.params[k] for k in PARAMS], rng)


LOSS_CHECKS = {
    "L_CTC": check_ctc, "L_ATT": check_att, "L_ASR": check_joint, "L_MA": check_mmd,
    "L_DI": check_di, "CDCL": check_cdcl, "DAT": check_dat, "total": check_total,
}


def test_c1_gradient_suite():
    start = time.perf_counter()
    worst = {}
    for i, (name, check) in enumerate(LOSS_CHECKS.items()):
        rng = np.random.default_rng([1, i])
        worst[name] = max(check(rng) for _ in range(20))
    elapsed = time.perf_counter() - start
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record_acceptance("C1 gradient suite", ok, f"max rel err: {detail}; {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ C2
def test_c2_ctc_oracle():
    rng = np.random.default_rng(2)
    worst, n = 0.0, 0
    while n < 100:
        T, V = int(rng.integers(1, 7)), int(rng.integers(2, 5))
        labels = list(rng.integers(0, V - 1, size=int(rng.integers(0, T + 1))))
        if min_frames(labels) > T:
            continue
        lp = random_log_probs(rng, T, V)
        worst = max(worst, abs(ctc_nll(lp, labels) - brute_force_ctc(lp, labels)))
        n += 1
    ok = worst < 1e-10
    record_acceptance("C2 CTC oracle", ok, f"100 instances, max |diff| {worst:.1e}")
    assert ok


# ------------------------------------------------------------------ C3
def test_c3_mmd_oracle():
    rng = np.random.default_rng(3)
    worst = self_max = asym = 0.0
    for _ in range(50):
        a = rng.standard_normal((int(rng.integers(1, 7)), 4))
        b = rng.standard_normal((int(rng.integers(1, 7)), 4)) * 1.5
        bw = da.median_bandwidths(np.concatenate([a, b]))
        worst = max(worst, abs(da.mmd_squared(a, b, bw).item() - mmd_double_sum(a, b, bw)))
        self_max = max(self_max, abs(da.mmd_squared(a, a, bw).item()))
        asym = max(asym, abs(da.mmd_squared(a, b, bw).item() - da.mmd_squared(b, a, bw).item()))
    single = da.mmd_squared([[0.0]], [[2.0]], [2.0]).item()
    ok = worst < 1e-10 and self_max < 1e-12 and asym < 1e-12 and abs(single - 1.264241) < 1e-6
    record_acceptance("C3 MMD oracle", ok,
                      f"max |diff| {worst:.1e}, MMD(A,A) {self_max:.1e}, asym {asym:.1e}, singleton {single:.6f}")
    assert ok


# ------------------------------------------------------------------ C4
def centroid_set(vectors):
    chars = sorted(vectors)
    return da.CentroidSet(chars, Tensor(np.array([vectors[c] for c in chars])), [1] * len(chars))


def test_c4_nt_xent_oracle():
    rng = np.random.default_rng(4)
    worst = scale = 0.0
    for _ in range(50):
        first = {int(c): rng.standard_normal(3) for c in rng.choice(5, int(rng.integers(1, 6)), replace=False)}
        second = {int(c): rng.standard_normal(3) for c in rng.choice(5, int(rng.integers(1, 6)), replace=False)}
        tau = float(rng.uniform(0.05, 1.0))
        ref = nt_xent_pairs(first, second, tau)
        for fn in (da.discrimination_loss, da.cdcl_loss):
            got = fn(centroid_set(first), centroid_set(second), tau)[0].item()
            worst = max(worst, abs(got - ref))
            tripled = fn(centroid_set({c: 3 * v for c, v in first.items()}),
                         centroid_set({c: 3 * v for c, v in second.items()}), tau)[0].item()
            scale = max(scale, abs(tripled - got))
    e = {0: [1.0, 0.0], 1: [0.0, 1.0]}
    hand = da.discrimination_loss(centroid_set(e), centroid_set(e), 1.0)[0].item()
    ok = worst < 1e-10 and scale < 1e-10 and abs(hand - 0.551445) < 1e-6
    record_acceptance("C4 NT-Xent oracle", ok, f"max |diff| {worst:.1e}, scale change {scale:.1e}, hand case {hand:.6f}")
    assert ok


# ------------------------------------------------------------------ C5
def test_c5_memorization():
    start = time.perf_counter()
    cfg = ExperimentConfig(corpus=CorpusConfig(n_source=8, n_target=0, n_source_test=0, n_target_test=0),
                           pretrain=TrainConfig(steps=300, batch_size=8, base_lr=0.08, warmup_steps=60))
    utts = generate_corpus(cfg.corpus)["source_train"]
    cache = FeatureCache()
    model, _ = pretrain(cfg, utterances=utts, cache=cache)
    wer = evaluate(model, utts, cache).wer
    elapsed = time.perf_counter() - start
    ok = wer == 0.0 and elapsed < 120
    record_acceptance("C5 memorization", ok, f"training WER {wer:.3f} after {cfg.pretrain.steps} steps; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- C6-C8
@pytest.fixture(scope="module")
def matrix():
    start = time.perf_counter()
    base = ExperimentConfig()
    configs = {f"seed{s}": base.with_seed(s) for s in SEEDS}
    cells, averages = run_matrix(configs, da.METHODS)
    return cells, averages, time.perf_counter() - start


def cell(cells, config, method):
    return next(c for c in cells if c.config == config and c.method == method)


def test_c6_domain_shift_premise(matrix):
    so = cell(matrix[0], "seed0", "SO")
    ok = so.wer > so.source_wer and so.wer >= 1.2 * so.source_wer
    record_acceptance("C6 domain shift", ok, f"seed 0 source WER {so.source_wer:.3f}, target WER {so.wer:.3f}")
    assert ok


def test_c7_method_ordering(matrix):
    cells, avg, elapsed = matrix
    ordered = avg["MADI"] <= avg["CMatch"] <= avg["SO"]
    gain = avg["MADI"] <= 0.9 * avg["SO"]
    baselines = avg["DAT"] < avg["SO"] and avg["CDCL"] < avg["SO"]
    ok = ordered and gain and baselines and elapsed < 1800
    table = ", ".join(f"{m} {avg[m]:.3f}" for m in da.METHODS)
    record_acceptance("C7 method ordering", ok, f"mean target WER over seeds {list(SEEDS)}: {table}; {elapsed / 60:.1f} min")
    assert ok


def test_c8_centroid_spread(matrix):
    cells = matrix[0]
    pairs = [(cell(cells, f"seed{s}", "MADI").spread, cell(cells, f"seed{s}", "CMatch").spread) for s in SEEDS]
    wins = sum(m > c for m, c in pairs)
    ok = wins >= 2
    detail = ", ".join(f"seed {s}: MADI {m:.3f} vs CMatch {c:.3f}" for s, (m, c) in zip(SEEDS, pairs))
    record_acceptance("C8 centroid spread", ok, f"{wins}/3 seeds; {detail}")
    assert ok


# ------------------------------------------------------------------ C9
def test_c9_determinism(tmp_path):
    cfg = {
        "corpus": {"n_source": 24, "n_target": 24, "n_source_test": 8, "n_target_test": 8},
        "encoder": {"hidden": 32, "heads": 2, "layers": 1, "ffn": 64},
        "pretrain": {"steps": 30, "batch_size": 8, "warmup_steps": 10},
        "adapt": {"steps": 6, "batch_size": 8, "warmup_steps": 3},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        main(["pretrain", "--config", str(path), "--out", str(d / "pre.npz")])
        for method in ("dat", "cmatch", "cdcl", "madi"):
            main(["adapt", "--method", method, "--ckpt", str(d / "pre.npz"), "--config", str(path),
                  "--out", str(d / f"{method}.npz")])
        main(["evaluate", "--ckpt", str(d / "madi.npz"), "--out", str(d / "report.json")])
        main(["dump-centroids", "--ckpt", str(d / "madi.npz"), "--out", str(d / "centroids.csv")])
        outputs.append({p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.suffix in (".jsonl", ".json", ".csv")})
    same = outputs[0] == outputs[1]
    ok = same and len(outputs[0]) == 7
    record_acceptance("C9 determinism", ok, f"{len(outputs[0])} metrics/report files compared byte for byte")
    assert ok
