"""Character-conditioned domain adaptation losses.

Frame pseudo labels come from the per-frame argmax of the CTC head.  Encoder
frames are grouped by their (non-blank) label; the groups feed

* a per-character Gaussian-kernel MMD between source and target (matching),
* a symmetrized NT-Xent over per-character centroids of the target and an
  augmented target view (discrimination),
* the cross-domain centroid contrastive baseline (CDCL), and
* a gradient-reversal domain classifier (DAT).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

METHODS = ("SO", "DAT", "CMatch", "CDCL", "MADI")
BANDWIDTH_FACTORS = (0.25, 0.5, 1.0, 2.0, 4.0)


def canonical_method(name: str) -> str:
    for m in METHODS:
        if m.lower() == name.lower():
            return m
    raise ValueError(f"unknown adaptation method {name!r}; expected one of {METHODS}")


@dataclass
class AdaptationConfig:
    method: str = "MADI"
    alpha: float = 5.0
    beta: float = 5.0
    tau: float = 0.1
    # Adam rescales per-parameter gradients, so once the source loss is near zero
    # any sizeable reversed gradient owns the encoder; keep it small.
    grl_strength: float = 0.001
    grl_ramp: bool = True
    disc_lr_scale: float = 10.0
    bandwidth_factors: tuple[float, ...] = BANDWIDTH_FACTORS
    refresh_pseudo_labels: bool = True
    # CTC on greedy target pseudo transcripts; None means on for the
    # pseudo-label methods (CMatch, CDCL, MADI) and off for SO and DAT
    target_ctc: bool | None = None

    def __post_init__(self):
        self.method = canonical_method(self.method)
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.alpha < 0 or self.beta < 0 or self.grl_strength < 0:
            raise ValueError("loss weights must be non-negative")
        if self.method == "MADI" and not (self.alpha > 0 and self.beta > 0):
            raise ValueError("MADI needs alpha > 0 and beta > 0")

    @property
    def uses_target_ctc(self) -> bool:
        if self.target_ctc is None:
            return self.method in ("CMatch", "CDCL", "MADI")
        return bool(self.target_ctc)

    @property
    def uses_augmentation(self) -> bool:
        return self.method == "MADI"


@dataclass
class CentroidSet:
    """Per-character mean vectors; ``vectors`` is a ``(K, H)`` tensor aligned with ``chars``."""

    chars: list[int]
    vectors: Tensor
    counts: list[int]
    view: str = "target"

    def __len__(self) -> int:
        return len(self.chars)

    def as_dict(self) -> dict[int, np.ndarray]:
        return {c: self.vectors.data[i] for i, c in enumerate(self.chars)}


# ----------------------------------------------------- frame label assignment
def assign_frame_labels(log_probs) -> np.ndarray:
    """Per-frame argmax; ``np.argmax`` returns the first (lowest-id) maximum on ties."""
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    return np.argmax(lp, axis=-1)


def gather_character_features(frames: Tensor, labels: np.ndarray, blank: int) -> dict[int, Tensor]:
    """Group rows of ``frames`` (shape ``(n, H)``) by their non-blank label."""
    labels = np.asarray(labels)
    if frames.shape[0] != labels.shape[0]:
        raise ValueError(f"{frames.shape[0]} frames but {labels.shape[0]} labels")
    out: dict[int, Tensor] = {}
    for c in np.unique(labels):
        if c == blank:
            continue
        out[int(c)] = frames[np.flatnonzero(labels == c)]
    return out


def batch_character_features(enc, blank: int) -> dict[int, Tensor]:
    """Pseudo-label every valid frame of an encoded batch and group them by character."""
    rows, cols = enc.valid_index()
    flat = enc.frames[rows, cols]
    labels = assign_frame_labels(enc.log_probs.data[rows, cols])
    return gather_character_features(flat, labels, blank)


def compute_centroids(sets: Mapping[int, Tensor], view: str = "target") -> CentroidSet:
    chars = sorted(sets)
    if not chars:
        return CentroidSet([], Tensor(np.zeros((0, 0))), [], view)
    vectors = ad.stack([sets[c].mean(axis=0) for c in chars], axis=0)
    return CentroidSet(chars, vectors, [sets[c].shape[0] for c in chars], view)


# --------------------------------------------------------------------- MMD
def squared_distances(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise squared Euclidean distances between rows, differentiable in both arguments."""
    a2 = (a * a).sum(axis=1, keepdims=True)
    b2 = (b * b).sum(axis=1, keepdims=True)
    return a2 + b2.T - 2.0 * (a @ b.T)


def median_bandwidths(pooled: np.ndarray, factors: Sequence[float] = BANDWIDTH_FACTORS) -> list[float]:
    """Kernel variances: median pairwise squared distance times each factor."""
    pooled = np.asarray(pooled, dtype=np.float64)
    sq = (pooled * pooled).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * pooled @ pooled.T
    iu = np.triu_indices(len(pooled), k=1)
    off = d[iu]
    off = off[off > 1e-12]
    med = float(np.median(off)) if off.size else 1.0
    return [med * f for f in factors]


def mmd_squared(a, b, bandwidths: Sequence[float]) -> Tensor:
    """Biased (V-statistic) squared MMD averaged over Gaussian kernels ``exp(-d^2 / (2 s2))``."""
    a, b = ad.tensor(a), ad.tensor(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("MMD needs two non-empty sample sets")
    if not bandwidths or any(s <= 0 for s in bandwidths):
        raise ValueError("kernel bandwidths must be a non-empty list of positive values")
    daa = squared_distances(a, a)
    dbb = squared_distances(b, b)
    dab = squared_distances(a, b)
    total = None
    for s2 in bandwidths:
        c = -0.5 / s2
        term = ad.exp(daa * c).mean() + ad.exp(dbb * c).mean() - 2.0 * ad.exp(dab * c).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(bandwidths))


def matching_loss(
    src: Mapping[int, Tensor], tgt: Mapping[int, Tensor], bandwidths: Sequence[float] | None = None,
    factors: Sequence[float] = BANDWIDTH_FACTORS,
) -> tuple[Tensor, int]:
    """Mean per-character MMD over characters present in both domains.

    Returns ``(loss, shared_count)``; with no shared character the loss is a
    constant zero and ``shared_count`` is 0.
    """
    shared = sorted(set(src) & set(tgt))
    if not shared:
        return Tensor(0.0), 0
    if bandwidths is None:
        pooled = np.concatenate([src[c].data for c in shared] + [tgt[c].data for c in shared], axis=0)
        bandwidths = median_bandwidths(pooled, factors)
    total = None
    for c in shared:
        term = mmd_squared(src[c], tgt[c], bandwidths)
        total = term if total is None else total + term
    return total * (1.0 / len(shared)), len(shared)


# ------------------------------------------------------------------ NT-Xent
def _normalize_rows(x: Tensor) -> Tensor:
    return x / ad.sqrt((x * x).sum(axis=1, keepdims=True))


def paired_nt_xent(first: CentroidSet, second: CentroidSet, tau: float) -> tuple[Tensor, int]:
    """Symmetrized NT-Xent over two centroid views.

    Each character present in both views yields two anchors (one per
    direction).  An anchor's candidates are every centroid in either view
    except itself; its positive is the same character in the other view.
    Returns ``(mean anchor loss, number of positive pairs)``.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    shared = sorted(set(first.chars) & set(second.chars))
    if not shared:
        return Tensor(0.0), 0
    k1 = len(first.chars)
    allv = ad.concat([first.vectors, second.vectors], axis=0)
    z = _normalize_rows(allv)
    # cosine similarity <= 1, so shifting by 1/tau keeps every exponent <= 0
    logits = (z @ z.T) * (1.0 / tau) - (1.0 / tau)
    n = k1 + len(second.chars)

    anchors, positives = [], []
    for c in shared:
        i = first.chars.index(c)
        j = k1 + second.chars.index(c)
        anchors += [i, j]
        positives += [j, i]
    anchors = np.array(anchors)
    positives = np.array(positives)
    not_self = np.ones((len(anchors), n))
    not_self[np.arange(len(anchors)), anchors] = 0.0

    rows = logits[anchors]
    denom = ad.log((ad.exp(rows) * not_self).sum(axis=1))
    pos = logits[anchors, positives]
    return (denom - pos).mean(), len(shared)


def discrimination_loss(c_target: CentroidSet, c_aug: CentroidSet, tau: float) -> tuple[Tensor, int]:
    """Target vs augmented-target centroid contrast; positives are the same character across views."""
    return paired_nt_xent(c_target, c_aug, tau)


def cdcl_loss(c_source: CentroidSet, c_target: CentroidSet, tau: float) -> tuple[Tensor, int]:
    """Cross-domain centroid contrast; positives are the same character across domains."""
    return paired_nt_xent(c_source, c_target, tau)


# --------------------------------------------------------------------- DAT
def grl_schedule(progress: float, strength: float, ramp: bool = True) -> float:
    """Reversal coefficient at training progress ``p`` in [0, 1].

    With ``ramp`` the coefficient follows ``strength * (2 / (1 + exp(-10 p)) - 1)``,
    which starts at zero and saturates at ``strength``.
    """
    if not ramp:
        return strength
    return strength * (2.0 / (1.0 + np.exp(-10.0 * progress)) - 1.0)


def init_discriminator(hidden: int, width: int = 64, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)

    def dense(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(rng.uniform(-limit, limit, (fan_in, fan_out)), requires_grad=True)

    return {
        "disc.w1": dense(hidden, width),
        "disc.b1": Tensor(np.zeros(width), requires_grad=True),
        "disc.w2": dense(width, 1),
        "disc.b2": Tensor(np.zeros(1), requires_grad=True),
    }


def mean_pool(enc) -> Tensor:
    """Average of the valid encoder frames of each utterance, ``(B, H)``."""
    T = enc.frames.shape[1]
    lengths = np.array(enc.lengths, dtype=np.float64)
    mask = (np.arange(T)[None, :] < lengths[:, None]) / lengths[:, None]
    return (enc.frames * mask[:, :, None]).sum(axis=1)


def domain_logits(pooled: Tensor, disc: Mapping[str, Tensor], grl_strength: float) -> Tensor:
    h = ad.grad_reverse(pooled, grl_strength)
    h = ad.relu(h @ disc["disc.w1"] + disc["disc.b1"])
    return (h @ disc["disc.w2"] + disc["disc.b2"]).reshape(-1)


def binary_cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    # -[y log s(x) + (1-y) log(1-s(x))] = softplus(x) - y x
    return (ad.softplus(logits) - logits * np.asarray(targets, dtype=np.float64)).mean()


def dat_loss(pooled_src: Tensor, pooled_tgt: Tensor, disc: Mapping[str, Tensor], grl_strength: float) -> tuple[Tensor, dict]:
    """Domain-classification BCE (source = 1, target = 0) behind a gradient-reversal layer."""
    if pooled_src.shape[0] == 0 or pooled_tgt.shape[0] == 0:
        raise ValueError("DAT needs non-empty source and target batches")
    pooled = ad.concat([pooled_src, pooled_tgt], axis=0)
    targets = np.concatenate([np.ones(pooled_src.shape[0]), np.zeros(pooled_tgt.shape[0])])
    logits = domain_logits(pooled, disc, grl_strength)
    loss = binary_cross_entropy_with_logits(logits, targets)
    accuracy = float(np.mean((logits.data > 0) == (targets > 0.5)))
    return loss, {"domain_accuracy": accuracy}


# ------------------------------------------------------------------- total
def total_loss(l_asr, l_ma, l_di, alpha: float, beta: float, method: str = "MADI"):
    """``l_asr + alpha * l_ma + beta * l_di`` with the terms a method does not use zeroed."""
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be non-negative")
    method = canonical_method(method)
    if method == "SO":
        alpha = beta = 0.0
    elif method in ("CMatch", "DAT", "CDCL"):
        beta = 0.0
    out = l_asr
    if alpha:
        out = out + alpha * l_ma
    if beta:
        out = out + beta * l_di
    return out
