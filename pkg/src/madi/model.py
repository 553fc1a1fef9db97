"""Compact joint CTC-attention recognizer.

Encoder: strided-convolution subsampling (kernel = stride) followed by
pre-norm self-attention + feed-forward blocks.  A linear CTC head reads the
final encoder frames; a one-layer attention decoder provides the attention
loss term.  Batches are padded to the longest utterance and masked.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ctc import ctc_loss_batch

CHECKPOINT_FORMAT = "madi-checkpoint"
CHECKPOINT_VERSION = 1
MASK_VALUE = -1e9


@dataclass
class SymbolTable:
    """Characters get ids ``0..N-1``; the CTC blank is ``N``."""

    characters: list[str]
    separator: str | None = " "

    def __post_init__(self):
        if len(self.characters) < 2:
            raise ValueError("need at least two characters")
        if len(set(self.characters)) != len(self.characters):
            raise ValueError("duplicate characters in symbol table")
        if self.separator is not None and self.separator not in self.characters:
            raise ValueError("separator must be one of the characters")
        self._ids = {c: i for i, c in enumerate(self.characters)}

    @property
    def num_chars(self) -> int:
        return len(self.characters)

    @property
    def blank(self) -> int:
        return len(self.characters)

    @property
    def ctc_dim(self) -> int:
        return len(self.characters) + 1

    @property
    def decoder_dim(self) -> int:
        # characters, blank (never a target), and a shared sos/eos token
        return len(self.characters) + 2

    @property
    def sos_eos(self) -> int:
        return len(self.characters) + 1

    @property
    def separator_id(self) -> int | None:
        return None if self.separator is None else self._ids[self.separator]

    def encode(self, text: str) -> list[int]:
        try:
            return [self._ids[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"symbol {exc.args[0]!r} not in table") from None

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.characters[i] for i in ids if i < len(self.characters))


@dataclass
class EncoderConfig:
    feat_dim: int = 80
    hidden: int = 64
    heads: int = 4
    layers: int = 2
    ffn: int = 128
    subsampling: int = 4

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError("hidden width must be divisible by the number of heads")
        if self.subsampling < 1:
            raise ValueError("subsampling must be a positive integer")

    def output_frames(self, t_in: int) -> int:
        return -(-t_in // self.subsampling)


@dataclass
class EncodedBatch:
    """Encoder frames ``(B, T', H)``, CTC log-probabilities ``(B, T', V)`` and valid lengths."""

    frames: Tensor
    log_probs: Tensor
    lengths: list[int]

    def __len__(self) -> int:
        return len(self.lengths)

    def utterance_log_probs(self, b: int) -> np.ndarray:
        return self.log_probs.data[b, : self.lengths[b]]

    def valid_index(self) -> tuple[np.ndarray, np.ndarray]:
        rows = np.concatenate([np.full(n, b) for b, n in enumerate(self.lengths)])
        cols = np.concatenate([np.arange(n) for n in self.lengths])
        return rows.astype(np.intp), cols.astype(np.intp)


@dataclass
class LossBreakdown:
    l_asr: float = 0.0
    l_ctc: float = 0.0
    l_att: float = 0.0
    l_ma: float = 0.0
    l_di: float = 0.0
    shared_char_count: int = 0
    total: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def sinusoid_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / (10000.0 ** (2 * i / dim))
    out = np.zeros((length, dim))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / ad.sqrt(var + eps) * gain + bias


def multi_head_attention(
    q_in: Tensor, kv_in: Tensor, key_mask: np.ndarray, heads: int, p: dict, prefix: str
) -> Tensor:
    """``key_mask``: additive bias broadcastable to ``(B, heads, Tq, Tk)``."""
    B, Tq, H = q_in.shape
    Tk = kv_in.shape[1]
    dh = H // heads

    def split(x, T):
        return x.reshape(B, T, heads, dh).transpose(0, 2, 1, 3)

    q = split(q_in @ p[prefix + "wq"], Tq)
    k = split(kv_in @ p[prefix + "wk"], Tk)
    v = split(kv_in @ p[prefix + "wv"], Tk)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)) + key_mask
    attn = ad.softmax(scores, axis=-1)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, Tq, H)
    return ctx @ p[prefix + "wo"]


class Recognizer:
    """Parameters live in ``self.params`` (trainable) and ``self.buffers`` (feature statistics)."""

    def __init__(self, symbols: SymbolTable, config: EncoderConfig | None = None, seed: int = 0):
        self.symbols = symbols
        self.config = config or EncoderConfig()
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {
            "feat_mean": np.zeros(self.config.feat_dim),
            "feat_std": np.ones(self.config.feat_dim),
        }
        self._init_params(np.random.default_rng(seed))

    # ------------------------------------------------------------ parameters
    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.config
        H = c.hidden

        def dense(name, fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.params[name] = Tensor(rng.uniform(-limit, limit, (fan_in, fan_out)), requires_grad=True, name=name)

        def vec(name, n, value=0.0):
            self.params[name] = Tensor(np.full(n, value), requires_grad=True, name=name)

        dense("sub.w", c.feat_dim * c.subsampling, H)
        vec("sub.b", H)
        for i in range(c.layers):
            pre = f"enc{i}."
            vec(pre + "ln1.g", H, 1.0)
            vec(pre + "ln1.b", H)
            for m in ("wq", "wk", "wv", "wo"):
                dense(pre + "att." + m, H, H)
            vec(pre + "ln2.g", H, 1.0)
            vec(pre + "ln2.b", H)
            dense(pre + "ff.w1", H, c.ffn)
            vec(pre + "ff.b1", c.ffn)
            dense(pre + "ff.w2", c.ffn, H)
            vec(pre + "ff.b2", H)
        vec("enc.ln.g", H, 1.0)
        vec("enc.ln.b", H)
        dense("ctc.w", H, self.symbols.ctc_dim)
        vec("ctc.b", self.symbols.ctc_dim)

        V = self.symbols.decoder_dim
        self.params["dec.emb"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(H), (V, H)), requires_grad=True, name="dec.emb")
        vec("dec.ln1.g", H, 1.0)
        vec("dec.ln1.b", H)
        for m in ("wq", "wk", "wv", "wo"):
            dense("dec.att." + m, H, H)
        vec("dec.ln2.g", H, 1.0)
        vec("dec.ln2.b", H)
        dense("dec.ff.w1", H, c.ffn)
        vec("dec.ff.b1", c.ffn)
        dense("dec.ff.w2", c.ffn, H)
        vec("dec.ff.b2", H)
        vec("dec.ln.g", H, 1.0)
        vec("dec.ln.b", H)
        dense("dec.out.w", H, V)
        vec("dec.out.b", V)

    def set_feature_stats(self, feats: Sequence[np.ndarray]) -> None:
        stacked = np.concatenate(list(feats), axis=0)
        self.buffers["feat_mean"] = stacked.mean(axis=0)
        self.buffers["feat_std"] = np.maximum(stacked.std(axis=0), 1e-3)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: p.grad for k, p in self.params.items() if p.grad is not None}

    # --------------------------------------------------------------- encoder
    def _subsample_input(self, feats: Sequence[np.ndarray]) -> tuple[np.ndarray, list[int]]:
        c = self.config
        s = c.subsampling
        lengths = [c.output_frames(len(f)) for f in feats]
        T = max(lengths)
        x = np.zeros((len(feats), T, c.feat_dim * s))
        for b, f in enumerate(feats):
            norm = (f - self.buffers["feat_mean"]) / self.buffers["feat_std"]
            padded = np.zeros((lengths[b] * s, c.feat_dim))
            padded[: len(f)] = norm
            x[b, : lengths[b]] = padded.reshape(lengths[b], s * c.feat_dim)
        return x, lengths

    def encode(self, feats: Sequence[np.ndarray]) -> EncodedBatch:
        """Encode a list of ``(T_i, F)`` feature matrices."""
        if not feats or any(len(f) == 0 for f in feats):
            raise ValueError("cannot encode an empty feature sequence")
        p = self.params
        c = self.config
        x, lengths = self._subsample_input(feats)
        B, T, _ = x.shape
        valid = np.arange(T)[None, :] < np.array(lengths)[:, None]
        key_mask = np.where(valid, 0.0, MASK_VALUE)[:, None, None, :]

        h = Tensor(x) @ p["sub.w"] + p["sub.b"]
        h = ad.relu(h) + sinusoid_positions(T, c.hidden)
        for i in range(c.layers):
            pre = f"enc{i}."
            a = layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
            h = h + multi_head_attention(a, a, key_mask, c.heads, p, pre + "att.")
            f = layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
            f = ad.relu(f @ p[pre + "ff.w1"] + p[pre + "ff.b1"]) @ p[pre + "ff.w2"] + p[pre + "ff.b2"]
            h = h + f
        h = layer_norm(h, p["enc.ln.g"], p["enc.ln.b"])
        logits = h @ p["ctc.w"] + p["ctc.b"]
        return EncodedBatch(h, ad.log_softmax(logits, axis=-1), lengths)

    # ---------------------------------------------------------------- losses
    def ctc_loss(self, enc: EncodedBatch, labels: Sequence[Sequence[int]]) -> Tensor:
        return ctc_loss_batch(enc.log_probs, enc.lengths, labels)

    def decoder_log_probs(self, enc: EncodedBatch, labels: Sequence[Sequence[int]]) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Teacher-forced decoder outputs.

        Returns log-probabilities ``(B, L+1, V)``, integer targets and a float
        mask marking real (non-padding) positions.
        """
        if any(len(y) == 0 for y in labels):
            raise ValueError("attention loss needs non-empty label sequences")
        p = self.params
        c = self.config
        sos = self.symbols.sos_eos
        B = len(labels)
        L = max(len(y) for y in labels) + 1
        tokens = np.full((B, L), sos, dtype=np.intp)
        targets = np.full((B, L), sos, dtype=np.intp)
        mask = np.zeros((B, L))
        for b, y in enumerate(labels):
            tokens[b, 1 : len(y) + 1] = y
            targets[b, : len(y)] = y
            targets[b, len(y)] = sos
            mask[b, : len(y) + 1] = 1.0

        T = enc.frames.shape[1]
        valid = np.arange(T)[None, :] < np.array(enc.lengths)[:, None]
        key_mask = np.where(valid, 0.0, MASK_VALUE)[:, None, None, :]

        q = ad.index(p["dec.emb"], tokens) + sinusoid_positions(L, c.hidden)
        a = layer_norm(q, p["dec.ln1.g"], p["dec.ln1.b"])
        h = q + multi_head_attention(a, enc.frames, key_mask, c.heads, p, "dec.att.")
        f = layer_norm(h, p["dec.ln2.g"], p["dec.ln2.b"])
        h = h + ad.relu(f @ p["dec.ff.w1"] + p["dec.ff.b1"]) @ p["dec.ff.w2"] + p["dec.ff.b2"]
        h = layer_norm(h, p["dec.ln.g"], p["dec.ln.b"])
        logits = h @ p["dec.out.w"] + p["dec.out.b"]
        return ad.log_softmax(logits, axis=-1), targets, mask

    def attention_loss(self, enc: EncodedBatch, labels: Sequence[Sequence[int]]) -> Tensor:
        """Token-averaged teacher-forced cross-entropy predicting ``labels + eos``."""
        logp, targets, mask = self.decoder_log_probs(enc, labels)
        B, L, _ = logp.shape
        picked = logp[np.arange(B)[:, None], np.arange(L)[None, :], targets]
        return -(picked * mask).sum() * (1.0 / mask.sum())

    # -------------------------------------------------------------- inference
    def transcribe(self, feats: Sequence[np.ndarray]) -> list[list[int]]:
        from .ctc import ctc_greedy_decode

        enc = self.encode(feats)
        return [ctc_greedy_decode(enc.utterance_log_probs(b)) for b in range(len(enc))]

    # ------------------------------------------------------------ checkpoints
    def state(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return out

    def copy(self) -> Recognizer:
        other = Recognizer.__new__(Recognizer)
        other.symbols = self.symbols
        other.config = self.config
        other.params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other


def asr_loss(ctc: Tensor | float, att: Tensor | float, lam: float):
    """Interpolated joint CTC-attention loss."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("CTC weight must lie in [0, 1]")
    return lam * ctc + (1.0 - lam) * att


def save_checkpoint(path, model: Recognizer, extra: dict | None = None, extra_arrays: dict | None = None) -> None:
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "characters": model.symbols.characters,
        "separator": model.symbols.separator,
        "encoder": asdict(model.config),
        "extra": extra or {},
    }
    arrays = dict(model.state())
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra/{k}"] = np.asarray(v)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[Recognizer, dict, dict]:
    """Returns the model, the ``extra`` metadata and any extra arrays."""
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint file")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        symbols = SymbolTable(meta["characters"], meta["separator"])
        model = Recognizer.__new__(Recognizer)
        model.symbols = symbols
        model.config = EncoderConfig(**meta["encoder"])
        model.params = {}
        model.buffers = {}
        extra_arrays = {}
        for key in z.files:
            if key.startswith("param/"):
                name = key[len("param/") :]
                model.params[name] = Tensor(z[key].copy(), requires_grad=True, name=name)
            elif key.startswith("buffer/"):
                model.buffers[key[len("buffer/") :]] = z[key].copy()
            elif key.startswith("extra/"):
                extra_arrays[key[len("extra/") :]] = z[key].copy()
    return model, meta["extra"], extra_arrays
