"""Seeded two-domain synthetic corpus standing in for recorded speech.

Every character owns an acoustic prototype: a mixture of a few sinusoids
drawn from a shared pool of partials, so characters differ mostly in which
partials they use and how loud each one is.  Words are strings of
characters; a word boundary is a short stretch of silence that the
recognizer transcribes as the separator symbol.

The target domain runs the clean synthesis through a fixed FIR "microphone"
and adds background noise (rain-, wind- or laughter-like) at a set SNR.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.signal import butter, lfilter, sosfilt

from .features import Waveform, read_wav, write_wav
from .model import SymbolTable

MAX_DURATION = 17.5
NOISE_KINDS = ("none", "rain", "wind", "laughter")
SPLITS = ("source_train", "source_test", "target_train", "target_test")
LETTERS = "abcdefghijklmnopqrstuvwxyz"


@dataclass
class DomainShift:
    fir_taps: list[float] = field(default_factory=lambda: [1.0])
    noise: str = "none"
    snr_db: float = 20.0
    snr_spread_db: float = 0.0  # per-utterance SNR is uniform in snr_db +/- spread

    def __post_init__(self):
        if self.noise not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}")
        if not np.isfinite(self.snr_db) or not np.isfinite(self.snr_spread_db) or self.snr_spread_db < 0:
            raise ValueError("SNR must be finite and its spread non-negative")
        if not self.fir_taps:
            raise ValueError("FIR channel needs at least one tap")

    @property
    def is_identity(self) -> bool:
        return self.noise == "none" and list(self.fir_taps) == [1.0]


# Reference shifts.  The default is the environment mismatch: band-limited
# rain at a per-utterance SNR of 12 +/- 6 dB.
DEFAULT_SHIFT = DomainShift(fir_taps=[1.0], noise="rain", snr_db=12.0, snr_spread_db=6.0)
ENVIRONMENT_SHIFT = DEFAULT_SHIFT
# device mismatch: a comb-like microphone response, no extra noise
DEVICE_SHIFT = DomainShift(fir_taps=[1.0, 0.0, 0.8])


@dataclass
class CorpusConfig:
    num_chars: int = 6
    lexicon: list[str] | None = None
    lexicon_size: int = 20
    word_length: tuple[int, int] = (2, 4)
    n_source: int = 200
    n_target: int = 200
    n_target_test: int = 100
    n_source_test: int = 100
    words_per_utterance: tuple[int, int] = (2, 3)
    segment_duration: tuple[float, float] = (0.07, 0.11)
    silence_duration: tuple[float, float] = (0.08, 0.12)
    edge_silence: float = 0.04
    sample_rate: int = 16000
    noise_floor_db: float = 20.0
    frequency_jitter: float = 0.04
    shift: DomainShift = field(default_factory=lambda: DomainShift(**asdict(DEFAULT_SHIFT)))
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.shift, dict):
            self.shift = DomainShift(**self.shift)
        self.word_length = tuple(self.word_length)
        self.words_per_utterance = tuple(self.words_per_utterance)
        self.segment_duration = tuple(self.segment_duration)
        self.silence_duration = tuple(self.silence_duration)
        if self.num_chars < 3 or self.num_chars > len(LETTERS):
            raise ValueError("num_chars must lie in [3, 26]")
        for lo, hi in (self.segment_duration, self.silence_duration):
            if not 0 < lo <= hi:
                raise ValueError("durations must be positive ranges")
        if self.lexicon is None:
            self.lexicon = make_lexicon(self.num_chars, self.lexicon_size, self.word_length, self.seed)
        alphabet = set(LETTERS[: self.num_chars])
        for w in self.lexicon:
            if not w or not set(w) <= alphabet:
                raise ValueError(f"lexicon word {w!r} uses symbols outside the alphabet")

    @property
    def symbols(self) -> SymbolTable:
        return SymbolTable(list(LETTERS[: self.num_chars]) + [" "], " ")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> CorpusConfig:
        return cls(**d)


def make_lexicon(num_chars: int, size: int, word_length: tuple[int, int], seed: int) -> list[str]:
    rng = np.random.default_rng([seed, 7919])
    letters = LETTERS[:num_chars]
    words: list[str] = []
    seen = set()
    while len(words) < size:
        n = int(rng.integers(word_length[0], word_length[1] + 1))
        w = "".join(letters[i] for i in rng.integers(0, num_chars, n))
        if any(a == b for a, b in zip(w, w[1:])):
            continue
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


@dataclass
class Utterance:
    id: str
    waveform: Waveform
    transcript: str
    domain: str

    @property
    def duration(self) -> float:
        return self.waveform.duration


@dataclass(frozen=True)
class UnlabeledUtterance:
    """Audio without a transcript; the only view of target training data adaptation sees."""

    id: str
    waveform: Waveform
    domain: str


@dataclass
class Corpus:
    config: CorpusConfig
    splits: dict[str, list[Utterance]]

    def __getitem__(self, split: str) -> list[Utterance]:
        return self.splits[split]

    def unlabeled(self, split: str) -> list[UnlabeledUtterance]:
        return [UnlabeledUtterance(u.id, u.waveform, u.domain) for u in self.splits[split]]

    def __iter__(self) -> Iterator[Utterance]:
        for name in self.splits:
            yield from self.splits[name]


# ----------------------------------------------------------------- synthesis
def character_prototypes(num_chars: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """(frequencies in Hz, amplitudes) for each character.

    Partials are drawn from a shared log-spaced pool so that neighbouring
    characters overlap and are told apart by relative partial strength.
    """
    rng = np.random.default_rng([seed, 104729])
    pool = np.geomspace(250.0, 5000.0, num_chars + 4)
    protos = []
    for c in range(num_chars):
        k = 2 + int(rng.integers(0, 2))
        base = c % len(pool)
        picks = {base}
        while len(picks) < k:
            picks.add(int(rng.integers(0, len(pool))))
        freqs = pool[sorted(picks)]
        amps = rng.uniform(0.4, 1.0, len(freqs))
        amps[list(sorted(picks)).index(base)] = 1.0
        protos.append((freqs, amps / amps.sum()))
    return protos


def _segment(freqs, amps, n, rate, rng, jitter):
    t = np.arange(n) / rate
    out = np.zeros(n)
    for f, a in zip(freqs, amps):
        f = f * (1.0 + rng.uniform(-jitter, jitter))
        out += a * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    ramp = min(n // 4, int(0.01 * rate))
    if ramp > 0:
        env = np.ones(n)
        env[:ramp] = np.linspace(0.0, 1.0, ramp)
        env[-ramp:] = np.linspace(1.0, 0.0, ramp)
        out *= env
    return out * rng.uniform(0.7, 1.0)


def clean_signal(transcript: str, cfg: CorpusConfig, rng: np.random.Generator) -> np.ndarray:
    rate = cfg.sample_rate
    protos = character_prototypes(cfg.num_chars, cfg.seed)
    edge = np.zeros(int(round(cfg.edge_silence * rate)))
    pieces = [edge]
    words = transcript.split(" ")
    for wi, word in enumerate(words):
        if wi:
            n = int(round(rng.uniform(*cfg.silence_duration) * rate))
            pieces.append(np.zeros(n))
        for ch in word:
            freqs, amps = protos[LETTERS.index(ch)]
            n = int(round(rng.uniform(*cfg.segment_duration) * rate))
            pieces.append(_segment(freqs, amps, n, rate, rng, cfg.frequency_jitter))
    pieces.append(edge)
    x = np.concatenate(pieces)
    floor = rng.standard_normal(x.size) * np.sqrt(np.mean(x**2)) * 10 ** (-cfg.noise_floor_db / 20)
    return x + floor


def make_noise(kind: str, n: int, rate: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "none":
        return np.zeros(n)
    white = rng.standard_normal(n)
    nyq = rate / 2
    if kind == "rain":
        sos = butter(4, [2000 / nyq, min(6000, nyq * 0.95) / nyq], btype="band", output="sos")
        return sosfilt(sos, white)
    if kind == "wind":
        sos = butter(4, 400 / nyq, btype="low", output="sos")
        gust = 1.0 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * np.arange(n) / rate + rng.uniform(0, 2 * np.pi))
        return sosfilt(sos, white) * gust
    if kind == "laughter":
        out = np.zeros(n)
        burst = int(0.08 * rate)
        for _ in range(max(1, n // (4 * burst))):
            s = int(rng.integers(0, max(1, n - burst)))
            t = np.arange(burst) / rate
            f0 = rng.uniform(200, 400)
            tone = sum(np.sin(2 * np.pi * f0 * h * t) / h for h in (1, 2, 3))
            out[s : s + burst] += (tone + 0.5 * rng.standard_normal(burst)) * np.hanning(burst)
        return out
    raise ValueError(f"unknown noise kind {kind!r}")


def apply_shift(x: np.ndarray, shift: DomainShift, rate: int, rng: np.random.Generator) -> np.ndarray:
    taps = np.asarray(shift.fir_taps, dtype=np.float64)
    # unit L1 norm keeps the filtered peak within the clean peak
    y = lfilter(taps / np.abs(taps).sum(), [1.0], x)
    if shift.noise != "none":
        noise = make_noise(shift.noise, y.size, rate, rng)
        p_sig = np.mean(y**2)
        p_noise = np.mean(noise**2)
        snr = shift.snr_db
        if shift.snr_spread_db > 0:
            snr += rng.uniform(-shift.snr_spread_db, shift.snr_spread_db)
        if p_noise > 0:
            y = y + noise * np.sqrt(p_sig / p_noise * 10 ** (-snr / 10))
    return y


def synthesize_utterance(
    transcript: str, domain: str, rng: np.random.Generator, cfg: CorpusConfig, utt_id: str = "utt"
) -> Utterance:
    for w in transcript.split(" "):
        if w not in cfg.lexicon:
            raise ValueError(f"word {w!r} is not in the lexicon")
    x = 0.5 * clean_signal(transcript, cfg, rng)
    if domain == "target":
        x = apply_shift(x, cfg.shift, cfg.sample_rate, rng)
    elif domain != "source":
        raise ValueError("domain must be 'source' or 'target'")
    if x.size / cfg.sample_rate >= MAX_DURATION:
        raise ValueError("utterance exceeds the 17.5 s duration cap")
    return Utterance(utt_id, Waveform(x, cfg.sample_rate), transcript, domain)


def duration_bounds(transcript: str, cfg: CorpusConfig) -> tuple[float, float]:
    words = transcript.split(" ")
    chars = sum(len(w) for w in words)
    gaps = len(words) - 1
    edges = 2 * round(cfg.edge_silence * cfg.sample_rate) / cfg.sample_rate
    lo = chars * cfg.segment_duration[0] + gaps * cfg.silence_duration[0] + edges
    hi = chars * cfg.segment_duration[1] + gaps * cfg.silence_duration[1] + edges
    return lo, hi


def random_transcript(cfg: CorpusConfig, rng: np.random.Generator) -> str:
    n = int(rng.integers(cfg.words_per_utterance[0], cfg.words_per_utterance[1] + 1))
    return " ".join(cfg.lexicon[i] for i in rng.integers(0, len(cfg.lexicon), n))


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    """Deterministic four-way split; every utterance draws from its own ``(seed, split, index)`` stream."""
    plan = {
        "source_train": ("source", cfg.n_source),
        "source_test": ("source", cfg.n_source_test),
        "target_train": ("target", cfg.n_target),
        "target_test": ("target", cfg.n_target_test),
    }
    splits: dict[str, list[Utterance]] = {}
    for code, (name, (domain, count)) in enumerate(plan.items()):
        utts = []
        for i in range(count):
            rng = np.random.default_rng([cfg.seed, code, i])
            text = random_transcript(cfg, rng)
            utts.append(synthesize_utterance(text, domain, rng, cfg, f"{name}-{i:05d}"))
        splits[name] = utts
    return Corpus(cfg, splits)


# --------------------------------------------------------------- manifests
class ManifestError(ValueError):
    pass


def write_manifest(corpus: Corpus, path) -> Path:
    """Write ``manifest.jsonl``, ``config.json`` and one PCM-16 WAV per utterance under ``path``."""
    root = Path(path)
    (root / "wav").mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(json.dumps(corpus.config.to_dict(), indent=2, sort_keys=True))
    with open(root / "manifest.jsonl", "w") as fh:
        for split, utts in corpus.splits.items():
            for u in utts:
                rel = f"wav/{u.id}.wav"
                write_wav(root / rel, u.waveform)
                row = {"id": u.id, "audio_path": rel, "transcript": u.transcript, "domain": u.domain, "split": split}
                fh.write(json.dumps(row) + "\n")
    return root / "manifest.jsonl"


def read_manifest(path) -> Corpus:
    """Load a corpus written by :func:`write_manifest`; ``path`` is the directory or the manifest file."""
    p = Path(path)
    root = p if p.is_dir() else p.parent
    manifest = root / "manifest.jsonl" if p.is_dir() else p
    cfg_path = root / "config.json"
    cfg = CorpusConfig.from_dict(json.loads(cfg_path.read_text())) if cfg_path.exists() else CorpusConfig()
    splits: dict[str, list[Utterance]] = {}
    with open(manifest) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                u = Utterance(row["id"], read_wav(root / row["audio_path"]), row["transcript"], row["domain"])
                split = row.get("split", row["domain"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ManifestError(f"{manifest}:{lineno}: malformed manifest row ({exc})") from None
            splits.setdefault(split, []).append(u)
    return Corpus(cfg, splits)


def load_corpus_config(path) -> CorpusConfig:
    return CorpusConfig.from_dict(json.loads(Path(path).read_text()))
