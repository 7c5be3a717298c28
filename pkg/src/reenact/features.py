"""Audio ingestion and the deterministic feature pipeline.

Everything here is NumPy/SciPy and side-effect free: resampling, STFT and
log-Mel extraction, per-bin standardization, an autocorrelation F0 tracker
used as ground truth, phoneme alignment loading and per-speaker log-F0
statistics.

All frame-level quantities share one framing convention: frames are centred
on multiples of the hop (the signal is zero padded by half a window on both
sides), so an ``N`` sample signal always gives ``T = 1 + N // HOP`` frames.
"""

from __future__ import annotations

import functools
import json
import logging
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

from .errors import (
    AlignmentError,
    InsufficientDataError,
    InvalidInputError,
    StateError,
    UnsupportedRateError,
    VocabularyError,
)

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
WIN_LENGTH = 800  # 50 ms
HOP_LENGTH = 200  # 12.5 ms
N_FFT = 2048
N_MELS = 80
F_MIN = 0.0
F_MAX = 8000.0
LOG_FLOOR = 1e-5
FRAME_RATE = SAMPLE_RATE / HOP_LENGTH

F0_MIN = 50.0
F0_MAX = 600.0
VOICING_THRESHOLD = 0.45

TRIM_DB = 50.0


# ---------------------------------------------------------------------------
# framing / STFT
# ---------------------------------------------------------------------------

def num_frames(n_samples: int, hop: int = HOP_LENGTH) -> int:
    return 1 + n_samples // hop


def frame_signal(audio: np.ndarray, win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> np.ndarray:
    """Centre-padded framing; returns a (T, win) view-copy."""
    audio = np.asarray(audio, dtype=np.float64)
    padded = np.pad(audio, (win // 2, win // 2))
    n = num_frames(len(audio), hop)
    idx = np.arange(win)[None, :] + hop * np.arange(n)[:, None]
    return padded[idx]


@functools.lru_cache(maxsize=4)
def _window(win: int) -> np.ndarray:
    return get_window("hann", win, fftbins=True)


def stft(audio: np.ndarray, n_fft: int = N_FFT, win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> np.ndarray:
    """Complex STFT of shape (n_fft // 2 + 1, T)."""
    frames = frame_signal(audio, win, hop) * _window(win)
    return np.fft.rfft(frames, n=n_fft, axis=1).T


def istft(spec: np.ndarray, n_fft: int = N_FFT, win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    Output length is ``(T - 1) * hop``, the longest signal whose framing
    yields exactly ``T`` frames.
    """
    T = spec.shape[1]
    w = _window(win)
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1)[:, :win] * w
    total = win + hop * (T - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(T):
        out[t * hop : t * hop + win] += frames[t]
        norm[t * hop : t * hop + win] += w**2
    out /= np.maximum(norm, 1e-8)
    return out[win // 2 : win // 2 + (T - 1) * hop]


# ---------------------------------------------------------------------------
# Mel analysis
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = F_MIN, fmax: float = F_MAX) -> np.ndarray:
    points = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    return points[1:-1]


@functools.lru_cache(maxsize=4)
def mel_filterbank(
    sr: int = SAMPLE_RATE, n_fft: int = N_FFT, n_mels: int = N_MELS, fmin: float = F_MIN, fmax: float = F_MAX
) -> np.ndarray:
    """HTK-scale triangular filterbank, unit peak, shape (n_mels, n_fft//2+1)."""
    points = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sr)
    lower, center, upper = points[:-2, None], points[1:-1, None], points[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


@dataclass
class MelSpectrogram:
    """An 80 x T log-amplitude Mel matrix."""

    values: np.ndarray
    frame_rate: float = FRAME_RATE
    standardized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != N_MELS:
            raise InvalidInputError(f"expected a {N_MELS} x T matrix, got shape {self.values.shape}")
        if self.values.shape[1] < 1:
            raise InvalidInputError("a Mel spectrogram needs at least one frame")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("Mel spectrogram contains non-finite values")

    @property
    def T(self) -> int:
        return self.values.shape[1]


def resample(audio: np.ndarray, source_rate: int, target_rate: int = SAMPLE_RATE) -> np.ndarray:
    audio = np.asarray(audio, dtype=np.float64)
    if source_rate == target_rate:
        return audio
    g = np.gcd(int(source_rate), int(target_rate))
    return resample_poly(audio, target_rate // g, source_rate // g)


def _check_audio(audio, source_rate: int) -> np.ndarray:
    audio = np.asarray(audio, dtype=np.float64).reshape(-1)
    if audio.size == 0:
        raise InvalidInputError("empty audio")
    if source_rate < SAMPLE_RATE:
        raise UnsupportedRateError(f"source rate {source_rate} Hz is below {SAMPLE_RATE} Hz")
    return resample(audio, source_rate)


def mel_from_magnitude(mag: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(mel_filterbank() @ mag, LOG_FLOOR))


def compute_mel(audio, source_rate: int = SAMPLE_RATE) -> MelSpectrogram:
    """Log-amplitude Mel spectrogram at 16 kHz, 50 ms Hann window, 12.5 ms hop."""
    audio = _check_audio(audio, source_rate)
    mag = np.abs(stft(audio))
    return MelSpectrogram(mel_from_magnitude(mag))


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != (N_MELS,) or self.std.shape != (N_MELS,):
            raise InvalidInputError("standardizer needs 80 means and 80 stds")
        if np.any(self.std <= 0):
            raise InvalidInputError("standardizer std must be positive")

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["mean"]), np.array(d["std"]), d.get("provenance", ""))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Standardizer":
        return cls.from_dict(json.loads(Path(path).read_text()))


STD_FLOOR = 1e-8


def fit_standardizer(corpus: Iterable[MelSpectrogram], provenance: str = "") -> Standardizer:
    """Per-bin mean and (population) std over every frame of every item."""
    mats = []
    for mel in corpus:
        if mel.standardized:
            raise StateError("fit_standardizer expects unstandardized spectrograms")
        mats.append(mel.values)
    if not mats:
        raise InsufficientDataError("cannot fit a standardizer on an empty corpus")
    # sorted concatenation keeps the float reduction independent of corpus order
    allv = np.sort(np.concatenate(mats, axis=1), axis=1)
    mean = allv.mean(axis=1)
    std = allv.std(axis=1)
    if np.any(std < STD_FLOOR):
        warnings.warn(
            f"{int(np.sum(std < STD_FLOOR))} Mel bin(s) are constant over the corpus; std clamped to {STD_FLOOR}",
            RuntimeWarning,
            stacklevel=2,
        )
        std = np.maximum(std, STD_FLOOR)
    return Standardizer(mean, std, provenance)


def apply_standardizer(mel: MelSpectrogram, s: Standardizer, direction: str = "forward") -> MelSpectrogram:
    if direction == "forward":
        if mel.standardized:
            raise StateError("spectrogram is already standardized")
        return MelSpectrogram((mel.values - s.mean[:, None]) / s.std[:, None], mel.frame_rate, True)
    if direction == "inverse":
        if not mel.standardized:
            raise StateError("spectrogram is not standardized")
        return MelSpectrogram(mel.values * s.std[:, None] + s.mean[:, None], mel.frame_rate, False)
    raise InvalidInputError(f"unknown direction {direction!r}")


# ---------------------------------------------------------------------------
# F0 oracle
# ---------------------------------------------------------------------------

def extract_f0_oracle(
    audio,
    sample_rate: int = SAMPLE_RATE,
    threshold: float = VOICING_THRESHOLD,
    fmin: float = F0_MIN,
    fmax: float = F0_MAX,
) -> np.ndarray:
    """Normalized-autocorrelation pitch tracker, one value per Mel frame.

    Returns F0 in Hz, with exact zeros on frames whose best periodicity is
    below ``threshold``.
    """
    audio = np.asarray(audio, dtype=np.float64).reshape(-1)
    if sample_rate != SAMPLE_RATE:
        audio = resample(audio, sample_rate)
    frames = frame_signal(audio)
    frames = frames - frames.mean(axis=1, keepdims=True)
    W = frames.shape[1]
    lag_min = int(np.floor(SAMPLE_RATE / fmax))
    lag_max = int(np.ceil(SAMPLE_RATE / fmin))

    n_fft = 1 << int(np.ceil(np.log2(2 * W)))
    spec = np.fft.rfft(frames, n=n_fft, axis=1)
    acf = np.fft.irfft(np.abs(spec) ** 2, n=n_fft, axis=1)[:, : lag_max + 2]

    csum = np.concatenate([np.zeros((len(frames), 1)), np.cumsum(frames**2, axis=1)], axis=1)
    lags = np.arange(lag_max + 2)
    head = csum[:, W - lags]  # energy of x[0 : W - lag]
    tail = csum[:, W:W + 1] - csum[:, lags]  # energy of x[lag : W]
    denom = np.sqrt(head * tail)
    total = csum[:, W]
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 1e-12 * np.maximum(total[:, None], 1e-30), acf / denom, 0.0)

    f0 = np.zeros(len(frames))
    for t in range(len(frames)):
        if total[t] < 1e-10:
            continue
        seg = r[t]
        lo, hi = max(lag_min, 1), lag_max
        interior = seg[lo : hi + 1]
        peaks = np.flatnonzero((interior >= seg[lo - 1 : hi]) & (interior > seg[lo + 1 : hi + 2])) + lo
        if peaks.size == 0:
            continue
        best = seg[peaks].max()
        if best < threshold:
            continue
        lag = peaks[seg[peaks] >= 0.9 * best][0]
        a, b, c = seg[lag - 1], seg[lag], seg[lag + 1]
        curv = a - 2 * b + c
        shift = 0.5 * (a - c) / curv if curv < 0 else 0.0
        freq = SAMPLE_RATE / (lag + shift)
        if fmin <= freq <= fmax:
            f0[t] = freq
    return f0


# ---------------------------------------------------------------------------
# phoneme alignments
# ---------------------------------------------------------------------------

_CONSONANTS = "b ch d dh f g hh jh k l m n ng p r s sh t th v w y z zh".split()
_VOWELS = "aa ae ah ao aw ay eh er ey ih iy ow oy uh uw".split()


class PhonemeInventory:
    """Symbol <-> id table. Lookup is case-insensitive and treats a trailing
    stress digit ``0`` as the bare (unstressed) vowel."""

    def __init__(self, symbols: Sequence[str]):
        self.symbols = [s.lower() for s in symbols]
        if len(set(self.symbols)) != len(self.symbols):
            raise InvalidInputError("duplicate phoneme symbols")
        self._index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def _normalize(self, symbol: str) -> str:
        s = symbol.lower()
        if s not in self._index and s.endswith("0"):
            s = s[:-1]
        return s

    def __contains__(self, symbol: str) -> bool:
        return self._normalize(symbol) in self._index

    def id(self, symbol: str) -> int:
        try:
            return self._index[self._normalize(symbol)]
        except KeyError:
            raise VocabularyError(f"phoneme {symbol!r} is not in the inventory") from None

    @classmethod
    def default(cls) -> "PhonemeInventory":
        # ARPAbet: silence markers, 39 bare phonemes, primary/secondary stressed vowels
        symbols = ["sil", "sp", "spn"] + _CONSONANTS + _VOWELS
        symbols += [v + "1" for v in _VOWELS] + [v + "2" for v in _VOWELS]
        return cls(symbols)


DEFAULT_INVENTORY = PhonemeInventory.default()
ALIGNMENT_SLACK = 2


@dataclass
class PhonemeAlignment:
    ids: np.ndarray
    inventory_size: int = len(DEFAULT_INVENTORY)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 1:
            raise InvalidInputError("alignment ids must be a vector")
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= self.inventory_size):
            raise VocabularyError("alignment id outside the inventory")

    @property
    def T(self) -> int:
        return len(self.ids)


_TOKEN = re.compile(r"\[\s*([^\s\[\]]+)\s+(\d+)\s*\]")


def parse_alignment(text: str) -> list[tuple[str, int]]:
    stripped = _TOKEN.sub("", text)
    if stripped.strip():
        raise AlignmentError(f"unparseable alignment text near {stripped.strip()[:20]!r}")
    return [(sym, int(dur)) for sym, dur in _TOKEN.findall(text)]


def format_alignment(pairs: Iterable[tuple[str, int]]) -> str:
    return "".join(f"[{s} {d}]" for s, d in pairs)


def expand_alignment(
    pairs: Sequence[tuple[str, int]], expected_T: int, inventory: PhonemeInventory = DEFAULT_INVENTORY
) -> PhonemeAlignment:
    """Repeat each phoneme id for its duration, then pad or cut the last
    phoneme by at most ``ALIGNMENT_SLACK`` frames to reach ``expected_T``."""
    if not pairs:
        raise AlignmentError("empty alignment")
    ids = np.concatenate([np.full(d, inventory.id(s), dtype=np.int64) for s, d in pairs])
    diff = expected_T - len(ids)
    if abs(diff) > ALIGNMENT_SLACK:
        raise AlignmentError(f"alignment covers {len(ids)} frames, expected {expected_T}")
    if diff > 0:
        ids = np.concatenate([ids, np.full(diff, ids[-1])])
    elif diff < 0:
        if pairs[-1][1] < -diff:
            raise AlignmentError("truncation would remove more than the last phoneme")
        ids = ids[:expected_T]
    return PhonemeAlignment(ids, len(inventory))


def load_alignment(path, expected_T: int, inventory: PhonemeInventory = DEFAULT_INVENTORY) -> PhonemeAlignment:
    return expand_alignment(parse_alignment(Path(path).read_text()), expected_T, inventory)


def uniform_alignment(
    symbols: Sequence[str], T: int, inventory: PhonemeInventory = DEFAULT_INVENTORY
) -> list[tuple[str, int]]:
    """Spread ``symbols`` over ``T`` frames with near-equal durations."""
    if len(symbols) == 0 or T < len(symbols):
        raise InvalidInputError("need at least one frame per phoneme")
    bounds = np.linspace(0, T, len(symbols) + 1).round().astype(int)
    for s in symbols:
        inventory.id(s)
    return [(s, int(b - a)) for s, a, b in zip(symbols, bounds[:-1], bounds[1:])]


# ---------------------------------------------------------------------------
# speaker statistics
# ---------------------------------------------------------------------------

SIGMA_FLOOR = 1e-4


def compute_speaker_f0_stats(tracks: Iterable[np.ndarray]) -> tuple[float, float]:
    voiced = [np.asarray(t, dtype=np.float64) for t in tracks]
    voiced = np.concatenate([t[t > 0] for t in voiced]) if voiced else np.zeros(0)
    if voiced.size == 0:
        raise InsufficientDataError("no voiced frames to compute log-F0 statistics")
    logf = np.log(voiced)
    return float(logf.mean()), float(max(logf.std(), SIGMA_FLOOR))


@dataclass
class SpeakerProfile:
    speaker_id: str
    log_f0_mean: float
    log_f0_std: float
    reference_utterances: list[str] = field(default_factory=list)
    gender: str | None = None

    def __post_init__(self):
        if not self.log_f0_std > 0:
            raise InvalidInputError("log_f0_std must be positive")

    @property
    def stats(self) -> tuple[float, float]:
        return self.log_f0_mean, self.log_f0_std

    def to_dict(self) -> dict:
        return {
            "speaker_id": self.speaker_id,
            "log_f0_mean": self.log_f0_mean,
            "log_f0_std": self.log_f0_std,
            "reference_utterances": list(self.reference_utterances),
            "gender": self.gender,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SpeakerProfile":
        return cls(
            d["speaker_id"],
            float(d["log_f0_mean"]),
            float(d["log_f0_std"]),
            list(d.get("reference_utterances", [])),
            d.get("gender"),
        )


# ---------------------------------------------------------------------------
# I/O and trimming
# ---------------------------------------------------------------------------

def trim_silence(audio: np.ndarray, top_db: float = TRIM_DB, block: int = HOP_LENGTH) -> tuple[np.ndarray, int, int]:
    """Cut leading/trailing hop-sized blocks whose RMS is ``top_db`` below
    the loudest block. Returns ``(trimmed, start, end)`` sample indices;
    ``start`` is always a multiple of ``block``."""
    audio = np.asarray(audio, dtype=np.float64)
    n_blocks = -(-len(audio) // block)
    padded = np.pad(audio, (0, n_blocks * block - len(audio)))
    rms = np.sqrt(np.mean(padded.reshape(n_blocks, block) ** 2, axis=1))
    peak = rms.max() if rms.size else 0.0
    if peak <= 0:
        return audio, 0, len(audio)
    loud = np.flatnonzero(20 * np.log10(np.maximum(rms, 1e-300) / peak) > -top_db)
    start = int(loud[0]) * block
    end = min(len(audio), (int(loud[-1]) + 1) * block)
    return audio[start:end], start, end


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a WAV file as float64 in [-1, 1]."""
    sr, data = wavfile.read(str(path))
    if data.ndim > 1:
        data = data.mean(axis=1)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max + 1)
    return data.astype(np.float64), int(sr)


def write_wav(path, audio: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write 16-bit PCM."""
    pcm = np.clip(np.asarray(audio) * 32768.0, -32768, 32767).astype(np.int16)
    wavfile.write(str(path), sample_rate, pcm)
