"""Utterance records, batching, the train/validation split and a synthetic
multi-speaker corpus generator for desk-scale runs.

The synthetic voices are additive harmonic sources shaped by per-phoneme
formant envelopes (vowels, nasals), band-passed noise (fricatives) and
silence. Speakers differ in pitch register and vocal-tract scaling, which is
enough for a speaker classifier and an F0 tracker to have something to learn.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from scipy.signal import butter, sosfilt

from .errors import InvalidInputError
from .features import (
    DEFAULT_INVENTORY,
    HOP_LENGTH,
    SAMPLE_RATE,
    MelSpectrogram,
    PhonemeInventory,
    Standardizer,
    apply_standardizer,
    compute_mel,
    expand_alignment,
    extract_f0_oracle,
    fit_standardizer,
    format_alignment,
    num_frames,
    resample,
    trim_silence,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# records and batches
# ---------------------------------------------------------------------------

@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    mel: np.ndarray  # (80, T), standardized for anything fed to the model
    f0: np.ndarray  # oracle track, (T,)
    phonemes: np.ndarray  # (T,)
    split: str = "train"

    @property
    def T(self) -> int:
        return self.mel.shape[1]


def featurize(audio: np.ndarray, sample_rate: int, pairs, inventory: PhonemeInventory = DEFAULT_INVENTORY, trim=True):
    """Trim, then compute (unstandardized Mel, oracle F0, frame phoneme ids).

    ``pairs`` is the (symbol, frames) alignment of the *untrimmed* audio; the
    trimmed region is cut out of it at frame resolution.
    """
    audio = resample(np.asarray(audio, dtype=np.float64), sample_rate)
    full_T = num_frames(len(audio))
    ids = expand_alignment(pairs, full_T, inventory).ids
    if trim:
        audio, start, _ = trim_silence(audio)
        offset = start // HOP_LENGTH
    else:
        offset = 0
    mel = compute_mel(audio)
    ids = ids[offset : offset + mel.T]
    f0 = extract_f0_oracle(audio)
    assert len(ids) == mel.T == len(f0)
    return mel.values, f0, ids


@dataclass
class Batch:
    mel: torch.Tensor  # (B, 80, T)
    f0: torch.Tensor  # (B, T) oracle
    phonemes: torch.Tensor  # (B, T)
    lengths: torch.Tensor  # (B,)
    speakers: torch.Tensor  # (B,) class indices
    speaker_ids: list[str]
    utt_ids: list[str]

    @property
    def mask(self) -> torch.Tensor:
        T = self.mel.shape[-1]
        return (torch.arange(T)[None, :] < self.lengths[:, None]).to(self.mel.dtype)


def collate(utts: Sequence[Utterance], speaker_index: dict[str, int], dtype=torch.float32) -> Batch:
    """Zero-pad to the longest item; the mask excludes padding from losses."""
    T = max(u.T for u in utts)
    n_mels = utts[0].mel.shape[0]
    mel = torch.zeros(len(utts), n_mels, T, dtype=dtype)
    f0 = torch.zeros(len(utts), T, dtype=dtype)
    ph = torch.zeros(len(utts), T, dtype=torch.long)
    for i, u in enumerate(utts):
        mel[i, :, : u.T] = torch.as_tensor(u.mel, dtype=dtype)
        f0[i, : u.T] = torch.as_tensor(u.f0, dtype=dtype)
        ph[i, : u.T] = torch.as_tensor(u.phonemes)
    return Batch(
        mel=mel,
        f0=f0,
        phonemes=ph,
        lengths=torch.tensor([u.T for u in utts]),
        speakers=torch.tensor([speaker_index[u.speaker_id] for u in utts]),
        speaker_ids=[u.speaker_id for u in utts],
        utt_ids=[u.utt_id for u in utts],
    )


def validation_count(n: int) -> int:
    return 0 if n < 2 else max(1, int(round(0.1 * n)))


def split_train_val(utt_ids_by_speaker: dict[str, list[str]], seed: int = 0) -> dict[str, str]:
    """90/10 split per speaker; returns ``{utt_id: "train" | "val"}``."""
    rng = np.random.default_rng(seed)
    labels = {}
    for spk in sorted(utt_ids_by_speaker):
        ids = sorted(utt_ids_by_speaker[spk])
        order = rng.permutation(len(ids))
        n_val = validation_count(len(ids))
        for rank, j in enumerate(order):
            labels[ids[j]] = "val" if rank < n_val else "train"
    return labels


def group_by_speaker(utts: Iterable[Utterance]) -> dict[str, list[Utterance]]:
    out: dict[str, list[Utterance]] = {}
    for u in utts:
        out.setdefault(u.speaker_id, []).append(u)
    return out


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpeaker:
    speaker_id: str
    gender: str
    base_f0: float
    formant_scale: float
    tilt: float = 1.0


# named after the four VCTK voices used in the listening test
DEFAULT_SPEAKERS = (
    SyntheticSpeaker("p232", "M", 110.0, 1.00, 1.0),
    SyntheticSpeaker("p274", "M", 128.0, 0.95, 1.2),
    SyntheticSpeaker("p253", "F", 205.0, 1.18, 0.8),
    SyntheticSpeaker("p300", "F", 235.0, 1.12, 1.0),
)

_VOWEL_FORMANTS = {
    "iy": (270, 2290, 3010), "ih": (390, 1990, 2550), "eh": (530, 1840, 2480),
    "ae": (660, 1720, 2410), "ah": (520, 1190, 2390), "aa": (730, 1090, 2440),
    "ao": (570, 840, 2410), "uh": (440, 1020, 2240), "uw": (300, 870, 2240),
    "er": (490, 1350, 1690),
}
_NASAL_FORMANTS = {"m": (250, 1000, 2200), "n": (250, 1700, 2600)}
_FRICATIVE_BANDS = {"s": (4000, 7800), "sh": (2000, 6000), "f": (1200, 7000)}
_FORMANT_GAINS = np.array([1.0, 0.6, 0.3])
_BANDWIDTHS = np.array([90.0, 120.0, 160.0])


def _envelope(freqs: np.ndarray, formants: np.ndarray, tilt: float) -> np.ndarray:
    res = _FORMANT_GAINS / (1.0 + ((freqs[..., None] - formants) / _BANDWIDTHS) ** 2)
    return (0.02 + res.sum(-1)) / (1.0 + freqs / 1500.0) ** tilt


def synthesize_utterance(speaker: SyntheticSpeaker, rng: np.random.Generator, n_phones: Optional[int] = None):
    """Return ``(audio, alignment_pairs)`` at 16 kHz.

    The audio length is chosen so that its frame count equals the alignment
    total exactly.
    """
    voiced_set = list(_VOWEL_FORMANTS) + list(_NASAL_FORMANTS)
    n_phones = n_phones or int(rng.integers(5, 9))
    pairs = [("sil", int(rng.integers(6, 11)))]
    for i in range(n_phones):
        if i % 3 == 1 and rng.random() < 0.6:
            sym = str(rng.choice(list(_FRICATIVE_BANDS)))
            dur = int(rng.integers(5, 10))
        else:
            sym = str(rng.choice(voiced_set))
            dur = int(rng.integers(7, 15))
        pairs.append((sym, dur))
    pairs.append(("sil", int(rng.integers(6, 11))))
    T = sum(d for _, d in pairs)
    n = (T - 1) * HOP_LENGTH

    syms = np.concatenate([[s] * d for s, d in pairs])
    voiced = np.array([s in voiced_set for s in syms], dtype=np.float64)
    formants = np.array(
        [_VOWEL_FORMANTS.get(s) or _NASAL_FORMANTS.get(s) or (500, 1500, 2500) for s in syms], dtype=np.float64
    ) * speaker.formant_scale
    gain = np.where(np.isin(syms, list(_NASAL_FORMANTS)), 0.5, 1.0) * voiced

    # intonation: declination plus one random accent, in semitones
    pos = np.linspace(0.0, 1.0, T)
    accent_at, accent_h = rng.uniform(0.2, 0.8), rng.uniform(1.0, 3.0)
    semis = 1.5 - 3.0 * pos + accent_h * np.exp(-(((pos - accent_at) / 0.12) ** 2)) + rng.normal(0, 0.3)
    f0_frames = speaker.base_f0 * 2.0 ** (semis / 12.0)

    # smooth the articulation across segment boundaries
    kernel = np.ones(3) / 3
    formants = np.stack([np.convolve(np.pad(formants[:, i], 1, mode="edge"), kernel, "valid") for i in range(3)], 1)

    frame_pos = np.arange(T) * HOP_LENGTH
    samples = np.arange(n)
    f0_s = np.interp(samples, frame_pos, f0_frames)
    gain_s = np.interp(samples, frame_pos, gain)
    phase = 2 * np.pi * np.cumsum(f0_s) / SAMPLE_RATE

    audio = np.zeros(n)
    k_max = int(7600 // f0_frames.max())
    for k in range(1, k_max + 1):
        amp_frames = _envelope(k * f0_frames, formants, speaker.tilt)
        audio += np.interp(samples, frame_pos, amp_frames) * np.sin(k * phase)
    audio *= gain_s

    for sym, (lo, hi) in _FRICATIVE_BANDS.items():
        env = np.interp(samples, frame_pos, (syms == sym).astype(np.float64))
        if env.any():
            sos = butter(4, [lo, hi], btype="bandpass", fs=SAMPLE_RATE, output="sos")
            audio += 0.4 * env * sosfilt(sos, rng.standard_normal(n))

    audio = 0.5 * audio / max(np.abs(audio).max(), 1e-9)
    audio += 1e-4 * rng.standard_normal(n)
    return audio, pairs


def synthesize_sine(f0_hz: float, seconds: float = 1.0, amplitude: float = 0.5) -> np.ndarray:
    t = np.arange(int(seconds * SAMPLE_RATE)) / SAMPLE_RATE
    return amplitude * np.sin(2 * np.pi * f0_hz * t)


def write_synthetic_corpus(
    root, speakers: Sequence[SyntheticSpeaker] = DEFAULT_SPEAKERS, utts_per_speaker: int = 10, seed: int = 0
) -> Path:
    """VCTK-style tree: ``root/<speaker>/<speaker>_<nnn>.{wav,align}`` plus
    ``root/speaker-info.json`` with genders."""
    from .features import write_wav

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    info = {}
    for spk in speakers:
        d = root / spk.speaker_id
        d.mkdir(exist_ok=True)
        for i in range(utts_per_speaker):
            audio, pairs = synthesize_utterance(spk, rng)
            stem = f"{spk.speaker_id}_{i + 1:03d}"
            write_wav(d / f"{stem}.wav", audio)
            (d / f"{stem}.align").write_text(format_alignment(pairs) + "\n")
        info[spk.speaker_id] = {"gender": spk.gender}
    (root / "speaker-info.json").write_text(json.dumps(info, indent=1, sort_keys=True))
    return root


def synthetic_utterances(
    speakers: Sequence[SyntheticSpeaker], utts_per_speaker: int, seed: int = 0
) -> list[tuple[str, str, np.ndarray, list]]:
    """In-memory variant of :func:`write_synthetic_corpus`:
    ``[(utt_id, speaker_id, audio, pairs), ...]``."""
    rng = np.random.default_rng(seed)
    out = []
    for spk in speakers:
        for i in range(utts_per_speaker):
            audio, pairs = synthesize_utterance(spk, rng)
            out.append((f"{spk.speaker_id}_{i + 1:03d}", spk.speaker_id, audio, pairs))
    return out


def check_lengths(utts: Iterable[Utterance]) -> None:
    for u in utts:
        if not (u.mel.shape[1] == len(u.f0) == len(u.phonemes)):
            raise InvalidInputError(f"{u.utt_id}: feature lengths disagree")


def synthesize_pitch_sweep(
    rng: np.random.Generator, n_segments: int = 30, fmin: float = 70.0, fmax: float = 450.0
) -> np.ndarray:
    """Pure-tone training material for the F0 encoder: ``n_segments`` pieces,
    each a steady tone, a log-linear glide or a gap, at a random level;
    phase is continuous across tone pieces."""
    freq, amp = [], []
    lead = int(rng.integers(0, 12)) * HOP_LENGTH if rng.random() < 0.6 else 0
    freq.append(np.zeros(lead))
    amp.append(np.zeros(lead))
    for _ in range(n_segments):
        n = int(rng.integers(6, 15)) * HOP_LENGTH
        kind = rng.choice(["steady", "steady", "steady", "glide", "gap"])
        a, b = np.exp(rng.uniform(np.log(fmin), np.log(fmax), size=2))
        f = np.full(n, a) if kind != "glide" else np.exp(np.linspace(np.log(a), np.log(b), n))
        freq.append(f)
        amp.append(np.zeros(n) if kind == "gap" else np.full(n, rng.uniform(0.1, 0.7)))
    tail = int(rng.integers(0, 12)) * HOP_LENGTH if rng.random() < 0.6 else 0
    freq.append(np.zeros(tail))
    amp.append(np.zeros(tail))
    f, a = np.concatenate(freq), np.concatenate(amp)
    return a * np.sin(2 * np.pi * np.cumsum(f) / SAMPLE_RATE + rng.uniform(0, 2 * np.pi))


def build_utterances(items, splits: Optional[dict] = None) -> tuple[list[Utterance], Standardizer]:
    """Featurize ``[(utt_id, speaker_id, audio, pairs)]`` at 16 kHz, fit a
    standardizer on the training items and return standardized records."""
    splits = splits or {}
    feats = [(uid, spk, *featurize(audio, SAMPLE_RATE, pairs)) for uid, spk, audio, pairs in items]
    st = fit_standardizer(
        [MelSpectrogram(mel) for uid, _, mel, _, _ in feats if splits.get(uid, "train") == "train"],
        provenance="synthetic",
    )
    utts = [
        Utterance(uid, spk, apply_standardizer(MelSpectrogram(mel), st).values.astype(np.float32), f0, ids,
                  splits.get(uid, "train"))
        for uid, spk, mel, f0, ids in feats
    ]
    return utts, st


def pitch_sweep_utterances(n: int = 20, seed: int = 0) -> tuple[list[Utterance], Standardizer]:
    """The synthetic-pitch set for F0-encoder pre-training: ``n`` sweeps with
    oracle tracks, standardized on themselves."""
    rng = np.random.default_rng(seed)
    audios = [synthesize_pitch_sweep(rng) for _ in range(n)]
    mels = [compute_mel(a) for a in audios]
    st = fit_standardizer(mels, provenance="pitch-sweeps")
    utts = [
        Utterance(f"sweep_{i:03d}", "sweep", apply_standardizer(m, st).values.astype(np.float32),
                  extract_f0_oracle(a), np.zeros(m.T, dtype=np.int64))
        for i, (a, m) in enumerate(zip(audios, mels))
    ]
    return utts, st
