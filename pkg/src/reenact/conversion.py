"""Inference-time voice reenactment.

Content and F0 come from the source utterance, the speaker code from one
reference utterance of the target; the decoder output keeps the source
timing frame for frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .errors import InvalidInputError, InvalidStatsError
from .features import (
    N_MELS,
    MelSpectrogram,
    SpeakerProfile,
    Standardizer,
    apply_standardizer,
    compute_mel,
    compute_speaker_f0_stats,
    istft,
    mel_filterbank,
    stft,
)
from .model import CodeBundle, VoiceReenactor, decode, encode_content, encode_f0, encode_speaker

F0_MODES = ("transfer", "transfer_normalized", "explicit")
GRIFFIN_LIM_ITERS = 60


def adapt_f0_range(src, src_stats: tuple[float, float], tgt_stats: tuple[float, float]) -> np.ndarray:
    """Move voiced frames from the source's log-F0 distribution onto the
    target's; unvoiced frames stay exactly 0."""
    (mu_s, sigma_s), (mu_t, sigma_t) = src_stats, tgt_stats
    if not (sigma_s > 0 and sigma_t > 0):
        raise InvalidStatsError("log-F0 standard deviations must be positive")
    src = np.asarray(src, dtype=np.float64)
    out = np.zeros_like(src)
    voiced = src > 0
    out[voiced] = np.exp((np.log(src[voiced]) - mu_s) / sigma_s * sigma_t + mu_t)
    return out


Signal = Union[np.ndarray, MelSpectrogram]


@dataclass
class ConversionRequest:
    source: Signal  # waveform at ``sample_rate`` or a standardized Mel
    target_profile: SpeakerProfile
    target_reference: Signal
    f0_mode: str = "transfer_normalized"
    explicit_f0: Optional[np.ndarray] = None
    # source-speaker corpus statistics; the input track's own stats otherwise
    source_stats: Optional[tuple[float, float]] = None
    sample_rate: int = 16000

    def __post_init__(self):
        if self.f0_mode not in F0_MODES:
            raise InvalidInputError(f"f0_mode must be one of {F0_MODES}")
        if self.f0_mode == "explicit" and self.explicit_f0 is None:
            raise InvalidInputError("explicit f0_mode needs an explicit_f0 track")


def _as_mel(sig: Signal, standardizer: Optional[Standardizer], rate: int) -> MelSpectrogram:
    if isinstance(sig, MelSpectrogram):
        if sig.standardized:
            return sig
        mel = sig
    else:
        mel = compute_mel(sig, rate)
    if standardizer is None:
        raise InvalidInputError("a standardizer is required for unstandardized inputs")
    return apply_standardizer(mel, standardizer, "forward")


def conditioning_track(req: ConversionRequest, source_mel: MelSpectrogram, model: VoiceReenactor) -> np.ndarray:
    if req.f0_mode == "explicit":
        track = np.asarray(req.explicit_f0, dtype=np.float64)
        if track.shape != (source_mel.T,):
            raise InvalidInputError(f"explicit F0 track has length {len(track)}, source has {source_mel.T} frames")
        return track
    track = encode_f0(source_mel, model)
    if req.f0_mode == "transfer" or not (track > 0).any():
        return track
    src_stats = req.source_stats or compute_speaker_f0_stats([track])
    return adapt_f0_range(track, src_stats, req.target_profile.stats)


def build_codes(
    req: ConversionRequest, model: VoiceReenactor, standardizer: Optional[Standardizer] = None
) -> tuple[MelSpectrogram, CodeBundle]:
    source = _as_mel(req.source, standardizer, req.sample_rate)
    reference = _as_mel(req.target_reference, standardizer, req.sample_rate)
    codes = CodeBundle(
        content=encode_content(source, model),
        speaker=encode_speaker(reference, model),
        f0=conditioning_track(req, source, model),
    )
    return source, codes


def convert(req: ConversionRequest, model: VoiceReenactor, standardizer: Optional[Standardizer] = None) -> MelSpectrogram:
    """Converted (standardized) Mel with the source's frame count."""
    _, codes = build_codes(req, model, standardizer)
    return decode(codes, model)


def render_waveform(
    mel: MelSpectrogram, s: Standardizer, n_iter: int = GRIFFIN_LIM_ITERS, seed: int = 0
) -> np.ndarray:
    """Griffin-Lim rendering of a standardized Mel; ``(T - 1) * 200`` samples."""
    if not mel.standardized:
        raise InvalidInputError("render_waveform expects a standardized Mel")
    log_mel = apply_standardizer(mel, s, "inverse").values
    mag = np.maximum(np.linalg.pinv(mel_filterbank()) @ np.exp(log_mel), 0.0)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    audio = istft(mag * phase)
    for _ in range(n_iter):
        spec = stft(audio)
        if spec.shape[1] != mag.shape[1]:
            raise AssertionError("frame count drifted during phase reconstruction")
        phase = np.exp(1j * np.angle(spec))
        audio = istft(mag * phase)
    return audio


# binary Mel matrix: 8-byte magic, uint32 rows, uint32 cols, float32 row-major
MEL_MAGIC = b"RNACTMEL"


def write_mel_file(path, mel: MelSpectrogram) -> None:
    v = np.ascontiguousarray(mel.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MEL_MAGIC + struct.pack("<II", *v.shape))
        fh.write(v.tobytes())


def read_mel_file(path, standardized: bool = True) -> MelSpectrogram:
    raw = Path(path).read_bytes()
    if raw[:8] != MEL_MAGIC:
        raise InvalidInputError(f"{path}: not a Mel matrix file")
    rows, cols = struct.unpack("<II", raw[8:16])
    if rows != N_MELS or len(raw) != 16 + 4 * rows * cols:
        raise InvalidInputError(f"{path}: corrupt Mel matrix file")
    values = np.frombuffer(raw[16:], dtype="<f4").reshape(rows, cols)
    return MelSpectrogram(values.astype(np.float64), standardized=standardized)
