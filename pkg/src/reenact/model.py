"""Networks of the time-synchronous voice reenactment model.

Tensor layout inside the modules is batch-first with Mel matrices as
``(B, n_mels, T)`` and frame tracks as ``(B, T)``; every module takes an
optional ``lengths`` vector for padded batches. The functions at the bottom
of the file (``encode_content``, ``decode`` ...) wrap the modules for single
utterances expressed as :mod:`reenact.features` domain objects.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn.utils.parametrizations import spectral_norm
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .errors import InputTooShortError, InvalidInputError, StateError
from .features import F0_MAX, F0_MIN, MelSpectrogram, PhonemeAlignment, mel_center_frequencies

VOICING_THRESHOLD = 0.5
LEAK = 0.2
DISC_MIN_FRAMES = 16


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 80
    n_phonemes: int = 72
    n_speakers: int = 2
    content_dim: int = 128
    rnn_hidden: int = 128
    speaker_dim: int = 128
    speaker_channels: int = 128
    f0_channels: int = 32
    f0_hidden: int = 128
    disc_channels: int = 128
    disc_spectral_norm: bool = True

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        """Narrower layers for desk-scale runs; same topology."""
        base = dict(
            content_dim=64, rnn_hidden=64, speaker_dim=64, speaker_channels=64,
            f0_hidden=64, disc_channels=32,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _run_rnn(rnn: nn.LSTM, x: torch.Tensor, lengths: Optional[torch.Tensor]) -> torch.Tensor:
    """Run a batch-first LSTM, packing when the batch is ragged so the
    backward direction never sees padding."""
    T = x.shape[1]
    if lengths is None or bool((lengths == T).all()):
        return rnn(x)[0]
    packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
    out, _ = rnn(packed)
    return pad_packed_sequence(out, batch_first=True, total_length=T)[0]


def _frame_mask(lengths: Optional[torch.Tensor], T: int, like: torch.Tensor) -> torch.Tensor:
    if lengths is None:
        return torch.ones(like.shape[0], T, dtype=like.dtype, device=like.device)
    return (torch.arange(T, device=like.device)[None, :] < lengths[:, None]).to(like.dtype)


def hz_to_mel_t(f: torch.Tensor) -> torch.Tensor:
    return 2595.0 * torch.log10(1.0 + f / 700.0)


def mel_to_hz_t(m: torch.Tensor) -> torch.Tensor:
    return 700.0 * (10.0 ** (m / 2595.0) - 1.0)


def _halve(lengths: torch.Tensor) -> torch.Tensor:
    return torch.div(lengths + 1, 2, rounding_mode="floor")


class ContentAudioEncoder(nn.Module):
    """Mel -> 2 x BiLSTM -> frame-wise affine, T preserved."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.rnn = nn.LSTM(cfg.n_mels, cfg.rnn_hidden, num_layers=2, bidirectional=True, batch_first=True)
        self.proj = nn.Linear(2 * cfg.rnn_hidden, cfg.content_dim)

    def forward(self, mel: torch.Tensor, lengths=None) -> torch.Tensor:
        h = _run_rnn(self.rnn, mel.transpose(1, 2), lengths)
        return self.proj(h).transpose(1, 2)


class ContentTextEncoder(nn.Module):
    """Phoneme ids -> embedding table -> 2 x BiLSTM -> frame-wise affine."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.n_phonemes, cfg.content_dim)
        self.rnn = nn.LSTM(cfg.content_dim, cfg.rnn_hidden, num_layers=2, bidirectional=True, batch_first=True)
        self.proj = nn.Linear(2 * cfg.rnn_hidden, cfg.content_dim)

    def forward(self, ids: torch.Tensor, lengths=None) -> torch.Tensor:
        h = _run_rnn(self.rnn, self.embed(ids), lengths)
        return self.proj(h).transpose(1, 2)


class SpeakerEncoder(nn.Module):
    """3 strided convolutions, one BiLSTM, masked mean over time."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.speaker_channels
        self.convs = nn.ModuleList(
            [nn.Conv1d(cfg.n_mels if i == 0 else c, c, 3, stride=2, padding=1) for i in range(3)]
        )
        self.rnn = nn.LSTM(c, cfg.rnn_hidden, num_layers=1, bidirectional=True, batch_first=True)
        self.proj = nn.Linear(2 * cfg.rnn_hidden, cfg.speaker_dim)

    def forward(self, mel: torch.Tensor, lengths=None) -> torch.Tensor:
        x = mel
        for conv in self.convs:
            x = nn.functional.leaky_relu(conv(x), LEAK)
            if lengths is not None:
                lengths = _halve(lengths)
        h = _run_rnn(self.rnn, x.transpose(1, 2), lengths)
        mask = _frame_mask(lengths, h.shape[1], h)
        pooled = (h * mask[..., None]).sum(1) / mask.sum(1, keepdim=True)
        return self.proj(pooled)


class SpeakerClassifier(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.head = nn.Linear(cfg.speaker_dim, cfg.n_speakers)

    def forward(self, h_s: torch.Tensor) -> torch.Tensor:
        """Unnormalized scores; softmax gives the speaker posterior."""
        return self.head(h_s)


class F0Encoder(nn.Module):
    """4 convolutions over the (Mel, time) plane + 1 BiLSTM, two heads.

    Pitch head: a per-bin score map, soft-maxed over the Mel bins whose
    centres cover the pitch range, read out as the expected Mel position
    (so one learned peak detector serves every pitch). Voicing head: the
    BiLSTM over frequency-pooled conv features.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.f0_channels
        self.convs = nn.ModuleList(
            [nn.Conv2d(1 if i == 0 else c, c, 3, padding=1, padding_mode="replicate") for i in range(4)]
        )
        self.score = nn.Conv2d(c, 1, 1)
        self.rnn = nn.LSTM(2 * c, cfg.f0_hidden, num_layers=1, bidirectional=True, batch_first=True)
        self.voicing = nn.Linear(2 * cfg.f0_hidden, 1)
        centers = torch.as_tensor(mel_center_frequencies(cfg.n_mels), dtype=torch.float32)
        band = (centers >= 0.8 * F0_MIN) & (centers <= 1.2 * F0_MAX)
        lo, hi = int(band.nonzero().min()), int(band.nonzero().max())
        self.pitch_bins = (max(lo - 1, 0), min(hi + 2, cfg.n_mels))
        # bins above ~2 kHz carry no pitch information the head can use
        self.n_bins_in = min(cfg.n_mels, self.pitch_bins[1] + 16)
        self.register_buffer("bin_mels", hz_to_mel_t(centers[self.pitch_bins[0] : self.pitch_bins[1]]), persistent=False)

    def forward(self, mel: torch.Tensor, lengths=None) -> tuple[torch.Tensor, torch.Tensor]:
        x = mel[:, None, : self.n_bins_in]
        for conv in self.convs:
            x = nn.functional.leaky_relu(conv(x), LEAK)
        lo, hi = self.pitch_bins
        p = torch.softmax(self.score(x)[:, 0, lo:hi], dim=1)  # (B, bins, T)
        pos = (p * self.bin_mels.to(p.dtype)[None, :, None]).sum(1)
        value = mel_to_hz_t(pos).clamp(F0_MIN, F0_MAX)
        pooled = torch.cat([x.mean(2), x.amax(2)], dim=1).transpose(1, 2)
        logit = self.voicing(_run_rnn(self.rnn, pooled, lengths))[..., 0]
        return value, logit

    def track(self, mel: torch.Tensor, lengths=None) -> torch.Tensor:
        """Hard-gated F0 track: value where voicing >= 0.5, exact 0 elsewhere."""
        value, logit = self(mel, lengths)
        return torch.where(torch.sigmoid(logit) >= VOICING_THRESHOLD, value, torch.zeros_like(value))

    def soft_track(self, mel: torch.Tensor, lengths=None) -> torch.Tensor:
        """Value weighted by voicing probability; differentiable stand-in for
        :meth:`track` used inside the F0 loss."""
        value, logit = self(mel, lengths)
        return value * torch.sigmoid(logit)


def f0_conditioning(f0: torch.Tensor) -> torch.Tensor:
    return torch.log1p(f0)


class Decoder(nn.Module):
    """[content ; speaker ; log(1+F0)] per frame -> 2 x BiLSTM -> Mel."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.rnn = nn.LSTM(
            cfg.content_dim + cfg.speaker_dim + 1, cfg.rnn_hidden, num_layers=2, bidirectional=True, batch_first=True
        )
        self.proj = nn.Linear(2 * cfg.rnn_hidden, cfg.n_mels)

    def forward(self, content: torch.Tensor, speaker: torch.Tensor, f0: torch.Tensor, lengths=None) -> torch.Tensor:
        B, _, T = content.shape
        if f0.shape != (B, T):
            raise InvalidInputError(f"F0 track shape {tuple(f0.shape)} does not match content (B={B}, T={T})")
        x = torch.cat(
            [content.transpose(1, 2), speaker[:, None, :].expand(B, T, -1), f0_conditioning(f0)[..., None]], dim=-1
        )
        return self.proj(_run_rnn(self.rnn, x, lengths)).transpose(1, 2)


class Discriminator(nn.Module):
    """4 stride-2 3x3 convolutions over the (Mel, time) plane, masked global
    average, 1-unit head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.disc_channels
        # spectral normalization keeps the critic's input gradient on the
        # scale of the reconstruction gradient
        sn = spectral_norm if cfg.disc_spectral_norm else (lambda m: m)
        self.convs = nn.ModuleList([sn(nn.Conv2d(1 if i == 0 else c, c, 3, stride=2, padding=1)) for i in range(4)])
        self.head = sn(nn.Linear(c, 1))

    def feature_map(self, mel: torch.Tensor, lengths=None) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
        T = mel.shape[-1]
        if T < DISC_MIN_FRAMES or (lengths is not None and int(lengths.min()) < DISC_MIN_FRAMES):
            raise InputTooShortError(f"discriminator needs at least {DISC_MIN_FRAMES} frames")
        x = mel[:, None]
        for conv in self.convs:
            x = nn.functional.leaky_relu(conv(x), LEAK)
            if lengths is not None:
                lengths = _halve(lengths)
        return x, lengths

    def forward(self, mel: torch.Tensor, lengths=None) -> torch.Tensor:
        x, lengths = self.feature_map(mel, lengths)
        mask = _frame_mask(lengths, x.shape[-1], x)  # (B, T')
        pooled = (x * mask[:, None, None, :]).sum((2, 3)) / (mask.sum(1, keepdim=True) * x.shape[2])
        return self.head(pooled)[:, 0]


GENERATOR_COMPONENTS = ("content_audio", "content_text", "speaker_encoder", "speaker_classifier", "decoder")


class VoiceReenactor(nn.Module):
    """Container for every trainable component.

    ``frozen`` names the components whose parameters must not change;
    the F0 encoder is added to it once pre-trained.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        # default PyTorch initialization is uniform with fan-in scaling
        torch.manual_seed(seed)
        self.content_audio = ContentAudioEncoder(cfg)
        self.content_text = ContentTextEncoder(cfg)
        self.speaker_encoder = SpeakerEncoder(cfg)
        self.speaker_classifier = SpeakerClassifier(cfg)
        self.f0_encoder = F0Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.discriminator = Discriminator(cfg)
        self.frozen: set[str] = set()

    def freeze(self, component: str) -> None:
        for p in getattr(self, component).parameters():
            p.requires_grad_(False)
        self.frozen.add(component)

    def generator_parameters(self) -> list[nn.Parameter]:
        return [p for name in GENERATOR_COMPONENTS for p in getattr(self, name).parameters()]

    def named_tensors(self) -> dict[str, torch.Tensor]:
        """Parameters keyed as ``component/layer/tensor``."""
        out = {}
        for key, value in self.state_dict().items():
            parts = key.split(".")
            out[f"{parts[0]}/{'.'.join(parts[1:-1]) or '-'}/{parts[-1]}"] = value
        return out

    def load_named_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        state = {}
        for name, value in tensors.items():
            comp, layer, tensor = name.split("/")
            key = ".".join([comp] + ([] if layer == "-" else [layer]) + [tensor])
            state[key] = value
        self.load_state_dict(state)

    def frozen_flags(self) -> dict[str, bool]:
        return {name: name in self.frozen for name, _ in self.named_children()}


# ---------------------------------------------------------------------------
# single-utterance API over domain objects
# ---------------------------------------------------------------------------

@dataclass
class ContentEmbedding:
    values: np.ndarray  # (content_dim, T)

    @property
    def T(self) -> int:
        return self.values.shape[1]


@dataclass
class SpeakerEmbedding:
    values: np.ndarray  # (speaker_dim,)


@dataclass
class CodeBundle:
    content: ContentEmbedding
    speaker: SpeakerEmbedding
    f0: np.ndarray

    def __post_init__(self):
        self.f0 = np.asarray(self.f0, dtype=np.float64)
        if self.f0.shape != (self.content.T,):
            raise InvalidInputError(f"F0 track length {len(self.f0)} != content length {self.content.T}")


def _param_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def _mel_tensor(mel: MelSpectrogram, model: nn.Module) -> torch.Tensor:
    if not mel.standardized:
        raise StateError("model inputs must be standardized Mel spectrograms")
    return torch.as_tensor(mel.values, dtype=_param_dtype(model))[None]


def _numpy(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().double().numpy()


@torch.no_grad()
def encode_content(inp: MelSpectrogram | PhonemeAlignment, model: VoiceReenactor) -> ContentEmbedding:
    if isinstance(inp, PhonemeAlignment):
        ids = torch.as_tensor(inp.ids, dtype=torch.long)[None]
        return ContentEmbedding(_numpy(model.content_text(ids))[0])
    return ContentEmbedding(_numpy(model.content_audio(_mel_tensor(inp, model)))[0])


@torch.no_grad()
def encode_speaker(mel: MelSpectrogram, model: VoiceReenactor) -> SpeakerEmbedding:
    return SpeakerEmbedding(_numpy(model.speaker_encoder(_mel_tensor(mel, model)))[0])


@torch.no_grad()
def classify_speaker(h_s: SpeakerEmbedding, model: VoiceReenactor) -> np.ndarray:
    x = torch.as_tensor(h_s.values, dtype=_param_dtype(model))[None]
    return _numpy(torch.softmax(model.speaker_classifier(x), dim=-1))[0]


@torch.no_grad()
def encode_f0(mel: MelSpectrogram, model: VoiceReenactor) -> np.ndarray:
    return _numpy(model.f0_encoder.track(_mel_tensor(mel, model)))[0]


@torch.no_grad()
def decode(codes: CodeBundle, model: VoiceReenactor) -> MelSpectrogram:
    dt = _param_dtype(model)
    out = model.decoder(
        torch.as_tensor(codes.content.values, dtype=dt)[None],
        torch.as_tensor(codes.speaker.values, dtype=dt)[None],
        torch.as_tensor(codes.f0, dtype=dt)[None],
    )
    return MelSpectrogram(_numpy(out)[0], standardized=True)


@torch.no_grad()
def discriminate(mel: MelSpectrogram, model: VoiceReenactor) -> float:
    return float(model.discriminator(_mel_tensor(mel, model))[0])
