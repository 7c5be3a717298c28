"""Objective evaluation: F0 RMSE, time-synchrony checks and a
classifier-based speaker-similarity proxy.

The speaker proxy is *not* a substitute for a listening test; it only
reports how often the model's own speaker classifier attributes a converted
utterance to the intended target.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigurationError, InvalidInputError
from .features import MelSpectrogram

PAIR_TYPES = ("M-to-M", "F-to-F", "M-to-F", "F-to-M")


def _tracks(reference, measured) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(measured, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"F0 track lengths differ: {a.shape} vs {b.shape}")
    return a, b


def f0_rmse(reference, measured, warn: bool = True) -> float:
    """RMSE in Hz over frames voiced in *both* tracks (0 if there are none)."""
    a, b = _tracks(reference, measured)
    both = (a > 0) & (b > 0)
    if not both.any():
        if warn:
            warnings.warn("no co-voiced frames; F0 RMSE reported as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.sqrt(np.mean((a[both] - b[both]) ** 2)))


def f0_rmse_inclusive(reference, measured) -> float:
    """RMSE over all frames, unvoiced frames counted as 0 Hz."""
    a, b = _tracks(reference, measured)
    if a.size == 0:
        return 0.0
    return float(np.sqrt(np.mean((a - b) ** 2)))


def check_time_sync(source: MelSpectrogram, converted: MelSpectrogram) -> bool:
    return converted.T == source.T


def speaker_similarity_proxy(converted: Iterable[MelSpectrogram], target_id, model, speaker_index: Optional[dict] = None) -> float:
    """Share of ``converted`` whose classifier argmax is the target speaker.

    ``target_id`` is a class index, or a speaker name resolved through
    ``speaker_index``.
    """
    from .model import classify_speaker, encode_speaker

    n_classes = model.cfg.n_speakers
    if isinstance(target_id, str):
        if not speaker_index or target_id not in speaker_index:
            raise ConfigurationError(f"unknown target speaker {target_id!r}")
        target_id = speaker_index[target_id]
    if not 0 <= int(target_id) < n_classes:
        raise ConfigurationError(f"target index {target_id} outside the classifier's {n_classes} speakers")
    mels = list(converted)
    if not mels:
        warnings.warn("empty conversion set; speaker proxy accuracy defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    hits = sum(int(np.argmax(classify_speaker(encode_speaker(m, model), model)) == int(target_id)) for m in mels)
    return hits / len(mels)


def pair_type(src_gender: Optional[str], tgt_gender: Optional[str]) -> Optional[str]:
    if src_gender in ("M", "F") and tgt_gender in ("M", "F"):
        return f"{src_gender}-to-{tgt_gender}"
    return None


@dataclass
class EvalReport:
    system: str
    f0_rmse: dict[str, float] = field(default_factory=dict)  # pair label -> Hz (co-voiced)
    f0_rmse_inclusive: dict[str, float] = field(default_factory=dict)
    pair_types: dict[str, Optional[str]] = field(default_factory=dict)
    sync_pass: int = 0
    sync_fail: int = 0
    speaker_proxy_accuracy: dict[str, float] = field(default_factory=dict)
    n_utterances: int = 0
    config_hash: str = ""
    checkpoint_id: str = ""
    seed: Optional[int] = None
    toolkit_version: str = ""

    def __post_init__(self):
        if any(v < 0 for v in self.f0_rmse.values()):
            raise InvalidInputError("F0 RMSE cannot be negative")
        if self.sync_pass + self.sync_fail != self.n_utterances:
            raise InvalidInputError("time-sync counts do not add up to the evaluated set size")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def format_table(reports: Iterable[EvalReport]) -> str:
    """Rows are systems, columns are gender pair types; each cell is the mean
    co-voiced F0 RMSE (Hz) of that system's pairs of that type."""
    reports = list(reports)
    width = max([len("VC system")] + [len(r.system) for r in reports])
    lines = ["F0 RMSE (Hz), co-voiced frames", f"{'VC system':<{width}} | " + " | ".join(f"{c:>7}" for c in PAIR_TYPES)]
    lines.append("-" * len(lines[-1]))
    for r in reports:
        cells = []
        for col in PAIR_TYPES:
            vals = [v for k, v in r.f0_rmse.items() if r.pair_types.get(k) == col]
            cells.append(f"{np.mean(vals):7.3f}" if vals else f"{'-':>7}")
        lines.append(f"{r.system:<{width}} | " + " | ".join(cells))
    return "\n".join(lines)
