"""Scalar training objectives.

Every function accepts tensors or array-likes and returns a 0-dim tensor so
it can sit directly in an autograd graph. Optional ``mask`` arguments are
``(B, T)`` frame masks for padded batches; masked frames contribute nothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InsufficientDataError, InvalidInputError, StateError
from .features import MelSpectrogram

PROB_FLOOR = 1e-12


def _t(x) -> torch.Tensor:
    if isinstance(x, MelSpectrogram):
        if not x.standardized:
            raise StateError("losses operate on standardized spectrograms")
        x = x.values
    if isinstance(x, torch.Tensor):
        return x
    # array-likes are promoted to float64 so hand-computed values stay exact
    return torch.as_tensor(x, dtype=torch.float64)


def _masked_mean(x: torch.Tensor, mask) -> torch.Tensor:
    if mask is None:
        return x.mean()
    mask = _t(mask).to(x.dtype)
    while mask.dim() < x.dim():
        mask = mask.unsqueeze(-2)
    mask = mask.expand_as(x)
    return (x * mask).sum() / mask.sum()


@dataclass
class LossWeights:
    lambda_f0: float = 0.0
    lambda_adv: float = 1.0
    lambda_ctr: float = 1.0
    lambda_se: float = 1.0

    def __post_init__(self):
        for name in ("lambda_f0", "lambda_adv", "lambda_ctr", "lambda_se"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InvalidInputError(f"{name} must be finite and non-negative, got {v}")


def f0_loss(target, predicted, mask=None) -> torch.Tensor:
    """Mean squared F0 difference in Hz^2; unvoiced frames count with value 0."""
    target, predicted = _t(target), _t(predicted)
    if target.shape != predicted.shape:
        raise InvalidInputError(f"F0 track shapes differ: {tuple(target.shape)} vs {tuple(predicted.shape)}")
    if target.shape[-1] < 1:
        raise InvalidInputError("F0 tracks must have at least one frame")
    return _masked_mean((target - predicted) ** 2, mask)


def reconstruction_loss(a, a_hat, mask=None) -> torch.Tensor:
    """Mean absolute error over all Mel cells."""
    a, a_hat = _t(a), _t(a_hat)
    if a.shape != a_hat.shape:
        raise InvalidInputError(f"spectrogram shapes differ: {tuple(a.shape)} vs {tuple(a_hat.shape)}")
    return _masked_mean((a - a_hat).abs(), mask)


def _contrastive_single(h_audio: torch.Tensor, h_text: torch.Tensor, temperature: float) -> torch.Tensor:
    a = F.normalize(h_audio, dim=0)
    b = F.normalize(h_text, dim=0)
    logits = a.T @ b / temperature
    labels = torch.arange(logits.shape[0])
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def contrastive_loss(h_audio, h_text, temperature: float = 0.1, lengths=None) -> torch.Tensor:
    """Frame-wise symmetric InfoNCE between the two content paths.

    For frame ``t`` the positive is the other path's frame ``t``; the
    negatives are the remaining frames of the same utterance. Accepts
    ``(C, T)`` or batched ``(B, C, T)`` inputs (with ``lengths`` for padding).
    """
    h_audio, h_text = _t(h_audio), _t(h_text)
    if h_audio.shape != h_text.shape:
        raise InvalidInputError("content embeddings must have equal shapes")
    if not temperature > 0:
        raise InvalidInputError("temperature must be positive")
    if h_audio.dim() == 2:
        h_audio, h_text = h_audio[None], h_text[None]
    B, _, T = h_audio.shape
    lens = [T] * B if lengths is None else [int(n) for n in lengths]
    if min(lens) < 2:
        raise InsufficientDataError("contrastive loss needs at least two frames for negatives")
    terms = [_contrastive_single(h_audio[i, :, :n], h_text[i, :, :n], temperature) for i, n in enumerate(lens)]
    return torch.stack(terms).mean()


def speaker_class_loss(probs, true_id) -> torch.Tensor:
    """-log p(true speaker), probability floored at 1e-12; batch mean."""
    probs = _t(probs)
    ids = torch.as_tensor(true_id, dtype=torch.long)
    if probs.dim() == 1:
        probs, ids = probs[None], ids.reshape(1)
    K = probs.shape[-1]
    if bool((ids < 0).any()) or bool((ids >= K).any()):
        raise InvalidInputError(f"speaker index out of range [0, {K})")
    picked = probs.gather(1, ids[:, None])[:, 0]
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def adversarial_d_loss(logit_real, logit_fake) -> torch.Tensor:
    """Least-squares discriminator objective, real -> 1, fake -> 0."""
    logit_real, logit_fake = _t(logit_real), _t(logit_fake)
    return 0.5 * (((logit_real - 1) ** 2).mean() + (logit_fake**2).mean())


def adversarial_g_loss(logit_fake) -> torch.Tensor:
    return 0.5 * ((_t(logit_fake) - 1) ** 2).mean()


def generator_total_loss(l_rc, l_adv_g, l_f0, l_ctr, l_se, w: LossWeights):
    return l_rc + w.lambda_adv * l_adv_g + w.lambda_f0 * l_f0 + w.lambda_ctr * l_ctr + w.lambda_se * l_se
