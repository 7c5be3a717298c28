"""Training stages: F0-encoder pre-training, dual-mode multi-speaker
pre-training and source/target fine-tuning, plus checkpoint I/O.

A dual-mode step decodes every batch item twice: once with its own codes
(reconstruction mode, scored against the input) and once with the speaker
code of another utterance (conversion mode, scored by the discriminator
and against its conditioning F0). The discriminator is updated first,
then the generator.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .data import Batch, Utterance, collate, group_by_speaker
from .errors import ConfigurationError, InvalidInputError, RegimeError
from .eval import f0_rmse
from .losses import (
    LossWeights,
    adversarial_d_loss,
    adversarial_g_loss,
    contrastive_loss,
    f0_loss,
    generator_total_loss,
    reconstruction_loss,
    speaker_class_loss,
)
from .model import ModelConfig, VoiceReenactor

logger = logging.getLogger(__name__)

REGIMES = ("same_id", "diff_id")
CHECKPOINT_FORMAT = 1


def _write_payload(payload: dict, path: Path) -> None:
    # torch names the zip root after the file; a buffer keeps the bytes path-independent
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())


@dataclass
class TrainConfig:
    total_steps: int = 1000
    batch_size: int = 4
    learning_rate: float = 1e-4
    lambda_adv: float = 1.0
    lambda_f0_start: float = 1e-6
    lambda_f0_end: float = 1e-2
    ramp_fraction: float = 0.8
    lambda_ctr: float = 1.0
    lambda_se: float = 1.0
    temperature: float = 0.1
    grad_clip: float = 5.0
    seed: int = 0
    discriminator_regime: str = "diff_id"
    # whether the discriminator / generator adversarial term also see
    # reconstructions; both off means conversions only
    d_on_reconstruction: bool = False
    adv_on_reconstruction: bool = False
    adapt_f0_in_conversion: bool = True
    f0_loss_on_conversion: bool = True
    checkpoint_every: int = 0
    # F0-encoder pre-training
    f0_steps: int = 1200
    f0_learning_rate: float = 3e-3
    f0_batch_size: int = 4
    # pair fine-tuning
    finetune_steps: int = 200
    finetune_contrastive: bool = True
    finetune_speaker_loss: bool = True

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """Desk-scale preset: a few hundred steps on a handful of utterances.

        The F0 weight ramp is scaled down by 1e3; at the full ramp the Hz^2
        term swamps the per-cell reconstruction error on a tiny model and
        L_RC stalls.
        """
        base = dict(
            total_steps=500, batch_size=6, learning_rate=7e-3,
            lambda_f0_start=1e-9, lambda_f0_end=1e-5,
            f0_steps=600, finetune_steps=100,
        )
        base.update(overrides)
        return cls(**base)

    def __post_init__(self):
        if self.lambda_f0_start > self.lambda_f0_end:
            raise ConfigurationError("lambda_f0_start must not exceed lambda_f0_end")
        if not 0 < self.ramp_fraction <= 1:
            raise ConfigurationError("ramp_fraction must lie in (0, 1]")
        if self.discriminator_regime not in REGIMES:
            raise ConfigurationError(f"discriminator_regime must be one of {REGIMES}")
        if self.total_steps < 0 or self.batch_size < 1:
            raise ConfigurationError("total_steps must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigurationError(f"unknown training options: {', '.join(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def lambda_f0_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear ramp over the first ``ramp_fraction`` of training, then flat."""
    ramp = cfg.ramp_fraction * cfg.total_steps
    frac = 1.0 if ramp <= 0 else min(max(step, 0) / ramp, 1.0)
    return cfg.lambda_f0_start + frac * (cfg.lambda_f0_end - cfg.lambda_f0_start)


@dataclass
class TrainState:
    model: VoiceReenactor
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: np.random.Generator
    speaker_index: dict[str, int]
    step: int = 0
    stage: str = "pretrain"
    log: list[dict] = field(default_factory=list)
    log_path: Optional[Path] = None


def new_state(model: VoiceReenactor, cfg: TrainConfig, speakers: Sequence[str], stage: str = "pretrain") -> TrainState:
    if len(speakers) != model.cfg.n_speakers:
        raise ConfigurationError(f"model has {model.cfg.n_speakers} speaker classes, dataset has {len(speakers)}")
    return TrainState(
        model=model,
        opt_g=torch.optim.Adam(model.generator_parameters(), lr=cfg.learning_rate),
        opt_d=torch.optim.Adam(model.discriminator.parameters(), lr=cfg.learning_rate),
        rng=np.random.default_rng(cfg.seed),
        speaker_index={s: i for i, s in enumerate(sorted(speakers))},
        stage=stage,
    )


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

def sample_batch(
    utts: Sequence[Utterance], batch_size: int, rng: np.random.Generator, need_two_speakers: bool = False
) -> list[Utterance]:
    """A window of ``batch_size`` neighbours in length order (length
    bucketing), starting at a random offset."""
    ordered = sorted(utts, key=lambda u: (u.T, u.utt_id))
    if batch_size >= len(ordered):
        batch = list(ordered)
    else:
        start = int(rng.integers(0, len(ordered) - batch_size + 1))
        batch = ordered[start : start + batch_size]
    if need_two_speakers and len({u.speaker_id for u in batch}) < 2 and len(batch) > 1:
        others = [u for u in ordered if u.speaker_id != batch[0].speaker_id]
        if others:
            target_T = batch[-1].T
            batch[-1] = min(others, key=lambda u: (abs(u.T - target_T), u.utt_id))
    return batch


def pick_partners(
    batch: Sequence[Utterance], pool: dict[str, list[Utterance]], regime: str, rng: np.random.Generator
) -> list[Utterance]:
    """Utterances whose speaker code drives the conversion pass."""
    partners = []
    speakers = sorted(pool)
    for u in batch:
        if regime == "same_id":
            spk = u.speaker_id
        else:
            choices = [s for s in speakers if s != u.speaker_id]
            if not choices:
                raise RegimeError("diff_id regime needs at least two speakers in the pool")
            spk = choices[int(rng.integers(len(choices)))]
        cands = sorted(pool.get(spk, []), key=lambda x: x.utt_id)
        if regime == "same_id" and len(cands) > 1:
            cands = [c for c in cands if c.utt_id != u.utt_id]
        if not cands:
            cands = [u]
        partners.append(cands[int(rng.integers(len(cands)))])
    return partners


# ---------------------------------------------------------------------------
# steps
# ---------------------------------------------------------------------------

def _weights(cfg: TrainConfig, step: int, stage: str = "pretrain") -> LossWeights:
    ctr, se = cfg.lambda_ctr, cfg.lambda_se
    if stage == "finetune":
        ctr = ctr if cfg.finetune_contrastive else 0.0
        se = se if cfg.finetune_speaker_loss else 0.0
    return LossWeights(lambda_f0_schedule(min(step, cfg.total_steps), cfg), cfg.lambda_adv, ctr, se)


def reconstruction_pass(model: VoiceReenactor, b: Batch, temperature: float) -> dict:
    """Own-code decoding and every non-adversarial generator term."""
    mask, lengths = b.mask, b.lengths
    with torch.no_grad():
        f0_cond = model.f0_encoder.track(b.mel, lengths) * mask
        # soft vs soft, so a perfect reconstruction scores exactly zero
        f0_ref = model.f0_encoder.soft_track(b.mel, lengths) * mask
    h_audio = model.content_audio(b.mel, lengths)
    h_text = model.content_text(b.phonemes, lengths)
    h_s = model.speaker_encoder(b.mel, lengths)
    recon = model.decoder(h_audio, h_s, f0_cond, lengths)
    f0_hat = model.f0_encoder.soft_track(recon, lengths)
    probs = torch.softmax(model.speaker_classifier(h_s), dim=-1)
    return {
        "h_audio": h_audio,
        "f0_cond": f0_cond,
        "recon": recon,
        "l_rc": reconstruction_loss(b.mel, recon, mask),
        "l_f0": f0_loss(f0_ref, f0_hat, mask),
        "l_ctr": contrastive_loss(h_audio, h_text, temperature, lengths),
        "l_se": speaker_class_loss(probs, b.speakers),
    }


def _clip_and_step(opt: torch.optim.Optimizer, params, clip: float) -> None:
    torch.nn.utils.clip_grad_norm_(params, clip)
    opt.step()


def _assert_finite(model: VoiceReenactor) -> None:
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise FloatingPointError(f"parameter {name} became non-finite")


def _record(state: TrainState, entry: dict) -> dict:
    state.log.append(entry)
    if state.log_path is not None:
        with open(state.log_path, "a") as fh:
            fh.write(json.dumps(entry) + "\n")
    return entry


def _log_f0_stats(f0: torch.Tensor, mask: torch.Tensor):
    voiced = (f0 > 0) & (mask > 0)
    if int(voiced.sum()) < 2:
        return None
    logs = torch.log(f0[voiced])
    sd = float(logs.std(unbiased=False))
    return (float(logs.mean()), sd) if sd > 0 else None


def adapt_f0_batch(src: torch.Tensor, src_mask: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Per-item log-F0 range adaptation of ``src`` onto the reference
    tracks' statistics; items without usable statistics pass through."""
    out = src.clone()
    ref_mask = (ref > 0).to(ref.dtype)
    for i in range(src.shape[0]):
        s_stats = _log_f0_stats(src[i], src_mask[i])
        t_stats = _log_f0_stats(ref[i], ref_mask[i])
        if s_stats is None or t_stats is None:
            continue
        voiced = src[i] > 0
        z = (torch.log(src[i][voiced]) - s_stats[0]) / s_stats[1]
        out[i][voiced] = torch.exp(z * t_stats[1] + t_stats[0])
    return out


def dual_mode_step(
    batch: Sequence[Utterance], state: TrainState, cfg: TrainConfig, pool: dict[str, list[Utterance]]
) -> TrainState:
    if cfg.discriminator_regime == "diff_id" and len({u.speaker_id for u in batch}) < 2:
        raise RegimeError("diff_id regime needs a batch drawn from at least two speakers")
    model = state.model
    w = _weights(cfg, state.step, state.stage)
    partners = pick_partners(batch, pool, cfg.discriminator_regime, state.rng)
    b = collate(batch, state.speaker_index)
    p = collate(partners, state.speaker_index)

    terms = reconstruction_pass(model, b, cfg.temperature)
    # the adversarial term trains the decoder only; encoders see it through
    # the reconstruction pass alone
    with torch.no_grad():
        h_conv = model.speaker_encoder(p.mel, p.lengths)
        f0_conv = terms["f0_cond"]
        if cfg.adapt_f0_in_conversion:
            f0_conv = adapt_f0_batch(f0_conv, b.mask, model.f0_encoder.track(p.mel, p.lengths) * p.mask)
    conv = model.decoder(terms["h_audio"].detach(), h_conv, f0_conv, b.lengths)
    l_f0 = terms["l_f0"]
    if cfg.f0_loss_on_conversion:
        # conversions must follow their conditioning track, not the pitch
        # implied by the speaker code
        l_f0_conv = f0_loss(f0_conv, model.f0_encoder.soft_track(conv, b.lengths) * b.mask, b.mask)
        l_f0 = 0.5 * (l_f0 + l_f0_conv)

    fakes = [conv] + ([terms["recon"]] if cfg.d_on_reconstruction else [])
    real_logit = model.discriminator(b.mel, b.lengths)
    fake_logit = torch.cat([model.discriminator(x.detach(), b.lengths) for x in fakes])
    l_d = adversarial_d_loss(real_logit, fake_logit)
    state.opt_d.zero_grad(set_to_none=True)
    l_d.backward()
    _clip_and_step(state.opt_d, model.discriminator.parameters(), cfg.grad_clip)

    g_fakes = [conv] + ([terms["recon"]] if cfg.adv_on_reconstruction else [])
    l_adv_g = adversarial_g_loss(torch.cat([model.discriminator(x, b.lengths) for x in g_fakes]))
    total = generator_total_loss(terms["l_rc"], l_adv_g, l_f0, terms["l_ctr"], terms["l_se"], w)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    _clip_and_step(state.opt_g, model.generator_parameters(), cfg.grad_clip)
    model.discriminator.zero_grad(set_to_none=True)
    _assert_finite(model)

    state.step += 1
    _record(state, {
        "step": state.step,
        "l_rc": terms["l_rc"].item(),
        "l_f0": l_f0.item(),
        "l_ctr": terms["l_ctr"].item(),
        "l_se": terms["l_se"].item(),
        "l_adv_g": l_adv_g.item(),
        "l_adv_d": l_d.item(),
        "lambda_f0": w.lambda_f0,
        "conversion_speakers": [u.speaker_id for u in partners],
    })
    return state


def autoencoder_step(batch: Sequence[Utterance], state: TrainState, cfg: TrainConfig) -> TrainState:
    """Reconstruction-only baseline: no conversion pass, no discriminator."""
    model = state.model
    w = _weights(cfg, state.step, state.stage)
    terms = reconstruction_pass(model, collate(batch, state.speaker_index), cfg.temperature)
    total = terms["l_rc"] + w.lambda_f0 * terms["l_f0"] + w.lambda_ctr * terms["l_ctr"] + w.lambda_se * terms["l_se"]
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    _clip_and_step(state.opt_g, model.generator_parameters(), cfg.grad_clip)
    _assert_finite(model)
    state.step += 1
    _record(state, {
        "step": state.step,
        "l_rc": terms["l_rc"].item(),
        "l_f0": terms["l_f0"].item(),
        "l_ctr": terms["l_ctr"].item(),
        "l_se": terms["l_se"].item(),
        "lambda_f0": w.lambda_f0,
    })
    return state


# ---------------------------------------------------------------------------
# F0 encoder pre-training
# ---------------------------------------------------------------------------

F0_SCALE = 100.0  # Hz; regression target scaling
EDGE_FRAMES = 2  # frames at each end whose analysis window reaches past the signal
# share of each utterance's voiced weight given to its edge frames; edges are
# rare but distorted, and a fixed share keeps short utterances from being dominated
EDGE_SHARE = 0.15


def _edge_weights(mask: torch.Tensor, voiced: torch.Tensor) -> torch.Tensor:
    t = torch.arange(mask.shape[1], device=mask.device)[None, :]
    edge = ((t < EDGE_FRAMES) | (t >= mask.sum(1, keepdim=True) - EDGE_FRAMES)).to(mask.dtype) * voiced
    n_edge = edge.sum(1, keepdim=True)
    n_inner = (voiced - edge).sum(1, keepdim=True)
    w = (EDGE_SHARE / (1 - EDGE_SHARE) * n_inner / n_edge.clamp_min(1.0)).clamp_min(1.0)
    return voiced + edge * (w - 1.0)


def f0_pretrain_loss(model: VoiceReenactor, b: Batch) -> torch.Tensor:
    value, logit = model.f0_encoder(b.mel, b.lengths)
    mask = b.mask
    voiced = _edge_weights(mask, (b.f0 > 0).to(value.dtype) * mask)
    l_value = (((value - b.f0) / F0_SCALE) ** 2 * voiced).sum() / voiced.sum().clamp_min(1.0)
    l_voicing = (F.binary_cross_entropy_with_logits(logit, (b.f0 > 0).to(logit.dtype), reduction="none") * mask).sum()
    return l_value + l_voicing / mask.sum()


def pretrain_f0_encoder(
    dataset: Sequence[Utterance],
    cfg: TrainConfig,
    model: Optional[VoiceReenactor] = None,
    model_config: Optional[ModelConfig] = None,
) -> VoiceReenactor:
    """Fit the F0 encoder to oracle tracks, then freeze it."""
    if not dataset:
        raise ConfigurationError("F0 pre-training needs a non-empty dataset")
    if model is None:
        speakers = sorted({u.speaker_id for u in dataset})
        base = model_config or ModelConfig()
        model = VoiceReenactor(dataclasses.replace(base, n_speakers=max(2, len(speakers))), seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    index = {s: i for i, s in enumerate(sorted({u.speaker_id for u in dataset}))}
    opt = torch.optim.Adam(model.f0_encoder.parameters(), lr=cfg.f0_learning_rate)
    for _ in range(cfg.f0_steps):
        batch = sample_batch(dataset, cfg.f0_batch_size, rng)
        loss = f0_pretrain_loss(model, collate(batch, index))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        _clip_and_step(opt, model.f0_encoder.parameters(), cfg.grad_clip)
    _assert_finite(model)
    model.freeze("f0_encoder")
    return model


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@torch.no_grad()
def validate(model: VoiceReenactor, utts: Sequence[Utterance]) -> dict:
    """Reconstruction L_RC and co-voiced F0 RMSE of E^F0(recon) against the
    conditioning track, averaged over utterances."""
    if not utts:
        return {"val_l_rc": None, "val_f0_rmse": None}
    rcs, rmses = [], []
    for u in utts:
        mel = torch.as_tensor(u.mel, dtype=torch.float32)[None]
        f0_cond = model.f0_encoder.track(mel)
        recon = model.decoder(model.content_audio(mel), model.speaker_encoder(mel), f0_cond)
        rcs.append(float(reconstruction_loss(mel, recon)))
        rmses.append(f0_rmse(f0_cond[0].double().numpy(), model.f0_encoder.track(recon)[0].double().numpy(), warn=False))
    return {"val_l_rc": float(np.mean(rcs)), "val_f0_rmse": float(np.mean(rmses))}


# ---------------------------------------------------------------------------
# stage loops
# ---------------------------------------------------------------------------

def _split(dataset: Sequence[Utterance]) -> tuple[list[Utterance], list[Utterance]]:
    train = [u for u in dataset if u.split == "train"]
    val = [u for u in dataset if u.split != "train"]
    return train, val


def run_steps(
    state: TrainState,
    cfg: TrainConfig,
    train: Sequence[Utterance],
    val: Sequence[Utterance],
    n_steps: int,
    out_dir=None,
    run_info: Optional[dict] = None,
) -> TrainState:
    pool = group_by_speaker(train)
    need_two = cfg.discriminator_regime == "diff_id"
    for _ in range(n_steps):
        batch = sample_batch(train, cfg.batch_size, state.rng, need_two_speakers=need_two)
        dual_mode_step(batch, state, cfg, pool)
        if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(state, out_dir, cfg, validate(state.model, val), run_info)
    return state


def pretrain_multispeaker(
    dataset: Sequence[Utterance],
    cfg: TrainConfig,
    model: VoiceReenactor,
    out_dir=None,
    state: Optional[TrainState] = None,
    run_info: Optional[dict] = None,
) -> TrainState:
    """Dual-mode training over every speaker's train split until
    ``cfg.total_steps``; resumes from ``state`` when given."""
    train, val = _split(dataset)
    speakers = sorted({u.speaker_id for u in dataset})
    if len(speakers) < 2:
        raise ConfigurationError("multi-speaker pre-training needs at least two speakers")
    if state is None:
        state = new_state(model, cfg, speakers, stage="pretrain")
    run_steps(state, cfg, train, val, cfg.total_steps - state.step, out_dir, run_info)
    if out_dir is not None and (not cfg.checkpoint_every or state.step % cfg.checkpoint_every):
        save_checkpoint(state, out_dir, cfg, validate(state.model, val), run_info)
    return state


def finetune_pair(
    state: TrainState,
    dataset: Sequence[Utterance],
    src_speaker: str,
    tgt_speaker: str,
    cfg: TrainConfig,
    out_dir=None,
    run_info: Optional[dict] = None,
) -> TrainState:
    """Continue dual-mode training on the two speakers' data only."""
    pair = {src_speaker, tgt_speaker}
    known = {u.speaker_id for u in dataset} & set(state.speaker_index)
    missing = sorted(pair - known)
    if missing:
        raise ConfigurationError(f"unknown speaker(s) for fine-tuning: {missing}")
    train, val = _split([u for u in dataset if u.speaker_id in pair])
    state.stage = "finetune"
    run_steps(state, cfg, train, val, cfg.finetune_steps, out_dir, run_info)
    if out_dir is not None:
        save_checkpoint(state, out_dir, cfg, validate(state.model, val), run_info)
    return state


# ---------------------------------------------------------------------------
# discriminator probes
# ---------------------------------------------------------------------------

@torch.no_grad()
def _converted(model, b: Batch, p: Batch, adapt_f0: bool = True) -> torch.Tensor:
    f0 = model.f0_encoder.track(b.mel, b.lengths) * b.mask
    if adapt_f0:
        f0 = adapt_f0_batch(f0, b.mask, model.f0_encoder.track(p.mel, p.lengths) * p.mask)
    return model.decoder(model.content_audio(b.mel, b.lengths), model.speaker_encoder(p.mel, p.lengths), f0, b.lengths)


def train_discriminator(
    model: VoiceReenactor, utts: Sequence[Utterance], cfg: TrainConfig, steps: int, regime: str = "diff_id"
) -> list[float]:
    """Update only the discriminator against a fixed generator."""
    rng = np.random.default_rng(cfg.seed)
    index = {s: i for i, s in enumerate(sorted({u.speaker_id for u in utts}))}
    pool = group_by_speaker(utts)
    opt = torch.optim.Adam(model.discriminator.parameters(), lr=cfg.learning_rate)
    losses = []
    for _ in range(steps):
        batch = sample_batch(utts, cfg.batch_size, rng, need_two_speakers=regime == "diff_id")
        b = collate(batch, index)
        fake = _converted(model, b, collate(pick_partners(batch, pool, regime, rng), index), cfg.adapt_f0_in_conversion)
        l_d = adversarial_d_loss(model.discriminator(b.mel, b.lengths), model.discriminator(fake, b.lengths))
        opt.zero_grad(set_to_none=True)
        l_d.backward()
        _clip_and_step(opt, model.discriminator.parameters(), cfg.grad_clip)
        losses.append(l_d.item())
    return losses


@torch.no_grad()
def discriminator_accuracy(
    model: VoiceReenactor, utts: Sequence[Utterance], regime: str = "diff_id", seed: int = 0, adapt_f0: bool = True
) -> float:
    """Fraction of real (logit > 0.5) and converted (logit < 0.5) inputs the
    discriminator labels correctly."""
    rng = np.random.default_rng(seed)
    index = {s: i for i, s in enumerate(sorted({u.speaker_id for u in utts}))}
    pool = group_by_speaker(utts)
    correct = total = 0
    for u in utts:
        b = collate([u], index)
        fake = _converted(model, b, collate(pick_partners([u], pool, regime, rng), index), adapt_f0)
        correct += int(model.discriminator(b.mel)[0] > 0.5) + int(model.discriminator(fake)[0] < 0.5)
        total += 2
    return correct / total


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_path(out_dir, stage: str, step: int) -> Path:
    return Path(out_dir) / f"ckpt_{stage}_{step}.bin"


def save_checkpoint(
    state: TrainState, out_dir, cfg: TrainConfig, metrics: Optional[dict] = None, run_info: Optional[dict] = None
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = state.model
    meta = {
        "format": CHECKPOINT_FORMAT,
        "stage": state.stage,
        "step": state.step,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg, model.cfg),
        "toolkit_version": __version__,
        "frozen": model.frozen_flags(),
        "model_config": model.cfg.to_dict(),
        "model_seed": model.seed,
        "train_config": cfg.to_dict(),
        "speaker_index": state.speaker_index,
        "metrics": metrics or {},
    }
    if run_info:
        meta["run"] = run_info
    payload = {
        "format": CHECKPOINT_FORMAT,
        "metadata": meta,
        "tensors": model.named_tensors(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "rng": state.rng.bit_generator.state,
    }
    path = checkpoint_path(out_dir, state.stage, state.step)
    _write_payload(payload, path)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return path


def save_model(model: VoiceReenactor, path, cfg: TrainConfig, stage: str = "f0", run_info: Optional[dict] = None) -> Path:
    """Checkpoint without optimizer state (used after F0 pre-training)."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "stage": stage,
        "step": cfg.f0_steps if stage == "f0" else 0,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg, model.cfg),
        "toolkit_version": __version__,
        "frozen": model.frozen_flags(),
        "model_config": model.cfg.to_dict(),
        "model_seed": model.seed,
        "train_config": cfg.to_dict(),
        "metrics": {},
    }
    if run_info:
        meta["run"] = run_info
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_payload({"format": CHECKPOINT_FORMAT, "metadata": meta, "tensors": model.named_tensors()}, path)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return path


def load_model(path) -> tuple[VoiceReenactor, dict]:
    payload = torch.load(path, weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    meta = payload["metadata"]
    model = VoiceReenactor(ModelConfig(**meta["model_config"]), seed=meta["model_seed"])
    model.load_named_tensors(payload["tensors"])
    for comp, frozen in meta["frozen"].items():
        if frozen:
            model.freeze(comp)
    return model, payload


def load_checkpoint(path, cfg: Optional[TrainConfig] = None) -> TrainState:
    """Rebuild a resumable :class:`TrainState`; optimizer learning rates come
    from ``cfg`` when given, else from the stored config."""
    model, payload = load_model(path)
    meta = payload["metadata"]
    cfg = cfg or TrainConfig.from_dict(meta["train_config"])
    speakers = sorted(meta["speaker_index"], key=meta["speaker_index"].get)
    state = new_state(model, cfg, speakers, stage=meta["stage"])
    state.speaker_index = dict(meta["speaker_index"])
    state.step = meta["step"]
    if "opt_g" in payload:
        state.opt_g.load_state_dict(payload["opt_g"])
        state.opt_d.load_state_dict(payload["opt_d"])
        for opt in (state.opt_g, state.opt_d):
            for group in opt.param_groups:
                group["lr"] = cfg.learning_rate
        state.rng.bit_generator.state = payload["rng"]
    return state


def config_hash(cfg: TrainConfig, model_cfg: ModelConfig) -> str:
    blob = json.dumps({"train": cfg.to_dict(), "model": model_cfg.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def losses_are_finite(entry: dict) -> bool:
    return all(math.isfinite(v) for k, v in entry.items() if isinstance(v, float))
