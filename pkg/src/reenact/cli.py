"""Command-line driver for the six pipeline stages.

Every stage reads and writes under one run directory (``--out``)::

    prepare/   manifest.jsonl, features.npz, standardizer.json, speakers.json
    f0/        f0_encoder.bin
    pretrain/  ckpt_pretrain_<step>.bin, train_log.jsonl
    finetune/  ckpt_finetune_<step>.bin, train_log.jsonl
    convert/   <name>.mel, <name>.wav
    evaluate/  report.json, table.txt

Each stage also drops a ``run.json`` with the config hash, seed and
toolkit version.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import tomli

from . import __version__
from .conversion import ConversionRequest, build_codes, render_waveform, write_mel_file
from .data import Utterance, featurize, split_train_val
from .errors import ConfigurationError, DependencyError, ReenactError
from .eval import (
    EvalReport,
    check_time_sync,
    f0_rmse,
    f0_rmse_inclusive,
    format_table,
    pair_type,
    speaker_similarity_proxy,
)
from .features import (
    MelSpectrogram,
    SpeakerProfile,
    Standardizer,
    apply_standardizer,
    compute_speaker_f0_stats,
    fit_standardizer,
    parse_alignment,
    read_wav,
    write_wav,
)
from .model import ModelConfig, decode, encode_f0
from .training import (
    TrainConfig,
    finetune_pair,
    load_checkpoint,
    load_model,
    pretrain_f0_encoder,
    pretrain_multispeaker,
    new_state,
    save_model,
)

logger = logging.getLogger("reenact")

DATA_ENV = "REENACT_DATA"
STAGES = ("prepare", "train-f0", "pretrain", "finetune", "convert", "evaluate")
MODEL_PRESETS = ("full", "toy")


@dataclass
class RunConfig:
    data_root: Optional[str] = None
    out_dir: str = "run"
    seed: int = 0
    model: str = "full"
    speakers: list[str] = field(default_factory=list)  # empty: every speaker directory
    source_speaker: Optional[str] = None
    target_speaker: Optional[str] = None
    f0_mode: str = "transfer_normalized"
    render_wav: bool = True
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.model not in MODEL_PRESETS:
            raise ConfigurationError(f"model must be one of {MODEL_PRESETS}")
        if self.train.seed != self.seed:
            self.train = dataclasses.replace(self.train, seed=self.seed)

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def model_config(self, n_speakers: int) -> ModelConfig:
        base = ModelConfig.toy() if self.model == "toy" else ModelConfig()
        return dataclasses.replace(base, n_speakers=n_speakers)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"] = self.train.to_dict()
        return d

    def digest(self) -> str:
        # paths are excluded so relocating a run keeps its hash
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("data_root")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def load_run_config(path: Optional[str], seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    """Flat key = value file (TOML syntax). Training keys sit next to run
    keys; a ``preset = "toy"`` line starts from the desk-scale defaults."""
    raw: dict = {}
    if path is not None:
        try:
            raw = tomli.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigurationError(f"config file not found: {path}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigurationError(f"config must be flat; found sections {nested}")
    preset = raw.pop("preset", None)
    run_names = {f.name for f in dataclasses.fields(RunConfig)} - {"train"}
    run_kw = {k: v for k, v in raw.items() if k in run_names}
    train_kw = {k: v for k, v in raw.items() if k not in run_names}
    if preset == "toy":
        train = TrainConfig.toy(**train_kw)
        run_kw.setdefault("model", "toy")
    elif preset in (None, "full"):
        train = TrainConfig.from_dict(train_kw)
    else:
        raise ConfigurationError(f"unknown preset {preset!r}")
    if seed is not None:
        run_kw["seed"] = seed
    if out is not None:
        run_kw["out_dir"] = out
    if os.environ.get(DATA_ENV):
        run_kw["data_root"] = os.environ[DATA_ENV]
    return RunConfig(train=train, **run_kw)


def _stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.digest(), "seed": cfg.seed, "toolkit_version": __version__}


def _write_run_info(cfg: RunConfig, stage: str, extra: Optional[dict] = None) -> None:
    d = cfg.out / stage.replace("-", "_")
    d.mkdir(parents=True, exist_ok=True)
    info = {"stage": stage, **_stamp(cfg), "config": cfg.to_dict(), **(extra or {})}
    (d / "run.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing {path}; run `{stage}` first")
    return path


def _latest_checkpoint(directory: Path, stage: str) -> Path:
    found = sorted(directory.glob(f"ckpt_{stage}_*.bin"), key=lambda p: int(p.stem.rsplit("_", 1)[1]))
    if not found:
        raise DependencyError(f"missing {directory / f'ckpt_{stage}_<step>.bin'}; run `{stage}` first")
    return found[-1]


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

def _speaker_genders(root: Path) -> dict[str, str]:
    info = root / "speaker-info.json"
    if info.exists():
        return {k: v.get("gender") for k, v in json.loads(info.read_text()).items()}
    txt = root / "speaker-info.txt"  # VCTK: ID AGE GENDER ACCENTS ...
    out = {}
    if txt.exists():
        for line in txt.read_text().splitlines()[1:]:
            parts = line.split()
            if len(parts) >= 3:
                spk = parts[0] if parts[0].startswith("p") else f"p{parts[0]}"
                out[spk] = parts[2]
    return out


def prepare(cfg: RunConfig) -> Path:
    if not cfg.data_root:
        raise ConfigurationError(f"no dataset root: set data_root in the config or {DATA_ENV}")
    root = Path(cfg.data_root)
    if not root.is_dir():
        raise ConfigurationError(f"dataset root {root} is not a directory")
    spk_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if cfg.speakers:
        missing = sorted(set(cfg.speakers) - {p.name for p in spk_dirs})
        if missing:
            raise ConfigurationError(f"speakers not found under {root}: {missing}")
        spk_dirs = [p for p in spk_dirs if p.name in cfg.speakers]

    records = []
    for d in spk_dirs:
        for wav in sorted(d.glob("*.wav")):
            align = wav.with_suffix(".align")
            if not align.exists():
                warnings.warn(f"{wav.name}: no alignment file, skipped", RuntimeWarning)
                continue
            audio, sr = read_wav(wav)
            mel, f0, ids = featurize(audio, sr, parse_alignment(align.read_text()))
            records.append((wav.stem, d.name, wav, align, mel, f0, ids))
    if not records:
        raise ConfigurationError(f"no usable utterances under {root}")

    by_spk: dict[str, list[str]] = {}
    for utt, spk, *_ in records:
        by_spk.setdefault(spk, []).append(utt)
    split = split_train_val(by_spk, cfg.seed)
    train = [r for r in records if split[r[0]] == "train"]
    st = fit_standardizer([MelSpectrogram(r[4]) for r in train], provenance=f"{root.name}:train")

    genders = _speaker_genders(root)
    profiles = {}
    for spk in sorted(by_spk):
        tracks = [r[5] for r in train if r[1] == spk]
        mu, sigma = compute_speaker_f0_stats(tracks)
        refs = sorted(r[0] for r in train if r[1] == spk)
        profiles[spk] = SpeakerProfile(spk, mu, sigma, refs, genders.get(spk)).to_dict()

    out = cfg.out / "prepare"
    out.mkdir(parents=True, exist_ok=True)
    arrays = {}
    stamp = _stamp(cfg)
    lines = []
    for utt, spk, wav, align, mel, f0, ids in records:
        std = apply_standardizer(MelSpectrogram(mel), st).values
        arrays[f"{utt}/mel"] = std.astype(np.float32)
        arrays[f"{utt}/f0"] = f0
        arrays[f"{utt}/phonemes"] = ids
        rec = {"utt_id": utt, "speaker_id": spk, "wav_path": str(wav.resolve()),
               "alignment_path": str(align.resolve()), "split": split[utt], "frames": int(mel.shape[1]), **stamp}
        lines.append(json.dumps(rec, sort_keys=True))
    np.savez(out / "features.npz", **arrays)
    st.save(out / "standardizer.json")
    (out / "speakers.json").write_text(json.dumps({"profiles": profiles, **stamp}, indent=1, sort_keys=True) + "\n")
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    _write_run_info(cfg, "prepare", {"n_utterances": len(records), "n_train": len(train)})
    return manifest


@dataclass
class Prepared:
    utterances: list[Utterance]
    standardizer: Standardizer
    profiles: dict[str, SpeakerProfile]
    wavs: dict[str, str]

    @property
    def speakers(self) -> list[str]:
        return sorted({u.speaker_id for u in self.utterances})


def load_prepared(cfg: RunConfig) -> Prepared:
    d = cfg.out / "prepare"
    manifest = _require(d / "manifest.jsonl", "prepare")
    feats = np.load(_require(d / "features.npz", "prepare"))
    utts, wavs = [], {}
    for line in manifest.read_text().splitlines():
        rec = json.loads(line)
        utt = rec["utt_id"]
        utts.append(Utterance(utt, rec["speaker_id"], feats[f"{utt}/mel"], feats[f"{utt}/f0"], feats[f"{utt}/phonemes"], rec["split"]))
        wavs[utt] = rec["wav_path"]
    st = Standardizer.load(_require(d / "standardizer.json", "prepare"))
    raw = json.loads(_require(d / "speakers.json", "prepare").read_text())["profiles"]
    return Prepared(utts, st, {k: SpeakerProfile.from_dict(v) for k, v in raw.items()}, wavs)


# ---------------------------------------------------------------------------
# training stages
# ---------------------------------------------------------------------------

def train_f0(cfg: RunConfig) -> Path:
    prep = load_prepared(cfg)
    train = [u for u in prep.utterances if u.split == "train"]
    model = pretrain_f0_encoder(train, cfg.train, model_config=cfg.model_config(len(prep.speakers)))
    path = save_model(model, cfg.out / "f0" / "f0_encoder.bin", cfg.train, stage="f0", run_info=_stamp(cfg))
    _write_run_info(cfg, "f0")
    return path


def _fresh_log(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.unlink(missing_ok=True)
    return path


def pretrain(cfg: RunConfig) -> Path:
    prep = load_prepared(cfg)
    model, _ = load_model(_require(cfg.out / "f0" / "f0_encoder.bin", "train-f0"))
    out = cfg.out / "pretrain"
    for old in out.glob("ckpt_pretrain_*"):
        old.unlink()
    state = new_state(model, cfg.train, prep.speakers, stage="pretrain")
    state.log_path = _fresh_log(out / "train_log.jsonl")
    pretrain_multispeaker(prep.utterances, cfg.train, model, out, state, _stamp(cfg))
    _write_run_info(cfg, "pretrain", {"steps": state.step})
    return _latest_checkpoint(out, "pretrain")


def _pair(cfg: RunConfig, prep: Prepared) -> tuple[str, str]:
    src, tgt = cfg.source_speaker, cfg.target_speaker
    if src is None or tgt is None:
        if len(prep.speakers) < 2:
            raise ConfigurationError("need two speakers for a source/target pair")
        src, tgt = src or prep.speakers[0], tgt or prep.speakers[1]
    for spk in (src, tgt):
        if spk not in prep.profiles:
            raise ConfigurationError(f"unknown speaker {spk!r}; prepared speakers: {prep.speakers}")
    return src, tgt


def finetune(cfg: RunConfig) -> Path:
    ckpt = _latest_checkpoint(cfg.out / "pretrain", "pretrain")
    prep = load_prepared(cfg)
    src, tgt = _pair(cfg, prep)
    state = load_checkpoint(ckpt, cfg.train)
    out = cfg.out / "finetune"
    for old in out.glob("ckpt_finetune_*"):
        old.unlink()
    state.log_path = _fresh_log(out / "train_log.jsonl")
    finetune_pair(state, prep.utterances, src, tgt, cfg.train, out, _stamp(cfg))
    _write_run_info(cfg, "finetune", {"source_speaker": src, "target_speaker": tgt, "steps": state.step})
    return _latest_checkpoint(out, "finetune")


# ---------------------------------------------------------------------------
# convert / evaluate
# ---------------------------------------------------------------------------

def _resolve(path: str, base: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else base / p


def convert_request(cfg: RunConfig, request_path: str) -> Path:
    """Run one JSON request ``{source_wav, target_speaker_id,
    target_reference_wav, f0_mode[, source_speaker_id, name]}``."""
    model, _ = load_model(_latest_checkpoint(cfg.out / "finetune", "finetune"))
    prep = load_prepared(cfg)
    req_path = Path(request_path)
    try:
        spec = json.loads(req_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read conversion request {req_path}: {exc}") from exc
    for key in ("source_wav", "target_speaker_id", "target_reference_wav"):
        if key not in spec:
            raise ConfigurationError(f"conversion request lacks {key!r}")
    tgt = spec["target_speaker_id"]
    if tgt not in prep.profiles:
        raise ConfigurationError(f"unknown target speaker {tgt!r}")
    src_audio, sr = read_wav(_resolve(spec["source_wav"], req_path.parent))
    ref_audio, ref_sr = read_wav(_resolve(spec["target_reference_wav"], req_path.parent))
    if ref_sr != sr:
        raise ConfigurationError("source and reference recordings must share a sample rate")
    src_spk = spec.get("source_speaker_id")
    req = ConversionRequest(
        source=src_audio,
        target_profile=prep.profiles[tgt],
        target_reference=ref_audio,
        f0_mode=spec.get("f0_mode", cfg.f0_mode),
        source_stats=prep.profiles[src_spk].stats if src_spk in prep.profiles else None,
        sample_rate=sr,
    )
    _, codes = build_codes(req, model, prep.standardizer)
    mel = decode(codes, model)
    out = cfg.out / "convert"
    out.mkdir(parents=True, exist_ok=True)
    name = spec.get("name") or f"{Path(spec['source_wav']).stem}_to_{tgt}"
    path = out / f"{name}.mel"
    write_mel_file(path, mel)
    if cfg.render_wav:
        write_wav(out / f"{name}.wav", render_waveform(mel, prep.standardizer, seed=cfg.seed))
    _write_run_info(cfg, "convert", {"last_request": str(req_path), "last_output": str(path)})
    return path


def evaluate(cfg: RunConfig, system: Optional[str] = None) -> EvalReport:
    """Convert the validation utterances of the source/target pair in both
    directions and score F0 preservation, timing and speaker proxy."""
    ckpt = _latest_checkpoint(cfg.out / "finetune", "finetune")
    model, payload = load_model(ckpt)
    prep = load_prepared(cfg)
    src, tgt = _pair(cfg, prep)
    index = payload["metadata"]["speaker_index"]
    rmse, rmse_incl, types, proxy = {}, {}, {}, {}
    sync_pass = sync_fail = n = 0
    for a, b in ((src, tgt), (tgt, src)):
        sources = [u for u in prep.utterances if u.speaker_id == a and u.split != "train"]
        sources = sources or [u for u in prep.utterances if u.speaker_id == a]
        reference = next(u for u in prep.utterances if u.utt_id == prep.profiles[b].reference_utterances[0])
        label = f"{a}->{b}"
        cond, measured, converted = [], [], []
        for u in sources:
            req = ConversionRequest(
                source=MelSpectrogram(u.mel.astype(np.float64), standardized=True),
                target_profile=prep.profiles[b],
                target_reference=MelSpectrogram(reference.mel.astype(np.float64), standardized=True),
                f0_mode=cfg.f0_mode,
                source_stats=prep.profiles[a].stats,
            )
            source_mel, codes = build_codes(req, model)
            mel = decode(codes, model)
            ok = check_time_sync(source_mel, mel)
            sync_pass += ok
            sync_fail += not ok
            n += 1
            cond.append(codes.f0)
            measured.append(encode_f0(mel, model))
            converted.append(mel)
        cond_all, meas_all = np.concatenate(cond), np.concatenate(measured)
        rmse[label] = f0_rmse(cond_all, meas_all)
        rmse_incl[label] = f0_rmse_inclusive(cond_all, meas_all)
        types[label] = pair_type(prep.profiles[a].gender, prep.profiles[b].gender)
        proxy[label] = speaker_similarity_proxy(converted, b, model, index)
    report = EvalReport(
        system=system or f"dual-mode ({cfg.train.discriminator_regime})",
        f0_rmse=rmse,
        f0_rmse_inclusive=rmse_incl,
        pair_types=types,
        sync_pass=sync_pass,
        sync_fail=sync_fail,
        speaker_proxy_accuracy=proxy,
        n_utterances=n,
        config_hash=cfg.digest(),
        checkpoint_id=ckpt.name,
        seed=cfg.seed,
        toolkit_version=__version__,
    )
    out = cfg.out / "evaluate"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "table.txt").write_text(format_table([report]) + "\n")
    _write_run_info(cfg, "evaluate", {"checkpoint": ckpt.name})
    return report


def synth(root: str, utts_per_speaker: int, seed: int) -> Path:
    from .data import write_synthetic_corpus

    return write_synthetic_corpus(root, utts_per_speaker=utts_per_speaker, seed=seed)


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="reenact",
        description="Time-synchronous voice reenactment: prepare -> train-f0 -> pretrain -> finetune -> convert / evaluate.",
    )
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="run directory (default: config out_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("prepare", help="trim, featurize and split the corpus; fit the standardizer")
    sub.add_parser("train-f0", help="pre-train and freeze the F0 encoder")
    sub.add_parser("pretrain", help="dual-mode multi-speaker training")
    sub.add_parser("finetune", help="dual-mode fine-tuning on the source/target pair")
    c = sub.add_parser("convert", help="convert one request JSON into a Mel file (and WAV)")
    c.add_argument("request", help="JSON {source_wav, target_speaker_id, target_reference_wav, f0_mode}")
    e = sub.add_parser("evaluate", help="F0 RMSE, time-sync and speaker-proxy report")
    e.add_argument("--system", help="row label in the results table")
    s = sub.add_parser("synth", help="write the bundled synthetic four-speaker corpus")
    s.add_argument("root")
    s.add_argument("--utterances", type=int, default=10, help="per speaker")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "synth":
            print(synth(args.root, args.utterances, args.seed or 0))
            return 0
        cfg = load_run_config(args.config, args.seed, args.out)
        if args.command == "prepare":
            print(prepare(cfg))
        elif args.command == "train-f0":
            print(train_f0(cfg))
        elif args.command == "pretrain":
            print(pretrain(cfg))
        elif args.command == "finetune":
            print(finetune(cfg))
        elif args.command == "convert":
            print(convert_request(cfg, args.request))
        elif args.command == "evaluate":
            report = evaluate(cfg, args.system)
            print(format_table([report]))
    except ReenactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
