import numpy as np
import torch

from reenact.data import (
    DEFAULT_SPEAKERS,
    Utterance,
    check_lengths,
    collate,
    featurize,
    synthetic_utterances,
    validation_count,
    write_synthetic_corpus,
)
from reenact.features import extract_f0_oracle, parse_alignment, read_wav


def test_synthetic_corpus_is_deterministic(tmp_path):
    a = write_synthetic_corpus(tmp_path / "a", DEFAULT_SPEAKERS[:2], 2, seed=4)
    b = write_synthetic_corpus(tmp_path / "b", DEFAULT_SPEAKERS[:2], 2, seed=4)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert len(files) == 2 * 2 * 2 + 1
    assert all((a / f).read_bytes() == (b / f).read_bytes() for f in files)


def test_synthetic_pitch_follows_speaker_range():
    items = synthetic_utterances(DEFAULT_SPEAKERS, 1, seed=0)
    medians = {}
    for _, spk, audio, _ in items:
        f0 = extract_f0_oracle(audio)
        medians[spk] = np.median(f0[f0 > 0])
    assert max(medians["p232"], medians["p274"]) < min(medians["p253"], medians["p300"])


def test_featurize_lengths_agree(tmp_path):
    root = write_synthetic_corpus(tmp_path, DEFAULT_SPEAKERS[:1], 1, seed=0)
    audio, sr = read_wav(root / "p232" / "p232_001.wav")
    mel, f0, ids = featurize(audio, sr, parse_alignment((root / "p232" / "p232_001.align").read_text()))
    assert mel.shape[1] == len(f0) == len(ids)


def test_collate_pads_and_masks():
    utts = [
        Utterance("a", "s1", np.ones((80, 5), np.float32), np.full(5, 100.0), np.zeros(5, np.int64)),
        Utterance("b", "s2", np.ones((80, 3), np.float32), np.full(3, 200.0), np.ones(3, np.int64)),
    ]
    check_lengths(utts)
    b = collate(utts, {"s1": 0, "s2": 1})
    assert b.mel.shape == (2, 80, 5)
    assert torch.equal(b.mask, torch.tensor([[1.0] * 5, [1.0] * 3 + [0.0] * 2]))
    assert float(b.mel[1, :, 3:].abs().sum()) == 0.0
    assert b.speakers.tolist() == [0, 1]


def test_validation_count():
    assert [validation_count(n) for n in (1, 2, 10, 20, 25)] == [0, 1, 1, 2, 2]
