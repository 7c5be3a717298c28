import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from reenact.data import synthesize_sine
from reenact.errors import InputTooShortError, InvalidInputError, StateError
from reenact.features import DEFAULT_INVENTORY, MelSpectrogram, PhonemeAlignment, apply_standardizer, compute_mel
from reenact.model import (
    CodeBundle,
    ContentEmbedding,
    ModelConfig,
    SpeakerEmbedding,
    VoiceReenactor,
    classify_speaker,
    decode,
    discriminate,
    encode_content,
    encode_f0,
    encode_speaker,
)


@pytest.fixture(scope="module")
def model():
    return VoiceReenactor(ModelConfig(n_speakers=4), seed=0).eval()


def _mel(T, seed=0):
    return MelSpectrogram(np.random.default_rng(seed).standard_normal((80, T)), standardized=True)


@pytest.mark.parametrize("T", [1, 7, 81])
def test_content_shape(model, T):
    assert encode_content(_mel(T), model).values.shape == (128, T)


def test_phoneme_path_shape(model):
    ids = np.random.default_rng(0).integers(0, len(DEFAULT_INVENTORY), 50)
    assert encode_content(PhonemeAlignment(ids), model).values.shape == (128, 50)


def test_content_is_deterministic(model):
    a, b = encode_content(_mel(30), model), encode_content(_mel(30), model)
    assert np.array_equal(a.values, b.values)


def test_unstandardized_input_rejected(model):
    with pytest.raises(StateError):
        encode_content(MelSpectrogram(np.zeros((80, 5))), model)


@pytest.mark.parametrize("T", [40, 200])
def test_speaker_vector_is_time_independent(model, T):
    assert encode_speaker(_mel(T), model).values.shape == (128,)


def test_speaker_frame_permutation(model):
    mel = _mel(60)
    perm = MelSpectrogram(mel.values[:, np.random.default_rng(1).permutation(60)], standardized=True)
    out = encode_speaker(perm, model).values
    assert out.shape == (128,) and np.all(np.isfinite(out))
    assert np.array_equal(encode_speaker(mel, model).values, encode_speaker(mel, model).values)


def test_classifier_simplex(model):
    p = classify_speaker(encode_speaker(_mel(20), model), model)
    assert p.shape == (4,) and np.all(p >= 0) and p.sum() == pytest.approx(1.0)


def test_zero_classifier_is_uniform():
    m = VoiceReenactor(ModelConfig(n_speakers=3), seed=0)
    with torch.no_grad():
        for p in m.speaker_classifier.parameters():
            p.zero_()
    np.testing.assert_allclose(classify_speaker(SpeakerEmbedding(np.zeros(128)), m), 1 / 3, atol=1e-7)


def test_classifier_argmax_shift_invariant(model):
    h = encode_speaker(_mel(25), model)
    with torch.no_grad():
        scores = model.speaker_classifier(torch.as_tensor(h.values, dtype=torch.float32)[None])
    assert int(scores.argmax()) == int((scores + 17.0).argmax()) == int(np.argmax(classify_speaker(h, model)))


def test_f0_track_length(model):
    assert encode_f0(_mel(33), model).shape == (33,)


def test_decode_shapes(model):
    codes = CodeBundle(ContentEmbedding(np.zeros((128, 33))), SpeakerEmbedding(np.zeros(128)), np.zeros(33))
    assert decode(codes, model).values.shape == (80, 33)
    with pytest.raises(InvalidInputError):
        CodeBundle(ContentEmbedding(np.zeros((128, 33))), SpeakerEmbedding(np.zeros(128)), np.zeros(32))


@pytest.mark.parametrize("T", [1, 64, 500])
def test_decode_preserves_length(model, T):
    mel = _mel(T)
    codes = CodeBundle(encode_content(mel, model), encode_speaker(mel, model), encode_f0(mel, model))
    assert decode(codes, model).T == T


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 300))
def test_time_synchrony_property(T):
    m = _small_model()
    mel = _mel(T, seed=T)
    codes = CodeBundle(encode_content(mel, m), encode_speaker(_mel(17), m), encode_f0(mel, m))
    assert decode(codes, m).T == T


_SMALL = {}


def _small_model():
    if "m" not in _SMALL:
        _SMALL["m"] = VoiceReenactor(ModelConfig.toy(), seed=1).eval()
    return _SMALL["m"]


def test_discriminator_feature_map(model):
    x, _ = model.discriminator.feature_map(torch.zeros(1, 80, 64))
    assert tuple(x.shape[1:]) == (128, 5, 4)
    assert np.isfinite(discriminate(_mel(64), model))


def test_discriminator_rejects_short_input(model):
    with pytest.raises(InputTooShortError):
        discriminate(_mel(15), model)


def test_batched_decoder_ignores_padding():
    m = _small_model()
    a, b = _mel(20, 1), _mel(12, 2)
    batch = torch.zeros(2, 80, 20)
    batch[0] = torch.as_tensor(a.values, dtype=torch.float32)
    batch[1, :, :12] = torch.as_tensor(b.values, dtype=torch.float32)
    lengths = torch.tensor([20, 12])
    with torch.no_grad():
        h = m.content_audio(batch, lengths)
        single = m.content_audio(batch[1:, :, :12])
    torch.testing.assert_close(h[1, :, :12], single[0], atol=1e-5, rtol=1e-5)


def test_named_tensor_round_trip():
    a, b = VoiceReenactor(ModelConfig.toy(), seed=0), VoiceReenactor(ModelConfig.toy(), seed=1)
    names = a.named_tensors()
    assert all(len(k.split("/")) == 3 for k in names)
    b.load_named_tensors(names)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_seeded_init_is_reproducible():
    a, b = VoiceReenactor(ModelConfig.toy(), seed=5), VoiceReenactor(ModelConfig.toy(), seed=5)
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


def test_freeze_sets_flags():
    m = VoiceReenactor(ModelConfig.toy(), seed=0)
    m.freeze("f0_encoder")
    assert m.frozen_flags()["f0_encoder"] and not m.frozen_flags()["decoder"]
    assert not any(p.requires_grad for p in m.f0_encoder.parameters())


# the pre-trained F0 encoder

def test_pretrained_f0_encoder_on_200hz(sine_f0_model):
    model, st_ = sine_f0_model
    track = encode_f0(apply_standardizer(compute_mel(synthesize_sine(200.0)), st_), model)
    voiced = track[track > 0]
    assert voiced.size > 0.9 * track.size
    assert np.all(np.abs(voiced - 200.0) <= 5.0)


def test_pretrained_f0_encoder_on_silence(sine_f0_model):
    model, st_ = sine_f0_model
    track = encode_f0(apply_standardizer(compute_mel(np.zeros(16000)), st_), model)
    assert np.all(track == 0)
