import numpy as np
import pytest

from sparse_amt.exceptions import InputError
from sparse_amt.frontend import (
    AudioBuffer, FrontendConfig, LogMelSpectrogram, frame_signal, hann_window, hz_to_mel,
    mel_filterbank, mel_spectrogram, mel_to_hz, power_spectrogram, read_features, read_wav,
    resample, write_features, write_wav,
)

SR = 16000


def tone(freq, seconds=1.0, amp=0.5, sr=SR):
    t = np.arange(int(sr * seconds)) / sr
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t), sr)


def test_resample_identity():
    a = tone(100)
    b = resample(a, SR)
    assert b.sample_rate == SR and np.array_equal(a.samples, b.samples)


def test_resample_length_and_constant():
    assert len(resample(AudioBuffer(np.zeros(8), 8000), 16000).samples) == 16
    out = resample(AudioBuffer(np.full(101, 0.5), 44100), 16000)
    assert len(out.samples) == round(101 * 16000 / 44100)
    assert np.allclose(out.samples, 0.5)
    assert len(resample(AudioBuffer(np.zeros(0), 8000), 16000).samples) == 0


def test_audio_buffer_invariants():
    with pytest.raises(InputError):
        AudioBuffer([0.0, np.nan], SR)
    with pytest.raises(InputError):
        AudioBuffer([0.0], 0)
    with pytest.raises(InputError):
        resample(AudioBuffer([0.0], SR), 0)


def test_silence_is_log_floor():
    feats = mel_spectrogram(AudioBuffer(np.zeros(SR), SR))
    assert feats.shape == (51, 512)
    assert np.all(feats == np.log(1e-5))
    assert abs(np.log(1e-5) + 11.5129) < 1e-4


@pytest.mark.parametrize("n, frames", [(SR, 51), (319, 1), (1, 1), (320, 2), (0, 1)])
def test_frame_count(n, frames):
    assert mel_spectrogram(AudioBuffer(np.zeros(n), SR)).shape == (frames, 512)


def test_pure_tone_argmax_is_stationary():
    feats = mel_spectrogram(tone(440.0))
    peaks = feats[5:-5].argmax(axis=1)
    assert len(set(peaks.tolist())) == 1
    fb = mel_filterbank(SR, 2048, 512, 20.0, 7600.0)
    peak_hz = np.linspace(0, SR / 2, 1025)[fb[peaks[0]].argmax()]
    assert abs(peak_hz - 440.0) < 20.0


def test_parseval_per_frame():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(4000)
    n_fft, hop = 256, 64
    power = power_spectrogram(x, n_fft, hop)
    frames = frame_signal(x, n_fft, hop) * hann_window(n_fft)
    for k in range(len(frames)):
        spec_energy = (power[k, 0] + 2 * power[k, 1:-1].sum() + power[k, -1]) / n_fft
        time_energy = np.sum(frames[k] ** 2)
        assert abs(spec_energy - time_energy) <= 1e-6 * time_energy


def test_louder_is_not_smaller():
    rng = np.random.default_rng(1)
    x = rng.uniform(-0.3, 0.3, 8000)
    quiet = mel_spectrogram(AudioBuffer(x, SR))
    loud = mel_spectrogram(AudioBuffer(2.5 * x, SR))
    assert np.all(loud >= quiet)


def test_deterministic():
    a = tone(261.6, 0.5)
    assert mel_spectrogram(a).tobytes() == mel_spectrogram(a).tobytes()


def test_wrong_rate_is_rejected():
    with pytest.raises(InputError):
        mel_spectrogram(tone(440.0, sr=8000))


def test_mel_scale_roundtrip():
    f = np.array([0.0, 20.0, 440.0, 7600.0])
    assert np.allclose(mel_to_hz(hz_to_mel(f)), f)
    assert abs(hz_to_mel(1000.0) - 1000.0) < 0.1


def test_filterbank_area_normalized():
    fb = mel_filterbank(SR, 2048, 40, 20.0, 7600.0)
    df = SR / 2048
    # each triangle integrates to one in Hz (up to sampling of the triangle)
    assert np.allclose(fb.sum(axis=1) * df, 1.0, atol=0.1)
    assert fb.min() >= 0
    with pytest.raises(InputError):
        mel_filterbank(SR, 2048, 40, 500.0, 100.0)


def test_transformer_resamples_input():
    x = tone(440.0, 0.5, sr=8000).samples
    out = LogMelSpectrogram(input_rate=8000).fit().transform([x])
    assert out[0].shape == (26, 512)
    assert LogMelSpectrogram().get_params()["n_mels"] == 512


def test_wav_roundtrip(tmp_path):
    a = tone(440.0, 0.25)
    write_wav(tmp_path / "a.wav", a)
    b = read_wav(tmp_path / "a.wav")
    assert b.sample_rate == SR
    assert np.max(np.abs(a.samples - b.samples)) <= 1 / 32768


def test_wav_first_channel(tmp_path):
    import wave
    left = (np.arange(100) * 10).astype("<i2")
    right = -left
    with wave.open(str(tmp_path / "st.wav"), "wb") as w:
        w.setnchannels(2)
        w.setsampwidth(2)
        w.setframerate(8000)
        w.writeframes(np.stack([left, right], axis=1).tobytes())
    a = read_wav(tmp_path / "st.wav")
    assert np.array_equal(a.samples, left / 32768.0)


def test_bad_wav(tmp_path):
    p = tmp_path / "x.wav"
    p.write_bytes(b"not a wav file at all")
    with pytest.raises(InputError):
        read_wav(p)


def test_feature_dump(tmp_path):
    x = np.arange(12, dtype=np.float32).reshape(3, 4)
    write_features(tmp_path / "f.bin", x)
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:8] == (3).to_bytes(4, "little") + (4).to_bytes(4, "little")
    assert len(raw) == 8 + 12 * 4
    assert np.array_equal(read_features(tmp_path / "f.bin"), x)
    (tmp_path / "g.bin").write_bytes(raw[:-4])
    with pytest.raises(InputError):
        read_features(tmp_path / "g.bin")


def test_config_defaults():
    cfg = FrontendConfig()
    assert (cfg.sample_rate, cfg.n_fft, cfg.hop_length, cfg.n_mels) == (16000, 2048, 320, 512)
    assert cfg.hop_seconds == 0.02
