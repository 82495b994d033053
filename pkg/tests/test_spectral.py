import numpy as np
import pytest
import torch

from app.audio.io import Waveform
from app.audio.spectral import (
    frame_count,
    hann_window,
    hz_to_mel,
    istft,
    istft_tensor,
    mel_filterbank,
    mel_magnitudes,
    mel_to_hz,
    stft,
    stft_tensor,
)
from app.core.exceptions import (
    ArgumentError,
    ConfigError,
    DegenerateWindowError,
    EmptyInputError,
    LengthError,
)
from app.schemas.schemas import StftConfig


def test_stft_istft_round_trip_default_geometry(rng):
    cfg = StftConfig(n_fft=2048, hop_length=512)
    for _ in range(20):
        w = Waveform(rng.uniform(-1, 1, (2, 44100)), 44100)
        back = istft(stft(w, cfg))
        assert back.samples.shape == w.samples.shape
        assert np.max(np.abs(back.samples - w.samples)) < 1e-6


def test_frame_count_matches_transform(rng):
    cfg = StftConfig(n_fft=256, hop_length=64)
    for length in (129, 1000, 4096, 4097):
        s = stft(Waveform(rng.standard_normal((1, length)), 8000), cfg)
        assert s.frames == frame_count(length, cfg) == length // 64 + 1
        assert s.values.shape[-1] == cfg.n_bins


def test_hann_window_is_periodic():
    w = hann_window(8)
    assert w[0] == 0.0
    assert w[4] == pytest.approx(1.0)
    with pytest.raises(ArgumentError):
        hann_window(1)


def test_short_and_empty_inputs():
    with pytest.raises(EmptyInputError):
        stft_tensor(torch.zeros(1, 0), 64, 16)
    with pytest.raises(LengthError):
        stft_tensor(torch.zeros(1, 32), 64, 16)


def test_istft_rejects_a_different_config(rng):
    s = stft(Waveform(rng.standard_normal((1, 2048)), 8000), StftConfig(n_fft=256, hop_length=64))
    with pytest.raises(ConfigError):
        istft(s, StftConfig(n_fft=256, hop_length=128))


def test_non_overlapping_hann_frames_cannot_be_inverted():
    spec = stft_tensor(torch.randn(1, 160, dtype=torch.float64), 16, 16, center=False)
    with pytest.raises(DegenerateWindowError):
        istft_tensor(spec, 16, 16, length=160, center=False)


def test_mel_scale_round_trip():
    f = np.array([0.0, 100.0, 1000.0, 8000.0])
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, atol=1e-9)
    assert hz_to_mel(1000.0) == pytest.approx(999.99, abs=0.1)


def test_mel_filterbank_shape_and_errors():
    fb = mel_filterbank(256, 16, 8000)
    assert fb.weights.shape == (16, 129)
    assert (fb.weights >= 0).all()
    assert (fb.weights.max(dim=1).values > 0).all()

    with pytest.raises(ArgumentError):
        mel_filterbank(64, 64, 8000)
    with pytest.raises(ArgumentError):
        mel_filterbank(256, 16, 8000, f_min=5000.0)


def test_mel_magnitudes_are_linear_in_scale(rng):
    fb = mel_filterbank(256, 16, 8000)
    x = torch.from_numpy(rng.standard_normal((1, 4000)))
    m1 = mel_magnitudes(x, fb)
    m2 = mel_magnitudes(3.0 * x, fb)
    assert m1.shape == (1, 4000 // 64 + 1, 16)
    torch.testing.assert_close(m2, 3.0 * m1)


# ===== 谱的数值性质 =====


def _interior(s, cfg: StftConfig) -> slice:
    # 不受反射填充影响的帧
    edge = cfg.n_fft // cfg.hop_length
    return slice(edge, s.frames - edge)


def test_dc_signal_concentrates_in_bin_zero():
    cfg = StftConfig(n_fft=2048, hop_length=512)
    s = stft(Waveform(np.ones((1, 44100)), 44100), cfg)
    frames = s.values[0, _interior(s, cfg)]
    torch.testing.assert_close(frames[:, 0].real, torch.full_like(frames[:, 0].real, 1024.0))
    # Hann 窗的频谱只有 0 和 ±1 两个非零系数
    torch.testing.assert_close(frames[:, 1].abs(), torch.full_like(frames[:, 1].real, 512.0))
    assert frames[:, 2:].abs().max() < 1e-6


def test_bin_centred_sine_peaks_at_its_bin():
    cfg = StftConfig(n_fft=2048, hop_length=512)
    sr = 44100
    t = np.arange(44100) / sr
    s = stft(Waveform(np.sin(2 * np.pi * 86 * sr / 2048 * t)[np.newaxis, :], sr), cfg)
    magnitude = s.values[0, _interior(s, cfg)].abs()
    assert torch.all(magnitude.argmax(dim=-1) == 86)
    assert torch.all(magnitude[:, 84:89].sum(dim=-1) > 0.999 * magnitude.sum(dim=-1))


def test_stft_is_linear(rng):
    cfg = StftConfig(n_fft=256, hop_length=64)
    x, y = rng.uniform(-1, 1, (2, 4000)), rng.uniform(-1, 1, (2, 4000))
    a, b = 0.7, -2.5
    mixed = stft(Waveform(a * x + b * y, 8000), cfg).values
    separate = a * stft(Waveform(x, 8000), cfg).values + b * stft(Waveform(y, 8000), cfg).values
    torch.testing.assert_close(mixed, separate)


def test_frame_energy_matches_spectral_energy(rng):
    n_fft, hop = 512, 128
    x = torch.from_numpy(rng.uniform(-1, 1, 8192))
    spec = stft_tensor(x, n_fft, hop, center=False)
    window = hann_window(n_fft)

    power = spec.abs() ** 2
    spectral = (power[:, 0] + power[:, -1] + 2 * power[:, 1:-1].sum(dim=-1)) / n_fft
    frames = x.unfold(0, n_fft, hop) * window
    temporal = (frames**2).sum(dim=-1)
    assert torch.max(torch.abs(spectral - temporal) / temporal) < 1e-4


def test_hann_squares_sum_to_a_constant_at_quarter_hop():
    n, hop = 2048, 512
    w2 = hann_window(n).numpy() ** 2
    total = np.zeros(n * 8)
    for start in range(0, total.size - n + 1, hop):
        total[start : start + n] += w2
    steady = total[n : -n]
    assert steady.max() - steady.min() < 1e-12
    assert steady.mean() == pytest.approx(1.5)


def test_htk_mel_of_700_hz():
    assert hz_to_mel(700.0) == pytest.approx(2595.0 * np.log10(2.0))
    assert hz_to_mel(700.0) == pytest.approx(781.17, abs=0.01)


def test_single_mel_band_peaks_mid_band():
    fb = mel_filterbank(2048, 1, 44100)
    weights = fb.weights[0]
    assert (weights >= 0).all()
    peak_hz = int(weights.argmax()) * 44100 / 2048
    assert peak_hz == pytest.approx(float(mel_to_hz(hz_to_mel(22050.0) / 2)), abs=44100 / 2048)


def test_filterbank_covers_every_interior_bin():
    fb = mel_filterbank(2048, 160, 44100)
    coverage = fb.weights.sum(dim=0)
    assert (coverage[1:-1] > 0).all()
