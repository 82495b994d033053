"""STFT / iSTFT (周期 Hann 窗, 中心反射填充) 和 HTK mel 滤波器组。

张量约定: 波形 (..., T)，复数谱 (..., T_f, F)，F = n_fft // 2 + 1。
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torchaudio.functional as AF
from torch import Tensor

from app.audio.io import Waveform
from app.core.exceptions import (
    ArgumentError,
    ConfigError,
    DegenerateWindowError,
    EmptyInputError,
    LengthError,
)
from app.schemas.schemas import StftConfig


@dataclass
class ComplexSpectrogram:
    values: Tensor  # (C, T_f, F) complex
    config: StftConfig
    original_length: int
    sample_rate: int

    def __post_init__(self):
        if not torch.is_complex(self.values):
            raise ArgumentError("spectrogram values must be complex")
        if self.values.shape[-1] != self.config.n_bins:
            raise ArgumentError(
                f"expected {self.config.n_bins} frequency bins, got {self.values.shape[-1]}"
            )
        if not torch.isfinite(torch.view_as_real(self.values)).all():
            raise ArgumentError("spectrogram contains non-finite values")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[-2]


@dataclass(frozen=True)
class MelFilterbank:
    n_mels: int
    n_fft: int
    sample_rate: int
    f_min: float
    f_max: float
    weights: Tensor  # (n_mels, F), 非负


def hann_window(n: int, dtype: torch.dtype = torch.float64, device=None) -> Tensor:
    """周期 (DFT-even) Hann 窗: w[k] = 0.5 (1 - cos(2πk/n))。"""
    if n < 2:
        raise ArgumentError(f"window length must be >= 2, got {n}")
    return torch.hann_window(n, periodic=True, dtype=dtype, device=device)


def frame_count(length: int, cfg: StftConfig) -> int:
    if cfg.center:
        return length // cfg.hop_length + 1
    return (length - cfg.n_fft) // cfg.hop_length + 1


def stft_tensor(x: Tensor, n_fft: int, hop_length: int, center: bool = True) -> Tensor:
    """(..., T) 实数波形 -> (..., T_f, F) 复数谱，线性 (不归一化) DFT 约定。"""
    if x.shape[-1] == 0:
        raise EmptyInputError("cannot transform an empty signal")
    if center and x.shape[-1] <= n_fft // 2:
        raise LengthError(
            f"reflect padding needs more than {n_fft // 2} samples, got {x.shape[-1]}"
        )
    if not center and x.shape[-1] < n_fft:
        raise LengthError(f"signal shorter than the window ({x.shape[-1]} < {n_fft})")

    lead = x.shape[:-1]
    flat = x.reshape(-1, x.shape[-1])
    spec = torch.stft(
        flat,
        n_fft=n_fft,
        hop_length=hop_length,
        window=hann_window(n_fft, dtype=x.dtype, device=x.device),
        center=center,
        pad_mode="reflect",
        normalized=False,
        onesided=True,
        return_complex=True,
    )
    spec = spec.transpose(-1, -2)
    return spec.reshape(*lead, *spec.shape[-2:])


def istft_tensor(spec: Tensor, n_fft: int, hop_length: int, length: int, center: bool = True) -> Tensor:
    """(..., T_f, F) 复数谱 -> (..., length) 波形，窗平方归一化的重叠相加。"""
    lead = spec.shape[:-2]
    flat = spec.reshape(-1, *spec.shape[-2:]).transpose(-1, -2)
    real_dtype = spec.real.dtype if spec.is_complex() else spec.dtype
    try:
        wave = torch.istft(
            flat,
            n_fft=n_fft,
            hop_length=hop_length,
            window=hann_window(n_fft, dtype=real_dtype, device=spec.device),
            center=center,
            normalized=False,
            onesided=True,
            length=length,
        )
    except RuntimeError as e:
        if "overlap" in str(e).lower() or "nola" in str(e).lower():
            raise DegenerateWindowError(str(e)) from e
        raise
    return wave.reshape(*lead, wave.shape[-1])


def stft(w: Waveform, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    cfg = cfg or StftConfig()
    if w.length == 0:
        raise EmptyInputError("cannot transform an empty waveform")
    values = stft_tensor(w.to_tensor(), cfg.n_fft, cfg.hop_length, cfg.center)
    return ComplexSpectrogram(
        values=values,
        config=cfg,
        original_length=w.length,
        sample_rate=w.sample_rate,
    )


def istft(s: ComplexSpectrogram, cfg: StftConfig | None = None) -> Waveform:
    cfg = cfg or s.config
    if cfg != s.config:
        raise ConfigError(f"STFT config {cfg} does not match the spectrogram's {s.config}")
    wave = istft_tensor(s.values, cfg.n_fft, cfg.hop_length, s.original_length, cfg.center)
    return Waveform.from_tensor(wave, s.sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=64)
def mel_filterbank(
    n_fft: int,
    n_mels: int,
    sample_rate: int,
    f_min: float = 0.0,
    f_max: float | None = None,
) -> MelFilterbank:
    """HTK mel 刻度上的三角滤波器组，边界在 mel 轴上等距，不做面积归一化。"""
    f_max = sample_rate / 2 if f_max is None else f_max
    if n_mels < 1:
        raise ArgumentError(f"n_mels must be >= 1, got {n_mels}")
    if not (0.0 <= f_min < f_max <= sample_rate / 2):
        raise ArgumentError(
            f"need 0 <= f_min < f_max <= sample_rate/2, got f_min={f_min}, f_max={f_max}, sr={sample_rate}"
        )

    fbanks = AF.melscale_fbanks(
        n_freqs=n_fft // 2 + 1,
        f_min=float(f_min),
        f_max=float(f_max),
        n_mels=n_mels,
        sample_rate=sample_rate,
        norm=None,
        mel_scale="htk",
    )
    weights = fbanks.T.contiguous().clamp_min(0.0)
    empty = (weights.max(dim=1).values <= 0).nonzero().flatten().tolist()
    if empty:
        raise ArgumentError(
            f"{len(empty)} mel bands contain no FFT bin (n_fft={n_fft}, n_mels={n_mels}); "
            "use fewer mel bands or a longer window"
        )
    return MelFilterbank(
        n_mels=n_mels,
        n_fft=n_fft,
        sample_rate=sample_rate,
        f_min=float(f_min),
        f_max=float(f_max),
        weights=weights,
    )


def mel_magnitudes(x: Tensor, fb: MelFilterbank, hop_length: int | None = None) -> Tensor:
    """(..., T) 波形 -> (..., T_f, n_mels) 线性 mel 幅度谱，hop 默认为 n_fft/4。"""
    hop_length = hop_length or max(1, fb.n_fft // 4)
    magnitude = stft_tensor(x, fb.n_fft, hop_length).abs()
    return magnitude @ fb.weights.to(dtype=magnitude.dtype, device=magnitude.device).T

