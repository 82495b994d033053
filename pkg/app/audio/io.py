"""WAV 读写和内存中的波形表示。

整数 PCM 读入时除以 2^(bits-1) 映射到 [-1, 1]；float32 原样透传。
写 pcm16 时先截断到 [-1, 1]，再按四舍五入 (远离零) 量化。
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import soundfile as sf
import torch
from loguru import logger

from app.core.exceptions import (
    ArgumentError,
    AudioFormatError,
    CorruptFileError,
    UnsupportedFormatError,
)

WAVE_FORMAT_PCM = 1
WAVE_FORMAT_IEEE_FLOAT = 3
WAVE_FORMAT_EXTENSIBLE = 0xFFFE

Encoding = Literal["pcm16", "float32"]


@dataclass
class Waveform:
    """C 行 T 列的多通道波形 (samples[c, t])。"""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim == 1:
            samples = samples[np.newaxis, :]
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise ArgumentError(f"waveform must be (channels, samples), got shape {samples.shape}")
        if not np.issubdtype(samples.dtype, np.floating):
            samples = samples.astype(np.float32)
        if not np.all(np.isfinite(samples)):
            raise ArgumentError("waveform contains NaN or Inf samples")
        if int(self.sample_rate) <= 0:
            raise ArgumentError(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = samples
        self.sample_rate = int(self.sample_rate)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.length / self.sample_rate

    def to_tensor(self, dtype: torch.dtype | None = None) -> torch.Tensor:
        tensor = torch.from_numpy(np.ascontiguousarray(self.samples))
        return tensor if dtype is None else tensor.to(dtype)

    @classmethod
    def from_tensor(cls, tensor: torch.Tensor, sample_rate: int) -> "Waveform":
        return cls(tensor.detach().cpu().numpy(), sample_rate)

    def with_samples(self, samples: np.ndarray) -> "Waveform":
        return Waveform(samples, self.sample_rate)


@dataclass(frozen=True)
class WavInfo:
    sample_rate: int
    channels: int
    frames: int
    format_tag: int
    bits_per_sample: int


def _parse_header(path: Path) -> WavInfo:
    """逐个 chunk 解析 RIFF 头部，只读取元数据，不解码音频。"""
    file_size = path.stat().st_size
    with open(path, "rb") as f:
        riff = f.read(12)
        if len(riff) < 12 or riff[:4] != b"RIFF" or riff[8:12] != b"WAVE":
            raise AudioFormatError(f"{path}: not a RIFF/WAVE file")

        fmt: tuple[int, int, int, int, int] | None = None
        while True:
            header = f.read(8)
            if len(header) < 8:
                break
            chunk_id, chunk_size = struct.unpack("<4sI", header)
            chunk_start = f.tell()

            if chunk_id == b"fmt ":
                body = f.read(chunk_size)
                if len(body) < 16:
                    raise AudioFormatError(f"{path}: fmt chunk too short ({len(body)} bytes)")
                format_tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", body[:16])
                if format_tag == WAVE_FORMAT_EXTENSIBLE and len(body) >= 26:
                    # 扩展格式的真实编码在 SubFormat GUID 的前两个字节
                    format_tag = struct.unpack("<H", body[24:26])[0]
                fmt = (format_tag, channels, rate, block_align, bits)
            elif chunk_id == b"data":
                if fmt is None:
                    raise AudioFormatError(f"{path}: data chunk precedes fmt chunk")
                format_tag, channels, rate, block_align, bits = fmt
                _check_codec(path, format_tag, bits)
                if channels < 1 or rate < 1 or block_align < 1:
                    raise AudioFormatError(f"{path}: invalid fmt fields (channels={channels}, rate={rate})")
                available = file_size - chunk_start
                if chunk_size > available:
                    raise CorruptFileError(
                        f"{path}: data chunk declares {chunk_size} bytes but only {available} are present"
                    )
                return WavInfo(
                    sample_rate=rate,
                    channels=channels,
                    frames=chunk_size // block_align,
                    format_tag=format_tag,
                    bits_per_sample=bits,
                )
            # chunk 按偶数字节对齐
            f.seek(chunk_start + chunk_size + (chunk_size & 1))

    if fmt is None:
        raise AudioFormatError(f"{path}: missing fmt chunk")
    raise AudioFormatError(f"{path}: missing data chunk")


def _check_codec(path: Path, format_tag: int, bits: int) -> None:
    if format_tag == WAVE_FORMAT_PCM and bits in (16, 24):
        return
    if format_tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        return
    raise UnsupportedFormatError(f"{path}: unsupported encoding (format tag {format_tag}, {bits} bits)")


def audio_info(path: str | Path) -> WavInfo:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"音频文件不存在: {path}")
    return _parse_header(path)


def read_wav(path: str | Path, offset: int = 0, frames: int = -1) -> Waveform:
    """
    读取 WAV 文件。

    Args:
        path: 文件路径。
        offset: 起始帧，用于分块读取。
        frames: 读取帧数，-1 表示读到文件末尾。
    """
    path = Path(path)
    info = audio_info(path)

    if info.format_tag == WAVE_FORMAT_IEEE_FLOAT:
        dtype, scale = "float32", None
    elif info.bits_per_sample == 16:
        dtype, scale = "int16", 2.0**15
    else:
        # 24-bit 样本被 libsndfile 左移 8 位放进 int32，除以 2^31 与除以 2^23 等价
        dtype, scale = "int32", 2.0**31

    try:
        data, _ = sf.read(path, start=offset, frames=frames, dtype=dtype, always_2d=True)
    except (sf.LibsndfileError, RuntimeError) as e:
        logger.error(f"Failed to decode {path}: {e}")
        raise AudioFormatError(f"{path}: {e}") from e

    samples = np.ascontiguousarray(data.T)
    if scale is not None:
        samples = (samples.astype(np.float64) / scale).astype(np.float32)
    return Waveform(samples, info.sample_rate)


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    scaled = np.clip(samples, -1.0, 1.0) * 32768.0
    # round-half-away-from-zero
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(rounded, -32768, 32767).astype(np.int16)


def write_wav(path: str | Path, w: Waveform, encoding: Encoding = "pcm16") -> None:
    path = Path(path)
    if encoding == "pcm16":
        data, subtype = quantize_pcm16(w.samples), "PCM_16"
    elif encoding == "float32":
        data, subtype = w.samples.astype(np.float32), "FLOAT"
    else:
        raise ArgumentError(f"unknown encoding: {encoding}")

    try:
        sf.write(path, np.ascontiguousarray(data.T), w.sample_rate, subtype=subtype, format="WAV")
    except (sf.LibsndfileError, RuntimeError) as e:
        logger.error(f"Failed to write {path}: {e}")
        raise OSError(f"cannot write {path}: {e}") from e
