from pathlib import Path

import numpy as np
import torch
from loguru import logger

from app.audio.io import Encoding, Waveform, read_wav, write_wav
from app.core.config import settings
from app.core.device import select_device
from app.core.exceptions import ArgumentError, ConfigMismatchError
from app.model.generator import Generator, generator_forward
from app.training.service import load_generator


def crossfade_weights(length: int, fade: int, fade_in: bool, fade_out: bool) -> np.ndarray:
    """长度为 length 的分块权重，两端各 fade 个样本做三角 (线性) 淡入淡出，权重始终 > 0。"""
    w = np.ones(length, dtype=np.float64)
    fade = min(fade, length)
    if fade > 0:
        ramp = (np.arange(fade) + 0.5) / fade
        if fade_in:
            w[:fade] = ramp
        if fade_out:
            w[length - fade :] = np.minimum(w[length - fade :], ramp[::-1])
    return w


def chunk_starts(total: int, chunk: int, hop: int) -> list[int]:
    if total <= chunk:
        return [0]
    starts = list(range(0, total - chunk, hop))
    starts.append(total - chunk)
    return starts


class RestorationService:
    def __init__(
        self,
        checkpoint: Path,
        chunk_seconds: float | None = None,
        overlap: float | None = None,
        device: torch.device | None = None,
    ):
        """
        分块推理服务: 长音频切成重叠的块，逐块过生成器，再做三角交叉淡化的重叠相加。
        生成器在第一次调用时才加载。
        """
        self.checkpoint = Path(checkpoint)
        self.chunk_seconds = chunk_seconds if chunk_seconds is not None else settings.RESTORE_CHUNK_SECONDS
        self.overlap = overlap if overlap is not None else settings.RESTORE_OVERLAP
        if self.chunk_seconds <= 0.0:
            raise ArgumentError(f"chunk_seconds must be positive, got {self.chunk_seconds}")
        if not 0.0 <= self.overlap < 1.0:
            raise ArgumentError(f"overlap must lie in [0, 1), got {self.overlap}")
        self.device = device
        self._generator: Generator | None = None
        self.step: int | None = None

    @property
    def generator(self) -> Generator:
        if self._generator is None:
            logger.info(f"首次加载生成器: {self.checkpoint}...")
            self.device = self.device or select_device()
            self._generator, self.step = load_generator(self.checkpoint, self.device)
            logger.info(f"生成器加载完成 (step {self.step})，device={self.device}")
        return self._generator

    def _single_pass(self, w: Waveform) -> Waveform:
        n_fft = self.generator.cfg.stft.n_fft
        if w.length >= n_fft:
            return generator_forward(w, self.generator, train_mode=False)
        # 短于一个 STFT 窗的输入补零后再裁回
        padded = np.zeros((w.channels, n_fft), dtype=w.samples.dtype)
        padded[:, : w.length] = w.samples
        out = generator_forward(w.with_samples(padded), self.generator, train_mode=False)
        return out.with_samples(out.samples[:, : w.length])

    def restore(self, w: Waveform) -> Waveform:
        channels = self.generator.cfg.channels
        if w.channels != channels:
            raise ConfigMismatchError(f"checkpoint expects {channels} channels, input has {w.channels}")
        if w.length == 0:
            return w.with_samples(w.samples.copy())

        chunk = max(1, int(round(self.chunk_seconds * w.sample_rate)))
        if w.length <= chunk:
            return self._single_pass(w)

        fade = int(round(chunk * self.overlap))
        hop = max(1, chunk - fade)
        starts = chunk_starts(w.length, chunk, hop)
        logger.debug(f"分块推理: {len(starts)} 块, chunk={chunk}, overlap={fade}")

        numerator = np.zeros(w.samples.shape, dtype=np.float64)
        denominator = np.zeros(w.length, dtype=np.float64)
        for i, start in enumerate(starts):
            piece = w.with_samples(w.samples[:, start : start + chunk])
            out = self._single_pass(piece).samples.astype(np.float64)
            weight = crossfade_weights(chunk, fade, fade_in=i > 0, fade_out=i < len(starts) - 1)
            numerator[:, start : start + chunk] += out * weight
            denominator[start : start + chunk] += weight
        return w.with_samples((numerator / denominator).astype(np.float32))

    def restore_file(self, input_path: Path, output_path: Path, encoding: Encoding = "float32") -> Waveform:
        w = read_wav(input_path)
        logger.info(f"开始修复: {input_path} ({w.channels}ch, {w.duration:.2f}s)")
        restored = self.restore(w)
        Path(output_path).parent.mkdir(parents=True, exist_ok=True)
        write_wav(output_path, restored, encoding)
        logger.info(f"修复完成: {output_path}")
        return restored
