"""
训练数据退化链: 压缩 / 限幅 / 谐波失真 / 混响 / 随机重采样。

所有效果都保持通道数、采样率和长度不变；内部用 float64 计算，输出沿用输入的 dtype。
随机性只来自调用方传入的 numpy Generator。
"""

from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torchaudio.functional as AF
from loguru import logger
from numba import njit
from scipy.signal import fftconvolve

from app.audio.io import Waveform, read_wav
from app.core.exceptions import ArgumentError
from app.schemas.schemas import EffectChainSpec

KAISER_BETA = 14.769656459379492
RESAMPLE_FILTER_WIDTH = 16
RESAMPLE_ROLLOFF = 0.945
LEVEL_FLOOR = 1e-12


def db_to_amp(db: float) -> float:
    return float(10.0 ** (db / 20.0))


def _time_coeff(ms: float, sample_rate: int) -> float:
    """一阶平滑系数 exp(-1 / (τ·sr))；τ = 0 时为瞬时响应。"""
    if ms <= 0.0:
        return 0.0
    return float(np.exp(-1.0 / (ms * 1e-3 * sample_rate)))


def _finish(w: Waveform, out: np.ndarray) -> Waveform:
    return w.with_samples(out.astype(w.samples.dtype, copy=False))


# ===================================================================
# 动态处理
# ===================================================================


@njit(cache=True)
def _compressor_gain_db(level, threshold_db, ratio, attack_coeff, release_coeff):
    n = level.shape[0]
    gain_db = np.zeros(n)
    slope = 1.0 - 1.0 / ratio
    env = 0.0
    for i in range(n):
        x = level[i]
        # 上升用 attack，下降用 release
        coeff = attack_coeff if x > env else release_coeff
        env = coeff * env + (1.0 - coeff) * x
        env_db = 20.0 * np.log10(max(env, 1e-12))
        gain_db[i] = min(0.0, (threshold_db - env_db) * slope)
    return gain_db


@njit(cache=True)
def _limiter_gain(level, ceiling, release_coeff):
    n = level.shape[0]
    gain = np.ones(n)
    prev = 1.0
    for i in range(n):
        target = 1.0
        if level[i] > ceiling:
            target = ceiling / level[i]
        # 释放阶段向瞬时增益缓慢回升，但不超过瞬时增益
        smoothed = release_coeff * prev + (1.0 - release_coeff) * target
        prev = min(target, smoothed)
        gain[i] = prev
    return gain


def compress(
    w: Waveform,
    threshold: float,
    ratio: float,
    attack: float,
    release: float,
    makeup: float = 0.0,
) -> Waveform:
    """
    前馈压缩器。

    Args:
        threshold: 阈值 (dBFS)。
        ratio: 压缩比，>= 1。
        attack / release: 包络的启动 / 释放时间 (ms)，0 表示瞬时。
        makeup: 补偿增益 (dB)。
    """
    if ratio < 1.0:
        raise ArgumentError(f"compressor ratio must be >= 1, got {ratio}")
    x = w.samples.astype(np.float64)
    # 各通道联动: 用通道间最大绝对值作为检测电平
    level = np.abs(x).max(axis=0)
    gain_db = _compressor_gain_db(
        level,
        float(threshold),
        float(ratio),
        _time_coeff(attack, w.sample_rate),
        _time_coeff(release, w.sample_rate),
    )
    out = x * (10.0 ** ((gain_db + makeup) / 20.0))[np.newaxis, :]
    return _finish(w, out)


def limit(w: Waveform, ceiling: float, release: float = 50.0) -> Waveform:
    """峰值限幅器: 输出样本绝对值不超过 10^(ceiling/20)。"""
    if ceiling > 0.0:
        raise ArgumentError(f"limiter ceiling must be <= 0 dBFS, got {ceiling}")
    ceiling_amp = db_to_amp(ceiling)
    x = w.samples.astype(np.float64)
    level = np.abs(x).max(axis=0)
    gain = _limiter_gain(level, ceiling_amp, _time_coeff(release, w.sample_rate))
    out = x * gain[np.newaxis, :]

    bound = np.asarray(ceiling_amp, dtype=w.samples.dtype)
    if bound > ceiling_amp:
        bound = np.nextafter(bound, np.zeros_like(bound))
    return w.with_samples(np.clip(out.astype(w.samples.dtype), -bound, bound))


def distort(w: Waveform, drive: float) -> Waveform:
    """无记忆波形整形 tanh(d·x)/tanh(d)，d -> 0 时退化为恒等。"""
    if drive < 0.0:
        raise ArgumentError(f"drive must be >= 0, got {drive}")
    if drive < 1e-6:
        return w.with_samples(w.samples.copy())
    x = w.samples.astype(np.float64)
    return _finish(w, np.tanh(drive * x) / np.tanh(drive))


# ===================================================================
# 混响
# ===================================================================


def synth_impulse_response(
    decay_s: float,
    length_s: float,
    sample_rate: int,
    rng: np.random.Generator,
    channels: int = 1,
) -> Waveform:
    """指数衰减白噪声，在 decay_s 处衰减 60 dB，能量归一化为 1。"""
    if decay_s <= 0.0 or length_s <= 0.0:
        raise ArgumentError("decay and length must be positive")
    n = max(1, int(round(length_s * sample_rate)))
    t = np.arange(n) / sample_rate
    envelope = np.exp(-np.log(1000.0) * t / decay_s)
    ir = rng.standard_normal((channels, n)) * envelope
    ir /= np.sqrt(np.sum(ir**2, axis=-1, keepdims=True)) + LEVEL_FLOOR
    return Waveform(ir.astype(np.float32), sample_rate)


@lru_cache(maxsize=32)
def load_impulse_response(path: str | Path) -> Waveform:
    ir = read_wav(path)
    logger.debug(f"Loaded impulse response {path}: {ir.channels}ch, {ir.duration:.2f}s")
    return ir


def reverb(w: Waveform, ir: Waveform, wet: float = 1.0) -> Waveform:
    """逐通道线性卷积并截断到输入长度，out = (1 - wet)·dry + wet·wet_signal。"""
    if ir.sample_rate != w.sample_rate:
        raise ArgumentError(f"impulse response rate {ir.sample_rate} != signal rate {w.sample_rate}")
    if ir.channels not in (1, w.channels):
        raise ArgumentError(f"impulse response has {ir.channels} channels, signal has {w.channels}")
    if not 0.0 <= wet <= 1.0:
        raise ArgumentError(f"wet mix must lie in [0, 1], got {wet}")

    x = w.samples.astype(np.float64)
    kernel = np.broadcast_to(ir.samples.astype(np.float64), (w.channels, ir.length))
    wet_signal = fftconvolve(x, kernel, mode="full", axes=-1)[:, : w.length]
    return _finish(w, (1.0 - wet) * x + wet * wet_signal)


# ===================================================================
# 重采样
# ===================================================================


def _resample_tensor(x: torch.Tensor, orig: int, new: int) -> torch.Tensor:
    return AF.resample(
        x,
        orig,
        new,
        lowpass_filter_width=RESAMPLE_FILTER_WIDTH,
        rolloff=RESAMPLE_ROLLOFF,
        resampling_method="sinc_interp_kaiser",
        beta=KAISER_BETA,
    )


def random_resample(w: Waveform, factor: float, granularity_hz: int = 100) -> Waveform:
    """重采样到 sr·factor (按 granularity_hz 取整) 再回到原采样率，模拟分辨率损失。"""
    if factor <= 0.0:
        raise ArgumentError(f"resample factor must be > 0, got {factor}")
    sr = w.sample_rate
    target = max(granularity_hz, int(round(sr * factor / granularity_hz)) * granularity_hz)
    if target == sr:
        return w.with_samples(w.samples.copy())

    x = w.to_tensor(torch.float64)
    y = _resample_tensor(_resample_tensor(x, sr, target), target, sr)
    if y.shape[-1] >= w.length:
        y = y[..., : w.length]
    else:
        y = torch.nn.functional.pad(y, (0, w.length - y.shape[-1]))
    return _finish(w, y.numpy())


# ===================================================================
# 训练样本对
# ===================================================================


def _uniform(rng: np.random.Generator, bounds: tuple[float, float]) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def _stem_chain(w: Waveform, spec: EffectChainSpec, rng: np.random.Generator) -> Waveform:
    p = spec.probabilities
    if rng.random() < p.compressor:
        c = spec.compressor
        w = compress(
            w,
            threshold=_uniform(rng, c.threshold_db),
            ratio=_uniform(rng, c.ratio),
            attack=_uniform(rng, c.attack_ms),
            release=_uniform(rng, c.release_ms),
            makeup=_uniform(rng, c.makeup_db),
        )
    if rng.random() < p.distortion:
        w = distort(w, _uniform(rng, spec.distortion.drive))
    if rng.random() < p.reverb:
        r = spec.reverb
        wet = _uniform(rng, r.wet)
        if r.ir_paths:
            ir = load_impulse_response(str(r.ir_paths[int(rng.integers(len(r.ir_paths)))]))
        else:
            ir = synth_impulse_response(_uniform(rng, r.decay_s), r.ir_length_s, w.sample_rate, rng)
        w = reverb(w, ir, wet)
    if rng.random() < p.resample:
        w = random_resample(w, _uniform(rng, spec.resample.factor), spec.resample.granularity_hz)
    return w


def build_training_pair(
    stems: list[Waveform],
    target_index: int,
    spec: EffectChainSpec | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Waveform, Waveform]:
    """
    由原始分轨合成 (退化混音, 目标分轨)。

    每个分轨按概率独立经过 压缩 -> 失真 -> 混响 -> 重采样，求和后再按概率经过
    总线压缩和限幅，最后峰值归一化到 mix_peak_db 以下。目标分轨原样返回 (拷贝)。
    随机数的抽取顺序固定，同一 rng 状态得到逐位相同的结果。
    """
    spec = spec or EffectChainSpec()
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    if not stems:
        raise ArgumentError("build_training_pair needs at least one stem")
    if not 0 <= target_index < len(stems):
        raise ArgumentError(f"target_index {target_index} out of range for {len(stems)} stems")
    first = stems[0]
    for s in stems[1:]:
        if s.samples.shape != first.samples.shape or s.sample_rate != first.sample_rate:
            raise ArgumentError("all stems must share channel count, length and sample rate")

    mix = np.zeros(first.samples.shape, dtype=np.float64)
    for stem in stems:
        mix += _stem_chain(stem, spec, rng).samples
    mixture = Waveform(mix, first.sample_rate)

    p = spec.probabilities
    if rng.random() < p.bus_compressor:
        c = spec.compressor
        mixture = compress(
            mixture,
            threshold=_uniform(rng, c.threshold_db),
            ratio=_uniform(rng, c.ratio),
            attack=_uniform(rng, c.attack_ms),
            release=_uniform(rng, c.release_ms),
            makeup=_uniform(rng, c.makeup_db),
        )
    if rng.random() < p.limiter:
        mixture = limit(mixture, _uniform(rng, spec.limiter.ceiling_db), spec.limiter.release_ms)

    peak = float(np.max(np.abs(mixture.samples))) if mixture.length else 0.0
    scale = min(1.0, db_to_amp(spec.mix_peak_db) / peak) if peak > 0.0 else 1.0
    mixture = Waveform((mixture.samples * scale).astype(first.samples.dtype), first.sample_rate)

    target = stems[target_index]
    return mixture, Waveform(target.samples.copy(), target.sample_rate)
