"""
确定性的合成分轨数据集，目录结构与训练数据一致: <out_dir>/song_XXX/<stem>.wav。

各分轨的合成方法固定:
    vocals      带颤音的谐波序列 (180-320 Hz 基频，6 个谐波)
    guitar      Karplus-Strong 拨弦
    keyboard    指数衰减的加法合成和弦
    synth       失谐的双锯齿波
    bass        40-80 Hz 正弦
    drums       下扫频底鼓 + 噪声军鼓
    percussion  高通滤波的短噪声脉冲
    orchestra   慢起音的颤音合奏
"""

from pathlib import Path

import numpy as np
from loguru import logger
from scipy.signal import butter, lfilter, sawtooth, sosfilt

from app.audio.io import Waveform, write_wav
from app.schemas.schemas import STEM_LABELS, DatasetIndex, ToySpec
from app.training.dataset import scan_dataset

PEAK_AMPLITUDE = 10.0 ** (-1.0 / 20.0) * 0.95


def _add(signal: np.ndarray, note: np.ndarray, start: int) -> None:
    end = min(len(signal), start + len(note))
    if end > start:
        signal[start:end] += note[: end - start]


def _vocals(t: np.ndarray, sr: int, rng: np.random.Generator) -> np.ndarray:
    f0 = rng.uniform(180.0, 320.0)
    freq = f0 * (1.0 + 0.02 * np.sin(2 * np.pi * 5.5 * t))
    phase = 2 * np.pi * np.cumsum(freq) / sr
    voice = sum(np.sin(k * phase) / k for k in range(1, 7))
    syllables = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(1.5, 3.0) * t) ** 2
    return voice * syllables


def _guitar(t: np.ndarray, sr: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros_like(t)
    note_len = int(0.5 * sr)
    for start in range(0, len(t), note_len):
        freq = rng.choice([196.0, 246.9, 293.7, 392.0])
        period = max(2, int(round(sr / freq)))
        excitation = np.zeros(note_len)
        excitation[:period] = rng.uniform(-1.0, 1.0, period)
        # y[n] = x[n] + 0.498·(y[n-P] + y[n-P-1])
        a = np.zeros(period + 2)
        a[0] = 1.0
        a[period] = a[period + 1] = -0.498
        _add(out, lfilter([1.0], a, excitation), start)
    return out


def _keyboard(t: np.ndarray, sr: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros_like(t)
    note_len = sr
    tn = np.arange(note_len) / sr
    for start in range(0, len(t), note_len):
        root = rng.choice([261.6, 293.7, 329.6, 349.2])
        chord = np.zeros(note_len)
        for ratio in (1.0, 1.25, 1.5):
            for k in range(1, 5):
                chord += np.sin(2 * np.pi * root * ratio * k * tn) / k**2
        _add(out, chord * np.exp(-3.0 * tn), start)
    return out


def _synth(t: np.ndarray, sr: int, rng: np.random.Generator) -> np.ndarray:
    freq = rng.choice([110.0, 130.8, 146.8])
    return 0.5 * (sawtooth(2 * np.pi * freq * t) + sawtooth(2 * np.pi * freq * 1.01 * t))


def _bass(t: np.ndarray, sr: int, rng: np.random.Generator) -> np.ndarray:
    return np.sin(2 * np.pi * rng.uniform(40.0, 80.0) * t)


def _drums(t: np.ndarray, sr: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros_like(t)
    beat = int(0.5 * sr)
    hit_len = min(beat, int(0.25 * sr))
    th = np.arange(hit_len) / sr
    # 底鼓: 150 -> 50 Hz 指数下扫
    kick_freq = 50.0 + 100.0 * np.exp(-th / 0.03)
    kick = np.sin(2 * np.pi * np.cumsum(kick_freq) / sr) * np.exp(-th / 0.08)
    for i, start in enumerate(range(0, len(t), beat)):
        if i % 2 == 0:
            _add(out, kick, start)
        else:
            snare = rng.uniform(-1.0, 1.0, hit_len) * np.exp(-th / 0.05)
            _add(out, snare, start)
    return out


def _percussion(t: np.ndarray, sr: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros_like(t)
    step = max(1, int(0.125 * sr))
    burst_len = max(1, int(0.03 * sr))
    tb = np.arange(burst_len) / sr
    for start in range(0, len(t), step):
        if rng.random() < 0.6:
            _add(out, rng.uniform(-1.0, 1.0, burst_len) * np.exp(-tb / 0.01), start)
    cutoff = min(5000.0, 0.3 * sr)
    sos = butter(4, cutoff, btype="highpass", fs=sr, output="sos")
    return sosfilt(sos, out)


def _orchestra(t: np.ndarray, sr: int, rng: np.random.Generator) -> np.ndarray:
    root = rng.choice([220.0, 246.9, 261.6])
    out = np.zeros_like(t)
    for ratio in (1.0, 1.2, 1.5, 2.0):
        for detune in (-0.003, 0.0, 0.003):
            freq = root * ratio * (1.0 + detune) * (1.0 + 0.004 * np.sin(2 * np.pi * 5.0 * t))
            out += np.sin(2 * np.pi * np.cumsum(freq) / sr)
    attack = np.minimum(1.0, t / 1.0)
    return out * attack


RECIPES = {
    "vocals": _vocals,
    "guitar": _guitar,
    "keyboard": _keyboard,
    "synth": _synth,
    "bass": _bass,
    "drums": _drums,
    "percussion": _percussion,
    "orchestra": _orchestra,
}


def _to_channels(mono: np.ndarray, channels: int, rng: np.random.Generator) -> np.ndarray:
    pan = rng.uniform(-0.3, 0.3)
    offsets = np.linspace(-1.0, 1.0, channels) if channels > 1 else np.zeros(1)
    stereo = (1.0 + pan * offsets)[:, np.newaxis] * mono[np.newaxis, :]
    peak = np.max(np.abs(stereo))
    if peak > 0.0:
        stereo *= PEAK_AMPLITUDE / peak
    return stereo.astype(np.float32)


def synthesize_song(spec: ToySpec, song: int) -> dict[str, Waveform]:
    rng = np.random.default_rng([spec.seed, song])
    n = int(round(spec.duration * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    stems = {}
    for label in STEM_LABELS:
        mono = RECIPES[label](t, spec.sample_rate, rng)
        stems[label] = Waveform(_to_channels(mono, spec.channels, rng), spec.sample_rate)
    return stems


def generate_toy_dataset(spec: ToySpec, out_dir: Path) -> DatasetIndex:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for song in range(spec.n_songs):
        song_dir = out_dir / f"song_{song:03d}"
        song_dir.mkdir(exist_ok=True)
        for label, w in synthesize_song(spec, song).items():
            write_wav(song_dir / f"{label}.wav", w, encoding="float32")
    logger.info(
        f"合成数据集已生成: {out_dir} ({spec.n_songs} 首, {spec.duration}s, {spec.sample_rate} Hz)"
    )
    return scan_dataset(out_dir)
