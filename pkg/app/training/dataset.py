"""
数据集索引和训练 batch 采样。

目录约定: <root>/<song>/<stem>.wav，stem 取自 STEM_LABELS。
"""

from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch
from loguru import logger

from app.audio.augment import build_training_pair
from app.audio.io import Waveform, audio_info, read_wav
from app.core.exceptions import DttBsrError, EmptyDatasetError
from app.schemas.schemas import STEM_LABELS, DatasetIndex, SongEntry, TrainConfig

Pair = tuple[Waveform, Waveform]


def step_rng(seed: int, step: int) -> np.random.Generator:
    """每个训练步独立的随机流，只依赖 (seed, step)，保证续训和预取下结果一致。"""
    return np.random.default_rng([seed, step])


def _index_song(song_dir: Path) -> SongEntry | None:
    stems = {p.stem: p for p in sorted(song_dir.glob("*.wav")) if p.stem in STEM_LABELS}
    if not stems:
        return None
    try:
        infos = {label: audio_info(path) for label, path in stems.items()}
    except DttBsrError as e:
        logger.warning(f"跳过歌曲 {song_dir.name}: {e.detail}")
        return None

    rates = {i.sample_rate for i in infos.values()}
    channels = {i.channels for i in infos.values()}
    if len(rates) > 1 or len(channels) > 1:
        logger.warning(f"跳过歌曲 {song_dir.name}: 分轨的采样率或通道数不一致 ({rates}, {channels})")
        return None
    return SongEntry(
        name=song_dir.name,
        stems=stems,
        sample_rate=rates.pop(),
        frames=max(i.frames for i in infos.values()),
        channels=channels.pop(),
    )


def scan_dataset(root: Path, target_stem: str | None = None) -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"数据集目录不存在: {root}")

    songs: list[SongEntry] = []
    for song_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        entry = _index_song(song_dir)
        if entry is None:
            continue
        if target_stem is not None and target_stem not in entry.stems:
            logger.warning(f"跳过歌曲 {entry.name}: 缺少目标分轨 {target_stem}.wav")
            continue
        songs.append(entry)

    if not songs:
        raise EmptyDatasetError(f"{root}: no song contains the target stem {target_stem!r}")
    rates = {s.sample_rate for s in songs}
    if len(rates) > 1:
        raise EmptyDatasetError(f"{root}: songs use different sample rates {sorted(rates)}")

    logger.info(f"数据集扫描完成: {root}，共 {len(songs)} 首歌曲")
    return DatasetIndex(root=root, target_stem=target_stem, songs=songs)


def _read_chunk(path: Path, offset: int, frames: int, channels: int) -> Waveform:
    w = read_wav(path, offset=offset, frames=frames)
    if w.length < frames:
        padded = np.zeros((channels, frames), dtype=w.samples.dtype)
        padded[:, : w.length] = w.samples
        w = w.with_samples(padded)
    return w


def sample_batch(index: DatasetIndex, cfg: TrainConfig, rng: np.random.Generator) -> list[Pair]:
    """batch_size 个 (退化混音, 目标分轨) 对，各自随机选歌和起点。"""
    target = cfg.target_stem
    songs = [s for s in index.songs if target in s.stems]
    if not songs:
        raise EmptyDatasetError(f"no indexed song contains the target stem {target!r}")
    chunk = int(round(cfg.chunk_seconds * index.sample_rate))

    pairs = []
    for _ in range(cfg.batch_size):
        song = songs[int(rng.integers(len(songs)))]
        offset = int(rng.integers(0, max(1, song.frames - chunk + 1)))
        labels = [label for label in STEM_LABELS if label in song.stems]
        stems = [_read_chunk(song.stems[label], offset, chunk, song.channels) for label in labels]
        pairs.append(build_training_pair(stems, labels.index(target), cfg.effects, rng))
    return pairs


def collate(pairs: list[Pair]) -> tuple[torch.Tensor, torch.Tensor]:
    """(mixtures, targets)，形状均为 (B, C, T)。"""
    mixtures = torch.stack([m.to_tensor(torch.float32) for m, _ in pairs])
    targets = torch.stack([t.to_tensor(torch.float32) for _, t in pairs])
    return mixtures, targets


class BatchPrefetcher:
    """
    单生产者后台预取: 一个工作线程提前构造后续若干步的 batch。

    每个 batch 只由 step_rng(seed, step) 决定，因此结果与同步采样逐位一致。
    """

    def __init__(self, index: DatasetIndex, cfg: TrainConfig, start_step: int, end_step: int, depth: int):
        self.index = index
        self.cfg = cfg
        self.depth = max(1, depth)
        self.end_step = end_step
        self._next_step = start_step
        self._pending: deque[tuple[int, Future]] = deque()
        self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="batch-prefetch")

    def _fill(self) -> None:
        while len(self._pending) < self.depth and self._next_step < self.end_step:
            step = self._next_step
            future = self._pool.submit(sample_batch, self.index, self.cfg, step_rng(self.cfg.seed, step))
            self._pending.append((step, future))
            self._next_step += 1

    def get(self, step: int) -> list[Pair]:
        self._fill()
        if not self._pending:
            raise IndexError(f"no batch scheduled for step {step}")
        scheduled, future = self._pending.popleft()
        if scheduled != step:
            raise RuntimeError(f"prefetcher out of order: expected step {scheduled}, got {step}")
        batch = future.result()
        self._fill()
        return batch

    def close(self) -> None:
        self._pool.shutdown(wait=True, cancel_futures=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
