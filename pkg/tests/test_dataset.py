import shutil

import numpy as np
import pytest

from app.audio.io import Waveform, read_wav, write_wav
from app.core.exceptions import EmptyDatasetError
from app.schemas.schemas import STEM_LABELS
from app.training.dataset import BatchPrefetcher, collate, sample_batch, scan_dataset, step_rng
from tests.conftest import TOY_SAMPLE_RATE


@pytest.fixture
def toy_copy(toy_root, tmp_path):
    root = tmp_path / "data"
    shutil.copytree(toy_root, root)
    return root


def test_scan_indexes_every_song(toy_root):
    index = scan_dataset(toy_root, "vocals")
    assert [s.name for s in index.songs] == ["song_000", "song_001"]
    assert index.sample_rate == TOY_SAMPLE_RATE
    song = index.songs[0]
    assert set(song.stems) == set(STEM_LABELS)
    assert song.frames == TOY_SAMPLE_RATE and song.channels == 2


def test_songs_without_target_are_excluded(toy_copy):
    (toy_copy / "song_001" / "vocals.wav").unlink()
    index = scan_dataset(toy_copy, "vocals")
    assert [s.name for s in index.songs] == ["song_000"]
    assert len(scan_dataset(toy_copy).songs) == 2


def test_inconsistent_song_is_skipped(toy_copy):
    write_wav(toy_copy / "song_001" / "bass.wav", Waveform(np.zeros((1, 100)), TOY_SAMPLE_RATE))
    assert [s.name for s in scan_dataset(toy_copy, "vocals").songs] == ["song_000"]


def test_empty_and_missing_roots(tmp_path, toy_copy):
    with pytest.raises(FileNotFoundError):
        scan_dataset(tmp_path / "nope")
    for song in ("song_000", "song_001"):
        (toy_copy / song / "drums.wav").unlink()
    with pytest.raises(EmptyDatasetError):
        scan_dataset(toy_copy, "drums")


def test_batch_shapes(toy_root, run_cfg):
    cfg = run_cfg.train.model_copy(update={"batch_size": 3})
    pairs = sample_batch(scan_dataset(toy_root, "vocals"), cfg, step_rng(0, 0))
    mixtures, targets = collate(pairs)
    chunk = int(round(cfg.chunk_seconds * TOY_SAMPLE_RATE))
    assert mixtures.shape == targets.shape == (3, 2, chunk)


def test_sampling_depends_only_on_seed_and_step(toy_root, run_cfg):
    index = scan_dataset(toy_root, "vocals")
    cfg = run_cfg.train
    a = sample_batch(index, cfg, step_rng(0, 4))
    b = sample_batch(index, cfg, step_rng(0, 4))
    c = sample_batch(index, cfg, step_rng(0, 5))
    np.testing.assert_array_equal(a[0][0].samples, b[0][0].samples)
    assert not np.array_equal(a[0][0].samples, c[0][0].samples)


def test_target_is_the_exact_source_slice(toy_root, run_cfg):
    index = scan_dataset(toy_root, "vocals")
    cfg = run_cfg.train
    chunk = int(round(cfg.chunk_seconds * TOY_SAMPLE_RATE))

    draws = step_rng(cfg.seed, 9)
    song = index.songs[int(draws.integers(len(index.songs)))]
    offset = int(draws.integers(0, song.frames - chunk + 1))
    expected = read_wav(song.stems["vocals"]).samples[:, offset : offset + chunk]

    (_, target), = sample_batch(index, cfg, step_rng(cfg.seed, 9))
    np.testing.assert_array_equal(target.samples, expected)


def test_prefetcher_matches_synchronous_sampling(toy_root, run_cfg):
    index = scan_dataset(toy_root, "vocals")
    cfg = run_cfg.train
    with BatchPrefetcher(index, cfg, start_step=2, end_step=6, depth=2) as prefetcher:
        for step in range(2, 6):
            fetched = prefetcher.get(step)
            expected = sample_batch(index, cfg, step_rng(cfg.seed, step))
            for (fm, ft), (em, et) in zip(fetched, expected):
                np.testing.assert_array_equal(fm.samples, em.samples)
                np.testing.assert_array_equal(ft.samples, et.samples)
        with pytest.raises(IndexError):
            prefetcher.get(6)
