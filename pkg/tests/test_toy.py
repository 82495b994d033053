import numpy as np

from app.audio.io import read_wav
from app.data.toy import generate_toy_dataset, synthesize_song
from app.schemas.schemas import STEM_LABELS, ToySpec


def _centroid(samples: np.ndarray, sr: int) -> float:
    mono = samples.mean(axis=0)
    spectrum = np.abs(np.fft.rfft(mono * np.hanning(len(mono))))
    freqs = np.fft.rfftfreq(samples.shape[-1], 1.0 / sr)
    return float(np.sum(freqs * spectrum) / np.sum(spectrum))


def test_layout_and_file_count(toy_root):
    files = sorted(toy_root.glob("*/*.wav"))
    assert len(files) == 16
    assert {p.stem for p in files} == set(STEM_LABELS)


def test_generation_is_bit_identical(tmp_path):
    spec = ToySpec(n_songs=1, duration=0.5, sample_rate=8000, channels=2, seed=3)
    generate_toy_dataset(spec, tmp_path / "a")
    generate_toy_dataset(spec, tmp_path / "b")
    for label in STEM_LABELS:
        a = (tmp_path / "a" / "song_000" / f"{label}.wav").read_bytes()
        b = (tmp_path / "b" / "song_000" / f"{label}.wav").read_bytes()
        assert a == b, label


def test_stems_share_length_and_stay_below_full_scale(toy_root):
    lengths = set()
    for path in toy_root.glob("*/*.wav"):
        w = read_wav(path)
        lengths.add(w.length)
        assert w.channels == 2
        assert np.max(np.abs(w.samples)) <= 10 ** (-1 / 20)
        assert np.max(np.abs(w.samples)) > 0
    assert lengths == {8000}


def test_bass_sits_below_drums():
    stems = synthesize_song(ToySpec(n_songs=1, duration=2.0, sample_rate=16000, channels=1), 0)
    bass = _centroid(stems["bass"].samples, 16000)
    drums = _centroid(stems["drums"].samples, 16000)
    assert bass < 150.0
    assert bass < drums


def test_songs_differ():
    spec = ToySpec(n_songs=2, duration=0.5, sample_rate=8000)
    a, b = synthesize_song(spec, 0), synthesize_song(spec, 1)
    assert not np.array_equal(a["vocals"].samples, b["vocals"].samples)
