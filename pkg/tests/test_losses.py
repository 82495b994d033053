import numpy as np
import pytest
import torch
from torch.autograd import gradcheck

from app.audio.io import Waveform
from app.core.exceptions import ArgumentError, ShapeError
from app.model.discriminator import DiscriminatorOutput
from app.schemas.schemas import LossWeights, MultiMelConfig
from app.training.losses import (
    FEATURE_EPS,
    MultiMelSTFTLoss,
    composite_loss,
    feature_matching_loss,
    hinge_adv_discriminator,
    hinge_adv_generator,
    multi_mel_stft_loss,
)
from tests.conftest import tiny_mms_config

f64 = dict(dtype=torch.float64)


def _output(logits, features=None) -> DiscriminatorOutput:
    return DiscriminatorOutput(logits=list(logits), features=features or [[] for _ in logits])


# ===== 多分辨率 mel 损失 =====


def test_mms_is_zero_for_identical_signals(rng):
    w = Waveform(rng.standard_normal((2, 4000)), 8000)
    assert multi_mel_stft_loss(w, w, [256, 128], [16, 8]) == 0.0


def test_mms_is_symmetric_and_homogeneous(rng):
    a = Waveform(rng.standard_normal((2, 4000)), 8000)
    b = Waveform(rng.standard_normal((2, 4000)), 8000)
    ab = multi_mel_stft_loss(a, b, [256, 128], [16, 8])
    assert ab > 0
    assert multi_mel_stft_loss(b, a, [256, 128], [16, 8]) == pytest.approx(ab, rel=1e-12)

    a3 = Waveform(3.0 * a.samples, 8000)
    b3 = Waveform(3.0 * b.samples, 8000)
    assert multi_mel_stft_loss(a3, b3, [256, 128], [16, 8]) == pytest.approx(3.0 * ab, rel=1e-9)


def test_mms_rejects_mismatched_inputs(rng):
    a = Waveform(rng.standard_normal((2, 4000)), 8000)
    with pytest.raises(ArgumentError):
        multi_mel_stft_loss(a, Waveform(rng.standard_normal((2, 3000)), 8000))
    with pytest.raises(ArgumentError):
        MultiMelSTFTLoss(8000, tiny_mms_config())(torch.zeros(1, 2, 512), torch.zeros(1, 2, 256))


def test_mms_gradient():
    loss = MultiMelSTFTLoss(8000, MultiMelConfig(windows=[32, 16], mel_bins=[6, 4]))
    est = torch.randn(1, 1, 96, dtype=torch.float64, requires_grad=True)
    ref = torch.randn(1, 1, 96, dtype=torch.float64)
    assert gradcheck(lambda x: loss(x, ref), (est,), eps=1e-6, atol=1e-5, rtol=1e-4)


def test_log_magnitude_variant_is_finite_on_silence():
    loss = MultiMelSTFTLoss(8000, MultiMelConfig(windows=[256], mel_bins=[16], log_magnitude=True))
    value = loss(torch.zeros(1, 2, 1024), torch.randn(1, 2, 1024))
    assert torch.isfinite(value)


# ===== 对抗 / 特征匹配 =====


def test_hinge_values():
    zeros = _output([torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 2, 2)])
    assert float(hinge_adv_generator(zeros)) == 1.0
    assert float(hinge_adv_discriminator(zeros, zeros)) == 2.0

    real = _output([torch.full((1, 1, 3, 3), 2.0)])
    fake = _output([torch.full((1, 1, 3, 3), -2.0)])
    assert float(hinge_adv_discriminator(real, fake)) == 0.0
    assert float(hinge_adv_generator(real)) == 0.0


def test_hinge_scale_mismatch():
    with pytest.raises(ShapeError):
        hinge_adv_discriminator(_output([torch.zeros(1)]), _output([torch.zeros(1), torch.zeros(1)]))


def test_feature_matching_normalization():
    real = _output([torch.zeros(1)], [[torch.ones(2, 3, **f64), torch.ones(4, **f64)]])
    fake = _output([torch.zeros(1)], [[torch.zeros(2, 3, **f64), torch.zeros(4, **f64)]])
    assert float(feature_matching_loss(real, fake)) == pytest.approx(1.0 / (1.0 + FEATURE_EPS), rel=1e-12)
    assert float(feature_matching_loss(real, real)) == 0.0


def test_feature_matching_is_scale_invariant():
    gen = torch.Generator().manual_seed(0)
    fr = [torch.randn(2, 5, generator=gen, dtype=torch.float64) for _ in range(3)]
    ff = [torch.randn(2, 5, generator=gen, dtype=torch.float64) for _ in range(3)]
    base = feature_matching_loss(_output([torch.zeros(1)], [fr]), _output([torch.zeros(1)], [ff]))
    scaled = feature_matching_loss(
        _output([torch.zeros(1)], [[7.0 * t for t in fr]]),
        _output([torch.zeros(1)], [[7.0 * t for t in ff]]),
    )
    assert float(scaled) == pytest.approx(float(base), rel=1e-6)


def test_feature_matching_shape_mismatch():
    real = _output([torch.zeros(1)], [[torch.ones(2)]])
    fake = _output([torch.zeros(1)], [[torch.ones(3)]])
    with pytest.raises(ShapeError):
        feature_matching_loss(real, fake)


# ===== 组合损失 =====


def test_composite_with_default_weights():
    assert composite_loss(1.0, 1.0, 1.0).total == 51.0
    assert composite_loss(2.0, 0.0, 0.0).total == 90.0
    report = composite_loss(0.5, 0.25, 0.125, LossWeights(lambda_mms=1, lambda_adv=0, lambda_feat=0))
    assert report.total == 0.5
    assert (report.mms, report.adv, report.feat) == (0.5, 0.25, 0.125)


def test_weights_combine_tensors():
    w = LossWeights()
    total = w.combine(torch.tensor(1.0), torch.tensor(1.0), torch.tensor(1.0))
    assert np.isclose(float(total), 51.0)
