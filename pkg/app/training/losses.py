"""
训练目标:
    L = λ_MMS·L_MMS + λ_adv·L_adv + λ_feat·L_feat

L_MMS 为多分辨率 mel 幅度谱的 L1 距离；对抗项使用 hinge 形式；
特征匹配项按真实特征的平均幅度归一化。
"""

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from app.audio.io import Waveform
from app.audio.spectral import mel_filterbank, mel_magnitudes
from app.core.exceptions import ArgumentError, ShapeError
from app.model.discriminator import DiscriminatorOutput
from app.schemas.schemas import LossReport, LossWeights, MultiMelConfig

FEATURE_EPS = 1e-8
LOG_FLOOR = 1e-5


class MultiMelSTFTLoss(nn.Module):
    """多窗长 mel 幅度谱 L1 损失，hop = window/4。"""

    def __init__(self, sample_rate: int, cfg: MultiMelConfig | None = None):
        super().__init__()
        self.cfg = cfg or MultiMelConfig()
        self.filterbanks = [
            mel_filterbank(n_fft, n_mels, sample_rate, self.cfg.f_min, self.cfg.f_max)
            for n_fft, n_mels in zip(self.cfg.windows, self.cfg.mel_bins)
        ]

    def forward(self, est: Tensor, ref: Tensor) -> Tensor:
        if est.shape != ref.shape:
            raise ArgumentError(f"estimate shape {tuple(est.shape)} != reference shape {tuple(ref.shape)}")
        total = est.new_zeros(())
        for fb in self.filterbanks:
            m_est = mel_magnitudes(est, fb)
            m_ref = mel_magnitudes(ref, fb)
            if self.cfg.log_magnitude:
                m_est = torch.log(m_est.clamp_min(LOG_FLOOR))
                m_ref = torch.log(m_ref.clamp_min(LOG_FLOOR))
            total = total + F.l1_loss(m_est, m_ref)
        return total / len(self.filterbanks)


def multi_mel_stft_loss(
    est: Waveform,
    ref: Waveform,
    windows: list[int] | None = None,
    mel_bins: list[int] | None = None,
    log_magnitude: bool = False,
) -> float:
    if est.samples.shape != ref.samples.shape or est.sample_rate != ref.sample_rate:
        raise ArgumentError(
            f"estimate {est.samples.shape}@{est.sample_rate} and reference "
            f"{ref.samples.shape}@{ref.sample_rate} do not match"
        )
    defaults = MultiMelConfig()
    cfg = MultiMelConfig(
        windows=windows or defaults.windows,
        mel_bins=mel_bins or defaults.mel_bins,
        log_magnitude=log_magnitude,
    )
    loss_fn = MultiMelSTFTLoss(est.sample_rate, cfg)
    with torch.no_grad():
        return float(loss_fn(est.to_tensor(torch.float64), ref.to_tensor(torch.float64)))


# ===================================================================
# 对抗损失 (hinge)
# ===================================================================


def hinge_adv_generator(fake: DiscriminatorOutput) -> Tensor:
    """各尺度 mean(max(0, 1 - logit)) 的平均。"""
    losses = [torch.mean(F.relu(1.0 - logit)) for logit in fake.logits]
    return torch.stack(losses).mean()


def hinge_adv_discriminator(real_out: DiscriminatorOutput, fake_out: DiscriminatorOutput) -> Tensor:
    if real_out.scales != fake_out.scales:
        raise ShapeError(f"scale count mismatch: {real_out.scales} real vs {fake_out.scales} fake")
    losses = [
        torch.mean(F.relu(1.0 - real)) + torch.mean(F.relu(1.0 + fake))
        for real, fake in zip(real_out.logits, fake_out.logits)
    ]
    return torch.stack(losses).mean()


def feature_matching_loss(real_out: DiscriminatorOutput, fake_out: DiscriminatorOutput) -> Tensor:
    """mean|f_real - f_fake| / (mean|f_real| + ε)，先在每个尺度内对各层取平均，再对尺度取平均。"""
    if len(real_out.features) != len(fake_out.features):
        raise ShapeError("feature lists have different scale counts")

    per_scale = []
    for real_maps, fake_maps in zip(real_out.features, fake_out.features):
        if len(real_maps) != len(fake_maps):
            raise ShapeError(f"layer count mismatch: {len(real_maps)} vs {len(fake_maps)}")
        layer_losses = []
        for fr, ff in zip(real_maps, fake_maps):
            if fr.shape != ff.shape:
                raise ShapeError(f"feature shape mismatch: {tuple(fr.shape)} vs {tuple(ff.shape)}")
            layer_losses.append(torch.mean(torch.abs(fr - ff)) / (torch.mean(torch.abs(fr)) + FEATURE_EPS))
        per_scale.append(torch.stack(layer_losses).mean())
    return torch.stack(per_scale).mean()


def composite_loss(mms: float, adv: float, feat: float, w: LossWeights | None = None) -> LossReport:
    w = w or LossWeights()
    mms, adv, feat = float(mms), float(adv), float(feat)
    return LossReport(mms=mms, adv=adv, feat=feat, total=w.combine(mms, adv, feat))
