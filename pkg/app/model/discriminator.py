"""
多分辨率 STFT 判别器。

每个尺度: STFT (hop = window/4) -> 实/虚部作为 2C 个通道 -> 2-D 卷积栈 (leaky ReLU)
-> 1x1 卷积得到单通道 logit 图。每个卷积的激活前输出都记录为特征图，供特征匹配损失使用。
"""

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from app.audio.io import Waveform
from app.audio.spectral import stft_tensor
from app.core.exceptions import ConfigError, LengthError
from app.model.primitives import ParameterStore
from app.schemas.schemas import DiscriminatorConfig


@dataclass
class DiscriminatorOutput:
    logits: list[Tensor] = field(default_factory=list)  # 每个尺度一个 (B, 1, T', F')
    features: list[list[Tensor]] = field(default_factory=list)  # 每个尺度一组有序特征图

    @property
    def scales(self) -> int:
        return len(self.logits)


class ScaleDiscriminator(nn.Module):
    def __init__(self, window: int, audio_channels: int, cfg: DiscriminatorConfig):
        super().__init__()
        self.window = window
        self.hop = max(1, window // 4)
        self.slope = cfg.leaky_slope
        kt, kf = cfg.kernel
        chs = cfg.channels

        convs = [nn.Conv2d(2 * audio_channels, chs[0], (kt, kf), padding=(kt // 2, kf // 2))]
        for i in range(1, len(chs)):
            dilation = 2 ** (i - 1)
            convs.append(
                nn.Conv2d(
                    chs[i - 1],
                    chs[i],
                    (kt, kf),
                    stride=(1, 2),
                    dilation=(dilation, 1),
                    padding=(dilation * (kt // 2), kf // 2),
                )
            )
        convs.append(nn.Conv2d(chs[-1], chs[-1], (3, 3), padding=(1, 1)))
        self.convs = nn.ModuleList(convs)
        self.post = nn.Conv2d(chs[-1], 1, kernel_size=1)

    def forward(self, wave: Tensor) -> tuple[Tensor, list[Tensor]]:
        spec = stft_tensor(wave, self.window, self.hop)  # (B, C, T_f, F)
        b, c, t, f = spec.shape
        x = torch.view_as_real(spec).movedim(-1, 2).reshape(b, 2 * c, t, f)

        features = []
        for conv in self.convs:
            x = conv(x)
            features.append(x)
            x = F.leaky_relu(x, self.slope)
        return self.post(x), features


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig | None = None, audio_channels: int = 2):
        super().__init__()
        self.cfg = cfg or DiscriminatorConfig()
        self.audio_channels = audio_channels
        self.scales = nn.ModuleList(
            ScaleDiscriminator(window, audio_channels, self.cfg) for window in self.cfg.stft_windows
        )

    def forward(self, wave: Tensor) -> DiscriminatorOutput:
        """(B, C, T) 波形 -> 各尺度 logit 与特征图。"""
        if wave.shape[-2] != self.audio_channels:
            raise ConfigError(f"discriminator expects {self.audio_channels} channels, got {wave.shape[-2]}")
        longest = max(self.cfg.stft_windows)
        if wave.shape[-1] < longest:
            raise LengthError(f"input has {wave.shape[-1]} samples, shorter than the largest window {longest}")

        out = DiscriminatorOutput()
        for scale in self.scales:
            logits, features = scale(wave)
            out.logits.append(logits)
            out.features.append(features)
        return out


def discriminator_forward(
    w: Waveform,
    params: ParameterStore | Discriminator,
    cfg: DiscriminatorConfig | None = None,
) -> DiscriminatorOutput:
    model = params.module if isinstance(params, ParameterStore) else params
    if cfg is not None and cfg != model.cfg:
        raise ConfigError("discriminator config does not match the parameter store")
    reference = next(model.parameters())
    x = w.to_tensor(dtype=reference.dtype).to(reference.device).unsqueeze(0)
    return model(x)
