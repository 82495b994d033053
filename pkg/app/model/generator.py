"""
生成器: STFT -> 实/虚部打包 -> 1x1 卷积 -> N 个下采样块 -> 瓶颈
(TFC-TDF + 双路径 RNN + RoPE Transformer) -> N 个上采样块 (与跳连逐元素相乘)
-> 1x1 卷积 -> iSTFT。

特征图张量约定为 (B, dims, T_frames, F_bins)。
"""

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from app.audio.io import Waveform
from app.audio.spectral import ComplexSpectrogram, istft_tensor, stft_tensor
from app.core.exceptions import ConfigError, LengthError, ShapeError
from app.model.primitives import BiRNN, ParameterStore, TransformerLayer, count_trainable
from app.schemas.schemas import GeneratorConfig

# ===================================================================
# 频谱打包
# ===================================================================


def pack_spectrogram(spec: ComplexSpectrogram | Tensor) -> Tensor:
    """
    (..., C, T_f, F) 复数谱 -> (..., 2C, T_f, F-1) 实数特征图。

    通道顺序为 [re_0, im_0, re_1, im_1, ...]；最高频 (Nyquist) bin 被裁掉，
    使频率轴长度 n_fft/2 能被 2^N_Blocks 整除。
    """
    values = spec.values if isinstance(spec, ComplexSpectrogram) else spec
    *lead, channels, frames, bins = values.shape
    ri = torch.view_as_real(values[..., : bins - 1])
    ri = ri.movedim(-1, -3)  # (..., C, 2, T_f, F')
    return ri.reshape(*lead, 2 * channels, frames, bins - 1)


def unpack_spectrogram(x: Tensor) -> Tensor:
    """pack_spectrogram 的逆操作，被裁掉的 Nyquist bin 补零。"""
    *lead, packed, frames, bins = x.shape
    if packed % 2:
        raise ShapeError(f"packed spectrogram needs an even channel count, got {packed}")
    ri = x.reshape(*lead, packed // 2, 2, frames, bins).movedim(-3, -1).contiguous()
    values = torch.view_as_complex(ri)
    nyquist = values.new_zeros(*values.shape[:-1], 1)
    return torch.cat((values, nyquist), dim=-1)


# ===================================================================
# U-Net 组件
# ===================================================================


class TFCTDFBlock(nn.Module):
    """
    形状不变的残差块:
    TFC (norm -> GELU -> conv) -> TDF (频率轴瓶颈全连接，自带残差) -> TFC，最后与输入相加。
    """

    def __init__(self, dims: int, f_bins: int, kernel: tuple[int, int] = (3, 3), reduction: int = 4):
        super().__init__()
        self.dims = dims
        self.f_bins = f_bins
        padding = (kernel[0] // 2, kernel[1] // 2)
        bottleneck = max(1, f_bins // reduction)

        self.tfc1 = nn.Sequential(
            nn.GroupNorm(dims, dims),
            nn.GELU(),
            nn.Conv2d(dims, dims, kernel, padding=padding),
        )
        self.tdf = nn.Sequential(
            nn.GroupNorm(dims, dims),
            nn.GELU(),
            nn.Linear(f_bins, bottleneck),
            nn.GroupNorm(dims, dims),
            nn.GELU(),
            nn.Linear(bottleneck, f_bins),
        )
        self.tfc2 = nn.Sequential(
            nn.GroupNorm(dims, dims),
            nn.GELU(),
            nn.Conv2d(dims, dims, kernel, padding=padding),
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.dims or x.shape[-1] != self.f_bins:
            raise ConfigError(
                f"TFC-TDF block built for ({self.dims} dims, {self.f_bins} bins), got {tuple(x.shape[1:])}"
            )
        h = self.tfc1(x)
        h = h + self.tdf(h)
        h = self.tfc2(h)
        return x + h


class DownsampleBlock(nn.Module):
    """(kG, T, F) -> TFC-TDF -> stride-2 卷积 -> ((k+1)G, T/2, F/2)，同时返回 stride 之前的激活作为跳连。"""

    def __init__(self, k: int, base_dims: int, f_bins: int, kernel=(3, 3), reduction: int = 4):
        super().__init__()
        self.tfc_tdf = TFCTDFBlock(k * base_dims, f_bins, kernel, reduction)
        self.down = nn.Conv2d(k * base_dims, (k + 1) * base_dims, kernel_size=2, stride=2)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise ShapeError(f"downsampling needs even extents, got {tuple(x.shape[-2:])}")
        skip = self.tfc_tdf(x)
        return self.down(skip), skip


class UpsampleBlock(nn.Module):
    """((k+1)G, T, F) -> 转置卷积 -> 与跳连 (kG, 2T, 2F) 逐元素相乘 -> TFC-TDF。"""

    def __init__(self, k: int, base_dims: int, f_bins: int, kernel=(3, 3), reduction: int = 4):
        super().__init__()
        self.out_dims = k * base_dims
        self.up = nn.ConvTranspose2d((k + 1) * base_dims, k * base_dims, kernel_size=2, stride=2)
        self.tfc_tdf = TFCTDFBlock(k * base_dims, f_bins, kernel, reduction)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        expected = (self.out_dims, 2 * x.shape[-2], 2 * x.shape[-1])
        if tuple(skip.shape[1:]) != expected:
            raise ShapeError(f"skip tensor shape {tuple(skip.shape[1:])} does not match {expected}")
        return self.tfc_tdf(self.up(x) * skip)


def _fold_time(x: Tensor) -> Tensor:
    b, d, t, f = x.shape
    return x.permute(0, 3, 2, 1).reshape(b * f, t, d)


def _unfold_time(seq: Tensor, shape: torch.Size) -> Tensor:
    b, d, t, f = shape
    return seq.reshape(b, f, t, d).permute(0, 3, 2, 1)


def _fold_freq(x: Tensor) -> Tensor:
    b, d, t, f = x.shape
    return x.permute(0, 2, 3, 1).reshape(b * t, f, d)


def _unfold_freq(seq: Tensor, shape: torch.Size) -> Tensor:
    b, d, t, f = shape
    return seq.reshape(b, t, f, d).permute(0, 3, 1, 2)


class DualPathLayer(nn.Module):
    """norm -> 分组双向 GRU -> 线性映射回各组维度 -> 残差。"""

    def __init__(self, dims: int, heads: int):
        super().__init__()
        self.group = dims // heads
        hidden = max(1, self.group // 2)
        self.norm = nn.LayerNorm(dims)
        self.rnns = nn.ModuleList(BiRNN(self.group, hidden) for _ in range(heads))
        self.projs = nn.ModuleList(nn.Linear(2 * hidden, self.group) for _ in range(heads))

    def forward(self, seq: Tensor) -> Tensor:
        chunks = self.norm(seq).split(self.group, dim=-1)
        out = [proj(rnn(chunk)) for chunk, rnn, proj in zip(chunks, self.rnns, self.projs)]
        return seq + torch.cat(out, dim=-1)


class DualPathBlock(nn.Module):
    """奇数次 (1, 3, ...) 沿时间轴，偶数次沿频率轴。"""

    def __init__(self, dims: int, layers: int, heads: int):
        super().__init__()
        if heads < 1 or dims % heads:
            raise ConfigError(f"dual-path dims {dims} not divisible by {heads} heads")
        self.layers = nn.ModuleList(DualPathLayer(dims, heads) for _ in range(layers))

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            if i % 2 == 0:
                x = _unfold_time(layer(_fold_time(x)), x.shape)
            else:
                x = _unfold_freq(layer(_fold_freq(x)), x.shape)
        return x.contiguous()


class RoPETransformerBlock(nn.Module):
    """重复 rope_repeats 次: 先 rope_time_depth 层时间轴注意力，再 rope_freq_depth 层频率轴注意力。"""

    def __init__(self, dims: int, cfg: GeneratorConfig):
        super().__init__()
        if dims % cfg.rope_heads:
            raise ConfigError(f"transformer dims {dims} not divisible by {cfg.rope_heads} heads")

        def _stack(depth: int) -> nn.ModuleList:
            return nn.ModuleList(
                TransformerLayer(dims, cfg.rope_heads, cfg.ff_mult, cfg.dropout, cfg.rope_base)
                for _ in range(depth)
            )

        self.repeats = nn.ModuleList(
            nn.ModuleDict({"time": _stack(cfg.rope_time_depth), "freq": _stack(cfg.rope_freq_depth)})
            for _ in range(cfg.rope_repeats)
        )

    def forward(self, x: Tensor) -> Tensor:
        for repeat in self.repeats:
            seq = _fold_time(x)
            for layer in repeat["time"]:
                seq = layer(seq)
            x = _unfold_time(seq, x.shape)

            seq = _fold_freq(x)
            for layer in repeat["freq"]:
                seq = layer(seq)
            x = _unfold_freq(seq, x.shape)
        return x.contiguous()


# ===================================================================
# 生成器
# ===================================================================


class Generator(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        g, n = cfg.base_dims, cfg.n_blocks
        f0 = cfg.stft.n_fft // 2
        kernel, r = cfg.tfc_tdf_kernel, cfg.tdf_reduction

        self.input_conv = nn.Conv2d(2 * cfg.channels, g, kernel_size=1)
        self.encoder = nn.ModuleList(
            DownsampleBlock(k, g, f0 // 2 ** (k - 1), kernel, r) for k in range(1, n + 1)
        )
        dims = cfg.bottleneck_dims
        self.bottleneck = TFCTDFBlock(dims, f0 // 2**n, kernel, r)
        self.dual_path = DualPathBlock(dims, cfg.dualpath_layers, cfg.dualpath_heads)
        self.transformer = RoPETransformerBlock(dims, cfg)
        self.decoder = nn.ModuleList(
            UpsampleBlock(k, g, f0 // 2 ** (k - 1), kernel, r) for k in range(n, 0, -1)
        )
        self.output_conv = nn.Conv2d(g, 2 * cfg.channels, kernel_size=1)

    def forward_features(self, x: Tensor) -> Tensor:
        """打包后的谱特征 (B, 2C, T_f, F') -> 同形状输出；T_f 在两端对称补零到 2^N 的倍数，解码后再裁回。"""
        frames = x.shape[-2]
        pad = (-frames) % (2**self.cfg.n_blocks)
        lead = pad // 2
        x = F.pad(x, (0, 0, lead, pad - lead))

        x = self.input_conv(x)
        skips = []
        for block in self.encoder:
            x, skip = block(x)
            skips.append(skip)

        x = self.bottleneck(x)
        x = self.dual_path(x)
        x = self.transformer(x)

        for block, skip in zip(self.decoder, reversed(skips)):
            x = block(x, skip)
        return self.output_conv(x)[..., lead : lead + frames, :]

    def forward(self, wave: Tensor) -> Tensor:
        """(B, C, T) 波形 -> (B, C, T) 波形。"""
        stft_cfg = self.cfg.stft
        if wave.shape[-2] != self.cfg.channels:
            raise ConfigError(f"generator expects {self.cfg.channels} channels, got {wave.shape[-2]}")
        length = wave.shape[-1]
        if length < stft_cfg.n_fft:
            raise LengthError(f"input must have at least n_fft = {stft_cfg.n_fft} samples, got {length}")

        spec = stft_tensor(wave, stft_cfg.n_fft, stft_cfg.hop_length, stft_cfg.center)
        out = self.forward_features(pack_spectrogram(spec))
        return istft_tensor(unpack_spectrogram(out), stft_cfg.n_fft, stft_cfg.hop_length, length, stft_cfg.center)


def generator_forward(
    w: Waveform,
    params: ParameterStore | Generator,
    cfg: GeneratorConfig | None = None,
    train_mode: bool = False,
) -> Waveform:
    model = params.module if isinstance(params, ParameterStore) else params
    cfg = cfg or model.cfg
    if w.channels != cfg.channels:
        raise ConfigError(f"generator expects {cfg.channels} channels, got {w.channels}")

    reference = next(model.parameters())
    x = w.to_tensor(dtype=reference.dtype).to(reference.device).unsqueeze(0)
    was_training = model.training
    model.train(train_mode)
    try:
        with torch.set_grad_enabled(train_mode):
            out = model(x)
    finally:
        model.train(was_training)
    return Waveform.from_tensor(out[0], w.sample_rate)


def count_parameters(cfg: GeneratorConfig) -> int:
    return count_trainable(Generator(cfg))
