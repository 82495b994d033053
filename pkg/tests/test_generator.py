import numpy as np
import pytest
import torch
from torch.autograd import gradcheck

from app.audio.io import Waveform
from app.audio.spectral import stft
from app.core.exceptions import ConfigError, LengthError, ShapeError
from app.model.generator import (
    DownsampleBlock,
    DualPathBlock,
    Generator,
    RoPETransformerBlock,
    TFCTDFBlock,
    UpsampleBlock,
    count_parameters,
    generator_forward,
    pack_spectrogram,
    unpack_spectrogram,
)
from app.model.primitives import ParameterStore, seeded
from app.schemas.schemas import GeneratorConfig, StftConfig
from tests.conftest import tiny_generator_config

f64 = dict(dtype=torch.float64)


# ===== 频谱打包 =====


def test_pack_interleaves_real_and_imag_and_trims_nyquist(rng):
    s = stft(Waveform(rng.standard_normal((2, 1024)), 8000), StftConfig(n_fft=64, hop_length=16))
    packed = pack_spectrogram(s)
    assert packed.shape == (4, s.frames, 32)
    torch.testing.assert_close(packed[0], s.values[0, :, :32].real)
    torch.testing.assert_close(packed[1], s.values[0, :, :32].imag)
    torch.testing.assert_close(packed[3], s.values[1, :, :32].imag)

    restored = unpack_spectrogram(packed)
    torch.testing.assert_close(restored[..., :32], s.values[..., :32])
    assert torch.all(restored[..., 32] == 0)


def test_pack_of_zero_spectrogram_is_zero():
    packed = pack_spectrogram(torch.zeros(1, 2, 5, 33, dtype=torch.complex64))
    assert packed.shape == (1, 4, 5, 32)
    assert torch.all(packed == 0)


# ===== U-Net 组件 =====


def _zero_residual(block: TFCTDFBlock) -> TFCTDFBlock:
    with torch.no_grad():
        for module in (block.tfc2[-1], block.tdf[-1]):
            module.weight.zero_()
            module.bias.zero_()
    return block


def test_tfc_tdf_with_zero_last_layers_is_identity():
    block = _zero_residual(TFCTDFBlock(4, 16)).double()
    x = torch.randn(2, 4, 6, 16, **f64)
    torch.testing.assert_close(block(x), x)


def test_tfc_tdf_rejects_wrong_extent():
    with pytest.raises(ConfigError):
        TFCTDFBlock(4, 16)(torch.zeros(1, 4, 3, 8))


def test_encoder_decoder_shape_contract():
    g = 4
    gen = torch.Generator().manual_seed(0)
    for _ in range(5):
        t = 4 * int(torch.randint(1, 6, (1,), generator=gen))
        f = 4 * int(torch.randint(2, 9, (1,), generator=gen))
        x = torch.randn(1, g, t, f)
        down1, down2 = DownsampleBlock(1, g, f), DownsampleBlock(2, g, f // 2)
        h, skip1 = down1(x)
        h, skip2 = down2(h)
        assert h.shape == (1, 3 * g, t // 4, f // 4)

        up2, up1 = UpsampleBlock(2, g, f // 2), UpsampleBlock(1, g, f)
        out = up1(up2(h, skip2), skip1)
        assert out.shape == x.shape


def test_downsample_requires_even_extents():
    with pytest.raises(ShapeError):
        DownsampleBlock(1, 4, 8)(torch.zeros(1, 4, 3, 8))


def test_upsample_skip_contract_and_zero_gate():
    up = _zero_residual_up(UpsampleBlock(1, 4, 16))
    x = torch.randn(1, 8, 4, 8)
    out = up(x, torch.zeros(1, 4, 8, 16))
    assert out.shape == (1, 4, 8, 16)
    assert torch.all(out == 0)

    with pytest.raises(ShapeError):
        up(x, torch.zeros(1, 4, 8, 14))


def _zero_residual_up(block: UpsampleBlock) -> UpsampleBlock:
    _zero_residual(block.tfc_tdf)
    return block


def test_upsample_gradient_reaches_both_inputs():
    up = UpsampleBlock(1, 4, 16)
    x = torch.randn(1, 8, 4, 8, requires_grad=True)
    skip = torch.randn(1, 4, 8, 16, requires_grad=True)
    up(x, skip).square().sum().backward()
    assert x.grad.abs().sum() > 0
    assert skip.grad.abs().sum() > 0


def test_dual_path_gradient():
    block = DualPathBlock(4, layers=2, heads=2).double()
    x = torch.randn(1, 4, 3, 3, **f64, requires_grad=True)
    assert block(x).shape == x.shape
    assert gradcheck(block, (x,), eps=1e-6, atol=1e-5, rtol=1e-4)


def test_dual_path_zero_layers_and_bad_heads():
    x = torch.randn(1, 4, 3, 3)
    assert torch.equal(DualPathBlock(4, layers=0, heads=2)(x), x)
    with pytest.raises(ConfigError):
        DualPathBlock(5, layers=1, heads=2)


def test_rope_block_zero_repeats_is_identity():
    cfg = tiny_generator_config(rope_repeats=0)
    x = torch.randn(2, 8, 4, 4)
    assert torch.equal(RoPETransformerBlock(8, cfg)(x), x)


def test_time_attention_is_equivariant_to_frequency_permutation():
    cfg = tiny_generator_config(rope_time_depth=1, rope_freq_depth=0)
    block = RoPETransformerBlock(8, cfg).double().eval()
    x = torch.randn(1, 8, 6, 5, **f64)
    perm = torch.randperm(5)
    out = block(x)
    out_perm = block(x[..., perm])
    assert torch.max(torch.abs(out_perm - out[..., perm])) < 1e-6


def test_rope_block_requires_divisible_dims():
    with pytest.raises(ConfigError):
        RoPETransformerBlock(6, tiny_generator_config(rope_heads=4))


# ===== 生成器 =====


def test_generator_preserves_length_and_channels(gen_cfg, rng):
    with seeded(0):
        model = Generator(gen_cfg)
    for length in (8192, 44100, 44101):
        w = Waveform(rng.uniform(-1, 1, (2, length)).astype(np.float32), 44100)
        out = generator_forward(w, model, gen_cfg, train_mode=False)
        assert out.samples.shape == (2, length)
        assert np.all(np.isfinite(out.samples))


def test_generator_inference_is_deterministic(rng):
    cfg = tiny_generator_config(dropout=0.1)
    store = ParameterStore(Generator(cfg))
    w = Waveform(rng.uniform(-1, 1, (2, 4000)).astype(np.float32), 8000)
    a = generator_forward(w, store, cfg, train_mode=False)
    b = generator_forward(w, store, cfg, train_mode=False)
    np.testing.assert_array_equal(a.samples, b.samples)


def test_zero_input_with_zero_biases_gives_zero_output(gen_cfg):
    model = Generator(gen_cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "bias" in name:
                p.zero_()
    out = generator_forward(Waveform(np.zeros((2, 2048), dtype=np.float32), 8000), model)
    assert np.all(out.samples == 0)


def test_generator_channel_and_length_errors(gen_cfg):
    model = Generator(gen_cfg)
    with pytest.raises(ConfigError):
        generator_forward(Waveform(np.zeros((1, 2048)), 8000), model, gen_cfg)
    with pytest.raises(LengthError):
        generator_forward(Waveform(np.zeros((2, 32)), 8000), model, gen_cfg)


def test_bottleneck_shape_algebra():
    cfg = tiny_generator_config(n_blocks=2, base_dims=4, stft=StftConfig(n_fft=128, hop_length=32))
    model = Generator(cfg)
    seen = {}

    def record(module, inputs, output):
        seen["shape"] = output.shape

    model.dual_path.register_forward_hook(record)
    x = torch.randn(1, 2, 1000)
    model(x)
    frames = 1000 // 32 + 1
    assert cfg.bottleneck_dims == 12
    assert seen["shape"] == (1, 12, -(-frames // 4), 64 // 4)


def test_frame_padding_is_split_across_both_ends():
    cfg = tiny_generator_config(n_blocks=2)
    model = Generator(cfg).double()
    seen = {}

    def record(module, inputs):
        seen["input"] = inputs[0].detach().clone()

    model.input_conv.register_forward_pre_hook(record)
    x = torch.randn(1, 4, 29, 32, **f64) + 1.0
    out = model.forward_features(x)

    padded = seen["input"]
    assert padded.shape == (1, 4, 32, 32)
    assert torch.all(padded[:, :, :1] == 0)
    assert torch.all(padded[:, :, 30:] == 0)
    torch.testing.assert_close(padded[:, :, 1:30], x)
    assert out.shape == x.shape


def test_inference_call_keeps_the_module_mode(gen_cfg):
    model = Generator(gen_cfg)
    w = Waveform(np.zeros((2, 2048), dtype=np.float32), 8000)

    model.train()
    generator_forward(w, model, train_mode=False)
    assert model.training

    model.eval()
    generator_forward(w, model, train_mode=True)
    assert not model.training


def _gru_count(input_size: int, hidden: int) -> int:
    return 2 * 3 * (hidden * input_size + hidden * hidden + 2 * hidden)


def _tfc_tdf_count(d: int, f: int, r: int = 4) -> int:
    b = f // r
    conv = 9 * d * d + d
    return 2 * (2 * d + conv) + 2 * d + (f * b + b) + 2 * d + (b * f + f)


def test_parameter_count_matches_hand_enumeration():
    cfg = GeneratorConfig(
        n_blocks=1,
        base_dims=2,
        dualpath_layers=1,
        dualpath_heads=2,
        rope_repeats=1,
        rope_heads=2,
        rope_time_depth=1,
        rope_freq_depth=1,
        stft=StftConfig(n_fft=32, hop_length=8),
        channels=2,
    )
    g, d = 2, 4
    expected = (
        (4 * g + g)  # 1x1 输入卷积
        + _tfc_tdf_count(g, 16)
        + (g * d * 4 + d)  # stride-2 卷积
        + _tfc_tdf_count(d, 8)
        + (2 * d + 2 * (_gru_count(2, 1) + (2 * 2 + 2)))  # 双路径: LayerNorm + 每组 GRU + Linear
        + 2 * (12 * d * d + 13 * d)  # 时间 / 频率各一层 Transformer
        + (d * g * 4 + g)  # 转置卷积
        + _tfc_tdf_count(g, 16)
        + (g * 4 + 4)  # 1x1 输出卷积
    )
    assert count_parameters(cfg) == expected


def test_default_parameter_budget():
    count = count_parameters(GeneratorConfig())
    assert count == 6_988_804
    assert 6_745_000 <= count <= 7_455_000


def test_parameter_count_grows_with_base_dims():
    assert count_parameters(GeneratorConfig(base_dims=32)) < count_parameters(GeneratorConfig(base_dims=64))


def test_end_to_end_gradient_on_sampled_parameters():
    cfg = tiny_generator_config()
    with seeded(0):
        model = Generator(cfg).double()
    x = torch.randn(1, 2, 256, **f64)
    target = torch.randn(1, 2, 256, **f64)

    def loss() -> torch.Tensor:
        return ((model(x) - target) ** 2).mean()

    model.zero_grad()
    loss().backward()
    named = [(n, p) for n, p in model.named_parameters()]
    gen = torch.Generator().manual_seed(0)
    eps = 1e-6
    for _ in range(20):
        name, p = named[int(torch.randint(len(named), (1,), generator=gen))]
        idx = int(torch.randint(p.numel(), (1,), generator=gen))
        analytic = float(p.grad.view(-1)[idx])
        with torch.no_grad():
            flat = p.view(-1)
            orig = float(flat[idx])
            flat[idx] = orig + eps
            up = float(loss())
            flat[idx] = orig - eps
            down = float(loss())
            flat[idx] = orig
        numeric = (up - down) / (2 * eps)
        assert abs(analytic - numeric) <= 1e-3 * max(abs(analytic), abs(numeric)) + 1e-8, name
