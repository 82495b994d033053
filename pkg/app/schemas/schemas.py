from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# ===================================================================
# 通用配置和基础类
# ===================================================================

STEM_LABELS = (
    "vocals",
    "guitar",
    "keyboard",
    "synth",
    "bass",
    "drums",
    "percussion",
    "orchestra",
)

StemLabel = Literal[
    "vocals", "guitar", "keyboard", "synth", "bass", "drums", "percussion", "orchestra"
]

Range = tuple[float, float]


class BaseSchema(BaseModel):
    # 未知字段一律拒绝，保证配置文件和 --override 的键都能被校验
    model_config = ConfigDict(extra="forbid")


class RangeSchema(BaseSchema):
    """所有 (lo, hi) 元组字段都必须满足 lo <= hi。"""

    @model_validator(mode="after")
    def _check_ranges(self):
        for name, value in self:
            if isinstance(value, tuple) and len(value) == 2 and value[0] > value[1]:
                raise ValueError(f"{name}: lower bound {value[0]} exceeds upper bound {value[1]}")
        return self


# ===================================================================
# 频谱 / 网络结构配置
# ===================================================================


class StftConfig(BaseSchema):
    n_fft: int = Field(2048, ge=2, description="STFT 窗长 (samples)")
    hop_length: int = Field(512, ge=1, description="帧移 (samples)")
    center: bool = Field(True, description="两端各做 n_fft/2 的反射填充")

    @model_validator(mode="after")
    def _check_hop(self):
        if self.hop_length > self.n_fft:
            raise ValueError("hop_length must not exceed n_fft")
        return self

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1


class GeneratorConfig(BaseSchema):
    n_blocks: int = Field(2, ge=1, description="下采样 / 上采样块数量 N_Blocks")
    base_dims: int = Field(64, ge=1, description="特征维度增量 G")
    tfc_tdf_kernel: tuple[int, int] = Field((3, 3), description="TFC 卷积核")
    tdf_reduction: int = Field(4, ge=1, description="TDF 频率轴瓶颈缩减倍数 r")
    dualpath_layers: int = Field(4, ge=0)
    dualpath_heads: int = Field(2, ge=1)
    rope_repeats: int = Field(2, ge=0)
    rope_heads: int = Field(8, ge=1)
    rope_time_depth: int = Field(2, ge=0)
    rope_freq_depth: int = Field(2, ge=0)
    rope_base: float = Field(10000.0, gt=0)
    ff_mult: int = Field(4, ge=1, description="Transformer 前馈层扩展倍数")
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    stft: StftConfig = Field(default_factory=StftConfig)
    channels: int = Field(2, ge=1, description="音频通道数 C")

    @field_validator("tfc_tdf_kernel")
    @classmethod
    def _odd_kernel(cls, v: tuple[int, int]) -> tuple[int, int]:
        if any(k < 1 or k % 2 == 0 for k in v):
            raise ValueError("tfc_tdf_kernel extents must be odd and positive")
        return v

    @model_validator(mode="after")
    def _check_divisibility(self):
        factor = 2**self.n_blocks
        if (self.stft.n_fft // 2) % factor:
            raise ValueError(f"n_fft/2 = {self.stft.n_fft // 2} must be divisible by 2^n_blocks = {factor}")
        if (self.stft.n_fft // 2) // factor < self.tdf_reduction:
            raise ValueError("bottleneck frequency extent is smaller than tdf_reduction")
        return self

    @property
    def bottleneck_dims(self) -> int:
        return (self.n_blocks + 1) * self.base_dims


class DiscriminatorConfig(BaseSchema):
    stft_windows: list[int] = Field(default_factory=lambda: [2048, 1024, 512, 256, 128])
    channels: list[int] = Field(default_factory=lambda: [32, 64, 128, 256])
    kernel: tuple[int, int] = Field((3, 9), description="(time, freq) 卷积核")
    leaky_slope: float = Field(0.2, ge=0.0)

    @field_validator("stft_windows")
    @classmethod
    def _strictly_decreasing(cls, v: list[int]) -> list[int]:
        if len(v) < 2:
            raise ValueError("at least two STFT scales are required")
        if any(a <= b for a, b in zip(v, v[1:])):
            raise ValueError("stft_windows must be strictly decreasing")
        if any(w < 4 for w in v):
            raise ValueError("stft windows must be at least 4 samples")
        return v

    @field_validator("channels")
    @classmethod
    def _enough_layers(cls, v: list[int]) -> list[int]:
        if len(v) < 2 or any(c < 1 for c in v):
            raise ValueError("channel schedule needs at least two positive entries")
        return v


# ===================================================================
# 损失 / 指标配置
# ===================================================================


class LossWeights(BaseSchema):
    lambda_mms: float = Field(45.0, ge=0.0)
    lambda_adv: float = Field(2.0, ge=0.0)
    lambda_feat: float = Field(4.0, ge=0.0)

    def combine(self, mms, adv, feat):
        """L = λ_MMS·L_MMS + λ_adv·L_adv + λ_feat·L_feat，对 float 和 Tensor 都适用。"""
        return self.lambda_mms * mms + self.lambda_adv * adv + self.lambda_feat * feat


class LossReport(BaseSchema):
    mms: float
    adv: float
    feat: float
    total: float


class MultiMelConfig(BaseSchema):
    windows: list[int] = Field(default_factory=lambda: [2048, 1024, 512, 256])
    mel_bins: list[int] = Field(default_factory=lambda: [160, 80, 40, 20])
    log_magnitude: bool = False
    f_min: float = Field(0.0, ge=0.0)
    f_max: float | None = Field(None, description="None 表示 sample_rate / 2")

    @model_validator(mode="after")
    def _paired(self):
        if len(self.windows) != len(self.mel_bins) or not self.windows:
            raise ValueError("windows and mel_bins must be non-empty and of equal length")
        return self


class MetricConfig(MultiMelConfig):
    cap_db: float = Field(100.0, gt=0.0)


# ===================================================================
# 数据增强配置
# ===================================================================


class CompressorSpec(RangeSchema):
    threshold_db: Range = (-30.0, -6.0)
    ratio: Range = (2.0, 8.0)
    attack_ms: Range = (1.0, 30.0)
    release_ms: Range = (50.0, 300.0)
    makeup_db: Range = (0.0, 0.0)

    @field_validator("ratio")
    @classmethod
    def _ratio_at_least_one(cls, v: Range) -> Range:
        if v[0] < 1.0:
            raise ValueError("compressor ratio must be >= 1")
        return v


class LimiterSpec(RangeSchema):
    ceiling_db: Range = (-3.0, -0.5)
    release_ms: float = Field(50.0, ge=0.0)

    @field_validator("ceiling_db")
    @classmethod
    def _below_full_scale(cls, v: Range) -> Range:
        if v[1] > 0.0:
            raise ValueError("limiter ceiling must be <= 0 dBFS")
        return v


class DistortionSpec(RangeSchema):
    drive: Range = (1.0, 10.0)

    @field_validator("drive")
    @classmethod
    def _non_negative(cls, v: Range) -> Range:
        if v[0] < 0.0:
            raise ValueError("drive must be >= 0")
        return v


class ReverbSpec(RangeSchema):
    decay_s: Range = (0.2, 2.0)
    ir_length_s: float = Field(2.0, gt=0.0)
    wet: Range = (0.1, 0.5)
    ir_paths: list[Path] = Field(default_factory=list, description="可选的真实 IR 文件，非空时优先使用")

    @field_validator("wet")
    @classmethod
    def _unit_interval(cls, v: Range) -> Range:
        if v[0] < 0.0 or v[1] > 1.0:
            raise ValueError("wet mix must lie in [0, 1]")
        return v


class ResampleSpec(RangeSchema):
    factor: Range = (0.5, 1.0)
    granularity_hz: int = Field(100, ge=1)

    @field_validator("factor")
    @classmethod
    def _positive(cls, v: Range) -> Range:
        if v[0] <= 0.0:
            raise ValueError("resample factor must be > 0")
        return v


class EffectProbabilities(BaseSchema):
    compressor: float = Field(0.5, ge=0.0, le=1.0)
    distortion: float = Field(0.5, ge=0.0, le=1.0)
    reverb: float = Field(0.5, ge=0.0, le=1.0)
    resample: float = Field(0.5, ge=0.0, le=1.0)
    bus_compressor: float = Field(0.5, ge=0.0, le=1.0)
    limiter: float = Field(0.5, ge=0.0, le=1.0)

    @classmethod
    def disabled(cls) -> "EffectProbabilities":
        return cls(
            compressor=0.0,
            distortion=0.0,
            reverb=0.0,
            resample=0.0,
            bus_compressor=0.0,
            limiter=0.0,
        )


class EffectChainSpec(BaseSchema):
    compressor: CompressorSpec = Field(default_factory=CompressorSpec)
    limiter: LimiterSpec = Field(default_factory=LimiterSpec)
    distortion: DistortionSpec = Field(default_factory=DistortionSpec)
    reverb: ReverbSpec = Field(default_factory=ReverbSpec)
    resample: ResampleSpec = Field(default_factory=ResampleSpec)
    probabilities: EffectProbabilities = Field(default_factory=EffectProbabilities)
    mix_peak_db: float = Field(-1.0, le=0.0, description="混音峰值归一化上限 (dBFS)")
    seed: int = 0


# ===================================================================
# 训练配置
# ===================================================================


class TrainConfig(BaseSchema):
    target_stem: StemLabel = "vocals"
    chunk_seconds: float = Field(6.0, gt=0.0)
    batch_size: int = Field(2, ge=1)
    total_steps: int = Field(1_000_000, ge=0)
    lr: float = Field(0.002, gt=0.0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0.0)
    weight_decay: float = Field(0.01, ge=0.0)
    lr_schedule: Literal["constant", "cosine"] = "constant"
    checkpoint_every: int = Field(10_000, ge=1)
    log_every: int = Field(100, ge=1)
    seed: int = 0
    prefetch: int = Field(0, ge=0, description="后台预取的 batch 数量，0 表示同步采样")
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    effects: EffectChainSpec = Field(default_factory=EffectChainSpec)

    @field_validator("betas")
    @classmethod
    def _betas_in_unit_interval(cls, v: tuple[float, float]) -> tuple[float, float]:
        if not all(0.0 <= b < 1.0 for b in v):
            raise ValueError("betas must lie in [0, 1)")
        return v


class RunConfig(BaseSchema):
    """一次实验的完整配置，也是 checkpoint manifest 中的配置快照。"""

    train: TrainConfig = Field(default_factory=TrainConfig)
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = Field(default_factory=DiscriminatorConfig)
    mms: MultiMelConfig = Field(default_factory=MultiMelConfig)
    metrics: MetricConfig = Field(default_factory=MetricConfig)


# ===================================================================
# 数据集 / 评估相关模型
# ===================================================================


class SongEntry(BaseSchema):
    name: str
    stems: dict[str, Path] = Field(..., description="stem 标签 -> WAV 路径")
    sample_rate: int = Field(..., gt=0)
    frames: int = Field(..., ge=0)
    channels: int = Field(..., ge=1)


class DatasetIndex(BaseSchema):
    root: Path
    target_stem: StemLabel | None = None
    songs: list[SongEntry] = Field(default_factory=list)

    @property
    def sample_rate(self) -> int:
        return self.songs[0].sample_rate


class ToySpec(BaseSchema):
    n_songs: int = Field(2, ge=1)
    duration: float = Field(4.0, gt=0.0, description="每首歌时长 (s)")
    sample_rate: int = Field(44100, gt=0)
    channels: int = Field(2, ge=1)
    seed: int = 0


class FileScore(BaseSchema):
    name: str
    mmsnr_db: float
    silent_reference: bool = False


class MetricReport(BaseSchema):
    stem: str
    files: list[FileScore] = Field(default_factory=list)
    mean_db: float | None = None
    skipped: list[str] = Field(default_factory=list)
    error: str | None = None


# ===================================================================
# Checkpoint manifest
# ===================================================================


class TensorEntry(BaseSchema):
    name: str = Field(..., description='"params/<网络>.<参数>" 或 "opt/<网络>.<状态>"')
    shape: list[int]
    offset: int = Field(..., ge=0, description="在 payload.bin 中的字节偏移")
    nbytes: int = Field(..., ge=0)

    @field_validator("name")
    @classmethod
    def _known_kind(cls, v: str) -> str:
        if v.partition("/")[0] not in ("params", "opt"):
            raise ValueError(f"tensor name must start with params/ or opt/, got {v!r}")
        return v


class CheckpointManifest(BaseSchema):
    format_version: int
    step: int = Field(..., ge=0)
    config: RunConfig
    optimizer_steps: dict[str, int] = Field(default_factory=dict)
    tensors: list[TensorEntry] = Field(default_factory=list)
    checksum: str = Field(..., min_length=64, max_length=64, description="payload.bin 的 sha256")
