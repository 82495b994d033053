import math
from pathlib import Path

import numpy as np
import torch
from loguru import logger

from app.audio.io import Waveform
from app.core.device import select_device
from app.core.exceptions import ConfigMismatchError, NonFiniteLossError
from app.core.logging import add_train_record_sink, log_train_record
from app.evaluation.metrics import score_mmsnr
from app.model.discriminator import Discriminator
from app.model.generator import Generator, generator_forward
from app.model.primitives import ParameterStore, seeded
from app.schemas.schemas import DatasetIndex, RunConfig
from app.training.checkpoint import (
    checkpoint_dir_name,
    list_checkpoints,
    load_checkpoint,
    save_checkpoint,
)
from app.training.dataset import BatchPrefetcher, collate, sample_batch, step_rng
from app.training.losses import (
    MultiMelSTFTLoss,
    composite_loss,
    feature_matching_loss,
    hinge_adv_discriminator,
    hinge_adv_generator,
)
from app.training.optimizer import adamw_step, scheduled_lr

TRAIN_LOG_NAME = "train_log.jsonl"


def torch_step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step, 1]).generate_state(1)[0])


class TrainingService:
    def __init__(self, cfg: RunConfig, dataset: DatasetIndex, out_dir: Path, device: torch.device | None = None):
        """
        生成器 + 判别器的交替训练 (1:1)，每步先更新判别器再更新生成器。
        :param cfg: 完整实验配置。
        :param dataset: scan_dataset 得到的数据集索引。
        :param out_dir: checkpoint 和 train_log.jsonl 的输出目录。
        """
        self.cfg = cfg
        self.dataset = dataset
        self.out_dir = Path(out_dir)
        self.device = device or select_device()
        self.step = 0
        self.resumed = False

        with seeded(cfg.train.seed):
            self.generator = Generator(cfg.generator).to(self.device)
            self.discriminator = Discriminator(cfg.discriminator, cfg.generator.channels).to(self.device)
        self.g_store = ParameterStore(self.generator)
        self.d_store = ParameterStore(self.discriminator)
        self.mms_loss = MultiMelSTFTLoss(dataset.sample_rate, cfg.mms)
        logger.info(
            f"模型初始化完成: generator {self.g_store.total_count:,} 参数, "
            f"discriminator {self.d_store.total_count:,} 参数, device={self.device}"
        )

    @property
    def stores(self) -> dict[str, ParameterStore]:
        return {"generator": self.g_store, "discriminator": self.d_store}

    def resume(self, path: Path) -> None:
        ckpt = load_checkpoint(path, expected=self.cfg.generator)
        if ckpt.config.discriminator != self.cfg.discriminator:
            raise ConfigMismatchError(f"{path}: discriminator config differs from the current run")
        for prefix, store in self.stores.items():
            ckpt.restore(prefix, store)
        self.step = ckpt.step
        self.resumed = True
        logger.info(f"从 checkpoint 续训: {path} (step {self.step})")

    def save(self, path: Path | None = None) -> Path:
        path = path or self.out_dir / checkpoint_dir_name(self.step)
        return save_checkpoint(self.stores, self.step, self.cfg, path)

    def _check_finite(self, name: str, value: torch.Tensor, step: int) -> None:
        if torch.isfinite(value).item():
            return
        diagnostic = self.out_dir / f"diagnostic_{checkpoint_dir_name(step)}"
        logger.error(f"Loss {name} became non-finite at step {step}, writing diagnostic snapshot to {diagnostic}")
        self.save(diagnostic)
        raise NonFiniteLossError(f"{name} loss is non-finite at step {step}; snapshot at {diagnostic}")

    def train_step(self, step: int, batch) -> dict:
        """执行一个训练步，返回该步的结构化记录。"""
        tc = self.cfg.train
        mixture, target = (t.to(self.device) for t in collate(batch))
        torch.manual_seed(torch_step_seed(tc.seed, step))
        lr = scheduled_lr(tc.lr, step, tc.total_steps, tc.lr_schedule)
        self.generator.train()
        self.discriminator.train()

        # ===== 1. 判别器更新 (hinge) =====
        with torch.no_grad():
            fake = self.generator(mixture)
        self.d_store.zero_grad()
        d_loss = hinge_adv_discriminator(self.discriminator(target), self.discriminator(fake))
        self._check_finite("discriminator", d_loss, step)
        d_loss.backward()
        adamw_step(self.d_store, lr=lr, betas=tc.betas, eps=tc.eps, weight_decay=tc.weight_decay)

        # ===== 2. 生成器更新: λ_MMS·L_MMS + λ_adv·L_adv + λ_feat·L_feat =====
        self.g_store.zero_grad()
        fake = self.generator(mixture)
        with torch.no_grad():
            real_out = self.discriminator(target)
        fake_out = self.discriminator(fake)
        mms = self.mms_loss(fake, target)
        adv = hinge_adv_generator(fake_out)
        feat = feature_matching_loss(real_out, fake_out)
        total = tc.loss_weights.combine(mms, adv, feat)
        self._check_finite("generator", total, step)
        total.backward()
        adamw_step(self.g_store, lr=lr, betas=tc.betas, eps=tc.eps, weight_decay=tc.weight_decay)
        # 判别器在生成器反传中累积的梯度不参与更新
        self.d_store.zero_grad()

        report = composite_loss(mms.item(), adv.item(), feat.item(), tc.loss_weights)
        return {"step": step + 1, "lr": lr, "d_loss": d_loss.item(), **report.model_dump()}

    def run(self) -> list[Path]:
        tc = self.cfg.train
        self.out_dir.mkdir(parents=True, exist_ok=True)
        sink_id = add_train_record_sink(self.out_dir / TRAIN_LOG_NAME)
        saved: list[Path] = []
        prefetcher = (
            BatchPrefetcher(self.dataset, tc, self.step, tc.total_steps, tc.prefetch) if tc.prefetch > 0 else None
        )
        try:
            if not self.resumed:
                saved.append(self.save())

            for step in range(self.step, tc.total_steps):
                if prefetcher is not None:
                    batch = prefetcher.get(step)
                else:
                    batch = sample_batch(self.dataset, tc, step_rng(tc.seed, step))

                record = self.train_step(step, batch)
                log_train_record(record)
                self.step = step + 1

                if self.step % tc.log_every == 0:
                    logger.info(
                        f"step {self.step}/{tc.total_steps} | total={record['total']:.4f} "
                        f"mms={record['mms']:.4f} adv={record['adv']:.4f} "
                        f"feat={record['feat']:.4f} d={record['d_loss']:.4f} lr={record['lr']:.2e}"
                    )
                if self.step % tc.checkpoint_every == 0 or self.step == tc.total_steps:
                    saved.append(self.save())
        finally:
            if prefetcher is not None:
                prefetcher.close()
            logger.remove(sink_id)

        logger.info(f"训练结束: {self.step} 步, 共保存 {len(saved)} 个 checkpoint")
        return saved


def train(
    cfg: RunConfig,
    dataset: DatasetIndex,
    out_dir: Path,
    resume_from: Path | None = None,
    device: torch.device | None = None,
) -> list[Path]:
    """训练入口，返回本次保存的 checkpoint 路径 (按步数升序)。"""
    service = TrainingService(cfg, dataset, out_dir, device)
    if resume_from is not None:
        service.resume(resume_from)
    return service.run()


# ===================================================================
# checkpoint 选择
# ===================================================================


def validation_pairs(validation: DatasetIndex, cfg: RunConfig, n_pairs: int = 4, seed: int = 0):
    train_cfg = cfg.train.model_copy(update={"batch_size": n_pairs})
    return sample_batch(validation, train_cfg, np.random.default_rng(seed))


def load_generator(path: Path, device: torch.device | None = None) -> tuple[Generator, int]:
    """从 checkpoint 重建生成器 (推理模式)，返回 (generator, step)。"""
    ckpt = load_checkpoint(path)
    generator = Generator(ckpt.config.generator)
    ckpt.restore("generator", ParameterStore(generator))
    generator.eval()
    if device is not None:
        generator.to(device)
    return generator, ckpt.step


def select_checkpoint(
    ckpt_dir: Path,
    validation: DatasetIndex,
    cfg: RunConfig | None = None,
    n_pairs: int = 4,
    seed: int = 0,
) -> Path:
    """在固定的验证样本对上计算每个 checkpoint 的平均 MMSNR，返回最高者 (并列取较晚的 step)。"""
    checkpoints = list_checkpoints(ckpt_dir)
    if not checkpoints:
        raise FileNotFoundError(f"目录中没有 checkpoint: {ckpt_dir}")
    cfg = cfg or load_checkpoint(checkpoints[0]).config
    pairs = validation_pairs(validation, cfg, n_pairs, seed)

    best_path, best_score = checkpoints[0], -math.inf
    for path in checkpoints:
        generator, step = load_generator(path)
        scores = []
        for mixture, target in pairs:
            estimate: Waveform = generator_forward(mixture, generator, train_mode=False)
            scores.append(score_mmsnr(estimate, target, cfg.metrics).value_db)
        score = sum(scores) / len(scores)
        logger.info(f"checkpoint {path.name} (step {step}): 验证集 MMSNR = {score:.4f} dB")
        if score >= best_score:
            best_path, best_score = path, score

    logger.info(f"最佳 checkpoint: {best_path} ({best_score:.4f} dB)")
    return best_path
