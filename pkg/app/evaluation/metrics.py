"""
Multi-Mel SNR (MMSNR) 以及目录级评估报告。

每个窗长 w:
    SNR_w = 10·log10(Σ M_ref² / Σ (M_ref - M_est)²)，M 为线性 mel 幅度谱，截断到 [-cap, +cap]
MMSNR 为各窗长 SNR_w 的平均。
"""

import asyncio
import math
from pathlib import Path
from typing import NamedTuple

import pandas as pd
import torch
from loguru import logger

from app.audio.io import Waveform, read_wav
from app.audio.spectral import mel_filterbank, mel_magnitudes
from app.core.exceptions import ArgumentError, DttBsrError
from app.schemas.schemas import FileScore, MetricConfig, MetricReport

REPORT_COLUMNS = ["stem", "name", "mmsnr_db", "silent_reference"]


class MmsnrScore(NamedTuple):
    value_db: float
    silent_reference: bool


def score_mmsnr(est: Waveform, ref: Waveform, cfg: MetricConfig | None = None) -> MmsnrScore:
    cfg = cfg or MetricConfig()
    if est.samples.shape != ref.samples.shape or est.sample_rate != ref.sample_rate:
        raise ArgumentError(
            f"estimate {est.samples.shape}@{est.sample_rate} and reference "
            f"{ref.samples.shape}@{ref.sample_rate} do not match"
        )

    x_est = est.to_tensor(torch.float64)
    x_ref = ref.to_tensor(torch.float64)
    values, ref_energy_total = [], 0.0
    with torch.no_grad():
        for n_fft, n_mels in zip(cfg.windows, cfg.mel_bins):
            fb = mel_filterbank(n_fft, n_mels, est.sample_rate, cfg.f_min, cfg.f_max)
            m_ref = mel_magnitudes(x_ref, fb)
            m_est = mel_magnitudes(x_est, fb)
            signal = float(torch.sum(m_ref**2))
            noise = float(torch.sum((m_ref - m_est) ** 2))
            ref_energy_total += signal

            if noise == 0.0:
                snr = cfg.cap_db
            elif signal == 0.0:
                snr = -cfg.cap_db
            else:
                snr = 10.0 * math.log10(signal / noise)
            values.append(min(cfg.cap_db, max(-cfg.cap_db, snr)))

    if ref_energy_total == 0.0:
        return MmsnrScore(-cfg.cap_db, True)
    return MmsnrScore(sum(values) / len(values), False)


def mmsnr(
    est: Waveform,
    ref: Waveform,
    windows: list[int] | None = None,
    mel_bins: list[int] | None = None,
    cap_db: float = 100.0,
) -> float:
    defaults = MetricConfig()
    cfg = MetricConfig(
        windows=windows or defaults.windows,
        mel_bins=mel_bins or defaults.mel_bins,
        cap_db=cap_db,
    )
    return score_mmsnr(est, ref, cfg).value_db


# ===================================================================
# 目录评估
# ===================================================================


def _score_file(est_path: Path, ref_path: Path, cfg: MetricConfig) -> FileScore:
    score = score_mmsnr(read_wav(est_path), read_wav(ref_path), cfg)
    if score.silent_reference:
        logger.warning(f"参考音频为静音: {ref_path}，MMSNR 记为 {score.value_db} dB")
    return FileScore(name=est_path.name, mmsnr_db=score.value_db, silent_reference=score.silent_reference)


async def evaluate_directory_async(
    est_dir: Path,
    ref_dir: Path,
    stem: str,
    cfg: MetricConfig | None = None,
) -> MetricReport:
    cfg = cfg or MetricConfig()
    est_dir, ref_dir = Path(est_dir), Path(ref_dir)
    for d in (est_dir, ref_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"目录不存在: {d}")

    est_names = {p.name for p in est_dir.glob("*.wav")}
    ref_names = {p.name for p in ref_dir.glob("*.wav")}
    common = sorted(est_names & ref_names)
    skipped = sorted(est_names ^ ref_names)
    for name in skipped:
        logger.warning(f"跳过 {name}: 在另一目录中找不到对应文件")

    if not common:
        logger.error(f"No matching WAV files between {est_dir} and {ref_dir}")
        return MetricReport(stem=stem, skipped=skipped, error="no matching files between directories")

    # 逐文件评估互不依赖，放到线程池中并发执行；gather 保持输入顺序
    results = await asyncio.gather(
        *(asyncio.to_thread(_score_file, est_dir / name, ref_dir / name, cfg) for name in common),
        return_exceptions=True,
    )

    files: list[FileScore] = []
    for name, result in zip(common, results):
        if isinstance(result, DttBsrError):
            logger.warning(f"跳过 {name}: {result.detail}")
            skipped.append(name)
        elif isinstance(result, BaseException):
            raise result
        else:
            files.append(result)

    if not files:
        return MetricReport(stem=stem, skipped=sorted(skipped), error="no file could be scored")
    mean = sum(f.mmsnr_db for f in files) / len(files)
    logger.info(f"[{stem}] 评估完成: {len(files)} 个文件, 平均 MMSNR = {mean:.4f} dB")
    return MetricReport(stem=stem, files=files, mean_db=mean, skipped=sorted(skipped))


def evaluate_directory(
    est_dir: Path,
    ref_dir: Path,
    stem: str,
    cfg: MetricConfig | None = None,
) -> MetricReport:
    return asyncio.run(evaluate_directory_async(est_dir, ref_dir, stem, cfg))


# ===================================================================
# 报告输出
# ===================================================================


def report_frame(report: MetricReport) -> pd.DataFrame:
    rows = [{"stem": report.stem, **f.model_dump()} for f in report.files]
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def render_report(report: MetricReport) -> str:
    if report.error:
        return f"[{report.stem}] error: {report.error}"
    table = report_frame(report).to_string(index=False, float_format=lambda v: f"{v:.4f}")
    lines = [table, f"mean MMSNR ({report.stem}): {report.mean_db:.4f} dB"]
    if report.skipped:
        lines.append(f"skipped: {', '.join(report.skipped)}")
    return "\n".join(lines)


def write_report(report: MetricReport, path: Path) -> Path:
    """每个文件一行的 CSV (stem, name, mmsnr_db, silent_reference)。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # repr 精度写出，读回时逐位一致
    report_frame(report).to_csv(path, index=False, float_format="%.17g")
    return path


def read_report(path: Path) -> MetricReport:
    frame = pd.read_csv(path)
    missing = set(REPORT_COLUMNS) - set(frame.columns)
    if missing:
        raise ArgumentError(f"{path}: report is missing columns {sorted(missing)}")
    stems = frame["stem"].unique().tolist()
    if len(stems) > 1:
        raise ArgumentError(f"{path}: report mixes several stems {stems}")

    files = [
        FileScore(name=str(r.name), mmsnr_db=float(r.mmsnr_db), silent_reference=bool(r.silent_reference))
        for r in frame.itertuples(index=False)
    ]
    mean = sum(f.mmsnr_db for f in files) / len(files) if files else None
    return MetricReport(stem=str(stems[0]) if stems else "", files=files, mean_db=mean)
