import torch
from loguru import logger

from app.core.config import settings


def select_device(preference: str | None = None) -> torch.device:
    """按 cuda > mps > cpu 的顺序选择可用设备，也可以由配置强制指定。"""
    preference = preference or settings.DEVICE
    if settings.NUM_THREADS:
        torch.set_num_threads(settings.NUM_THREADS)

    if preference != "auto":
        return torch.device(preference)

    if torch.cuda.is_available():
        logger.info("检测到 CUDA，模型将使用 GPU。")
        return torch.device("cuda")
    if torch.backends.mps.is_available():
        logger.info("检测到 MPS (Apple Silicon GPU)，模型将使用 MPS。")
        return torch.device("mps")
    logger.info("未检测到 CUDA 或 MPS，模型将使用 CPU。")
    return torch.device("cpu")
