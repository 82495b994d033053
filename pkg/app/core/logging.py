import json
import sys
from pathlib import Path

from loguru import logger

from app.core.config import settings

TRAIN_RECORD_KEY = "train_record"


def _stderr_sink(message) -> None:
    # 写入时才取 sys.stderr，标准流可能已被替换
    sys.stderr.write(message)


def setup_logging(level: str | None = None) -> None:
    """替换 loguru 默认 sink，统一输出格式。"""
    logger.remove()
    logger.add(
        _stderr_sink,
        level=(level or settings.LOG_LEVEL).upper(),
        format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {name}:{line} - {message}",
        # 结构化训练记录只写入 jsonl，不刷屏
        filter=lambda record: TRAIN_RECORD_KEY not in record["extra"],
    )


def add_train_record_sink(path: Path) -> int:
    """
    为训练日志添加一个只接收结构化记录的 sink，每行一个 JSON。
    返回 sink id，训练结束后用 logger.remove(id) 释放。
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    return logger.add(
        str(path),
        format="{message}",
        level="INFO",
        filter=lambda record: TRAIN_RECORD_KEY in record["extra"],
        enqueue=False,
    )


def log_train_record(record: dict) -> None:
    logger.bind(**{TRAIN_RECORD_KEY: True}).info(json.dumps(record, sort_keys=True))


def read_train_records(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
