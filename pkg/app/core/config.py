from functools import lru_cache
from pathlib import Path
from typing import Literal

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    app_name: str = "DTT-BSR"
    DEBUG: bool = False

    # 日志配置
    LOG_LEVEL: str = "INFO"

    # 运行设备: auto 会依次尝试 cuda / mps / cpu
    DEVICE: Literal["auto", "cpu", "cuda", "mps"] = "auto"
    NUM_THREADS: int | None = None

    # 默认的实验配置文件 (CLI 未传 --config 时使用)
    CONFIG: Path | None = None

    # 推理分块 (restore 命令)
    RESTORE_CHUNK_SECONDS: float = 6.0
    RESTORE_OVERLAP: float = 0.25

    model_config = SettingsConfigDict(
        env_prefix="DTTBSR_",
        env_file=(".env", ".env.local"),
        env_file_encoding="utf-8",
        extra="ignore",
    )


@lru_cache()
def get_settings():
    return Settings()  # type: ignore[attr-defined]


settings = get_settings()
