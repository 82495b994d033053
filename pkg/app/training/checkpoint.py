"""
Checkpoint 目录格式:

    step_00001000/
        manifest.json   format_version / step / 配置快照 / 张量表 / sha256 校验和
        payload.bin     按 manifest 顺序拼接的 little-endian float32 数据
"""

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from loguru import logger
from pydantic import ValidationError
from torch import Tensor

from app.core.exceptions import (
    CheckpointVersionError,
    ConfigMismatchError,
    CorruptCheckpointError,
)
from app.model.primitives import ParameterStore
from app.schemas.schemas import CheckpointManifest, GeneratorConfig, RunConfig, TensorEntry

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "payload.bin"
PAYLOAD_DTYPE = np.dtype("<f4")


@dataclass
class LoadedCheckpoint:
    path: Path
    step: int
    config: RunConfig
    params: dict[str, Tensor] = field(default_factory=dict)  # "generator.xxx" -> tensor
    opt_state: dict[str, Tensor] = field(default_factory=dict)  # "generator.exp_avg.xxx" -> tensor
    optimizer_steps: dict[str, int] = field(default_factory=dict)

    def restore(self, prefix: str, store: ParameterStore) -> None:
        """把名为 prefix 的网络参数和优化器状态写回 store (原地拷贝)。"""
        with torch.no_grad():
            for name, p in store.parameters.items():
                key = f"{prefix}.{name}"
                if key not in self.params:
                    raise ConfigMismatchError(f"{self.path}: checkpoint has no tensor {key}")
                src = self.params[key]
                if src.shape != p.shape:
                    raise ConfigMismatchError(
                        f"{self.path}: {key} has shape {tuple(src.shape)}, model expects {tuple(p.shape)}"
                    )
                p.copy_(src.to(dtype=p.dtype, device=p.device))

        store.optimizer_state.clear()
        head = f"{prefix}."
        for key, value in self.opt_state.items():
            if key.startswith(head):
                ref = next(iter(store.parameters.values()))
                store.optimizer_state[key[len(head) :]] = value.to(dtype=ref.dtype, device=ref.device).clone()
        store.optimizer_step = self.optimizer_steps.get(prefix, 0)


def checkpoint_dir_name(step: int) -> str:
    return f"step_{step:08d}"


def _flatten(stores: dict[str, ParameterStore]) -> list[tuple[str, Tensor]]:
    tensors = []
    for prefix, store in stores.items():
        tensors.extend((f"params/{prefix}.{n}", p) for n, p in store.parameters.items())
        tensors.extend((f"opt/{prefix}.{n}", t) for n, t in store.optimizer_state.items())
    return tensors


def save_checkpoint(
    stores: dict[str, ParameterStore],
    step: int,
    cfg: RunConfig,
    path: Path,
) -> Path:
    """
    保存一个 checkpoint 到目录 path。

    Args:
        stores: 网络名 -> ParameterStore，例如 {"generator": ..., "discriminator": ...}。
        step: 当前训练步数。
        cfg: 完整实验配置，写入 manifest 作为快照。
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    entries, chunks, offset = [], [], 0
    for name, tensor in _flatten(stores):
        data = tensor.detach().to("cpu", torch.float32).contiguous().numpy().astype(PAYLOAD_DTYPE, copy=False)
        raw = data.tobytes()
        entries.append(TensorEntry(name=name, shape=list(tensor.shape), offset=offset, nbytes=len(raw)))
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)

    manifest = CheckpointManifest(
        format_version=FORMAT_VERSION,
        step=step,
        config=cfg,
        optimizer_steps={prefix: store.optimizer_step for prefix, store in stores.items()},
        tensors=entries,
        checksum=hashlib.sha256(payload).hexdigest(),
    )
    (path / PAYLOAD_NAME).write_bytes(payload)
    # manifest 最后写入，存在 manifest 即表示 payload 已完整
    (path / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Checkpoint saved: {path} (step {step}, {len(entries)} tensors, {len(payload)} bytes)")
    return path


def _read_manifest(path: Path) -> CheckpointManifest:
    try:
        return CheckpointManifest.model_validate_json((path / MANIFEST_NAME).read_text(encoding="utf-8"))
    except ValidationError as e:
        raise CorruptCheckpointError(f"{path}: invalid manifest ({e.error_count()} errors: {e.errors()[0]['msg']})") from e


def load_checkpoint(path: Path, expected: GeneratorConfig | None = None) -> LoadedCheckpoint:
    path = Path(path)
    if not (path / MANIFEST_NAME).is_file() or not (path / PAYLOAD_NAME).is_file():
        raise FileNotFoundError(f"checkpoint 不完整或不存在: {path}")

    manifest = _read_manifest(path)
    if manifest.format_version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: unknown checkpoint format version {manifest.format_version!r}")

    payload = (path / PAYLOAD_NAME).read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest.checksum:
        raise CorruptCheckpointError(f"{path}: payload checksum mismatch")

    if expected is not None and manifest.config.generator != expected:
        raise ConfigMismatchError(f"{path}: generator config differs from the expected one")

    ckpt = LoadedCheckpoint(
        path=path,
        step=manifest.step,
        config=manifest.config,
        optimizer_steps=dict(manifest.optimizer_steps),
    )
    expected_offset = 0
    for entry in manifest.tensors:
        count = int(np.prod(entry.shape, dtype=np.int64))
        if (
            entry.offset != expected_offset
            or entry.nbytes != count * PAYLOAD_DTYPE.itemsize
            or entry.offset + entry.nbytes > len(payload)
        ):
            raise CorruptCheckpointError(f"{path}: tensor {entry.name} does not map into the payload")
        expected_offset += entry.nbytes

        array = np.frombuffer(payload, dtype=PAYLOAD_DTYPE, count=count, offset=entry.offset).astype(np.float32)
        tensor = torch.from_numpy(array).reshape(tuple(entry.shape))
        kind, _, name = entry.name.partition("/")
        (ckpt.params if kind == "params" else ckpt.opt_state)[name] = tensor
    if expected_offset != len(payload):
        raise CorruptCheckpointError(f"{path}: payload has {len(payload) - expected_offset} unmapped bytes")

    logger.debug(f"Checkpoint loaded: {path} (step {ckpt.step})")
    return ckpt


def list_checkpoints(ckpt_dir: Path) -> list[Path]:
    """按步数升序返回目录下所有完整的 checkpoint。"""
    ckpt_dir = Path(ckpt_dir)
    if not ckpt_dir.is_dir():
        return []
    found = [p for p in ckpt_dir.glob("step_*") if (p / MANIFEST_NAME).is_file()]
    return sorted(found, key=lambda p: _read_manifest(p).step)
