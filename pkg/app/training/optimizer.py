"""AdamW (解耦权重衰减) 和学习率调度。"""

import math

import torch
from torch import Tensor

from app.core.exceptions import ArgumentError, ShapeError
from app.model.primitives import ParameterStore


def adamw_step(
    params: ParameterStore,
    grads: dict[str, Tensor | None] | None = None,
    state: dict[str, Tensor] | None = None,
    lr: float = 0.002,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """
    原地更新参数:
        m ← β1·m + (1-β1)·g,  v ← β2·v + (1-β2)·g²
        θ ← θ - lr·m̂/(√v̂ + eps) - lr·wd·θ

    m̂ / v̂ 为偏差修正后的一阶 / 二阶矩；衰减项使用更新前的 θ。
    梯度为 None 的参数跳过，其状态保持不变。步数 t 存在 params.optimizer_step。
    """
    if lr < 0.0:
        raise ArgumentError(f"learning rate must be >= 0, got {lr}")
    grads = params.gradients() if grads is None else grads
    state = params.optimizer_state if state is None else state
    beta1, beta2 = betas

    params.optimizer_step += 1
    t = params.optimizer_step
    bias1 = 1.0 - beta1**t
    bias2 = 1.0 - beta2**t

    with torch.no_grad():
        for name, p in params.parameters.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")

            m = state.setdefault(f"exp_avg.{name}", torch.zeros_like(p))
            v = state.setdefault(f"exp_avg_sq.{name}", torch.zeros_like(p))
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)

            update = (m / bias1) / ((v / bias2).sqrt() + eps) + weight_decay * p
            p.sub_(lr * update)


def scheduled_lr(base_lr: float, step: int, total_steps: int, schedule: str = "constant") -> float:
    if schedule == "constant" or total_steps <= 0:
        return base_lr
    if schedule == "cosine":
        progress = min(1.0, step / total_steps)
        return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    raise ArgumentError(f"unknown lr schedule: {schedule}")
