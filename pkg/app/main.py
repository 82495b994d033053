import json
from pathlib import Path
from typing import List, Optional

import typer
from loguru import logger
from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import ConfigError, DttBsrError
from app.core.logging import setup_logging
from app.schemas.schemas import STEM_LABELS, RunConfig, ToySpec

cli = typer.Typer(
    name="dttbsr",
    help="Music source restoration: train / restore / eval / toydata / info.",
    no_args_is_help=True,
    add_completion=False,
)

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


# ===================================================================
# 配置加载与 --override
# ===================================================================


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """把 section.key=value 写入配置字典；键必须已存在，值按 JSON 解析 (失败则当作字符串)。"""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key: {key}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = _parse_value(raw)
    return data


def load_run_config(path: Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    path = path or settings.CONFIG
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"配置文件不存在: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e
    else:
        data = RunConfig().model_dump(mode="json")

    try:
        # 先校验一次，补齐缺省字段后再应用 override
        data = RunConfig.model_validate(data).model_dump(mode="json")
        return RunConfig.model_validate(apply_overrides(data, overrides or []))
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def _run(fn, *args, **kwargs):
    """执行子命令并把异常映射为稳定的退出码: 0 成功, 1 运行失败, 2 用法 / 配置 / 路径错误。"""
    try:
        return fn(*args, **kwargs)
    except DttBsrError as e:
        logger.error(f"{type(e).__name__}: {e.detail}")
        typer.echo(f"error: {e.detail}", err=True)
        raise typer.Exit(e.exit_code)
    except FileNotFoundError as e:
        logger.error(str(e))
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(EXIT_USAGE)
    except typer.Exit:
        raise
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(EXIT_RUNTIME)


@cli.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="DEBUG 级别日志")):
    setup_logging("DEBUG" if verbose else settings.LOG_LEVEL)


# ===================================================================
# 子命令
# ===================================================================


@cli.command()
def train(
    dataset_root: Path = typer.Argument(..., help="<root>/<song>/<stem>.wav"),
    out_dir: Path = typer.Argument(..., help="checkpoint 和训练日志输出目录"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="RunConfig JSON 文件"),
    override: Optional[List[str]] = typer.Option(None, "--override", "-o", help="section.key=value，可重复"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    steps: Optional[int] = typer.Option(None, "--steps", help="覆盖 train.total_steps"),
    stem: Optional[str] = typer.Option(None, "--stem", help=f"目标分轨: {', '.join(STEM_LABELS)}"),
    resume: Optional[Path] = typer.Option(None, "--resume", help="从 checkpoint 目录续训"),
):
    """训练一个分轨的修复模型。"""

    def _train():
        from app.training.dataset import scan_dataset
        from app.training.service import train as run_training

        overrides = list(override or [])
        if seed is not None:
            overrides += [f"train.seed={seed}", f"train.effects.seed={seed}"]
        if steps is not None:
            overrides.append(f"train.total_steps={steps}")
        if stem is not None:
            overrides.append(f'train.target_stem="{stem}"')
        cfg = load_run_config(config, overrides)

        dataset = scan_dataset(dataset_root, cfg.train.target_stem)
        saved = run_training(cfg, dataset, out_dir, resume_from=resume)
        typer.echo(f"saved {len(saved)} checkpoint(s); latest: {saved[-1] if saved else '-'}")

    _run(_train)


@cli.command()
def restore(
    checkpoint: Path = typer.Argument(..., help="checkpoint 目录"),
    input_wav: Path = typer.Argument(...),
    output_wav: Path = typer.Argument(...),
    chunk_seconds: Optional[float] = typer.Option(None, "--chunk-seconds"),
    overlap: Optional[float] = typer.Option(None, "--overlap", help="相邻分块重叠比例 [0, 1)"),
    encoding: str = typer.Option("float32", "--encoding", help="pcm16 | float32"),
):
    """用训练好的生成器修复一个 WAV 文件。"""

    def _restore():
        from app.restoration.service import RestorationService

        if encoding not in ("pcm16", "float32"):
            raise ConfigError(f"unknown encoding: {encoding}")
        service = RestorationService(checkpoint, chunk_seconds=chunk_seconds, overlap=overlap)
        restored = service.restore_file(input_wav, output_wav, encoding)
        typer.echo(f"wrote {output_wav} ({restored.length} samples)")

    _run(_restore)


@cli.command("eval")
def evaluate(
    est_dir: Path = typer.Argument(..., help="模型输出目录"),
    ref_dir: Path = typer.Argument(..., help="参考分轨目录 (同名文件)"),
    report_path: Path = typer.Argument(..., help="CSV 报告输出路径"),
    stem: str = typer.Option("vocals", "--stem"),
    config: Optional[Path] = typer.Option(None, "--config", "-c"),
    override: Optional[List[str]] = typer.Option(None, "--override", "-o"),
):
    """按文件名配对计算 MMSNR，并写出报告。"""

    def _eval():
        from app.evaluation.metrics import evaluate_directory, render_report, write_report

        cfg = load_run_config(config, override)
        report = evaluate_directory(est_dir, ref_dir, stem, cfg.metrics)
        write_report(report, report_path)
        typer.echo(render_report(report))
        if report.error:
            raise typer.Exit(EXIT_RUNTIME)

    _run(_eval)


@cli.command()
def toydata(
    out_dir: Path = typer.Argument(...),
    songs: int = typer.Option(2, "--songs"),
    duration: float = typer.Option(4.0, "--duration", help="每首歌时长 (s)"),
    sample_rate: int = typer.Option(44100, "--sample-rate"),
    channels: int = typer.Option(2, "--channels"),
    seed: int = typer.Option(0, "--seed"),
):
    """生成确定性的合成分轨数据集。"""

    def _toydata():
        from app.data.toy import generate_toy_dataset

        try:
            spec = ToySpec(n_songs=songs, duration=duration, sample_rate=sample_rate, channels=channels, seed=seed)
        except ValidationError as e:
            raise ConfigError(f"invalid toy dataset spec: {e}") from e
        index = generate_toy_dataset(spec, out_dir)
        typer.echo(f"generated {len(index.songs)} song(s) in {out_dir}")

    _run(_toydata)


@cli.command()
def info(checkpoint: Path = typer.Argument(..., help="checkpoint 目录")):
    """打印 checkpoint 的步数、配置和生成器参数量。"""

    def _info():
        from app.model.generator import count_parameters
        from app.training.checkpoint import load_checkpoint

        ckpt = load_checkpoint(checkpoint)
        typer.echo(f"step: {ckpt.step}")
        typer.echo(f"parameters: {count_parameters(ckpt.config.generator)}")
        typer.echo("config:")
        typer.echo(ckpt.config.model_dump_json(indent=2))

    _run(_info)


@cli.command()
def select(
    ckpt_dir: Path = typer.Argument(..., help="包含多个 checkpoint 的目录"),
    validation_root: Path = typer.Argument(..., help="验证集根目录"),
    pairs: int = typer.Option(4, "--pairs", help="验证样本对数量"),
    seed: int = typer.Option(0, "--seed"),
):
    """在验证集上按 MMSNR 选出最佳 checkpoint。"""

    def _select():
        from app.training.checkpoint import list_checkpoints, load_checkpoint
        from app.training.dataset import scan_dataset
        from app.training.service import select_checkpoint

        checkpoints = list_checkpoints(ckpt_dir)
        if not checkpoints:
            raise FileNotFoundError(f"目录中没有 checkpoint: {ckpt_dir}")
        cfg = load_checkpoint(checkpoints[0]).config
        validation = scan_dataset(validation_root, cfg.train.target_stem)
        typer.echo(str(select_checkpoint(ckpt_dir, validation, cfg, pairs, seed)))

    _run(_select)


@cli.command("config")
def dump_config(
    output: Optional[Path] = typer.Option(None, "--output", help="写入文件，缺省输出到 stdout"),
    config: Optional[Path] = typer.Option(None, "--config", "-c"),
    override: Optional[List[str]] = typer.Option(None, "--override", "-o"),
):
    """输出 (应用 override 之后的) 完整 RunConfig JSON。"""

    def _dump():
        text = load_run_config(config, override).model_dump_json(indent=2)
        if output is None:
            typer.echo(text)
        else:
            output.parent.mkdir(parents=True, exist_ok=True)
            output.write_text(text, encoding="utf-8")
            typer.echo(f"wrote {output}")

    _run(_dump)


if __name__ == "__main__":
    cli()
