"""Command-line surface.

Commands: gen-data, warmup, train, probe-seg, probe-depth, eval,
verify; each takes --config. Exit status 0 on success, 1 for
runtime/data errors, 2 for usage or configuration errors. Mutating
commands hold a lock file in their output directory so concurrent
invocations are rejected.
"""

from __future__ import annotations

import argparse
import os
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_into, save_checkpoint
from .config import RunConfig, fingerprint, parse_config, write_effective
from .data import Dataset, gen_dataset, num_classes
from .errors import CheckpointError, ConfigError, DatasetError, DivergenceError, \
    EvaluationError, LockError
from .model import MultiTaskModel
from .probe import MetricReport, evaluate_probe_depth, evaluate_probe_seg, fit_probe_depth, \
    fit_probe_seg
from .tensor import Tensor
from .trainer import TrainConfig, make_batch, task_loss, train


@contextmanager
def output_lock(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    lock_path = directory / "lock"
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{directory} is locked by another invocation "
                        f"(remove {lock_path} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock_path.unlink(missing_ok=True)


def build_model(cfg: RunConfig) -> MultiTaskModel:
    T.set_default_dtype(cfg.train.precision)
    return MultiTaskModel(cfg.backbone, cfg.caption, cfg.depth_head, cfg.seg_head,
                          seed=cfg.run.seed)


def _dataset(path: str, key: str) -> Dataset:
    if not path:
        raise ConfigError(key, "no dataset directory configured")
    return Dataset(path)


def _write_lines(path: Path, lines) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines))


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    write_effective(cfg, out_dir / "config_effective.ini")


def cmd_gen_data(cfg: RunConfig) -> int:
    if not cfg.gen.dir:
        raise ConfigError("gen.dir", "no output directory configured")
    target = Path(cfg.gen.dir)
    with output_lock(target):
        gen_dataset(target, cfg.gen.n, cfg.run.seed, cfg.gen.split, side=cfg.gen.side)
    print(f"wrote {cfg.gen.n} samples to {target}")
    return 0


def _run_stage(cfg: RunConfig, stage: str) -> int:
    out_dir = Path(cfg.run.output_dir)
    train_cfg: TrainConfig = replace(cfg.train, stage=stage, seed=cfg.run.seed)
    with output_lock(out_dir):
        _echo_config(cfg, out_dir)
        model = build_model(cfg)
        if stage == "warmup":
            datasets = {"cap": _dataset(cfg.data.warmup_dir, "data.warmup_dir")}
            ckpt_name, metrics_name = "warmup.bin", "warmup_metrics.txt"
        else:
            dirs = {"cap": (cfg.data.cap_dir, "data.cap_dir"),
                    "depth": (cfg.data.depth_dir, "data.depth_dir"),
                    "seg": (cfg.data.seg_dir, "data.seg_dir")}
            datasets = {t: _dataset(path, key) for t, (path, key) in dirs.items()
                        if t in train_cfg.tasks}
            ckpt_name, metrics_name = "checkpoint.bin", "train_metrics.txt"
        if stage == "multitask" and train_cfg.init_checkpoint:
            load_into(model.named_params(), train_cfg.init_checkpoint)
        lines: list[str] = []
        try:
            train(model, train_cfg, datasets, cfg.losses, log=lines.append)
        finally:
            _write_lines(out_dir / metrics_name, lines)
        save_checkpoint(model.named_params(), out_dir / ckpt_name,
                        fingerprint=fingerprint(cfg))
    print(f"wrote {out_dir / ckpt_name} and {out_dir / metrics_name}")
    return 0


def _load_backbone(cfg: RunConfig) -> MultiTaskModel:
    model = build_model(cfg)
    ckpt = cfg.probe.checkpoint or str(Path(cfg.run.output_dir) / "checkpoint.bin")
    if not Path(ckpt).exists():
        raise DatasetError(f"no checkpoint at {ckpt}; run train first or set probe.checkpoint")
    load_into(model.named_params(), ckpt)
    return model


def cmd_probe_seg(cfg: RunConfig) -> int:
    out_dir = Path(cfg.run.output_dir)
    with output_lock(out_dir):
        model = _load_backbone(cfg)
        fit_ds = _dataset(cfg.data.probe_fit_dir, "data.probe_fit_dir")
        eval_ds = _dataset(cfg.data.probe_eval_dir, "data.probe_eval_dir")
        probe = fit_probe_seg(model.backbone, fit_ds, num_classes(), cfg.probe)
        report = evaluate_probe_seg(model.backbone, probe, eval_ds, num_classes(),
                                    dataset_id=cfg.data.probe_eval_dir)
        _write_lines(out_dir / "probe_seg_metrics.txt", [report.line()])
    print(report.line())
    return 0


def cmd_probe_depth(cfg: RunConfig) -> int:
    out_dir = Path(cfg.run.output_dir)
    with output_lock(out_dir):
        model = _load_backbone(cfg)
        fit_ds = _dataset(cfg.data.probe_fit_dir, "data.probe_fit_dir")
        eval_ds = _dataset(cfg.data.probe_eval_dir, "data.probe_eval_dir")
        probe = fit_probe_depth(model.backbone, fit_ds, cfg.probe)
        reports = evaluate_probe_depth(model.backbone, probe, eval_ds,
                                       dataset_id=cfg.data.probe_eval_dir)
        _write_lines(out_dir / "probe_depth_metrics.txt", [r.line() for r in reports])
    for r in reports:
        print(r.line())
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    """Held-out task losses and caption token accuracy for a checkpoint."""
    out_dir = Path(cfg.run.output_dir)
    with output_lock(out_dir):
        model = _load_backbone(cfg)
        ds = _dataset(cfg.data.eval_dir, "data.eval_dir")
        sums = {"cap": 0.0, "depth": 0.0, "seg": 0.0, "cap_acc": 0.0}
        chunk = 16
        batches = 0
        with T.no_grad():
            for start in range(0, len(ds), chunk):
                idx = list(range(start, min(start + chunk, len(ds))))
                for task in ("cap", "depth", "seg"):
                    batch = make_batch(ds, task, idx)
                    sums[task] += task_loss(model, batch, cfg.losses).item()
                images = np.stack([ds[i].image for i in idx])
                f_final = model.backbone.forward_features(Tensor(images))[-1]
                sums["cap_acc"] += model.caption.token_accuracy(
                    model.caption.project(f_final), [ds[i].caption for i in idx])
                batches += 1
        reports = [
            MetricReport("cap", "loss", sums["cap"] / batches, cfg.data.eval_dir, len(ds)),
            MetricReport("cap", "token_accuracy", sums["cap_acc"] / batches,
                         cfg.data.eval_dir, len(ds)),
            MetricReport("depth", "loss", sums["depth"] / batches, cfg.data.eval_dir, len(ds)),
            MetricReport("seg", "loss", sums["seg"] / batches, cfg.data.eval_dir, len(ds)),
        ]
        _write_lines(out_dir / "eval_metrics.txt", [r.line() for r in reports])
    for r in reports:
        print(r.line())
    return 0


def cmd_verify(cfg: RunConfig) -> int:
    from .verify import run_suite

    return 0 if run_suite(emit=print) else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "warmup": lambda cfg: _run_stage(cfg, "warmup"),
    "train": lambda cfg: _run_stage(cfg, "multitask"),
    "probe-seg": cmd_probe_seg,
    "probe-depth": cmd_probe_depth,
    "eval": cmd_eval,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtvit",
        description="Multi-task post-training for a toy vision-transformer backbone.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the run configuration file")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = parse_config(args.config)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, DivergenceError, EvaluationError,
            LockError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
