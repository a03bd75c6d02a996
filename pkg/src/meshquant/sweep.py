"""
Pareto sweeps: one training run per (grid point, seed), tracked in the sweep registry,
consolidated into a tidy CSV and summarized into a cost/loss report.
"""
import asyncio
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import database
from .config import ExperimentConfig, SweepPointConfig, code_version
from .datagen import read_dataset
from .train import Trainer

logger = logging.getLogger(__package__)

SWEEP_FIELDS = ['point', 'mode', 'levels', 'ratios', 'seed', 'status', 'steps', 'val_loss', 'rel_l2',
                'macs_int8eq', 'aux_macs', 'config_hash', 'code_version', 'error']


@dataclass
class PointJob:
    point: SweepPointConfig
    seed: int
    config: dict
    run_dir: str
    config_hash: str
    code_version: str


def _levels_str(levels) -> str:
    return '/'.join(str(b) for b in levels)


def _ratios_str(ratios) -> str:
    return '/'.join(repr(float(r)) for r in ratios)


def run_point(job: PointJob) -> dict:
    """Train one grid point; returns the final metrics row. Runs in worker processes."""
    config = ExperimentConfig.from_dict(job.config)
    dataset = read_dataset(config.paths.dataset)
    run_dir = Path(job.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(config.point_train_config(job.point, job.seed), config.model, config.aux,
                      dataset.train, dataset.val, config_hash=job.config_hash, code_version=job.code_version)
    _, rows = trainer.run(run_dir / 'metrics.csv', run_dir / 'checkpoint.mqck')
    return rows[-1]


def plan_jobs(config: ExperimentConfig) -> list[PointJob]:
    tree = config.to_dict()
    version = code_version()
    return [PointJob(point, seed, tree, str(config.paths.output / point.name / f"seed{seed}"),
                     config.point_hash(point, seed), version)
            for point in config.sweep.points for seed in config.sweep.seeds]


async def _execute(jobs: list[tuple[PointJob, database.SweepPoint]], workers: int, progress: bool):
    bar = tqdm(total=len(jobs), disable=not progress, desc='sweep')

    async def finish(job: PointJob, row: database.SweepPoint, future):
        try:
            result = await future
        except Exception as e:
            logger.error(f"sweep point '{job.point.name}' seed {job.seed} failed: {e!r}")
            await database.record_failure(row, repr(e))
        else:
            await database.record_result(row, result, str(Path(job.run_dir) / 'metrics.csv'))
            logger.info(f"sweep point '{job.point.name}' seed {job.seed} finished: val_loss={result['val_loss']}")
        bar.update()

    if workers > 1:
        loop = asyncio.get_running_loop()
        with ProcessPoolExecutor(workers) as pool:
            futures = []
            for job, row in jobs:
                await database.mark_running(row)
                futures.append(loop.run_in_executor(pool, run_point, job))
            # collected in grid order so the registry is written deterministically
            for (job, row), future in zip(jobs, futures):
                await finish(job, row, future)
    else:
        for job, row in jobs:
            await database.mark_running(row)
            await finish(job, row, asyncio.to_thread(run_point, job))
    bar.close()


async def run_sweep_async(config: ExperimentConfig, resume: bool = False, progress: bool = False) -> pd.DataFrame:
    config.validate(sweep=True)
    config.paths.output.mkdir(parents=True, exist_ok=True)
    jobs = plan_jobs(config)
    async with database.connect(config.paths.registry):
        pending = []
        for job in jobs:
            row, todo = await database.register_point(
                job.point.name, job.seed, job.point.mode, _levels_str(job.point.levels),
                _ratios_str(job.point.ratios), job.config_hash, resume=resume)
            if todo:
                pending.append((job, row))
            else:
                logger.info(f"skipping finished sweep point '{job.point.name}' seed {job.seed}")
        await _execute(pending, config.sweep.workers, progress)
        records = {(p.name, p.seed): p for p in await database.list_points()}
    frame = pd.DataFrame([_record_row(records[job.point.name, job.seed], job) for job in jobs],
                         columns=SWEEP_FIELDS)
    failed = int((frame['status'] != database.DONE).sum())
    if failed:
        logger.warning(f"{failed} of {len(frame)} sweep runs did not finish")
    return frame


def _record_row(record: database.SweepPoint, job: PointJob) -> dict:
    return {
        'point': record.name, 'mode': record.mode, 'levels': record.levels, 'ratios': record.ratios,
        'seed': record.seed, 'status': record.status, 'steps': record.steps,
        'val_loss': record.val_loss, 'rel_l2': record.rel_l2,
        'macs_int8eq': record.macs_int8eq, 'aux_macs': record.aux_macs,
        'config_hash': record.config_hash[:16], 'code_version': job.code_version, 'error': record.error,
    }


def run_sweep(config: ExperimentConfig, resume: bool = False, progress: bool = False) -> Path:
    """Run the grid, write ``sweep.csv`` (and the report) into the output directory."""
    frame = asyncio.run(run_sweep_async(config, resume, progress))
    path = config.paths.output / 'sweep.csv'
    frame.to_csv(path, index=False, lineterminator='\n')
    logger.info(f"wrote {len(frame)} sweep rows to '{path}'")
    write_report(frame, config.paths.output, plot=config.sweep.plot)
    return path


def pareto_mask(costs, losses) -> np.ndarray:
    """True for points no other point beats in both cost and loss."""
    costs, losses = np.asarray(costs, dtype=np.float64), np.asarray(losses, dtype=np.float64)
    mask = np.ones(len(costs), dtype=bool)
    for i in range(len(costs)):
        dominated = (costs <= costs[i]) & (losses <= losses[i]) & ((costs < costs[i]) | (losses < losses[i]))
        mask[i] = not dominated.any()
    return mask


def _uniform_bits(frame: pd.DataFrame) -> pd.Series:
    def bits(row):
        if row['mode'] != 'uniform':
            return np.nan
        levels = [int(b) for b in str(row['levels']).split('/')]
        ratios = [float(r) for r in str(row['ratios']).split('/')]
        return levels[int(np.argmax(ratios))]

    return frame.apply(bits, axis=1)


def loss_increase(frame: pd.DataFrame) -> pd.Series:
    """
    Loss of every row mapped so the highest-precision uniform loss is 0 % and the
    lowest-precision uniform loss is 100 %; NaN without both references.
    """
    bits = _uniform_bits(frame)
    if bits.notna().sum() < 2 or bits.min() == bits.max():
        return pd.Series(np.nan, index=frame.index)
    base = frame.loc[bits == bits.max(), 'val_loss'].mean()
    full = frame.loc[bits == bits.min(), 'val_loss'].mean()
    if full == base:
        return pd.Series(np.nan, index=frame.index)
    return 100.0 * (frame['val_loss'] - base) / (full - base)


def summarize(frame: pd.DataFrame) -> pd.DataFrame:
    """Per-point means over the finished seeds, Pareto membership and normalized loss increase."""
    done = frame[frame['status'] == database.DONE]
    if done.empty:
        raise ValueError("no finished sweep runs to summarize")
    summary = done.groupby(['point', 'mode', 'levels', 'ratios'], sort=False).agg(
        val_loss=('val_loss', 'mean'), val_loss_std=('val_loss', 'std'),
        rel_l2=('rel_l2', 'mean'), macs_int8eq=('macs_int8eq', 'mean'),
        aux_macs=('aux_macs', 'mean'), n_seeds=('seed', 'count'),
    ).reset_index()
    summary['pareto'] = pareto_mask(summary['macs_int8eq'], summary['val_loss'])
    summary['loss_increase_pct'] = loss_increase(summary)
    return summary


def per_seed_increase(frame: pd.DataFrame) -> pd.DataFrame:
    """Normalized loss increase per seed and point, one column per point."""
    done = frame[frame['status'] == database.DONE]
    parts = []
    for seed, group in done.groupby('seed'):
        group = group.copy()
        group['loss_increase_pct'] = loss_increase(group)
        parts.append(group)
    if not parts:
        raise ValueError("no finished sweep runs")
    return pd.concat(parts).pivot(index='seed', columns='point', values='loss_increase_pct')


def write_report(frame: pd.DataFrame, output_dir: Union[str, Path], plot: bool = False) -> Optional[Path]:
    output_dir = Path(output_dir)
    try:
        summary = summarize(frame)
    except ValueError as e:
        logger.warning(f"no report written: {e}")
        return None
    path = output_dir / 'report.csv'
    summary.to_csv(path, index=False, lineterminator='\n')
    per_seed_increase(frame).to_csv(output_dir / 'per_seed.csv', lineterminator='\n')
    logger.info(f"wrote report '{path}' and per-seed loss increases")
    if plot:
        plot_pareto(summary, output_dir / 'pareto.png')
    return path


def plot_pareto(summary: pd.DataFrame, path: Union[str, Path]) -> Optional[Path]:
    try:
        import matplotlib
        matplotlib.use('Agg')
        import matplotlib.pyplot as plt
    except ImportError as e:
        logger.warning(f"matplotlib unavailable, skipping plot: {e!r}")
        return None
    fig, ax = plt.subplots(figsize=(5, 4))
    for mode, group in summary.groupby('mode'):
        ax.scatter(group['macs_int8eq'], group['val_loss'], label=mode)
        for _, row in group.iterrows():
            ax.annotate(row['point'], (row['macs_int8eq'], row['val_loss']), fontsize=7)
    front = summary[summary['pareto']].sort_values('macs_int8eq')
    ax.plot(front['macs_int8eq'], front['val_loss'], 'k--', linewidth=0.8, label='Pareto front')
    ax.set_xlabel('Int8-equivalent MACs per sample')
    ax.set_ylabel('validation MSE')
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    logger.info(f"wrote plot '{path}'")
    return Path(path)


def report_from_csv(paths: list[Union[str, Path]], output_dir: Union[str, Path], plot: bool = False) -> Path:
    frames = []
    for path in paths:
        if not Path(path).exists():
            raise FileNotFoundError(f"No such sweep CSV: '{path}'")
        frames.append(pd.read_csv(path))
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    result = write_report(pd.concat(frames, ignore_index=True), output_dir, plot)
    if result is None:
        raise RuntimeError("none of the sweep runs finished")
    return result
