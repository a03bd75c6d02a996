"""
Synchronous joint training of the main model and the auxiliary complexity predictor.

Every step, per sample: the auxiliary model predicts node complexities, the allocation is
derived from them, the main model trains under that allocation, and the auxiliary model
regresses the smoothed, detached per-node loss of the main model.
"""
import csv
import hashlib
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Literal, NamedTuple, Optional, Union

import numpy as np
from tqdm import tqdm

from .assign import BitAllocation, allocate, uniform_allocation, validate_levels
from .auxiliary import AuxConfig, AuxiliaryModel, build_aux_target
from .cost import model_cost_report
from .datagen import Normalizer
from .graph import MeshGraph
from .ioutils import read_checkpoint, write_checkpoint
from .model import (
    MPNN, MPNNConfig, ModelParams, QuantState, AdamConfig, AdamState,
    adam_step, lr_schedule, backward_gradients, per_node_loss, relative_l2,
)

logger = logging.getLogger(__package__)

Mode = Literal['targeted', 'random', 'uniform']
CHECKPOINT_KIND = 'meshquant-train'
CSV_FIELDS = ['step', 'epoch', 'mode', 'levels', 'ratios', 'val_loss', 'rel_l2', 'macs_int8eq', 'aux_macs',
              'train_loss', 'aux_loss', 'node_histogram', 'order_hash', 'config_hash', 'seed', 'code_version']


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr_main: float = 1e-3
    lr_aux: float = 1e-3
    warmup_epochs: int = 1
    levels: tuple[int, ...] = (4, 8)
    ratios: tuple[float, ...] = (0.5, 0.5)
    calibration_steps: int = 200
    ema_decay: float = 0.99
    seed: int = 0
    mode: Mode = 'targeted'
    eval_every: int = 0  # steps; 0 evaluates at the end of every epoch
    eval_kernel: Literal['simulated', 'basic', 'optimized'] = 'simulated'
    weight_decay: float = 1e-6
    grad_clip: float = 1.0
    dtype: Literal['float32', 'float64'] = 'float32'

    def __post_init__(self):
        self.levels = tuple(int(b) for b in self.levels)
        self.ratios = tuple(float(r) for r in self.ratios)

    def validate(self):
        validate_levels(self.levels, self.ratios)
        if self.mode not in ('targeted', 'random', 'uniform'):
            raise ValueError(f"unknown mode '{self.mode}'")
        if self.mode == 'uniform' and sum(r > 0 for r in self.ratios) != 1:
            raise ValueError(f"uniform mode needs exactly one nonzero ratio, got {self.ratios}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if not (0 <= self.warmup_epochs < self.epochs):
            raise ValueError(f"warmup_epochs must be in [0, epochs={self.epochs}), got {self.warmup_epochs}")
        if self.calibration_steps < 1:
            raise ValueError(f"calibration_steps must be at least 1, got {self.calibration_steps}")
        if not (0.0 < self.ema_decay < 1.0):
            raise ValueError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if self.eval_every < 0:
            raise ValueError(f"eval_every must be nonnegative, got {self.eval_every}")
        if self.eval_kernel not in ('simulated', 'basic', 'optimized'):
            raise ValueError(f"unknown eval_kernel '{self.eval_kernel}'")
        if self.lr_main <= 0 or self.lr_aux <= 0:
            raise ValueError("learning rates must be positive")

    @property
    def uniform_bits(self) -> int:
        return self.levels[int(np.argmax(self.ratios))]

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(weight_decay=self.weight_decay, grad_clip=self.grad_clip)

    def to_dict(self) -> dict:
        out = asdict(self)
        out['levels'], out['ratios'] = list(self.levels), list(self.ratios)
        return out


class Models(NamedTuple):
    main: MPNN
    aux: AuxiliaryModel


def build_models(model_config: MPNNConfig, aux_config: AuxConfig, train_config: TrainConfig) -> Models:
    main_config = MPNNConfig(**{**model_config.to_dict(), 'levels': train_config.levels})
    return Models(MPNN(main_config), AuxiliaryModel(aux_config, main_config.in_dim, main_config.pos_dim))


def make_allocation(w: np.ndarray, graph: MeshGraph, config: TrainConfig,
                    shuffle_rng: Optional[np.random.Generator] = None) -> BitAllocation:
    if config.mode == 'uniform':
        return uniform_allocation(graph.n_nodes, graph.n_edges, config.uniform_bits)
    if config.mode == 'random':
        if shuffle_rng is None:
            raise ValueError("random mode needs a shuffle generator")
        w = shuffle_rng.permutation(w)
    return allocate(w, graph.edges, config.levels, config.ratios, graph.clusters)


def _sample_cost(models: Models, allocation: BitAllocation, graph: MeshGraph, config: TrainConfig):
    aux_config = None if config.mode == 'uniform' else models.aux.mpnn_config
    return model_cost_report(models.main.config, allocation, graph, aux_config)


@dataclass
class StepMetrics:
    step: int
    main_loss: float
    aux_loss: float
    macs_int8eq: float
    aux_macs: float
    lr_main: float
    lr_aux: float
    grad_norm: float


def _accumulate(total: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    for name, g in grads.items():
        if name in total:
            total[name] += g
        else:
            total[name] = g.astype(np.float64)


def _mean_grads(total: dict[str, np.ndarray], count: int, params: ModelParams) -> dict[str, np.ndarray]:
    return {name: (g / count).astype(params.tensors[name].dtype) for name, g in total.items()}


def joint_train_step(batch: list[MeshGraph], main_params: ModelParams, aux_params: ModelParams,
                     config: TrainConfig, models: Models, step: int, total_steps: int, warmup_steps: int,
                     shuffle_rng: Optional[np.random.Generator] = None) -> StepMetrics:
    """
    One synchronous update of both models on ``batch``; parameters, moments and quantizer
    statistics are updated in place. Gradients are summed in sample order and averaged.
    """
    if not batch:
        raise ValueError("empty batch")
    main_ctx = models.main.config.quant_context(calibrate=not main_params.quant.frozen)
    calibrate_aux = not aux_params.quant.frozen
    main_total, aux_total = {}, {}
    main_loss = aux_loss = macs = aux_macs = 0.0
    for graph in batch:
        w, aux_cache = models.aux.forward(graph, aux_params, calibrate=calibrate_aux)
        allocation = make_allocation(w, graph, config, shuffle_rng)
        grads, loss = backward_gradients(graph, main_params, allocation, graph.targets,
                                         models.main.config, main_ctx)
        _accumulate(main_total, grads)
        # the target is built from a detached copy of the main loss
        target = build_aux_target(loss.raw, graph, models.aux.config.diffusion_steps)
        a_loss, a_grads = models.aux.loss_and_gradients(graph, aux_params, target, cached=(w, aux_cache))
        _accumulate(aux_total, a_grads)
        report = _sample_cost(models, allocation, graph, config)
        main_loss += loss.scalar
        aux_loss += a_loss
        macs += report.total_macs
        aux_macs += report.aux_macs
    n = len(batch)
    lr_main = lr_schedule(step + 1, total_steps, warmup_steps, config.lr_main)
    lr_aux = lr_schedule(step + 1, total_steps, warmup_steps, config.lr_aux)
    norm = adam_step(main_params.tensors, _mean_grads(main_total, n, main_params), main_params.moments,
                     lr_main, config.adam)
    adam_step(aux_params.tensors, _mean_grads(aux_total, n, aux_params), aux_params.moments, lr_aux, config.adam)
    if step + 1 == config.calibration_steps:
        main_params.quant.freeze()
        aux_params.quant.freeze()
        logger.info(f"quantizer calibration frozen after step {step + 1}")
    return StepMetrics(step, main_loss / n, aux_loss / n, macs / n, aux_macs / n, lr_main, lr_aux, norm)


@dataclass
class EvalMetrics:
    val_loss: float
    rel_l2: float
    macs_int8eq: float
    aux_macs: float
    histogram: dict[str, dict[int, int]] = field(default_factory=dict)


def evaluate(dataset: list[MeshGraph], main_params: ModelParams, aux_params: ModelParams,
             config: TrainConfig, models: Models) -> EvalMetrics:
    """
    Mean validation MSE, relative L2 and per-sample MACs. Parameters and quantizer states
    are only read; random mode draws its shuffles from a generator seeded for evaluation alone.
    """
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    ctx = models.main.config.quant_context(calibrate=False, kernel=config.eval_kernel)
    rng = np.random.default_rng([config.seed, 1]) if config.mode == 'random' else None
    loss = rel = macs = aux_macs = 0.0
    histogram: dict[str, dict[int, int]] = {}
    for graph in dataset:
        w = models.aux.forward(graph, aux_params, calibrate=False)[0]
        allocation = make_allocation(w, graph, config, rng)
        pred = models.main.forward(graph, main_params, allocation, ctx)[0]
        target = graph.targets.reshape(pred.shape)
        loss += per_node_loss(pred, target).scalar
        rel += relative_l2(pred, target)
        report = _sample_cost(models, allocation, graph, config)
        macs += report.total_macs
        aux_macs += report.aux_macs
        for kind, counts in allocation.histogram().items():
            bucket = histogram.setdefault(kind, {})
            for bits, count in counts.items():
                bucket[bits] = bucket.get(bits, 0) + count
    n = len(dataset)
    return EvalMetrics(loss / n, rel / n, macs / n, aux_macs / n, histogram)


@dataclass
class TrainState:
    step: int
    epoch: int
    main: ModelParams
    aux: ModelParams
    normalizer: Normalizer
    order_rng: np.random.Generator
    shuffle_rng: np.random.Generator
    order_hash: str = ''
    # running averages since the last CSV row
    window_loss: float = 0.0
    window_aux: float = 0.0
    window: int = 0
    last_eval: int = -1

    def reset_window(self):
        self.window_loss = self.window_aux = 0.0
        self.window = 0
        self.last_eval = self.step


def _chain_hash(previous: str, indices: np.ndarray) -> str:
    return hashlib.sha256(previous.encode() + np.asarray(indices, dtype='<i8').tobytes()).hexdigest()


def _param_arrays(prefix: str, params: ModelParams) -> dict[str, np.ndarray]:
    arrays = {f"{prefix}/param/{k}": v for k, v in params.tensors.items()}
    arrays |= {f"{prefix}/m/{k}": v for k, v in params.moments.m.items()}
    arrays |= {f"{prefix}/v/{k}": v for k, v in params.moments.v.items()}
    return arrays


def _params_from_arrays(prefix: str, arrays: dict[str, np.ndarray], quant: dict, adam_step_count: int) -> ModelParams:
    def section(kind):
        head = f"{prefix}/{kind}/"
        return {k[len(head):]: v for k, v in arrays.items() if k.startswith(head)}

    return ModelParams(section('param'), QuantState.from_dict(quant),
                       AdamState(adam_step_count, section('m'), section('v')))


class Trainer:
    """
    Owns the models, the normalized splits and the run bookkeeping (CSV rows, checkpoints).
    """

    def __init__(self, config: TrainConfig, model_config: MPNNConfig, aux_config: AuxConfig,
                 train_set: list[MeshGraph], val_set: list[MeshGraph], *,
                 config_hash: str = '', code_version: str = '', progress: bool = False):
        config.validate()
        if not train_set:
            raise ValueError("the training split is empty")
        self.config = config
        self.models = build_models(model_config, aux_config, config)
        self.raw_train, self.raw_val = train_set, val_set
        self.config_hash = config_hash
        self.code_version = code_version
        self.progress = progress
        self.steps_per_epoch = -(-len(train_set) // config.batch_size)
        self.total_steps = config.epochs * self.steps_per_epoch
        self.warmup_steps = config.warmup_epochs * self.steps_per_epoch
        self.train_set: list[MeshGraph] = []
        self.val_set: list[MeshGraph] = []

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def init_state(self) -> TrainState:
        init_seq, order_seq, shuffle_seq = np.random.SeedSequence(self.config.seed).spawn(3)
        init_rng = np.random.default_rng(init_seq)
        main = self.models.main.init_params(init_rng, self.dtype)
        aux = self.models.aux.init_params(init_rng, self.dtype)
        main.quant.ema_decay = aux.quant.ema_decay = self.config.ema_decay
        state = TrainState(0, 0, main, aux, Normalizer.fit(self.raw_train),
                           np.random.default_rng(order_seq), np.random.default_rng(shuffle_seq))
        self._apply_normalizer(state.normalizer)
        return state

    def _apply_normalizer(self, normalizer: Normalizer):
        self.train_set = [normalizer.apply(g) for g in self.raw_train]
        self.val_set = [normalizer.apply(g) for g in self.raw_val]

    def save_checkpoint(self, path: Union[str, Path], state: TrainState, extra: Optional[dict] = None):
        meta = {
            'kind': CHECKPOINT_KIND, 'step': state.step, 'epoch': state.epoch,
            'train': self.config.to_dict(), 'model': self.models.main.config.to_dict(),
            'aux': self.models.aux.config.to_dict(),
            'main_quant': state.main.quant.to_dict(), 'aux_quant': state.aux.quant.to_dict(),
            'main_adam_step': state.main.moments.step, 'aux_adam_step': state.aux.moments.step,
            'normalizer': state.normalizer.to_dict(),
            'rng': {'order': state.order_rng.bit_generator.state, 'shuffle': state.shuffle_rng.bit_generator.state},
            'order_hash': state.order_hash, 'config_hash': self.config_hash, 'code_version': self.code_version,
            'window': {'loss': state.window_loss, 'aux': state.window_aux, 'count': state.window,
                       'last_eval': state.last_eval},
        }
        meta |= extra or {}
        write_checkpoint(path, meta, _param_arrays('main', state.main) | _param_arrays('aux', state.aux))

    def load_checkpoint(self, path: Union[str, Path]) -> TrainState:
        ck = read_checkpoint(path)
        meta = ck.meta
        if meta.get('kind') != CHECKPOINT_KIND:
            raise ValueError(f"'{path}' is not a training checkpoint")
        if meta['train']['seed'] != self.config.seed or meta['train']['mode'] != self.config.mode:
            raise ValueError(f"checkpoint '{path}' was written by a run with another seed or mode")
        main = _params_from_arrays('main', ck.arrays, meta['main_quant'], meta['main_adam_step'])
        aux = _params_from_arrays('aux', ck.arrays, meta['aux_quant'], meta['aux_adam_step'])
        order_rng, shuffle_rng = np.random.default_rng(), np.random.default_rng()
        order_rng.bit_generator.state = meta['rng']['order']
        shuffle_rng.bit_generator.state = meta['rng']['shuffle']
        state = TrainState(meta['step'], meta['epoch'], main, aux, Normalizer.from_dict(meta['normalizer']),
                           order_rng, shuffle_rng, meta['order_hash'])
        window = meta.get('window', {})
        state.window_loss = float(window.get('loss', 0.0))
        state.window_aux = float(window.get('aux', 0.0))
        state.window = int(window.get('count', 0))
        state.last_eval = int(window.get('last_eval', state.step))
        self._apply_normalizer(state.normalizer)
        logger.info(f"resumed from '{path}' at step {state.step} (epoch {state.epoch})")
        return state

    def evaluate(self, state: TrainState) -> EvalMetrics:
        return evaluate(self.val_set or self.train_set, state.main, state.aux, self.config, self.models)

    def _csv_row(self, state: TrainState, metrics: EvalMetrics, train_loss: float, aux_loss: float) -> dict:
        nodes = metrics.histogram.get('nodes', {})
        return {
            'step': state.step, 'epoch': state.epoch, 'mode': self.config.mode,
            'levels': '/'.join(map(str, self.config.levels)),
            'ratios': '/'.join(repr(r) for r in self.config.ratios),
            'val_loss': repr(metrics.val_loss), 'rel_l2': repr(metrics.rel_l2),
            'macs_int8eq': repr(metrics.macs_int8eq), 'aux_macs': repr(metrics.aux_macs),
            'train_loss': repr(train_loss), 'aux_loss': repr(aux_loss),
            'node_histogram': ' '.join(f"{b}:{c}" for b, c in sorted(nodes.items())),
            'order_hash': state.order_hash[:16], 'config_hash': self.config_hash[:16],
            'seed': self.config.seed, 'code_version': self.code_version,
        }

    def run(self, csv_path: Union[str, Path], checkpoint_path: Optional[Union[str, Path]] = None,
            state: Optional[TrainState] = None) -> tuple[TrainState, list[dict]]:
        """Train to the configured number of epochs; returns the final state and the CSV rows written."""
        if state is None:
            state = self.init_state()
        csv_path = Path(csv_path)
        rows = _restore_rows(csv_path, state.step) if state.step > 0 else []
        with open(csv_path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fieldnames=CSV_FIELDS, lineterminator='\n')
            writer.writeheader()
            writer.writerows(rows)
            f.flush()
            new_rows = self._loop(state, writer, f, checkpoint_path)
        return state, rows + new_rows

    def _loop(self, state: TrainState, writer: csv.DictWriter, f, checkpoint_path) -> list[dict]:
        c = self.config
        rows = []
        bar = tqdm(total=self.total_steps, initial=state.step, disable=not self.progress, desc=c.mode)
        while state.epoch < c.epochs:
            order = state.order_rng.permutation(len(self.train_set))
            for start in range(0, len(order), c.batch_size):
                idx = order[start:start + c.batch_size]
                state.order_hash = _chain_hash(state.order_hash, idx)
                logger.debug(f"step {state.step}: samples {idx.tolist()}")
                metrics = joint_train_step([self.train_set[i] for i in idx], state.main, state.aux, c,
                                           self.models, state.step, self.total_steps, self.warmup_steps,
                                           state.shuffle_rng)
                state.step += 1
                state.window_loss += float(metrics.main_loss)
                state.window_aux += float(metrics.aux_loss)
                state.window += 1
                bar.update()
                if c.eval_every and state.step % c.eval_every == 0:
                    rows.append(self._emit_window(state, writer, f))
            state.epoch += 1
            # the final row precedes the last checkpoint
            if (not c.eval_every or state.epoch == c.epochs) and state.step != state.last_eval:
                rows.append(self._emit_window(state, writer, f))
            if checkpoint_path is not None:
                self.save_checkpoint(checkpoint_path, state)
        bar.close()
        return rows

    def _emit_window(self, state: TrainState, writer: csv.DictWriter, f) -> dict:
        count = max(state.window, 1)
        row = self._emit(state, writer, f, state.window_loss / count, state.window_aux / count)
        state.reset_window()
        return row

    def _emit(self, state: TrainState, writer: csv.DictWriter, f, train_loss: float, aux_loss: float) -> dict:
        metrics = self.evaluate(state)
        row = self._csv_row(state, metrics, train_loss, aux_loss)
        writer.writerow(row)
        f.flush()
        logger.info(f"step {state.step} epoch {state.epoch}: val_loss={metrics.val_loss:.4e} "
                    f"rel_l2={metrics.rel_l2:.4f} macs={metrics.macs_int8eq:.4e}")
        return row


def _restore_rows(csv_path: Path, step: int) -> list[dict]:
    """Rows of an interrupted run up to ``step``; later rows are replayed by the resumed run."""
    if not csv_path.exists():
        return []
    with open(csv_path, newline='', encoding='utf-8') as f:
        return [row for row in csv.DictReader(f) if int(row['step']) <= step]
