import csv
import tempfile
from dataclasses import replace
from pathlib import Path
from unittest import TestCase

import numpy as np

from meshquant.assign import uniform_allocation
from meshquant.auxiliary import AuxConfig
from meshquant.graph import MeshGraph
from meshquant.model import MPNNConfig
from meshquant.train import (
    CSV_FIELDS, TrainConfig, Trainer, build_models, evaluate, joint_train_step, make_allocation,
)

from .fixtures import darcy_graphs

MODEL = MPNNConfig(hidden_dim=8, n_layers=1)
AUX = AuxConfig(preset='tiny', hidden_dim=8, n_layers=1)


def _train_config(**kwargs) -> TrainConfig:
    values = dict(epochs=2, batch_size=2, warmup_epochs=0, calibration_steps=2, lr_main=1e-2, lr_aux=1e-2)
    values.update(kwargs)
    return TrainConfig(**values)


def _closed_form_macs(config: MPNNConfig, n_nodes: int, n_edges: int) -> int:
    h = config.hidden_dim
    per_node = (config.in_dim + config.pos_dim) * h + h * h + config.n_layers * 3 * h * h + h * h + h * config.out_dim
    return n_nodes * per_node + n_edges * config.n_layers * (config.message_dim * h + h * h)


class _Interrupted(Exception):
    pass


class _InterruptedTrainer(Trainer):
    """Stops right after writing the first checkpoint."""

    def save_checkpoint(self, path, state, extra=None):
        super().save_checkpoint(path, state, extra)
        raise _Interrupted


class TestTrainConfig(TestCase):
    def test_defaults_are_valid(self):
        TrainConfig().validate()

    def test_invalid(self):
        with self.assertRaises(ValueError):
            TrainConfig(mode='uniform', ratios=(0.5, 0.5)).validate()
        with self.assertRaises(ValueError):
            TrainConfig(epochs=2, warmup_epochs=2).validate()
        with self.assertRaises(ValueError):
            TrainConfig(ratios=(0.3, 0.3)).validate()
        with self.assertRaises(ValueError):
            TrainConfig(mode='adaptive').validate()
        with self.assertRaises(ValueError):
            TrainConfig(calibration_steps=0).validate()

    def test_uniform_bits(self):
        self.assertEqual(TrainConfig(mode='uniform', ratios=(1.0, 0.0)).uniform_bits, 4)
        self.assertEqual(TrainConfig(mode='uniform', ratios=(0.0, 1.0)).uniform_bits, 8)


class TestJointStep(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.graphs = darcy_graphs(4)

    def _setup(self, config: TrainConfig, seed: int = 0):
        models = build_models(MODEL, AUX, config)
        rng = np.random.default_rng(seed)
        return models, models.main.init_params(rng), models.aux.init_params(rng)

    def _step(self, config, models, main, aux, step=0):
        return joint_train_step(self.graphs[:2], main, aux, config, models, step, 8, 0, np.random.default_rng(9))

    def test_reproducible(self):
        config = _train_config()
        models, main, aux = self._setup(config)
        main2, aux2 = main.copy(), aux.copy()
        first = self._step(config, models, main, aux)
        second = self._step(config, models, main2, aux2)
        self.assertEqual(first, second)
        for name in main.tensors:
            np.testing.assert_array_equal(main.tensors[name], main2.tensors[name])
        self.assertEqual(main.quant.to_dict(), main2.quant.to_dict())

    def test_updates_parameters(self):
        config = _train_config()
        models, main, aux = self._setup(config)
        before_main, before_aux = main.copy(), aux.copy()
        metrics = self._step(config, models, main, aux)
        self.assertTrue(any(not np.array_equal(main.tensors[k], before_main.tensors[k]) for k in main.tensors))
        self.assertTrue(any(not np.array_equal(aux.tensors[k], before_aux.tensors[k]) for k in aux.tensors))
        self.assertEqual(main.moments.step, 1)
        self.assertGreater(metrics.macs_int8eq, 0)
        self.assertGreater(metrics.aux_macs, 0)

    def test_main_update_depends_only_on_auxiliary_order(self):
        """Auxiliary outputs with the same node ranking give the same main update; a reversed ranking does not."""
        config = _train_config()
        models, main, aux = self._setup(config)
        shifted, reversed_ = aux.copy(), aux.copy()
        shifted.tensors['decoder.1.bias'] = shifted.tensors['decoder.1.bias'] + 0.5
        for name in ('decoder.1.weight', 'decoder.1.bias'):
            reversed_.tensors[name] = -reversed_.tensors[name]
        graph = self.graphs[0]
        w = models.aux.forward(graph, aux.copy(), calibrate=False)[0]
        w_shifted = models.aux.forward(graph, shifted.copy(), calibrate=False)[0]
        self.assertFalse(np.array_equal(w, w_shifted))
        np.testing.assert_array_equal(np.argsort(w, kind='stable'), np.argsort(w_shifted, kind='stable'))

        updated = []
        for aux_params in (aux, shifted, reversed_):
            main_copy = main.copy()
            self._step(config, models, main_copy, aux_params)
            updated.append(main_copy)
        base, same, other = updated
        for name in main.tensors:
            np.testing.assert_array_equal(base.tensors[name], same.tensors[name])
            np.testing.assert_array_equal(base.moments.m[name], same.moments.m[name])
        self.assertTrue(any(not np.array_equal(base.moments.m[k], other.moments.m[k]) for k in main.tensors))

    def test_uniform_mode_ignores_auxiliary(self):
        config = _train_config(mode='uniform', ratios=(0.0, 1.0))
        models, main, aux = self._setup(config)
        other_aux = models.aux.init_params(np.random.default_rng(123))
        main2 = main.copy()
        metrics = self._step(config, models, main, aux)
        self._step(config, models, main2, other_aux)
        for name in main.tensors:
            np.testing.assert_array_equal(main.tensors[name], main2.tensors[name])
        self.assertEqual(metrics.aux_macs, 0)

    def test_calibration_freezes(self):
        config = _train_config(calibration_steps=1)
        models, main, aux = self._setup(config)
        self._step(config, models, main, aux)
        self.assertTrue(main.quant.frozen and aux.quant.frozen)
        frozen = main.quant.to_dict()
        self._step(config, models, main, aux, step=1)
        self.assertEqual(main.quant.to_dict(), frozen)

    def test_empty_batch(self):
        config = _train_config()
        models, main, aux = self._setup(config)
        with self.assertRaises(ValueError):
            joint_train_step([], main, aux, config, models, 0, 8, 0)

    def test_random_mode_needs_generator(self):
        with self.assertRaises(ValueError):
            make_allocation(np.zeros(16), self.graphs[0], _train_config(mode='random'))


class TestEvaluate(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.graphs = darcy_graphs(3)

    def _setup(self, config: TrainConfig):
        models = build_models(MODEL, AUX, config)
        rng = np.random.default_rng(0)
        return models, models.main.init_params(rng), models.aux.init_params(rng)

    def test_side_effect_free(self):
        config = _train_config(mode='random')
        models, main, aux = self._setup(config)
        before = main.copy()
        first = evaluate(self.graphs, main, aux, config, models)
        second = evaluate(self.graphs, main, aux, config, models)
        self.assertEqual(first, second)
        self.assertEqual(main.quant.to_dict(), before.quant.to_dict())
        for name in main.tensors:
            np.testing.assert_array_equal(main.tensors[name], before.tensors[name])

    def test_uniform_macs_match_closed_form(self):
        config = _train_config(mode='uniform', ratios=(0.0, 1.0))
        models, main, aux = self._setup(config)
        metrics = evaluate(self.graphs, main, aux, config, models)
        graph = self.graphs[0]
        self.assertEqual(metrics.macs_int8eq, _closed_form_macs(MODEL, graph.n_nodes, graph.n_edges))
        self.assertEqual(metrics.aux_macs, 0)
        self.assertEqual(metrics.histogram['nodes'], {8: 3 * graph.n_nodes})

    def test_targeted_macs_include_auxiliary(self):
        config = _train_config()
        models, main, aux = self._setup(config)
        metrics = evaluate(self.graphs, main, aux, config, models)
        graph = self.graphs[0]
        self.assertEqual(metrics.aux_macs, _closed_form_macs(models.aux.mpnn_config, graph.n_nodes, graph.n_edges))
        self.assertEqual(metrics.histogram['nodes'], {4: 24, 8: 24})

    def test_perfect_prediction(self):
        config = _train_config(mode='uniform', ratios=(0.0, 1.0))
        models, main, aux = self._setup(config)
        ctx = models.main.config.quant_context()
        perfect = []
        for g in self.graphs:
            pred = models.main.forward(g, main, uniform_allocation(g.n_nodes, g.n_edges, 8), ctx)[0]
            perfect.append(MeshGraph(positions=g.positions, features=g.features, edges=g.edges, targets=pred))
        metrics = evaluate(perfect, main, aux, config, models)
        self.assertEqual(metrics.val_loss, 0.0)
        self.assertEqual(metrics.rel_l2, 0.0)

    def test_integer_kernels_agree(self):
        config = _train_config()
        models, main, aux = self._setup(config)
        basic = evaluate(self.graphs, main, aux, replace(config, eval_kernel='basic'), models)
        optimized = evaluate(self.graphs, main, aux, replace(config, eval_kernel='optimized'), models)
        simulated = evaluate(self.graphs, main, aux, config, models)
        self.assertEqual(basic.val_loss, optimized.val_loss)
        self.assertAlmostEqual(basic.val_loss, simulated.val_loss, delta=1e-3 * simulated.val_loss)

    def test_empty(self):
        config = _train_config()
        models, main, aux = self._setup(config)
        with self.assertRaises(ValueError):
            evaluate([], main, aux, config, models)


class TestTrainer(TestCase):
    @classmethod
    def setUpClass(cls):
        graphs = darcy_graphs(6)
        cls.train_set, cls.val_set = graphs[:4], graphs[4:]

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _trainer(self, cls=Trainer, **kwargs) -> Trainer:
        return cls(_train_config(**kwargs), MODEL, AUX, self.train_set, self.val_set, config_hash='abc')

    def _rows(self, path: Path) -> list[dict]:
        with open(path, newline='') as f:
            return list(csv.DictReader(f))

    def test_csv_rows(self):
        state, rows = self._trainer().run(self.dir / 'metrics.csv')
        self.assertEqual((state.step, state.epoch), (4, 2))
        written = self._rows(self.dir / 'metrics.csv')
        self.assertEqual(list(written[0]), CSV_FIELDS)
        self.assertEqual([r['step'] for r in written], ['2', '4'])
        self.assertEqual(written[-1]['levels'], '4/8')
        self.assertEqual(written[-1]['node_histogram'], '4:16 8:16')
        self.assertTrue(state.main.quant.frozen)
        self.assertEqual(len(rows), 2)

    def test_eval_every(self):
        self._trainer(eval_every=1).run(self.dir / 'metrics.csv')
        self.assertEqual([r['step'] for r in self._rows(self.dir / 'metrics.csv')], ['1', '2', '3', '4'])

    def test_runs_are_byte_identical(self):
        self._trainer().run(self.dir / 'a.csv')
        self._trainer().run(self.dir / 'b.csv')
        self.assertEqual((self.dir / 'a.csv').read_bytes(), (self.dir / 'b.csv').read_bytes())

    def test_resume_matches_uninterrupted_run(self):
        self._trainer(mode='random').run(self.dir / 'a.csv', self.dir / 'a.mqck')
        with self.assertRaises(_Interrupted):
            self._trainer(_InterruptedTrainer, mode='random').run(self.dir / 'b.csv', self.dir / 'b.mqck')
        self.assertEqual(len(self._rows(self.dir / 'b.csv')), 1)
        trainer = self._trainer(mode='random')
        state = trainer.load_checkpoint(self.dir / 'b.mqck')
        self.assertEqual((state.step, state.epoch), (2, 1))
        trainer.run(self.dir / 'b.csv', self.dir / 'b.mqck', state)
        self.assertEqual((self.dir / 'a.csv').read_bytes(), (self.dir / 'b.csv').read_bytes())

    def test_resume_between_evaluations(self):
        """Steps trained before the checkpoint still count towards the next row's averages."""
        self._trainer(eval_every=3).run(self.dir / 'a.csv', self.dir / 'a.mqck')
        self.assertEqual([r['step'] for r in self._rows(self.dir / 'a.csv')], ['3', '4'])
        with self.assertRaises(_Interrupted):
            self._trainer(_InterruptedTrainer, eval_every=3).run(self.dir / 'b.csv', self.dir / 'b.mqck')
        self.assertEqual(self._rows(self.dir / 'b.csv'), [])
        trainer = self._trainer(eval_every=3)
        state = trainer.load_checkpoint(self.dir / 'b.mqck')
        self.assertEqual((state.step, state.window, state.last_eval), (2, 2, -1))
        trainer.run(self.dir / 'b.csv', self.dir / 'b.mqck', state)
        self.assertEqual((self.dir / 'a.csv').read_bytes(), (self.dir / 'b.csv').read_bytes())

    def test_resume_finished_run(self):
        self._trainer(eval_every=3).run(self.dir / 'metrics.csv', self.dir / 'run.mqck')
        before = (self.dir / 'metrics.csv').read_bytes()
        trainer = self._trainer(eval_every=3)
        state = trainer.load_checkpoint(self.dir / 'run.mqck')
        self.assertEqual((state.step, state.window, state.last_eval), (4, 0, 4))
        _, rows = trainer.run(self.dir / 'metrics.csv', self.dir / 'run.mqck', state)
        self.assertEqual([r['step'] for r in rows], ['3', '4'])
        self.assertEqual((self.dir / 'metrics.csv').read_bytes(), before)

    def test_checkpoint_round_trip(self):
        trainer = self._trainer()
        state, _ = trainer.run(self.dir / 'metrics.csv', self.dir / 'run.mqck')
        restored = self._trainer().load_checkpoint(self.dir / 'run.mqck')
        for name, tensor in state.main.tensors.items():
            np.testing.assert_array_equal(restored.main.tensors[name], tensor)
        for name, moment in state.aux.moments.v.items():
            np.testing.assert_array_equal(restored.aux.moments.v[name], moment)
        self.assertEqual(restored.main.quant.to_dict(), state.main.quant.to_dict())
        self.assertEqual(restored.order_rng.bit_generator.state, state.order_rng.bit_generator.state)
        self.assertEqual(restored.order_hash, state.order_hash)

    def test_checkpoint_from_other_seed(self):
        self._trainer().run(self.dir / 'metrics.csv', self.dir / 'run.mqck')
        with self.assertRaises(ValueError):
            self._trainer(seed=1).load_checkpoint(self.dir / 'run.mqck')

    def test_modes_share_data_order(self):
        hashes = {}
        for mode, ratios in (('targeted', (0.5, 0.5)), ('random', (0.5, 0.5)), ('uniform', (0.0, 1.0))):
            self._trainer(mode=mode, ratios=ratios).run(self.dir / f'{mode}.csv')
            hashes[mode] = [r['order_hash'] for r in self._rows(self.dir / f'{mode}.csv')]
        self.assertEqual(hashes['targeted'], hashes['random'])
        self.assertEqual(hashes['targeted'], hashes['uniform'])

    def test_empty_training_split(self):
        with self.assertRaises(ValueError):
            Trainer(_train_config(), MODEL, AUX, [], self.val_set)
