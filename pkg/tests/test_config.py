import tempfile
from pathlib import Path
from unittest import TestCase

import yaml

from meshquant.config import (
    ConfigError, ExperimentConfig, SweepPointConfig, default_grid, dump_config, env_overrides, load_config,
)


class TestLoadConfig(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def _write(self, tree) -> Path:
        path = self.dir / 'experiment.yaml'
        path.write_text(yaml.safe_dump(tree))
        return path

    def test_defaults(self):
        config = load_config(environ={})
        config.validate(sweep=True)
        self.assertEqual(config.data.grid_size, 32)
        self.assertEqual([p.name for p in config.sweep.points], [p.name for p in default_grid()])

    def test_yaml_sections(self):
        path = self._write({'train': {'epochs': 3, 'ratios': [0.25, 0.75]}, 'aux': {'preset': 'small'}})
        config = load_config(path, environ={})
        self.assertEqual(config.train.epochs, 3)
        self.assertEqual(config.train.ratios, (0.25, 0.75))
        self.assertEqual(config.aux.bits, 4)

    def test_override_precedence(self):
        """File < environment < command line."""
        path = self._write({'train': {'lr_main': 0.1, 'epochs': 5}})
        environ = {'MESHQUANT__TRAIN__LR_MAIN': '0.01', 'MESHQUANT__TRAIN__EPOCHS': '7', 'OTHER': 'x'}
        config = load_config(path, ['train.lr_main=0.001'], environ=environ)
        self.assertEqual(config.train.lr_main, 0.001)
        self.assertEqual(config.train.epochs, 7)

    def test_env_override_parsing(self):
        self.assertEqual(env_overrides({'MESHQUANT__DATA__GRID_SIZE': '16'}), [('data.grid_size', '16')])

    def test_structured_override(self):
        config = load_config(overrides=['sweep.points=[]', 'sweep.seeds=[4]'], environ={})
        self.assertEqual(config.sweep.points, [])
        self.assertEqual(config.sweep.seeds, (4,))
        with self.assertRaises(ConfigError):
            config.validate(sweep=True)

    def test_errors(self):
        with self.assertRaises(ConfigError):
            load_config(self.dir / 'missing.yaml', environ={})
        with self.assertRaises(ConfigError):
            load_config(self._write({'training': {}}), environ={})
        with self.assertRaises(ConfigError):
            load_config(self._write({'train': {'learning_rate': 1}}), environ={})
        with self.assertRaises(ConfigError):
            load_config(overrides=['train.epochs'], environ={})
        with self.assertRaises(ConfigError):
            load_config(overrides=['nowhere.epochs=1'], environ={})
        with self.assertRaises(ConfigError):
            load_config(overrides=['aux.preset=huge'], environ={})
        (self.dir / 'broken.yaml').write_text('train: [unclosed')
        with self.assertRaises(ConfigError):
            load_config(self.dir / 'broken.yaml', environ={})

    def test_validation_errors(self):
        with self.assertRaises(ConfigError):
            load_config(overrides=['train.ratios=[0.3, 0.3]'], environ={}).validate()
        with self.assertRaises(ConfigError):
            load_config(overrides=['model.pos_dim=3'], environ={}).validate()
        with self.assertRaises(ConfigError):
            load_config(overrides=['train.levels=[4, 6]'], environ={}).validate()
        with self.assertRaises(ConfigError):
            load_config(overrides=['sweep.workers=0'], environ={}).validate(sweep=True)

    def test_dump_round_trip(self):
        config = load_config(overrides=['train.epochs=3', 'sweep.seeds=[5, 6]'], environ={})
        dump_config(config, self.dir / 'out.yaml')
        restored = load_config(self.dir / 'out.yaml', environ={})
        self.assertEqual(restored.to_dict(), config.to_dict())
        self.assertEqual(restored.config_hash(), config.config_hash())


class TestHashes(TestCase):
    def test_stable_and_sensitive(self):
        a, b = ExperimentConfig(), ExperimentConfig()
        self.assertEqual(a.config_hash(), b.config_hash())
        b.train.epochs += 1
        self.assertNotEqual(a.config_hash(), b.config_hash())

    def test_run_hash_ignores_output_dir_and_sweep(self):
        a = load_config(environ={})
        b = load_config(overrides=['paths.output_dir=/elsewhere', 'sweep.seeds=[9]'], environ={})
        self.assertEqual(a.run_hash(), b.run_hash())
        self.assertNotEqual(a.config_hash(), b.config_hash())

    def test_point_hash(self):
        config = ExperimentConfig()
        point = SweepPointConfig('int8', 'uniform', (4, 8), (0.0, 1.0))
        self.assertNotEqual(config.point_hash(point, 0), config.point_hash(point, 1))
        self.assertEqual(config.point_hash(point, 0), config.run_hash(config.point_train_config(point, 0)))
        self.assertEqual(config.point_train_config(point, 2).mode, 'uniform')
