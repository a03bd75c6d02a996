import io
import os
import tempfile
from contextlib import redirect_stdout
from pathlib import Path
from unittest import TestCase, skipUnless

import pandas as pd

from meshquant.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from meshquant.sweep import summarize

DATA = ['data.grid_size=8', 'data.stride=2', 'data.k=3', 'data.n_train=4', 'data.n_val=2', 'data.seed=3']
SMALL = ['model.hidden_dim=8', 'model.n_layers=1', 'aux.preset=tiny', 'aux.hidden_dim=8', 'aux.n_layers=1',
         'train.epochs=1', 'train.batch_size=2', 'train.warmup_epochs=0', 'train.calibration_steps=1',
         'train.lr_main=0.01', 'train.lr_aux=0.01']


def run(*args: str, overrides=()) -> tuple[int, str]:
    argv = ['--log-level', 'ERROR']
    for item in overrides:
        argv += ['--set', item]
    out = io.StringIO()
    with redirect_stdout(out):
        code = main(argv + list(args))
    return code, out.getvalue()


class TestCommandLine(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.dataset = self.dir / 'data.jsonl'

    def tearDown(self):
        self.tmp.cleanup()

    def _gen_data(self, path: Path) -> str:
        code, out = run('gen-data', '--output', str(path), overrides=DATA)
        self.assertEqual(code, EXIT_OK)
        self.assertIn(f"6 samples written to {path}", out)
        return out.strip().splitlines()[-1]

    def test_gen_data_is_deterministic(self):
        first = self._gen_data(self.dataset)
        second = self._gen_data(self.dir / 'again' / 'data.jsonl')
        self.assertTrue(first.startswith('sha256 '))
        self.assertEqual(first, second)

    def test_gen_data_unwritable(self):
        blocker = self.dir / 'file'
        blocker.write_text('not a directory')
        code, _ = run('gen-data', '--output', str(blocker / 'data.jsonl'), overrides=DATA)
        self.assertEqual(code, EXIT_RUNTIME)

    def test_invalid_config(self):
        self.assertEqual(run('train', overrides=['train.ratios=[0.3,0.3]'])[0], EXIT_CONFIG)
        self.assertEqual(run('sweep', overrides=['sweep.points=[]'])[0], EXIT_CONFIG)
        self.assertEqual(run('train', overrides=['nosuch.key=1'])[0], EXIT_CONFIG)
        self.assertEqual(run('train', '--config', str(self.dir / 'missing.yaml'))[0], EXIT_CONFIG)

    def test_missing_dataset(self):
        code, _ = run('train', overrides=[f'paths.dataset={self.dataset}', f'paths.output_dir={self.dir}'])
        self.assertEqual(code, EXIT_RUNTIME)

    def test_report_without_csv(self):
        self.assertEqual(run('report', str(self.dir / 'missing.csv'))[0], EXIT_RUNTIME)

    def test_train_is_reproducible(self):
        self._gen_data(self.dataset)
        outputs = []
        for name in ('a', 'b'):
            out_dir = self.dir / name
            code, out = run('train', overrides=DATA + SMALL + [f'paths.dataset={self.dataset}',
                                                               f'paths.output_dir={out_dir}'])
            self.assertEqual(code, EXIT_OK)
            self.assertIn('val_loss=', out)
            self.assertTrue((out_dir / 'config.yaml').exists())
            self.assertTrue((out_dir / 'checkpoint.mqck').exists())
            outputs.append((out_dir / 'metrics.csv').read_bytes())
        self.assertEqual(outputs[0], outputs[1])
        metrics = pd.read_csv(self.dir / 'a' / 'metrics.csv')
        self.assertEqual(metrics['step'].tolist(), [2])

    def test_train_resume_after_finish(self):
        self._gen_data(self.dataset)
        overrides = DATA + SMALL + [f'paths.dataset={self.dataset}', f'paths.output_dir={self.dir / "run"}']
        self.assertEqual(run('train', overrides=overrides)[0], EXIT_OK)
        before = (self.dir / 'run' / 'metrics.csv').read_bytes()
        self.assertEqual(run('train', '--resume', overrides=overrides)[0], EXIT_OK)
        self.assertEqual((self.dir / 'run' / 'metrics.csv').read_bytes(), before)


@skipUnless(os.environ.get('MESHQUANT_SLOW_TESTS') == '1', "set MESHQUANT_SLOW_TESTS=1 to run")
class TestSweepEndToEnd(TestCase):
    """The default grid on the default Darcy benchmark over three seeds."""

    def test_default_grid(self):
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            overrides = ['sweep.seeds=[0, 1, 2]', 'sweep.workers=3',
                         f'paths.dataset={tmp / "data.jsonl"}', f'paths.output_dir={tmp / "runs"}']
            self.assertEqual(run('gen-data', overrides=overrides)[0], EXIT_OK)
            self.assertEqual(run('sweep', overrides=overrides)[0], EXIT_OK)
            frame = pd.read_csv(tmp / 'runs' / 'sweep.csv')
            self.assertTrue((frame['status'] == 'done').all())
            self.assertEqual(len(frame), 18)

            summary = summarize(frame).set_index('point')
            loss = summary['val_loss']
            self.assertLess(loss['int8'], loss['targeted-50'])
            self.assertLess(loss['targeted-50'], loss['int4'])
            self.assertLess(loss['targeted-50'], 0.5 * (loss['int8'] + loss['int4']))
            self.assertLess(summary.loc['targeted-50', 'loss_increase_pct'], 50.0)
            macs = summary['macs_int8eq']
            self.assertLess(macs['int4'], macs['int8'])
            self.assertLess(macs['targeted-25'], macs['targeted-75'])

            per_seed = pd.read_csv(tmp / 'runs' / 'per_seed.csv', index_col='seed')
            self.assertEqual(list(per_seed.index), [0, 1, 2])
            self.assertTrue((per_seed['targeted-50'] < per_seed['random-50']).all())

            self.assertEqual(run('sweep', '--resume', overrides=overrides)[0], EXIT_OK)
            again = pd.read_csv(tmp / 'runs' / 'sweep.csv')
            pd.testing.assert_series_equal(frame['val_loss'], again['val_loss'])
