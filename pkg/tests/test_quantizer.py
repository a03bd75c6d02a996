from unittest import TestCase

import numpy as np

from meshquant.quantizer import (
    Quantizer, calibrate_maxabs, ema_update, quantize, dequantize, fake_quant, ste_mask, qmax,
)


def _stat_quantizer(bits: int, stat, decay: float = 0.99) -> Quantizer:
    return Quantizer(bits=bits, ema_stat=np.asarray(stat, dtype=np.float64), ema_decay=decay)


class TestCalibration(TestCase):
    def test_per_tensor_scale(self):
        q = calibrate_maxabs(np.array([-1.0, 0.5, 2.0]), bits=4)
        self.assertEqual(float(q.scale), 3.5)
        self.assertFalse(q.per_channel)

    def test_per_channel_scale(self):
        q = calibrate_maxabs(np.array([[1.0, 10.0], [2.0, 5.0]]), bits=8, per_channel=True)
        np.testing.assert_allclose(q.scale, [127 / 2, 127 / 10])

    def test_zero_statistic_annihilates(self):
        q = calibrate_maxabs(np.zeros(3), bits=8)
        self.assertTrue(np.all(q.scale > 0))
        np.testing.assert_array_equal(quantize(np.array([1.0, -3.0, 0.0]), q), [0, 0, 0])
        np.testing.assert_array_equal(dequantize(np.array([0, 0]), q), [0.0, 0.0])

    def test_dead_channel_only(self):
        q = calibrate_maxabs(np.array([[0.0, 1.0], [0.0, -2.0]]), bits=8, per_channel=True)
        qx = quantize(np.array([[5.0, 1.0]]), q)
        self.assertEqual(qx[0, 0], 0)
        self.assertEqual(qx[0, 1], 64)  # rint(63.5) rounds half to even

    def test_errors(self):
        with self.assertRaises(ValueError):
            calibrate_maxabs(np.array([]), bits=8)
        with self.assertRaises(FloatingPointError):
            calibrate_maxabs(np.array([1.0, np.nan]), bits=8)
        with self.assertRaises(ValueError):
            calibrate_maxabs(np.array([1.0]), bits=1)
        with self.assertRaises(ValueError):
            calibrate_maxabs(np.array([1.0]), bits=17)


class TestEMA(TestCase):
    def test_single_step(self):
        q = ema_update(_stat_quantizer(8, 0.0, decay=0.9), np.array([1.0, -0.5]))
        self.assertAlmostEqual(float(q.ema_stat), 0.1)
        self.assertAlmostEqual(float(q.scale), 127 / 0.1)

    def test_fixed_point(self):
        q = ema_update(_stat_quantizer(8, 2.0, decay=0.9), np.array([-2.0]))
        self.assertAlmostEqual(float(q.ema_stat), 2.0)

    def test_two_steps(self):
        q = _stat_quantizer(8, 0.0, decay=0.5)
        q = ema_update(q, np.array([1.0]))
        self.assertEqual(float(q.ema_stat), 0.5)
        q = ema_update(q, np.array([1.0]))
        self.assertEqual(float(q.ema_stat), 0.75)

    def test_frozen(self):
        q = calibrate_maxabs(np.array([1.0]), bits=8).freeze()
        with self.assertRaises(RuntimeError):
            ema_update(q, np.array([2.0]))
        self.assertEqual(float(q.scale), 127.0)

    def test_per_channel_update(self):
        q = calibrate_maxabs(np.array([[1.0, 2.0]]), bits=8, per_channel=True, ema_decay=0.5)
        q = ema_update(q, np.array([[3.0, 0.0]]))
        np.testing.assert_allclose(q.ema_stat, [2.0, 1.0])

    def test_state_round_trip(self):
        q = calibrate_maxabs(np.array([[1.0, 2.0]]), bits=4, per_channel=True).freeze()
        restored = Quantizer.from_dict(q.to_dict())
        np.testing.assert_array_equal(restored.scale, q.scale)
        self.assertTrue(restored.frozen)


class TestQuantize(TestCase):
    def setUp(self):
        self.q = calibrate_maxabs(np.array([-1.0, 0.5, 2.0]), bits=4)  # s = 3.5

    def test_quantize_example(self):
        np.testing.assert_array_equal(quantize(np.array([-1.0, 0.5, 2.0]), self.q), [-4, 2, 7])

    def test_zero_and_clamp(self):
        np.testing.assert_array_equal(quantize(np.array([0.0]), self.q), [0])
        np.testing.assert_array_equal(quantize(np.array([10.0, -10.0]), self.q), [7, -7])

    def test_non_finite(self):
        with self.assertRaises(FloatingPointError):
            quantize(np.array([np.inf]), self.q)

    def test_dequantize(self):
        np.testing.assert_allclose(dequantize(np.array([-4, 2, 7]), self.q), [-4 / 3.5, 2 / 3.5, 2.0])
        np.testing.assert_array_equal(dequantize(np.array([0]), self.q), [0.0])
        with self.assertRaises(ValueError):
            dequantize(np.array([8]), self.q)

    def test_fake_quant(self):
        self.assertAlmostEqual(float(fake_quant(np.array(0.5), self.q)), 2 / 3.5)
        lattice = np.arange(-7, 8) / 3.5
        np.testing.assert_array_equal(fake_quant(lattice, self.q), lattice)
        self.assertEqual(fake_quant(np.array([0.3], dtype=np.float32), self.q).dtype, np.float32)

    def test_clipped_ste(self):
        np.testing.assert_array_equal(ste_mask(np.array([0.5, 10.0, -10.0]), self.q), [True, False, False])

    def test_properties_on_random_scalars(self):
        """Bound, zero preservation, symmetry and monotonicity over 10^6 scalars."""
        rng = np.random.default_rng(0)
        for bits in (4, 8):
            stat = rng.uniform(0.5, 4.0)
            q = _stat_quantizer(bits, stat)
            s = float(q.scale)
            x = rng.uniform(-stat, stat, size=500_000)
            qx = quantize(x, q)
            err = np.abs(x - dequantize(qx, q))
            self.assertLessEqual(err.max(), 0.5 / s * (1 + 1e-12))
            self.assertTrue(np.all(np.abs(qx) <= qmax(bits)))
            np.testing.assert_array_equal(quantize(-x, q), -qx)
            order = np.argsort(x)
            self.assertTrue(np.all(np.diff(qx[order]) >= 0))
            self.assertEqual(int(quantize(np.array(0.0), q)), 0)
