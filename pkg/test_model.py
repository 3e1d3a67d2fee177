import math
import os
import tempfile
from unittest import TestCase

import mpmath
import torch

from model import KernelParams, ModelError, RateSpec, benchmark_model, \
    erlang_eval, erlang_mass, erlang_mean, erlang_mode, load_config, \
    make_model, model_to_config, rate


def bench_config(**overrides):
    config = model_to_config(benchmark_model())
    config.update(overrides)
    return config


class TestMakeModel(TestCase):
    def test_benchmark(self):
        model = make_model(bench_config())
        self.assertEqual(model.dim, 4)
        self.assertEqual((model.n1, model.n2), (1, 1))
        self.assertEqual((model.noisy1, model.head2, model.noisy2),
                         (1, 2, 3))
        self.assertEqual(model.block(1), slice(0, 2))
        self.assertEqual(model.block(2), slice(2, 4))

    def test_zero_fmin(self):
        with self.assertRaises(ModelError) as ctx:
            make_model(bench_config(f1_fmin=0.0))
        self.assertTrue(any('rate not strictly lower bounded' in v
                            for v in ctx.exception.violations))

    def test_fractions(self):
        with self.assertRaises(ModelError) as ctx:
            make_model(bench_config(p1=0.3, p2=0.6))
        self.assertIn('fractions do not sum to 1', str(ctx.exception))

    def test_all_violations_reported(self):
        with self.assertRaises(ModelError) as ctx:
            make_model(bench_config(c1=0, nu2=-1.0, f2_slope=-1.0))
        self.assertEqual(len(ctx.exception.violations), 3)

    def test_model_error_is_value_error(self):
        with self.assertRaises(ValueError):
            make_model({'n1': 1})

    def test_delay_order_bound(self):
        with self.assertRaises(ModelError):
            make_model(bench_config(n1=21))

    def test_fractional_delay_order(self):
        with self.assertRaises(ModelError) as ctx:
            make_model(bench_config(n1=1.7))
        self.assertEqual(ctx.exception.violations, [
            'h12: delay order must be an integer (got 1.7)'])
        self.assertEqual(make_model(bench_config(n1=2.0)).k12.n, 2)

    def test_config_round_trip(self):
        model = benchmark_model()
        self.assertEqual(make_model(model_to_config(model)), model)

    def test_load_key_value_config(self):
        lines = ['{} = {}  # value'.format(k, v)
                 for k, v in bench_config(n2=2).items()]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'model.cfg')
            with open(path, 'w') as f:
                f.write('# benchmark with a longer delay\n\n')
                f.write('\n'.join(lines))
            model = make_model(load_config(path))
        self.assertEqual(model.n2, 2)
        self.assertEqual(model.dim, 5)

    def test_malformed_key_value_config(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'model.cfg')
            with open(path, 'w') as f:
                f.write('n1 1\n')
            with self.assertRaises(ValueError):
                load_config(path)


class TestRate(TestCase):
    spec = RateSpec(fmin=1.0, fmax=3.0, slope=2.0, center=0.0)

    def test_midpoint(self):
        value, derivative = rate(self.spec, 0.0)
        self.assertAlmostEqual(value, 2.0, places=14)
        self.assertAlmostEqual(derivative, 1.0, places=14)
        self.assertAlmostEqual(self.spec.lipschitz(), 1.0, places=14)

    def test_high_precision_value(self):
        expected = 1 + 2 / (1 + mpmath.exp(-2))
        value, _ = rate(self.spec, 1.0)
        self.assertAlmostEqual(value, float(expected), places=14)
        self.assertAlmostEqual(value, 2.7616, places=4)

    def test_tensor_matches_float(self):
        x = torch.linspace(-3, 3, 13, dtype=torch.float64)
        values, derivatives = rate(self.spec, x)
        for xi, v, d in zip(x.tolist(), values.tolist(),
                            derivatives.tolist()):
            self.assertAlmostEqual(v, self.spec.value(xi), places=13)
            self.assertAlmostEqual(d, self.spec.derivative(xi), places=13)

    def test_saturation(self):
        value, derivative = rate(self.spec, 50.0)
        self.assertAlmostEqual(value, 3.0, places=12)
        self.assertAlmostEqual(derivative, 0.0, places=12)
        value, derivative = rate(self.spec, -1e6)
        self.assertEqual(value, 1.0)
        self.assertEqual(derivative, 0.0)

    def test_lipschitz_bounds_derivative(self):
        x = torch.linspace(-5, 5, 1001, dtype=torch.float64)
        self.assertLessEqual(self.spec.derivative(x).max().item(),
                             self.spec.lipschitz() + 1e-15)

    def test_monotone(self):
        g = torch.Generator().manual_seed(0)
        x = 20 * torch.rand(1000, dtype=torch.float64, generator=g) - 10
        y = x + 5 * torch.rand(1000, dtype=torch.float64, generator=g)
        self.assertTrue(bool((self.spec.value(x) <= self.spec.value(y)).all()))

    def test_derivative_matches_central_difference(self):
        g = torch.Generator().manual_seed(1)
        h = 1e-5
        for x in (8 * torch.rand(50, dtype=torch.float64,
                                 generator=g) - 4).tolist():
            _, derivative = rate(self.spec, x)
            estimate = (self.spec.value(x + h)
                        - self.spec.value(x - h)) / (2 * h)
            self.assertLess(abs(estimate - derivative),
                            1e-6 * abs(derivative))


class TestErlang(TestCase):
    def test_values(self):
        self.assertEqual(erlang_eval(KernelParams(c=1, nu=1.0, n=0), 0.0),
                         1.0)
        self.assertAlmostEqual(
            erlang_eval(KernelParams(c=1, nu=2.0, n=1), 1.0),
            math.exp(-2), places=15)
        self.assertAlmostEqual(
            erlang_eval(KernelParams(c=-1, nu=2.0, n=1), 1.0),
            -math.exp(-2), places=15)

    def test_negative_time(self):
        kernel = KernelParams(c=1, nu=1.0, n=2)
        with self.assertRaises(ValueError):
            erlang_eval(kernel, -0.1)
        with self.assertRaises(ValueError):
            erlang_eval(kernel, torch.tensor([0.0, -1.0]))

    def test_mode(self):
        for n, nu in ((1, 1.0), (3, 2.0), (5, 0.5)):
            kernel = KernelParams(c=-1, nu=nu, n=n)
            s = torch.linspace(0, 40, 400001, dtype=torch.float64)
            argmax = s[erlang_eval(kernel, s).abs().argmax()].item()
            self.assertAlmostEqual(argmax, erlang_mode(kernel), places=3)

    def test_mass_and_mean(self):
        kernel = KernelParams(c=1, nu=1.5, n=2)

        def h(s):
            return erlang_eval(kernel, float(s))

        mass = mpmath.quad(h, [0, mpmath.inf])
        mean = mpmath.quad(lambda s: s * h(s), [0, mpmath.inf]) / mass
        self.assertAlmostEqual(float(mass), erlang_mass(kernel), places=10)
        self.assertAlmostEqual(float(mean), erlang_mean(kernel), places=10)
