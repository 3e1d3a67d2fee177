import math
from unittest import TestCase

import numpy as np
from numpy.polynomial import polynomial as P
import sympy
import torch

from harness import generator
from hawkes import cascade_flow
from limit import ConvergenceError, LimitCycleOptions, \
    benchmark_trial_points, characteristic_polynomial, characteristic_roots, \
    classify, distance_to_limit_set, distance_to_orbit, find_equilibrium, \
    find_limit_cycles, flow, integrate_limit, linear_period, monodromy, \
    phase_points
from model import benchmark_model, make_model, model_to_config
from sde import drift


STAR = torch.tensor([1.5, 1.5, -1.5, -1.5], dtype=torch.float64)


def config(**overrides):
    config = model_to_config(benchmark_model())
    config.update(overrides)
    return config


def scalar_model():
    # n1 = n2 = 0 with f1'(x*) = f2'(x*) = 1, so rho = -1.
    return make_model(config(n1=0, n2=0, f1_slope=2.0, f2_slope=2.0))


class TestEquilibrium(TestCase):
    def test_benchmark(self):
        model = benchmark_model()
        eq = find_equilibrium(model)
        self.assertTrue(torch.allclose(eq.point, STAR, rtol=0, atol=1e-10))
        self.assertLess(torch.linalg.norm(drift(model, eq.point)).item(),
                        1e-10)
        self.assertAlmostEqual(eq.rho, -16.0, places=10)

    def test_constant_rates(self):
        model = make_model(config(n1=0, f2_fmin=0.5, f2_fmax=1.5,
                                  f2_slope=0.0))
        eq = find_equilibrium(model)
        self.assertAlmostEqual(eq.point[0].item(), 1.0, places=14)
        self.assertEqual(eq.rho, 0.0)

    def test_longer_delays(self):
        model = make_model(config(n1=3, n2=2, nu1=0.8, nu2=1.7))
        eq = find_equilibrium(model)
        self.assertLess(torch.linalg.norm(drift(model, eq.point)).item(),
                        1e-10)
        self.assertEqual(eq.roots.numel(), 7)

    def test_stays_put(self):
        model = benchmark_model()
        path = integrate_limit(model, find_equilibrium(model).point, 100.0)
        self.assertLess((path.states - STAR).abs().max().item(), 1e-9)

    def test_unique_for_random_models(self):
        g = generator(0, 'random-models')

        def uniform(low, high):
            return low + (high - low) * torch.rand(
                (), dtype=torch.float64, generator=g).item()

        for case in range(20):
            c1 = 1 if case % 2 else -1
            overrides = {'n1': case % 4, 'n2': (case // 4) % 3,
                         'nu1': uniform(0.5, 2.0), 'nu2': uniform(0.5, 2.0),
                         'c1': c1, 'c2': -c1}
            for name in ('f1', 'f2'):
                fmin = uniform(0.1, 1.0)
                overrides.update({
                    name + '_fmin': fmin,
                    name + '_fmax': fmin + uniform(0.5, 3.0),
                    name + '_slope': uniform(0.0, 4.0),
                    name + '_center': uniform(-1.0, 1.0)})
            model = make_model(config(**overrides))
            eq = find_equilibrium(model)
            self.assertLess(
                torch.linalg.norm(drift(model, eq.point)).item(), 1e-10)
            # Equilibria are the zeros of this increasing scalar map.
            gain1 = model.k12.nu ** (model.n1 + 1)
            gain2 = model.k21.nu ** (model.n2 + 1)
            bound = 2 * max(model.f2.fmax / gain1, 1.0)
            u = torch.linspace(-bound, bound, 10001, dtype=torch.float64)
            h = u - model.k12.c * model.f2.value(
                model.k21.c * model.f1.value(u) / gain2) / gain1
            crossings = (torch.sign(h[1:]) != torch.sign(h[:-1])).sum()
            self.assertEqual(int(crossings), 1)
            self.assertGreaterEqual(eq.point[0].item(), -bound)
            self.assertLessEqual(eq.point[0].item(), bound)


class TestIntegrateLimit(TestCase):
    def test_fourth_order(self):
        model = benchmark_model()
        x0 = [0.5, 0.0, 0.0, 0.0]
        reference = flow(model, x0, 2.0, 0.0025)
        errors = [torch.linalg.norm(flow(model, x0, 2.0, dt)
                                    - reference).item()
                  for dt in (0.02, 0.01)]
        ratio = errors[0] / errors[1]
        self.assertGreater(ratio, 12.0)
        self.assertLess(ratio, 20.0)

    def test_linear_block_with_constant_feedback(self):
        # With f2 constant, population 1 is a cascade forced at its last
        # coordinate, relaxing to rest[i] = c1 f2 / nu1^(n1 + 1 - i).
        model = make_model(config(n1=2, nu1=0.8, f2_slope=0.0))
        m = model.n1 + 1
        forcing = model.k12.c * model.f2.value(0.0)
        rest = torch.tensor([forcing / 0.8 ** (m - i) for i in range(m)],
                            dtype=torch.float64)
        shift = torch.cat([rest, torch.zeros(model.dim - m,
                                             dtype=torch.float64)])
        x0 = torch.tensor([0.3, -0.7, 1.1, 0.2, -0.4], dtype=torch.float64)
        path = integrate_limit(model, x0, 3.0, 1e-3)
        expected = cascade_flow(
            model, (x0 - shift).expand(path.grid.numel(), model.dim),
            path.grid)[:, :m] + rest
        self.assertLess((path.states[:, :m] - expected).abs().max().item(),
                        1e-8)


class TestCharacteristicRoots(TestCase):
    def test_fourth_roots(self):
        eq = find_equilibrium(benchmark_model())
        self.assertEqual(eq.unstable_count, 2)
        self.assertTrue(eq.assumption4)
        expected = sorted(
            (-1 + 2 * np.exp(1j * math.pi * (2 * k + 1) / 4)
             for k in range(4)), key=lambda z: (-z.real, -z.imag))
        for z, w in zip(eq.roots.tolist(), expected):
            self.assertAlmostEqual(z.real, w.real, places=10)
            self.assertAlmostEqual(z.imag, w.imag, places=10)
        self.assertAlmostEqual(eq.roots[0].real.item(), -1 + math.sqrt(2),
                               places=10)
        self.assertAlmostEqual(eq.roots[-1].real.item(), -1 - math.sqrt(2),
                               places=10)

    def test_residuals(self):
        model = make_model(config(n1=4, n2=3, nu1=0.5, nu2=2.0))
        eq = find_equilibrium(model)
        coefficients = characteristic_polynomial(model, eq.rho)
        for z in eq.roots.tolist():
            self.assertLess(abs(P.polyval(z, coefficients)), 1e-8)

    def test_polynomial(self):
        model = make_model(config(n1=2, nu1=0.5))
        z = sympy.Symbol('z')
        expected = sympy.Poly(
            (sympy.Rational(1, 2) + z) ** 3 * (1 + z) ** 2 + 3, z)
        coefficients = characteristic_polynomial(model, -3.0)
        self.assertEqual(coefficients.tolist(),
                         [float(c) for c in reversed(expected.all_coeffs())])

    def test_scalar_case(self):
        eq = characteristic_roots(scalar_model(), [1.5, -1.5])
        self.assertAlmostEqual(eq.rho, -1.0, places=14)
        roots = eq.roots.tolist()
        self.assertAlmostEqual(roots[0], complex(-1, 1), places=12)
        self.assertAlmostEqual(roots[1], complex(-1, -1), places=12)
        self.assertEqual(eq.unstable_count, 0)
        self.assertFalse(eq.assumption4)

    def test_linear_period(self):
        eq = find_equilibrium(benchmark_model())
        self.assertAlmostEqual(linear_period(eq), 2 * math.pi / math.sqrt(2),
                               places=10)


class TestMonodromy(TestCase):
    def test_matches_finite_differences(self):
        model = benchmark_model()
        x0 = torch.tensor([1.0, 0.5, -1.0, -2.0], dtype=torch.float64)
        final, M = monodromy(model, x0, 2.0, 1e-2)
        self.assertTrue(torch.allclose(final, flow(model, x0, 2.0, 1e-2),
                                       rtol=0, atol=1e-13))
        h = 1e-6
        for j in range(4):
            e = torch.zeros(4, dtype=torch.float64)
            e[j] = h
            column = (flow(model, x0 + e, 2.0, 1e-2)
                      - flow(model, x0 - e, 2.0, 1e-2)) / (2 * h)
            self.assertTrue(torch.allclose(M[:, j], column, rtol=0,
                                           atol=1e-6))

    def test_classify(self):
        multipliers, stable = classify(torch.diag(torch.tensor(
            [0.2, 1.0, 0.5], dtype=torch.float64)))
        self.assertAlmostEqual(multipliers[0].real.item(), 1.0, places=14)
        self.assertTrue(stable)
        _, stable = classify(torch.diag(torch.tensor(
            [1.0, 1.5], dtype=torch.float64)))
        self.assertFalse(stable)

    def test_classify_needs_one_trivial_multiplier(self):
        for diagonal in ([0.5, 0.2], [1.0, 1.0005, 0.3]):
            with self.assertRaises(ConvergenceError):
                classify(torch.diag(torch.tensor(diagonal,
                                                 dtype=torch.float64)))


class TestLimitCycles(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.model = benchmark_model()
        cls.eq = find_equilibrium(cls.model)
        trials = benchmark_trial_points(cls.model, cls.eq, 6,
                                        generator(0, 'trial-points'))
        cls.limitset = find_limit_cycles(cls.model, trials)

    def test_found_stable_orbit(self):
        orbits = self.limitset.orbits
        self.assertGreaterEqual(len(orbits), 1)
        self.assertTrue(any(o.stable for o in orbits))
        self.assertEqual(self.limitset.L, len(orbits) + 1)

    def test_periodicity(self):
        for orbit in self.limitset.orbits:
            closed = flow(self.model, orbit.anchor, orbit.period,
                          LimitCycleOptions().dt)
            self.assertLess(torch.linalg.norm(closed - orbit.anchor).item(),
                            1e-6)
            self.assertLess(abs(orbit.floquet[0].item() - 1), 1e-3)
            self.assertEqual(orbit.samples.size()[0],
                             LimitCycleOptions().samples)

    def test_attraction(self):
        orbit = next(o for o in self.limitset.orbits if o.stable)
        starts = benchmark_trial_points(self.model, self.eq, 10,
                                        generator(1, 'attraction'))
        settled = flow(self.model, starts, 100 * orbit.period)
        distances = distance_to_orbit(orbit, settled)
        self.assertLess(distances.max().item(), 1e-3)

    def test_distances(self):
        orbit = self.limitset.orbits[0]
        points, times = phase_points(orbit, 8)
        self.assertEqual(len(times), 8)
        self.assertLess(distance_to_orbit(orbit, points).max().item(),
                        1e-12)
        self.assertEqual(
            distance_to_limit_set(self.limitset, self.eq.point).item(), 0.0)
        self.assertGreater(distance_to_orbit(orbit, self.eq.point).item(),
                           0.1)

    def test_no_oscillation(self):
        model = scalar_model()
        with self.assertLogs('limit', 'WARNING'):
            limitset = find_limit_cycles(model, [[0.0, 0.0]])
        self.assertEqual(limitset.L, 1)
        self.assertEqual(limitset.orbits, [])
