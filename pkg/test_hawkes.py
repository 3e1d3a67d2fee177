import math
from unittest import TestCase

from scipy import stats
import torch

from harness import generator
from hawkes import EventRecord, cascade_exponential, cascade_flow, \
    cascade_from_events, simulate_hawkes, simulate_hawkes_terminal
from model import benchmark_model, make_model, model_to_config


def constant_rate_model(**overrides):
    config = model_to_config(benchmark_model())
    config.update(f1_slope=0.0, f2_slope=0.0)
    config.update(overrides)
    return make_model(config)


class TestCascade(TestCase):
    def test_exponential_matches_matrix_exp(self):
        nu, m = 1.3, 4
        A = -nu * torch.eye(m, dtype=torch.float64) + torch.diag(
            torch.ones(m - 1, dtype=torch.float64), 1)
        for t in (0.0, 0.1, 2.5):
            self.assertTrue(torch.allclose(
                cascade_exponential(nu, m, t), torch.linalg.matrix_exp(t * A),
                rtol=1e-12, atol=1e-14))

    def test_batched_times(self):
        t = torch.tensor([0.5, 1.0, 3.0], dtype=torch.float64)
        batched = cascade_exponential(2.0, 3, t)
        self.assertEqual(tuple(batched.size()), (3, 3, 3))
        for i, ti in enumerate(t.tolist()):
            self.assertTrue(torch.allclose(
                batched[i], cascade_exponential(2.0, 3, ti)))

    def test_flow_is_semigroup(self):
        model = benchmark_model()
        x = torch.tensor([0.3, -1.0, 2.0, 0.5], dtype=torch.float64)
        once = cascade_flow(model, x, 1.5)
        twice = cascade_flow(model, cascade_flow(model, x, 0.7), 0.8)
        self.assertTrue(torch.allclose(once, twice, rtol=1e-13, atol=1e-14))


class TestSimulateHawkes(TestCase):
    def test_zero_horizon(self):
        events, path = simulate_hawkes(benchmark_model(), 1, 1, 0.0, 0)
        self.assertEqual(events.times1.numel(), 0)
        self.assertEqual(events.times2.numel(), 0)
        self.assertEqual(tuple(path.states.size()), (1, 4))
        self.assertTrue(torch.equal(path.states[0],
                                    torch.zeros(4, dtype=torch.float64)))

    def test_deterministic(self):
        model = benchmark_model()
        a, path_a = simulate_hawkes(model, 5, 5, 5.0, 42)
        b, path_b = simulate_hawkes(model, 5, 5, 5.0, 42)
        self.assertTrue(torch.equal(a.times1, b.times1))
        self.assertTrue(torch.equal(a.times2, b.times2))
        self.assertTrue(torch.equal(path_a.states, path_b.states))
        c, _ = simulate_hawkes(model, 5, 5, 5.0, 43)
        self.assertFalse(torch.equal(a.times1, c.times1)
                         and torch.equal(a.times2, c.times2))

    def test_invalid_sizes(self):
        model = benchmark_model()
        with self.assertRaises(ValueError):
            simulate_hawkes(model, 0, 1, 1.0, 0)
        with self.assertRaises(ValueError):
            simulate_hawkes(model, 1, 1, -1.0, 0)

    def test_path_records_events_and_horizon(self):
        events, path = simulate_hawkes(benchmark_model(), 3, 4, 4.0, 5)
        self.assertEqual(path.grid.numel(),
                         events.times1.numel() + events.times2.numel() + 2)
        self.assertEqual(path.grid[0].item(), 0.0)
        self.assertEqual(path.grid[-1].item(), 4.0)
        self.assertTrue(bool((path.grid[1:] >= path.grid[:-1]).all()))
        self.assertEqual(events.unit_counts, (3, 4))

    def test_matches_convolution(self):
        model = benchmark_model()
        worst = 0.0
        for seed in range(50):
            events, path = simulate_hawkes(model, 5, 5, 10.0, seed)
            for t, state in list(zip(path.grid.tolist(), path.states))[::7]:
                direct = cascade_from_events(model, events, t)
                worst = max(worst, (direct - state).abs().max().item())
            direct = cascade_from_events(model, events, 10.0)
            worst = max(worst, (direct - path.states[-1]).abs().max().item())
        self.assertLess(worst, 1e-8)

    def test_start_state(self):
        model = benchmark_model()
        start = torch.tensor([1.5, 1.5, -1.5, -1.5], dtype=torch.float64)
        events, path = simulate_hawkes(model, 4, 4, 6.0, 3, start=start)
        self.assertTrue(torch.equal(path.states[0], start))
        self.assertTrue(torch.allclose(
            cascade_from_events(model, events, 6.0), path.states[-1],
            rtol=0, atol=1e-10))

    def test_constant_rates_give_poisson_arrivals(self):
        model = constant_rate_model()
        f1 = model.f1.value(0.0)
        # About 10800 arrivals at rate 4 f1 = 6.
        events, _ = simulate_hawkes(model, 4, 4, 1800.0, 11)
        waits = torch.diff(events.times1,
                           prepend=torch.zeros(1, dtype=torch.float64))
        self.assertGreaterEqual(waits.numel(), 10000)
        result = stats.kstest(waits[:10000].numpy(), 'expon',
                              args=(0, 1 / (4 * f1)))
        self.assertGreater(result.pvalue, 0.01)


class TestCascadeFromEvents(TestCase):
    def test_no_events(self):
        model = benchmark_model()
        empty = torch.zeros(0, dtype=torch.float64)
        events = EventRecord(empty, empty, (2, 2), 5.0)
        self.assertTrue(torch.equal(cascade_from_events(model, events, 3.0),
                                    torch.zeros(4, dtype=torch.float64)))

    def test_single_jump(self):
        model = constant_rate_model(n1=0, nu1=0.7)
        s, t, N2 = 1.0, 2.5, 4
        events = EventRecord(torch.zeros(0, dtype=torch.float64),
                             torch.tensor([s], dtype=torch.float64), (3, N2),
                             5.0)
        x = cascade_from_events(model, events, t)
        expected = model.k12.c / N2 * math.exp(-0.7 * (t - s))
        self.assertAlmostEqual(x[0].item(), expected, places=14)
        self.assertTrue(torch.equal(x[1:],
                                    torch.zeros(2, dtype=torch.float64)))

    def test_outside_horizon(self):
        model = benchmark_model()
        events, _ = simulate_hawkes(model, 2, 2, 1.0, 0)
        with self.assertRaises(ValueError):
            cascade_from_events(model, events, 1.5)
        with self.assertRaises(ValueError):
            cascade_from_events(model, events, -0.1)


class TestTerminal(TestCase):
    def test_zero_horizon_keeps_start(self):
        model = benchmark_model()
        start = torch.tensor([0.1, 0.2, 0.3, 0.4], dtype=torch.float64)
        terminal = simulate_hawkes_terminal(model, 2, 2, 0.0, 5,
                                            generator(0, 't'), start=start)
        self.assertTrue(torch.equal(terminal.states, start.expand(5, 4)))
        self.assertEqual(terminal.counts1.sum().item(), 0)

    def test_constant_rate_counts(self):
        model = constant_rate_model()
        f1, f2 = model.f1.value(0.0), model.f2.value(0.0)
        horizon, replicas = 2.0, 4000
        terminal = simulate_hawkes_terminal(model, 3, 5, horizon, replicas,
                                            generator(1, 'counts'))
        for counts, expected in ((terminal.counts1, 3 * f1 * horizon),
                                 (terminal.counts2, 5 * f2 * horizon)):
            mean = counts.double().mean().item()
            stderr = math.sqrt(expected / replicas)
            self.assertLess(abs(mean - expected), 5 * stderr)

    def test_matches_single_path_law(self):
        model = benchmark_model()
        horizon, replicas = 3.0, 2000
        terminal = simulate_hawkes_terminal(model, 5, 5, horizon, replicas,
                                            generator(2, 'law'))
        singles = torch.stack([
            simulate_hawkes(model, 5, 5, horizon, seed)[1].states[-1]
            for seed in range(400)])
        for i in range(model.dim):
            a, b = terminal.states[:, i], singles[:, i]
            stderr = math.sqrt(a.var().item() / a.numel()
                               + b.var().item() / b.numel())
            self.assertLess(abs(a.mean().item() - b.mean().item()),
                            5 * stderr + 1e-12)
