import math
import os
import tempfile
from unittest import TestCase

import numpy as np

from cli import EXIT_FAILED, EXIT_INVALID, EXIT_OK, MANIFEST, blob_hash, \
    file_sha256, run
from model import BENCH_CONFIG, load_config
from serialize import read_json, write_json


class CliTestCase(TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def out(self, name='run'):
        return os.path.join(self.tmp.name, name)


class TestManifest(CliTestCase):
    def test_blob_hash(self):
        # git hash-object of an empty file.
        self.assertEqual(blob_hash(b''),
                         'e69de29bb2d1d6434b8b29ae775ad8c2e48c5391')

    def test_reruns_hash_identically(self):
        argv = ['simulate-sde', '--N', '100', '--horizon', '1', '--dt',
                '0.01', '--seed', '3', '--out']
        self.assertEqual(run(argv + [self.out('a')]), EXIT_OK)
        self.assertEqual(run(argv + [self.out('b')]), EXIT_OK)
        a = read_json(os.path.join(self.out('a'), MANIFEST))
        b = read_json(os.path.join(self.out('b'), MANIFEST))
        self.assertEqual(a['outputs'], b['outputs'])
        self.assertEqual(
            a['outputs']['path.csv'],
            file_sha256(os.path.join(self.out('a'), 'path.csv')))
        self.assertEqual(a['subcommand'], 'simulate-sde')
        self.assertEqual(a['seed'], 3)
        self.assertEqual(a['config'], load_config(BENCH_CONFIG))
        self.assertEqual(list(a['inputs']), ['bench.json'])

    def test_overrides_reach_the_manifest(self):
        argv = ['simulate-sde', '--N', 'inf', '--horizon', '0.5', '--set',
                'n1=2', '--out', self.out()]
        self.assertEqual(run(argv), EXIT_OK)
        manifest = read_json(os.path.join(self.out(), MANIFEST))
        self.assertEqual(manifest['config']['n1'], 2)
        path = np.loadtxt(os.path.join(self.out(), 'path.csv'),
                          delimiter=',', skiprows=1)
        self.assertEqual(path.shape[1], 1 + 5)


class TestValidation(CliTestCase):
    def test_bad_flag(self):
        self.assertEqual(run(['simulate-sde', '--bogus', '--out',
                              self.out()]), EXIT_INVALID)

    def test_unknown_subcommand(self):
        self.assertEqual(run(['tune', '--out', self.out()]), EXIT_INVALID)

    def test_invalid_model(self):
        argv = ['simulate-sde', '--N', '10', '--set', 'p1=0.7', '--out',
                self.out()]
        self.assertEqual(run(argv), EXIT_INVALID)
        self.assertFalse(os.path.exists(self.out()))

    def test_unknown_override(self):
        argv = ['simulate-sde', '--N', '10', '--set', 'nu=5', '--out',
                self.out()]
        self.assertEqual(run(argv), EXIT_INVALID)
        self.assertFalse(os.path.exists(self.out()))

    def test_missing_config(self):
        argv = ['simulate-sde', '--N', '10', '--config',
                self.out('missing.json'), '--out', self.out()]
        self.assertEqual(run(argv), EXIT_INVALID)


class TestSubcommands(CliTestCase):
    def test_simulate_hawkes(self):
        argv = ['simulate-hawkes', '--N', '4', '--horizon', '2', '--out',
                self.out()]
        self.assertEqual(run(argv), EXIT_OK)
        summary = read_json(os.path.join(self.out(), 'summary.json'))
        self.assertEqual((summary['N1'], summary['N2']), (2, 2))
        events = np.loadtxt(os.path.join(self.out(), 'events.csv'),
                            delimiter=',', skiprows=1, ndmin=2)
        self.assertEqual(events.shape[0],
                         summary['events1'] + summary['events2'])
        self.assertTrue((np.diff(events[:, 1]) >= 0).all())

    def test_fw_weights(self):
        costs = self.out('costs.json')
        write_json(costs, {'entries': [[0.0, 3.0], [1.25, 0.0]]})
        self.assertEqual(run(['fw-weights', '--costs', costs, '--out',
                              self.out()]), EXIT_OK)
        weights = read_json(os.path.join(self.out(), 'weights.json'))
        self.assertEqual(weights, {'w': [1.25, 3.0], 'argmin_class': 0})
        manifest = read_json(os.path.join(self.out(), MANIFEST))
        self.assertIn('costs.json', manifest['inputs'])

    def test_fw_weights_infinite_entries(self):
        costs = self.out('costs.json')
        write_json(costs, [[0.0, math.inf], [1.0, 0.0]])
        self.assertEqual(run(['fw-weights', '--costs', costs, '--out',
                              self.out()]), EXIT_OK)
        weights = read_json(os.path.join(self.out(), 'weights.json'))
        self.assertEqual(weights['w'], [1.0, 'inf'])

    def test_fw_weights_negative_cost(self):
        costs = self.out('costs.json')
        write_json(costs, [[0.0, -1.0], [1.0, 0.0]])
        self.assertEqual(run(['fw-weights', '--costs', costs, '--out',
                              self.out()]), EXIT_INVALID)

    def test_steer(self):
        argv = ['steer', '--x', '1,0,0,0', '--y', '1.5,1.5,-1.5,-1.5',
                '--T', '1', '--dt', '0.01', '--out', self.out()]
        self.assertEqual(run(argv), EXIT_OK)
        report = read_json(os.path.join(self.out(), 'steer.json'))
        self.assertLess(report['residual'], 1e-4)
        control = np.loadtxt(os.path.join(self.out(), 'control.csv'),
                             delimiter=',', skiprows=1)
        self.assertEqual(control.shape[1], 3)

    def test_limit_analysis(self):
        argv = ['limit-analysis', '--trials', '4', '--out', self.out()]
        self.assertEqual(run(argv), EXIT_OK)
        summary = read_json(os.path.join(self.out(), 'limit.json'))
        self.assertEqual(sorted(summary), [
            'assumption4', 'equilibrium', 'orbits', 'rho', 'roots',
            'unstable_count'])
        self.assertAlmostEqual(summary['rho'], -16.0, places=10)
        self.assertTrue(any(o['stable'] for o in summary['orbits']))

    def test_study_failures_exit_code(self):
        argv = ['weak-error', '--N', '2,4,8', '--t', '0.2', '--dt', '0.01',
                '--statistic', 'constant', '--replicas', '4', '--block', '2',
                '--jobs', '1', '--out', self.out()]
        self.assertEqual(run(argv), EXIT_FAILED)
        study = read_json(os.path.join(self.out(), 'study.json'))
        self.assertEqual(study['failures'],
                         ['zero error estimate; fit skipped'])
        self.assertTrue(os.path.exists(os.path.join(self.out(),
                                                    'study.csv')))
