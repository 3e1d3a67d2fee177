import json
import logging
import math
import os
from typing import Any, Dict, List, Mapping, NamedTuple, Tuple, Union

import torch


LOGGER = logging.getLogger(__name__)

# Delay orders above this are rejected, n! is computed in floating point.
MAX_DELAY_ORDER = 20

# Tolerance on p1 + p2 = 1.
FRACTION_TOLERANCE = 1e-12

# Shipped benchmark configuration.
BENCH_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)),
                            'bench.json')

Scalar = Union[float, torch.Tensor]


class ModelError(ValueError):
    """Raised when a configuration violates one or more model invariants."""

    def __init__(self, violations: List[str]):
        super().__init__('; '.join(violations))
        self.violations = violations


class RateSpec(NamedTuple):
    """
    Logistic jump rate function

        f(x) = fmin + (fmax - fmin) / (1 + exp(-slope * (x - center))).

    Bounded, analytic, nondecreasing and strictly lower bounded by fmin.
    """
    fmin: float
    fmax: float
    slope: float
    center: float

    def _sigmoid(self, x: Scalar) -> Scalar:
        z = self.slope * (x - self.center)
        if isinstance(z, torch.Tensor):
            return torch.sigmoid(z)
        # tanh form does not overflow for large |z|.
        return 0.5 * (1.0 + math.tanh(0.5 * z))

    def value(self, x: Scalar) -> Scalar:
        return self.fmin + (self.fmax - self.fmin) * self._sigmoid(x)

    def derivative(self, x: Scalar) -> Scalar:
        s = self._sigmoid(x)
        return (self.fmax - self.fmin) * self.slope * s * (1 - s)

    def lipschitz(self) -> float:
        """Lipschitz constant, attained at the center."""
        return (self.fmax - self.fmin) * self.slope / 4


class KernelParams(NamedTuple):
    """Erlang memory kernel h(s) = c * exp(-nu * s) * s^n / n!."""
    c: int
    nu: float
    n: int


class Model(NamedTuple):
    """
    Static parameters of the two-population system.

    Coordinates are laid out as (X_{1,1}, ..., X_{1,n1+1}, X_{2,1}, ...,
    X_{2,n2+1}); zero-based, population 1 occupies [0, n1] and
    population 2 occupies [n1 + 1, n - 1].
    """
    k12: KernelParams
    k21: KernelParams
    f1: RateSpec
    f2: RateSpec
    p1: float
    p2: float

    @property
    def n1(self) -> int:
        return self.k12.n

    @property
    def n2(self) -> int:
        return self.k21.n

    @property
    def dim(self) -> int:
        return self.k12.n + self.k21.n + 2

    @property
    def noisy1(self) -> int:
        """Index of the last population-1 coordinate (driven by noise)."""
        return self.k12.n

    @property
    def head2(self) -> int:
        """Index of X_{2,1}, the input of f2."""
        return self.k12.n + 1

    @property
    def noisy2(self) -> int:
        """Index of the last population-2 coordinate (driven by noise)."""
        return self.dim - 1

    def block(self, population: int) -> slice:
        """Coordinates of the given population (1 or 2)."""
        if population == 1:
            return slice(0, self.n1 + 1)
        if population == 2:
            return slice(self.n1 + 1, self.dim)
        raise ValueError('Population must be 1 or 2. Got {}'.format(
            population))


# Flat configuration keys, see config_schema.json for units.
CONFIG_KEYS = [
    'n1', 'n2', 'nu1', 'nu2', 'c1', 'c2', 'p1', 'p2',
    'f1_fmin', 'f1_fmax', 'f1_slope', 'f1_center',
    'f2_fmin', 'f2_fmax', 'f2_slope', 'f2_center',
]


def _check_rate(name: str, spec: RateSpec) -> List[str]:
    violations = []
    if not spec.fmin > 0:
        violations.append(
            '{}: rate not strictly lower bounded (fmin = {})'.format(
                name, spec.fmin))
    if not spec.fmax > spec.fmin:
        violations.append('{}: fmax must exceed fmin'.format(name))
    if not spec.slope >= 0:
        violations.append('{}: slope must be nonnegative'.format(name))
    if not all(math.isfinite(v) for v in spec):
        violations.append('{}: parameters must be finite'.format(name))
    return violations


def _check_kernel(name: str, kernel: KernelParams) -> List[str]:
    violations = []
    if kernel.c not in (-1, 1):
        violations.append('{}: c must be -1 or +1 (got {})'.format(
            name, kernel.c))
    if not kernel.nu > 0:
        violations.append('{}: nonpositive nu ({})'.format(name, kernel.nu))
    if not float(kernel.n).is_integer():
        violations.append(
            '{}: delay order must be an integer (got {})'.format(
                name, kernel.n))
    elif not 0 <= kernel.n <= MAX_DELAY_ORDER:
        violations.append('{}: delay order must be in [0, {}] (got {})'.format(
            name, MAX_DELAY_ORDER, kernel.n))
    return violations


def make_model(config: Mapping[str, Any]) -> Model:
    """
    Build and validate a model from a flat key-value record.

    :param config: Mapping holding every key of CONFIG_KEYS. Extra keys
        are ignored so that a single file can also carry run options.
    :raises ModelError: With the list of all violated invariants.
    """
    missing = [key for key in CONFIG_KEYS if key not in config]
    if missing:
        raise ModelError(['missing field {}'.format(key) for key in missing])

    try:
        n1, n2 = float(config['n1']), float(config['n2'])
        c1, c2 = float(config['c1']), float(config['c2'])
        k12 = KernelParams(
            c=int(c1) if c1.is_integer() else c1,
            nu=float(config['nu1']),
            n=int(n1) if n1.is_integer() else n1)
        k21 = KernelParams(
            c=int(c2) if c2.is_integer() else c2,
            nu=float(config['nu2']),
            n=int(n2) if n2.is_integer() else n2)
        f1 = RateSpec(*[float(config['f1_' + k])
                        for k in ('fmin', 'fmax', 'slope', 'center')])
        f2 = RateSpec(*[float(config['f2_' + k])
                        for k in ('fmin', 'fmax', 'slope', 'center')])
        p1, p2 = float(config['p1']), float(config['p2'])
    except (TypeError, ValueError) as e:
        raise ModelError(['malformed value: {}'.format(e)])

    violations = (_check_kernel('h12', k12) + _check_kernel('h21', k21)
                  + _check_rate('f1', f1) + _check_rate('f2', f2))
    if not (0 < p1 < 1 and 0 < p2 < 1):
        violations.append('fractions must lie in (0, 1)')
    if abs(p1 + p2 - 1) > FRACTION_TOLERANCE:
        violations.append('fractions do not sum to 1 ({} + {})'.format(
            p1, p2))
    if violations:
        raise ModelError(violations)

    return Model(k12=k12, k21=k21, f1=f1, f2=f2, p1=p1, p2=p2)


def model_to_config(model: Model) -> Dict[str, Any]:
    """Inverse of make_model."""
    config = {
        'n1': model.k12.n, 'n2': model.k21.n,
        'nu1': model.k12.nu, 'nu2': model.k21.nu,
        'c1': model.k12.c, 'c2': model.k21.c,
        'p1': model.p1, 'p2': model.p2,
    }
    for name, spec in (('f1', model.f1), ('f2', model.f2)):
        for field, value in spec._asdict().items():
            config['{}_{}'.format(name, field)] = value
    return config


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str) -> Dict[str, Any]:
    """
    Read a configuration file.

    JSON objects are accepted, otherwise the file is read as flat
    `key = value` lines where `#` starts a comment.
    """
    with open(path) as f:
        text = f.read()

    if path.endswith('.json') or text.lstrip().startswith('{'):
        config = json.loads(text)
        if not isinstance(config, dict):
            raise ValueError('Expected a JSON object in {}'.format(path))
        return config

    config = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ValueError('{}:{}: expected `key = value`'.format(
                path, lineno))
        key, value = line.split('=', 1)
        config[key.strip()] = parse_value(value.strip())
    return config


def rate(spec: RateSpec, x: Scalar) -> Tuple[Scalar, Scalar]:
    """Return (f(x), f'(x)) with the closed-form sigmoid derivative."""
    return spec.value(x), spec.derivative(x)


def erlang_eval(kernel: KernelParams, s: Scalar) -> Scalar:
    """Evaluate h(s) = c * exp(-nu * s) * s^n / n! for s >= 0."""
    if isinstance(s, torch.Tensor):
        if bool((s < 0).any()):
            raise ValueError('Kernel evaluated at negative time')
        return (kernel.c * torch.exp(-kernel.nu * s) * s ** kernel.n
                / float(math.factorial(kernel.n)))

    if s < 0:
        raise ValueError('Kernel evaluated at negative time {}'.format(s))
    return (kernel.c * math.exp(-kernel.nu * s) * s ** kernel.n
            / float(math.factorial(kernel.n)))


def erlang_mode(kernel: KernelParams) -> float:
    """Time at which |h| is maximal."""
    return kernel.n / kernel.nu


def erlang_mean(kernel: KernelParams) -> float:
    """Mean delay of the kernel normalized to a probability density."""
    return (kernel.n + 1) / kernel.nu


def erlang_mass(kernel: KernelParams) -> float:
    """Integral of |h| over [0, infinity)."""
    return 1 / kernel.nu ** (kernel.n + 1)


def benchmark_model() -> Model:
    """The shipped benchmark: x* = (1.5, 1.5, -1.5, -1.5), rho = -16."""
    return make_model(load_config(BENCH_CONFIG))
