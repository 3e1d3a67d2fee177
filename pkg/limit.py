"""
The deterministic limit system dx/dt = b(x): a monotone cyclic feedback
system with a unique equilibrium when c1 * c2 < 0, which oscillates when
its linearization has at least two unstable characteristic roots.
"""
import logging
import math
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial as P
from scipy import optimize
import torch

from model import Model
from sde import DTYPE, Path, State, as_state, drift, jacobian, uniform_grid


LOGGER = logging.getLogger(__name__)

# Accepted residual of the equilibrium, ||b(x*)||.
EQUILIBRIUM_TOLERANCE = 1e-10

# Accepted residual of a characteristic root, relative to the largest
# polynomial coefficient (at least 1).
ROOT_TOLERANCE = 1e-8

# Newton polishing iterations for characteristic roots.
ROOT_POLISH_ITERATIONS = 50

# Default RK4 step of the limit flow.
DEFAULT_DT = 1e-2

# Distance from 1 within which exactly one Floquet multiplier must lie.
TRIVIAL_MULTIPLIER_TOLERANCE = 1e-3


class ConvergenceError(RuntimeError):
    """A numerical solve of the limit system failed."""


class Equilibrium(NamedTuple):
    point: State
    rho: float
    roots: torch.Tensor
    unstable_count: int
    # rho < 0 with at least two unstable roots.
    assumption4: bool


class Orbit(NamedTuple):
    """
    A periodic orbit: anchor lies on the Poincare section, samples are
    `len(samples)` states equispaced in time over one period starting
    at the anchor.
    """
    anchor: State
    period: float
    samples: torch.Tensor
    floquet: torch.Tensor
    stable: bool


class LimitSet(NamedTuple):
    """The equilibrium followed by the periodic orbits."""
    classes: Tuple

    @property
    def equilibrium(self) -> Equilibrium:
        return self.classes[0]

    @property
    def orbits(self) -> List[Orbit]:
        return list(self.classes[1:])

    @property
    def L(self) -> int:
        return len(self.classes)


class LimitCycleOptions(NamedTuple):
    dt: float = DEFAULT_DT
    # Transient length in multiples of the linearized period.
    transient_periods: float = 50.0
    # Search window for section crossings after the transient.
    search_periods: float = 4.0
    samples: int = 1024
    dedup_tolerance: float = 1e-3
    newton_tolerance: float = 1e-10
    newton_iterations: int = 30
    # Offset from x* along the leading eigenvector defining the section.
    section_offset: float = 1e-2

    def refined(self) -> 'LimitCycleOptions':
        return self._replace(dt=self.dt / 2, samples=self.samples * 2)


class Section(NamedTuple):
    point: State
    normal: State

    def height(self, x: State) -> torch.Tensor:
        return ((x - self.point) * self.normal).sum(-1)


VectorField = Callable[[float, torch.Tensor], torch.Tensor]


def rk4(
        fn: VectorField,
        y0: torch.Tensor,
        t0: float,
        step: float,
        steps: int,
        record: bool = True) -> torch.Tensor:
    """
    Classical fourth order Runge-Kutta for dy/dt = fn(t, y).

    :returns: Stacked states of shape (steps + 1,) + y0.size() when
        record is set, otherwise the final state.
    """
    y = y0
    states = [y]
    for i in range(steps):
        t = t0 + i * step
        k1 = fn(t, y)
        k2 = fn(t + step / 2, y + step / 2 * k1)
        k3 = fn(t + step / 2, y + step / 2 * k2)
        k4 = fn(t + step, y + step * k3)
        y = y + step / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if record:
            states.append(y)
    return torch.stack(states) if record else y


def integrate_limit(
        model: Model,
        x0: State,
        horizon: float,
        dt: float = DEFAULT_DT) -> Path:
    """
    RK4 path of dx/dt = b(x) on [0, horizon]. The step is the closest to
    `dt` that divides the horizon. Batched initial states are allowed.
    """
    x0 = as_state(model, x0)
    grid, step = uniform_grid(horizon, dt)
    states = rk4(lambda t, x: drift(model, x), x0, 0.0, step,
                 grid.size()[0] - 1)
    return Path(grid=grid, states=states)


def flow(model: Model, x0: State, horizon: float,
         dt: float = DEFAULT_DT) -> State:
    """Endpoint of integrate_limit without keeping the path."""
    x0 = as_state(model, x0)
    grid, step = uniform_grid(horizon, dt)
    return rk4(lambda t, x: drift(model, x), x0, 0.0, step,
               grid.size()[0] - 1, record=False)


def monodromy(
        model: Model,
        x0: State,
        horizon: float,
        dt: float = DEFAULT_DT,
        steps: Optional[int] = None) -> Tuple[State, torch.Tensor]:
    """
    Integrate the state together with the variational equation
    dPhi/dt = Db(x(t)) Phi, Phi(0) = I, in `steps` equal RK4 steps
    (by default the count implied by dt).

    :returns: (x(horizon), Phi(horizon)).
    """
    x0 = as_state(model, x0)
    n = model.dim
    if steps is None:
        steps = uniform_grid(horizon, dt)[0].size()[0] - 1
    step = horizon / steps if steps > 0 else 0.0

    def field(t, y):
        x, phi = y[:n], y[n:].reshape(n, n)
        return torch.cat(
            [drift(model, x), (jacobian(model, x) @ phi).flatten()])

    y0 = torch.cat([x0, torch.eye(n, dtype=DTYPE).flatten()])
    y = rk4(field, y0, 0.0, step, steps, record=False)
    return y[:n], y[n:].reshape(n, n)


def _scalar_map(model: Model) -> Callable[[float], float]:
    gain1 = model.k12.c / model.k12.nu ** (model.n1 + 1)
    gain2 = model.k21.c / model.k21.nu ** (model.n2 + 1)
    return lambda x1: x1 - gain1 * model.f2.value(gain2 * model.f1.value(x1))


def _backfill(model: Model, x1: float) -> State:
    """Rebuild every coordinate from the head of population 1."""
    k12, k21 = model.k12, model.k21
    x21 = k21.c * model.f1.value(x1) / k21.nu ** (k21.n + 1)
    feed1 = k12.c * model.f2.value(x21)
    feed2 = k21.c * model.f1.value(x1)
    # 1-based coordinate l of population k is feed_k / nu_k^(n_k + 2 - l).
    pop1 = [feed1 / k12.nu ** (k12.n + 1 - l) for l in range(k12.n + 1)]
    pop2 = [feed2 / k21.nu ** (k21.n + 1 - l) for l in range(k21.n + 1)]
    return torch.tensor(pop1 + pop2, dtype=DTYPE)


def find_equilibrium(model: Model) -> Equilibrium:
    """
    Solve b(x) = 0 through the scalar fixed point equation of the head
    coordinate x1 = (c1 / nu1^(n1+1)) f2((c2 / nu2^(n2+1)) f1(x1)).

    :raises ConvergenceError: If the bracketed solve fails or the
        back-filled point does not annihilate the drift.
    """
    if model.k12.c * model.k21.c > 0:
        LOGGER.warning('c1 * c2 > 0: the equilibrium need not be unique')

    g = _scalar_map(model)
    scale = model.k12.nu ** (model.n1 + 1)
    low, high = sorted((model.k12.c * model.f2.fmin / scale,
                        model.k12.c * model.f2.fmax / scale))
    margin = 1e-9 * (1 + high - low)
    low, high = low - margin, high + margin
    try:
        x1 = optimize.brentq(g, low, high, xtol=1e-15, rtol=1e-15,
                             maxiter=500)
    except (ValueError, RuntimeError) as e:
        raise ConvergenceError(
            'Equilibrium solve failed on bracket [{}, {}] with g = ({}, {}): '
            '{}'.format(low, high, g(low), g(high), e))

    point = _backfill(model, x1)
    residual = torch.linalg.norm(drift(model, point)).item()
    if residual > EQUILIBRIUM_TOLERANCE:
        raise ConvergenceError(
            'Equilibrium residual {} above {} (x1 = {})'.format(
                residual, EQUILIBRIUM_TOLERANCE, x1))
    LOGGER.debug('Equilibrium %s, residual %g', point.tolist(), residual)
    return characteristic_roots(model, point)


def characteristic_polynomial(model: Model, rho: float) -> np.ndarray:
    """
    Coefficients, lowest degree first, of
    (nu1 + z)^(n1+1) (nu2 + z)^(n2+1) - rho.
    """
    coefficients = P.polymul(
        P.polypow([model.k12.nu, 1.0], model.n1 + 1),
        P.polypow([model.k21.nu, 1.0], model.n2 + 1))
    coefficients[0] -= rho
    return coefficients


def _polish(coefficients: np.ndarray, root: complex) -> complex:
    derivative = P.polyder(coefficients)
    residual = abs(P.polyval(root, coefficients))
    for _ in range(ROOT_POLISH_ITERATIONS):
        slope = P.polyval(root, derivative)
        if slope == 0:
            break
        candidate = root - P.polyval(root, coefficients) / slope
        candidate_residual = abs(P.polyval(candidate, coefficients))
        if not candidate_residual < residual:
            break
        root, residual = candidate, candidate_residual
    return root


def characteristic_roots(model: Model, eq: State) -> Equilibrium:
    """
    All roots of (nu1 + z)^(n1+1) (nu2 + z)^(n2+1) = rho with
    rho = c1 c2 f1'(x*_1) f2'(x*_{n1+2}), sorted by decreasing real part.

    :raises ConvergenceError: If a root residual stays above tolerance.
    """
    eq = as_state(model, eq)
    rho = (model.k12.c * model.k21.c
           * model.f1.derivative(eq[0].item())
           * model.f2.derivative(eq[model.head2].item()))
    coefficients = characteristic_polynomial(model, rho)
    tolerance = ROOT_TOLERANCE * max(1.0, np.abs(coefficients).max())

    roots = [_polish(coefficients, complex(z))
             for z in P.polyroots(coefficients)]
    worst = max(abs(P.polyval(z, coefficients)) for z in roots)
    if worst > tolerance:
        raise ConvergenceError(
            'Characteristic root residual {} above {}'.format(
                worst, tolerance))

    roots.sort(key=lambda z: (-z.real, -z.imag))
    unstable = sum(1 for z in roots if z.real > 0)
    return Equilibrium(
        point=eq,
        rho=rho,
        roots=torch.tensor(roots, dtype=torch.complex128),
        unstable_count=unstable,
        assumption4=bool(rho < 0 and unstable >= 2),
    )


def linear_period(eq: Equilibrium) -> float:
    """2 pi / Im(lambda) for the leading oscillatory root."""
    oscillatory = [z for z in eq.roots.tolist() if z.imag > 0]
    if not oscillatory:
        raise ValueError('Linearization has no oscillatory root')
    leading = max(oscillatory, key=lambda z: z.real)
    return 2 * math.pi / leading.imag


def poincare_section(
        model: Model,
        eq: Equilibrium,
        offset: float) -> Section:
    """
    Hyperplane through x* normal to b(x* + offset * v), v the real part of
    the leading unstable eigenvector of Db(x*).
    """
    values, vectors = torch.linalg.eig(jacobian(model, eq.point))
    # Among the complex pair pick the member with positive imaginary part.
    score = values.real + 1e-9 * torch.sign(values.imag)
    direction = vectors[:, torch.argmax(score)].real
    direction = direction / torch.linalg.norm(direction)
    normal = drift(model, eq.point + offset * direction)
    return Section(point=eq.point, normal=normal / torch.linalg.norm(normal))


def _crossings(
        section: Section,
        grid: torch.Tensor,
        states: torch.Tensor) -> List[Tuple[float, State]]:
    """Linearly interpolated upward crossings of the section."""
    heights = section.height(states)
    upward = torch.nonzero((heights[:-1] < 0) & (heights[1:] >= 0)).flatten()
    crossings = []
    for k in upward.tolist():
        w = (heights[k] / (heights[k] - heights[k + 1])).item()
        time = grid[k].item() + w * (grid[k + 1] - grid[k]).item()
        crossings.append((time, states[k] + w * (states[k + 1] - states[k])))
    return crossings


def shoot(
        model: Model,
        section: Section,
        x: State,
        period: float,
        opts: LimitCycleOptions) -> Tuple[State, float, torch.Tensor]:
    """
    Newton iteration on (x, T) for phi_T(x) = x with the phase condition
    x on the section.

    :returns: (anchor, period, monodromy matrix).
    :raises ConvergenceError: If Newton does not reach the tolerance.
    """
    n = model.dim
    # The step count stays fixed so the return map is smooth in the period.
    steps = max(1, int(round(period / opts.dt)))
    for iteration in range(opts.newton_iterations):
        final, M = monodromy(model, x, period, steps=steps)
        residual = torch.cat([final - x, section.height(x).unsqueeze(0)])
        size = torch.linalg.norm(residual).item()
        LOGGER.debug('Shooting iteration %d: residual %g, period %g',
                     iteration, size, period)
        if size < opts.newton_tolerance:
            return x, period, M

        system = torch.zeros(n + 1, n + 1, dtype=DTYPE)
        system[:n, :n] = M - torch.eye(n, dtype=DTYPE)
        system[:n, n] = drift(model, final)
        system[n, :n] = section.normal
        correction = torch.linalg.solve(system, -residual)
        x = x + correction[:n]
        period = period + correction[n].item()
        if not period > 0 or not bool(torch.isfinite(x).all()):
            break
    raise ConvergenceError('Shooting did not converge (period {})'.format(
        period))


def classify(M: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    """
    Floquet multipliers sorted by distance to 1; stable when every
    multiplier but the trivial one lies inside the unit circle.

    :raises ConvergenceError: Unless exactly one multiplier lies within
        TRIVIAL_MULTIPLIER_TOLERANCE of 1.
    """
    multipliers = torch.linalg.eigvals(M)
    gaps = torch.abs(multipliers - 1)
    order = torch.argsort(gaps)
    multipliers = multipliers[order]
    near = int((gaps < TRIVIAL_MULTIPLIER_TOLERANCE).sum())
    if near != 1:
        raise ConvergenceError(
            '{} Floquet multipliers within {:g} of 1, expected one'.format(
                near, TRIVIAL_MULTIPLIER_TOLERANCE))
    stable = bool((torch.abs(multipliers[1:]) < 1).all())
    return multipliers, stable


def orbit_samples(
        model: Model,
        anchor: State,
        period: float,
        count: int) -> torch.Tensor:
    """`count` states equispaced in time over one period from the anchor."""
    states = rk4(lambda t, x: drift(model, x), anchor, 0.0, period / count,
                 count)
    return states[:-1]


def _orbit_from(
        model: Model,
        section: Section,
        grid: torch.Tensor,
        states: torch.Tensor,
        opts: LimitCycleOptions) -> Optional[Orbit]:
    crossings = _crossings(section, grid, states)
    if len(crossings) < 2:
        return None
    (t0, x0), (t1, _) = crossings[-2], crossings[-1]
    try:
        anchor, period, M = shoot(model, section, x0, t1 - t0, opts)
        floquet, stable = classify(M)
    except RuntimeError as e:
        LOGGER.warning('Discarding candidate orbit: %s', e)
        return None
    return Orbit(
        anchor=anchor,
        period=period,
        samples=orbit_samples(model, anchor, period, opts.samples),
        floquet=floquet,
        stable=stable,
    )


def hausdorff(a: torch.Tensor, b: torch.Tensor) -> float:
    distances = torch.cdist(a, b)
    return max(distances.min(1).values.max().item(),
               distances.min(0).values.max().item())


def find_limit_cycles(
        model: Model,
        trial_points: Sequence[State],
        opts: LimitCycleOptions = LimitCycleOptions()) -> LimitSet:
    """
    Locate periodic orbits attracting (or passing near) the trial points.

    All trial points are integrated together through the transient, each
    trajectory is then cut by the Poincare section, and the last crossing
    pair seeds Newton shooting. Orbits closer than the dedup tolerance in
    Hausdorff distance are merged; the result is sorted by anchor.
    """
    eq = find_equilibrium(model)
    if not eq.assumption4:
        LOGGER.warning('No oscillatory instability (rho = %g, %d unstable '
                       'roots): returning the equilibrium only',
                       eq.rho, eq.unstable_count)
        return LimitSet(classes=(eq,))

    guess = linear_period(eq)
    section = poincare_section(model, eq, opts.section_offset)
    points = as_state(model, torch.stack(
        [as_state(model, x) for x in trial_points]))
    LOGGER.info('Searching %d trial points, linearized period %g',
                points.size()[0], guess)

    settled = flow(model, points, opts.transient_periods * guess, opts.dt)
    path = integrate_limit(model, settled, opts.search_periods * guess,
                           opts.dt)

    orbits = []
    for i in range(points.size()[0]):
        orbit = _orbit_from(model, section, path.grid, path.states[:, i],
                            opts)
        if orbit is None:
            LOGGER.debug('Trial point %d produced no cycle', i)
            continue
        if any(hausdorff(orbit.samples, o.samples) < opts.dedup_tolerance
               for o in orbits):
            continue
        orbits.append(orbit)

    if not orbits:
        LOGGER.warning('No periodic orbit found from %d trial points',
                       points.size()[0])
    orbits.sort(key=lambda o: tuple(o.anchor.tolist()))
    return LimitSet(classes=(eq,) + tuple(orbits))


def distance_to_orbit(orbit: Orbit, x: State) -> torch.Tensor:
    """
    Distance from x (possibly batched) to the closed polygon through the
    orbit samples.
    """
    a = orbit.samples
    d = torch.roll(a, -1, 0) - a
    w = x.unsqueeze(-2) - a
    s = ((w * d).sum(-1) / (d * d).sum(-1).clamp(min=1e-300)).clamp(0, 1)
    gaps = torch.linalg.norm(w - s.unsqueeze(-1) * d, dim=-1)
    return gaps.min(-1).values


def distance_to_class(k, x: State) -> torch.Tensor:
    if isinstance(k, Equilibrium):
        return torch.linalg.norm(x - k.point, dim=-1)
    return distance_to_orbit(k, x)


def distance_to_limit_set(limitset: LimitSet, x: State) -> torch.Tensor:
    return torch.stack(
        [distance_to_class(k, x) for k in limitset.classes]).min(0).values


def phase_points(orbit: Orbit, count: int) -> Tuple[torch.Tensor, List[float]]:
    """`count` samples equispaced in time and their times since the anchor."""
    stride = max(1, orbit.samples.size()[0] // count)
    indices = list(range(0, orbit.samples.size()[0], stride))[:count]
    dt = orbit.period / orbit.samples.size()[0]
    return orbit.samples[indices], [i * dt for i in indices]


def class_points(k, count: int) -> Tuple[torch.Tensor, List[float]]:
    """Representative points of a class with their phase times."""
    if isinstance(k, Equilibrium):
        return k.point.unsqueeze(0), [0.0]
    return phase_points(k, count)


def benchmark_trial_points(
        model: Model,
        eq: Equilibrium,
        count: int,
        g: torch.Generator,
        spread: float = 1.0) -> torch.Tensor:
    """Gaussian trial points around the equilibrium."""
    noise = torch.randn(count, model.dim, dtype=DTYPE, generator=g)
    return eq.point + spread * noise
