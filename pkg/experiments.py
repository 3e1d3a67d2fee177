"""
Monte Carlo studies: exit times from the tube around the limit set,
occupation of regions by the diffusion and the weak error between the
Hawkes system and its diffusion approximation.

Replicas are simulated in fixed-size blocks. Block b of cell c reads the
random stream (seed, study, c, b), so results do not depend on how many
worker processes run the blocks. Statistical shortcomings never raise:
they are listed in StudyResult.failures.
"""
import logging
import math
from functools import partial
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, \
    Union

import torch

from action import QuasipotentialOptions, Weights, w_of_x
from harness import Fit, Moments, generator, linear_fit, merge_all, \
    parallel_map
from hawkes import simulate_hawkes_terminal
from limit import LimitSet, Orbit, distance_to_limit_set
from model import Model, model_to_config
from sde import DEFAULT_DT, DTYPE, State, as_state, drift, em_step, \
    noise_scale


LOGGER = logging.getLogger(__name__)

# Default tube radii (epsilon, epsilon bar).
DEFAULT_TUBE = (0.02, 0.1)

# Fraction of capped replicas above which an exit-time cell is flagged.
CAP_FRACTION = 0.5

# Tolerated factor between the fitted occupation decay rate and inf W.
LDP_FACTOR = 2.0

# Record label prefix of the slope comparison.
RATIO_LABEL = '-slope/W '

# Euler-Maruyama step of the weak-error study.
WEAK_DT = 1e-4


class StudyOptions(NamedTuple):
    dt: float = DEFAULT_DT
    block: int = 100
    jobs: int = 1
    # Rerun every cell at dt / 2.
    companion: bool = True

    def refined(self) -> 'StudyOptions':
        return self._replace(dt=self.dt / 2)


class Record(NamedTuple):
    """One cell of a study."""
    label: str
    parameter: float
    estimate: float
    stderr: float
    replicas: int
    dt: float


class StudyResult(NamedTuple):
    inputs: Dict[str, Any]
    records: List[Record]
    fit: Dict[str, Fit]
    seeds: Dict[str, Any]
    failures: List[str]


class Region(NamedTuple):
    """A ball (center, radius) or, with kind 'tube', B_radius(K)."""
    center: Optional[State]
    radius: float
    kind: str = 'ball'

    @property
    def label(self) -> str:
        if self.kind == 'tube':
            return 'tube({:g})'.format(self.radius)
        return 'ball({}, {:g})'.format(
            ','.join('{:g}'.format(v) for v in self.center.tolist()),
            self.radius)

    def contains(self, limitset: LimitSet, x: State) -> torch.Tensor:
        if self.kind == 'tube':
            return distance_to_limit_set(limitset, x) < self.radius
        return torch.linalg.norm(x - self.center, dim=-1) < self.radius


def _blocks(replicas: int, size: int) -> List[int]:
    sizes = [size] * (replicas // size)
    if replicas % size:
        sizes.append(replicas % size)
    return sizes


def _seeds(seed: int, study: str) -> Dict[str, Any]:
    return {'seed': seed, 'streams': '(seed, {}, cell, block)'.format(study)}


def stable_orbit(limitset: LimitSet) -> Orbit:
    """
    :raises ValueError: If the limit set has no stable orbit.
    """
    for orbit in limitset.orbits:
        if orbit.stable:
            return orbit
    raise ValueError('The limit set has no stable orbit')


def tube_start(model: Model, limitset: LimitSet, epsilon: float) -> State:
    """
    Point at distance about epsilon from the stable orbit's anchor, moved
    away from x* across the orbit.
    """
    orbit = stable_orbit(limitset)
    anchor = orbit.anchor
    tangent = drift(model, anchor)
    tangent = tangent / torch.linalg.norm(tangent)
    outward = anchor - limitset.equilibrium.point
    outward = outward - torch.dot(outward, tangent) * tangent
    return anchor + epsilon * outward / torch.linalg.norm(outward)


def _exit_block(
        job: Tuple[int, float, int, int],
        model: Model,
        limitset: LimitSet,
        start: State,
        epsilon_bar: float,
        cap: float,
        seed: int) -> Tuple[Moments, int]:
    N, dt, block, size = job
    g = generator(seed, 'exit-times', 'N={}/dt={:g}'.format(N, dt), block)
    scale = noise_scale(N)
    y = start.expand(size, model.dim).clone()
    alive = torch.ones(size, dtype=torch.bool)
    times = torch.full((size,), cap, dtype=DTYPE)
    for step in range(int(math.ceil(cap / dt))):
        moved = em_step(model, y, dt, scale, g)
        y = torch.where(alive.unsqueeze(-1), moved, y)
        left = alive & (distance_to_limit_set(limitset, y) > epsilon_bar)
        times[left] = (step + 1) * dt
        alive &= ~left
        if not bool(alive.any()):
            break
    return Moments.of(times), int(alive.sum())


def exit_time_study(
        model: Model,
        limitset: LimitSet,
        Ns: Sequence[int],
        tube: Tuple[float, float] = DEFAULT_TUBE,
        cap: float = 100.0,
        replicas: int = 200,
        seed: int = 0,
        opts: StudyOptions = StudyOptions()) -> StudyResult:
    """
    Mean exit time from the tube of radius epsilon bar around the limit
    set, started at distance epsilon from the stable orbit, for each N;
    log E sigma is fitted against N. Times are censored at `cap`.

    :raises ValueError: Unless 3 epsilon < epsilon bar, the Ns increase and
        there are at least 3 of them.
    """
    epsilon, epsilon_bar = tube
    if not 3 * epsilon < epsilon_bar:
        raise ValueError('Tube radii need 3 eps < eps bar. Got {}'.format(
            tube))
    if len(Ns) < 3 or any(a >= b for a, b in zip(Ns, Ns[1:])):
        raise ValueError('Need at least 3 increasing Ns. Got {}'.format(Ns))

    start = tube_start(model, limitset, epsilon)
    dts = [opts.dt, opts.dt / 2] if opts.companion else [opts.dt]
    cells = [(N, dt) for dt in dts for N in Ns]
    jobs = [(N, dt, b, size)
            for N, dt in cells
            for b, size in enumerate(_blocks(replicas, opts.block))]
    LOGGER.info('Exit-time study: %d cells, %d blocks', len(cells), len(jobs))
    outputs = parallel_map(
        partial(_exit_block, model=model, limitset=limitset, start=start,
                epsilon_bar=epsilon_bar, cap=cap, seed=seed),
        jobs, opts.jobs)

    records, failures = [], []
    for N, dt in cells:
        parts = [out for job, out in zip(jobs, outputs)
                 if job[:2] == (N, dt)]
        moments = merge_all(m for m, _ in parts)
        capped = sum(c for _, c in parts)
        records.append(Record('N', N, moments.mean, moments.stderr,
                              moments.count, dt))
        if capped > CAP_FRACTION * replicas:
            failures.append(
                'cap {} hit by {} of {} replicas at N = {} (dt = {:g}); '
                'shrink the tube or the N range'.format(
                    cap, capped, replicas, N, dt))
        elif capped:
            LOGGER.warning('%d replicas capped at N = %d', capped, N)

    main = [r for r in records if r.dt == opts.dt]
    fit = linear_fit([r.parameter for r in main],
                     [math.log(r.estimate) for r in main])
    return StudyResult(
        inputs={'model': model_to_config(model), 'Ns': list(Ns),
                'tube': list(tube), 'cap': cap, 'replicas': replicas,
                'start': start, 'options': opts},
        records=records,
        fit={'log_mean_exit_time': fit},
        seeds=_seeds(seed, 'exit-times'),
        failures=failures,
    )


def _occupation_block(
        job: Tuple[int, float, int, int],
        model: Model,
        limitset: LimitSet,
        regions: Sequence[Region],
        start: State,
        horizon: float,
        burn_in: float,
        seed: int) -> List[Moments]:
    N, dt, block, size = job
    g = generator(seed, 'occupation', 'N={}/dt={:g}'.format(N, dt), block)
    scale = noise_scale(N)
    y = start.expand(size, model.dim).clone()
    for _ in range(int(round(burn_in / dt))):
        y = em_step(model, y, dt, scale, g)
    steps = max(1, int(round(horizon / dt)))
    visits = torch.zeros(len(regions), size, dtype=DTYPE)
    for _ in range(steps):
        y = em_step(model, y, dt, scale, g)
        for k, region in enumerate(regions):
            visits[k] += region.contains(limitset, y).to(DTYPE)
    return [Moments.of(v / steps) for v in visits]


def occupation_study(
        model: Model,
        limitset: LimitSet,
        Ns: Union[int, Sequence[int]],
        sets: Sequence[Region],
        horizon: float,
        burn_in: Optional[float] = None,
        seed: int = 0,
        replicas: int = 20,
        opts: StudyOptions = StudyOptions(),
        w_infima: Optional[Sequence[float]] = None) -> StudyResult:
    """
    Long-run occupation fractions of the regions as estimates of the
    invariant measure, after burn-in (default 20 periods of the stable
    orbit). With 3 or more Ns, log mu(D) is fitted against N for each
    region; given `w_infima` (inf_D W per region), each ball region
    also gets a record of -slope / inf_D W, flagged in the failures when
    it is off by more than LDP_FACTOR.

    :raises ValueError: If a ball region touches the limit set, or the
        w_infima do not match the regions.
    """
    Ns = [Ns] if isinstance(Ns, int) else list(Ns)
    if w_infima is not None and len(w_infima) != len(sets):
        raise ValueError('Need one W infimum per region. Got {} for {}'.format(
            len(w_infima), len(sets)))
    orbit = stable_orbit(limitset)
    if burn_in is None:
        burn_in = 20 * orbit.period
    for region in sets:
        if region.kind == 'tube':
            continue
        gap = (distance_to_limit_set(limitset, region.center).item()
               - region.radius)
        if not gap > 0:
            raise ValueError('Region {} meets the limit set'.format(
                region.label))

    dts = [opts.dt, opts.dt / 2] if opts.companion else [opts.dt]
    cells = [(N, dt) for dt in dts for N in Ns]
    jobs = [(N, dt, b, size)
            for N, dt in cells
            for b, size in enumerate(_blocks(replicas, opts.block))]
    outputs = parallel_map(
        partial(_occupation_block, model=model, limitset=limitset,
                regions=list(sets), start=orbit.anchor, horizon=horizon,
                burn_in=burn_in, seed=seed),
        jobs, opts.jobs)

    records, failures = [], []
    for N, dt in cells:
        steps = max(1, int(round(horizon / dt)))
        parts = [out for job, out in zip(jobs, outputs)
                 if job[:2] == (N, dt)]
        for k, region in enumerate(sets):
            moments = merge_all(p[k] for p in parts)
            estimate = moments.mean
            if estimate == 0:
                # Report the resolution of the estimator instead.
                estimate = 1 / (steps * moments.count)
                failures.append(
                    'no visits to {} at N = {} (dt = {:g}); occupation '
                    'below {:.3g}'.format(region.label, N, dt, estimate))
            records.append(Record(region.label, N, estimate, moments.stderr,
                                  moments.count, dt))

    fits = {}
    if len(Ns) >= 3:
        for region in sets:
            main = [r for r in records
                    if r.label == region.label and r.dt == opts.dt]
            fits[region.label] = linear_fit(
                [r.parameter for r in main],
                [math.log(r.estimate) for r in main])
    if w_infima is not None:
        for region, w in zip(sets, w_infima):
            if region.kind != 'ball' or region.label not in fits:
                continue
            if not (w > 0 and math.isfinite(w)):
                failures.append(
                    'inf W over {} is {:g}; slope comparison skipped'.format(
                        region.label, w))
                continue
            fit = fits[region.label]
            ratio = slope_ratio(fit, w)
            records.append(Record(RATIO_LABEL + region.label, w, ratio,
                                  fit.slope_stderr / w, replicas, opts.dt))
            if not 1 / LDP_FACTOR <= ratio <= LDP_FACTOR:
                failures.append(
                    'fitted slope {:.3g} for {} is not within a factor {:g} '
                    'of -inf W = {:.3g}'.format(fit.slope, region.label,
                                                LDP_FACTOR, -w))
    return StudyResult(
        inputs={'model': model_to_config(model), 'Ns': Ns,
                'regions': [r.label for r in sets], 'horizon': horizon,
                'burn_in': burn_in, 'replicas': replicas, 'options': opts,
                'w_infima': None if w_infima is None else list(w_infima)},
        records=records,
        fit=fits,
        seeds=_seeds(seed, 'occupation'),
        failures=failures,
    )


def slope_ratio(fit: Fit, w_infimum: float) -> float:
    """-slope / inf_D W, which is 1 when log mu(D) decays like -N inf_D W."""
    return -fit.slope / w_infimum


def region_w_infimum(
        model: Model,
        limitset: LimitSet,
        weights: Weights,
        region: Region,
        count: int = 8,
        opts: QuasipotentialOptions = QuasipotentialOptions(),
        seed: int = 0) -> float:
    """
    Upper estimate of inf_{x in D} W(x) over the center and `count`
    points on the sphere of the ball.
    """
    if region.kind != 'ball':
        raise ValueError('W infimum needs a ball region')
    g = generator(seed, 'region-w')
    directions = torch.randn(count, model.dim, dtype=DTYPE, generator=g)
    directions /= torch.linalg.norm(directions, dim=-1, keepdim=True)
    points = torch.cat([region.center.unsqueeze(0),
                        region.center + region.radius * directions])
    return min(w_of_x(model, limitset, weights, None, p, opts, seed)
               for p in points)


STATISTICS = {
    'smooth-first': lambda x: torch.tanh(x[..., 0]),
    'constant': lambda x: torch.ones_like(x[..., 0]),
}


def _weak_block(
        job: Tuple[int, int, int],
        model: Model,
        x0: State,
        t: float,
        statistic: str,
        dts: Sequence[float],
        seed: int) -> Tuple[Moments, List[Moments]]:
    N, block, size = job
    phi = STATISTICS[statistic]
    cell = 'N={}/t={:g}'.format(N, t)
    N1 = max(1, int(round(model.p1 * N)))
    N2 = max(1, N - N1)
    jumps = simulate_hawkes_terminal(
        model, N1, N2, t, size,
        generator(seed, 'weak-error', cell, 'hawkes', block), start=x0)

    scale = noise_scale(N)
    diffusions = []
    for dt in dts:
        g = generator(seed, 'weak-error', cell, 'sde/dt={:g}'.format(dt),
                      block)
        y = x0.expand(size, model.dim).clone()
        steps = max(1, int(round(t / dt)))
        for _ in range(steps):
            y = em_step(model, y, t / steps, scale, g)
        diffusions.append(Moments.of(phi(y)))
    return Moments.of(phi(jumps.states)), diffusions


def weak_error_study(
        model: Model,
        Ns: Sequence[int],
        x0: State,
        t: float,
        test_statistic: str = 'smooth-first',
        replicas: int = 10000,
        seed: int = 0,
        dt: float = WEAK_DT,
        opts: StudyOptions = StudyOptions()) -> StudyResult:
    """
    |E phi(X^N_t) - E phi(Y^N_t)| for each N, both processes started at x0
    (the Hawkes system with N1 = round(p1 N) units and the cascade state
    x0 as history), with a log-log fit against N when every estimate is
    positive.

    The diffusion runs with step `dt` rather than opts.dt, and again at
    dt / 2 against the same Hawkes samples when opts.companion is set.

    :raises ValueError: For an unknown statistic or fewer than 3 Ns.
    """
    if test_statistic not in STATISTICS:
        raise ValueError('Unknown statistic {}. Choose from {}'.format(
            test_statistic, sorted(STATISTICS)))
    if len(Ns) < 3:
        raise ValueError('Need at least 3 Ns. Got {}'.format(Ns))
    x0 = as_state(model, x0)
    dts = [dt, dt / 2] if opts.companion else [dt]
    jobs = [(N, b, size) for N in Ns
            for b, size in enumerate(_blocks(replicas, opts.block))]
    outputs = parallel_map(
        partial(_weak_block, model=model, x0=x0, t=t,
                statistic=test_statistic, dts=dts, seed=seed),
        jobs, opts.jobs)

    records, failures = [], []
    for k, step in enumerate(dts):
        for N in Ns:
            parts = [out for job, out in zip(jobs, outputs) if job[0] == N]
            jump = merge_all(p[0] for p in parts)
            diffusion = merge_all(p[1][k] for p in parts)
            error = abs(jump.mean - diffusion.mean)
            stderr = math.sqrt(
                (jump.stderr ** 2 if jump.m2 > 0 else 0.0)
                + (diffusion.stderr ** 2 if diffusion.m2 > 0 else 0.0))
            records.append(Record('N', N, error, stderr, jump.count, step))
            if error <= 3 * stderr and stderr > 0:
                needed = int(math.ceil(
                    replicas * (3 * stderr / max(error, 1e-300)) ** 2))
                failures.append(
                    'Monte Carlo error {:.3g} exceeds the signal {:.3g} at '
                    'N = {} (dt = {:g}); about {} replicas needed'.format(
                        stderr, error, N, step, needed))

    main = [r for r in records if r.dt == dt]
    fits = {}
    if all(r.estimate > 0 for r in main):
        fits['log_error'] = linear_fit(
            [math.log(r.parameter) for r in main],
            [math.log(r.estimate) for r in main])
    else:
        failures.append('zero error estimate; fit skipped')
    return StudyResult(
        inputs={'model': model_to_config(model), 'Ns': list(Ns), 'x0': x0,
                't': t, 'statistic': test_statistic, 'replicas': replicas,
                'dt': dt, 'options': opts},
        records=records,
        fit=fits,
        seeds=_seeds(seed, 'weak-error'),
        failures=failures,
    )


def records_table(result: StudyResult) -> Tuple[List[str], List[List[Any]]]:
    """Tidy rows (one per cell) for CSV export; labels become indices."""
    labels = sorted(set(r.label for r in result.records))
    header = ['label', 'parameter', 'estimate', 'stderr', 'replicas', 'dt']
    rows = [[labels.index(r.label), r.parameter, r.estimate, r.stderr,
             r.replicas, r.dt] for r in result.records]
    return header, rows
