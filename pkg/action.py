"""
Freidlin-Wentzell action and numerical quasipotentials.

The rate function is not explicit because sigma is degenerate, so every
cost reported here is the action of a feasible piecewise-constant control
(an upper bound on the true infimum). Controls are optimized by direct
transcription: a quadratic endpoint penalty with increasing weight,
L-BFGS on a batch of starts, and a final Gauss-Newton restoration that
moves each candidate onto the endpoint constraint by a minimum-norm
correction. The steering construction is always among the candidates,
so a feasible control exists for every pair of points.
"""
import itertools
import logging
import math
from functools import partial
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import torch

from control import Control, integrate_controlled, steering_profile
from harness import generator, parallel_map
from limit import Equilibrium, LimitSet, Orbit, class_points, \
    distance_to_class
from model import Model
from sde import DTYPE, State, as_state


LOGGER = logging.getLogger(__name__)

# Largest class count solved by exhaustive {i}-graph enumeration.
MAX_ENUMERATION = 12

# Class count up to which method='both' cross-checks the enumeration.
CROSS_CHECK = 6

# Relative agreement required between the two {i}-graph methods.
GRAPH_TOLERANCE = 1e-9

# Costs at or below this end the search over horizons.
ZERO_COST = 1e-12


class InfeasibleError(RuntimeError):
    """No candidate control reached the target."""


class QuasipotentialOptions(NamedTuple):
    intervals: int = 64
    # RK4 substeps per control interval; raised so that steps stay below
    # max_step.
    substeps: int = 2
    max_step: float = 0.1
    restarts: int = 8
    perturbation: float = 0.5
    stages: int = 5
    penalty: float = 1e2
    penalty_growth: float = 10.0
    lbfgs_iterations: int = 20
    restoration_iterations: int = 20
    tol: float = 1e-4
    t_min: float = 0.25
    t_max: float = 64.0
    time_count: int = 12
    phases: int = 16
    tube_radius: float = 0.05

    def times(self) -> List[float]:
        return np.geomspace(self.t_min, self.t_max, self.time_count).tolist()

    def refined(self) -> 'QuasipotentialOptions':
        """
        Double every resolution knob. The refined time grid contains the
        coarse one, and the refined control grid contains the coarse one.
        """
        return self._replace(
            intervals=self.intervals * 2,
            restarts=self.restarts * 2,
            time_count=self.time_count * 2 - 1,
            phases=self.phases * 2,
        )


class VtResult(NamedTuple):
    cost: float
    control: Optional[Control]
    residual: float
    # Action of the restored steering initializer.
    initial_cost: float
    T: float


class VResult(NamedTuple):
    cost: float
    T: float
    control: Optional[Control]
    residual: float
    results: Tuple[VtResult, ...] = ()


class CostMatrix(NamedTuple):
    entries: torch.Tensor
    classes: Optional[LimitSet] = None

    @property
    def L(self) -> int:
        return self.entries.size()[0]


class Weights(NamedTuple):
    w: torch.Tensor
    argmin_class: int


def action_of_control(control: Control) -> float:
    """1/2 sum over intervals of (|hdot^1|^2 + |hdot^2|^2) * step."""
    return control.action().item()


def _substeps(T: float, opts: QuasipotentialOptions) -> int:
    return max(opts.substeps,
               math.ceil(T / (opts.intervals * opts.max_step)))


class _Problem(NamedTuple):
    model: Model
    x: State
    y: State
    grid: torch.Tensor
    dt: float
    exclude: Tuple
    radius: float

    def control(self, values: torch.Tensor) -> Control:
        return Control(grid=self.grid, values=values)

    def endpoint(self, values: torch.Tensor) -> torch.Tensor:
        return integrate_controlled(self.model, self.x, self.control(values),
                                    self.dt, record=False).final

    def residual(self, values: torch.Tensor) -> torch.Tensor:
        return torch.linalg.norm(self.endpoint(values) - self.y, dim=-1)

    def enters_tubes(self, values: torch.Tensor) -> torch.Tensor:
        """Per candidate, whether the path enters an excluded tube."""
        if not self.exclude:
            return torch.zeros(values.size()[:-2], dtype=torch.bool)
        states = integrate_controlled(self.model, self.x,
                                      self.control(values), self.dt).states
        inside = torch.zeros(states.size()[:-1], dtype=torch.bool)
        for k in self.exclude:
            inside |= distance_to_class(k, states) < self.radius
        return inside.any(0)


def _restore(
        problem: _Problem,
        values: torch.Tensor,
        opts: QuasipotentialOptions) -> torch.Tensor:
    """Gauss-Newton with minimum-norm steps onto phi(T) = y."""
    shape = values.size()
    for _ in range(opts.restoration_iterations):
        gap = problem.endpoint(values) - problem.y
        if torch.linalg.norm(gap).item() < opts.tol / 10:
            break
        J = torch.autograd.functional.jacobian(problem.endpoint, values)
        J = J.reshape(gap.size()[0], -1)
        step = torch.linalg.pinv(J) @ gap
        values = values - step.reshape(shape)
        if not bool(torch.isfinite(values).all()):
            break
    return values


def _penalized(
        problem: _Problem,
        values: torch.Tensor,
        opts: QuasipotentialOptions) -> torch.Tensor:
    """Penalty continuation on a batch of starts."""
    for stage in range(opts.stages):
        weight = opts.penalty * opts.penalty_growth ** stage
        params = values.clone().requires_grad_(True)
        optimizer = torch.optim.LBFGS(
            [params],
            lr=1,
            max_iter=opts.lbfgs_iterations,
            tolerance_grad=1e-12,
            tolerance_change=1e-15,
            line_search_fn='strong_wolfe')

        def closure():
            optimizer.zero_grad()
            gap = problem.endpoint(params) - problem.y
            loss = (problem.control(params).action()
                    + weight * (gap ** 2).sum(-1)).sum()
            loss.backward()
            return loss

        optimizer.step(closure)
        candidate = params.detach()
        keep = torch.isfinite(candidate).all(-1).all(-1)
        keep &= ~problem.enters_tubes(candidate)
        values = torch.where(keep[:, None, None], candidate, values)
        LOGGER.debug('Penalty stage %d (weight %g): kept %d of %d',
                     stage, weight, int(keep.sum()), keep.numel())
    return values


def _upsample(control: Control, intervals: int) -> Optional[torch.Tensor]:
    count = control.values.size()[-2]
    if intervals % count:
        return None
    return control.values.repeat_interleave(intervals // count, dim=-2)


def quasipotential_vt(
        model: Model,
        x: State,
        y: State,
        T: float,
        opts: QuasipotentialOptions = QuasipotentialOptions(),
        g: Optional[torch.Generator] = None,
        exclude: Sequence = (),
        warm: Optional[Control] = None) -> VtResult:
    """
    Upper bound on V_T(x, y): the smallest action among feasible
    candidates (endpoint residual below opts.tol). The candidates are the
    restored steering initializer, the optimized starts (steering, zero
    control, and perturbations of the steering control) and the warm
    start when given.

    :param exclude: Classes whose tubes of radius opts.tube_radius the
        path must avoid (paths avoiding the other classes).
    :raises ValueError: If T <= 0.
    :raises InfeasibleError: If no candidate is feasible.
    """
    if not T > 0:
        raise ValueError('Horizon must be positive. Got {}'.format(T))
    x, y = as_state(model, x), as_state(model, y)
    if g is None:
        g = generator(0, 'quasipotential', round(T * 1e9))
    M = opts.intervals
    problem = _Problem(
        model=model,
        x=x,
        y=y,
        grid=torch.linspace(0, T, M + 1, dtype=DTYPE),
        dt=T / (M * _substeps(T, opts)),
        exclude=tuple(exclude),
        radius=opts.tube_radius,
    )

    midpoints = (problem.grid[:-1] + problem.grid[1:]) / 2
    steered = steering_profile(model, x, y, T)(midpoints)
    starts = [steered, torch.zeros_like(steered)]
    scale = opts.perturbation * (1 + steered.abs().mean().item())
    while len(starts) < opts.restarts:
        noise = torch.randn(steered.size(), dtype=DTYPE, generator=g)
        starts.append(steered + scale * noise)
    starts = starts[:max(opts.restarts, 1)]
    warm_values = None if warm is None else _upsample(warm, M)
    if warm_values is not None:
        starts.append(warm_values)
    starts = torch.stack(starts)

    initializer = _restore(problem, steered, opts)
    optimized = _penalized(problem, starts, opts)
    candidates = [initializer] + [_restore(problem, v, opts)
                                  for v in optimized]
    if warm_values is not None:
        candidates.append(_restore(problem, warm_values, opts))

    batch = torch.stack(candidates)
    with torch.no_grad():
        costs = problem.control(batch).action()
        residuals = problem.residual(batch)
        feasible = (residuals < opts.tol) & torch.isfinite(costs)
        feasible &= ~problem.enters_tubes(batch)

    initial_cost = costs[0].item() if bool(feasible[0]) else math.inf
    if not bool(feasible.any()):
        raise InfeasibleError(
            'No feasible control for T = {} (best residual {:.3g})'.format(
                T, residuals.min().item()))
    best = int(torch.argmin(torch.where(
        feasible, costs, torch.full_like(costs, math.inf))))
    LOGGER.debug('V_T at T=%g: %g (initializer %g, %d feasible)',
                 T, costs[best].item(), initial_cost, int(feasible.sum()))
    return VtResult(
        cost=costs[best].item(),
        control=problem.control(batch[best]),
        residual=residuals[best].item(),
        initial_cost=initial_cost,
        T=T,
    )


def _matching(results: Sequence[VtResult], T: float) -> Optional[VtResult]:
    for result in results:
        if abs(result.T - T) <= 1e-9 * T:
            return result
    return None


def quasipotential_v(
        model: Model,
        x: State,
        y: State,
        opts: QuasipotentialOptions = QuasipotentialOptions(),
        seed: int = 0,
        travel_times: Sequence[float] = (),
        exclude: Sequence = (),
        previous: Optional[VResult] = None) -> VResult:
    """
    Upper bound on V(x, y) = inf_T V_T(x, y): the minimum over the
    log-spaced time grid and any caller-supplied travel times. V(x, x) is
    0 at T = 0. A candidate of zero cost ends the search since V >= 0.

    :param previous: A coarser result whose controls warm-start the
        matching times, so that refinement never increases the result.
    """
    x, y = as_state(model, x), as_state(model, y)
    if torch.equal(x, y):
        return VResult(cost=0.0, T=0.0, control=None, residual=0.0)

    times = sorted(set(t for t in travel_times if t > 0)) + opts.times()
    if previous is not None:
        times += [r.T for r in previous.results
                  if r.T > 0
                  and all(abs(r.T - t) > 1e-9 * t for t in times)]

    results = []
    for T in times:
        g = generator(seed, 'quasipotential', round(T * 1e9))
        before = None if previous is None else _matching(
            previous.results, T)
        try:
            result = quasipotential_vt(
                model, x, y, T, opts, g=g, exclude=exclude,
                warm=None if before is None else before.control)
        except InfeasibleError as e:
            if before is None:
                LOGGER.warning('Skipping T = %g: %s', T, e)
                continue
            result = before
        if before is not None and before.cost < result.cost:
            result = before
        results.append(result)
        if result.cost <= ZERO_COST:
            break

    if not results:
        raise InfeasibleError('No feasible control at any of {} horizons'
                              .format(len(times)))
    best = min(results, key=lambda r: r.cost)
    return VResult(cost=best.cost, T=best.T, control=best.control,
                   residual=best.residual, results=tuple(results))


def _travel_times(source, a: float, b: float) -> List[float]:
    """Along-orbit travel times from phase a to phase b of one orbit."""
    if not isinstance(source, Orbit):
        return []
    s = (b - a) % source.period
    return [s, s + source.period] if s > 0 else [source.period]


def _cell(
        job: Tuple[int, int, int, int],
        model: Model,
        limitset: LimitSet,
        opts: QuasipotentialOptions,
        seed: int,
        avoid: bool) -> float:
    i, j, a, b = job
    source, target = limitset.classes[i], limitset.classes[j]
    points_i, phases_i = class_points(source, opts.phases)
    points_j, phases_j = class_points(target, opts.phases)
    travel = _travel_times(source, phases_i[a], phases_j[b]) if i == j else []
    exclude = [k for l, k in enumerate(limitset.classes)
               if avoid and l not in (i, j)]
    return quasipotential_v(
        model, points_i[a], points_j[b], opts,
        seed=seed + 1000003 * (i * limitset.L + j),
        travel_times=travel, exclude=exclude).cost


def class_costs(
        model: Model,
        limitset: LimitSet,
        opts: QuasipotentialOptions = QuasipotentialOptions(),
        seed: int = 0,
        jobs: int = 1,
        avoid: bool = False) -> CostMatrix:
    """
    V(K_i, K_j) as the minimum over sampled phase pairs of
    quasipotential_v. With `avoid`, paths between K_i and K_j must stay
    out of the tubes around the other classes.

    :raises ValueError: With fewer than two classes.
    """
    L = limitset.L
    if L < 2:
        raise ValueError('Class costs need at least 2 classes. Got {}'.format(
            L))
    counts = [class_points(k, opts.phases)[0].size()[0]
              for k in limitset.classes]
    jobs_list = [(i, j, a, b)
                 for i in range(L) for j in range(L)
                 for a in range(counts[i]) for b in range(counts[j])]
    LOGGER.info('Computing %d phase-pair quasipotentials for L = %d',
                len(jobs_list), L)
    costs = parallel_map(
        partial(_cell, model=model, limitset=limitset, opts=opts, seed=seed,
                avoid=avoid),
        jobs_list, jobs)

    entries = torch.full((L, L), math.inf, dtype=DTYPE)
    for (i, j, _, _), cost in zip(jobs_list, costs):
        entries[i, j] = min(entries[i, j].item(), cost)
    return CostMatrix(entries=entries, classes=limitset)


def _enumerate(entries: torch.Tensor, root: int) -> float:
    """Minimum total cost over all {root}-graphs, by exhaustive search."""
    L = entries.size()[0]
    others = [m for m in range(L) if m != root]
    choices = [[n for n in range(L) if n != m] for m in others]
    best = math.inf
    for arrows in itertools.product(*choices):
        successor = dict(zip(others, arrows))
        if not _reaches_root(successor, root, L):
            continue
        total = sum(entries[m, n].item() for m, n in successor.items())
        best = min(best, total)
    return best


def _reaches_root(successor: Dict[int, int], root: int, L: int) -> bool:
    for start in successor:
        node = start
        for _ in range(L):
            if node == root:
                break
            node = successor[node]
        if node != root:
            return False
    return True


def _arborescence(entries: torch.Tensor, root: int) -> float:
    """
    Minimum {root}-graph through a minimum spanning arborescence of the
    reversed graph: arrow m -> n of cost V(m, n) becomes edge n -> m,
    and edges into the root are removed so it is the only source.
    """
    L = entries.size()[0]
    graph = nx.DiGraph()
    graph.add_nodes_from(range(L))
    for m in range(L):
        for n in range(L):
            cost = entries[m, n].item()
            if m != n and m != root and math.isfinite(cost):
                graph.add_edge(n, m, weight=cost)
    try:
        tree = nx.minimum_spanning_arborescence(graph, attr='weight')
    except nx.NetworkXException:
        return math.inf
    return sum(data['weight'] for _, _, data in tree.edges(data=True))


def as_cost_matrix(entries) -> CostMatrix:
    """Wrap a square matrix; strings such as 'inf' are parsed as floats."""
    rows = [[float(v) for v in row] for row in entries]
    tensor = torch.tensor(rows, dtype=DTYPE)
    if tensor.dim() != 2 or tensor.size()[0] != tensor.size()[1]:
        raise ValueError('Cost matrix must be square. Got {}'.format(
            tuple(tensor.size())))
    if bool((tensor < 0).any()):
        raise ValueError('Costs must be nonnegative')
    return CostMatrix(entries=tensor)


def fw_weights(costs: CostMatrix, method: str = 'both') -> Weights:
    """
    W(K_i): minimal total cost over {i}-graphs, the spanning graphs in
    which every class but K_i has exactly one outgoing arrow and every
    chain of arrows ends in K_i.

    :param method: 'arborescence', 'enumeration' or 'both' (enumeration
        cross-checks the arborescence up to 6 classes).
    :raises RuntimeError: If the two methods disagree.
    """
    entries = costs.entries
    L = entries.size()[0]
    if method not in ('both', 'arborescence', 'enumeration'):
        raise ValueError('Unknown method {}'.format(method))
    if method == 'enumeration' and L > MAX_ENUMERATION:
        raise ValueError('Enumeration limited to {} classes. Got {}'.format(
            MAX_ENUMERATION, L))
    if L == 1:
        return Weights(w=torch.zeros(1, dtype=DTYPE), argmin_class=0)

    weights = []
    for i in range(L):
        if method == 'enumeration':
            weights.append(_enumerate(entries, i))
            continue
        tree = _arborescence(entries, i)
        if method == 'both' and L <= CROSS_CHECK:
            exhaustive = _enumerate(entries, i)
            if not math.isclose(tree, exhaustive, rel_tol=GRAPH_TOLERANCE,
                                abs_tol=GRAPH_TOLERANCE):
                raise RuntimeError(
                    '{{{}}}-graph weights disagree: arborescence {} vs '
                    'enumeration {}'.format(i, tree, exhaustive))
        weights.append(tree)

    w = torch.tensor(weights, dtype=DTYPE)
    return Weights(w=w, argmin_class=int(torch.argmin(w)))


def costs_to_point(
        model: Model,
        limitset: LimitSet,
        x: State,
        opts: QuasipotentialOptions = QuasipotentialOptions(),
        seed: int = 0) -> torch.Tensor:
    """V(K_i, x) for every class, minimized over sampled phases."""
    costs = []
    for i, k in enumerate(limitset.classes):
        points, _ = class_points(k, opts.phases)
        costs.append(min(
            quasipotential_v(model, p, x, opts, seed=seed + i).cost
            for p in points))
    return torch.tensor(costs, dtype=DTYPE)


def w_of_x(
        model: Model,
        limitset: LimitSet,
        weights: Weights,
        costs_to_x: Optional[torch.Tensor],
        x: State,
        opts: QuasipotentialOptions = QuasipotentialOptions(),
        seed: int = 0) -> float:
    """W(x) = min_i (W(K_i) + V(K_i, x)) - min_j W(K_j)."""
    if costs_to_x is None:
        costs_to_x = costs_to_point(model, limitset, x, opts, seed)
    costs_to_x = torch.as_tensor(costs_to_x, dtype=DTYPE)
    return ((weights.w + costs_to_x).min() - weights.w.min()).item()


def class_kind(k) -> str:
    return 'equilibrium' if isinstance(k, Equilibrium) else 'orbit'
