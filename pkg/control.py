"""
Constructive controllability of the controlled limit system

    dphi/dt = b(phi) + sigma(phi) hdot(t).

Each population is a linear cascade dz/dt = A z + B u driven through its
last coordinate, so steering decouples into two minimum-energy problems
whose inputs are converted back to hdot. The module also provides the
Hormander bracket rank, a small-time local controllability certificate
built on the linearization along the flow, and the small-time scaling of
linear steering costs.
"""
import logging
import math
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np
import torch
from torch.func import jvp

from harness import Fit, linear_fit
from hawkes import cascade_exponential
from limit import find_equilibrium, rk4
from model import Model
from sde import DTYPE, Path, State, as_state, dispersion, \
    dispersion_columns, drift, jacobian, uniform_grid


LOGGER = logging.getLogger(__name__)

# Gauss-Legendre nodes per quadrature panel.
GRAM_NODES = 64

# Longest panel of the composite Gram quadrature.
GRAM_PANEL = 4.0

# Largest accepted condition number of a Gram matrix.
MAX_GRAM_CONDITION = 1e12

# Default steering step and accepted endpoint residual.
STEER_DT = 1e-3
STEER_TOLERANCE = 1e-4

# Relative singular value cutoff of the bracket rank.
RANK_TOLERANCE = 1e-9


class GramConditionError(RuntimeError):
    """The Gram matrix is too ill-conditioned to invert."""


class ControlBoundError(RuntimeError):
    """The certificate controls exceed the allowed bound."""


class LinearSubsystem(NamedTuple):
    """dz/dt = A z + B u for the cascade of one population."""
    A: torch.Tensor
    B: torch.Tensor
    population: int

    @property
    def m(self) -> int:
        return self.A.size()[0]

    @property
    def nu(self) -> float:
        return -self.A[0, 0].item()


class Control(NamedTuple):
    """
    Piecewise-constant control: values[k] holds (hdot^1, hdot^2) on
    [grid[k], grid[k + 1]). `function`, when present, is the exact
    continuous-time control that the values sample at midpoints.
    Values may carry leading batch dimensions.
    """
    grid: torch.Tensor
    values: torch.Tensor
    function: Optional[Callable] = None

    @property
    def horizon(self) -> float:
        return self.grid[-1].item()

    @property
    def step(self) -> float:
        return (self.grid[1] - self.grid[0]).item()

    def action(self) -> torch.Tensor:
        """1/2 sum_k |values[k]|^2 * step, per batch element."""
        return 0.5 * (self.values ** 2).sum((-1, -2)) * self.step

    @staticmethod
    def zero(horizon: float, intervals: int) -> 'Control':
        return Control(
            grid=torch.linspace(0, horizon, intervals + 1, dtype=DTYPE),
            values=torch.zeros(intervals, 2, dtype=DTYPE))


def linear_subsystem(model: Model, population: int) -> LinearSubsystem:
    """A = -nu I + superdiagonal ones, B = last unit vector."""
    kernel = model.k12 if population == 1 else model.k21
    if population not in (1, 2):
        raise ValueError('Population must be 1 or 2. Got {}'.format(
            population))
    m = kernel.n + 1
    A = (-kernel.nu * torch.eye(m, dtype=DTYPE)
         + torch.diag(torch.ones(m - 1, dtype=DTYPE), 1))
    B = torch.zeros(m, dtype=DTYPE)
    B[-1] = 1.0
    return LinearSubsystem(A=A, B=B, population=population)


def kalman_matrix(A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    """[B, AB, ..., A^{m-1} B] for B a vector or an (m, k) matrix."""
    B = B.reshape(A.size()[0], -1)
    blocks = [B]
    for _ in range(A.size()[0] - 1):
        blocks.append(A @ blocks[-1])
    return torch.cat(blocks, -1)


def _panels(T: float) -> torch.Tensor:
    """Composite Gauss-Legendre nodes and weights on [0, T]."""
    nodes, weights = np.polynomial.legendre.leggauss(GRAM_NODES)
    count = max(1, math.ceil(T / GRAM_PANEL))
    width = T / count
    left = np.arange(count)[:, None] * width
    s = (left + (nodes[None, :] + 1) * width / 2).flatten()
    w = np.tile(weights * width / 2, count)
    return torch.tensor(s, dtype=DTYPE), torch.tensor(w, dtype=DTYPE)


def gram_matrix(sys: LinearSubsystem, T: float) -> torch.Tensor:
    """
    Q_T = int_0^T e^{sA} B B* e^{sA*} ds by Gauss-Legendre quadrature on
    the closed-form cascade exponential.

    :raises ValueError: If T <= 0.
    """
    if not T > 0:
        raise ValueError('Gram horizon must be positive. Got {}'.format(T))
    s, w = _panels(T)
    response = cascade_exponential(sys.nu, sys.m, s) @ sys.B
    Q = (w[:, None, None] * response[:, :, None] * response[:, None, :]).sum(0)
    return (Q + Q.T) / 2


def gramian(A: torch.Tensor, B: torch.Tensor, T: float) -> torch.Tensor:
    """Gram matrix of a general pair (A, B) with B of shape (m, k)."""
    if not T > 0:
        raise ValueError('Gram horizon must be positive. Got {}'.format(T))
    s, w = _panels(T)
    response = torch.linalg.matrix_exp(s[:, None, None] * A) @ B
    Q = (w[:, None, None] * (response @ response.transpose(-1, -2))).sum(0)
    return (Q + Q.T) / 2


def cascade_gram(nu: float, m: int, t) -> torch.Tensor:
    """
    Closed-form Q_t of a cascade through the lower incomplete gamma
    function, batched over t.
    """
    t = torch.as_tensor(t, dtype=DTYPE)
    a = torch.arange(m - 1, -1, -1, dtype=DTYPE)
    p = a[:, None] + a[None, :] + 1
    scale = torch.exp(torch.lgamma(p) - torch.lgamma(a[:, None] + 1)
                      - torch.lgamma(a[None, :] + 1)) / (2 * nu) ** p
    x = 2 * nu * t[..., None, None]
    return scale * torch.special.gammainc(p, x.expand(t.size() + (m, m)))


def _check_condition(Q: torch.Tensor):
    condition = torch.linalg.cond(Q).item()
    if not condition < MAX_GRAM_CONDITION:
        raise GramConditionError(
            'Gram matrix condition number {:.3g} exceeds {:.0e}'.format(
                condition, MAX_GRAM_CONDITION))


class MinimumEnergy(NamedTuple):
    """
    Minimum-energy transfer of a cascade from `start` to `target` in time
    T: u(t) = B* e^{(T-t)A*} w with w = Q_T^{-1}(target - e^{TA} start).
    `cost` = <w, Q_T w> = int_0^T u^2 dt.
    """
    sys: LinearSubsystem
    T: float
    start: torch.Tensor
    target: torch.Tensor
    w: torch.Tensor
    cost: float

    def control(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=DTYPE)
        exponential = cascade_exponential(self.sys.nu, self.sys.m, self.T - t)
        return exponential[..., :, -1] @ self.w

    def state(self, t) -> torch.Tensor:
        """x(t) = e^{tA} x + Q_t e^{(T-t)A*} w."""
        t = torch.as_tensor(t, dtype=DTYPE)
        nu, m = self.sys.nu, self.sys.m
        free = cascade_exponential(nu, m, t) @ self.start
        adjoint = cascade_exponential(nu, m, self.T - t).transpose(-1, -2)
        forced = cascade_gram(nu, m, t) @ (adjoint @ self.w).unsqueeze(-1)
        return free + forced.squeeze(-1)


def min_energy_control(
        sys: LinearSubsystem,
        T: float,
        x: torch.Tensor,
        y: torch.Tensor) -> MinimumEnergy:
    """
    :raises GramConditionError: If cond(Q_T) exceeds 1e12.
    """
    Q = gram_matrix(sys, T)
    _check_condition(Q)
    x = torch.as_tensor(x, dtype=DTYPE).reshape(sys.m)
    y = torch.as_tensor(y, dtype=DTYPE).reshape(sys.m)
    gap = y - cascade_exponential(sys.nu, sys.m, T) @ x
    w = torch.linalg.solve(Q, gap)
    return MinimumEnergy(sys=sys, T=T, start=x, target=y, w=w,
                         cost=torch.dot(gap, w).item())


def scaling_matrix(m: int, t: float) -> torch.Tensor:
    """T_t = diag(t^m, t^{m-1}, ..., t)."""
    return torch.diag(torch.tensor([t ** (m - i) for i in range(m)],
                                   dtype=DTYPE))


class SteeringProfile(NamedTuple):
    """
    Exact hdot of the decoupled construction. Population 1 is corrected
    through hdot^2 (the column of sigma acting on coordinate n1 + 1) and
    population 2 through hdot^1.
    """
    model: Model
    transfer1: MinimumEnergy
    transfer2: MinimumEnergy
    reference1: torch.Tensor
    reference2: torch.Tensor
    input1: float
    input2: float

    def trajectory(self, t) -> torch.Tensor:
        return torch.cat([self.reference1 + self.transfer1.state(t),
                          self.reference2 + self.transfer2.state(t)], -1)

    def __call__(self, t) -> torch.Tensor:
        model = self.model
        u1 = self.input1 + self.transfer1.control(t)
        u2 = self.input2 + self.transfer2.control(t)
        head1 = self.reference1[0] + self.transfer1.state(t)[..., 0]
        head2 = self.reference2[0] + self.transfer2.state(t)[..., 0]

        c1, c2 = model.k12.c, model.k21.c
        f2 = model.f2.value(head2)
        f1 = model.f1.value(head1)
        hdot2 = (u1 - c1 * f2) / (c1 / math.sqrt(model.p2) * torch.sqrt(f2))
        hdot1 = (u2 - c2 * f1) / (c2 / math.sqrt(model.p1) * torch.sqrt(f1))
        return torch.stack([hdot1, hdot2], -1)


class SteerResult(NamedTuple):
    control: Control
    achieved: State
    action: float
    residual: float


def steering_profile(
        model: Model,
        x: State,
        y: State,
        T: float) -> SteeringProfile:
    """
    Exact steering control from x to y in time T.

    Each population block is moved by the minimum-energy input about the
    equilibrium (x*_k, c_k f_{k+1}(x*)); the two inputs are converted to
    hdot through the feedback terms of the other population's trajectory.
    """
    if not T > 0:
        raise ValueError('Steering time must be positive. Got {}'.format(T))
    x, y = as_state(model, x), as_state(model, y)
    star = find_equilibrium(model).point
    block1, block2 = model.block(1), model.block(2)

    transfers = []
    for population, block in ((1, block1), (2, block2)):
        sys = linear_subsystem(model, population)
        transfers.append(min_energy_control(
            sys, T, x[block] - star[block], y[block] - star[block]))
    return SteeringProfile(
        model=model,
        transfer1=transfers[0],
        transfer2=transfers[1],
        reference1=star[block1],
        reference2=star[block2],
        input1=model.k12.c * model.f2.value(star[model.head2].item()),
        input2=model.k21.c * model.f1.value(star[0].item()),
    )


def steer(
        model: Model,
        x: State,
        y: State,
        T: float,
        dt: float = STEER_DT,
        tolerance: float = STEER_TOLERANCE) -> SteerResult:
    """
    Steer the nonlinear system from x to y in time T with the exact
    profile, sampled at interval midpoints. The result is verified with
    integrate_controlled; a residual above `tolerance` is logged and
    returned, not raised.
    """
    profile = steering_profile(model, x, y, T)
    x, y = as_state(model, x), as_state(model, y)

    grid, step = uniform_grid(T, dt)
    midpoints = (grid[:-1] + grid[1:]) / 2
    control = Control(grid=grid, values=profile(midpoints), function=profile)
    achieved = integrate_controlled(model, x, control, step).final
    residual = torch.linalg.norm(achieved - y).item()
    if residual > tolerance:
        LOGGER.warning('Steering residual %g above %g (T = %g, dt = %g)',
                       residual, tolerance, T, step)
    return SteerResult(control=control, achieved=achieved,
                       action=control.action().item(), residual=residual)


def controlled_field(model: Model, hdot: torch.Tensor):
    """b(phi) + sigma(phi) hdot for a fixed control value."""
    def field(t, phi):
        return drift(model, phi) + (
            dispersion(model, phi) @ hdot.unsqueeze(-1)).squeeze(-1)
    return field


def integrate_controlled(
        model: Model,
        x: State,
        control: Control,
        dt: float,
        record: bool = True) -> Path:
    """
    RK4 path of dphi = b(phi) dt + sigma(phi) hdot dt.

    Piecewise-constant controls are integrated interval by interval with
    dt dividing the control step; when the control carries its exact
    function it is evaluated at the RK4 stage times. Batched controls
    (values of shape (..., K, 2)) give batched paths, and the result is
    differentiable with respect to the values.

    :raises ValueError: If dt does not divide the control step.
    """
    x = as_state(model, x)
    step = control.step
    ratio = step / dt
    substeps = int(round(ratio))
    if substeps < 1 or abs(ratio - substeps) > 1e-9 * max(1.0, ratio):
        raise ValueError('Step {} does not divide the control step {}'.format(
            dt, step))
    dt = step / substeps
    intervals = control.values.size()[-2]

    if control.function is not None:
        # RK4 stages fall on the half-step lattice.
        half = dt / 2
        table = control.function(
            torch.arange(2 * intervals * substeps + 1, dtype=DTYPE) * half)

        def field(t, phi):
            hdot = table[int(round(t / half))]
            return drift(model, phi) + (
                dispersion(model, phi) @ hdot.unsqueeze(-1)).squeeze(-1)
        states = rk4(field, x, 0.0, dt, intervals * substeps, record=record)
    else:
        y = x
        pieces = [y.unsqueeze(0)] if record else []
        for k in range(intervals):
            field = controlled_field(model, control.values[..., k, :])
            segment = rk4(field, y, k * step, dt, substeps, record=record)
            if record:
                pieces.append(segment[1:])
                y = segment[-1]
            else:
                y = segment
        states = torch.cat(pieces) if record else y

    if not record:
        return Path(grid=control.grid[-1:], states=states.unsqueeze(0))
    grid = torch.arange(intervals * substeps + 1, dtype=DTYPE) * dt
    return Path(grid=grid, states=states)


def _lie_bracket(X: Callable, Y: Callable) -> Callable:
    """[X, Y](x) = DY(x) X(x) - DX(x) Y(x) by forward-mode derivatives."""
    def bracket(x):
        return jvp(Y, (x,), (X(x),))[1] - jvp(X, (x,), (Y(x),))[1]
    return bracket


def bracket_matrix(model: Model, x: State, depth: int) -> torch.Tensor:
    """
    Columns sigma^1, sigma^2 and the iterated brackets
    [sigma^i, b], [[sigma^i, b], b], ... up to the given depth.
    """
    x = as_state(model, x)

    def b(z):
        return drift(model, z)

    columns = []
    for i in range(2):
        def field(z, i=i):
            return dispersion_columns(model, z)[i]
        for _ in range(depth + 1):
            columns.append(field(x))
            field = _lie_bracket(field, b)
    return torch.stack(columns, -1)


def hormander_rank(model: Model, x: State,
                   depth: Optional[int] = None) -> int:
    """Rank of the bracket matrix, by default up to depth n."""
    if depth is None:
        depth = model.dim
    singular = torch.linalg.svdvals(bracket_matrix(model, x, depth))
    return int((singular > RANK_TOLERANCE * singular.max()).sum().item())


class Certificate(NamedTuple):
    Z: torch.Tensor
    min_singular_value: float
    r: float
    control_bound: float


def stlc_certificate(
        model: Model,
        x0: State,
        delta: float,
        M: float,
        frozen: bool = False,
        steps: int = 200) -> Certificate:
    """
    Small-time local controllability certificate at x0.

    For the linearization (A, B) = (Db(x0), sigma(x0)) build controls
    U(t) = B* e^{(delta-t)A*} Q_delta^{-1} r I moving the linear system to
    r e_k, then integrate the variational system
    dZ/dt = Db(x(t)) Z + sigma(x(t)) U(t), Z(0) = 0, along the limit flow
    from x0 (or with frozen coefficients). A positive minimal singular
    value of Z(delta) certifies that the flow point is interior to the
    reachable set.

    :raises ValueError: Unless 0 < delta < 1.
    :raises ControlBoundError: If sum_l sup_t sum_k |U_lk(t)| exceeds M.
    """
    if not 0 < delta < 1:
        raise ValueError('delta must lie in (0, 1). Got {}'.format(delta))
    x0 = as_state(model, x0)
    n = model.dim
    A, B = jacobian(model, x0), dispersion(model, x0)
    Q = gramian(A, B, delta)
    _check_condition(Q)
    r = 0.1 * delta ** (max(model.n1, model.n2) + 1)
    W = torch.linalg.solve(Q, r * torch.eye(n, dtype=DTYPE))

    def controls(t):
        t = torch.as_tensor(t, dtype=DTYPE)
        exponential = torch.linalg.matrix_exp(
            (delta - t)[..., None, None] * A.T)
        return B.T @ exponential @ W

    times = torch.linspace(0, delta, steps + 1, dtype=DTYPE)
    bound = controls(times).abs().sum(-1).max(0).values.sum().item()
    if bound > M:
        raise ControlBoundError(
            'Certificate controls need |hdot| up to {:.4g} > M = {:.4g}'
            .format(bound, M))

    def field(t, y):
        x, Z = y[:n], y[n:].reshape(n, n)
        U = controls(t)
        if frozen:
            dZ = A @ Z + B @ U
            dx = torch.zeros_like(x)
        else:
            dZ = jacobian(model, x) @ Z + dispersion(model, x) @ U
            dx = drift(model, x)
        return torch.cat([dx, dZ.flatten()])

    y0 = torch.cat([x0, torch.zeros(n * n, dtype=DTYPE)])
    y = rk4(field, y0, 0.0, delta / steps, steps, record=False)
    Z = y[n:].reshape(n, n)
    smallest = torch.linalg.svdvals(Z).min().item()
    LOGGER.debug('Certificate at delta=%g: r=%g, sigma_min=%g, bound=%g',
                 delta, r, smallest, bound)
    return Certificate(Z=Z, min_singular_value=smallest, r=r,
                       control_bound=bound)


class CostScaling(NamedTuple):
    slope: float
    predicted: float
    fit: Fit
    deltas: List[float]
    costs: List[float]
    # delta |T_delta^{-1}(theta_delta(z) - y)|^2, same order as the cost.
    normalized: List[float]


def dm_cost_scaling(
        model: Model,
        population: int,
        coordinate_offset_index: int,
        deltas: Sequence[float],
        epsilon: float = 1e-2,
        z: Optional[torch.Tensor] = None) -> CostScaling:
    """
    Small-time growth of the linear steering cost for an offset epsilon
    in coordinate l (1-based) of a population cascade: fit log V against
    log delta, expected slope -(2(m - l) + 1).

    :raises ValueError: With fewer than 3 deltas or l outside [1, m].
    """
    if len(deltas) < 3:
        raise ValueError('Need at least 3 deltas. Got {}'.format(len(deltas)))
    sys = linear_subsystem(model, population)
    m, l = sys.m, coordinate_offset_index
    if not 1 <= l <= m:
        raise ValueError('Coordinate {} outside [1, {}]'.format(l, m))
    z = torch.zeros(m, dtype=DTYPE) if z is None else torch.as_tensor(
        z, dtype=DTYPE)
    offset = torch.zeros(m, dtype=DTYPE)
    offset[l - 1] = epsilon

    costs, normalized = [], []
    for delta in deltas:
        free = cascade_exponential(sys.nu, m, delta) @ z
        costs.append(min_energy_control(sys, delta, z, free + offset).cost)
        scaled = torch.linalg.solve(scaling_matrix(m, delta), offset)
        normalized.append(delta * torch.dot(scaled, scaled).item())

    fit = linear_fit(np.log(deltas), np.log(costs))
    return CostScaling(
        slope=fit.slope,
        predicted=-(2 * (m - l) + 1),
        fit=fit,
        deltas=list(deltas),
        costs=costs,
        normalized=normalized,
    )
