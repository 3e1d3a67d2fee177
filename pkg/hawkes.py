"""
Event-level simulation of the two-population Hawkes system.

With Erlang kernels the intensities are functions of a finite cascade of
memory terms, so the system is a piecewise deterministic Markov process:
between events the cascade decays linearly, and an event of one
population kicks the last cascade coordinate of the other population.
Events are drawn by thinning against the constant dominating rate
N1 * fmax1 + N2 * fmax2.
"""
import logging
from typing import NamedTuple, Optional, Tuple

import torch

from harness import generator as stream
from model import Model
from sde import DTYPE, State, as_state


LOGGER = logging.getLogger(__name__)

# Slack allowed when evaluating a record at its horizon.
HORIZON_SLACK = 1e-12


class EventRecord(NamedTuple):
    """Aggregated jump trains of both populations on [0, horizon]."""
    times1: torch.Tensor
    times2: torch.Tensor
    unit_counts: Tuple[int, int]
    horizon: float
    # Cascade state at time 0, None for an empty history.
    start: Optional[State] = None


class CascadePath(NamedTuple):
    """
    Cascade state at time 0, right after every accepted event, and at the
    horizon. The state follows the linear flow between grid points.
    """
    grid: torch.Tensor
    states: torch.Tensor


class Terminal(NamedTuple):
    """Batched terminal states with per-replica event counts."""
    states: torch.Tensor
    counts1: torch.Tensor
    counts2: torch.Tensor


def cascade_exponential(nu: float, m: int, t) -> torch.Tensor:
    """
    Closed-form e^{tA} for the m x m cascade matrix A = -nu I + J, J the
    nilpotent superdiagonal: entry (i, j) is e^{-nu t} t^{j-i} / (j-i)!
    for j >= i and zero below the diagonal.

    :param t: Scalar or tensor of times; the result has shape
        t.size() + (m, m).
    """
    t = torch.as_tensor(t, dtype=DTYPE)
    k = torch.arange(m)
    power = k.unsqueeze(0) - k.unsqueeze(1)
    upper = power >= 0
    power = power.clamp(min=0).to(DTYPE)
    tt = t.unsqueeze(-1).unsqueeze(-1)
    entries = (torch.exp(-nu * tt) * tt ** power
               / torch.exp(torch.lgamma(power + 1)))
    return torch.where(upper, entries, torch.zeros((), dtype=DTYPE))


def cascade_flow(model: Model, x: State, t) -> State:
    """
    Flow the event-free cascade dynamics for time t (scalar, or one time
    per batch element).
    """
    blocks = []
    for population, nu in ((1, model.k12.nu), (2, model.k21.nu)):
        block = x[..., model.block(population)]
        m = block.size()[-1]
        exponential = cascade_exponential(nu, m, t)
        blocks.append((exponential @ block.unsqueeze(-1)).squeeze(-1))
    return torch.cat(blocks, -1)


def dominating_rate(model: Model, N1: int, N2: int) -> float:
    return N1 * model.f1.fmax + N2 * model.f2.fmax


def _check_sizes(N1: int, N2: int, horizon: float):
    if N1 < 1 or N2 < 1:
        raise ValueError('Unit counts must be at least 1. Got ({}, {})'.format(
            N1, N2))
    if horizon < 0:
        raise ValueError('Horizon must be nonnegative. Got {}'.format(horizon))


def _initial(model: Model, start: Optional[State]) -> State:
    if start is None:
        return torch.zeros(model.dim, dtype=DTYPE)
    return as_state(model, start).clone()


def simulate_hawkes(
        model: Model,
        N1: int,
        N2: int,
        horizon: float,
        seed: int,
        start: Optional[State] = None,
        g: Optional[torch.Generator] = None,
) -> Tuple[EventRecord, CascadePath]:
    """
    Exact simulation of one trajectory by thinning.

    :param model: The model.
    :param N1: Number of population-1 units.
    :param N2: Number of population-2 units.
    :param horizon: Final time.
    :param seed: Top-level seed, used unless a generator is passed.
    :param start: Optional cascade state at time 0 (defaults to empty history).
    :param g: Optional generator overriding the seed-derived stream.
    """
    _check_sizes(N1, N2, horizon)
    if g is None:
        g = stream(seed, 'simulate-hawkes')

    x = _initial(model, start)
    rate = dominating_rate(model, N1, N2)
    kick1 = model.k21.c / N1
    kick2 = model.k12.c / N2

    t = 0.0
    grid, states = [0.0], [x]
    times1, times2 = [], []
    candidates = 0
    while horizon > 0:
        wait = torch.empty((), dtype=DTYPE).exponential_(rate, generator=g)
        if t + wait.item() > horizon:
            break
        candidates += 1
        t += wait.item()
        x = cascade_flow(model, x, wait.item())

        u = torch.rand((), dtype=DTYPE, generator=g).item() * rate
        lambda1 = N1 * model.f1.value(x[0]).item()
        lambda2 = N2 * model.f2.value(x[model.head2]).item()
        if u < lambda1:
            x = x.clone()
            x[model.noisy2] += kick1
            times1.append(t)
        elif u < lambda1 + lambda2:
            x = x.clone()
            x[model.noisy1] += kick2
            times2.append(t)
        else:
            continue
        grid.append(t)
        states.append(x)

    if horizon > 0:
        grid.append(horizon)
        states.append(cascade_flow(model, x, horizon - t))

    LOGGER.debug('Accepted %d of %d candidates (%d, %d events)',
                 len(times1) + len(times2), candidates,
                 len(times1), len(times2))
    events = EventRecord(
        times1=torch.tensor(times1, dtype=DTYPE),
        times2=torch.tensor(times2, dtype=DTYPE),
        unit_counts=(N1, N2),
        horizon=horizon,
        start=None if start is None else states[0],
    )
    path = CascadePath(
        grid=torch.tensor(grid, dtype=DTYPE),
        states=torch.stack(states),
    )
    return events, path


def simulate_hawkes_terminal(
        model: Model,
        N1: int,
        N2: int,
        horizon: float,
        replicas: int,
        g: torch.Generator,
        start: Optional[State] = None) -> Terminal:
    """
    Terminal cascade states of independent replicas, with thinning run
    synchronously across the batch: every active replica draws one
    candidate per iteration.
    """
    _check_sizes(N1, N2, horizon)
    x = _initial(model, start).expand(replicas, model.dim).clone()
    t = torch.zeros(replicas, dtype=DTYPE)
    active = torch.full((replicas,), horizon > 0)
    counts1 = torch.zeros(replicas, dtype=torch.long)
    counts2 = torch.zeros(replicas, dtype=torch.long)
    rate = dominating_rate(model, N1, N2)
    kick1 = model.k21.c / N1
    kick2 = model.k12.c / N2

    while bool(active.any()):
        wait = torch.empty(replicas, dtype=DTYPE).exponential_(
            rate, generator=g)
        u = torch.rand(replicas, dtype=DTYPE, generator=g) * rate
        finished = active & (t + wait > horizon)
        candidate = active & ~finished

        step = torch.where(finished, horizon - t, wait)
        step = torch.where(active, step, torch.zeros((), dtype=DTYPE))
        x = cascade_flow(model, x, step)
        t = torch.where(finished, torch.full_like(t, horizon), t + step)

        lambda1 = N1 * model.f1.value(x[:, 0])
        lambda2 = N2 * model.f2.value(x[:, model.head2])
        jump1 = candidate & (u < lambda1)
        jump2 = candidate & ~jump1 & (u < lambda1 + lambda2)
        x[:, model.noisy2] += kick1 * jump1.to(DTYPE)
        x[:, model.noisy1] += kick2 * jump2.to(DTYPE)
        counts1 += jump1.long()
        counts2 += jump2.long()
        active = candidate

    return Terminal(states=x, counts1=counts1, counts2=counts2)


def cascade_from_events(model: Model, events: EventRecord, t: float) -> State:
    """
    Cascade state at time t by direct convolution of the event trains
    with the shifted Erlang kernels.

    Coordinate l of population k is
    c_k / N_{k+1} * sum_{s <= t} e^{-nu_k (t - s)} (t - s)^{n_k + 1 - l}
    / (n_k + 1 - l)!, plus the decayed initial state.

    :raises ValueError: If t lies outside [0, events.horizon].
    """
    if t < 0 or t > events.horizon + HORIZON_SLACK:
        raise ValueError('Time {} outside the recorded horizon [0, {}]'.format(
            t, events.horizon))
    N1, N2 = events.unit_counts
    blocks = []
    # Population 1 memory is fed by population-2 events and vice versa.
    for kernel, times, units in ((model.k12, events.times2, N2),
                                 (model.k21, events.times1, N1)):
        m = kernel.n + 1
        lags = t - times[times <= t]
        responses = cascade_exponential(kernel.nu, m, lags)[..., :, m - 1]
        blocks.append(kernel.c / units * responses.sum(0))
    x = torch.cat(blocks)
    if events.start is not None:
        x = x + cascade_flow(model, as_state(model, events.start), t)
    return x
