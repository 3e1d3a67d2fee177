import logging
import math
from typing import NamedTuple, Optional, Sequence, Tuple, Union

import torch

from harness import generator as stream
from model import Model


LOGGER = logging.getLogger(__name__)

DTYPE = torch.float64

# Default Euler-Maruyama step.
DEFAULT_DT = 1e-3

# A state is a float64 tensor whose last dimension has length model.dim;
# leading dimensions are batch (replica) dimensions.
State = torch.Tensor


class Path(NamedTuple):
    """States on a uniform time grid; states.size()[0] == grid.size()[0]."""
    grid: torch.Tensor
    states: torch.Tensor

    @property
    def final(self) -> State:
        return self.states[-1]


def as_state(model: Model, x: Union[State, Sequence[float]]) -> State:
    """
    Convert to a float64 tensor and check the state dimension.

    :raises ValueError: If the last dimension is not model.dim.
    """
    if not isinstance(x, torch.Tensor) or x.dtype != DTYPE:
        x = torch.as_tensor(x, dtype=DTYPE)
    if x.dim() == 0 or x.size()[-1] != model.dim:
        raise ValueError(
            'Expected states of dimension {}. Got shape {}'.format(
                model.dim, tuple(x.size())))
    return x


def uniform_grid(horizon: float, dt: float) -> Tuple[torch.Tensor, float]:
    """
    Return (grid, step) for a uniform grid covering [0, horizon] whose
    step is the closest to `dt` that divides the horizon.
    """
    if dt <= 0:
        raise ValueError('Time step must be positive. Got {}'.format(dt))
    if horizon < 0:
        raise ValueError('Horizon must be nonnegative. Got {}'.format(horizon))
    steps = max(1, int(round(horizon / dt))) if horizon > 0 else 0
    step = horizon / steps if steps > 0 else dt
    return torch.arange(steps + 1, dtype=DTYPE) * step, step


def drift(model: Model, x: State) -> State:
    """
    Drift b(x) of the cascade: -nu_k x_i + x_{i+1} inside each population,
    closed by c1 f2(x_{n1+2}) and c2 f1(x_1) in the last coordinate of
    each population.
    """
    x = as_state(model, x)
    n1, head2 = model.n1, model.head2
    nu1, nu2 = model.k12.nu, model.k21.nu
    feedback1 = model.k12.c * model.f2.value(x[..., head2])
    feedback2 = model.k21.c * model.f1.value(x[..., 0])
    pop1 = (torch.cat([x[..., 1:n1 + 1], feedback1.unsqueeze(-1)], -1)
            - nu1 * x[..., :n1 + 1])
    pop2 = (torch.cat([x[..., head2 + 1:], feedback2.unsqueeze(-1)], -1)
            - nu2 * x[..., head2:])
    return torch.cat([pop1, pop2], -1)


def dispersion_columns(model: Model, x: State) -> Tuple[State, State]:
    """
    The two columns of the dispersion matrix as vector fields.

    sigma^1 only acts on the last coordinate (population 2), sigma^2 only
    on coordinate n1 + 1 (population 1).
    """
    x = as_state(model, x)
    n, n1 = model.dim, model.n1
    zeros = torch.zeros_like(x)
    amp1 = (model.k21.c / math.sqrt(model.p1)
            * torch.sqrt(model.f1.value(x[..., 0])))
    amp2 = (model.k12.c / math.sqrt(model.p2)
            * torch.sqrt(model.f2.value(x[..., model.head2])))
    sigma1 = torch.cat([zeros[..., :n - 1], amp1.unsqueeze(-1)], -1)
    sigma2 = torch.cat(
        [zeros[..., :n1], amp2.unsqueeze(-1), zeros[..., n1 + 1:]], -1)
    return sigma1, sigma2


def dispersion(model: Model, x: State) -> torch.Tensor:
    """Dispersion matrix sigma(x) of shape (..., n, 2)."""
    return torch.stack(dispersion_columns(model, x), -1)


def jacobian(model: Model, x: State) -> torch.Tensor:
    """Analytic Jacobian of the drift, of shape (..., n, n)."""
    x = as_state(model, x)
    n, n1, head2 = model.dim, model.n1, model.head2
    jac = torch.zeros(x.size() + (n,), dtype=DTYPE)
    idx = torch.arange(n)
    jac[..., idx[:head2], idx[:head2]] = -model.k12.nu
    jac[..., idx[head2:], idx[head2:]] = -model.k21.nu
    # Superdiagonal inside each block.
    for i in list(range(n1)) + list(range(head2, n - 1)):
        jac[..., i, i + 1] = 1.0
    jac[..., n1, head2] = model.k12.c * model.f2.derivative(x[..., head2])
    jac[..., n - 1, 0] = model.k21.c * model.f1.derivative(x[..., 0])
    return jac


def noise_scale(N: float) -> float:
    """Small-noise amplitude N^{-1/2}; an infinite N switches noise off."""
    if N <= 0:
        raise ValueError('Population size must be positive. Got {}'.format(N))
    return 0.0 if math.isinf(N) else 1 / math.sqrt(N)


def em_step(
        model: Model,
        y: State,
        dt: float,
        scale: float,
        g: torch.Generator) -> State:
    """
    One Euler-Maruyama step of dY = b(Y) dt + scale * sigma(Y) dB for a
    batch of states.
    """
    increments = torch.randn(
        y.size()[:-1] + (2, 1), generator=g, dtype=DTYPE) * math.sqrt(dt)
    step = drift(model, y) * dt
    if scale > 0:
        step = step + scale * (dispersion(model, y) @ increments).squeeze(-1)
    return y + step


def simulate_sde(
        model: Model,
        N: float,
        x0: State,
        horizon: float,
        dt: float,
        seed: int,
        g: Optional[torch.Generator] = None) -> Path:
    """
    Euler-Maruyama path of the diffusion approximation.

    :param model: The model.
    :param N: Total population size; math.inf gives the noise-free flow.
    :param x0: Initial state, possibly batched (replicas, n).
    :param horizon: Final time, at least dt.
    :param dt: Time step (kept exactly; the grid ends at the nearest
        multiple of dt).
    :param seed: Top-level seed, used unless a generator is passed.
    :param g: Optional generator overriding the seed-derived stream.
    :returns: Path with states of shape (steps + 1, ..., n).
    """
    if dt <= 0:
        raise ValueError('Time step must be positive. Got {}'.format(dt))
    if horizon < dt:
        raise ValueError('Horizon {} shorter than the time step {}'.format(
            horizon, dt))
    y = as_state(model, x0).clone()
    scale = noise_scale(N)
    if g is None:
        g = stream(seed, 'simulate-sde')

    steps = int(round(horizon / dt))
    states = [y]
    for _ in range(steps):
        y = em_step(model, y, dt, scale, g)
        states.append(y)
    LOGGER.debug('Simulated %d Euler-Maruyama steps at N=%s', steps, N)
    return Path(
        grid=torch.arange(steps + 1, dtype=DTYPE) * dt,
        states=torch.stack(states))
