"""
CSV and JSON artifacts.

CSV files are written with numpy.savetxt, which compresses transparently
when the file name ends in `.gz`.
"""
import json
import logging
import math
from typing import Any, Sequence

import numpy as np
import torch


LOGGER = logging.getLogger(__name__)


def to_jsonable(value: Any) -> Any:
    """
    Recursively convert tensors, complex numbers and NamedTuples into
    plain JSON values. Complex numbers become {"re": ..., "im": ...}.
    """
    if isinstance(value, torch.Tensor):
        return to_jsonable(value.detach().cpu().tolist())
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, complex):
        return {'re': value.real, 'im': value.imag}
    if isinstance(value, tuple) and hasattr(value, '_asdict'):
        return {k: to_jsonable(v) for k, v in value._asdict().items()}
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, float) and not math.isfinite(value):
        # JSON has no infinity; keep it readable and parseable by read_json.
        return 'inf' if value > 0 else ('-inf' if value < 0 else 'nan')
    return value


def write_json(path: str, value: Any):
    with open(path, 'w') as f:
        json.dump(to_jsonable(value), f, indent=2, sort_keys=True)
        f.write('\n')
    LOGGER.debug('Wrote %s', path)


def read_json(path: str) -> Any:
    with open(path) as f:
        return json.load(f)


def parse_float(value: Any) -> float:
    """Inverse of the non-finite encoding of to_jsonable ('inf' -> inf)."""
    return float(value)


def write_rows_csv(path: str, header: Sequence[str], rows: Any):
    """Write a numeric table with a header line."""
    rows = np.asarray(rows, dtype=float).reshape(-1, len(header))
    np.savetxt(path, rows, delimiter=',', header=','.join(header),
               comments='', fmt='%.17g')
    LOGGER.debug('Wrote %d rows to %s', rows.shape[0], path)


def write_path_csv(path: str, grid: torch.Tensor, states: torch.Tensor):
    """Columns t,x1,...,xn for a single (unbatched) path."""
    if states.dim() != 2:
        raise ValueError('Expected a single path of shape (steps, n). '
                         'Got {}'.format(tuple(states.size())))
    n = states.size()[-1]
    header = ['t'] + ['x{}'.format(i + 1) for i in range(n)]
    rows = torch.cat([grid.unsqueeze(-1), states], -1)
    write_rows_csv(path, header, rows.numpy())


def write_events_csv(path: str, times1: torch.Tensor, times2: torch.Tensor):
    """Columns population,time, sorted by time."""
    rows = torch.cat([
        torch.stack([torch.ones_like(times1), times1], -1),
        torch.stack([2 * torch.ones_like(times2), times2], -1),
    ])
    order = torch.argsort(rows[:, 1], stable=True)
    write_rows_csv(path, ['population', 'time'], rows[order].numpy())


def write_control_csv(path: str, grid: torch.Tensor, values: torch.Tensor):
    """
    Columns t,h1dot,h2dot; t is the left end of each interval and the
    control is constant on [t, next t).
    """
    rows = torch.cat([grid[:-1].unsqueeze(-1), values], -1)
    write_rows_csv(path, ['t', 'h1dot', 'h2dot'], rows.numpy())
