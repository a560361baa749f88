"""Linear-system view of quality inference and the leave-one-out baseline.

Each round contributes one equation: the aggregate quality ``v_i`` is the
mean (or sum) of the selected participants' qualities ``u_n``. With a
participation matrix ``A`` (rounds x participants) the qualities follow
from least squares when there are more rounds than participants, or as
the minimum-norm exact solution when there are fewer.

Everything here except :func:`leave_one_out` works on ``(A, v)`` only.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from qinfer.errors import CapabilityError, DomainError, SingularSystemError
from qinfer.model import average_params
from qinfer.rounds import RoundLog

log = logging.getLogger(__name__)

PIVOT_TOLERANCE = 1e-10


def privileged(fn):
    """Mark a function that needs individual updates (outside secure aggregation)."""
    fn.__privileged__ = True
    return fn


def participation_matrix(logs: Sequence[RoundLog], n_participants: int) -> np.ndarray:
    a = np.zeros((len(logs), n_participants))
    for row, entry in enumerate(logs):
        ids = np.asarray(entry.selected, dtype=np.int64)
        if ids.size and (ids.min() < 1 or ids.max() > n_participants):
            raise DomainError(f"round {entry.index} selects ids outside 1..{n_participants}")
        a[row, ids - 1] = 1.0
    return a


def _checked_solve(gram: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    cond = float(np.linalg.cond(gram))
    log.debug("%s condition number %.3e", what, cond)
    if not np.isfinite(cond) or cond * PIVOT_TOLERANCE > 1.0:
        raise SingularSystemError(f"{what} is numerically singular", cond)
    return np.linalg.solve(gram, rhs)


def solve_overdetermined(a, v, pinv: bool = False) -> np.ndarray:
    """Least-squares qualities ``(A^T A)^{-1} A^T v``."""
    a = np.asarray(a, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if a.ndim != 2 or v.shape != (a.shape[0],):
        raise DomainError(f"shape mismatch: A {a.shape}, v {v.shape}")
    if a.shape[0] < a.shape[1] and not pinv:
        raise DomainError(f"{a.shape[0]} rounds < {a.shape[1]} participants: use solve_underdetermined")
    try:
        return _checked_solve(a.T @ a, a.T @ v, "A^T A")
    except SingularSystemError:
        if not pinv:
            raise
        log.warning("A^T A singular, falling back to the pseudo-inverse")
        return np.linalg.pinv(a) @ v


def solve_underdetermined(a, v) -> np.ndarray:
    """Minimum-norm exact solution ``A^T (A A^T)^{-1} v``."""
    a = np.asarray(a, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if a.ndim != 2 or v.shape != (a.shape[0],):
        raise DomainError(f"shape mismatch: A {a.shape}, v {v.shape}")
    if a.shape[0] > a.shape[1]:
        raise DomainError(f"{a.shape[0]} rounds > {a.shape[1]} participants: use solve_overdetermined")
    return a.T @ _checked_solve(a @ a.T, v, "A A^T")


def residual_error(a, v) -> float:
    """Quadratic form ``v^T (I - A (A^T A)^{-1} A^T) v`` of the least-squares fit."""
    a = np.asarray(a, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if a.ndim != 2 or v.shape != (a.shape[0],):
        raise DomainError(f"shape mismatch: A {a.shape}, v {v.shape}")
    proj_coeffs = _checked_solve(a.T @ a, a.T @ v, "A^T A")
    return float(v @ v - v @ (a @ proj_coeffs))


def synthesize_rounds(
    u_star,
    n_participants: int,
    b: int,
    rounds: int,
    noise: float | Callable[[np.random.Generator, int], np.ndarray] = 0.0,
    seed: int = 0,
    aggregate: str = "mean",
) -> tuple[np.ndarray, np.ndarray]:
    """Random binary participation matrix and noisy aggregate qualities.

    With the default ``"mean"`` convention ``v = (A / b) u* + noise``; the
    ``"sum"`` convention gives ``v = A u* + noise``.

    ``noise`` is either the standard deviation of zero-mean Gaussian noise
    added to each selected participant's quality, or a callable
    ``(rng, size) -> samples`` drawing that per-participant noise.
    """
    u_star = np.asarray(u_star, dtype=np.float64)
    if u_star.shape != (n_participants,):
        raise DomainError("u_star must have one entry per participant")
    if not 1 <= b <= n_participants:
        raise DomainError(f"cannot select {b} of {n_participants} participants")
    if aggregate not in ("mean", "sum"):
        raise DomainError(f"aggregate must be 'mean' or 'sum', got {aggregate!r}")
    rng = np.random.default_rng(seed)
    if callable(noise):
        draw = noise
    else:
        sigma = float(noise)
        draw = lambda g, size: g.normal(0.0, sigma, size) if sigma > 0 else np.zeros(size)  # noqa: E731
    a = np.zeros((rounds, n_participants))
    v = np.zeros(rounds)
    for i in range(rounds):
        chosen = rng.choice(n_participants, size=b, replace=False)
        a[i, chosen] = 1.0
        theta = u_star[chosen] + draw(rng, b)
        v[i] = theta.mean() if aggregate == "mean" else theta.sum()
    return a, v


@privileged
def loo_round_increments(record, evaluate: Callable[[object], float]) -> dict[int, float]:
    """Accuracy of the full aggregate minus accuracy without each participant.

    ``record`` carries ``selected``, ``previous`` and the individual
    ``updates``; ``evaluate`` maps a model to test accuracy.
    """
    updates = getattr(record, "updates", None)
    if not updates or any(n not in updates for n in record.selected):
        raise CapabilityError(
            f"round {getattr(record, 'index', '?')}: individual updates unavailable "
            "(leave-one-out cannot run behind secure aggregation)"
        )
    selected = list(record.selected)
    full = evaluate(average_params([updates[n] for n in selected]))
    if len(selected) == 1:
        return {selected[0]: full - evaluate(record.previous)}
    return {
        n: full - evaluate(average_params([updates[m] for m in selected if m != n]))
        for n in selected
    }


@privileged
def leave_one_out(records: Iterable, n_participants: int, evaluate: Callable[[object], float]) -> np.ndarray:
    """Accumulated leave-one-out contributions per participant (index ``n - 1``)."""
    total = np.zeros(n_participants)
    for record in records:
        for n, inc in loo_round_increments(record, evaluate).items():
            total[n - 1] += inc
    return total


def save_system_csv(path: str | Path, a, v) -> None:
    a = np.asarray(a, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"a{n + 1}" for n in range(a.shape[1])] + ["v"])
        for row, value in zip(a, v):
            writer.writerow([repr(float(x)) for x in row] + [repr(float(value))])


def load_system_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "v":
            raise DomainError(f"{path}: last column must be 'v'")
        rows = [[float(x) for x in row] for row in reader if row]
    data = np.array(rows, dtype=np.float64).reshape(-1, len(header))
    return data[:, :-1], data[:, -1]
