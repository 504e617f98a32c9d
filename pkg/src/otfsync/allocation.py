"""Per-user delay-Doppler resource allocation and selection matrices.

An allocation assigns each user an ordered set of delay bins and an
ordered set of Doppler bins; the user owns the Cartesian product of the
two sets.  Across users the products are disjoint and together they tile
the full M x N grid.  Allocations are immutable and safe to share across
Monte Carlo workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AllocationError


@dataclass(frozen=True)
class UserAllocation:
    user_id: int
    delay_bins: tuple[int, ...]
    doppler_bins: tuple[int, ...]

    @property
    def m_q(self) -> int:
        return len(self.delay_bins)

    @property
    def n_q(self) -> int:
        return len(self.doppler_bins)


def _contiguous_split(size: int, parts: int) -> list[tuple[int, ...]]:
    # remainder bins go to the highest-indexed user
    chunk = size // parts
    out = []
    for q in range(parts):
        hi = (q + 1) * chunk if q < parts - 1 else size
        out.append(tuple(range(q * chunk, hi)))
    return out


def build_allocation(m: int, n: int, num_users: int, scheme: str) -> list[UserAllocation]:
    """Build one allocation per user for a named scheme.

    Schemes: ``contiguous-delay`` splits the delay axis, ``contiguous-doppler``
    splits the Doppler axis, ``interleaved`` stripes the Doppler axis with
    stride ``num_users``.  The unsplit axis is shared in full by every user.
    """
    if num_users < 1:
        raise AllocationError("need at least one user")
    if num_users > m or num_users > n:
        raise AllocationError(
            f"num_users={num_users} exceeds the grid (m={m}, n={n})"
        )
    all_delay = tuple(range(m))
    all_doppler = tuple(range(n))
    if scheme == "contiguous-delay":
        parts = _contiguous_split(m, num_users)
        return [UserAllocation(q, parts[q], all_doppler) for q in range(num_users)]
    if scheme == "contiguous-doppler":
        parts = _contiguous_split(n, num_users)
        return [UserAllocation(q, all_delay, parts[q]) for q in range(num_users)]
    if scheme == "interleaved":
        return [
            UserAllocation(q, all_delay, tuple(range(q, n, num_users)))
            for q in range(num_users)
        ]
    raise AllocationError(f"unknown allocation scheme {scheme!r}")


def check_partition(allocs: list[UserAllocation], m: int, n: int) -> None:
    """Verify the 2-D bins are disjoint across users and tile the grid."""
    owner = np.full((m, n), -1, dtype=int)
    for alloc in allocs:
        rows = np.asarray(alloc.delay_bins)
        cols = np.asarray(alloc.doppler_bins)
        if rows.size and (rows.min() < 0 or rows.max() >= m):
            raise AllocationError(f"user {alloc.user_id}: delay bins leave [0, {m})")
        if cols.size and (cols.min() < 0 or cols.max() >= n):
            raise AllocationError(f"user {alloc.user_id}: Doppler bins leave [0, {n})")
        patch = owner[np.ix_(rows, cols)]
        if np.any(patch != -1):
            raise AllocationError(
                f"user {alloc.user_id} overlaps bins already owned by another user"
            )
        owner[np.ix_(rows, cols)] = alloc.user_id
    if np.any(owner == -1):
        raise AllocationError("allocation does not cover the full delay-Doppler grid")


def selection_matrices(alloc: UserAllocation, m: int, n: int):
    """Delay selector (M x M_q) and Doppler selector (N_q x N).

    The delay selector holds the columns of I_M indexed by the user's delay
    bins; the Doppler selector the rows of I_N indexed by its Doppler bins.
    ``gamma_tau @ D_q @ gamma_nu`` scatters an M_q x N_q data block onto the
    full grid.
    """
    rows = np.asarray(alloc.delay_bins, dtype=int)
    cols = np.asarray(alloc.doppler_bins, dtype=int)
    if rows.size == 0 or cols.size == 0:
        raise AllocationError(f"user {alloc.user_id}: empty allocation")
    if rows.min() < 0 or rows.max() >= m or cols.min() < 0 or cols.max() >= n:
        raise AllocationError(
            f"user {alloc.user_id}: allocation indices outside the {m} x {n} grid"
        )
    gamma_tau = np.eye(m)[:, rows]
    gamma_nu = np.eye(n)[cols, :]
    return gamma_tau, gamma_nu


def combined_selector(alloc: UserAllocation, m: int, n: int) -> np.ndarray:
    """Kronecker selector mapping vec(D_q) onto the combined symbol vector."""
    gamma_tau, gamma_nu = selection_matrices(alloc, m, n)
    return np.kron(gamma_nu.T, gamma_tau)


def bin_mask(alloc: UserAllocation, m: int, n: int) -> np.ndarray:
    """Boolean M x N mask of the bins owned by this user."""
    mask = np.zeros((m, n), dtype=bool)
    mask[np.ix_(alloc.delay_bins, alloc.doppler_bins)] = True
    return mask
