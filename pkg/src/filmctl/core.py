"""Domain types and geometry shared by every other module.

Physical parameters, the periodic grid, film states, and the actuator and
observer banks.  Everything here is an immutable value; downstream modules
treat these as plain data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import i0e

__all__ = [
    "PhysicalParams",
    "Grid",
    "FilmState",
    "ActuatorBank",
    "ObserverBank",
    "nusselt_state",
    "actuator_shape",
    "actuator_alpha",
    "placement",
]

NUSSELT_FLUX = 2.0 / 3.0


@dataclass(frozen=True)
class PhysicalParams:
    """Problem definition: Re, Ca, inclination, domain length, cost weight."""

    reynolds: float
    capillary: float
    theta: float = np.pi / 3
    length: float = 30.0
    beta: float = 0.5

    def __post_init__(self) -> None:
        if not self.reynolds > 0:
            raise ValueError(f"reynolds must be positive, got {self.reynolds}")
        if not self.capillary > 0:
            raise ValueError(f"capillary must be positive, got {self.capillary}")
        if not self.length > 0:
            raise ValueError(f"length must be positive, got {self.length}")
        if not 0 < self.theta < np.pi / 2 + 1e-12:
            raise ValueError(f"theta must lie in (0, pi/2], got {self.theta}")
        if not 0 <= self.beta <= 1:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on [0, L) with x_N identified with x_0."""

    n_nodes: int
    length: float

    def __post_init__(self) -> None:
        if self.n_nodes < 4:
            raise ValueError(f"need at least 4 nodes, got {self.n_nodes}")
        if self.n_nodes % 2:
            # even N is required by the real Fourier pairing in linsys
            raise ValueError(f"n_nodes must be even, got {self.n_nodes}")
        if not self.length > 0:
            raise ValueError(f"length must be positive, got {self.length}")

    @property
    def dx(self) -> float:
        return self.length / self.n_nodes

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_nodes) * self.dx

    @property
    def wavenumbers(self) -> np.ndarray:
        """Angular wavenumbers k_n = 2 pi n / L in the rfft layout."""
        return 2 * np.pi * np.fft.rfftfreq(self.n_nodes, d=self.dx)


@dataclass(frozen=True)
class FilmState:
    """Interface height h and flux q sampled on the grid at time t."""

    h: np.ndarray
    q: np.ndarray
    t: float = 0.0

    def __post_init__(self) -> None:
        h = np.asarray(self.h, dtype=float)
        q = np.asarray(self.q, dtype=float)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "q", q)
        if h.shape != q.shape or h.ndim != 1:
            raise ValueError(f"h and q must be equal-length vectors, got {h.shape} and {q.shape}")
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(q))):
            raise ValueError("non-finite entries in film state")

    def require_wetting(self) -> None:
        """Raise if the film touches down anywhere; names the first node."""
        bad = np.flatnonzero(self.h <= 0)
        if bad.size:
            j = int(bad[0])
            raise FloatingPointError(
                f"film height non-positive at node {j} (h={self.h[j]:.3e}, t={self.t:.6g})"
            )


def nusselt_state(grid: Grid) -> FilmState:
    """Flat steady base state h = 1, q = 2/3, independent of parameters."""
    n = grid.n_nodes
    return FilmState(h=np.ones(n), q=np.full(n, NUSSELT_FLUX), t=0.0)


def actuator_alpha(omega: float, length: float) -> float:
    """Normalisation making the periodic bump integrate to one over [0, L).

    The integral of exp((cos(2 pi x / L) - 1)/omega^2) over one period is
    L * i0e(1/omega^2) with i0e the scaled modified Bessel function, so the
    exact normalisation needs no quadrature.
    """
    if not omega > 0:
        raise ValueError(f"omega must be positive, got {omega}")
    if not length > 0:
        raise ValueError(f"length must be positive, got {length}")
    return 1.0 / (length * i0e(1.0 / omega**2))


def actuator_shape(x, omega: float, length: float):
    """Periodic near-delta bump d(x) = alpha * exp((cos(2 pi x/L) - 1)/omega^2)."""
    alpha = actuator_alpha(omega, length)
    x = np.asarray(x, dtype=float)
    val = alpha * np.exp((np.cos(2 * np.pi * x / length) - 1.0) / omega**2)
    return val if val.ndim else float(val)


def placement(count: int, length: float) -> np.ndarray:
    """Evenly spaced sites x_i = L (i - 1/2)/count, symmetric about L/2."""
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    i = np.arange(1, count + 1, dtype=float)
    return length * (i - 0.5) / count


def _snap_to_nodes(positions: np.ndarray, grid: Grid) -> np.ndarray:
    """Round each position to the nearest node, keeping mirror symmetry.

    Plain rounding can break the symmetry about L/2 when a position sits
    exactly between two nodes, so the left half is rounded and the right
    half mirrored from it.
    """
    n, dx, L = grid.n_nodes, grid.dx, grid.length
    idx = np.rint(positions / dx).astype(int) % n
    half = len(positions) // 2
    for i in range(half):
        jm = len(positions) - 1 - i
        mirrored = int(np.rint(L / dx)) - idx[i]
        idx[jm] = mirrored % n
    return idx


@dataclass(frozen=True)
class ActuatorBank:
    """M injection sites with a shared bump width and its normalisation."""

    m: int
    positions: np.ndarray
    omega: float
    alpha: float

    @classmethod
    def evenly_spaced(cls, m: int, params: PhysicalParams, omega: float = 0.1) -> "ActuatorBank":
        pos = placement(m, params.length)
        return cls(m=m, positions=pos, omega=omega, alpha=actuator_alpha(omega, params.length))

    def shapes(self, grid: Grid) -> np.ndarray:
        """M x N matrix whose rows are d(x - x_i) on the grid."""
        x = grid.nodes
        return np.stack([actuator_shape(x - xi, self.omega, grid.length) for xi in self.positions])

    def rotated(self, delta: float, length: float) -> "ActuatorBank":
        """Same bank with every site moved by delta (periodic wrap)."""
        return ActuatorBank(
            m=self.m, positions=(self.positions + delta) % length, omega=self.omega, alpha=self.alpha
        )


@dataclass(frozen=True)
class ObserverBank:
    """P observation sites, each coincident with a grid node."""

    p: int
    positions: np.ndarray
    node_indices: np.ndarray

    @classmethod
    def evenly_spaced(cls, p: int, params: PhysicalParams, grid: Grid) -> "ObserverBank":
        raw = placement(p, params.length)
        idx = _snap_to_nodes(raw, grid)
        return cls(p=p, positions=grid.nodes[idx], node_indices=idx)

    def rotated(self, nodes: int, grid: Grid) -> "ObserverBank":
        """Same bank with every site moved by a whole number of grid nodes."""
        idx = (self.node_indices + nodes) % grid.n_nodes
        return ObserverBank(p=self.p, positions=grid.nodes[idx], node_indices=idx)
