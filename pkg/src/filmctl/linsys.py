"""Linearisation of the film model about the flat base state.

Assembles the state-space matrices (A, B, C) and cost weights (U, V) on the
periodic grid, exposes the per-wavenumber 2x2 blocks of the linear operator,
and builds real-valued modal restrictions onto the slowest (most unstable)
modes for reduced-order design.

The spectral discretisation gives the sawtooth (Nyquist) interface mode an
exactly neutral, unforceable direction, so (A, B) is not stabilisable on the
full grid space.  Design therefore happens on the resolved subspace spanned
by the orthonormal real Fourier basis without the Nyquist column; that
subspace is invariant under A, the restriction is exact, and the matrices
restricted to it are exposed as a_res, b_res, c_res, u_res.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg

from .core import ActuatorBank, Grid, ObserverBank, PhysicalParams

__all__ = [
    "LinearSystem",
    "ModalDecomposition",
    "ModeGroup",
    "ControllabilityError",
    "fourier_blocks",
    "growth_rates",
    "real_fourier_basis",
    "linearize",
    "modal_decompose",
    "modal_decompose_groups",
    "rank_modes",
]

HURWITZ_MARGIN = -1e-10


class ControllabilityError(ValueError):
    """Retained modal set cannot cover the unstable dynamics."""


def fourier_blocks(params: PhysicalParams, grid: Grid) -> np.ndarray:
    """Per-wavenumber 2x2 blocks J_n of the linearised operator, rfft layout.

    Row order (h, q).  Odd-derivative multipliers vanish on the Nyquist bin,
    matching the collocation derivative convention.
    """
    re, ca = params.reynolds, params.capillary
    cot = 1.0 / np.tan(params.theta)
    k = grid.wavenumbers.copy()
    ik = 1j * k
    ik3 = (1j * k) ** 3
    if grid.n_nodes % 2 == 0:
        ik[-1] = 0.0
        ik3[-1] = 0.0
    c_h = 2.0 + ik * (8.0 * re / 35.0 - 2.0 * cot / 3.0) + ik3 / (3.0 * ca)
    c_q = -1.0 - (68.0 * re / 105.0) * ik
    nb = k.size
    blocks = np.zeros((nb, 2, 2), dtype=complex)
    blocks[:, 0, 1] = -ik
    blocks[:, 1, 0] = 2.5 / re * c_h
    blocks[:, 1, 1] = 2.5 / re * c_q
    return blocks


def growth_rates(params: PhysicalParams, grid: Grid) -> np.ndarray:
    """Largest real part of each wavenumber block's eigenvalues."""
    blocks = fourier_blocks(params, grid)
    return np.array([np.max(np.linalg.eigvals(b).real) for b in blocks])


def _derivative_matrix(grid: Grid, order: int) -> np.ndarray:
    """Dense N x N spectral differentiation matrix (odd orders kill Nyquist)."""
    n = grid.n_nodes
    k = grid.wavenumbers
    mult = (1j * k) ** order
    if order % 2 and n % 2 == 0:
        mult = mult.copy()
        mult[-1] = 0.0
    spec = np.fft.rfft(np.eye(n), axis=0)
    return np.fft.irfft(mult[:, None] * spec, n=n, axis=0)


def real_fourier_basis(n: int) -> np.ndarray:
    """Orthonormal real Fourier basis of R^n minus the sawtooth column.

    Columns: constant, then cos/sin pairs for wavenumbers 1..n/2-1; the
    Nyquist (sawtooth) column is omitted, giving an n x (n-1) matrix with
    orthonormal columns spanning the A-invariant resolved subspace.
    """
    j = np.arange(n)
    cols = [np.full(n, 1.0 / np.sqrt(n))]
    for m in range(1, n // 2):
        ang = 2 * np.pi * m * j / n
        cols.append(np.sqrt(2.0 / n) * np.cos(ang))
        cols.append(np.sqrt(2.0 / n) * np.sin(ang))
    return np.column_stack(cols)


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """State-space matrices about the base state, plus geometry handles."""

    params: PhysicalParams
    grid: Grid
    actuators: ActuatorBank
    observers: ObserverBank
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    u: np.ndarray
    v: np.ndarray

    @cached_property
    def blocks(self) -> np.ndarray:
        return fourier_blocks(self.params, self.grid)

    @cached_property
    def resolved_basis(self) -> np.ndarray:
        """2N x (2N-2) orthonormal basis of the A-invariant resolved subspace."""
        e = real_fourier_basis(self.grid.n_nodes)
        return scipy.linalg.block_diag(e, e)

    @cached_property
    def a_res(self) -> np.ndarray:
        e = self.resolved_basis
        return e.T @ self.a @ e

    @cached_property
    def b_res(self) -> np.ndarray:
        return self.resolved_basis.T @ self.b

    @cached_property
    def c_res(self) -> np.ndarray:
        return self.c @ self.resolved_basis

    @cached_property
    def u_res(self) -> np.ndarray:
        e = self.resolved_basis
        return e.T @ self.u @ e


def linearize(
    params: PhysicalParams,
    grid: Grid,
    actuators: ActuatorBank,
    observers: ObserverBank,
) -> LinearSystem:
    """Exact Jacobian of the film model at the base state, plus B, C, U, V."""
    n = grid.n_nodes
    re, ca = params.reynolds, params.capillary
    cot = 1.0 / np.tan(params.theta)

    d1 = _derivative_matrix(grid, 1)
    d3 = _derivative_matrix(grid, 3)
    eye = np.eye(n)
    pref = 2.5 / re
    a = np.block(
        [
            [np.zeros((n, n)), -d1],
            [
                pref * (2.0 * eye + (8.0 * re / 35.0 - 2.0 * cot / 3.0) * d1 + d3 / (3.0 * ca)),
                pref * (-eye - (68.0 * re / 105.0) * d1),
            ],
        ]
    )

    # forcing enters h_t directly and q_t through the h q f / 5 inertia term,
    # which at the base state reduces to f/3
    shapes = actuators.shapes(grid)
    b = np.vstack([shapes.T, shapes.T / 3.0])

    c = np.zeros((observers.p, 2 * n))
    c[np.arange(observers.p), observers.node_indices] = 1.0

    u = np.zeros((2 * n, 2 * n))
    u[np.arange(n), np.arange(n)] = params.beta * params.length / n
    v = (1.0 - params.beta) * np.eye(actuators.m)

    return LinearSystem(
        params=params, grid=grid, actuators=actuators, observers=observers, a=a, b=b, c=c, u=u, v=v
    )


@dataclass(frozen=True, eq=False)
class ModeGroup:
    """One ranked mode: wavenumber index, eigenvalue, real dimension count."""

    n: int
    eigenvalue: complex
    dim: int
    right: np.ndarray
    left: np.ndarray

    @property
    def rate(self) -> float:
        return float(self.eigenvalue.real)


def rank_modes(sys: LinearSystem) -> list[ModeGroup]:
    """All block modes ranked by decaying real part, Nyquist bin excluded.

    Bins n >= 1 represent a conjugate pair (the -n partner is implicit) and
    count two real dimensions; the n = 0 modes are real and count one each.
    The Nyquist bin is excluded because its interface mode is neutral and
    unreachable, which is exactly what the resolved-subspace design avoids.
    """
    blocks = sys.blocks
    n_bins = blocks.shape[0]
    last = n_bins - 1 if sys.grid.n_nodes % 2 == 0 else n_bins
    out: list[ModeGroup] = []
    for n in range(last):
        ev, vr = np.linalg.eig(blocks[n])
        wl = np.linalg.inv(vr)
        for j in range(2):
            # store left vector w with w^H v = 1
            out.append(
                ModeGroup(
                    n=n,
                    eigenvalue=complex(ev[j]),
                    dim=1 if n == 0 else 2,
                    right=vr[:, j].copy(),
                    left=wl[j, :].conj().copy(),
                )
            )
    out.sort(key=lambda g: (-g.eigenvalue.real, g.n, -abs(g.eigenvalue.imag)))
    return out


@dataclass(frozen=True, eq=False)
class ModalDecomposition:
    """Real-form restriction of the linear system onto retained modes."""

    system: LinearSystem
    groups: tuple[ModeGroup, ...]
    retained: tuple[ModeGroup, ...]
    m_z: int
    adjusted: bool
    n_unstable_dims: int
    n_unstable_groups: int
    a_u: np.ndarray
    b_u: np.ndarray
    sampling: np.ndarray
    prolong: np.ndarray
    restrict: np.ndarray
    u_u: np.ndarray


def _build_maps(sys: LinearSystem, retained: list[ModeGroup]):
    """Real block-diagonal reduced matrices and the prolong/restrict maps."""
    grid = sys.grid
    n = grid.n_nodes
    x = grid.nodes
    kvec = grid.wavenumbers
    blocks, pro_cols, res_rows = [], [], []
    for g in retained:
        ph = np.exp(1j * kvec[g.n] * x)
        v, w = g.right, g.left
        if g.n == 0:
            blocks.append(np.array([[g.eigenvalue.real]]))
            pro_cols.append(np.concatenate([np.real(v[0] * ph), np.real(v[1] * ph)]))
            wbar = w.conj()
            res_rows.append(
                np.concatenate([np.real(wbar[0] * np.conj(ph)), np.real(wbar[1] * np.conj(ph))]) / n
            )
        else:
            s, o = g.eigenvalue.real, g.eigenvalue.imag
            blocks.append(np.array([[s, -o], [o, s]]))
            pro_cols.append(np.concatenate([2 * np.real(v[0] * ph), 2 * np.real(v[1] * ph)]))
            pro_cols.append(np.concatenate([-2 * np.imag(v[0] * ph), -2 * np.imag(v[1] * ph)]))
            wbar = w.conj()
            res_rows.append(
                np.concatenate([np.real(wbar[0] * np.conj(ph)), np.real(wbar[1] * np.conj(ph))]) / n
            )
            res_rows.append(
                np.concatenate([np.imag(wbar[0] * np.conj(ph)), np.imag(wbar[1] * np.conj(ph))]) / n
            )
    a_u = scipy.linalg.block_diag(*blocks)
    prolong = np.array(pro_cols).T
    restrict = np.array(res_rows)
    return a_u, prolong, restrict


def _decompose(sys: LinearSystem, retained: list[ModeGroup], all_groups: list[ModeGroup], adjusted: bool):
    unstable = [g for g in all_groups if g.eigenvalue.real > -HURWITZ_MARGIN]
    n_unstable_dims = sum(g.dim for g in unstable)
    missing = [g for g in unstable if g not in retained]
    if missing:
        worst = missing[0]
        raise ControllabilityError(
            f"retained set misses {sum(g.dim for g in missing)} unstable dimension(s), "
            f"e.g. wavenumber {worst.n} with rate {worst.eigenvalue.real:.4g}; "
            f"increase retention to at least {n_unstable_dims}"
        )
    a_u, prolong, restrict = _build_maps(sys, retained)
    return ModalDecomposition(
        system=sys,
        groups=tuple(all_groups),
        retained=tuple(retained),
        m_z=a_u.shape[0],
        adjusted=adjusted,
        n_unstable_dims=n_unstable_dims,
        n_unstable_groups=len(unstable),
        a_u=a_u,
        b_u=restrict @ sys.b,
        sampling=sys.c @ prolong,
        prolong=prolong,
        restrict=restrict,
        u_u=prolong.T @ sys.u @ prolong,
    )


def modal_decompose(sys: LinearSystem, retain: int) -> ModalDecomposition:
    """Retain the `retain` slowest real dimensions (conjugate pairs intact).

    A request that would split a conjugate pair is bumped up by one and the
    result flags adjusted=True.  Requests that fail to cover every strictly
    unstable dimension raise ControllabilityError.
    """
    if retain < 1:
        raise ValueError(f"retain must be positive, got {retain}")
    groups = rank_modes(sys)
    sel, total = [], 0
    for g in groups:
        if total >= retain:
            break
        sel.append(g)
        total += g.dim
    adjusted = total != retain
    return _decompose(sys, sel, groups, adjusted)


def modal_decompose_groups(sys: LinearSystem, n_groups: int) -> ModalDecomposition:
    """Retain the `n_groups` slowest modes counted in conjugate-pair groups."""
    if n_groups < 1:
        raise ValueError(f"n_groups must be positive, got {n_groups}")
    groups = rank_modes(sys)
    sel = groups[:n_groups]
    return _decompose(sys, sel, groups, adjusted=False)
