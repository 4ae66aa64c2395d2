"""Nonlinear weighted-residual film model on the periodic grid.

The plant is the two-field system

    h_t = f - q_x
    q_t = (5 / (2 Re h^2)) [ -q + (h^3/3)(2 - 2 h_x cot(theta) + h_xxx / Ca)
                             + Re (18 q^2 h_x / 35 - 34 h q q_x / 35 + h q f / 5) ]

with f the injected wall-normal velocity.  Spatial derivatives are Fourier
collocation derivatives, which keeps the linearisation exactly block-diagonal
per wavenumber.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ActuatorBank, FilmState, Grid, PhysicalParams

__all__ = ["ControlField", "spatial_derivative", "wr_rhs", "mass", "dealias"]


def _multiplier(n: int, length: float, order: int) -> np.ndarray:
    """(ik)^order in the rfft layout, with the Nyquist bin zeroed for odd orders.

    An odd derivative of the sawtooth mode has no consistent real
    representation on the grid, so its multiplier is zero; this is also what
    makes the linearised operator's Nyquist block neutral.
    """
    k = 2 * np.pi * np.fft.rfftfreq(n, d=length / n)
    mult = (1j * k) ** order
    if order % 2 and n % 2 == 0:
        mult[-1] = 0.0
    return mult


def spatial_derivative(field: np.ndarray, order: int, length: float) -> np.ndarray:
    """Spectral d^order/dx^order of a real periodic field."""
    if order not in (1, 2, 3):
        raise ValueError(f"order must be 1, 2, or 3, got {order}")
    field = np.asarray(field, dtype=float)
    spec = np.fft.rfft(field)
    return np.fft.irfft(spec * _multiplier(field.size, length, order), n=field.size)


def dealias(field: np.ndarray, length: float) -> np.ndarray:
    """2/3-rule truncation: zero all modes above 2/3 of the resolved band."""
    field = np.asarray(field, dtype=float)
    spec = np.fft.rfft(field)
    keep = np.fft.rfftfreq(field.size) * field.size <= field.size // 3
    return np.fft.irfft(spec * keep, n=field.size)


@dataclass(frozen=True)
class ControlField:
    """Injected velocity f = sum_i eta_i d(x - x_i) and its amplitudes."""

    f: np.ndarray
    amplitudes: np.ndarray

    @classmethod
    def from_amplitudes(cls, eta, bank: ActuatorBank, grid: Grid) -> "ControlField":
        eta = np.atleast_1d(np.asarray(eta, dtype=float))
        if eta.shape != (bank.m,):
            raise ValueError(f"expected {bank.m} amplitudes, got shape {eta.shape}")
        f = eta @ bank.shapes(grid)
        return cls(f=f, amplitudes=eta)

    @classmethod
    def zero(cls, grid: Grid, m: int = 0) -> "ControlField":
        return cls(f=np.zeros(grid.n_nodes), amplitudes=np.zeros(m))


def wr_rhs(
    state: FilmState,
    control: ControlField,
    params: PhysicalParams,
    apply_dealias: bool = False,
):
    """Time derivatives (dh/dt, dq/dt) of the weighted-residual model."""
    state.require_wetting()
    h, q = state.h, state.q
    f = control.f
    L = params.length
    re, ca = params.reynolds, params.capillary
    cot = 1.0 / np.tan(params.theta)

    hx = spatial_derivative(h, 1, L)
    hxxx = spatial_derivative(h, 3, L)
    qx = spatial_derivative(q, 1, L)

    dh = f - qx
    inertia = 18.0 * q**2 * hx / 35.0 - 34.0 * h * q * qx / 35.0 + h * q * f / 5.0
    dq = (2.5 / (re * h**2)) * (-q + (h**3 / 3.0) * (2.0 - 2.0 * hx * cot + hxxx / ca) + re * inertia)

    if apply_dealias:
        dh = dealias(dh, L)
        dq = dealias(dq, L)
    return dh, dq


def mass(state: FilmState, grid: Grid) -> float:
    """Integral of h over the domain; periodic trapezoid rule is dx * sum."""
    return float(grid.dx * np.sum(state.h))
