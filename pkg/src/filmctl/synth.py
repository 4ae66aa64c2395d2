"""Controller synthesis: full-state LQR, static output feedback, Luenberger.

All design happens on the resolved subspace of the linear system (the
sawtooth direction is neutral and unforceable, see linsys), and gains are
prolonged back to grid coordinates where the control law needs them.

Controllers serialise to JSON documents that round-trip exactly: matrix
entries are written with full shortest-round-trip precision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np

from .linsys import ControllabilityError, LinearSystem, ModalDecomposition, modal_decompose_groups
from .matreq import (
    SofStartError,
    SynthesisError,
    abscissa,
    is_hurwitz,
    lqr_gain,
    solve_sof,
)

__all__ = [
    "FullStateController",
    "OutputFeedbackController",
    "LuenbergerController",
    "Controller",
    "synth_full_state",
    "synth_output_feedback",
    "synth_luenberger",
    "closed_loop_matrix",
    "controller_to_json",
    "controller_from_json",
]


@dataclass
class FullStateController:
    """eta = K xi with xi the full (h-1, q-2/3) deviation vector."""

    k: np.ndarray
    metadata: dict[str, Any] = field(default_factory=dict)

    variant = "full_state"

    def amplitudes(self, xi: np.ndarray) -> np.ndarray:
        return self.k @ xi


@dataclass
class OutputFeedbackController:
    """eta = K zeta with zeta the P sampled interface deviations."""

    k: np.ndarray
    metadata: dict[str, Any] = field(default_factory=dict)

    variant = "output_feedback"

    def amplitudes(self, zeta: np.ndarray) -> np.ndarray:
        return self.k @ zeta


@dataclass
class LuenbergerController:
    """eta = K~ z, with z driven by z' = a_cl z + L zeta.

    a_cl folds the innovation term in: a_cl = A~u + B~u K~ - L C~.  The
    estimator state z mutates during simulation; everything else is fixed at
    synthesis time.
    """

    k_tilde: np.ndarray
    l: np.ndarray
    a_cl: np.ndarray
    sampling: np.ndarray
    z: np.ndarray
    prolong: np.ndarray
    metadata: dict[str, Any] = field(default_factory=dict)

    variant = "luenberger"

    def amplitudes(self) -> np.ndarray:
        return self.k_tilde @ self.z

    def reset(self) -> None:
        self.z = np.zeros_like(self.z)

    def estimated_interface(self, n_nodes: int) -> np.ndarray:
        """Interface deviation field implied by the current estimate."""
        return (self.prolong @ self.z)[:n_nodes]


Controller = Union[FullStateController, OutputFeedbackController, LuenbergerController]


def synth_full_state(sys: LinearSystem) -> FullStateController:
    """LQR on the resolved subspace, gain prolonged to grid coordinates."""
    e = sys.resolved_basis
    k_res = lqr_gain(sys.a_res, sys.b_res, sys.u_res, sys.v)
    k = k_res @ e.T
    cl = sys.a_res + sys.b_res @ k_res
    return FullStateController(
        k=k,
        metadata={
            "strategy": "full_state",
            "abscissa": abscissa(cl),
            "m": sys.actuators.m,
            "p": sys.observers.p,
        },
    )


def synth_output_feedback(
    sys: LinearSystem,
    tol: float = 1e-8,
    max_iter: int = 500,
) -> OutputFeedbackController:
    """Static output feedback via the SOF iteration.

    The default initial gain (LQR projected onto the observation structure)
    is frequently not stabilising when observations are sparse; in that case
    a second start is attempted from the modal design K~ pinv(C~), which
    feeds the slow modes back through the available sensors.  Failures
    propagate with diagnostics.
    """
    a, b, c, u, v = sys.a_res, sys.b_res, sys.c_res, sys.u_res, sys.v
    init_used = "projection"
    try:
        sol = solve_sof(a, b, c, u, v, tol=tol, max_iter=max_iter)
    except SofStartError:
        init_used = "modal"
        try:
            md = modal_decompose_groups(sys, sys.actuators.m)
            k_tilde = lqr_gain(md.a_u, md.b_u, md.u_u, sys.v)
        except (ControllabilityError, SynthesisError) as exc:
            raise SofStartError(
                f"LQR projection not stabilising and no modal fallback start exists: {exc}"
            ) from exc
        k0 = k_tilde @ np.linalg.pinv(md.sampling)
        if not is_hurwitz(a + b @ k0 @ c):
            raise SofStartError(
                "neither the LQR projection nor the modal static gain is stabilising"
            ) from None
        sol = solve_sof(a, b, c, u, v, k0=k0, tol=tol, max_iter=max_iter)
    cl = a + b @ sol.k @ c
    return OutputFeedbackController(
        k=sol.k,
        metadata={
            "strategy": "output_feedback",
            "abscissa": abscissa(cl),
            "iterations": sol.iterations,
            "residual": sol.residual,
            "cost": float(np.trace(sol.q)),
            "init": init_used,
            "m": sys.actuators.m,
            "p": sys.observers.p,
        },
    )


def _pbh_report(modes: ModalDecomposition, sys: LinearSystem) -> None:
    """Name retained modes invisible to the actuators or the sensors."""
    bad_ctrl, bad_obs = [], []
    col = 0
    for g in modes.retained:
        rows = modes.restrict[col : col + g.dim, :]
        cols = modes.prolong[:, col : col + g.dim]
        if np.linalg.norm(rows @ sys.b) < 1e-12:
            bad_ctrl.append(g.n)
        if np.linalg.norm(sys.c @ cols) < 1e-12:
            bad_obs.append(g.n)
        col += g.dim
    if bad_ctrl:
        raise SynthesisError(f"retained modes at wavenumbers {bad_ctrl} are uncontrollable")
    if bad_obs:
        raise SynthesisError(f"retained modes at wavenumbers {bad_obs} are unobservable")


def synth_luenberger(
    sys: LinearSystem,
    modes: ModalDecomposition | None = None,
    observer_weights: tuple[float, float] = (1.0, 1.0),
) -> LuenbergerController:
    """Reduced-order observer controller on the retained modal subspace.

    The gain K~ is LQR on the reduced pair; the observer gain L comes from
    LQR on the transposed pair (eigenvalues are invariant under
    transposition), with identity weights scaled by observer_weights
    (state, output).  The estimator starts from z = 0.
    """
    if modes is None:
        modes = modal_decompose_groups(sys, sys.actuators.m)
    _pbh_report(modes, sys)
    a_u, b_u, c_u = modes.a_u, modes.b_u, modes.sampling
    m_z = modes.m_z

    k_tilde = lqr_gain(a_u, b_u, modes.u_u, sys.v)
    w_state, w_out = observer_weights
    k_obs = lqr_gain(a_u.T, c_u.T, w_state * np.eye(m_z), w_out * np.eye(sys.observers.p))
    l = -k_obs.T

    a_design = a_u + b_u @ k_tilde
    a_err = a_u - l @ c_u
    if not is_hurwitz(a_design):
        raise SynthesisError(f"reduced closed loop not Hurwitz (abscissa {abscissa(a_design):.3e})")
    if not is_hurwitz(a_err):
        raise SynthesisError(f"observer error dynamics not Hurwitz (abscissa {abscissa(a_err):.3e})")

    return LuenbergerController(
        k_tilde=k_tilde,
        l=l,
        a_cl=a_design - l @ c_u,
        sampling=c_u,
        z=np.zeros(m_z),
        prolong=modes.prolong,
        metadata={
            "strategy": "luenberger",
            "m_z": m_z,
            "adjusted": modes.adjusted,
            "design_abscissa": abscissa(a_design),
            "observer_abscissa": abscissa(a_err),
            "m": sys.actuators.m,
            "p": sys.observers.p,
        },
    )


def closed_loop_matrix(sys: LinearSystem, ctrl: Controller) -> np.ndarray:
    """Closed-loop linear operator on the resolved subspace.

    For the Luenberger variant this is the coupled plant-plus-estimator
    matrix; for the static variants it is A + B K (C) restricted to the
    resolved coordinates.
    """
    e = sys.resolved_basis
    if isinstance(ctrl, FullStateController):
        return sys.a_res + sys.b_res @ (ctrl.k @ e)
    if isinstance(ctrl, OutputFeedbackController):
        return sys.a_res + sys.b_res @ ctrl.k @ sys.c_res
    if isinstance(ctrl, LuenbergerController):
        top = np.hstack([sys.a_res, sys.b_res @ ctrl.k_tilde])
        bot = np.hstack([ctrl.l @ sys.c_res, ctrl.a_cl])
        return np.vstack([top, bot])
    raise TypeError(f"unknown controller type {type(ctrl)!r}")


def _encode(arr: np.ndarray) -> dict[str, Any]:
    return {"shape": list(arr.shape), "data": np.asarray(arr, dtype=float).ravel().tolist()}


def _decode(doc: dict[str, Any]) -> np.ndarray:
    return np.array(doc["data"], dtype=float).reshape(doc["shape"])


def controller_to_json(ctrl: Controller) -> str:
    doc: dict[str, Any] = {"variant": ctrl.variant, "metadata": ctrl.metadata}
    if isinstance(ctrl, (FullStateController, OutputFeedbackController)):
        doc["k"] = _encode(ctrl.k)
    else:
        doc["k_tilde"] = _encode(ctrl.k_tilde)
        doc["l"] = _encode(ctrl.l)
        doc["a_cl"] = _encode(ctrl.a_cl)
        doc["sampling"] = _encode(ctrl.sampling)
        doc["z"] = _encode(ctrl.z)
        doc["prolong"] = _encode(ctrl.prolong)
    return json.dumps(doc, indent=1)


def controller_from_json(text: str) -> Controller:
    doc = json.loads(text)
    variant = doc["variant"]
    meta = doc.get("metadata", {})
    if variant == "full_state":
        return FullStateController(k=_decode(doc["k"]), metadata=meta)
    if variant == "output_feedback":
        return OutputFeedbackController(k=_decode(doc["k"]), metadata=meta)
    if variant == "luenberger":
        return LuenbergerController(
            k_tilde=_decode(doc["k_tilde"]),
            l=_decode(doc["l"]),
            a_cl=_decode(doc["a_cl"]),
            sampling=_decode(doc["sampling"]),
            z=_decode(doc["z"]).ravel(),
            prolong=_decode(doc["prolong"]),
            metadata=meta,
        )
    raise ValueError(f"unknown controller variant {variant!r}")
