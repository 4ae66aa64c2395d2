"""Feedback-control workbench for falling liquid films.

Simulates the nonlinear weighted-residual thin-film model on a periodic
domain and synthesises stabilising controllers under restricted
observations: full-state LQR, static output feedback, and a reduced-order
Luenberger observer.
"""

from .core import (
    NUSSELT_FLUX,
    ActuatorBank,
    FilmState,
    Grid,
    ObserverBank,
    PhysicalParams,
)
from .linsys import ControllabilityError, LinearSystem, linearize
from .matreq import (
    SofConvergenceError,
    SofStartError,
    StabilityError,
    SynthesisError,
    lqr_gain,
    solve_care,
    solve_lyapunov,
    solve_sof,
)
from .sim import (
    PerturbationSpec,
    RunConfig,
    TrajectoryRecord,
    run,
    synthesise,
)
from .synth import (
    Controller,
    FullStateController,
    LuenbergerController,
    OutputFeedbackController,
    closed_loop_matrix,
    controller_from_json,
    controller_to_json,
    synth_full_state,
    synth_luenberger,
    synth_output_feedback,
)

__version__ = "0.1.0"

__all__ = [
    "NUSSELT_FLUX",
    "ActuatorBank",
    "FilmState",
    "Grid",
    "ObserverBank",
    "PhysicalParams",
    "ControllabilityError",
    "LinearSystem",
    "linearize",
    "SofConvergenceError",
    "SofStartError",
    "StabilityError",
    "SynthesisError",
    "lqr_gain",
    "solve_care",
    "solve_lyapunov",
    "solve_sof",
    "PerturbationSpec",
    "RunConfig",
    "TrajectoryRecord",
    "run",
    "synthesise",
    "Controller",
    "FullStateController",
    "LuenbergerController",
    "OutputFeedbackController",
    "closed_loop_matrix",
    "controller_from_json",
    "controller_to_json",
    "synth_full_state",
    "synth_luenberger",
    "synth_output_feedback",
    "__version__",
]
