"""Matrix-equation solvers: Lyapunov, CARE, LQR, and static output feedback.

The Lyapunov and Riccati kernels wrap scipy's Schur-based solvers and verify
the returned solution by substitution; every caller therefore gets a
residual-checked answer or an exception, never a silently wrong matrix.

The static output feedback (SOF) problem is solved by a damped fixed-point
iteration on the three stationarity conditions

    cond1:  0 = A_c^T Q + Q A_c + U + C^T K^T V K C
    cond2:  0 = A_c S + S A_c^T + I
    cond3:  0 = V K C S C^T + B^T Q S C^T          (A_c = A + B K C)

where cond3's left side is half the gradient of the cost trace(Q) with
respect to K.  Each sweep solves cond1 and cond2 at the current gain, forms
the candidate K* = -V^{-1} B^T Q S C^T (C S C^T)^{-1}, and takes the damped
step K + gamma (K* - K).  Gamma is halved until the step both keeps the loop
Hurwitz and decreases the cost; once cost decreases fall below solver noise
the step is instead accepted on a decrease of the cond3 residual, which is
what lets the iteration reach tight tolerances near the optimum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "SofSolution",
    "StabilityError",
    "SynthesisError",
    "SofStartError",
    "SofConvergenceError",
    "abscissa",
    "is_hurwitz",
    "solve_lyapunov",
    "solve_care",
    "lqr_gain",
    "solve_sof",
]

HURWITZ_MARGIN = -1e-10


class StabilityError(RuntimeError):
    """A matrix required to be Hurwitz is not."""


class SynthesisError(RuntimeError):
    """A synthesis step could not produce a validated solution."""


class SofStartError(SynthesisError):
    """No stabilising initial output-feedback gain is available."""


class SofConvergenceError(SynthesisError):
    """SOF iteration ran out of iterations or damping without converging."""

    def __init__(self, message: str, solution: "SofSolution"):
        super().__init__(message)
        self.solution = solution


def abscissa(m: np.ndarray) -> float:
    """Spectral abscissa: largest real part over the eigenvalues."""
    return float(np.max(np.linalg.eigvals(m).real))


def is_hurwitz(m: np.ndarray, margin: float = HURWITZ_MARGIN) -> bool:
    return abscissa(m) < margin


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def solve_lyapunov(a: np.ndarray, w: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Solve a s + s a^T + w = 0 for symmetric s, with residual validation."""
    w = np.asarray(w, dtype=float)
    if not np.allclose(w, w.T, atol=1e-12 * max(1.0, np.abs(w).max())):
        raise ValueError("w must be symmetric")
    if not is_hurwitz(a):
        raise StabilityError(f"lyapunov coefficient matrix not Hurwitz (abscissa {abscissa(a):.3e})")
    s = _sym(scipy.linalg.solve_continuous_lyapunov(a, -w))
    wnorm = np.linalg.norm(w)
    resid = np.linalg.norm(a @ s + s @ a.T + w)
    if resid > tol * max(wnorm, 1e-300):
        raise ArithmeticError(f"lyapunov residual {resid:.3e} exceeds {tol:.1e} * ||w|| = {tol * wnorm:.3e}")
    return s


def solve_care(a, b, u, v, tol: float = 1e-9) -> np.ndarray:
    """Stabilising solution of a^T q + q a - q b v^{-1} b^T q + u = 0."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    unorm = np.linalg.norm(u)
    if unorm == 0.0:
        # zero state cost: q = 0 solves the equation and is stabilising iff a is
        if not is_hurwitz(a):
            raise SynthesisError("zero state cost with unstable dynamics has no stabilising solution")
        return np.zeros_like(a)
    try:
        q = _sym(scipy.linalg.solve_continuous_are(a, b, u, v))
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError) as exc:
        raise SynthesisError(f"Riccati solver failed: {exc}") from exc
    kq = np.linalg.solve(v, b.T @ q)
    closed = a - b @ kq
    if not is_hurwitz(closed):
        raise SynthesisError(
            f"Riccati closed loop not Hurwitz (abscissa {abscissa(closed):.3e}); pair likely not stabilisable"
        )
    qb = q @ b
    resid = np.linalg.norm(a.T @ q + q @ a - qb @ kq + u)
    # gate the residual against the magnitudes of the summed terms, not ||u||
    # alone: the quadratic term dwarfs u whenever ||q|| is large and the Schur
    # solver's forward error scales with those magnitudes (worst observed on
    # random dense pairs is ~4e-11 of the term scale, well under tol)
    scale = max(
        unorm,
        (1.0 + np.linalg.norm(a)) * (1.0 + np.linalg.norm(q)) + np.linalg.norm(qb) * np.linalg.norm(kq),
    )
    if resid > tol * scale:
        raise ArithmeticError(f"riccati residual {resid:.3e} exceeds {tol:.1e} * term scale = {tol * scale:.3e}")
    return q


def lqr_gain(a, b, u, v, tol: float = 1e-9) -> np.ndarray:
    """Full-state gain k = -v^{-1} b^T q; closed loop xi' = (a + b k) xi."""
    q = solve_care(a, b, u, v, tol=tol)
    return -np.linalg.solve(np.asarray(v, dtype=float), np.asarray(b, dtype=float).T @ q)


@dataclass(frozen=True)
class SofSolution:
    """Stationary output-feedback gain with its certificate matrices."""

    k: np.ndarray
    q: np.ndarray
    s: np.ndarray
    residual: float
    iterations: int
    converged: bool


def _sof_certificates(a, b, c, u, v, k):
    """Q, S, cost at a stabilising gain; None if the loop is not Hurwitz.

    cond1 and cond2 share the closed-loop matrix up to transposition, so one
    Schur factorisation serves both Sylvester solves.
    """
    acl = a + b @ k @ c
    t, z = scipy.linalg.schur(acl, output="real")
    if np.max(t.diagonal().real) >= HURWITZ_MARGIN:
        # quasi-triangular: 2x2 bumps share the real part on the diagonal,
        # so the diagonal carries every eigenvalue real part exactly
        return None
    trsyl = scipy.linalg.get_lapack_funcs(("trsyl",), (t,))[0]
    w1 = u + c.T @ k.T @ v @ k @ c
    qt, scale, info = trsyl(t, t, -(z.T @ w1 @ z), trana="T", tranb="N")
    if info < 0:
        raise ArithmeticError(f"trsyl failed with info={info}")
    q = _sym(z @ (qt / scale) @ z.T)
    st, scale, info = trsyl(t, t, -np.eye(a.shape[0]), trana="N", tranb="T")
    if info < 0:
        raise ArithmeticError(f"trsyl failed with info={info}")
    s = _sym(z @ (st / scale) @ z.T)
    return q, s, float(np.trace(q))


def _cond3(b, c, v, k, q, s):
    csct = c @ s @ c.T
    bqsc = b.T @ q @ s @ c.T
    grad = v @ k @ csct + bqsc
    resid = float(np.linalg.norm(grad) / max(1.0, np.linalg.norm(bqsc)))
    return grad, resid, csct, bqsc


def solve_sof(
    a,
    b,
    c,
    u,
    v,
    k0: np.ndarray | None = None,
    tol: float = 1e-8,
    max_iter: int = 500,
    gamma_min: float = 1e-8,
) -> SofSolution:
    """Damped fixed-point iteration for the SOF stationarity conditions.

    Initialisation when k0 is absent projects the full-state LQR gain onto
    the observation structure (least squares in ||K0 C - K_lqr||_F) and
    fails to start when that projection is not stabilising.  Callers with a
    better starting point pass it as k0.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)

    if k0 is None:
        klqr = lqr_gain(a, b, u, v)
        k = klqr @ np.linalg.pinv(c)
        if not is_hurwitz(a + b @ k @ c):
            raise SofStartError(
                f"LQR projection onto the observation structure is not stabilising "
                f"(abscissa {abscissa(a + b @ k @ c):.3e})"
            )
    else:
        k = np.array(k0, dtype=float)
        if not is_hurwitz(a + b @ k @ c):
            raise SofStartError(f"supplied initial gain not stabilising (abscissa {abscissa(a + b @ k @ c):.3e})")

    certs = _sof_certificates(a, b, c, u, v, k)
    q, s, cost = certs
    grad, resid, csct, bqsc = _cond3(b, c, v, k, q, s)

    def _finish(k, q, s, resid, it):
        # substitute the certificates back into cond1/cond2 before declaring victory
        acl = a + b @ k @ c
        w1 = u + c.T @ k.T @ v @ k @ c
        r1 = np.linalg.norm(acl.T @ q + q @ acl + w1) / max(1.0, np.linalg.norm(w1))
        r2 = np.linalg.norm(acl @ s + s @ acl.T + np.eye(a.shape[0])) / np.sqrt(a.shape[0])
        if max(r1, r2) > 1e-8:
            raise ArithmeticError(f"certificate residuals too large (cond1 {r1:.2e}, cond2 {r2:.2e})")
        return SofSolution(k=k, q=q, s=s, residual=resid, iterations=it, converged=True)

    for it in range(max_iter):
        if resid < tol:
            return _finish(k, q, s, resid, it)
        try:
            kstar = -np.linalg.solve(v, bqsc) @ np.linalg.inv(csct)
        except np.linalg.LinAlgError as exc:
            raise SynthesisError("C S C^T singular: observation structure loses rank") from exc
        direction = kstar - k

        # scan gamma from 1 downward and take the largest acceptable step
        accepted = None
        gamma = 1.0
        while gamma >= gamma_min:
            cand = k + gamma * direction
            cand_certs = _sof_certificates(a, b, c, u, v, cand)
            if cand_certs is not None:
                cq, cs, ccost = cand_certs
                if ccost < cost:
                    accepted = (cand, cq, cs, ccost)
                    break
            gamma *= 0.5
        if accepted is None:
            # endgame: cost changes are below solver noise; accept on
            # residual decrease instead so the gradient can keep shrinking
            gamma = 1.0
            while gamma >= gamma_min:
                cand = k + gamma * direction
                cand_certs = _sof_certificates(a, b, c, u, v, cand)
                if cand_certs is not None:
                    cq, cs, ccost = cand_certs
                    _, cresid, _, _ = _cond3(b, c, v, cand, cq, cs)
                    if cresid < resid:
                        accepted = (cand, cq, cs, ccost)
                        break
                gamma *= 0.5
        if accepted is None:
            sol = SofSolution(k=k, q=q, s=s, residual=resid, iterations=it, converged=False)
            raise SofConvergenceError(
                f"damping underflow at iteration {it} (residual {resid:.3e}, tol {tol:.1e})", sol
            )
        k, q, s, cost = accepted
        grad, resid, csct, bqsc = _cond3(b, c, v, k, q, s)

    if resid < tol:
        return _finish(k, q, s, resid, max_iter)
    sol = SofSolution(k=k, q=q, s=s, residual=resid, iterations=max_iter, converged=False)
    raise SofConvergenceError(f"iteration cap {max_iter} reached (residual {resid:.3e})", sol)
