"""Deterministic flows and long-time projections onto the invariant manifold.

Two flows drive everything here: the nonlinear total-population flow
v' = F(v) v and, along it, the linear flow w' = F(v_t) w. For a start in the
basin of the equilibrium h_tilde, the linear flow converges to a multiple of
h_tilde; transporting each column of a composition matrix U0 along the flow
frozen at v0 = S(U0) yields the projected fractions

    pi^k(U0) = lim_t w_t(U0^k) = theta^k(U0) h_tilde,
    theta^k(U0) = <H(S(U0)), U0^k>,

where H(v0) is the state-dependent reproductive-value map with H(h_tilde)
equal to the left null vector h and <H(v0), v0> = 1 identically. theta is
extracted as <pi, h> rather than by componentwise division by h_tilde: the
normalization <h, h_tilde> = 1 makes that exact, and division amplifies
error wherever h_tilde is small.

The finite-difference reports at the bottom verify, numerically and
independently of the algebra above, the first- and second-derivative
identities of theta that make the rescaled fraction weights a martingale
with Wright-Fisher covariance: the gradient is orthogonal to the drift
direction, the fraction-noise contraction of the Hessian vanishes on the
manifold, and the gradient contraction equals Sigma^2 times the
Wright-Fisher covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from . import equilibrium as eq
from .errors import BasinError, ConsistencyError
from .model import DecomposedModel

DEFAULT_RTOL = 1e-10
DEFAULT_ATOL = 1e-12
DEFAULT_CONV_TOL = 1e-11
PROBE_RTOL = 1e-12
PROBE_ATOL = 1e-14


@dataclass
class FlowResult:
    times: np.ndarray
    states: np.ndarray  # (T, E) for v or w along the grid
    converged: bool
    limit: Optional[np.ndarray] = None
    base_states: Optional[np.ndarray] = None  # v path for linear flows


@dataclass
class ProjectionResult:
    pi: np.ndarray  # (E, K), column k = theta^k h_tilde
    theta: np.ndarray  # (K,)
    H_of_v: np.ndarray  # (E,), reproductive values at S(U0)
    h_tilde: np.ndarray
    h: np.ndarray
    t_converged: float


def _drift_fn(model: DecomposedModel) -> Callable[[np.ndarray], np.ndarray]:
    return lambda v: np.asarray(model.mean_matrix(v), dtype=float) @ v


def _integrate_windows(
    rhs,
    y0: np.ndarray,
    residual,
    conv_tol: float,
    t_max: float,
    rtol: float,
    atol: float,
    window: float = 1.0,
    method: str = "RK45",
):
    """Integrate y' = rhs(y) in unit windows until the residual stays small.

    Convergence requires the residual below ``conv_tol`` at two consecutive
    window boundaries, i.e. sustained over one unit of time.
    """
    times = [0.0]
    states = [np.asarray(y0, dtype=float)]
    t = 0.0
    y = states[0]
    below_prev = residual(y) < conv_tol
    converged = False
    while t < t_max - 1e-12:
        t_next = min(t + window, t_max)
        sol = solve_ivp(
            lambda _t, yy: rhs(yy),
            (t, t_next),
            y,
            method=method,
            rtol=rtol,
            atol=atol,
            dense_output=False,
        )
        if not sol.success:
            raise BasinError(f"integration failed at t={t:.3g}: {sol.message}")
        times.extend(sol.t[1:].tolist())
        states.extend(sol.y[:, 1:].T)
        t, y = float(sol.t[-1]), sol.y[:, -1]
        below = residual(y) < conv_tol
        if below and below_prev:
            converged = True
            break
        below_prev = below
    return np.asarray(times), np.asarray(states), converged, y


def integrate_total_flow(
    model: DecomposedModel,
    v0: np.ndarray,
    t_end: Optional[float] = None,
    conv_tol: float = DEFAULT_CONV_TOL,
    t_max: float = 1000.0,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
) -> FlowResult:
    """Solve v' = F(v) v from v0.

    With ``t_end`` the horizon is fixed; otherwise integration runs until
    ||F(v)v||_inf < conv_tol (1 + ||v||_inf) is sustained over one unit of
    time, capped at ``t_max``.
    """
    v0 = np.asarray(v0, dtype=float)
    f = _drift_fn(model)

    def residual(v):
        return float(np.max(np.abs(f(v))) / (1.0 + np.max(np.abs(v))))

    if t_end is not None:
        sol = solve_ivp(lambda _t, v: f(v), (0.0, t_end), v0, method="RK45", rtol=rtol, atol=atol)
        if not sol.success:
            raise BasinError(f"integration failed: {sol.message}")
        v_last = sol.y[:, -1]
        conv = residual(v_last) < conv_tol
        return FlowResult(sol.t, sol.y.T, conv, v_last if conv else None)

    times, states, converged, y = _integrate_windows(
        f, v0, residual, conv_tol, t_max, rtol, atol
    )
    return FlowResult(times, states, converged, y if converged else None)


def integrate_linear_flow(
    model: DecomposedModel,
    v0: np.ndarray,
    w0: np.ndarray,
    t_end: Optional[float] = None,
    conv_tol: float = DEFAULT_CONV_TOL,
    t_max: float = 1000.0,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
) -> FlowResult:
    """Jointly solve v' = F(v) v and w' = F(v) w; linear in w0."""
    v0 = np.asarray(v0, dtype=float)
    w0 = np.asarray(w0, dtype=float)
    E = v0.size

    def rhs(y):
        F = np.asarray(model.mean_matrix(y[:E]), dtype=float)
        return np.concatenate([F @ y[:E], F @ y[E:]])

    def residual(y):
        d = rhs(y)
        rv = np.max(np.abs(d[:E])) / (1.0 + np.max(np.abs(y[:E])))
        rw = np.max(np.abs(d[E:])) / (1.0 + np.max(np.abs(y[E:])))
        return float(max(rv, rw))

    y0 = np.concatenate([v0, w0])
    if t_end is not None:
        sol = solve_ivp(lambda _t, y: rhs(y), (0.0, t_end), y0, method="RK45", rtol=rtol, atol=atol)
        if not sol.success:
            raise BasinError(f"integration failed: {sol.message}")
        conv = residual(sol.y[:, -1]) < conv_tol
        return FlowResult(
            sol.t, sol.y[E:].T, conv, sol.y[E:, -1] if conv else None, base_states=sol.y[:E].T
        )

    times, states, converged, y = _integrate_windows(rhs, y0, residual, conv_tol, t_max, rtol, atol)
    return FlowResult(
        times,
        states[:, E:],
        converged,
        y[E:] if converged else None,
        base_states=states[:, :E],
    )


def _resolve_equilibrium(model, v_hint, h_tilde, h):
    """Fill in (h_tilde, h), polishing from a flow limit when not supplied."""
    if h_tilde is None:
        flow = integrate_total_flow(model, v_hint)
        if not flow.converged:
            raise BasinError(f"total flow did not converge from {v_hint}")
        h_tilde = eq.find_fixed_point(model, np.maximum(flow.limit, 1e-12))
    if h is None:
        h = eq.left_null_vector(model, h_tilde)
    return np.asarray(h_tilde, dtype=float), np.asarray(h, dtype=float)


def _decay_rates(model: DecomposedModel, h_tilde: np.ndarray):
    """(gamma_flow, gamma_linear): slowest decay of the flow and of e^{tF(h)}."""
    eig_j = eq.stability_spectrum(model, h_tilde)
    gamma_flow = max(-float(eig_j[0].real), 1e-12)
    F = np.asarray(model.mean_matrix(h_tilde), dtype=float)
    eig_f = np.sort(np.linalg.eigvals(F).real)
    # Drop the Perron eigenvalue at 0; the rest governs e^{tF} - P.
    gamma_linear = max(-float(eig_f[-2]), 1e-12) if eig_f.size > 1 else np.inf
    return gamma_flow, gamma_linear


def katzenberger_projection(
    model: DecomposedModel,
    U0: np.ndarray,
    h_tilde: Optional[np.ndarray] = None,
    h: Optional[np.ndarray] = None,
    conv_tol: float = DEFAULT_CONV_TOL,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    t_max: Optional[float] = None,
    assert_tol: float = 1e-8,
) -> ProjectionResult:
    """Long-time limit of the fractions transported along the frozen flow.

    Integrates v' = F(v)v jointly with one linear flow per column of U0;
    pi^k is the limit of column k, theta^k = <pi^k, h>. Asserts that each
    pi^k is colinear to h_tilde and that the theta sum to one.
    """
    U0 = np.atleast_2d(np.asarray(U0, dtype=float))
    if U0.ndim != 2:
        raise ValueError("U0 must be an (E, K) array")
    E, K = U0.shape
    v0 = U0.sum(axis=1)
    h_tilde, h = _resolve_equilibrium(model, v0, h_tilde, h)
    gamma_flow, _ = _decay_rates(model, h_tilde)
    if t_max is None:
        t_max = 50.0 / gamma_flow

    def rhs(y):
        Y = y.reshape(K + 1, E)
        F = np.asarray(model.mean_matrix(Y[0]), dtype=float)
        return (Y @ F.T).ravel()

    def residual(y):
        Y = y.reshape(K + 1, E)
        D = Y @ np.asarray(model.mean_matrix(Y[0]), dtype=float).T
        return float(np.max(np.max(np.abs(D), axis=1) / (1.0 + np.max(np.abs(Y), axis=1))))

    y0 = np.concatenate([v0, U0.T.ravel()])
    times, _, converged, y = _integrate_windows(rhs, y0, residual, conv_tol, t_max, rtol, atol)
    if not converged:
        raise BasinError(
            f"total flow did not converge from S(U0)={v0} within t_max={t_max:.3g}"
        )
    W = y.reshape(K + 1, E)
    pi = W[1:].T  # (E, K)
    theta = h @ pi

    colin = np.max(
        [np.max(np.abs(pi[:, k] - theta[k] * h_tilde)) / (1.0 + np.max(np.abs(pi[:, k]))) for k in range(K)]
    )
    if colin > assert_tol:
        raise ConsistencyError(f"projected fractions not colinear to h_tilde: deviation {colin:.3e}")
    if abs(theta.sum() - 1.0) > assert_tol:
        raise ConsistencyError(f"theta weights sum to {theta.sum()!r}, expected 1")
    if np.all(U0 >= 0) and np.min(theta) < -1e-9:
        raise ConsistencyError(f"negative theta weight {theta.min():.3e} for nonnegative U0")

    H = reproductive_value_map(
        model, v0, h_tilde=h_tilde, h=h, conv_tol=conv_tol, rtol=rtol, atol=atol, t_max=t_max
    )
    return ProjectionResult(pi=pi, theta=theta, H_of_v=H, h_tilde=h_tilde, h=h, t_converged=float(times[-1]))


def reproductive_value_map(
    model: DecomposedModel,
    v0: np.ndarray,
    h_tilde: Optional[np.ndarray] = None,
    h: Optional[np.ndarray] = None,
    conv_tol: float = DEFAULT_CONV_TOL,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    t_max: Optional[float] = None,
    assert_tol: float = 1e-8,
) -> np.ndarray:
    """H(v0), assembled from the E linear flows sharing one base trajectory.

    The columns e_x are transported jointly as the fundamental matrix
    W' = F(v_t) W, W_0 = I; then H(v0) = W_inf^T h, since the limit of the
    linear flow from w0 is <H(v0), w0> h_tilde. Asserts <H(v0), v0> = 1.
    """
    v0 = np.asarray(v0, dtype=float)
    E = v0.size
    h_tilde, h = _resolve_equilibrium(model, v0, h_tilde, h)
    gamma_flow, _ = _decay_rates(model, h_tilde)
    if t_max is None:
        t_max = 50.0 / gamma_flow

    def rhs(y):
        v = y[:E]
        W = y[E:].reshape(E, E)
        F = np.asarray(model.mean_matrix(v), dtype=float)
        return np.concatenate([F @ v, (F @ W).ravel()])

    def residual(y):
        d = rhs(y)
        rv = np.max(np.abs(d[:E])) / (1.0 + np.max(np.abs(y[:E])))
        rw = np.max(np.abs(d[E:])) / (1.0 + np.max(np.abs(y[E:])))
        return float(max(rv, rw))

    y0 = np.concatenate([v0, np.eye(E).ravel()])
    _, _, converged, y = _integrate_windows(rhs, y0, residual, conv_tol, t_max, rtol, atol)
    if not converged:
        raise BasinError(f"total flow did not converge from {v0} within t_max={t_max:.3g}")
    W = y[E:].reshape(E, E)
    H = W.T @ h
    if abs(H @ v0 - 1.0) > assert_tol:
        raise ConsistencyError(f"<H(v0), v0> = {H @ v0!r}, expected 1")
    return H


def pf_projection(u: np.ndarray, h: np.ndarray, h_tilde: np.ndarray) -> np.ndarray:
    """Linearized long-term projection: column k maps to <u^k, h> h_tilde."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    return np.outer(h_tilde, h @ u)


def integrate_composition_flow(
    model: DecomposedModel,
    U0: np.ndarray,
    t_end: float,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
) -> np.ndarray:
    """Coupled deterministic fraction system U' = F(S(U)) U up to t_end."""
    U0 = np.atleast_2d(np.asarray(U0, dtype=float))
    E, K = U0.shape

    def rhs(_t, y):
        U = y.reshape(E, K)
        F = np.asarray(model.mean_matrix(U.sum(axis=1)), dtype=float)
        return (F @ U).ravel()

    sol = solve_ivp(rhs, (0.0, t_end), U0.ravel(), method="RK45", rtol=rtol, atol=atol)
    if not sol.success:
        raise BasinError(f"integration failed: {sol.message}")
    return sol.y[:, -1].reshape(E, K)


def theta_integral_representation(
    model: DecomposedModel,
    v0: np.ndarray,
    w0: np.ndarray,
    h_tilde: Optional[np.ndarray] = None,
    h: Optional[np.ndarray] = None,
    conv_tol: float = DEFAULT_CONV_TOL,
    rtol: float = DEFAULT_RTOL,
    atol: float = DEFAULT_ATOL,
    t_max: Optional[float] = None,
) -> float:
    """theta(v0, w0) = <w0 + int_0^inf (F(v_s) - F(h_tilde)) w_s ds, h>.

    The integral is accumulated as an extra ODE state along the joint
    (v, w) solve and truncated at the flow's convergence time.
    """
    v0 = np.asarray(v0, dtype=float)
    w0 = np.asarray(w0, dtype=float)
    E = v0.size
    h_tilde, h = _resolve_equilibrium(model, v0, h_tilde, h)
    F_eq = np.asarray(model.mean_matrix(h_tilde), dtype=float)
    gamma_flow, _ = _decay_rates(model, h_tilde)
    if t_max is None:
        t_max = 50.0 / gamma_flow

    def rhs(y):
        v, w = y[:E], y[E : 2 * E]
        F = np.asarray(model.mean_matrix(v), dtype=float)
        return np.concatenate([F @ v, F @ w, (F - F_eq) @ w])

    def residual(y):
        v, w = y[:E], y[E : 2 * E]
        F = np.asarray(model.mean_matrix(v), dtype=float)
        rv = np.max(np.abs(F @ v)) / (1.0 + np.max(np.abs(v)))
        rq = np.max(np.abs((F - F_eq) @ w))
        return float(max(rv, rq))

    y0 = np.concatenate([v0, w0, np.zeros(E)])
    _, _, converged, y = _integrate_windows(rhs, y0, residual, conv_tol, t_max, rtol, atol)
    if not converged:
        raise BasinError(f"total flow did not converge from {v0}")
    q = y[2 * E :]
    return float((w0 + q) @ h)


# ----------------------------------------------------------------------
# Finite-difference identity checks
# ----------------------------------------------------------------------


def _theta_probe_batch(
    model: DecomposedModel,
    probes: np.ndarray,
    h_tilde: np.ndarray,
    h: np.ndarray,
    gamma: float,
    conv_target: float = 1e-13,
    rtol: float = PROBE_RTOL,
    atol: float = PROBE_ATOL,
    t_cap: Optional[float] = None,
) -> np.ndarray:
    """theta weights for a batch of composition matrices, on one shared grid.

    All probes are stacked into a single ODE system integrated over a common
    fixed horizon: sharing the adaptive grid correlates the solver error
    across probes, which is what makes finite differences of theta clean.
    The horizon covers the decay of the largest initial deviation down to
    ``conv_target``.
    """
    probes = np.asarray(probes, dtype=float)
    P, E, K = probes.shape
    v0 = probes.sum(axis=2)  # (P, E)
    dev = max(float(np.max(np.abs(v0 - h_tilde[np.newaxis]))), 1e-8)
    t_end = (np.log(dev / conv_target) / gamma) * 1.15 + 5.0
    if t_cap is not None:
        t_end = min(t_end, t_cap)

    batch_F = model.mean_matrix_batch

    def rhs(_t, y):
        Y = y.reshape(P, K + 1, E)
        V = Y[:, 0, :]
        if batch_F is not None:
            F = np.asarray(batch_F(V), dtype=float)
        else:
            F = np.stack([np.asarray(model.mean_matrix(v), dtype=float) for v in V])
        return np.einsum("pxy,pky->pkx", F, Y).ravel()

    y0 = np.concatenate([v0[:, np.newaxis, :], probes.transpose(0, 2, 1)], axis=1).ravel()
    sol = solve_ivp(rhs, (0.0, t_end), y0, method="DOP853", rtol=rtol, atol=atol)
    if not sol.success:
        raise BasinError(f"probe integration failed: {sol.message}")
    Y = sol.y[:, -1].reshape(P, K + 1, E)
    return Y[:, 1:, :] @ h  # (P, K)


@dataclass
class ThetaGradientReport:
    """Checks of the first-derivative structure of the theta weights."""

    grad: np.ndarray  # (E, K, K): grad[x, j, k] = d theta^k / d u_xj
    drift_orthogonality: np.ndarray  # (K,): <<grad theta^k, F(S(u)) u>> normalized
    flow_invariance: dict  # t -> max_k |theta(Phi_t u) - theta(u)|
    dh_formula_error: float  # relative mismatch against the DH-based formula
    theta: np.ndarray
    gates: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.gates.values())


def theta_gradient_check(
    model: DecomposedModel,
    u: np.ndarray,
    fd_step: float = 1e-5,
    h_tilde: Optional[np.ndarray] = None,
    h: Optional[np.ndarray] = None,
    flow_times=(0.5, 1.0, 5.0),
    drift_gate: float = 1e-5,
    invariance_gate: float = 1e-6,
    dh_gate: float = 1e-4,
) -> ThetaGradientReport:
    """Finite-difference gradient of theta and its structural identities.

    Verifies (i) orthogonality of grad theta^k to the drift direction
    F(S(u)) u, (ii) invariance of theta along the coupled deterministic
    fraction flow, and (iii) agreement with the representation
    grad theta^k(u)_{xj} = <DH(S(u)) e_x, u^k - 1_{j=k} S(u)>, with DH
    finite-differenced through the reproductive-value map.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    E, K = u.shape
    v0 = u.sum(axis=1)
    h_tilde, h = _resolve_equilibrium(model, v0, h_tilde, h)
    gamma, _ = _decay_rates(model, h_tilde)

    # Central differences of theta over every entry of u.
    steps = fd_step * (1.0 + np.abs(u))
    probes = []
    for x in range(E):
        for j in range(K):
            for s in (+1.0, -1.0):
                q = u.copy()
                q[x, j] += s * steps[x, j]
                probes.append(q)
    th = _theta_probe_batch(model, np.asarray(probes), h_tilde, h, gamma)
    grad = np.empty((E, K, K))
    idx = 0
    for x in range(E):
        for j in range(K):
            grad[x, j, :] = (th[idx] - th[idx + 1]) / (2.0 * steps[x, j])
            idx += 2

    theta0 = _theta_probe_batch(model, u[np.newaxis], h_tilde, h, gamma)[0]

    drift_dir = np.asarray(model.mean_matrix(v0), dtype=float) @ u  # (E, K)
    orth = np.empty(K)
    for k in range(K):
        num = float(np.sum(grad[:, :, k] * drift_dir))
        den = float(np.linalg.norm(grad[:, :, k]) * np.linalg.norm(drift_dir)) + 1e-300
        orth[k] = num / den

    invariance = {}
    for t in flow_times:
        ut = integrate_composition_flow(model, u, t)
        th_t = _theta_probe_batch(model, ut[np.newaxis], h_tilde, h, gamma)[0]
        invariance[float(t)] = float(np.max(np.abs(th_t - theta0)))

    # DH(v0) by central differences of H; column x = DH(v0) e_x.
    DH = np.empty((E, E))
    for x in range(E):
        hs = fd_step * 10.0 * (1.0 + abs(v0[x]))
        vp, vm = v0.copy(), v0.copy()
        vp[x] += hs
        vm[x] -= hs
        Hp = reproductive_value_map(model, vp, h_tilde=h_tilde, h=h, assert_tol=1e-6)
        Hm = reproductive_value_map(model, vm, h_tilde=h_tilde, h=h, assert_tol=1e-6)
        DH[:, x] = (Hp - Hm) / (2.0 * hs)

    grad_formula = np.empty_like(grad)
    for k in range(K):
        for j in range(K):
            target = u[:, k] - (v0 if j == k else 0.0)
            grad_formula[:, j, k] = DH.T @ target
    dh_err = float(
        np.max(np.abs(grad - grad_formula)) / (1.0 + np.max(np.abs(grad)))
    )

    gates = {
        "drift_orthogonality": bool(np.max(np.abs(orth)) < drift_gate),
        "flow_invariance": bool(max(invariance.values()) < invariance_gate),
        "dh_formula": bool(dh_err < dh_gate),
    }
    return ThetaGradientReport(
        grad=grad,
        drift_orthogonality=orth,
        flow_invariance=invariance,
        dh_formula_error=dh_err,
        theta=theta0,
        gates=gates,
    )


@dataclass
class TraceIdentityReport:
    """Second-derivative checks on the invariant manifold."""

    theta: np.ndarray
    trace_values: np.ndarray  # (K,)
    trace_relative: np.ndarray  # (K,) |trace| / sum of |summands|
    cov_matrix: np.ndarray  # (K, K) gradient contraction
    cov_expected: np.ndarray  # (K, K) Sigma^2 ((1_{k=k'} - theta^k') theta^k)
    cov_relative_error: float
    gates: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.gates.values())


def trace_identity_check(
    model: DecomposedModel,
    u_on_gamma: np.ndarray,
    fd_step: float = 1e-3,
    h_tilde: Optional[np.ndarray] = None,
    h: Optional[np.ndarray] = None,
    sigma_sq: Optional[float] = None,
    trace_gate: float = 1e-4,
    cov_gate: float = 1e-5,
) -> TraceIdentityReport:
    """Hessian-trace and covariance identities for theta at a manifold point.

    The composition noise acts blockwise per fraction, so only same-column
    Hessian blocks enter the contraction: with B_n = sigma sigma*(S(u), u^n),

        trace_k = sum_n sum_{x,y} d2 theta^k / (du_xn du_yn) (B_n)_{xy},

    which vanishes identically on the manifold; the report normalizes it by
    the total magnitude of the summands. The gradient contraction

        cov_{k,k'} = sum_n (grad_n theta^k)^T B_n (grad_n theta^{k'})

    must equal Sigma^2 (1_{k=k'} - theta^{k'}) theta^k. Both derivatives are
    central finite differences of theta with Richardson refinement (steps 2s
    and s), so the checks are independent of the algebra they validate.
    """
    u = np.atleast_2d(np.asarray(u_on_gamma, dtype=float))
    E, K = u.shape
    v0 = u.sum(axis=1)
    h_tilde, h = _resolve_equilibrium(model, v0, h_tilde, h)
    gamma, _ = _decay_rates(model, h_tilde)
    if sigma_sq is None:
        sigma_sq = eq.sigma_squared(model, h_tilde, h)

    theta0 = h @ u
    on_gamma = np.max(np.abs(u - np.outer(h_tilde, theta0)))
    if on_gamma > 1e-8 * (1.0 + np.max(np.abs(u))):
        raise ConsistencyError(
            f"point is off the invariant manifold by {on_gamma:.3e}; "
            "columns must be multiples of h_tilde"
        )

    # Fraction-block noise covariances B_n = sigma sigma*(S(u), u^n).
    B = np.empty((K, E, E))
    for n in range(K):
        sig = np.asarray(model.noise_factor(v0, u[:, n]), dtype=float)
        B[n] = sig @ sig.T

    base = fd_step * (1.0 + np.abs(u))

    def hessian_blocks(scale: float) -> np.ndarray:
        """Same-column Hessian blocks d2 theta^k/(du_xn du_yn), shape (K,E,E,K)."""
        s = scale * base
        probes = [u]
        index = {}
        for n in range(K):
            for x in range(E):
                for sgn in (+1.0, -1.0):
                    q = u.copy()
                    q[x, n] += sgn * s[x, n]
                    index[(n, x, sgn)] = len(probes)
                    probes.append(q)
                for y in range(x + 1, E):
                    for sx in (+1.0, -1.0):
                        for sy in (+1.0, -1.0):
                            q = u.copy()
                            q[x, n] += sx * s[x, n]
                            q[y, n] += sy * s[y, n]
                            index[(n, x, y, sx, sy)] = len(probes)
                            probes.append(q)
        th = _theta_probe_batch(model, np.asarray(probes), h_tilde, h, gamma)
        H2 = np.empty((K, E, E, K))
        for n in range(K):
            for x in range(E):
                d2 = (
                    th[index[(n, x, +1.0)]] - 2.0 * th[0] + th[index[(n, x, -1.0)]]
                ) / s[x, n] ** 2
                H2[n, x, x, :] = d2
                for y in range(x + 1, E):
                    d2 = (
                        th[index[(n, x, y, +1.0, +1.0)]]
                        - th[index[(n, x, y, +1.0, -1.0)]]
                        - th[index[(n, x, y, -1.0, +1.0)]]
                        + th[index[(n, x, y, -1.0, -1.0)]]
                    ) / (4.0 * s[x, n] * s[y, n])
                    H2[n, x, y, :] = d2
                    H2[n, y, x, :] = d2
        return H2

    def gradients(scale: float) -> np.ndarray:
        s = scale * base
        probes = []
        for x in range(E):
            for n in range(K):
                for sgn in (+1.0, -1.0):
                    q = u.copy()
                    q[x, n] += sgn * s[x, n]
                    probes.append(q)
        th = _theta_probe_batch(model, np.asarray(probes), h_tilde, h, gamma)
        grad = np.empty((E, K, K))
        idx = 0
        for x in range(E):
            for n in range(K):
                grad[x, n, :] = (th[idx] - th[idx + 1]) / (2.0 * s[x, n])
                idx += 2
        return grad

    # Richardson: eliminate the O(s^2) truncation term between steps 2s and s.
    H2 = (4.0 * hessian_blocks(1.0) - hessian_blocks(2.0)) / 3.0
    grad = (4.0 * gradients(1.0) - gradients(2.0)) / 3.0

    trace = np.zeros(K)
    magnitude = np.zeros(K)
    for k in range(K):
        summands = np.einsum("nxy,nxy->nxy", H2[:, :, :, k], B.transpose(0, 1, 2))
        trace[k] = float(np.sum(summands))
        magnitude[k] = float(np.sum(np.abs(summands)))
    trace_rel = np.abs(trace) / np.maximum(magnitude, 1e-300)

    cov = np.einsum("xnk,nxy,ynl->kl", grad, B, grad)
    cov_expected = sigma_sq * ((np.eye(K) - theta0[np.newaxis, :]) * theta0[:, np.newaxis])
    cov_err = float(np.max(np.abs(cov - cov_expected)) / max(np.max(np.abs(cov_expected)), 1e-300))

    gates = {
        "trace_vanishes": bool(np.max(trace_rel) < trace_gate),
        "wf_covariance": bool(cov_err < cov_gate),
    }
    return TraceIdentityReport(
        theta=theta0,
        trace_values=trace,
        trace_relative=trace_rel,
        cov_matrix=cov,
        cov_expected=cov_expected,
        cov_relative_error=cov_err,
        gates=gates,
    )
