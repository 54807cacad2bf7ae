"""Ecological equilibrium and effective population size.

Pipeline: solve b(h) = F(h) h = 0 for the positive equilibrium profile
h_tilde, check local stability through the Jacobian spectrum and
primitivity of exp(t0 F(h_tilde)), extract the reproductive values h as the
left null vector of F(h_tilde) normalized by <h, h_tilde> = 1, and from
these assemble

    Pi_x = h_tilde_x h_x,
    n_e(x, y) = h_tilde_x h_tilde_y / (C(h_tilde) h_tilde)_{xy},
    Sigma^2 = <h, aa*(h_tilde) h> = sum_{x,y} Pi_x Pi_y / n_e(x, y),
    N_e = N / Sigma^2.

Sigma^2 is always computed along both routes and the two values must agree
to 1e-10 relative; a disagreement signals a broken report and raises.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import expm

from .errors import ConsistencyError, EquilibriumError, EvaluationError
from .model import DecomposedModel, default_admissible_box, drift, total_covariance

_SQRT_EPS = float(np.sqrt(np.finfo(float).eps))


def fd_jacobian(f, v: np.ndarray) -> np.ndarray:
    """Central-difference Jacobian with step sqrt(eps) (1 + |v_x|)."""
    v = np.asarray(v, dtype=float)
    n = v.size
    J = np.empty((n, n))
    for j in range(n):
        step = _SQRT_EPS * (1.0 + abs(v[j]))
        vp, vm = v.copy(), v.copy()
        vp[j] += step
        vm[j] -= step
        J[:, j] = (np.asarray(f(vp)) - np.asarray(f(vm))) / (2.0 * step)
    return J


def jacobian_of_drift(model: DecomposedModel, v: np.ndarray) -> np.ndarray:
    if model.jacobian_b is not None:
        return np.asarray(model.jacobian_b(v), dtype=float)
    return fd_jacobian(lambda x: np.asarray(model.mean_matrix(x)) @ x, v)


def _flow_warmup(model: DecomposedModel, v0: np.ndarray, target: float, t_max: float = 500.0):
    """Ride v' = b(v) toward the attracting equilibrium before polishing.

    Plain Newton on b is only locally convergent: v = 0 is always a root of
    F(v) v, and guesses like (1, 1) can sit squarely in its Newton basin.
    The flow, by contrast, can only settle at a stable equilibrium.
    """
    from scipy.integrate import solve_ivp

    f = lambda _t, v: np.asarray(model.mean_matrix(v), dtype=float) @ v
    v = np.asarray(v0, dtype=float)
    t = 0.0
    while t < t_max:
        b = f(0.0, v)
        if np.max(np.abs(b)) <= target * (1.0 + np.max(np.abs(v))):
            break
        sol = solve_ivp(f, (t, t + 5.0), v, method="RK45", rtol=1e-8, atol=1e-10)
        if not sol.success:
            raise EquilibriumError(f"warm-up flow failed: {sol.message}")
        v, t = sol.y[:, -1], float(sol.t[-1])
    return np.maximum(v, 0.0)


def find_fixed_point(
    model: DecomposedModel,
    guess: np.ndarray,
    tol: float = 1e-11,
    max_iter: int = 100,
) -> np.ndarray:
    """Solve b(v) = 0 from a positive guess: flow warm-up, then damped Newton.

    Newton iterates are projected onto the nonnegative orthant and the step
    is halved while the residual increases. Convergence to the zero vector
    is rejected as the trivial fixed point.
    """
    v = np.asarray(guess, dtype=float).copy()
    if np.any(v <= 0):
        raise EquilibriumError("guess must be componentwise positive")

    def residual(x):
        b = np.asarray(model.mean_matrix(x)) @ x
        return b, float(np.max(np.abs(b)))

    b, res = residual(v)
    if res > tol:
        v = _flow_warmup(model, v, target=max(1e-3, 1e3 * tol))
        b, res = residual(v)
    scale = 1.0 + float(np.linalg.norm(np.asarray(model.mean_matrix(v))))
    for _ in range(max_iter):
        if res <= tol * scale:
            break
        J = jacobian_of_drift(model, v)
        try:
            step = np.linalg.solve(J, -b)
        except np.linalg.LinAlgError:
            raise EquilibriumError(f"singular Jacobian at iterate {v}")
        lam = 1.0
        for _ in range(60):
            cand = np.maximum(v + lam * step, 0.0)
            try:
                b_new, res_new = residual(cand)
            except (EvaluationError, FloatingPointError):
                lam *= 0.5
                continue
            if np.all(np.isfinite(b_new)) and res_new < res:
                v, b, res = cand, b_new, res_new
                break
            lam *= 0.5
        else:
            raise EquilibriumError(f"line search stalled at {v}, residual {res:.3e}")
        scale = 1.0 + float(np.linalg.norm(np.asarray(model.mean_matrix(v))))
    else:
        raise EquilibriumError(f"no convergence after {max_iter} iterations, residual {res:.3e}")

    if np.max(np.abs(v)) <= 100.0 * tol:
        raise EquilibriumError("converged to the trivial fixed point v = 0")
    if np.any(v < -tol):
        raise EquilibriumError(f"fixed point has a negative component: {v}")
    return np.maximum(v, 0.0)


def stability_spectrum(model: DecomposedModel, h_tilde: np.ndarray) -> np.ndarray:
    """Eigenvalues of the drift Jacobian at h_tilde, descending real part."""
    J = jacobian_of_drift(model, h_tilde)
    eig = np.linalg.eigvals(J)
    return eig[np.argsort(-eig.real)]


def left_null_vector(
    model: DecomposedModel, h_tilde: np.ndarray, tol: float = 1e-9
) -> np.ndarray:
    """Nonnegative h with h^T F(h_tilde) = 0 and <h, h_tilde> = 1.

    Dense SVD of F(h_tilde)^T; the singular vector of the smallest singular
    value spans the kernel, which must be one-dimensional.
    """
    F = np.asarray(model.mean_matrix(h_tilde), dtype=float)
    _, s, Vt = np.linalg.svd(F.T)
    smax = s[0] if s[0] > 0 else 1.0
    if s[-1] > tol * smax:
        raise EquilibriumError(
            f"F(h_tilde)^T has no kernel (smallest singular value {s[-1]:.3e})"
        )
    if len(s) > 1 and s[-2] <= tol * smax:
        raise EquilibriumError("kernel of F(h_tilde)^T is not one-dimensional")
    h = Vt[-1]
    # Fix the sign so the representative is nonnegative.
    if np.sum(h) < 0:
        h = -h
    if np.min(h) < -tol * np.max(np.abs(h)):
        raise EquilibriumError(f"left null vector has mixed signs: {h}")
    h = np.maximum(h, 0.0)
    inner = float(h @ h_tilde)
    if inner <= 0:
        raise EquilibriumError("cannot normalize: <h, h_tilde> <= 0")
    return h / inner


def check_primitivity(
    model: DecomposedModel, h_tilde: np.ndarray, t_candidates=(1.0, 2.0, 4.0, 8.0)
) -> Optional[float]:
    """Smallest t0 with exp(t0 F(h_tilde)) entrywise positive, else None."""
    F = np.asarray(model.mean_matrix(h_tilde), dtype=float)
    for t0 in t_candidates:
        M = expm(t0 * F)
        if np.all(M > 1e-12 * np.max(np.abs(M))):
            return float(t0)
    return None


def pair_effective_sizes(model: DecomposedModel, h_tilde: np.ndarray) -> np.ndarray:
    """n_e(x, y) = h_tilde_x h_tilde_y / (C(h_tilde) h_tilde)_{xy}.

    Entries where the pair covariance vanishes are +inf (no shared noise);
    they contribute nothing to Sigma^2.
    """
    ch = total_covariance(model, h_tilde)
    outer = np.outer(h_tilde, h_tilde)
    with np.errstate(divide="ignore"):
        ne = np.where(np.abs(ch) > 0.0, outer / np.where(ch != 0.0, ch, 1.0), np.inf)
    return ne


def sigma_squared(
    model: DecomposedModel,
    h_tilde: np.ndarray,
    h: np.ndarray,
    rtol: float = 1e-10,
) -> float:
    """<h, aa*(h_tilde) h>, cross-checked against sum Pi Pi / n_e."""
    aa = total_covariance(model, h_tilde)
    quad = float(h @ aa @ h)
    pi = h_tilde * h
    ne = pair_effective_sizes(model, h_tilde)
    with np.errstate(divide="ignore"):
        contrib = np.where(np.isinf(ne), 0.0, np.outer(pi, pi) / ne)
    pair_sum = float(np.sum(contrib))
    if abs(quad - pair_sum) > rtol * max(abs(quad), 1e-300):
        raise ConsistencyError(
            f"Sigma^2 routes disagree: quadratic form {quad!r} vs pair sum {pair_sum!r}"
        )
    return quad


def effective_population_size(sigma_sq: float, N: float) -> float:
    """N_e = N / Sigma^2."""
    if sigma_sq <= 0.0:
        raise EquilibriumError(
            "sigma_sq must be positive: without genetic drift the evolutionary "
            "time rescaling N/sigma_sq is undefined"
        )
    return N / sigma_sq


def census_bound_check(
    model: DecomposedModel,
    h_tilde: np.ndarray,
    h: np.ndarray,
    sigma_sq: float,
    N: float,
):
    """Bound N_e <= <h_tilde, aa*(h_tilde)^{-1} h_tilde> N.

    Returns (bound, holds); (None, None) when aa*(h_tilde) is singular.
    """
    aa = total_covariance(model, h_tilde)
    try:
        sol = np.linalg.solve(aa, h_tilde)
    except np.linalg.LinAlgError:
        return None, None
    if not np.all(np.isfinite(sol)):
        return None, None
    bound = float(h_tilde @ sol) * N
    ne = effective_population_size(sigma_sq, N)
    return bound, bool(ne <= bound * (1.0 + 1e-10))


@dataclass
class EquilibriumReport:
    """Equilibrium profile, reproductive values and drift-strength summary."""

    h_tilde: np.ndarray
    h: np.ndarray
    jacobian_eigenvalues: np.ndarray
    pi: np.ndarray
    n_e: np.ndarray
    sigma_sq: float
    primitivity_t0: Optional[float]
    stable: bool
    residual_b: float
    residual_hF: float
    admissible_box: np.ndarray
    labels: tuple = ()
    N: Optional[float] = None
    N_e: Optional[float] = None
    census_bound: Optional[float] = None
    census_bound_holds: Optional[bool] = None
    flags: dict = field(default_factory=dict)

    @property
    def decay_rate(self) -> float:
        """|Re lambda_1|, the slowest relaxation rate of the flow."""
        return float(-self.jacobian_eigenvalues[0].real)

    def to_dict(self) -> dict:
        def _clean(m):
            return [[None if np.isinf(x) else float(x) for x in row] for row in np.atleast_2d(m)]

        out = {
            "h_tilde": self.h_tilde.tolist(),
            "h": self.h.tolist(),
            "eigenvalues": [[z.real, z.imag] for z in self.jacobian_eigenvalues],
            "pi": self.pi.tolist(),
            "n_e": _clean(self.n_e),
            "sigma_sq": self.sigma_sq,
            "primitivity_t0": self.primitivity_t0,
            "stable": self.stable,
            "residual_b": self.residual_b,
            "residual_hF": self.residual_hF,
            "labels": list(self.labels),
        }
        if self.N is not None:
            out["N"] = self.N
            out["N_e"] = self.N_e
            out["census_bound"] = self.census_bound
            out["census_bound_holds"] = self.census_bound_holds
        return out


def analyze(
    model: DecomposedModel,
    N: Optional[float] = None,
    guess: Optional[np.ndarray] = None,
    tol: float = 1e-11,
    stability_tol: float = 1e-9,
) -> EquilibriumReport:
    """Full equilibrium analysis of a model.

    Solves for h_tilde from ``guess`` (default: the model's declared guess),
    verifies stability and primitivity, and assembles Pi, n_e, Sigma^2 and,
    when ``N`` is given, N_e and the census-size bound.
    """
    if guess is None:
        guess = model.equilibrium_guess
    if guess is None:
        guess = np.ones(model.dim)
    h_tilde = find_fixed_point(model, guess, tol=tol)
    eig = stability_spectrum(model, h_tilde)
    stable = bool(eig[0].real < -stability_tol)
    t0 = check_primitivity(model, h_tilde)
    h = left_null_vector(model, h_tilde)
    pi = h_tilde * h
    ne = pair_effective_sizes(model, h_tilde)
    ssq = sigma_squared(model, h_tilde, h)

    F = np.asarray(model.mean_matrix(h_tilde), dtype=float)
    res_b = float(np.max(np.abs(F @ h_tilde)))
    res_hF = float(np.max(np.abs(h @ F)))

    flags = {}
    if not stable:
        flags["unstable"] = f"Re(lambda_1) = {eig[0].real:.3e} >= -{stability_tol}"
    if t0 is None:
        flags["not_primitive"] = "exp(t0 F(h_tilde)) never entrywise positive for t0 in {1,2,4,8}"
    if t0 is not None and np.min(pi) <= 0:
        flags["pi_not_positive"] = f"min Pi = {np.min(pi):.3e}"

    box = model.admissible_box if model.admissible_box is not None else default_admissible_box(h_tilde)

    report = EquilibriumReport(
        h_tilde=h_tilde,
        h=h,
        jacobian_eigenvalues=eig,
        pi=pi,
        n_e=ne,
        sigma_sq=ssq,
        primitivity_t0=t0,
        stable=stable,
        residual_b=res_b,
        residual_hF=res_hF,
        admissible_box=np.asarray(box, dtype=float),
        labels=model.space.labels,
        flags=flags,
    )
    if N is not None:
        report.N = float(N)
        report.N_e = effective_population_size(ssq, N)
        bound, holds = census_bound_check(model, h_tilde, h, ssq, N)
        report.census_bound = bound
        report.census_bound_holds = holds
    return report
