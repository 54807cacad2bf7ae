"""Built-in models with closed-form cross-checks.

Three families ship with the library:

* ``lotka_volterra``: two competing types with logistic-style drift and a
  two-parameter family of mean-matrix decompositions F_{alpha,beta}; the
  drift b(v) is identical for every (alpha, beta) > 0 while the reproductive
  values (and hence the effective population size) depend on the choice.
* ``two_sex``: males and females mating at rate 1/N with quadratic death,
  tracked at an autosomal locus; genes are inherited equally from both
  parents, which puts the 1/2 bookkeeping factors into the mean matrix.
* ``local_branching``: independent demographic noise per class,
  a_xy(v) = delta_xy sqrt(g(v_x) v_x), optionally coupled by migration.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .errors import ConfigError
from .model import DecomposedModel, build_sigma_from_a
from .types import TypeSpace

# Parameters of the reference two-type run used across the documentation:
# carrying-capacity style competition with a weak cross-birth decomposition.
LV_REFERENCE_PARAMS = dict(
    b0=1.0, b11=-0.2, b12=-0.05, b22=-0.1, b21=-0.05, alpha=0.1, beta=0.1
)


def lotka_volterra(
    b0: float,
    b11: float,
    b12: float,
    b22: float,
    b21: float,
    alpha: float,
    beta: float,
    g: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> DecomposedModel:
    """Two-type competitive model with decomposition parameters (alpha, beta).

    The drift is b_1 = v1 (b0 + b11 v1 + b12 v2), b_2 = v2 (b0 + b22 v2 + b21 v1),
    decomposed as b(v) = F(v) v with

        F(v) = [[b0 + b11 v1 + (b12 - alpha) v2,  alpha v1],
                [beta v2,  b0 + b22 v2 + (b21 - beta) v1]].

    Noise is local branching: a(v) = diag(sqrt(g(v_x) v_x)), g = 1 by default.
    """
    if alpha <= 0 or beta <= 0:
        raise ConfigError("alpha and beta must be positive")
    unit_g = g is None
    if unit_g:
        g = lambda x: np.ones_like(np.asarray(x, dtype=float))

    def mean_matrix(v):
        v1, v2 = v
        return np.array(
            [
                [b0 + b11 * v1 + (b12 - alpha) * v2, alpha * v1],
                [beta * v2, b0 + b22 * v2 + (b21 - beta) * v1],
            ]
        )

    def mean_matrix_batch(V):
        v1, v2 = V[:, 0], V[:, 1]
        F = np.empty((V.shape[0], 2, 2))
        F[:, 0, 0] = b0 + b11 * v1 + (b12 - alpha) * v2
        F[:, 0, 1] = alpha * v1
        F[:, 1, 0] = beta * v2
        F[:, 1, 1] = b0 + b22 * v2 + (b21 - beta) * v1
        return F

    def jacobian_b(v):
        v1, v2 = v
        return np.array(
            [
                [b0 + 2 * b11 * v1 + b12 * v2, b12 * v1],
                [b21 * v2, b0 + 2 * b22 * v2 + b21 * v1],
            ]
        )

    def a(v):
        v = np.asarray(v, dtype=float)
        return np.diag(np.sqrt(g(v) * np.maximum(v, 0.0)))

    noise_factor, covariance_tensor = build_sigma_from_a(a)

    if unit_g:
        def noise_diag_batch(V, W):
            return np.sqrt(np.maximum(W, 0.0))
    else:
        def noise_diag_batch(V, W):
            return np.sqrt(g(V) * np.maximum(W, 0.0))

    closed = {}
    comp = np.array([[b11, b12], [b21, b22]], dtype=float)
    if abs(np.linalg.det(comp)) > 1e-14:
        h_tilde = np.linalg.solve(comp, np.array([-b0, -b0]))
        if np.all(h_tilde > 0):
            # At the interior fixed point F(h) collapses to
            # [[-alpha h2, alpha h1], [beta h2, -beta h1]], whose left kernel
            # is spanned by (beta, alpha).
            h = np.array([beta, alpha]) / (beta * h_tilde[0] + alpha * h_tilde[1])
            sigma_sq = float(np.sum(g(h_tilde) * h_tilde * h**2))
            closed = {
                "h_tilde": h_tilde,
                "h": h,
                "sigma_sq": sigma_sq,
                "inv_Ne": lambda N: sigma_sq / N,
            }

    return DecomposedModel(
        space=TypeSpace(("type1", "type2")),
        mean_matrix=mean_matrix,
        covariance_tensor=covariance_tensor,
        noise_factor=noise_factor,
        jacobian_b=jacobian_b,
        name="lotka_volterra",
        equilibrium_guess=np.array([1.0, 1.0]),
        mean_matrix_batch=mean_matrix_batch,
        noise_diag_batch=noise_diag_batch,
        closed_forms=closed,
    )


def two_sex(p: float, alpha: float) -> DecomposedModel:
    """Sexual population tracked as rescaled male/female gene counts (m, f).

    Drift and per-class noise:

        b_m = (p/2) m f - (alpha/4) m (f+m)^2,      a_m = p f m + (alpha/2) m (f+m)^2,
        b_f = ((1-p)/2) m f - (alpha/4) f (f+m)^2,  a_f = (1-p) f m + (alpha/2) f (f+m)^2,

    with the mean matrix splitting each birth's gene contribution equally
    between the two parents. Closed forms: with n_eq = 2 p (1-p) / alpha,

        h_tilde = (p n_eq, (1-p) n_eq),     h = (1/(2 m_eq), 1/(2 f_eq)),
        Sigma^2 = (1/(4 m_eq) + 1/(4 f_eq)) (p(1-p) + alpha n_eq / 2) n_eq,
        1/N_e  = s^2 (1/(4 M_eq) + 1/(4 F_eq)),
        s^2 = p(1-p) n_eq/2 + alpha (n_eq/2)^2,  M_eq = N m_eq/2,  F_eq = N f_eq/2.
    """
    if not (0.0 < p < 1.0):
        raise ConfigError("p must lie in (0, 1)")
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    q = 1.0 - p

    def mean_matrix(v):
        m, f = v
        d = -(alpha / 4.0) * (f + m) ** 2
        return np.array(
            [
                [d + p * f / 4.0, p * m / 4.0],
                [q * f / 4.0, d + q * m / 4.0],
            ]
        )

    def mean_matrix_batch(V):
        m, f = V[:, 0], V[:, 1]
        d = -(alpha / 4.0) * (f + m) ** 2
        F = np.empty((V.shape[0], 2, 2))
        F[:, 0, 0] = d + p * f / 4.0
        F[:, 0, 1] = p * m / 4.0
        F[:, 1, 0] = q * f / 4.0
        F[:, 1, 1] = d + q * m / 4.0
        return F

    def jacobian_b(v):
        m, f = v
        s = f + m
        return np.array(
            [
                [p * f / 2.0 - (alpha / 4.0) * (s**2 + 2 * m * s), p * m / 2.0 - (alpha / 2.0) * m * s],
                [q * f / 2.0 - (alpha / 2.0) * f * s, q * m / 2.0 - (alpha / 4.0) * (s**2 + 2 * f * s)],
            ]
        )

    def _amps(m, f):
        s2 = (f + m) ** 2
        am = p * f * m + (alpha / 2.0) * m * s2
        af = q * f * m + (alpha / 2.0) * f * s2
        return am, af

    def a(v):
        am, af = _amps(max(v[0], 0.0), max(v[1], 0.0))
        return np.diag(np.sqrt([am, af]))

    noise_factor, covariance_tensor = build_sigma_from_a(a)

    def noise_diag_batch(V, W):
        m, f = V[:, 0], V[:, 1]
        am, af = _amps(m, f)
        # A_xx = sqrt(a_x / v_x); guard the v = 0 boundary where a_x -> 0 too.
        gm = np.where(m > 0.0, am / np.where(m > 0.0, m, 1.0), 0.0)
        gf = np.where(f > 0.0, af / np.where(f > 0.0, f, 1.0), 0.0)
        return np.sqrt(np.stack([gm, gf], axis=1) * np.maximum(W, 0.0))

    n_eq = 2.0 * p * q / alpha
    m_eq, f_eq = p * n_eq, q * n_eq
    h_tilde = np.array([m_eq, f_eq])
    h = np.array([1.0 / (2.0 * m_eq), 1.0 / (2.0 * f_eq)])
    sigma_sq = (1.0 / (4.0 * m_eq) + 1.0 / (4.0 * f_eq)) * (p * q + 0.5 * alpha * n_eq) * n_eq
    s_sq = p * q * n_eq / 2.0 + alpha * (n_eq / 2.0) ** 2

    def inv_Ne(N):
        M_eq, F_eq = N * m_eq / 2.0, N * f_eq / 2.0
        return s_sq * (1.0 / (4.0 * M_eq) + 1.0 / (4.0 * F_eq))

    return DecomposedModel(
        space=TypeSpace(("m", "f")),
        mean_matrix=mean_matrix,
        covariance_tensor=covariance_tensor,
        noise_factor=noise_factor,
        jacobian_b=jacobian_b,
        name="two_sex",
        equilibrium_guess=1.3 * h_tilde,
        mean_matrix_batch=mean_matrix_batch,
        noise_diag_batch=noise_diag_batch,
        closed_forms={
            "h_tilde": h_tilde,
            "h": h,
            "sigma_sq": float(sigma_sq),
            "s_sq": float(s_sq),
            "n_eq": float(n_eq),
            "inv_Ne": inv_Ne,
        },
    )


def local_branching(
    E_size: int,
    r: Callable[[np.ndarray], np.ndarray],
    g: Callable[[np.ndarray], np.ndarray],
    migration: Optional[np.ndarray] = None,
    equilibrium_guess: Optional[np.ndarray] = None,
) -> DecomposedModel:
    """Per-class branching: F(v) = diag(r(v_x)) + migration, diagonal noise.

    ``r`` and ``g`` act elementwise on the state. ``migration``, when given,
    must be Metzler with zero column sums (per-capita transport of mass from
    class y to class x at rate migration[x, y]).
    """
    if E_size < 1:
        raise ConfigError("E_size must be >= 1")
    if migration is not None:
        migration = np.asarray(migration, dtype=float)
        if migration.shape != (E_size, E_size):
            raise ConfigError("migration matrix shape must be (E, E)")
        off = migration[~np.eye(E_size, dtype=bool)]
        if off.size and off.min() < 0:
            raise ConfigError("migration off-diagonal rates must be nonnegative")

    def mean_matrix(v):
        F = np.diag(r(np.asarray(v, dtype=float)))
        if migration is not None:
            F = F + migration
        return F

    def mean_matrix_batch(V):
        R = np.asarray(r(V), dtype=float)
        F = np.zeros((V.shape[0], E_size, E_size))
        idx = np.arange(E_size)
        F[:, idx, idx] = R
        if migration is not None:
            F += migration[np.newaxis]
        return F

    def a(v):
        v = np.asarray(v, dtype=float)
        return np.diag(np.sqrt(g(v) * np.maximum(v, 0.0)))

    noise_factor, covariance_tensor = build_sigma_from_a(a)

    def noise_diag_batch(V, W):
        return np.sqrt(g(V) * np.maximum(W, 0.0))

    return DecomposedModel(
        space=TypeSpace.of_size(E_size),
        mean_matrix=mean_matrix,
        covariance_tensor=covariance_tensor,
        noise_factor=noise_factor,
        jacobian_b=None,
        name="local_branching",
        equilibrium_guess=(
            np.asarray(equilibrium_guess, dtype=float)
            if equilibrium_guess is not None
            else np.ones(E_size)
        ),
        mean_matrix_batch=mean_matrix_batch,
        noise_diag_batch=noise_diag_batch,
    )


def logistic_singleton(
    r0: float = 1.0, capacity: float = 1.0, g0: float = 1.0, g1: float = 0.0
) -> DecomposedModel:
    """One-class logistic growth r(v) = r0 (1 - v/capacity), g(v) = g0 + g1 v."""
    if r0 <= 0 or capacity <= 0:
        raise ConfigError("r0 and capacity must be positive")
    model = local_branching(
        1,
        r=lambda v: r0 * (1.0 - v / capacity),
        g=lambda v: g0 + g1 * v,
        equilibrium_guess=np.array([0.5 * capacity]),
    )
    g_eq = g0 + g1 * capacity
    sigma_sq = g_eq / capacity  # g(h) h (1/h)^2 with h = capacity
    model.closed_forms = {
        "h_tilde": np.array([capacity]),
        "h": np.array([1.0 / capacity]),
        "sigma_sq": float(sigma_sq),
        "inv_Ne": lambda N: sigma_sq / N,
    }
    model.name = "local_branching"
    return model


def _build_lotka_volterra(params: dict) -> DecomposedModel:
    merged = {**LV_REFERENCE_PARAMS, **params}
    return lotka_volterra(**merged)


def _build_two_sex(params: dict) -> DecomposedModel:
    return two_sex(p=params.get("p", 0.5), alpha=params.get("alpha", 0.125))


def _build_local_branching(params: dict) -> DecomposedModel:
    return logistic_singleton(
        r0=params.get("r0", 1.0),
        capacity=params.get("capacity", 1.0),
        g0=params.get("g0", 1.0),
        g1=params.get("g1", 0.0),
    )


ZOO = {
    "lotka_volterra": _build_lotka_volterra,
    "two_sex": _build_two_sex,
    "local_branching": _build_local_branching,
}


def get_model(name: str, params: Optional[dict] = None) -> DecomposedModel:
    """Build a zoo model by name; unknown names list the available zoo."""
    if name not in ZOO:
        raise ConfigError(f"unknown model {name!r}; available: {sorted(ZOO)}")
    return ZOO[name](dict(params or {}))
