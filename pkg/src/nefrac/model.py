"""Decomposable structured-population models.

A model over a finite type space E is supplied as a pair of evaluation
functions (F, C) plus a noise factor sigma, tied together by

    b(v) = F(v) v,        aa*(v) = C(v) v,        sigma(v, w) sigma*(v, w) = C(v) w,

where F(v) is an (E, E) mean matrix, C(v) an (E, E, E) tensor contracted
against the last index, and sigma(v, w) an (E, E) matrix. The decomposition
is a required explicit input: the same drift admits many (F, C) splittings
and the split changes every downstream quantity, so the library never infers
F from b.

All evaluations are restricted to the nonnegative orthant (intersected with
the model's admissible box); square roots and divisions inside noise factors
are only guaranteed there.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import DecompositionError, EvaluationError, ModelDefinitionError
from .types import TypeSpace

DEFAULT_TOL = 1e-9


@dataclass
class DecomposedModel:
    """A user-supplied (F, C, sigma) decomposition.

    ``mean_matrix``, ``covariance_tensor`` and ``noise_factor`` must be pure
    and reentrant; they are called from concurrent replicate workers.
    Optional batch variants evaluate a whole (R, E) block of states at once
    and exist purely as a fast path for the simulation engine; when present
    they must agree with the scalar functions entrywise.

    ``noise_diag_batch(V, W) -> (R, E)`` may be provided when sigma(v, w) is
    diagonal; it returns the diagonal of sigma.
    """

    space: TypeSpace
    mean_matrix: Callable[[np.ndarray], np.ndarray]
    covariance_tensor: Callable[[np.ndarray], np.ndarray]
    noise_factor: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jacobian_b: Optional[Callable[[np.ndarray], np.ndarray]] = None
    admissible_box: Optional[np.ndarray] = None  # shape (2, E): [lower, upper]
    name: str = "custom"
    equilibrium_guess: Optional[np.ndarray] = None
    mean_matrix_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None
    noise_diag_batch: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    noise_factor_batch: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    closed_forms: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.space.size

    def with_box(self, box: np.ndarray) -> "DecomposedModel":
        return replace(self, admissible_box=np.asarray(box, dtype=float))


def default_admissible_box(h_tilde: np.ndarray) -> np.ndarray:
    """Box [0, 10 max(h_tilde)]^E used when the user declares none."""
    h_tilde = np.asarray(h_tilde, dtype=float)
    hi = 10.0 * float(np.max(h_tilde))
    box = np.zeros((2, h_tilde.size))
    box[1] = hi
    return box


def _check_in_box(model: DecomposedModel, v: np.ndarray, slack: float = 1e-12):
    if model.admissible_box is None:
        return
    lo, hi = model.admissible_box
    if np.any(v < lo - slack) or np.any(v > hi + slack):
        raise EvaluationError(f"state outside admissible box: {v}", state=v)


def drift(model: DecomposedModel, v: np.ndarray) -> np.ndarray:
    """b(v) = F(v) v."""
    v = np.asarray(v, dtype=float)
    _check_in_box(model, v)
    F = np.asarray(model.mean_matrix(v), dtype=float)
    if not np.all(np.isfinite(F)):
        raise EvaluationError(f"non-finite mean matrix at v={v}", state=v)
    return F @ v


def total_covariance(model: DecomposedModel, v: np.ndarray, tol: float = DEFAULT_TOL) -> np.ndarray:
    """aa*(v) = C(v) v; symmetric positive semidefinite for admissible v >= 0."""
    v = np.asarray(v, dtype=float)
    _check_in_box(model, v)
    C = np.asarray(model.covariance_tensor(v), dtype=float)
    if not np.all(np.isfinite(C)):
        raise EvaluationError(f"non-finite covariance tensor at v={v}", state=v)
    aa = C @ v
    aa = 0.5 * (aa + aa.T)
    scale = 1.0 + float(np.max(np.abs(aa)))
    min_eig = float(np.linalg.eigvalsh(aa)[0])
    if min_eig < -tol * scale:
        raise ModelDefinitionError(
            f"C(v)v has negative eigenvalue {min_eig:.3e} at v={v}"
        )
    return aa


def fraction_covariance(
    model: DecomposedModel, v: np.ndarray, w: np.ndarray, tol: float = DEFAULT_TOL
) -> np.ndarray:
    """C(v) w, verified against sigma(v, w) sigma*(v, w)."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    _check_in_box(model, v)
    C = np.asarray(model.covariance_tensor(v), dtype=float)
    cw = C @ w
    sig = np.asarray(model.noise_factor(v, w), dtype=float)
    if not np.all(np.isfinite(sig)):
        raise EvaluationError(f"non-finite noise factor at v={v}, w={w}", state=v)
    mismatch = np.linalg.norm(sig @ sig.T - cw)
    if mismatch > tol * (1.0 + np.linalg.norm(cw)):
        raise DecompositionError(
            f"sigma sigma* differs from C(v)w by {mismatch:.3e} at v={v}, w={w}"
        )
    return cw


def build_sigma_from_a(
    a: Callable[[np.ndarray], np.ndarray],
    boundary_tol: float = 1e-12,
    sample_points: Optional[np.ndarray] = None,
):
    """Factor a noise matrix a(v) into (noise_factor, covariance_tensor).

    Writes a(v) = A(v) R(v) with R(w) = diag(sqrt(w)) and
    A_xy(v) = a_xy(v) / sqrt(v_y) (zero when v_y = 0), then

        sigma(v, w) = A(v) R(w),        C_xyz(v) = A_xz(v) A_yz(v).

    Requires v_y = 0 to imply a(v)[:, y] = 0; violated columns raise a
    DecompositionError at evaluation time, and at construction time for any
    ``sample_points`` (each point is probed with components zeroed in turn).
    """

    def _A(v: np.ndarray) -> np.ndarray:
        av = np.asarray(a(v), dtype=float)
        v = np.asarray(v, dtype=float)
        A = np.zeros_like(av)
        scale = 1.0 + float(np.max(np.abs(av)))
        for y in range(v.size):
            if v[y] > 0.0:
                A[:, y] = av[:, y] / np.sqrt(v[y])
            elif np.max(np.abs(av[:, y])) > boundary_tol * scale:
                raise DecompositionError(
                    f"a(v) has a nonzero column {y} at v_{y}=0; "
                    "the A(v)R(w) construction does not apply"
                )
        return A

    def noise_factor(v: np.ndarray, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        return _A(v) * np.sqrt(np.maximum(w, 0.0))[np.newaxis, :]

    def covariance_tensor(v: np.ndarray) -> np.ndarray:
        A = _A(v)
        return np.einsum("xz,yz->xyz", A, A)

    if sample_points is not None:
        for p in np.atleast_2d(np.asarray(sample_points, dtype=float)):
            for y in range(p.size):
                q = p.copy()
                q[y] = 0.0
                _A(q)

    return noise_factor, covariance_tensor


@dataclass
class AssumptionCheck:
    name: str
    point_index: int
    passed: bool
    residual: float
    detail: str = ""


@dataclass
class AssumptionReport:
    """Per-point outcomes of the structural checks; failures are entries."""

    checks: list
    tol: float

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list:
        return [c for c in self.checks if not c.passed]

    def summary(self) -> str:
        by_name: dict = {}
        for c in self.checks:
            ok, n = by_name.get(c.name, (0, 0))
            by_name[c.name] = (ok + int(c.passed), n + 1)
        lines = [f"{name}: {ok}/{n} passed" for name, (ok, n) in sorted(by_name.items())]
        return "\n".join(lines)


def check_assumptions(
    model: DecomposedModel,
    sample_points: np.ndarray,
    tol: float = DEFAULT_TOL,
    seed: int = 0,
) -> AssumptionReport:
    """Validate decomposability and positivity at the given states.

    Per point: the factor identity sigma sigma* = C(v)w (at w = v and two
    random nonnegative w), exact linearity of w -> C(v)w, the Metzler sign
    structure of F(v), positive semidefiniteness of C(v)v, and independence
    of the fraction count (sum_j C(v)u^j = C(v) S(u) for a random K=5 split).
    """
    rng = np.random.default_rng(seed)
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    checks: list = []

    def add(name, i, passed, residual, detail=""):
        checks.append(AssumptionCheck(name, i, bool(passed), float(residual), detail))

    for i, v in enumerate(pts):
        F = np.asarray(model.mean_matrix(v), dtype=float)
        C = np.asarray(model.covariance_tensor(v), dtype=float)

        off = F[~np.eye(v.size, dtype=bool)] if v.size > 1 else np.zeros(0)
        metzler_min = float(off.min()) if off.size else 0.0
        scale_f = 1.0 + float(np.max(np.abs(F)))
        add("metzler", i, metzler_min >= -tol * scale_f, -min(metzler_min, 0.0))

        aa = 0.5 * ((C @ v) + (C @ v).T)
        min_eig = float(np.linalg.eigvalsh(aa)[0])
        add("psd_total_covariance", i, min_eig >= -tol * (1.0 + np.max(np.abs(aa))), -min(min_eig, 0.0))

        ws = [v, rng.uniform(0.0, 1.0, v.size) * v, rng.uniform(0.0, 1.0, v.size) * np.max(v)]
        for w in ws:
            cw = C @ w
            sig = np.asarray(model.noise_factor(v, w), dtype=float)
            res = float(np.linalg.norm(sig @ sig.T - cw))
            add("factor_identity", i, res <= tol * (1.0 + np.linalg.norm(cw)), res)

        w1 = rng.uniform(0.0, 1.0, v.size)
        w2 = rng.uniform(0.0, 1.0, v.size)
        al, be = rng.uniform(0.5, 2.0, 2)
        res = float(np.linalg.norm(C @ (al * w1 + be * w2) - al * (C @ w1) - be * (C @ w2)))
        add("linearity", i, res <= 1e-12 * (1.0 + np.linalg.norm(C @ w1)), res)

        U = rng.uniform(0.0, 1.0, (v.size, 5))
        U *= (v / np.maximum(U.sum(axis=1), 1e-300))[:, np.newaxis]
        res = float(np.linalg.norm(sum(C @ U[:, k] for k in range(5)) - C @ U.sum(axis=1)))
        add("fraction_count_independence", i, res <= 1e-12 * (1.0 + np.linalg.norm(C @ v)), res)

    return AssumptionReport(checks=checks, tol=tol)


def random_admissible_points(
    box: np.ndarray, n: int, seed: int = 0, inset: float = 0.0
) -> np.ndarray:
    """Uniform sample of n points inside a (2, E) box."""
    box = np.asarray(box, dtype=float)
    lo, hi = box
    rng = np.random.default_rng(seed)
    span = hi - lo
    return lo + inset * span + rng.uniform(0.0, 1.0, (n, lo.size)) * (1.0 - 2.0 * inset) * span
