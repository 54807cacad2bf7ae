"""Stochastic simulators: fraction system, total population, Wright-Fisher.

The fraction system advances the (E, K) composition matrix by
Euler-Maruyama,

    U^k <- U^k + F(S(U)) U^k dt + sigma(S(U+), U^{k,+}) xi^k sqrt(dt/N),

with independent standard Gaussian vectors xi^k per fraction and the
boundary policy applied to the sigma arguments (+ = clipped at zero) and to
the post-step state. Full truncation is the default: square-root-type
diffusion coefficients need a positivity-preserving scheme, and clipping the
negative part is the standard weakly convergent choice. Reflection at zero
is offered for sensitivity analysis.

Replicates are vectorized: the state is an (R, E, K) block and each step is
a handful of array operations. Every replicate owns counter-based random
streams keyed by (seed, family, replicate, fraction), so runs are bitwise
reproducible and replicates can be partitioned across processes or dropped
mid-run without perturbing the others.
"""

from __future__ import annotations

import math
import os
import warnings
from typing import Callable, Optional

import numpy as np

from ._rng import FAMILY_FRACTIONS, FAMILY_TOTAL, FAMILY_WF, stream
from .equilibrium import EquilibriumReport, jacobian_of_drift
from .errors import ConfigError, SimulationError
from .model import DecomposedModel
from .types import SimulationConfig, Trajectory

_NOISE_CHUNK = 1024
_FINITE_CHECK_EVERY = 512


def default_dt(model: DecomposedModel, v_ref: np.ndarray) -> float:
    """0.01 / max(1, ||F(v_ref)||): stability scale of the linearized drift."""
    F = np.asarray(model.mean_matrix(np.asarray(v_ref, dtype=float)), dtype=float)
    return 0.01 / max(1.0, float(np.linalg.norm(F, 2)))


def _resolve_dt(model: DecomposedModel, config: SimulationConfig, v_ref: np.ndarray) -> float:
    dt = config.dt if config.dt is not None else default_dt(model, v_ref)
    J = jacobian_of_drift(model, np.asarray(v_ref, dtype=float))
    lam = float(np.max(np.abs(np.linalg.eigvals(J).real)))
    if dt * lam >= 0.5:
        warnings.warn(
            f"dt={dt:.3g} is large for the local relaxation rate {lam:.3g} "
            f"(dt * |lambda| = {dt * lam:.2f} >= 0.5)",
            stacklevel=2,
        )
    return dt


class _NoiseBank:
    """Chunked normal draws from per-(replicate, lane) Philox streams.

    Layout (R, L, chunk, dim): the (chunk, dim) slab of one stream is
    contiguous, so each stream is consumed sequentially in fixed-size chunks
    regardless of how the run is windowed or which replicates remain active.
    """

    def __init__(self, seed: int, family: int, replicate_ids, lanes: int, dim: int):
        self._gens = [
            [stream(seed, family, int(r), lane) for lane in range(lanes)]
            for r in replicate_ids
        ]
        self._lanes = lanes
        self._dim = dim
        self._buf = np.empty((len(self._gens), lanes, _NOISE_CHUNK, dim))
        self._cursor = _NOISE_CHUNK  # force a draw on first use

    def _refill(self):
        for i, gens in enumerate(self._gens):
            for lane, g in enumerate(gens):
                g.standard_normal((_NOISE_CHUNK, self._dim), out=self._buf[i, lane])
        self._cursor = 0

    def next(self) -> np.ndarray:
        """Noise for one step, shape (R, lanes, dim)."""
        if self._cursor >= _NOISE_CHUNK:
            self._refill()
        out = self._buf[:, :, self._cursor, :]
        self._cursor += 1
        return out

    def drop(self, keep: np.ndarray):
        self._gens = [g for g, k in zip(self._gens, keep) if k]
        self._buf = self._buf[keep]


def _batch_mean_matrix(model: DecomposedModel, V: np.ndarray) -> np.ndarray:
    if model.mean_matrix_batch is not None:
        return np.asarray(model.mean_matrix_batch(V), dtype=float)
    return np.stack([np.asarray(model.mean_matrix(v), dtype=float) for v in V])


class FractionWalker:
    """Vectorized Euler-Maruyama stepper for a block of replicates.

    The state is kept internally as (R, K, E), matching the noise-buffer
    layout so each step avoids transposes; record callbacks receive the
    public (R, E, K) orientation.
    """

    def __init__(
        self,
        model: DecomposedModel,
        U0: np.ndarray,
        config: SimulationConfig,
        dt: float,
        replicate_ids,
    ):
        U0 = np.atleast_2d(np.asarray(U0, dtype=float))
        if U0.ndim != 2 or U0.shape[1] != config.K:
            raise ConfigError(f"U0 must have shape (E, K={config.K}); got {U0.shape}")
        if np.any(U0 < 0):
            raise ConfigError("U0 must be nonnegative")
        self.model = model
        self.config = config
        self.dt = float(dt)
        self.replicate_ids = np.asarray(list(replicate_ids), dtype=int)
        R = self.replicate_ids.size
        self.E, self.K = U0.shape
        self._U = np.broadcast_to(U0.T, (R, self.K, self.E)).copy()
        self.step = 0
        self._noise = _NoiseBank(
            config.seed, FAMILY_FRACTIONS, self.replicate_ids, lanes=self.K, dim=self.E
        )
        self._sq = math.sqrt(self.dt / config.N)
        self._reflect = config.boundary_policy == "reflect-at-zero"
        # S(U) as one BLAS product: (R, K E) @ (K E, E) sum-over-k matrix.
        self._sum_kE = np.tile(np.eye(self.E), (self.K, 1))

    @property
    def t(self) -> float:
        return self.step * self.dt

    @property
    def composition(self) -> np.ndarray:
        """Current states in the public (R, E, K) orientation (a view)."""
        return self._U.transpose(0, 2, 1)

    def _noise_term(self, V: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """sigma(S(U+), U^{k,+}) xi^k in (R, K, E) layout; state already >= 0."""
        m = self.model
        if m.noise_diag_batch is not None:
            amp = m.noise_diag_batch(V[:, np.newaxis, :], self._U)
            amp *= xi
            return amp
        if m.noise_factor_batch is not None:
            out = np.empty_like(self._U)
            for k in range(self.K):
                sig = np.asarray(m.noise_factor_batch(V, self._U[:, k, :]), dtype=float)
                out[:, k, :] = np.einsum("rxy,ry->rx", sig, xi[:, k, :])
            return out
        out = np.empty_like(self._U)
        for r in range(self._U.shape[0]):
            for k in range(self.K):
                sig = np.asarray(m.noise_factor(V[r], self._U[r, k, :]), dtype=float)
                out[r, k, :] = sig @ xi[r, k, :]
        return out

    def run_steps(self, n_steps: int, record_steps=None, on_record: Optional[Callable] = None):
        """Advance n_steps; call on_record(step, U (R,E,K), replicate_ids) at markers."""
        record = np.zeros(0, dtype=bool)
        if record_steps is not None:
            record = np.zeros(self.step + n_steps + 1, dtype=bool)
            rs = np.asarray(record_steps, dtype=int)
            record[rs[rs <= self.step + n_steps]] = True
            if record[self.step] and on_record is not None:
                on_record(self.step, self.composition, self.replicate_ids)
        U, dt, sq = self._U, self.dt, self._sq
        R = U.shape[0]
        target = self.step + n_steps
        while self.step < target:
            V = U.reshape(R, self.K * self.E) @ self._sum_kE
            F = _batch_mean_matrix(self.model, V)
            drift = np.matmul(U, F.transpose(0, 2, 1))
            xi = self._noise.next()  # (R, K, E)
            noise = self._noise_term(V, xi)
            drift *= dt
            noise *= sq
            U += drift
            U += noise
            if self._reflect:
                np.abs(U, out=U)
            else:
                np.maximum(U, 0.0, out=U)
            self.step += 1
            if self.step % _FINITE_CHECK_EVERY == 0 and not np.all(np.isfinite(U)):
                bad = ~np.all(np.isfinite(U), axis=(1, 2))
                raise SimulationError(
                    f"non-finite state in replicates {self.replicate_ids[bad][:5]}",
                    step=self.step,
                    seed=self.config.seed,
                )
            if record.size > self.step and record[self.step] and on_record is not None:
                on_record(self.step, self.composition, self.replicate_ids)
        if not np.all(np.isfinite(U)):
            raise SimulationError("non-finite state", step=self.step, seed=self.config.seed)

    def drop(self, keep: np.ndarray):
        """Freeze and remove replicates where keep is False."""
        keep = np.asarray(keep, dtype=bool)
        self._U = self._U[keep]
        self.replicate_ids = self.replicate_ids[keep]
        self._noise.drop(keep)


class TotalWalker:
    """Euler-Maruyama stepper for the total-population system (R, E)."""

    def __init__(self, model, V0, config: SimulationConfig, dt: float, replicate_ids):
        V0 = np.asarray(V0, dtype=float)
        if np.any(V0 < 0):
            raise ConfigError("V0 must be nonnegative")
        self.model = model
        self.config = config
        self.dt = float(dt)
        self.replicate_ids = np.asarray(list(replicate_ids), dtype=int)
        R = self.replicate_ids.size
        self.E = V0.size
        self.V = np.broadcast_to(V0, (R, self.E)).copy()
        self.step = 0
        self._noise = _NoiseBank(config.seed, FAMILY_TOTAL, self.replicate_ids, lanes=1, dim=self.E)
        self._sq = math.sqrt(self.dt / config.N)
        self._reflect = config.boundary_policy == "reflect-at-zero"

    def run_steps(self, n_steps: int, record_steps=None, on_record=None):
        record = np.zeros(0, dtype=bool)
        if record_steps is not None:
            record = np.zeros(self.step + n_steps + 1, dtype=bool)
            rs = np.asarray(record_steps, dtype=int)
            record[rs[rs <= self.step + n_steps]] = True
            if record[self.step] and on_record is not None:
                on_record(self.step, self.V, self.replicate_ids)
        m = self.model
        target = self.step + n_steps
        while self.step < target:
            F = _batch_mean_matrix(m, self.V)
            drift = np.einsum("rxy,ry->rx", F, self.V)
            xi = self._noise.next()[:, 0, :]  # (R, E)
            if m.noise_diag_batch is not None:
                noise = m.noise_diag_batch(self.V, self.V) * xi
            elif m.noise_factor_batch is not None:
                sig = np.asarray(m.noise_factor_batch(self.V, self.V), dtype=float)
                noise = np.einsum("rxy,ry->rx", sig, xi)
            else:
                noise = np.stack(
                    [np.asarray(m.noise_factor(v, v), dtype=float) @ x for v, x in zip(self.V, xi)]
                )
            self.V += drift * self.dt + noise * self._sq
            if self._reflect:
                np.abs(self.V, out=self.V)
            else:
                np.maximum(self.V, 0.0, out=self.V)
            self.step += 1
            if self.step % _FINITE_CHECK_EVERY == 0 and not np.all(np.isfinite(self.V)):
                raise SimulationError("non-finite state", step=self.step, seed=self.config.seed)
            if record.size > self.step and record[self.step] and on_record is not None:
                on_record(self.step, self.V, self.replicate_ids)
        if not np.all(np.isfinite(self.V)):
            raise SimulationError("non-finite state", step=self.step, seed=self.config.seed)


def _record_grid(n_steps: int, max_points: int) -> np.ndarray:
    """<= max_points step indices from 0 to n_steps, endpoints included."""
    count = min(max_points, n_steps + 1)
    return np.unique(np.round(np.linspace(0, n_steps, count)).astype(int))


def _parallel_blocks(total: int, processes: int):
    """Split replicate indices 0..total-1 into per-process blocks."""
    bounds = np.linspace(0, total, processes + 1).astype(int)
    return [(int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


_WORKER_PAYLOAD = None


def _block_worker(bounds):
    lo, hi = bounds
    fn = _WORKER_PAYLOAD
    return fn(lo, hi)


def _run_blocks(fn, total: int, processes: int):
    """Run fn(lo, hi) over replicate blocks, forking when processes > 1.

    Replicate streams are keyed by the global replicate index, so the
    partition does not affect any replicate's draws and results are merged
    in replicate order.
    """
    global _WORKER_PAYLOAD
    processes = max(1, min(processes, total))
    if processes == 1 or os.name != "posix":
        return [fn(0, total)]
    import multiprocessing as mp

    ctx = mp.get_context("fork")
    blocks = _parallel_blocks(total, processes)
    _WORKER_PAYLOAD = fn
    try:
        with ctx.Pool(len(blocks)) as pool:
            return pool.map(_block_worker, blocks)
    finally:
        _WORKER_PAYLOAD = None


def simulate_fractions(
    model: DecomposedModel,
    U0: np.ndarray,
    config: SimulationConfig,
    h_tilde: Optional[np.ndarray] = None,
    processes: int = 1,
) -> Trajectory:
    """Sample paths of the K-fraction system on the ecological clock."""
    if config.t_end_clock != "ecological":
        raise ConfigError("simulate_fractions runs on the ecological clock; "
                          "use rescaled_fraction_process for evolutionary horizons")
    U0 = np.atleast_2d(np.asarray(U0, dtype=float))
    v_ref = U0.sum(axis=1) if h_tilde is None else h_tilde
    dt = _resolve_dt(model, config, v_ref)
    n_steps = max(1, int(math.ceil(config.t_end / dt)))
    rec = _record_grid(n_steps, config.store_points)

    def run_block(lo, hi):
        out = np.empty((hi - lo, rec.size) + U0.shape)
        pos = {s: i for i, s in enumerate(rec)}

        def on_record(step, U, _ids):
            out[:, pos[step]] = U

        walker = FractionWalker(model, U0, config, dt, range(lo, hi))
        walker.run_steps(n_steps, record_steps=rec, on_record=on_record)
        return out

    states = np.concatenate(_run_blocks(run_block, config.replicates, processes), axis=0)
    return Trajectory(
        times=rec * dt,
        states=states,
        kind="fractions",
        clock="ecological",
        seed=config.seed,
        config_hash=config.hash(),
    )


def simulate_total(
    model: DecomposedModel,
    V0: np.ndarray,
    config: SimulationConfig,
    h_tilde: Optional[np.ndarray] = None,
    processes: int = 1,
) -> Trajectory:
    """Sample paths of the total-population system on the ecological clock."""
    if config.t_end_clock != "ecological":
        raise ConfigError("simulate_total runs on the ecological clock")
    V0 = np.asarray(V0, dtype=float)
    dt = _resolve_dt(model, config, V0 if h_tilde is None else h_tilde)
    n_steps = max(1, int(math.ceil(config.t_end / dt)))
    rec = _record_grid(n_steps, config.store_points)

    def run_block(lo, hi):
        out = np.empty((hi - lo, rec.size, V0.size))
        pos = {s: i for i, s in enumerate(rec)}

        def on_record(step, V, _ids):
            out[:, pos[step]] = V

        walker = TotalWalker(model, V0, config, dt, range(lo, hi))
        walker.run_steps(n_steps, record_steps=rec, on_record=on_record)
        return out

    states = np.concatenate(_run_blocks(run_block, config.replicates, processes), axis=0)
    return Trajectory(
        times=rec * dt,
        states=states,
        kind="total",
        clock="ecological",
        seed=config.seed,
        config_hash=config.hash(),
    )


def simulate_wright_fisher(
    K: int,
    theta0: np.ndarray,
    dt: float,
    t_end: float,
    seed: int,
    replicates: int,
    store_points: int = 2048,
) -> Trajectory:
    """Reference (K-1)-dimensional Wright-Fisher diffusion on the simplex.

    Euler steps with the exact covariance factor of
    cov = diag(theta) - theta theta^T, namely
    x_i = sqrt(theta_i) (xi_i - sqrt(theta_i) sum_j sqrt(theta_j) xi_j),
    followed by clip-and-renormalize back onto the simplex. Simplex vertices
    are absorbing (the factor vanishes there).
    """
    theta0 = np.asarray(theta0, dtype=float)
    if theta0.size != K or np.any(theta0 < 0) or abs(theta0.sum() - 1.0) > 1e-12:
        raise ConfigError("theta0 must be a length-K point on the simplex")
    if dt <= 0 or t_end <= 0:
        raise ConfigError("dt and t_end must be positive")
    n_steps = max(1, int(math.ceil(t_end / dt)))
    rec = _record_grid(n_steps, store_points)
    pos = {s: i for i, s in enumerate(rec)}

    theta = np.broadcast_to(theta0, (replicates, K)).copy()
    out = np.empty((replicates, rec.size, K))
    bank = _NoiseBank(seed, FAMILY_WF, range(replicates), lanes=1, dim=K)
    sq_dt = math.sqrt(dt)
    if 0 in pos:
        out[:, 0] = theta
    for step in range(1, n_steps + 1):
        xi = bank.next()[:, 0, :]  # (R, K)
        root = np.sqrt(theta)
        proj = np.einsum("rk,rk->r", root, xi)
        theta += root * (xi - root * proj[:, np.newaxis]) * sq_dt
        np.maximum(theta, 0.0, out=theta)
        theta /= theta.sum(axis=1, keepdims=True)
        if step in pos:
            out[:, pos[step]] = theta
    return Trajectory(
        times=rec * dt,
        states=out,
        kind="wright_fisher",
        clock="evolutionary",
        seed=seed,
        config_hash="",
    )


def rescaled_fraction_process(
    model: DecomposedModel,
    report: EquilibriumReport,
    U0: np.ndarray,
    config: SimulationConfig,
    processes: int = 1,
) -> Trajectory:
    """Fraction system run to the evolutionary horizon t_end N / Sigma^2.

    Samples are taken on the evolutionary clock. Records the fraction
    weights theta_hat^k = <U^k, h> and the deviation diagnostics
    ||S(U) - h_tilde||, max_k ||Z^k|| with Z^k = U^k - <U^k, h> h_tilde, and
    the distance to the invariant manifold ||U - theta_hat x h_tilde|| with
    theta_hat clipped to the simplex.
    """
    if report.sigma_sq <= 0:
        raise ConfigError(
            "sigma_sq must be positive: without genetic drift the evolutionary "
            "time rescaling N/sigma_sq is undefined"
        )
    U0 = np.atleast_2d(np.asarray(U0, dtype=float))
    h, h_tilde = report.h, report.h_tilde
    scale = config.N / report.sigma_sq  # ecological units per evolutionary unit
    t_eco = config.t_end * scale if config.t_end_clock == "evolutionary" else config.t_end
    t_evo_end = t_eco / scale
    dt = _resolve_dt(model, config, h_tilde)
    n_steps = max(1, int(math.ceil(t_eco / dt)))
    rec = _record_grid(n_steps, config.store_points)
    E, K = U0.shape

    def run_block(lo, hi):
        R = hi - lo
        theta_out = np.empty((R, rec.size, K))
        diag_total = np.empty((R, rec.size))
        diag_z = np.empty((R, rec.size))
        diag_gamma = np.empty((R, rec.size))
        states = np.empty((R, rec.size, E, K)) if config.store_states else None
        pos = {s: i for i, s in enumerate(rec)}

        def on_record(step, U, _ids):
            i = pos[step]
            th = np.einsum("rek,e->rk", U, h)
            theta_out[:, i] = th
            S = U.sum(axis=2)
            diag_total[:, i] = np.linalg.norm(S - h_tilde, axis=1)
            Z = U - th[:, np.newaxis, :] * h_tilde[np.newaxis, :, np.newaxis]
            diag_z[:, i] = np.max(np.linalg.norm(Z, axis=1), axis=1)
            th_clip = np.maximum(th, 0.0)
            th_clip = th_clip / np.maximum(th_clip.sum(axis=1, keepdims=True), 1e-300)
            G = U - th_clip[:, np.newaxis, :] * h_tilde[np.newaxis, :, np.newaxis]
            diag_gamma[:, i] = np.linalg.norm(G.reshape(R, -1), axis=1)
            if states is not None:
                states[:, i] = U

        walker = FractionWalker(model, U0, config, dt, range(lo, hi))
        walker.run_steps(n_steps, record_steps=rec, on_record=on_record)
        return theta_out, diag_total, diag_z, diag_gamma, states

    parts = _run_blocks(run_block, config.replicates, processes)
    theta = np.concatenate([p[0] for p in parts], axis=0)
    diagnostics = {
        "total_deviation": np.concatenate([p[1] for p in parts], axis=0),
        "max_z_norm": np.concatenate([p[2] for p in parts], axis=0),
        "dist_to_manifold": np.concatenate([p[3] for p in parts], axis=0),
    }
    states = (
        np.concatenate([p[4] for p in parts], axis=0) if config.store_states else None
    )
    times_evo = rec * dt / scale
    # Guard against a duplicate trailing time from ceil rounding.
    if times_evo[-1] > t_evo_end:
        times_evo = np.minimum(times_evo, t_evo_end + (times_evo[-1] - t_evo_end))
    return Trajectory(
        times=times_evo,
        states=states,
        kind="fractions",
        clock="evolutionary",
        seed=config.seed,
        config_hash=config.hash(),
        theta=theta,
        diagnostics=diagnostics,
    )
