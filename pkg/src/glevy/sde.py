"""Solvers for jump SDEs driven by the controlled canonical process.

The equation is::

    dY = b(t,Y) dt + h_ij(t,Y) d<B^i,B^j> + sigma_i(t,Y) dB^i + int K(t,Y,z) L(dt,dz)

Under a control with triple ``(v, p, Q)`` on a step, ``dB = p dt + Q dW``,
``d<B> = QQ^T dt`` and the jumps are the base marks pushed through ``g_v``.

Coefficient callables are vectorized: ``y`` has shape ``(..., n)`` and ``t`` is
a scalar or an array broadcasting against ``y[..., 0]``.  ``b`` returns
``(..., n)``, ``h`` returns ``(..., d, d, n)``, ``sigma`` returns ``(..., d, n)``
and ``K(t, y, z)`` with ``z`` of shape ``(..., d)`` returns ``(..., n)``.
"""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from .noise import (NoiseBatch, NoiseRealization, TimeGrid, Tilt, bridge_increment,
                    control_schedule, event_grid, sample_noise_batch)
from .uncertainty import ControlPath, UncertaintySet, ensure_valid

PATH_BLOCK = 4096


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, time: float):
        super().__init__(f"state became non-finite at step {step} (t={time:.6g})")
        self.step = step
        self.time = time


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, log: list):
        super().__init__(message)
        self.log = log


def thread_count() -> int:
    env = os.environ.get("GLEVY_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class Coefficients:
    n: int
    d: int
    b: Callable | None = None
    h: Callable | None = None
    sigma: Callable | None = None
    K: Callable | None = None
    name: str = "custom"
    zero_at_zero: bool = False

    def increment(self, t, y, dt, dB, QQ):
        """Left-point continuous increment over one (sub-)interval."""
        inc = np.zeros_like(y)
        dt_ = np.asarray(dt)[..., None] if np.ndim(dt) else dt
        if self.b is not None:
            inc += self.b(t, y) * dt_
        if self.h is not None:
            inc += np.einsum("...ijn,...ij->...n", self.h(t, y), QQ) * dt_
        if self.sigma is not None:
            inc += np.einsum("...in,...i->...n", self.sigma(t, y), dB)
        return inc

    def jump(self, t, y, z):
        if self.K is None:
            return np.zeros_like(y)
        return self.K(t, y, z)

    def check_zero_at_zero(self, times, marks, tol: float = 1e-12) -> bool:
        """Spot-check that every coefficient vanishes at ``y = 0``."""
        times = np.asarray(times, dtype=float)
        y = np.zeros((times.size, self.n))
        vals = []
        if self.b is not None:
            vals.append(self.b(times, y))
        if self.h is not None:
            vals.append(self.h(times, y))
        if self.sigma is not None:
            vals.append(self.sigma(times, y))
        if self.K is not None:
            for z in np.asarray(marks, dtype=float).reshape(-1, self.d):
                vals.append(self.K(times, y, np.broadcast_to(z, (times.size, self.d))))
        return all(np.max(np.abs(v), initial=0.0) <= tol for v in vals)


# -- batch engine ---------------------------------------------------------------

@dataclass
class BatchResult:
    """Per-control, per-path output of :func:`simulate`.

    ``values`` has shape ``(C, P, R, n)`` for the record times, ``sup_sq`` is
    the running maximum of ``|Y|^2`` over all grid nodes and jump instants.
    Under a tilted sampling measure ``log_weight`` (shape ``(P, R)``) holds the
    log likelihood ratio at each record time; it is shared by all controls.
    """

    controls: list
    record_times: np.ndarray
    values: np.ndarray
    sup_sq: np.ndarray | None
    diverged: np.ndarray  # (C, P)
    first_bad_step: np.ndarray  # (C, P), -1 if finite
    log_weight: np.ndarray | None = None

    @property
    def terminal(self) -> np.ndarray:
        return self.values[:, :, -1]

    def control(self, c: int) -> "BatchResult":
        return BatchResult([self.controls[c]], self.record_times, self.values[c:c + 1],
                           None if self.sup_sq is None else self.sup_sq[c:c + 1],
                           self.diverged[c:c + 1], self.first_bad_step[c:c + 1],
                           self.log_weight)


@dataclass
class _ControlTables:
    p: np.ndarray  # (C, N, d)
    Q: np.ndarray  # (C, N, d, d)
    QQ: np.ndarray
    G: np.ndarray  # (C, N, n_base, d) mapped jump vectors
    moves: np.ndarray  # (C, N, n_base)


def _control_tables(U: UncertaintySet, controls, grid: TimeGrid) -> _ControlTables:
    maps = U.jump_maps
    G_all = np.stack([g.table for g in maps])
    M_all = np.stack([g.moves for g in maps])
    QQ_all = U.vol_squares()
    iv, ip, iq = [], [], []
    for th in controls:
        th.check(U)
        sched = control_schedule(th, grid)
        tri = np.asarray(th.triples)[sched]
        iv.append(tri[:, 0]); ip.append(tri[:, 1]); iq.append(tri[:, 2])
    iv, ip, iq = np.array(iv), np.array(ip), np.array(iq)
    return _ControlTables(U.drifts[ip], U.volatilities[iq], QQ_all[iq], G_all[iv], M_all[iv])


def simulate_block(coeffs: Coefficients, U: UncertaintySet, controls: Sequence[ControlPath],
                   noise: NoiseBatch, y0, record_steps: Sequence[int] = (),
                   track_sup: bool = False, block_steps: int = 256,
                   tables: _ControlTables | None = None) -> BatchResult:
    """Euler scheme for every control on every path of one noise batch.

    All controls see the same noise (common random numbers).  Jumps are taken
    at their exact times: the continuous part is advanced to the jump with a
    Brownian-bridge split of the step increment, then ``K`` is applied at the
    left limit.
    """
    grid = noise.grid
    C, P, n = len(controls), noise.n_paths, coeffs.n
    if coeffs.d != U.d:
        raise ValueError(f"coefficients have d={coeffs.d}, uncertainty set d={U.d}")
    tab = tables if tables is not None else _control_tables(U, controls, grid)
    nodes = grid.nodes
    dt = grid.dt
    record_steps = sorted(set(int(k) for k in record_steps) | {grid.n_steps})
    rec_pos = {k: i for i, k in enumerate(record_steps)}
    values = np.empty((C, P, len(record_steps), n))
    Y = np.broadcast_to(np.asarray(y0, dtype=float), (C, P, n)).copy()
    sup = (Y ** 2).sum(-1) if track_sup else None
    first_bad = np.full((C, P), -1, dtype=np.int64)
    if 0 in rec_pos:
        values[:, :, rec_pos[0]] = Y
    tilt = noise.tilt
    if tilt is not None:
        wsum = np.zeros((P, U.d))
        w_rec = np.zeros((P, len(record_steps), U.d))

    with np.errstate(all="ignore"):
        for start, dwb in noise.iter_increments(block_steps):
            for j in range(dwb.shape[1]):
                k = start + j
                t, t1 = nodes[k], nodes[k + 1]
                dwk = dwb[:, j]
                pk, Qk, QQk = tab.p[:, k], tab.Q[:, k], tab.QQ[:, k, None]
                dB = pk[:, None, :] * dt + np.einsum("cij,pj->cpi", Qk, dwk)
                Ynew = Y + coeffs.increment(t, Y, dt, dB, QQk)
                sl = noise.jumps_in_step(k)
                if sl.stop > sl.start:
                    jp = noise.jump_path[sl]
                    upaths, first, inv = np.unique(jp, return_index=True, return_inverse=True)
                    rank = np.arange(jp.size) - first[inv]
                    jt, jm, jz = noise.jump_time[sl], noise.jump_mark[sl], noise.jump_normal[sl]
                    y = Y[:, upaths]
                    s = np.full(upaths.size, t)
                    wacc = np.zeros((upaths.size, U.d))
                    dwp = dwk[upaths]
                    for r in range(rank.max() + 1):
                        sel = rank == r
                        li = inv[sel]
                        u = jt[sel]
                        h_ = u - s[li]
                        inc = bridge_increment(s[li], u, t1, dwp[li] - wacc[li], jz[sel])
                        dBs = pk[:, None, :] * h_[None, :, None] + np.einsum("cij,mj->cmi", Qk, inc)
                        ys = y[:, li]
                        ys = ys + coeffs.increment(s[li], ys, h_, dBs, QQk)
                        if track_sup:
                            np.maximum.at(sup, (slice(None), upaths[li]), (ys ** 2).sum(-1))
                        mv = tab.moves[:, k][:, jm[sel]]
                        if coeffs.K is not None and mv.any():
                            z = tab.G[:, k][:, jm[sel]]
                            ys = ys + np.where(mv[..., None], coeffs.K(u, ys, z), 0.0)
                        if track_sup:
                            np.maximum.at(sup, (slice(None), upaths[li]), (ys ** 2).sum(-1))
                        y[:, li] = ys
                        s[li] = u
                        wacc[li] += inc
                    h_ = t1 - s
                    dBs = pk[:, None, :] * h_[None, :, None] + np.einsum("cij,mj->cmi", Qk, dwp - wacc)
                    Ynew[:, upaths] = y + coeffs.increment(s, y, h_, dBs, QQk)
                Y = Ynew
                if track_sup:
                    np.maximum(sup, (Y ** 2).sum(-1), out=sup)
                if tilt is not None:
                    wsum += dwk
                if k + 1 in rec_pos:
                    values[:, :, rec_pos[k + 1]] = Y
                    if tilt is not None:
                        w_rec[:, rec_pos[k + 1]] = wsum
            bad = ~np.isfinite(Y).all(-1) & (first_bad < 0)
            first_bad[bad] = start + dwb.shape[1]
    diverged = first_bad >= 0
    logw = None
    if tilt is not None:
        counts = np.stack([np.bincount(noise.jump_path[noise.jump_step < k], minlength=P)
                           for k in record_steps], axis=1)
        elapsed = nodes[record_steps] - grid.t0
        logw = tilt.log_weight(w_rec, counts, elapsed, U.base.mass)
    return BatchResult(list(controls), nodes[record_steps], values, sup, diverged, first_bad,
                       logw)


def simulate(coeffs: Coefficients, U: UncertaintySet, controls: Sequence[ControlPath],
             grid: TimeGrid, n_paths: int, seed: int, y0, record_times: Sequence[float] = (),
             track_sup: bool = False, threads: int | None = None,
             path_block: int = PATH_BLOCK, tilt: Tilt | None = None) -> BatchResult:
    """Simulate ``n_paths`` paths under every control with shared noise.

    Paths are cut into fixed blocks of ``path_block`` and the blocks may run on
    several threads; the output does not depend on the thread count.  With a
    ``tilt`` the noise is drawn under the tilted measure and the result carries
    the likelihood-ratio weights.
    """
    ensure_valid(U)
    controls = list(controls)
    if not controls:
        raise ValueError("no controls to simulate")
    record_steps = [grid.node_index(t) for t in record_times]
    tables = _control_tables(U, controls, grid)
    y0 = np.asarray(y0, dtype=float)
    starts = list(range(0, n_paths, path_block))

    def run(s):
        paths = np.arange(s, min(s + path_block, n_paths))
        noise = sample_noise_batch(grid, U.base, seed, paths, tilt=tilt)
        y0_blk = y0[s:s + paths.size] if y0.ndim == 2 else y0
        return simulate_block(coeffs, U, controls, noise, y0_blk, record_steps, track_sup,
                              tables=tables)

    workers = min(threads or thread_count(), len(starts))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return BatchResult(
        controls, parts[0].record_times,
        np.concatenate([p.values for p in parts], axis=1),
        np.concatenate([p.sup_sq for p in parts], axis=1) if track_sup else None,
        np.concatenate([p.diverged for p in parts], axis=1),
        np.concatenate([p.first_bad_step for p in parts], axis=1),
        np.concatenate([p.log_weight for p in parts]) if tilt is not None else None)


# -- single-path solvers -----------------------------------------------------------

@dataclass
class SdePath:
    times: np.ndarray
    y: np.ndarray  # (E, n)
    is_jump: np.ndarray
    control: str = ""
    seed: int = 0
    path_index: int = 0

    @property
    def terminal(self) -> np.ndarray:
        return self.y[-1]

    def node_values(self) -> np.ndarray:
        return self.y[~self.is_jump]

    def at(self, t: float) -> np.ndarray:
        i = np.searchsorted(self.times, t, side="right") - 1
        return self.y[max(i, 0)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time"] + [f"y_{i + 1}" for i in range(self.y.shape[1])] + ["event_flag"])
        for t, row, j in zip(self.times, self.y, self.is_jump):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row] + [int(j)])
        return buf.getvalue()


def _path_inputs(coeffs, theta, noise, U):
    ensure_valid(U)
    theta.check(U)
    if coeffs.d != U.d or noise.d != U.d:
        raise ValueError("dimension mismatch between coefficients, noise and U")
    ev = event_grid(noise)
    sched = control_schedule(theta, noise.grid)
    tri = np.asarray(theta.triples)[sched[ev.step]]
    p = U.drifts[tri[:, 1]]
    Q = U.volatilities[tri[:, 2]]
    QQ = U.vol_squares()[tri[:, 2]]
    maps = U.jump_maps
    has = ev.mark >= 0
    # an extra inert column serves the steps without an event (and a null base measure)
    n_base = U.base.n_atoms
    mk = np.where(has, ev.mark, n_base)
    G = np.stack([np.vstack([g.table, np.zeros((1, U.d))]) for g in maps])[tri[:, 0], mk]
    moves = np.stack([np.append(g.moves, False) for g in maps])[tri[:, 0], mk]
    dB = p * ev.dt[:, None] + np.einsum("eij,ej->ei", Q, ev.dw)
    return ev, dB, QQ, G, moves


def euler_solve(coeffs: Coefficients, theta: ControlPath, noise: NoiseRealization, y0,
                U: UncertaintySet) -> SdePath:
    """Left-point Euler scheme along one noise realization, jumps at exact times."""
    ev, dB, QQ, G, moves = _path_inputs(coeffs, theta, noise, U)
    y = np.array(np.broadcast_to(np.asarray(y0, dtype=float), (coeffs.n,)))
    times, ys, flags = [noise.grid.t0], [y.copy()], [False]
    with np.errstate(all="ignore"):
        for e in range(ev.t.size):
            y = y + coeffs.increment(ev.t[e], y, ev.dt[e], dB[e], QQ[e])
            if moves[e]:
                te = ev.t_end[e]
                y = y + coeffs.jump(te, y, G[e])
                times.append(te); ys.append(y.copy()); flags.append(True)
            if not np.all(np.isfinite(y)):
                raise DivergenceError(int(ev.step[e]), float(ev.t_end[e]))
            if ev.node[e]:
                times.append(ev.t_end[e]); ys.append(y.copy()); flags.append(False)
    return SdePath(np.array(times), np.array(ys), np.array(flags), theta.name, noise.seed,
                   noise.path_index)


def picard_solve(coeffs: Coefficients, theta: ControlPath, noise: NoiseRealization, y0,
                 U: UncertaintySet, tol: float = 1e-8, max_iter: int = 50):
    """Successive approximations on a fixed noise realization.

    Iterate ``n`` evaluates every integral against iterate ``n-1`` (left
    points, left limits for the jump term) and is obtained by one cumulative
    sum over the event grid.  Returns ``(path, log)`` where ``log`` holds the
    sup-norm distance between consecutive iterates.
    """
    ev, dB, QQ, G, moves = _path_inputs(coeffs, theta, noise, U)
    E, n = ev.t.size, coeffs.n
    y0 = np.broadcast_to(np.asarray(y0, dtype=float), (n,))
    start = np.broadcast_to(y0, (E + 1, n)).copy()  # value at the left end of each sub-interval
    pre = np.broadcast_to(y0, (E, n)).copy()  # left limit at the right end
    log = []
    with np.errstate(all="ignore"):
        for it in range(1, max_iter + 1):
            cont = coeffs.increment(ev.t, start[:-1], ev.dt, dB, QQ)
            jmp = np.zeros((E, n))
            if coeffs.K is not None and moves.any():
                jmp[moves] = coeffs.K(ev.t_end[moves], pre[moves], G[moves])
            total = np.cumsum(cont + jmp, axis=0)
            new_start = np.vstack([y0, y0 + total])
            new_pre = new_start[:-1] + cont
            diff = max(np.linalg.norm(new_start - start, axis=1).max(),
                       np.linalg.norm(new_pre - pre, axis=1).max())
            start, pre = new_start, new_pre
            log.append(float(diff))
            if not np.isfinite(diff):
                raise ConvergenceError(f"Picard iterate {it} is not finite", log)
            if diff <= tol:
                break
        else:
            raise ConvergenceError(f"no convergence in {max_iter} iterations "
                                   f"(last sup-difference {log[-1]:.3g})", log)
    keep = ev.node | moves
    times = np.concatenate([[noise.grid.t0], ev.t_end[keep]])
    ys = np.vstack([y0, start[1:][keep]])
    flags = np.concatenate([[False], moves[keep]])
    return SdePath(times, ys, flags, theta.name, noise.seed, noise.path_index), log


# -- non-Lipschitz moduli ---------------------------------------------------------------

@dataclass
class NonLipschitzModuli:
    """Growth modulus ``H(t, u)`` and continuity modulus ``F(t, u)``, both nondecreasing in u."""

    H: Callable[[float, float], float]
    F: Callable[[float, float], float] | None = None

    def check(self, times, us, tol: float = 1e-12) -> dict:
        """Testable surrogates: monotonicity in ``u`` and ``F(t, 0) = 0``.

        The Bihari-type uniqueness hypothesis on ``F`` is not checkable this way.
        """
        us = np.sort(np.asarray(us, dtype=float))
        out = {"H_monotone": True, "F_monotone": True, "F_zero_at_zero": True}
        for t in np.asarray(times, dtype=float):
            hv = np.array([self.H(t, u) for u in us])
            if np.any(np.diff(hv) < -tol):
                out["H_monotone"] = False
            if self.F is not None:
                fv = np.array([self.F(t, u) for u in us])
                if np.any(np.diff(fv) < -tol):
                    out["F_monotone"] = False
                if abs(self.F(t, 0.0)) > tol:
                    out["F_zero_at_zero"] = False
        out["ok"] = all(out.values())
        return out


@dataclass
class ModuliReport:
    global_solution: bool
    t: np.ndarray
    u: np.ndarray
    blowup_time: float | None = None
    message: str = ""

    @property
    def final(self) -> float:
        return float(self.u[-1])


def moduli_ode_check(H, M: float, u0: float, horizon: float, t0: float = 0.0,
                     overflow: float = 1e12, rtol: float = 1e-10, atol: float = 1e-12
                     ) -> ModuliReport:
    """Integrate ``du/dt = M H(t, u)`` and report a global solution or a blow-up time."""
    if M <= 0:
        raise ValueError("M must be positive")
    if isinstance(H, NonLipschitzModuli):
        H = H.H

    def rhs(t, u):
        return [M * H(t, u[0])]

    def escape(t, u):
        return u[0] - overflow

    escape.terminal = True
    escape.direction = 1
    sol = solve_ivp(rhs, (t0, horizon), [u0], method="RK45", rtol=rtol, atol=atol,
                    events=escape, dense_output=False)
    if sol.status == 1 and sol.t_events[0].size:
        tb = float(sol.t_events[0][0])
        return ModuliReport(False, sol.t, sol.y[0], tb,
                            f"solution exceeds {overflow:g} at t={tb:.6g}")
    if sol.status != 0 or not np.all(np.isfinite(sol.y)):
        tb = float(sol.t[-1])
        return ModuliReport(False, sol.t, sol.y[0], tb, f"integrator stopped: {sol.message}")
    return ModuliReport(True, sol.t, sol.y[0], None, "global on the horizon")


def osgood_modulus(delta: float = np.exp(-1.0)):
    """``u log(1/u)`` on ``(0, delta]``, continued by its tangent line (concave, nondecreasing)."""
    slope = np.log(1.0 / delta) - 1.0
    top = delta * np.log(1.0 / delta)

    def H(t, u):
        if u <= 0:
            return 0.0
        if u <= delta:
            return u * np.log(1.0 / u)
        return top + slope * (u - delta)

    return H
