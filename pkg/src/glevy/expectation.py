"""Sublinear expectations as maxima of Monte Carlo means over searched controls.

Every estimate here is a lower bound on the true supremum, which runs over all
adapted controls; the searched family consists of piecewise-constant controls
taking values in the finite uncertainty set.  All candidate controls are
simulated on the same noise (common random numbers), so comparisons between
controls and the sublinearity properties hold per batch.
"""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.stats import poisson

from . import models
from .noise import TimeGrid, Tilt, sample_noise_batch
from .sde import Coefficients, PATH_BLOCK, simulate
from .uncertainty import ControlPath, UncertaintySet, ensure_valid, extreme_controls

TAINT_FRACTION = 1e-3


class LatticeTooCoarse(ValueError):
    pass


# -- functionals -----------------------------------------------------------------

@dataclass
class PathView:
    """Recorded path values with arbitrary leading axes: ``values[..., P, R, n]``."""

    times: np.ndarray
    values: np.ndarray
    sup_sq: np.ndarray | None = None

    @classmethod
    def from_path(cls, path) -> "PathView":
        """View of a single :class:`~glevy.sde.SdePath` (``P = 1``)."""
        sup = np.array([np.max((path.y ** 2).sum(-1))])
        return cls(path.times, path.y[None], sup)

    def at(self, t: float) -> np.ndarray:
        i = np.searchsorted(self.times, t + 1e-12 * max(1.0, abs(t)), side="right") - 1
        return self.values[..., max(i, 0), :]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[..., -1, :]


@dataclass(frozen=True)
class Functional:
    """Real-valued map of a path; ``fn`` returns one value per path."""

    name: str
    fn: Callable[[PathView], np.ndarray]
    record_times: tuple = ()
    terminal_only: bool = True
    needs_sup: bool = False

    def __call__(self, view: PathView) -> np.ndarray:
        return np.asarray(self.fn(view), dtype=float)

    def _join(self, other, name, op):
        return Functional(name, lambda v: op(self(v), other(v)),
                          tuple(sorted(set(self.record_times) | set(other.record_times))),
                          self.terminal_only and other.terminal_only,
                          self.needs_sup or other.needs_sup)

    def __add__(self, other: "Functional") -> "Functional":
        return self._join(other, f"({self.name})+({other.name})", np.add)

    def scale(self, c: float) -> "Functional":
        return Functional(f"{c!r}*({self.name})", lambda v: c * self(v), self.record_times,
                          self.terminal_only, self.needs_sup)

    def __neg__(self) -> "Functional":
        return Functional(f"-({self.name})", lambda v: -self(v), self.record_times,
                          self.terminal_only, self.needs_sup)

    def power(self, p: float, absolute: bool = True) -> "Functional":
        f = (lambda v: np.abs(self(v)) ** p) if absolute else (lambda v: self(v) ** p)
        return Functional(f"|{self.name}|^{p}", f, self.record_times, self.terminal_only,
                          self.needs_sup)


def terminal(f: Callable[[np.ndarray], np.ndarray], name: str = "terminal") -> Functional:
    """Functional of the terminal state; ``f`` maps ``(..., n)`` to ``(...)``."""
    return Functional(name, lambda v: f(v.terminal))


def terminal_component(i: int = 0) -> Functional:
    return terminal(lambda y: y[..., i], f"Y_T[{i}]")


def constant(c: float) -> Functional:
    return Functional(f"{c!r}", lambda v: np.full(v.values.shape[:-2], float(c)))


def at_times(f: Callable, times: Sequence[float], name: str = "at_times") -> Functional:
    """``f(Y_{t_1}, ..., Y_{t_k})`` with each argument of shape ``(..., n)``."""
    times = tuple(float(t) for t in times)
    return Functional(name, lambda v: f(*(v.at(t) for t in times)), times, False)


def cylinder(phi: Callable, times: Sequence[float], t0: float = 0.0,
             component: int = 0, name: str = "cylinder") -> Functional:
    """``phi(X_{t_1} - X_{t_0}, X_{t_2} - X_{t_1}, ...)`` on one coordinate of the path."""
    times = tuple(float(t) for t in times)

    def fn(v):
        pts = [v.at(t0)[..., component]] + [v.at(t)[..., component] for t in times]
        return phi(*(b - a for a, b in zip(pts[:-1], pts[1:])))

    return Functional(name, fn, (float(t0),) + times, False)


def sup_square(name: str = "sup|Y|^2") -> Functional:
    return Functional(name, lambda v: v.sup_sq, (), False, True)


def indicator(event: Callable[[PathView], np.ndarray], name: str = "event",
              record_times: Sequence[float] = ()) -> Functional:
    return Functional(f"1[{name}]", lambda v: np.asarray(event(v), dtype=bool).astype(float),
                      tuple(record_times), not record_times)


# -- estimates ---------------------------------------------------------------------

@dataclass
class ControlRow:
    control: str
    mean: float
    se: float
    n_paths: int
    n_diverged: int = 0


@dataclass
class SublinearEstimate:
    value: float
    table: list
    argmax: str
    se: float
    n_paths: int
    search: str
    seed: int
    tainted: bool = False
    is_lower_bound: bool = True

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["control", "mean", "se", "n_paths", "n_diverged"])
        for r in self.table:
            w.writerow([r.control, repr(r.mean), repr(r.se), r.n_paths, r.n_diverged])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"value": self.value, "argmax": self.argmax, "se": self.se,
                "n_paths": self.n_paths, "search": self.search, "seed": self.seed,
                "tainted": self.tainted, "is_lower_bound": True}


def _stats(vals: np.ndarray, diverged: np.ndarray):
    """Mean and standard error per row, ignoring diverged paths.

    The mean is taken as ``v0 + mean(v - v0)`` so that constant samples give
    their value back exactly.
    """
    means, ses, counts, bad = [], [], [], []
    for row, dv in zip(vals, diverged):
        ok = np.isfinite(row) & ~dv
        x = row[ok]
        m = x.size
        if m == 0:
            means.append(np.nan); ses.append(np.nan); counts.append(0); bad.append(row.size)
            continue
        dx = x - x[0]
        means.append(float(x[0] + np.mean(dx)))
        ses.append(float(np.std(dx, ddof=1) / np.sqrt(m)) if m > 1 else 0.0)
        counts.append(int(m))
        bad.append(int(row.size - m))
    return means, ses, counts, bad


@dataclass
class CoordinateAscent:
    k_intervals: int = 4
    n_rounds: int = 3

    def __str__(self):
        return f"coordinate_ascent(k={self.k_intervals},rounds={self.n_rounds})"


def _resolve(coeffs, U, y0):
    coeffs = coeffs if coeffs is not None else models.canonical(U.d)
    y0 = np.zeros(coeffs.n) if y0 is None else y0
    return coeffs, y0


def evaluate_controls(functionals: Sequence[Functional], coeffs: Coefficients | None,
                      U: UncertaintySet, grid: TimeGrid, controls: Sequence[ControlPath],
                      n_paths: int, seed: int, y0=None, threads: int | None = None,
                      tilt: Tilt | None = None):
    """Per-path functional values ``(C, P)`` for each functional, plus the divergence mask.

    Under a ``tilt`` the values come multiplied by the likelihood ratio at the
    final time, so their plain means estimate means under the original measure.
    """
    coeffs, y0 = _resolve(coeffs, U, y0)
    times = sorted(set(itertools.chain.from_iterable(f.record_times for f in functionals)))
    res = simulate(coeffs, U, controls, grid, n_paths, seed, y0, record_times=times,
                   track_sup=any(f.needs_sup for f in functionals), threads=threads, tilt=tilt)
    view = PathView(res.record_times, res.values, res.sup_sq)
    with np.errstate(all="ignore"):
        out = [np.broadcast_to(f(view), res.diverged.shape) for f in functionals]
        if res.log_weight is not None:
            w = np.exp(res.log_weight[:, -1])
            out = [o * w for o in out]
    return out, res.diverged


def _rows(controls, vals, diverged):
    means, ses, counts, bad = _stats(vals, diverged)
    return [ControlRow(c.name, m, s, n, b) for c, m, s, n, b in zip(controls, means, ses, counts, bad)]


def _best(rows):
    finite = [i for i, r in enumerate(rows) if np.isfinite(r.mean)]
    if not finite:
        raise ArithmeticError("every control diverged")
    return max(finite, key=lambda i: rows[i].mean)  # first maximizer on ties


def estimate_sublinear(xi: Functional, coeffs: Coefficients | None, U: UncertaintySet,
                       grid: TimeGrid, n_paths: int, search="extremes", seed: int = 0,
                       y0=None, threads: int | None = None, tilt: Tilt | None = None
                       ) -> SublinearEstimate:
    """Lower bound on ``sup_theta E^theta[xi]`` over a searched family of controls.

    ``coeffs=None`` simulates the controlled canonical process itself.
    ``search`` is ``"extremes"`` (all constant controls), a
    :class:`CoordinateAscent`, or an explicit list of controls.  An optional
    importance-sampling ``tilt`` reweights every path by its likelihood ratio.
    """
    if n_paths < 100:
        raise ValueError("n_paths must be at least 100")
    ensure_valid(U)
    if isinstance(search, str) and search == "extremes":
        candidates = extreme_controls(U, grid.nodes)
    elif isinstance(search, CoordinateAscent):
        candidates = extreme_controls(U, grid.nodes)
    elif isinstance(search, (list, tuple)):
        candidates = list(search)
    else:
        raise ValueError(f"unknown search {search!r}")
    if not candidates:
        raise ValueError("empty search set")

    (vals,), dv = evaluate_controls([xi], coeffs, U, grid, candidates, n_paths, seed, y0,
                                    threads, tilt)
    table = _rows(candidates, vals, dv)
    best = _best(table)
    tainted_any = bool((dv.mean(axis=1) > TAINT_FRACTION).any())

    if isinstance(search, CoordinateAscent):
        k = search.k_intervals
        cgrid = np.linspace(grid.t0, grid.T, k + 1)
        current = candidates[best].refine(cgrid)
        cur_row = table[best]
        seen = {r.control for r in table}
        for _ in range(search.n_rounds):
            for j in range(k):
                cands = [current.with_interval(j, tr) for tr in U.triples()]
                (v2,), dv2 = evaluate_controls([xi], coeffs, U, grid, cands, n_paths, seed, y0,
                                               threads, tilt)
                rows = _rows(cands, v2, dv2)
                tainted_any |= bool((dv2.mean(axis=1) > TAINT_FRACTION).any())
                for r in rows:
                    if r.control not in seen:
                        seen.add(r.control)
                        table.append(r)
                i = _best(rows)
                if rows[i].mean > cur_row.mean:
                    current, cur_row = cands[i], rows[i]
        best_row = max((r for r in table if np.isfinite(r.mean)), key=lambda r: r.mean)
    else:
        best_row = table[best]

    return SublinearEstimate(best_row.mean, table, best_row.control, best_row.se, n_paths,
                             str(search) if not isinstance(search, list) else "explicit",
                             seed, tainted_any)


def capacity_estimate(event, coeffs: Coefficients | None, U: UncertaintySet, grid: TimeGrid,
                      n_paths: int, search="extremes", seed: int = 0, y0=None,
                      threads: int | None = None, tilt: Tilt | None = None):
    """``max_theta P^theta(A)`` over the searched controls; returns ``(c_hat, table)``."""
    if not isinstance(event, Functional):
        event = indicator(event)
    est = estimate_sublinear(event, coeffs, U, grid, n_paths, search, seed, y0, threads, tilt)
    return est.value, est.table


@dataclass
class MarkovRow:
    M: float
    capacity: float
    bound: float
    passed: bool
    capacity_se: float
    bound_se: float


def markov_bound_check(X: Functional, p: float, M_list: Sequence[float],
                       coeffs: Coefficients | None, U: UncertaintySet, grid: TimeGrid,
                       n_paths: int, seed: int = 0, controls=None, y0=None,
                       threads: int | None = None) -> list[MarkovRow]:
    """Check ``c(|X| > M) <= E[|X|^p] / M^p`` with both sides from one noise batch."""
    if p <= 0:
        raise ValueError("p must be positive")
    controls = list(controls) if controls is not None else extreme_controls(U, grid.nodes)
    events = [Functional(f"|X|>{M}", (lambda v, M=M: (np.abs(X(v)) > M).astype(float)),
                         X.record_times, X.terminal_only, X.needs_sup) for M in M_list]
    moment = X.power(p)
    vals, dv = evaluate_controls([moment] + events, coeffs, U, grid, controls, n_paths, seed,
                                 y0, threads)
    mrows = _rows(controls, vals[0], dv)
    mb = mrows[_best(mrows)]
    out = []
    for M, ev in zip(M_list, vals[1:]):
        crows = _rows(controls, ev, dv)
        cb = crows[_best(crows)]
        bound = mb.mean / M ** p
        bse = mb.se / M ** p
        ok = cb.mean <= bound + 3.0 * np.hypot(cb.se, bse)
        out.append(MarkovRow(float(M), cb.mean, bound, bool(ok), cb.se, bse))
    return out


# -- iterated (backward) recursion -------------------------------------------------------

def _compound_poisson(v, rate_time: float, tail: float):
    """Support and probabilities of a compound Poisson sum with Levy measure ``v`` on ``d = 1``."""
    lam = v.mass * rate_time
    if lam == 0.0:
        return np.zeros(1), np.ones(1)
    n_max = int(poisson.isf(tail, lam)) + 1
    pts = v.points[:, 0]
    w = v.weights / v.mass
    dist = {0.0: 1.0}
    vals, probs = [0.0], [poisson.pmf(0, lam)]
    for n in range(1, n_max + 1):
        nxt = {}
        for x, px in dist.items():
            for z, wz in zip(pts, w):
                key = round(x + z, 12)
                nxt[key] = nxt.get(key, 0.0) + px * wz
        dist = nxt
        pn = poisson.pmf(n, lam)
        for x, px in dist.items():
            vals.append(x)
            probs.append(pn * px)
    vals, probs = np.array(vals), np.array(probs)
    uniq, inv = np.unique(np.round(vals, 12), return_inverse=True)
    agg = np.bincount(inv, weights=probs)
    return uniq, agg / agg.sum()


def increment_laws(U: UncertaintySet, delta: float, n_quad: int = 48, tail: float = 1e-14):
    """Quadrature laws of ``X_{s+delta} - X_s`` under each constant triple (``d = 1``)."""
    gx, gw = hermegauss(n_quad)
    gw = gw / gw.sum()
    jumps = [_compound_poisson(v, delta, tail) for v in U.jump_measures]
    laws = []
    for iv, ip, iq in U.triples():
        p = U.drifts[ip, 0]
        q = abs(U.volatilities[iq, 0, 0])
        if q == 0.0:
            cx, cw = np.array([p * delta]), np.ones(1)
        else:
            cx, cw = p * delta + q * np.sqrt(delta) * gx, gw
        jx, jw = jumps[iv]
        laws.append(((cx[:, None] + jx[None, :]).ravel(), (cw[:, None] * jw[None, :]).ravel()))
    return laws


def _interp_last(A: np.ndarray, a: float, h: float, x: np.ndarray) -> np.ndarray:
    L = A.shape[-1]
    pos = (x - a) / h
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, L - 2)
    f = pos - i0
    return A[..., i0] * (1.0 - f) + A[..., i0 + 1] * f


def _interp_error(A: np.ndarray) -> float:
    if A.shape[-1] < 3:
        return 0.0
    d2 = A[..., 2:] - 2.0 * A[..., 1:-1] + A[..., :-2]
    return float(np.max(np.abs(d2))) / 8.0


def iterated_expectation(phi: Callable, times: Sequence[float], U: UncertaintySet,
                         t0: float = 0.0, lattice_step: float = 0.01, n_quad: int = 48,
                         interp_tol: float = 1e-3, tail: float = 1e-14) -> float:
    """Backward recursion for ``phi`` of the increments of the canonical process.

    The last increment is integrated out first, for every lattice value of the
    earlier ones; each stage takes the maximum over constant triples of the
    one-step expectation (Gauss-Hermite for the Brownian part, exact compound
    Poisson weights for the jumps) and the next stage reads the result back by
    linear interpolation on a uniform lattice.
    """
    ensure_valid(U)
    times = [float(t) for t in times]
    k = len(times)
    if U.d != 1:
        raise ValueError("iterated_expectation supports d = 1 only")
    if not 1 <= k <= 3:
        raise ValueError("between 1 and 3 time points are supported")
    pts = [t0] + times
    deltas = np.diff(pts)
    if np.any(deltas <= 0):
        raise ValueError("time points must increase from t0")
    laws = [increment_laws(U, dl, n_quad, tail) for dl in deltas]
    lattices = []
    for j in range(k - 1):
        lo = min(x.min() for x, _ in laws[j])
        hi = max(x.max() for x, _ in laws[j])
        L = int(np.ceil((hi - lo) / lattice_step)) + 1
        lattices.append((lo, lattice_step, lo + lattice_step * np.arange(max(L, 2))))

    # innermost stage: phi evaluated exactly in the last increment
    grids = np.meshgrid(*[lt[2] for lt in lattices], indexing="ij") if lattices else []
    A = None
    for x, w in laws[-1]:
        args = [g[..., None] for g in grids] + [x]
        vals = np.broadcast_to(np.asarray(phi(*args), dtype=float),
                               tuple(len(lt[2]) for lt in lattices) + (x.size,))
        cand = vals @ w
        A = cand if A is None else np.maximum(A, cand)

    for j in range(k - 2, -1, -1):
        a, h, _ = lattices[j]
        err = _interp_error(A)
        if err > interp_tol:
            raise LatticeTooCoarse(f"interpolation error proxy {err:.3g} exceeds {interp_tol:g}; "
                                   "refine lattice_step")
        B = None
        for x, w in laws[j]:
            cand = _interp_last(A, a, h, x) @ w
            B = cand if B is None else np.maximum(B, cand)
        A = B
    return float(A)


# -- BDG-type inequalities -------------------------------------------------------------------

@dataclass
class ElementaryIntegrand:
    """Step integrand ``sum_j phi_j(X_{t_j}) 1_{(t_j, t_{j+1}]}(r) psi(z)``.

    ``coefficients[j]`` is a number or a function of the canonical process at
    the left breakpoint (array ``(..., d)`` to ``(...)``).  ``psi`` is used by
    the jump kind only and must vanish at the origin.  ``coordinate`` selects
    ``B^i`` for the Brownian and covariation kinds.
    """

    breakpoints: Sequence[float]
    coefficients: Sequence
    psi: Callable | None = None
    coordinate: int = 0

    def coefficient(self, j: int, x: np.ndarray) -> np.ndarray:
        c = self.coefficients[j]
        if callable(c):
            return np.asarray(c(x), dtype=float)
        return np.full(x.shape[:-1], float(c))

    @classmethod
    def constant(cls, t0: float, T: float, c: float = 1.0, psi=None) -> "ElementaryIntegrand":
        return cls([t0, T], [c], psi)


REFERENCE_CONSTANTS = {"brownian": 4.0, "covariation": 4.0}


def jump_constant(T: float) -> float:
    """``2 (T + 4)``: Doob's L^2 constant plugged into the jump-integral estimate."""
    return 2.0 * (T + 4.0)


@dataclass
class BdgResult:
    kind: str
    lhs: float
    rhs: float
    ratio: float
    constant: float
    table: list

    @property
    def passed(self) -> bool:
        return self.ratio <= self.constant


def _bdg_block(kind, integrand, U, grid, controls, noise, tables):
    C, P, d = len(controls), noise.n_paths, U.d
    nodes = grid.nodes
    i = integrand.coordinate
    bp_steps = [grid.node_index(t) for t in integrand.breakpoints]
    start_of = {s: j for j, s in enumerate(bp_steps[:-1])}
    end = bp_steps[-1]
    X = np.zeros((C, P, d))
    I = np.zeros((C, P))
    sup = np.zeros((C, P))
    rhs = np.zeros((C, P))
    eta = np.zeros((C, P))
    G, moves, p_all, Q_all, QQ_all = tables
    for s0, dwb in noise.iter_increments(256):
        for jj in range(dwb.shape[1]):
            k = s0 + jj
            if k in start_of:
                j = start_of[k]
                eta = integrand.coefficient(j, X)
                span = nodes[bp_steps[j + 1]] - nodes[k]
                rhs += span * eta ** 2
            if k >= end or k < bp_steps[0]:
                active = False
            else:
                active = True
            dwk = dwb[:, jj]
            dB = p_all[:, k, None, :] * grid.dt + np.einsum("cij,pj->cpi", Q_all[:, k], dwk)
            if active and kind == "brownian":
                I = I + eta * dB[..., i]
            elif active and kind == "covariation":
                I = I + eta * QQ_all[:, k, i, i][:, None] * grid.dt
            X = X + dB
            sl = noise.jumps_in_step(k)
            if sl.stop > sl.start:
                jp, jm = noise.jump_path[sl], noise.jump_mark[sl]
                for r in range(jp.size):
                    mv = moves[:, k, jm[r]]
                    z = G[:, k, jm[r]]  # (C, d)
                    X[:, jp[r]] += np.where(mv[:, None], z, 0.0)
                    if active and kind == "jump":
                        val = np.where(mv, integrand.psi(z), 0.0)
                        I[:, jp[r]] += eta[:, jp[r]] * val
                        sup[:, jp[r]] = np.maximum(sup[:, jp[r]], I[:, jp[r]] ** 2)
            if kind != "jump":
                np.maximum(sup, I ** 2, out=sup)
    return sup, rhs


def bdg_check(kind: str, integrand: ElementaryIntegrand, U: UncertaintySet, grid: TimeGrid,
              n_paths: int, seed: int = 0, controls=None, threads: int | None = None
              ) -> BdgResult:
    """Monte Carlo comparison of ``E[sup_t |int_0^t ... |^2]`` with its BDG-type right side.

    ``kind`` is ``"jump"`` (integral against the jump measure), ``"brownian"``
    or ``"covariation"``.  The right side is ``max_theta E[int eta^2 dr]``
    times ``sup_v int psi^2 dv`` (jump), ``max (QQ^T)_ii`` (brownian) or
    ``T max (QQ^T)_ii^2`` (covariation); the returned ratio is compared with
    :func:`jump_constant` or the entry of ``REFERENCE_CONSTANTS``.
    """
    from .sde import _control_tables
    ensure_valid(U)
    if kind not in ("jump", "brownian", "covariation"):
        raise ValueError(f"unknown kind {kind!r}")
    if kind == "jump" and integrand.psi is None:
        raise ValueError("jump kind needs psi")
    controls = list(controls) if controls is not None else extreme_controls(U, grid.nodes)
    tab = _control_tables(U, controls, grid)
    tables = (tab.G, tab.moves, tab.p, tab.Q, tab.QQ)
    sups, rhss = [], []
    for s in range(0, n_paths, PATH_BLOCK):
        noise = sample_noise_batch(grid, U.base, seed, np.arange(s, min(s + PATH_BLOCK, n_paths)))
        a, b = _bdg_block(kind, integrand, U, grid, controls, noise, tables)
        sups.append(a); rhss.append(b)
    sup = np.concatenate(sups, axis=1)
    rint = np.concatenate(rhss, axis=1)
    T = grid.T - grid.t0
    ii = integrand.coordinate
    if kind == "jump":
        factor = max(v.integrate(lambda z: np.asarray(integrand.psi(z), float) ** 2)
                     for v in U.jump_measures)
        const = jump_constant(T)
    elif kind == "brownian":
        factor = float(U.vol_squares()[:, ii, ii].max())
        const = REFERENCE_CONSTANTS["brownian"]
    else:
        factor = T * float(U.vol_squares()[:, ii, ii].max()) ** 2
        const = REFERENCE_CONSTANTS["covariation"]
    rows = _rows(controls, sup, np.zeros(sup.shape, bool))
    lhs = max(r.mean for r in rows)
    rhs = float(rint.mean(axis=1).max()) * factor
    if rhs == 0.0:
        if lhs > 0.0:
            raise ArithmeticError(f"right side is zero but left side is {lhs:g}")
        ratio = 0.0
    else:
        ratio = lhs / rhs
    return BdgResult(kind, lhs, rhs, ratio, const, rows)
