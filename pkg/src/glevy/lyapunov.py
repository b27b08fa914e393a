"""Worst-case generator of a Lyapunov function and sampled stability certificates."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, stats
from scipy.stats import qmc

from .sde import Coefficients
from .uncertainty import UncertaintySet, ensure_valid

RATIO_SLACK = 1e-9
BOUND_SLACK = 1e-12
V_FLOOR = 1e-12

PASS, FAIL, NOT_CHECKED = "pass", "fail", "not-checked"


@dataclass(frozen=True)
class LyapunovFunction:
    """``V`` and its partial derivatives, all vectorized over leading axes.

    ``V(t, y)`` takes ``t`` of shape ``(m,)`` and ``y`` of shape ``(m, n)``;
    ``V_y`` returns ``(m, n)`` and ``V_yy`` returns ``(m, n, n)``.
    """

    V: Callable
    V_t: Callable
    V_y: Callable
    V_yy: Callable
    name: str = "V"

    @classmethod
    def quadratic(cls, n: int = 1, weight=None, factor: Callable | None = None,
                  dfactor: Callable | None = None) -> "LyapunovFunction":
        """``V = c(t) y^T W y`` with ``W`` defaulting to the identity and ``c = 1``."""
        W = np.eye(n) if weight is None else np.asarray(weight, dtype=float)
        W = 0.5 * (W + W.T)
        c = factor if factor is not None else (lambda t: np.ones_like(np.asarray(t, float)))
        dc = dfactor if dfactor is not None else (lambda t: np.zeros_like(np.asarray(t, float)))

        def form(y):
            return np.einsum("...i,ij,...j->...", y, W, y)

        def V(t, y):
            return c(t) * form(y)

        def V_t(t, y):
            return dc(t) * form(y)

        def V_y(t, y):
            return 2.0 * np.asarray(c(t))[..., None] * (y @ W)

        def V_yy(t, y):
            return 2.0 * np.asarray(c(t))[..., None, None] * np.broadcast_to(W, y.shape + (n,))

        return cls(V, V_t, V_y, V_yy, "quadratic" if factor is None else "scaled_quadratic")

    def check_derivatives(self, t, y, h: float = 1e-5, rtol: float = 1e-4) -> dict:
        """Central finite differences against the supplied derivatives.

        Returns the worst relative errors; ``ok`` is true when all are within ``rtol``.
        """
        t = np.asarray(t, dtype=float)
        y = np.asarray(y, dtype=float)
        n = y.shape[-1]

        def rel(a, b):
            return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a))))

        fd_t = (self.V(t + h, y) - self.V(t - h, y)) / (2 * h)
        e_t = rel(self.V_t(t, y), fd_t)
        eye = np.eye(n)
        fd_y = np.stack([(self.V(t, y + h * eye[i]) - self.V(t, y - h * eye[i])) / (2 * h)
                         for i in range(n)], axis=-1)
        e_y = rel(self.V_y(t, y), fd_y)
        fd_yy = np.stack([(self.V_y(t, y + h * eye[i]) - self.V_y(t, y - h * eye[i])) / (2 * h)
                          for i in range(n)], axis=-1)
        e_yy = rel(self.V_yy(t, y), fd_yy)
        return {"t": e_t, "y": e_y, "yy": e_yy, "ok": max(e_t, e_y, e_yy) <= rtol}


def _prep(t, y, n):
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[-1] != n:
        y = y.reshape(-1, n)
    t = np.broadcast_to(np.asarray(t, dtype=float), y.shape[:-1]).copy()
    return t, y


def _second_order_matrix(V, coeffs, t, y):
    """``(m, d, d)`` matrix with entries ``<V_y, h_ij> + 0.5 <V_yy sigma_i, sigma_j>``."""
    m, d = y.shape[0], coeffs.d
    M = np.zeros((m, d, d))
    Vy = V.V_y(t, y)
    if coeffs.h is not None:
        M += np.einsum("mn,mijn->mij", Vy, np.broadcast_to(coeffs.h(t, y), (m, d, d, coeffs.n)))
    if coeffs.sigma is not None:
        s = np.broadcast_to(coeffs.sigma(t, y), (m, d, coeffs.n))
        M += 0.5 * np.einsum("min,mnk,mjk->mij", s, V.V_yy(t, y), s)
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def lv_operator(V: LyapunovFunction, coeffs: Coefficients, U: UncertaintySet, t, y):
    """Worst-case generator ``LV(t, y)`` with exact maxima over the finite sets.

    ``V_t + <V_y, b> + max_Q tr(M QQ^T) + max_p <V_y, sigma p>
    + max_v sum_a w_a (V(t, y + K(t, y, z_a)) - V(t, y))``.  The drift term
    vanishes when the drift set is ``{0}``.
    """
    scalar = np.ndim(y) <= 1 and np.ndim(t) == 0
    if coeffs.d != U.d:
        raise ValueError(f"coefficients have d={coeffs.d}, uncertainty set d={U.d}")
    t, y = _prep(t, y, coeffs.n)
    m, n = y.shape
    Vy = V.V_y(t, y)
    out = np.asarray(V.V_t(t, y), dtype=float).copy()
    if coeffs.b is not None:
        out += np.einsum("mn,mn->m", Vy, np.broadcast_to(coeffs.b(t, y), (m, n)))
    M = _second_order_matrix(V, coeffs, t, y)
    out += np.einsum("mij,qji->mq", M, U.vol_squares()).max(axis=1)
    if coeffs.sigma is not None and np.any(U.drifts != 0.0):
        s = np.broadcast_to(coeffs.sigma(t, y), (m, coeffs.d, n))
        out += np.einsum("mn,min,pi->mp", Vy, s, U.drifts).max(axis=1)
    if coeffs.K is not None:
        v0 = V.V(t, y)
        best = np.full(m, -np.inf)
        for v in U.jump_measures:
            acc = np.zeros(m)
            for z, w in zip(v.points, v.weights):
                k = np.broadcast_to(coeffs.K(t, y, np.broadcast_to(z, (m, U.d))), (m, n))
                acc += w * (V.V(t, y + k) - v0)
            best = np.maximum(best, acc)
        out += best
    return float(out[0]) if scalar else out


def growth_bound(coeffs: Coefficients, U: UncertaintySet, t, y) -> np.ndarray:
    """``|b|^2 + sum |h_ij|^2 + sum |sigma_i|^2 + max_v sum_a w_a |K(z_a)|^2`` pointwise."""
    t, y = _prep(t, y, coeffs.n)
    m, n, d = y.shape[0], coeffs.n, coeffs.d
    out = np.zeros(m)
    if coeffs.b is not None:
        out += (np.broadcast_to(coeffs.b(t, y), (m, n)) ** 2).sum(-1)
    if coeffs.h is not None:
        out += (np.broadcast_to(coeffs.h(t, y), (m, d, d, n)) ** 2).sum((-3, -2, -1))
    if coeffs.sigma is not None:
        out += (np.broadcast_to(coeffs.sigma(t, y), (m, d, n)) ** 2).sum((-2, -1))
    if coeffs.K is not None:
        best = np.zeros(m)
        for v in U.jump_measures:
            acc = np.zeros(m)
            for z, w in zip(v.points, v.weights):
                k = np.broadcast_to(coeffs.K(t, y, np.broadcast_to(z, (m, d))), (m, n))
                acc += w * (k ** 2).sum(-1)
            best = np.maximum(best, acc)
        out += best
    return out


# -- sampling domain -------------------------------------------------------------

@dataclass(frozen=True)
class Domain:
    """Time interval times a state box, sampled by a Halton sequence plus corners and axes."""

    t_range: tuple
    y_low: tuple
    y_high: tuple
    n_samples: int = 100_000

    @classmethod
    def box(cls, t0: float, t1: float, radius: float, n: int = 1, n_samples: int = 100_000):
        return cls((float(t0), float(t1)), (-radius,) * n, (radius,) * n, n_samples)

    @property
    def n(self) -> int:
        return len(self.y_low)

    def sample(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([self.t_range[0], *self.y_low], dtype=float)
        hi = np.array([self.t_range[1], *self.y_high], dtype=float)
        pts = qmc.Halton(d=lo.size, scramble=False).random(self.n_samples)
        pts = qmc.scale(pts, lo, hi) if np.all(hi > lo) else lo + pts * (hi - lo)
        corners = np.array(list(itertools.product(*zip(lo, hi))))
        ts = np.linspace(lo[0], hi[0], 5)
        axes = []
        for i in range(self.n):
            for s in np.linspace(lo[i + 1], hi[i + 1], 21):
                for tt in ts:
                    p = np.zeros(lo.size)
                    p[0] = tt
                    p[i + 1] = s
                    axes.append(p)
        allp = np.vstack([pts, corners, np.array(axes)])
        return allp[:, 0], allp[:, 1:]

    def to_dict(self) -> dict:
        return {"t_range": list(self.t_range), "y_low": list(self.y_low),
                "y_high": list(self.y_high), "n_samples": self.n_samples}


@dataclass
class ConditionResult:
    passed: bool
    worst_margin: float
    worst_t: float
    worst_y: list
    n_checked: int

    def witness(self) -> dict:
        return {"t": self.worst_t, "y": self.worst_y, "margin": self.worst_margin}


def _worst(margin, t, y, slack):
    i = int(np.argmax(margin))
    return ConditionResult(bool(margin[i] <= slack), float(margin[i]), float(t[i]),
                           [float(v) for v in y[i]], int(margin.size))


def check_condition_c(V: LyapunovFunction, c3: float, c4: float, domain: Domain,
                      n_samples: int | None = None) -> ConditionResult:
    """``c3 |y|^2 <= V(t, y) <= c4 |y|^2`` on the sampled domain, with ``1e-12`` slack."""
    if not (c4 >= c3 > 0):
        raise ValueError("need C4 >= C3 > 0")
    if n_samples is not None:
        domain = Domain(domain.t_range, domain.y_low, domain.y_high, n_samples)
    t, y = domain.sample()
    v = V.V(t, y)
    r2 = (y ** 2).sum(-1)
    margin = np.maximum(v - c4 * r2, c3 * r2 - v)
    return _worst(margin, t, y, BOUND_SLACK)


def positive_part_integral(f: Callable, t0: float, t1: float) -> float:
    """``int_{t0}^{t1} max(f, 0)`` by adaptive quadrature on unit pieces."""
    if t1 <= t0:
        return 0.0
    edges = np.append(np.arange(t0, t1, 1.0), t1)
    g = lambda s: max(float(f(np.asarray(s))), 0.0)  # noqa: E731
    pieces = zip(edges[:-1], edges[1:])
    return float(sum(integrate.quad(g, a, b, limit=200, epsabs=1e-12, epsrel=1e-10)[0]
                     for a, b in pieces))


# -- certificates ------------------------------------------------------------------------

STATEMENTS = {
    "mean_square": "C3|y|^2 <= V <= C4|y|^2 and LV <= -decay_rate V on the domain give "
                   "E|Y_t|^2 <= (C4/C3) E|Y_t0|^2 exp(-decay_rate (t - t0))",
    "mean_square_varying": "C3|y|^2 <= V <= C4|y|^2 and LV <= (-decay_rate + lambda1(t)) V give "
                           "E|Y_t|^2 <= exp(M1) (C4/C3) E|Y_t0|^2 exp(-decay_rate (t - t0)) "
                           "with M1 the integral of lambda1^+ over the horizon",
    "quasi_sure": "a mean-square certificate plus the linear growth bound with constant alpha "
                  "give limsup ln|Y_t|/t <= -(decay_rate - eps)/2 quasi-surely",
}


@dataclass
class StabilityCertificate:
    verdicts: dict
    reasons: dict
    c3: float
    c4: float
    decay_rate: float
    alpha: float | None
    lambda1: str | None
    m1: float | None
    horizon: float
    epsilon: float
    domain: dict
    n_points: int
    witnesses: dict = field(default_factory=dict)
    sampled: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        checked = [v for v in self.verdicts.values() if v != NOT_CHECKED]
        return bool(checked) and all(v == PASS for v in checked)

    @property
    def gronwall_factor(self) -> float | None:
        return None if self.m1 is None else float(np.exp(self.m1))

    @property
    def prefactor(self) -> float | None:
        """Constant ``C`` of the predicted mean-square bound, from the strongest passing verdict."""
        if self.verdicts.get("mean_square") == PASS:
            return self.c4 / self.c3
        if self.verdicts.get("mean_square_varying") == PASS:
            return self.gronwall_factor * self.c4 / self.c3
        return None

    @property
    def quasi_sure_rate(self) -> float:
        return -(self.decay_rate - self.epsilon) / 2.0

    def predicted_bound(self, t, y0_sq: float = 1.0, t0: float = 0.0):
        C = self.prefactor
        if C is None:
            return None
        return C * y0_sq * np.exp(-self.decay_rate * (np.asarray(t, float) - t0))

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "verdicts": self.verdicts,
            "reasons": self.reasons,
            "statements": {k: STATEMENTS[k] for k, v in self.verdicts.items() if v != NOT_CHECKED},
            "constants": {"C3": self.c3, "C4": self.c4, "decay_rate": self.decay_rate,
                          "alpha": self.alpha, "lambda1": self.lambda1, "M1": self.m1,
                          "gronwall_factor": self.gronwall_factor},
            "horizon": self.horizon,
            "conditional_on_horizon": self.verdicts.get("mean_square_varying") == PASS,
            "domain": self.domain,
            "n_points": self.n_points,
            "predicted": {"mean_square_prefactor": self.prefactor,
                          "mean_square_rate": self.decay_rate,
                          "epsilon": self.epsilon,
                          "quasi_sure_rate": self.quasi_sure_rate},
            "sampled": self.sampled,
            "witnesses": self.witnesses,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def certify(V: LyapunovFunction, coeffs: Coefficients, U: UncertaintySet, decay_rate: float,
            c3: float, c4: float, domain: Domain, horizon: float | None = None,
            lambda1: Callable | None = None, alpha: float | None = None,
            epsilon: float = 0.5, lambda1_name: str | None = None,
            check_constant: bool | None = None) -> StabilityCertificate:
    """Check the sufficient conditions for mean-square and quasi-sure exponential stability.

    All conditions are checked on the points of ``domain.sample()``; ratio
    conditions use ``LV / V`` only where ``V > 1e-12``.  ``horizon`` bounds the
    integral of ``lambda1^+`` (default: the end of the domain time range).
    The constant-rate condition is checked by default only when no
    ``lambda1`` is given; ``check_constant`` overrides this.
    """
    if check_constant is None:
        check_constant = lambda1 is None
    ensure_valid(U)
    t0 = domain.t_range[0]
    horizon = float(domain.t_range[1] if horizon is None else horizon)
    t, y = domain.sample()
    verdicts = {"mean_square": NOT_CHECKED, "mean_square_varying": NOT_CHECKED,
                "quasi_sure": NOT_CHECKED}
    reasons, witnesses, sampled = {}, {}, {}

    cond_c = check_condition_c(V, c3, c4, domain)
    sampled["condition_c_margin"] = cond_c.worst_margin
    if not cond_c.passed:
        witnesses["condition_c"] = cond_c.witness()

    lv = lv_operator(V, coeffs, U, t, y)
    v = V.V(t, y)
    keep = v > V_FLOOR
    tk, yk = t[keep], y[keep]
    ratio = lv[keep] / v[keep]
    sampled["max_lv_ratio"] = float(ratio.max())

    ok_const = False
    if not check_constant:
        pass
    elif decay_rate <= 0:
        reasons["mean_square"] = "no positive decay rate"
    else:
        r = _worst(ratio + decay_rate, tk, yk, RATIO_SLACK)
        ok_const = r.passed
        if not r.passed:
            witnesses["condition_d"] = r.witness()
            reasons["mean_square"] = "LV/V > -decay_rate at witness"
        elif not cond_c.passed:
            reasons["mean_square"] = "quadratic bounds C3, C4 violated"
    if check_constant:
        verdicts["mean_square"] = PASS if ok_const and cond_c.passed and decay_rate > 0 else FAIL

    m1 = None
    ok_var = False
    if lambda1 is not None:
        lam1 = np.asarray(lambda1(tk), dtype=float)
        m1 = positive_part_integral(lambda1, t0, horizon)
        if decay_rate <= 0:
            reasons["mean_square_varying"] = "no positive decay rate"
        else:
            r = _worst(ratio + decay_rate - lam1, tk, yk, RATIO_SLACK)
            ok_var = r.passed
            if not r.passed:
                witnesses["condition_d1"] = r.witness()
                reasons["mean_square_varying"] = "LV/V > -decay_rate + lambda1(t) at witness"
        verdicts["mean_square_varying"] = (PASS if ok_var and cond_c.passed and decay_rate > 0
                                           else FAIL)

    if alpha is not None:
        r2 = (yk ** 2).sum(-1)
        growth = growth_bound(coeffs, U, tk, yk)
        ok_r2 = r2 > V_FLOOR
        r = _worst(growth[ok_r2] / r2[ok_r2] - alpha, tk[ok_r2], yk[ok_r2], RATIO_SLACK)
        sampled["max_growth_ratio"] = float(r.worst_margin + alpha)
        if not r.passed:
            witnesses["condition_e"] = r.witness()
            reasons["quasi_sure"] = "growth bound alpha violated at witness"
        elif not (verdicts["mean_square"] == PASS or verdicts["mean_square_varying"] == PASS):
            reasons["quasi_sure"] = "no mean-square certificate"
        base_ok = verdicts["mean_square"] == PASS or verdicts["mean_square_varying"] == PASS
        verdicts["quasi_sure"] = PASS if r.passed and base_ok else FAIL

    return StabilityCertificate(
        verdicts, reasons, float(c3), float(c4), float(decay_rate), alpha,
        lambda1_name if lambda1 is not None else None, m1, horizon, float(epsilon),
        domain.to_dict(), int(t.size), witnesses, sampled)


# -- empirical rates ------------------------------------------------------------------------

@dataclass
class DecayFit:
    rate: float
    intercept: float
    r2: float


def decay_fit(times, values, window: tuple | None = None) -> DecayFit:
    """Least-squares line through ``log(values)`` against ``times``; ``rate = -slope``."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if window is not None:
        sel = (t >= window[0]) & (t <= window[1])
        t, v = t[sel], v[sel]
    if t.size < 10:
        raise ValueError("decay_fit needs at least 10 points")
    if np.any(~(v > 0)):
        raise ValueError("curve has nonpositive values; increase n_paths")
    fit = stats.linregress(t, np.log(v))
    r2 = 1.0 if fit.rvalue is None or not np.isfinite(fit.rvalue) else float(fit.rvalue ** 2)
    return DecayFit(float(-fit.slope), float(fit.intercept), r2)


@dataclass
class QuasiSureReport:
    threshold: float
    exponents: list  # one array per control
    exceed_fraction: float
    per_control: list
    n_converged: int


def quasi_sure_rate(terminals, T: float, decay_rate: float, epsilon: float) -> QuasiSureReport:
    """Pathwise exponents ``ln|Y_T| / T`` and the fraction above ``-(decay_rate - epsilon)/2``.

    ``terminals`` is an array ``(C, P, n)`` of terminal states or a list (one per
    control) of lists of :class:`~glevy.sde.SdePath`.  Paths ending exactly at
    zero are counted as converged and never exceed.
    """
    if isinstance(terminals, np.ndarray):
        groups = list(terminals)
    else:
        groups = [np.array([p.terminal for p in grp]) for grp in terminals]
    thr = -(decay_rate - epsilon) / 2.0
    exps, per, total, over, zeros = [], [], 0, 0, 0
    for g in groups:
        g = np.asarray(g, dtype=float).reshape(len(g), -1)
        norm = np.linalg.norm(g, axis=-1)
        nz = norm > 0
        zeros += int((~nz).sum())
        e = np.log(norm[nz]) / T
        exps.append(e)
        k = int((e > thr).sum())
        per.append(k / max(len(g), 1))
        total += len(g)
        over += k
    return QuasiSureReport(thr, exps, over / max(total, 1), per, zeros)
