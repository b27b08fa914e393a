"""Ambiguity sets of (jump measure, drift, volatility) triples and admissible controls.

A :class:`UncertaintySet` is the Cartesian product of a finite list of discrete
jump measures, a finite list of drift vectors and a finite list of volatility
matrices.  One of the jump measures is the *base* measure that drives the
Poisson marks; every other measure is reached from it through a
weight-preserving atom assignment (:class:`JumpMap`).
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

MASS_TOL = 1e-12
PSD_TOL = -1e-10


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class JumpMeasure:
    """Discrete Levy measure ``sum_i w_i delta_{z_i}`` on R^d without the origin.

    The total mass must be 1 (unit jump intensity) or 0.  The zero measure
    stands for "no jumps" and is realized by sending every base mark to the
    origin.
    """

    points: np.ndarray  # (m, d)
    weights: np.ndarray  # (m,)

    def __init__(self, points, weights):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        w = np.asarray(weights, dtype=float).reshape(-1)
        if pts.shape[0] != w.shape[0]:
            raise ValueError("points and weights have different lengths")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def dirac(cls, z) -> "JumpMeasure":
        return cls(np.atleast_1d(np.asarray(z, dtype=float))[None, :], [1.0])

    @classmethod
    def null(cls, d: int) -> "JumpMeasure":
        return cls(np.zeros((0, d)), np.zeros(0))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.points.shape[0]

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    @property
    def first_moment(self) -> float:
        """``int |z| v(dz)``."""
        return float(np.sum(self.weights * np.linalg.norm(self.points, axis=1)))

    def integrate(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        if self.n_atoms == 0:
            return 0.0
        return float(np.dot(self.weights, np.asarray(f(self.points), dtype=float)))

    def __eq__(self, other):
        if not isinstance(other, JumpMeasure):
            return NotImplemented
        return (self.points.shape == other.points.shape
                and np.array_equal(self.points, other.points)
                and np.array_equal(self.weights, other.weights))

    def __hash__(self):
        return hash((self.points.tobytes(), self.weights.tobytes()))


@dataclass(frozen=True)
class JumpMap:
    """Atom assignment realizing ``g_v`` on the support of the base measure.

    ``targets[i]`` is the index of the atom of ``v`` that base atom ``i`` is
    sent to, or ``-1`` when it is sent to the origin (no jump).
    ``table`` holds the mapped jump vectors, one row per base atom.
    """

    targets: tuple
    table: np.ndarray  # (n_base, d)

    @property
    def moves(self) -> np.ndarray:
        return np.asarray(self.targets) >= 0

    def __call__(self, base_index):
        return self.table[base_index]


def _solve_assignment(base_w: np.ndarray, target_w: np.ndarray, origin_w: float,
                      tol: float = 1e-9) -> list[int] | None:
    # exact bin packing by backtracking; sets are desk-sized
    caps = list(target_w) + [origin_w]
    order = np.argsort(-base_w, kind="stable")
    assign = [0] * len(base_w)

    def place(pos: int) -> bool:
        if pos == len(order):
            return all(abs(c) <= tol for c in caps)
        i = order[pos]
        w = base_w[i]
        tried = set()
        for j in range(len(caps)):
            key = round(caps[j], 12)
            if key in tried or caps[j] < w - tol:
                continue
            tried.add(key)
            caps[j] -= w
            assign[i] = j
            if place(pos + 1):
                return True
            caps[j] += w
        return False

    if not place(0):
        return None
    n_t = len(target_w)
    return [j if j < n_t else -1 for j in assign]


def transport_map(base: JumpMeasure, target: JumpMeasure) -> JumpMap | None:
    """Find ``g`` with ``target = base o g^{-1}`` on atoms, or ``None`` if impossible."""
    d = base.dim
    if base == target:
        targets = list(range(base.n_atoms))
    else:
        if base.mass < target.mass - MASS_TOL:
            return None
        targets = _solve_assignment(base.weights, target.weights,
                                    base.mass - target.mass)
        if targets is None:
            return None
    table = np.zeros((base.n_atoms, d))
    for i, j in enumerate(targets):
        if j >= 0:
            table[i] = target.points[j]
    table.setflags(write=False)
    return JumpMap(tuple(targets), table)


@dataclass
class ValidationReport:
    ok: bool
    bound_value: float  # sup over triples of int|z|v(dz) + |p| + tr[QQ^T]
    masses: list
    psd: list
    strictly_pd: list
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


class UncertaintySet:
    """Finite ambiguity set ``U = V x P x Q`` with a distinguished base measure."""

    def __init__(self, jump_measures: Sequence[JumpMeasure], drifts, volatilities,
                 base_measure_index: int = 0):
        self.jump_measures = tuple(jump_measures)
        drifts = np.asarray(drifts, dtype=float)
        vols = np.asarray(volatilities, dtype=float)
        if not self.jump_measures or drifts.size == 0 or vols.size == 0:
            raise ValidationError("jump measures, drifts and volatilities must be nonempty")
        d = self.jump_measures[0].dim
        if drifts.ndim == 1:
            drifts = drifts.reshape(-1, d)
        if vols.ndim == 1:
            vols = vols.reshape(-1, 1, 1)
        if drifts.shape[1] != d or vols.shape[1:] != (d, d):
            raise ValidationError(f"inconsistent dimensions: d={d}, drifts {drifts.shape}, "
                                  f"volatilities {vols.shape}")
        if any(m.dim != d for m in self.jump_measures):
            raise ValidationError("jump measures of different dimensions")
        drifts.setflags(write=False)
        vols.setflags(write=False)
        self.drifts = drifts
        self.volatilities = vols
        self.base_measure_index = int(base_measure_index)
        if not 0 <= self.base_measure_index < len(self.jump_measures):
            raise ValidationError("base_measure_index out of range")
        self.d = d
        self._maps = None

    @property
    def base(self) -> JumpMeasure:
        return self.jump_measures[self.base_measure_index]

    @property
    def shape(self) -> tuple:
        return len(self.jump_measures), len(self.drifts), len(self.volatilities)

    def triples(self):
        """All index triples ``(v, p, q)`` in lexicographic order."""
        return list(itertools.product(*(range(k) for k in self.shape)))

    @property
    def jump_maps(self) -> tuple:
        if self._maps is None:
            maps = []
            for v in self.jump_measures:
                g = transport_map(self.base, v)
                if g is None:
                    raise ValidationError("no atom assignment maps the base measure onto "
                                          f"{v.points.tolist()} / {v.weights.tolist()}")
                maps.append(g)
            self._maps = tuple(maps)
        return self._maps

    def vol_squares(self) -> np.ndarray:
        return np.einsum("kij,klj->kil", self.volatilities, self.volatilities)

    @property
    def jump_intensity(self) -> float:
        return max(v.mass for v in self.jump_measures)

    # -- serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "measures": [{"atoms": [[list(map(float, z)), float(w)]
                                    for z, w in zip(m.points, m.weights)]}
                         for m in self.jump_measures],
            "drifts": self.drifts.tolist(),
            "vols": self.volatilities.tolist(),
            "base": self.base_measure_index,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "UncertaintySet":
        d = int(doc["d"])
        measures = []
        for m in doc["measures"]:
            atoms = m["atoms"]
            pts = np.array([a[0] for a in atoms], dtype=float).reshape(len(atoms), d)
            measures.append(JumpMeasure(pts, [a[1] for a in atoms]))
        drifts = np.array(doc["drifts"], dtype=float).reshape(-1, d)
        vols = np.array(doc["vols"], dtype=float).reshape(-1, d, d)
        return cls(measures, drifts, vols, doc.get("base", 0))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "UncertaintySet":
        return cls.from_dict(json.loads(text))

    def __repr__(self):
        return (f"UncertaintySet(d={self.d}, |V|={len(self.jump_measures)}, "
                f"|P|={len(self.drifts)}, |Q|={len(self.volatilities)})")


def validate(U: UncertaintySet) -> ValidationReport:
    errors, warnings = [], []
    masses = [v.mass for v in U.jump_measures]
    for k, v in enumerate(U.jump_measures):
        if v.n_atoms and np.any(np.all(v.points == 0.0, axis=1)):
            errors.append(f"measure {k}: atom at origin")
        if np.any(v.weights < 0):
            errors.append(f"measure {k}: negative weight")
        if abs(v.mass - 1.0) > MASS_TOL and v.n_atoms > 0:
            errors.append(f"measure {k}: mass {v.mass!r} != 1")
        if not np.isfinite(v.first_moment):
            errors.append(f"measure {k}: int|z| v(dz) is not finite")
    if U.base.mass == 0.0 and any(m > 0 for m in masses):
        errors.append("base measure is null but another measure is not")

    psd, strict = [], []
    for k, Q in enumerate(U.volatilities):
        if not np.allclose(Q, Q.T, rtol=0, atol=1e-12):
            errors.append(f"volatility {k}: not symmetric")
            psd.append(False)
            strict.append(False)
            continue
        lo = float(np.linalg.eigvalsh(Q).min())
        psd.append(lo >= PSD_TOL)
        strict.append(lo > 0)
        if lo < PSD_TOL:
            errors.append(f"volatility {k}: negative eigenvalue {lo:.3g}")
        elif lo <= 0:
            warnings.append(f"volatility {k}: singular (admitted as PSD)")

    if not errors:
        try:
            U.jump_maps
        except ValidationError as exc:
            errors.append(str(exc))

    moments = [v.first_moment for v in U.jump_measures]
    pnorm = np.linalg.norm(U.drifts, axis=1)
    tr = np.einsum("kij,kij->k", U.volatilities, U.volatilities)
    bound = float(max(moments) + pnorm.max() + tr.max())
    return ValidationReport(not errors, bound, masses, psd, strict, errors, warnings)


def ensure_valid(U: UncertaintySet) -> UncertaintySet:
    rep = validate(U)
    if not rep.ok:
        raise ValidationError("; ".join(rep.errors))
    return U


def g_functional(f, df0, d2f0, U: UncertaintySet) -> float:
    """Levy-Khintchine value ``sup_U { int f dv + <Df(0), p> + tr[D^2f(0) QQ^T]/2 }``.

    ``f`` maps an ``(m, d)`` array of jump points to ``(m,)`` values.
    """
    ensure_valid(U)
    df0 = np.atleast_1d(np.asarray(df0, dtype=float))
    d2f0 = np.asarray(d2f0, dtype=float).reshape(U.d, U.d)
    jump = max(v.integrate(f) for v in U.jump_measures)
    drift = float(np.max(U.drifts @ df0))
    diff = float(np.max(0.5 * np.einsum("ij,kij->k", d2f0, U.vol_squares())))
    return jump + drift + diff


class ControlPath:
    """Piecewise-constant control: a triple index of ``U`` on each ``(t_k, t_{k+1}]``."""

    def __init__(self, grid, triples, label: str | None = None):
        grid = np.asarray(grid, dtype=float)
        if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
            raise ValueError("control grid must be strictly increasing with >= 2 points")
        triples = tuple(tuple(int(i) for i in tr) for tr in triples)
        if len(triples) != grid.size - 1:
            raise ValueError("need one triple per control interval")
        grid.setflags(write=False)
        self.grid = grid
        self.triples = triples
        self.label = label

    @classmethod
    def constant(cls, triple, t0: float, T: float, label=None) -> "ControlPath":
        return cls([t0, T], [triple], label)

    def check(self, U: UncertaintySet) -> None:
        for tr in self.triples:
            if len(tr) != 3 or not all(0 <= i < k for i, k in zip(tr, U.shape)):
                raise ValidationError(f"control triple {tr} not in U (shape {U.shape})")

    def with_interval(self, k: int, triple) -> "ControlPath":
        triples = list(self.triples)
        triples[k] = tuple(triple)
        return ControlPath(self.grid, triples)

    def refine(self, grid) -> "ControlPath":
        """Same control expressed on a finer grid containing ``self.grid``."""
        grid = np.asarray(grid, dtype=float)
        mids = 0.5 * (grid[:-1] + grid[1:])
        idx = np.searchsorted(self.grid, mids) - 1
        if grid[0] != self.grid[0] or grid[-1] != self.grid[-1]:
            raise ValueError("grids cover different intervals")
        return ControlPath(grid, [self.triples[i] for i in idx], self.label)

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        return "|".join("v{}p{}q{}".format(*tr) for tr in self.triples)

    def __eq__(self, other):
        return (isinstance(other, ControlPath) and np.array_equal(self.grid, other.grid)
                and self.triples == other.triples)

    def __hash__(self):
        return hash((self.grid.tobytes(), self.triples))

    def __repr__(self):
        return f"ControlPath({self.name})"


def extreme_controls(U: UncertaintySet, grid) -> list[ControlPath]:
    """Every constant-in-time control, one per distinct triple of ``U``."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty grid")
    t0, T = float(grid[0]), float(grid[-1])
    seen, out = set(), []
    for v, p, q in U.triples():
        key = (hash(U.jump_measures[v]), U.drifts[p].tobytes(), U.volatilities[q].tobytes())
        if key in seen:
            continue
        seen.add(key)
        out.append(ControlPath.constant((v, p, q), t0, T))
    return out
