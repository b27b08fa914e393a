"""Base probability space: Brownian increments and Poisson marks, plus pathwise integrals.

Every path owns two counter-based Philox streams keyed by ``(seed, path_index)``:
one for the Brownian increments (consumed step by step) and one, started at a
disjoint counter offset, for the jump times, marks and bridge normals.  A path
therefore comes out the same whether it is sampled alone, inside a batch, or
inside a batch that is generated block-by-block in time.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .uncertainty import ControlPath, JumpMeasure, UncertaintySet

_JUMP_COUNTER = [0, 0, 0, 1 << 63]
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > self.t0:
            raise ValueError(f"need T > t0, got [{self.t0}, {self.T}]")
        if int(self.n_steps) < 1:
            raise ValueError("n_steps must be positive")

    @classmethod
    def from_step(cls, t0: float, T: float, dt: float) -> "TimeGrid":
        return cls(t0, T, max(1, int(round((T - t0) / dt))))

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.t0, self.T, self.n_steps + 1)

    def node_index(self, t: float, tol: float = 1e-9) -> int:
        k = int(round((t - self.t0) / self.dt))
        if not 0 <= k <= self.n_steps or abs(self.t0 + k * self.dt - t) > tol * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not a node of {self}")
        return k

    def step_of(self, u) -> np.ndarray:
        """Index ``k`` of the step ``(t_k, t_{k+1}]`` containing ``u``."""
        k = np.searchsorted(self.nodes, u, side="left") - 1
        return np.clip(k, 0, self.n_steps - 1)


def _key(seed: int, path: int) -> list:
    return [int(seed) & _MASK64, int(path) & _MASK64]


def _brownian_stream(seed: int, path: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=_key(seed, path)))


def _jump_stream(seed: int, path: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=_key(seed, path), counter=_JUMP_COUNTER))


@dataclass(frozen=True)
class Tilt:
    """Importance-sampling change of measure on the base space.

    Under the sampling measure the Brownian motion has drift ``brownian`` (a
    d-vector) and the marks arrive at ``jump_rate`` times the base intensity;
    the mark distribution is unchanged.  :meth:`log_weight` is the log of the
    likelihood ratio ``dP/dQ`` restricted to ``[t0, t]``, so weighted means
    under the sampling measure are unbiased for means under the original one.
    """

    brownian: tuple = (0.0,)
    jump_rate: float = 1.0

    def __post_init__(self):
        if not self.jump_rate > 0:
            raise ValueError("jump_rate must be positive")

    def drift(self, d: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.brownian, dtype=float), (d,))

    def log_weight(self, w, n_jumps, elapsed, mass: float) -> np.ndarray:
        """``-beta.W_t + |beta|^2 t/2 - N_t log(kappa) + (kappa - 1) mass t``.

        ``w`` holds the sampled Brownian values ``W_t - W_t0`` with ``d`` last.
        """
        w = np.asarray(w, dtype=float)
        beta = self.drift(w.shape[-1])
        out = -(w @ beta) + 0.5 * float(beta @ beta) * elapsed
        if self.jump_rate != 1.0:
            out = out - np.asarray(n_jumps) * np.log(self.jump_rate) \
                + (self.jump_rate - 1.0) * mass * elapsed
        return out


def _draw_jumps(rng: np.random.Generator, grid: TimeGrid, base: JumpMeasure,
                rate_factor: float = 1.0):
    mass = base.mass
    d = base.dim
    if mass == 0.0:
        return np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros((0, d))
    n = int(rng.poisson(rate_factor * mass * (grid.T - grid.t0)))
    u = 1.0 - rng.random(n)  # in (0, 1]
    times = np.sort(grid.t0 + (grid.T - grid.t0) * u)
    cum = np.cumsum(base.weights) / mass
    marks = np.minimum(np.searchsorted(cum, rng.random(n), side="right"), base.n_atoms - 1)
    normals = rng.standard_normal((n, d))
    return times, marks.astype(np.int64), normals


def bridge_increment(s, u, t1, remaining, z):
    """``W_u - W_s`` given ``W_{t1} - W_s = remaining`` and a standard normal ``z``."""
    span = t1 - s
    safe = np.where(span > 0, span, 1.0)
    frac = np.where(span > 0, (u - s) / safe, 1.0)
    var = np.where(span > 0, (u - s) * (t1 - u) / safe, 0.0)
    frac = np.asarray(frac)[..., None]
    sd = np.sqrt(np.maximum(var, 0.0))[..., None]
    return frac * remaining + sd * z


@dataclass
class NoiseRealization:
    """One draw of (W, N): Brownian increments per step and marked Poisson events."""

    grid: TimeGrid
    seed: int
    path_index: int
    dw: np.ndarray  # (n_steps, d), N(0, dt) entries
    jump_times: np.ndarray  # (m,) increasing, in (t0, T]
    jump_marks: np.ndarray  # (m,) base atom indices
    jump_normals: np.ndarray  # (m, d) bridge normals

    @property
    def d(self) -> int:
        return self.dw.shape[1]

    @property
    def n_jumps(self) -> int:
        return self.jump_times.size

    @property
    def jump_steps(self) -> np.ndarray:
        return self.grid.step_of(self.jump_times)

    def jump_count(self, t) -> np.ndarray:
        """The Poisson counting process ``M_t``."""
        return np.searchsorted(self.jump_times, t, side="right")

    def to_bytes(self) -> bytes:
        """Binary dump: header then little-endian float64 blocks.

        Layout::

            b"GLVYNOIS" | u32 version=1 | u64 seed | u64 path_index
            f64 t0 | f64 T | u64 n_steps | u64 d | u64 n_jumps
            f64[n_steps*d] dw (row-major) | f64[n_jumps] jump_times
            f64[n_jumps] jump_marks | f64[n_jumps*d] jump_normals
        """
        head = b"GLVYNOIS" + struct.pack("<IQQddQQQ", 1, self.seed & _MASK64, self.path_index,
                                         self.grid.t0, self.grid.T, self.grid.n_steps,
                                         self.d, self.n_jumps)
        body = [np.ascontiguousarray(a, dtype="<f8").tobytes()
                for a in (self.dw, self.jump_times, self.jump_marks.astype(float),
                          self.jump_normals)]
        return head + b"".join(body)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "NoiseRealization":
        if raw[:8] != b"GLVYNOIS":
            raise ValueError("not a noise dump")
        fmt = "<IQQddQQQ"
        ver, seed, path, t0, T, n, d, m = struct.unpack_from(fmt, raw, 8)
        if ver != 1:
            raise ValueError(f"unsupported dump version {ver}")
        off = 8 + struct.calcsize(fmt)
        flat = np.frombuffer(raw, dtype="<f8", offset=off)
        dw = flat[: n * d].reshape(n, d)
        rest = flat[n * d:]
        times, marks, normals = rest[:m], rest[m:2 * m], rest[2 * m:2 * m + m * d].reshape(m, d)
        return cls(TimeGrid(t0, T, n), seed, path, dw.astype(float), times.astype(float),
                   marks.astype(np.int64), normals.astype(float))


def sample_noise(grid: TimeGrid, base: JumpMeasure, seed: int, path_index: int = 0
                 ) -> NoiseRealization:
    """Sample one path of the base space (Brownian motion and rate-``mass(base)`` marks)."""
    z = _brownian_stream(seed, path_index).standard_normal((grid.n_steps, base.dim))
    times, marks, normals = _draw_jumps(_jump_stream(seed, path_index), grid, base)
    return NoiseRealization(grid, int(seed), int(path_index), z * np.sqrt(grid.dt),
                            times, marks, normals)


@dataclass
class NoiseBatch:
    """Noise for a contiguous block of path indices.

    Brownian increments are produced lazily, ``block_steps`` at a time, by
    :meth:`iter_increments`; jump events are held in flat arrays sorted by
    ``(step, path, time)``.
    """

    grid: TimeGrid
    seed: int
    paths: np.ndarray  # global path indices
    d: int
    jump_path: np.ndarray  # local path index of each event
    jump_step: np.ndarray
    jump_time: np.ndarray
    jump_mark: np.ndarray
    jump_normal: np.ndarray  # (m, d)
    dw: np.ndarray | None = None  # optional materialized (P, n_steps, d)
    tilt: Tilt | None = None
    _step_ptr: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._step_ptr = np.searchsorted(self.jump_step, np.arange(self.grid.n_steps + 1))

    @property
    def n_paths(self) -> int:
        return self.paths.size

    def jumps_in_step(self, k: int) -> slice:
        return slice(self._step_ptr[k], self._step_ptr[k + 1])

    def iter_increments(self, block_steps: int = 256):
        """Yield ``(start, dw)`` with ``dw`` of shape ``(P, m, d)`` for steps ``start..start+m``."""
        n = self.grid.n_steps
        scale = np.sqrt(self.grid.dt)
        shift = 0.0 if self.tilt is None else self.tilt.drift(self.d) * self.grid.dt
        if self.dw is not None:
            for s in range(0, n, block_steps):
                yield s, self.dw[:, s:s + block_steps]
            return
        gens = [_brownian_stream(self.seed, p) for p in self.paths]
        for s in range(0, n, block_steps):
            m = min(block_steps, n - s)
            out = np.empty((len(gens), m, self.d))
            for i, g in enumerate(gens):
                out[i] = g.standard_normal((m, self.d))
            out *= scale
            out += shift
            yield s, out

    def realization(self, i: int) -> NoiseRealization:
        """Single-path view of local path ``i``."""
        sel = self.jump_path == i
        order = np.argsort(self.jump_time[sel], kind="stable")
        if self.dw is not None:
            dw = self.dw[i].copy()
        else:
            dw = _brownian_stream(self.seed, self.paths[i]).standard_normal(
                (self.grid.n_steps, self.d)) * np.sqrt(self.grid.dt)
            if self.tilt is not None:
                dw += self.tilt.drift(self.d) * self.grid.dt
        return NoiseRealization(self.grid, self.seed, int(self.paths[i]), dw,
                                self.jump_time[sel][order], self.jump_mark[sel][order],
                                self.jump_normal[sel][order])


def sample_noise_batch(grid: TimeGrid, base: JumpMeasure, seed: int, paths,
                       materialize: bool = False, tilt: Tilt | None = None) -> NoiseBatch:
    """Noise for the given global path indices, optionally under a :class:`Tilt`."""
    paths = np.asarray(paths, dtype=np.int64)
    d = base.dim
    rate = 1.0 if tilt is None else tilt.jump_rate
    parts = []
    for i, p in enumerate(paths):
        t, mk, nz = _draw_jumps(_jump_stream(seed, p), grid, base, rate)
        parts.append((np.full(t.size, i, dtype=np.int64), t, mk, nz))
    if parts:
        jp = np.concatenate([a[0] for a in parts])
        jt = np.concatenate([a[1] for a in parts])
        jm = np.concatenate([a[2] for a in parts])
        jn = np.concatenate([a[3] for a in parts]).reshape(-1, d)
    else:
        jp, jt, jm, jn = (np.zeros(0, dtype=np.int64), np.zeros(0),
                          np.zeros(0, dtype=np.int64), np.zeros((0, d)))
    js = grid.step_of(jt).astype(np.int64)
    order = np.lexsort((jt, jp, js))
    dw = None
    if materialize:
        dw = np.empty((paths.size, grid.n_steps, d))
        for i, p in enumerate(paths):
            dw[i] = _brownian_stream(seed, p).standard_normal((grid.n_steps, d))
        dw *= np.sqrt(grid.dt)
        if tilt is not None:
            dw += tilt.drift(d) * grid.dt
    return NoiseBatch(grid, int(seed), paths, d, jp[order], js[order], jt[order], jm[order],
                      jn[order], dw, tilt)


# -- event grid ----------------------------------------------------------------

@dataclass
class EventGrid:
    """Grid steps split at jump times.

    Sub-interval ``e`` runs from ``t[e]`` to ``t[e] + dt[e]`` with Brownian
    increment ``dw[e]``; if ``mark[e] >= 0`` a jump with that base mark happens
    at its right end.  ``node[e]`` is true when the right end is a grid node.
    """

    t: np.ndarray
    dt: np.ndarray
    dw: np.ndarray
    step: np.ndarray
    mark: np.ndarray
    node: np.ndarray

    @property
    def t_end(self) -> np.ndarray:
        return self.t + self.dt


def event_grid(noise: NoiseRealization) -> EventGrid:
    grid = noise.grid
    nodes = grid.nodes
    steps = noise.jump_steps
    ptr = np.searchsorted(steps, np.arange(grid.n_steps + 1))
    t, dt, dw, st, mk, nd = [], [], [], [], [], []
    for k in range(grid.n_steps):
        s, t1 = nodes[k], nodes[k + 1]
        remaining = noise.dw[k]
        for j in range(ptr[k], ptr[k + 1]):
            u = noise.jump_times[j]
            inc = bridge_increment(s, u, t1, remaining, noise.jump_normals[j])
            t.append(s); dt.append(u - s); dw.append(inc); st.append(k)
            mk.append(int(noise.jump_marks[j])); nd.append(False)
            remaining = remaining - inc
            s = u
        t.append(s); dt.append(t1 - s); dw.append(remaining); st.append(k)
        mk.append(-1); nd.append(True)
    return EventGrid(np.array(t), np.array(dt), np.array(dw).reshape(-1, noise.d),
                     np.array(st, dtype=np.int64), np.array(mk, dtype=np.int64),
                     np.array(nd, dtype=bool))


def control_schedule(theta: ControlPath, grid: TimeGrid) -> np.ndarray:
    """Control interval index for every simulation step; ``theta.grid`` must be a sub-grid."""
    if abs(theta.grid[0] - grid.t0) > 1e-12 or abs(theta.grid[-1] - grid.T) > 1e-9 * max(1, abs(grid.T)):
        raise ValueError(f"control covers [{theta.grid[0]}, {theta.grid[-1]}], "
                         f"grid covers [{grid.t0}, {grid.T}]")
    for tk in theta.grid[1:-1]:
        grid.node_index(tk)
    mids = 0.5 * (grid.nodes[:-1] + grid.nodes[1:])
    return np.searchsorted(theta.grid, mids) - 1


# -- Levy-Ito integral -----------------------------------------------------------

@dataclass
class DrivenPath:
    """``B^{0,theta}`` under one control and one noise draw.

    ``times`` lists the grid nodes and the jump times in increasing order
    (``is_jump`` flags the latter); ``x`` is the canonical process (continuous
    part plus jumps), ``continuous`` its drift+Brownian part, ``covariation``
    the accumulated ``<B^i, B^j>``.  ``jump_times``/``jump_sizes`` is the ledger
    of nonzero jumps ``g_v(z)``.
    """

    times: np.ndarray
    is_jump: np.ndarray
    x: np.ndarray  # (E, d)
    continuous: np.ndarray  # (E, d)
    covariation: np.ndarray  # (E, d, d)
    jump_times: np.ndarray
    jump_sizes: np.ndarray  # (J, d)

    def at(self, t: float) -> np.ndarray:
        """Right-continuous value at time ``t``."""
        i = np.searchsorted(self.times, t, side="right") - 1
        return self.x[max(i, 0)]

    def node_values(self) -> np.ndarray:
        return self.x[~self.is_jump]


def levy_ito_integral(theta: ControlPath, noise: NoiseRealization, U: UncertaintySet
                      ) -> DrivenPath:
    """Pathwise ``int p ds + int Q dW + int int g_v(z) N(ds, dz)`` along ``theta``."""
    theta.check(U)
    sched = control_schedule(theta, noise.grid)
    ev = event_grid(noise)
    maps = U.jump_maps
    QQ = U.vol_squares()
    d = U.d
    E = ev.t.size
    times = [noise.grid.t0]
    flags = [False]
    x = np.zeros(d)
    bc = np.zeros(d)
    cov = np.zeros((d, d))
    xs, bcs, covs = [x.copy()], [bc.copy()], [cov.copy()]
    jt, jz = [], []
    for e in range(E):
        v, p, q = theta.triples[sched[ev.step[e]]]
        dB = U.drifts[p] * ev.dt[e] + U.volatilities[q] @ ev.dw[e]
        bc = bc + dB
        x = x + dB
        cov = cov + QQ[q] * ev.dt[e]
        if ev.mark[e] >= 0:
            g = maps[v]
            if g.moves[ev.mark[e]]:
                z = g.table[ev.mark[e]]
                x = x + z
                jt.append(ev.t_end[e])
                jz.append(z)
                times.append(ev.t_end[e]); flags.append(True)
                xs.append(x.copy()); bcs.append(bc.copy()); covs.append(cov.copy())
        if ev.node[e]:
            times.append(ev.t_end[e]); flags.append(False)
            xs.append(x.copy()); bcs.append(bc.copy()); covs.append(cov.copy())
    return DrivenPath(np.array(times), np.array(flags), np.array(xs), np.array(bcs),
                      np.array(covs), np.array(jt), np.array(jz).reshape(-1, d))


@dataclass
class StepPath:
    """Right-continuous step function with jumps at ``times``."""

    t0: float
    times: np.ndarray
    values: np.ndarray  # value just after each jump time

    def at(self, t):
        i = np.searchsorted(self.times, t, side="right")
        vals = np.concatenate([np.zeros((1,) + self.values.shape[1:]), self.values])
        return vals[i]


def jump_integral(K, theta: ControlPath, noise: NoiseRealization, U: UncertaintySet
                  ) -> StepPath:
    """``t -> sum_{t0 < r <= t} K(r, Delta X_r)``, summing over actual (nonzero) jumps.

    ``K(r, z)`` receives times ``(J,)`` and jump vectors ``(J, d)``.
    """
    path = levy_ito_integral(theta, noise, U)
    if path.jump_times.size == 0:
        return StepPath(noise.grid.t0, path.jump_times, np.zeros(0))
    vals = np.asarray(K(path.jump_times, path.jump_sizes), dtype=float)
    return StepPath(noise.grid.t0, path.jump_times, np.cumsum(vals, axis=0))
