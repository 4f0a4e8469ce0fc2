"""Sparse coding of time surfaces.

The energy of a surface ``S`` under atoms ``phi`` (rows of a matrix) with
coefficients ``a`` is::

    E(a) = ||S - a @ phi||^2 + lam * sum(|a_j / sigma|)

Inference minimises a smoothed version, with ``|a|`` replaced by
``sqrt(a^2 + eps^2)``, by projected nonlinear conjugate gradient inside the
box ``[-1, 1]^N``, warm-started from the clipped projections ``phi @ S``.
Dictionaries are learnt one surface at a time: infer, then move every atom
along the residual by ``eta * a_j`` and renormalise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

_DICT_MAGIC = "# dict v1"


@dataclass(frozen=True)
class SparseParams:
    lam: float = 0.1
    sigma: float | None = None  # None: std of the training surfaces
    eta: float = 0.05
    eps_smooth: float = 1e-6
    max_cg_iters: int = 100
    cg_tol: float = 1e-6
    epochs_max: int = 200
    epoch_tol: float = 1e-4
    max_train_surfaces: int | None = None  # None: use every surface

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        for name in ("eta", "eps_smooth", "cg_tol", "epoch_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.max_cg_iters < 1 or self.epochs_max < 1:
            raise ValueError("iteration caps must be positive")
        if self.max_train_surfaces is not None and self.max_train_surfaces < 1:
            raise ValueError("max_train_surfaces must be positive")

    @property
    def weight(self) -> float:
        """Effective L1 weight ``lam / sigma``."""
        return self.lam / (1.0 if self.sigma is None else self.sigma)

    def resolved(self, surfaces: np.ndarray) -> "SparseParams":
        if self.sigma is not None:
            return self
        sd = float(np.std(surfaces)) if surfaces.size else 0.0
        return replace(self, sigma=sd if sd > 0 else 1.0)


@dataclass(frozen=True, eq=False)
class Dictionary:
    """``N`` unit-norm atoms of dimension ``D``, stored as an ``(N, D)`` array.

    ``channel_count`` and ``radius`` describe the surface layout the atoms
    live in; 0 means unspecified (plain vectors).
    """

    atoms: np.ndarray
    channel_count: int = 0
    radius: int = 0

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=np.float64, ndmin=2)
        if atoms.ndim != 2 or atoms.shape[0] < 1:
            raise ValueError("atoms must be a non-empty (N, D) array")
        if self.channel_count and atoms.shape[1] != self.channel_count * (2 * self.radius + 1) ** 2:
            raise ValueError("atom dimension does not match channel count and radius")
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Dictionary):
            return NotImplemented
        return (self.channel_count == other.channel_count and self.radius == other.radius
                and np.array_equal(self.atoms, other.atoms))

    __hash__ = None

    def dumps(self) -> str:
        lines = [f"{_DICT_MAGIC} n={self.n_atoms} d={self.dim} "
                 f"c={self.channel_count} r={self.radius}"]
        lines += [",".join(repr(float(v)) for v in row) for row in self.atoms]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Dictionary":
        lines = text.rstrip("\n").split("\n")
        head = lines[0].split()
        if " ".join(head[:3]) != _DICT_MAGIC or len(head) != 7:
            raise ValueError(f"malformed dictionary header {lines[0]!r}")
        meta = dict(kv.split("=", 1) for kv in head[3:])
        n, d = int(meta["n"]), int(meta["d"])
        rows = [[float(v) for v in line.split(",")] for line in lines[1:]]
        if len(rows) != n or any(len(r) != d for r in rows):
            raise ValueError("dictionary body does not match its header")
        return cls(np.array(rows), int(meta["c"]), int(meta["r"]))


@dataclass
class TrainingReport:
    params: SparseParams
    n_atoms: int
    n_surfaces: int
    epoch_energy: list = field(default_factory=list)
    converged: bool = False
    seed: int = 0


def _check_dim(S: np.ndarray, d: Dictionary) -> None:
    if S.shape[-1] != d.dim:
        raise ValueError(f"surface dimension {S.shape[-1]} != dictionary dimension {d.dim}")


def energy(S, d: Dictionary, a, params: SparseParams) -> float:
    """Exact (unsmoothed) energy of one surface."""
    S = np.asarray(S, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    _check_dim(S, d)
    if a.shape != (d.n_atoms,):
        raise ValueError("coefficient count does not match dictionary")
    r = S - a @ d.atoms
    return float(r @ r + params.weight * np.abs(a).sum())


def smoothed_energy(S, d: Dictionary, a, params: SparseParams) -> float:
    S = np.asarray(S, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    _check_dim(S, d)
    r = S - a @ d.atoms
    return float(r @ r + params.weight * np.sqrt(a * a + params.eps_smooth ** 2).sum())


# ---------------------------------------------------------------------------
# inference kernels (Gram form: E = s2 - 2 b.a + a.G.a + w * sum sqrt(a^2+eps^2))

@njit(cache=True)
def _smooth_energy(G, b, s2, a, w, eps2):
    n = a.shape[0]
    e = s2
    for i in range(n):
        ga = 0.0
        for j in range(n):
            ga += G[i, j] * a[j]
        e += a[i] * ga - 2.0 * b[i] * a[i] + w * math.sqrt(a[i] * a[i] + eps2)
    return e


@njit(cache=True)
def _gradient(G, b, a, w, eps2, g):
    n = a.shape[0]
    for i in range(n):
        ga = 0.0
        for j in range(n):
            ga += G[i, j] * a[j]
        g[i] = 2.0 * (ga - b[i]) + w * a[i] / math.sqrt(a[i] * a[i] + eps2)


@njit(cache=True)
def _infer_one(G, b, s2, w, eps2, max_iter, tol, a):
    """Projected Polak-Ribiere CG from the warm start already in ``a``."""
    n = a.shape[0]
    g = np.empty(n)
    pg = np.empty(n)
    pg_prev = np.zeros(n)
    d = np.zeros(n)
    trial = np.empty(n)
    free = np.ones(n, dtype=np.bool_)
    free_prev = np.ones(n, dtype=np.bool_)
    f = _smooth_energy(G, b, s2, a, w, eps2)
    _gradient(G, b, a, w, eps2, g)
    restart = True
    for _ in range(max_iter):
        gmax = 0.0
        changed = False
        for i in range(n):
            free[i] = not ((a[i] <= -1.0 and g[i] > 0.0) or (a[i] >= 1.0 and g[i] < 0.0))
            pg[i] = g[i] if free[i] else 0.0
            gmax = max(gmax, abs(pg[i]))
            if free[i] != free_prev[i]:
                changed = True
        if gmax < 1e-14:
            break
        if restart or changed:
            for i in range(n):
                d[i] = -pg[i]
        else:
            num = 0.0
            den = 0.0
            for i in range(n):
                num += pg[i] * (pg[i] - pg_prev[i])
                den += pg_prev[i] * pg_prev[i]
            beta = max(0.0, num / den) if den > 0.0 else 0.0
            slope = 0.0
            for i in range(n):
                d[i] = -pg[i] + beta * d[i] if free[i] else 0.0
                slope += d[i] * pg[i]
            if slope >= 0.0:
                for i in range(n):
                    d[i] = -pg[i]
        gd = 0.0
        dgd = 0.0
        for i in range(n):
            gd += g[i] * d[i]
            gdi = 0.0
            for j in range(n):
                gdi += G[i, j] * d[j]
            dgd += d[i] * gdi
        step = -gd / (2.0 * dgd) if dgd > 0.0 else 1.0
        accepted = False
        clipped = False
        for _ls in range(60):
            clipped = False
            for i in range(n):
                v = a[i] + step * d[i]
                if v > 1.0:
                    v = 1.0
                    clipped = True
                elif v < -1.0:
                    v = -1.0
                    clipped = True
                trial[i] = v
            f_new = _smooth_energy(G, b, s2, trial, w, eps2)
            decrease = 0.0
            for i in range(n):
                decrease += g[i] * (trial[i] - a[i])
            if f_new <= f + 1e-4 * decrease and f_new <= f:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        for i in range(n):
            a[i] = trial[i]
            pg_prev[i] = pg[i]
            free_prev[i] = free[i]
        f_old = f
        f = f_new
        _gradient(G, b, a, w, eps2, g)
        restart = clipped
        if f_old - f <= tol * max(abs(f_old), 1e-300):
            break
    return f


@njit(cache=True)
def _gram(phi):
    # explicit loops keep results independent of batch size (no BLAS blocking)
    n, dim = phi.shape
    G = np.empty((n, n))
    for j in range(n):
        for k in range(j, n):
            acc = 0.0
            for i in range(dim):
                acc += phi[j, i] * phi[k, i]
            G[j, k] = acc
            G[k, j] = acc
    return G


@njit(cache=True)
def _project(phi, S, b, a):
    """Fill ``b = phi @ S`` and the clipped warm start ``a``; return ``|S|^2``."""
    n, dim = phi.shape
    s2 = 0.0
    for i in range(dim):
        s2 += S[i] * S[i]
    for j in range(n):
        acc = 0.0
        for i in range(dim):
            acc += phi[j, i] * S[i]
        b[j] = acc
        a[j] = min(1.0, max(-1.0, acc))
    return s2


@njit(cache=True)
def _infer_batch(phi, X, w, eps2, max_iter, tol, out):
    G = _gram(phi)
    b = np.empty(phi.shape[0])
    for k in range(X.shape[0]):
        s2 = _project(phi, X[k], b, out[k])
        _infer_one(G, b, s2, w, eps2, max_iter, tol, out[k])


def infer_coefficients(S, d: Dictionary, params: SparseParams) -> np.ndarray:
    """Coefficients in ``[-1, 1]`` for one surface ``(D,)`` or a batch ``(K, D)``."""
    X = np.asarray(S, dtype=np.float64)
    _check_dim(X, d)
    batch = np.ascontiguousarray(X.reshape(-1, d.dim))
    out = np.empty((batch.shape[0], d.n_atoms))
    if batch.shape[0]:
        _infer_batch(d.atoms, batch, params.weight, params.eps_smooth ** 2,
                     params.max_cg_iters, params.cg_tol, out)
    return out[0] if X.ndim == 1 else out


def warm_start(S, d: Dictionary) -> np.ndarray:
    return np.clip(np.asarray(S, dtype=np.float64) @ d.atoms.T, -1.0, 1.0)


# ---------------------------------------------------------------------------
# dictionary learning

@njit(cache=True)
def _normalize_rows(phi):
    for j in range(phi.shape[0]):
        nrm = 0.0
        for i in range(phi.shape[1]):
            nrm += phi[j, i] * phi[j, i]
        nrm = math.sqrt(nrm)
        if nrm > 0.0:
            for i in range(phi.shape[1]):
                phi[j, i] /= nrm


@njit(cache=True)
def _update(phi, S, a, eta, r):
    """Residual-driven atom update followed by renormalisation; fills ``r``."""
    n, dim = phi.shape
    for i in range(dim):
        acc = S[i]
        for j in range(n):
            acc -= a[j] * phi[j, i]
        r[i] = acc
    for j in range(n):
        if a[j] != 0.0:
            for i in range(dim):
                phi[j, i] += eta * a[j] * r[i]
    _normalize_rows(phi)


@njit(cache=True)
def _epoch(phi, X, order, w, eps2, max_iter, tol, eta):
    n, dim = phi.shape
    a = np.empty(n)
    b = np.empty(n)
    r = np.empty(dim)
    G = _gram(phi)
    total = 0.0
    for k in order:
        S = X[k]
        s2 = _project(phi, S, b, a)
        _infer_one(G, b, s2, w, eps2, max_iter, tol, a)
        _update(phi, S, a, eta, r)
        e = 0.0
        for i in range(dim):
            e += r[i] * r[i]
        for j in range(n):
            e += w * abs(a[j])
        total += e
        G = _gram(phi)
    return total / order.shape[0]


def init_atoms(n_atoms: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    phi = rng.uniform(0.0, 1.0, size=(n_atoms, dim))
    _normalize_rows(phi)
    return phi


def update_dictionary(d: Dictionary, S, a, params: SparseParams) -> Dictionary:
    """One learning step: ``phi_j += eta * a_j * (S - a @ phi)``, renormalised."""
    S = np.ascontiguousarray(S, dtype=np.float64)
    a = np.ascontiguousarray(a, dtype=np.float64)
    _check_dim(S, d)
    if a.shape != (d.n_atoms,):
        raise ValueError("coefficient count does not match dictionary")
    phi = d.atoms.copy()
    _update(phi, S, a, params.eta, np.empty(d.dim))
    return Dictionary(phi, d.channel_count, d.radius)


def train_dictionary(surfaces, n_atoms: int, params: SparseParams, seed: int = 0,
                     channel_count: int = 0, radius: int = 0):
    """Learn ``n_atoms`` atoms from a batch of surfaces.

    Epochs visit the batch in a seeded random order; training stops when
    the epoch-mean energy stops decreasing by more than ``epoch_tol``
    (relative) or after ``epochs_max`` epochs. Returns the dictionary and a
    :class:`TrainingReport`.
    """
    X = np.ascontiguousarray(surfaces, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("surfaces must be a (K, D) batch")
    if X.shape[0] == 0:
        raise ValueError("empty training batch")
    if n_atoms < 1:
        raise ValueError("n_atoms must be positive")
    rng = np.random.default_rng(seed)
    params = params.resolved(X)
    phi = init_atoms(n_atoms, X.shape[1], rng)
    report = TrainingReport(params, n_atoms, X.shape[0], seed=seed)
    prev = None
    for _ in range(params.epochs_max):
        order = rng.permutation(X.shape[0])
        e = _epoch(phi, X, order, params.weight, params.eps_smooth ** 2,
                   params.max_cg_iters, params.cg_tol, params.eta)
        report.epoch_energy.append(float(e))
        if prev is not None and e <= prev and prev - e < params.epoch_tol * abs(prev):
            report.converged = True
            break
        prev = e
    if not np.all(np.isfinite(phi)):
        raise FloatingPointError("dictionary training diverged")
    return Dictionary(phi, channel_count, radius), report


def reconstruction_error(surfaces, d: Dictionary, params: SparseParams) -> float:
    """Mean squared residual norm of the batch under inferred coefficients."""
    X = np.asarray(surfaces, dtype=np.float64)
    a = infer_coefficients(X, d, params)
    r = X - a @ d.atoms
    return float(np.mean(np.einsum("ij,ij->i", r, r)))


def select_dictionary_size(surfaces, candidate_ns, params: SparseParams, seed: int = 0):
    """Train one dictionary per candidate size; keep the lowest-error one.

    Returns ``(best_n, table)`` where ``table`` rows are
    ``(n, reconstruction_error, final_epoch_energy, epochs)``. Errors equal
    to within 1e-12 resolve to the smaller ``n``.
    """
    candidate_ns = list(candidate_ns)
    if not candidate_ns:
        raise ValueError("no candidate dictionary sizes")
    X = np.asarray(surfaces, dtype=np.float64)
    params = params.resolved(X)
    table = []
    for n in candidate_ns:
        d, rep = train_dictionary(X, n, params, seed)
        table.append((n, reconstruction_error(X, d, params), rep.epoch_energy[-1],
                      len(rep.epoch_energy)))
    best = None
    for n, err, *_ in sorted(table, key=lambda row: row[0]):
        if best is None or err < best[1] - 1e-12:
            best = (n, err)
    return best[0], table
