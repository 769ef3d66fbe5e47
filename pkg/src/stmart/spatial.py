"""Adjacency graphs, Moran's I and intrinsic-CAR smoothing of residual fields.

The smoother models one residual vector per time slot as ``r_t = phi_t + eps``
with ``eps ~ N(0, sigma2 I)`` and an intrinsic CAR prior on ``phi_t`` with
precision ``tau_t * L`` (``L`` the graph Laplacian). Two estimators are offered:

``"icm"``
    Joint posterior mode of (phi, sigma2, tau) under flat priors by iterated
    conditional maximisation. The joint mode is degenerate for most data
    (the iteration typically drifts to ``tau -> tau_max``, ``phi -> 0``), so
    this is mainly of diagnostic value.
``"marginal"``
    sigma2 and tau maximise the marginal likelihood of the residuals (phi
    integrated out, EM iterations in the Laplacian eigenbasis); phi is then
    the conditional mode given those values.

Both return phi centred to sum zero in each slot.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu
from scipy.stats import norm

TAU_MAX = 1e6
SIGMA2_FLOOR = 1e-12


class GraphError(ValueError):
    """Invalid adjacency structure."""


class ZeroVarianceError(ValueError):
    """Moran's I is undefined for constant values."""


@dataclass(frozen=True, eq=False)
class AdjacencyGraph:
    """Undirected, unweighted neighbourhood graph over a tract registry.

    ``edges`` holds each undirected edge once as an index pair ``(i, j)``
    with ``i < j``, sorted.
    """

    tract_ids: tuple
    edges: np.ndarray

    @property
    def C(self) -> int:
        return len(self.tract_ids)

    @cached_property
    def index(self) -> dict:
        return {t: i for i, t in enumerate(self.tract_ids)}

    @cached_property
    def degrees(self) -> np.ndarray:
        d = np.bincount(self.edges.ravel(), minlength=self.C)
        d.setflags(write=False)
        return d

    @cached_property
    def neighbors(self) -> tuple:
        out = [[] for _ in range(self.C)]
        for i, j in self.edges:
            out[i].append(int(j))
            out[j].append(int(i))
        return tuple(tuple(sorted(nb)) for nb in out)

    def adjacency(self) -> sp.csr_matrix:
        i, j = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * len(i))
        return sp.csr_matrix((data, (np.r_[i, j], np.r_[j, i])), shape=(self.C, self.C))

    def laplacian(self) -> sp.csr_matrix:
        return (sp.diags(self.degrees.astype(float)) - self.adjacency()).tocsr()

    def components(self) -> list[list]:
        n, labels = connected_components(self.adjacency(), directed=False)
        return [[self.tract_ids[k] for k in np.flatnonzero(labels == c)] for c in range(n)]

    def require_connected(self):
        comps = self.components()
        if len(comps) > 1:
            shown = "; ".join("{" + ", ".join(map(str, c[:5])) + (", ..." if len(c) > 5 else "") + "}" for c in comps[:5])
            raise GraphError(f"graph has {len(comps)} connected components: {shown}")

    @cached_property
    def spectrum(self):
        """Eigen-decomposition of the Laplacian with the null eigenvalue set to 0."""
        self.require_connected()
        vals, vecs = np.linalg.eigh(self.laplacian().toarray())
        vals[0] = 0.0
        vals.setflags(write=False)
        vecs.setflags(write=False)
        return vals, vecs

    def subgraph(self, keep) -> "AdjacencyGraph":
        """Induced subgraph on the tract indices in ``keep`` (isolated nodes allowed)."""
        keep = np.asarray(sorted(set(int(k) for k in keep)))
        remap = -np.ones(self.C, dtype=np.int64)
        remap[keep] = np.arange(keep.size)
        e = remap[self.edges]
        e = e[(e >= 0).all(axis=1)]
        return AdjacencyGraph(tuple(self.tract_ids[k] for k in keep), e.reshape(-1, 2))


def build_graph(
    edges: Iterable[Sequence] | Mapping[object, Iterable] ,
    tract_ids: Sequence | None = None,
    allow_isolated: bool = False,
) -> AdjacencyGraph:
    """Build a graph from an edge list or a mapping of neighbour lists.

    Edge lists are undirected: ``(A, B)`` and ``(B, A)`` are the same edge.
    Neighbour lists that are not mutual are symmetrised with a warning.
    Self-loops, ids outside ``tract_ids`` and (unless ``allow_isolated``)
    tracts without neighbours raise :class:`GraphError`.
    """
    pairs = []
    if isinstance(edges, Mapping):
        directed = set()
        for a, nbs in edges.items():
            for b in nbs:
                directed.add((a, b))
        one_way = sorted((a, b) for a, b in directed if (b, a) not in directed and a != b)
        if one_way:
            warnings.warn(
                f"neighbour lists are not symmetric ({len(one_way)} one-way links, e.g. {one_way[0]}); symmetrising",
                stacklevel=2,
            )
        pairs = list(directed)
        nodes_seen = list(edges.keys())
    else:
        for e in edges:
            a, b = e
            pairs.append((a, b))
        nodes_seen = []

    for a, b in pairs:
        if a == b:
            raise GraphError(f"self-loop on tract {a!r}")

    if tract_ids is None:
        ids = set(nodes_seen)
        for a, b in pairs:
            ids.update((a, b))
        registry = tuple(sorted(ids, key=str))
    else:
        registry = tuple(tract_ids)
        if len(set(registry)) != len(registry):
            raise GraphError("tract registry contains duplicates")
    index = {t: i for i, t in enumerate(registry)}
    unknown = sorted({t for pair in pairs for t in pair if t not in index} | {t for t in nodes_seen if t not in index}, key=str)
    if unknown:
        raise GraphError(f"unknown tract id(s): {', '.join(map(str, unknown[:20]))}")

    und = sorted({(min(index[a], index[b]), max(index[a], index[b])) for a, b in pairs})
    arr = np.array(und, dtype=np.int64).reshape(-1, 2)
    arr.setflags(write=False)
    g = AdjacencyGraph(registry, arr)
    if not allow_isolated:
        isolated = [registry[k] for k in np.flatnonzero(g.degrees == 0)]
        if isolated:
            raise GraphError(f"isolated tract(s) with no neighbours: {', '.join(map(str, isolated[:20]))}")
    return g


def grid_graph(rows: int, cols: int) -> AdjacencyGraph:
    """Rook-adjacency lattice; tract ids are ``"r{i}c{j}"`` in row-major order."""
    ids = [f"r{i}c{j}" for i in range(rows) for j in range(cols)]
    edges = []
    for i in range(rows):
        for j in range(cols):
            if j + 1 < cols:
                edges.append((ids[i * cols + j], ids[i * cols + j + 1]))
            if i + 1 < rows:
                edges.append((ids[i * cols + j], ids[(i + 1) * cols + j]))
    return build_graph(edges, tract_ids=ids)


# -- Moran's I -----------------------------------------------------------------


@dataclass(frozen=True)
class MoranResult:
    I: float
    expected: float
    variance: float
    z: float
    p_value: float
    method: str

    @property
    def sd(self) -> float:
        return float(np.sqrt(self.variance))


def _moran_stat(z, edges, S0):
    """Moran's I for centred values ``z`` (last axis = tracts)."""
    cross = 2.0 * np.sum(z[..., edges[:, 0]] * z[..., edges[:, 1]], axis=-1)
    return z.shape[-1] / S0 * cross / np.sum(z * z, axis=-1)


def morans_i(values, g: AdjacencyGraph, method="normal", n_perm=999, rng_seed=0) -> MoranResult:
    """Global Moran's I with binary weights and a two-sided p-value.

    ``method="normal"`` uses the normal approximation under randomisation
    (the normality-assumption variance when there are only 3 tracts);
    ``method="permutation"`` uses ``n_perm`` random relabellings of the values.
    """
    x = np.asarray(values, dtype=float).ravel()
    n = x.size
    if n != g.C:
        raise ValueError(f"expected {g.C} values, got {n}")
    if n < 3:
        raise ValueError("Moran's I needs at least 3 tracts")
    if not np.all(np.isfinite(x)):
        raise ValueError("values must be finite")
    z = x - x.mean()
    m2 = float(np.sum(z * z))
    if m2 <= 1e-300 or np.ptp(x) == 0:
        raise ZeroVarianceError("zero variance: Moran's I is undefined for constant values")
    n_edges = g.edges.shape[0]
    if n_edges == 0:
        raise GraphError("graph has no edges")
    S0 = 2.0 * n_edges
    I = float(_moran_stat(z, g.edges, S0))
    E = -1.0 / (n - 1)

    if method == "normal":
        S1 = 4.0 * n_edges
        S2 = float(np.sum((2.0 * g.degrees) ** 2))
        if n > 3:
            b2 = n * float(np.sum(z**4)) / m2**2
            num = n * ((n * n - 3 * n + 3) * S1 - n * S2 + 3 * S0**2) - b2 * ((n * n - n) * S1 - 2 * n * S2 + 6 * S0**2)
            var = num / ((n - 1) * (n - 2) * (n - 3) * S0**2) - E**2
        else:
            var = (n * n * S1 - n * S2 + 3 * S0**2) / ((n * n - 1) * S0**2) - E**2
        var = max(var, 0.0)
        zs = (I - E) / np.sqrt(var) if var > 0 else 0.0
        p = float(min(1.0, 2.0 * norm.sf(abs(zs))))
        return MoranResult(I, E, float(var), float(zs), p, "normal")
    if method == "permutation":
        if n_perm < 1:
            raise ValueError("n_perm must be positive")
        rng = np.random.default_rng(rng_seed)
        perms = np.array([rng.permutation(z) for _ in range(n_perm)])
        null = _moran_stat(perms, g.edges, S0)
        var = float(np.var(null))
        extreme = np.sum(np.abs(null - E) >= abs(I - E) - 1e-12)
        p = float((1.0 + extreme) / (n_perm + 1.0))
        zs = (I - E) / np.sqrt(var) if var > 0 else 0.0
        return MoranResult(I, E, var, float(zs), p, "permutation")
    raise ValueError(f"unknown method {method!r}")


def morans_i_dense(values, W) -> float:
    """Reference evaluation ``(n / S0) * z'Wz / z'z`` with a dense weight matrix."""
    x = np.asarray(values, dtype=float)
    W = np.asarray(W, dtype=float)
    z = x - x.mean()
    return float(x.size / W.sum() * (z @ W @ z) / (z @ z))


# -- CAR smoothing ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SpatialField:
    """Spatial effects per (slot, tract); zero on slots outside ``slots``.

    ``phi[t - 1]`` belongs to 1-based slot ``t``. ``tau`` is NaN off ``slots``.
    """

    phi: np.ndarray
    tau: np.ndarray
    sigma2: float
    slots: tuple = ()
    pinned: tuple = ()
    sweeps: int = 0
    converged: bool = True
    objective: np.ndarray = field(default_factory=lambda: np.zeros(0))
    method: str = "icm"

    @classmethod
    def zeros(cls, T, C) -> "SpatialField":
        return cls(np.zeros((T, C)), np.full(T, np.nan), SIGMA2_FLOOR)

    def at(self, slot, tract):
        """phi looked up per row from 1-based slots and 0-based tract indices."""
        return self.phi[np.asarray(slot) - 1, np.asarray(tract)]


def solve_phi(r, g: AdjacencyGraph, sigma2, tau, center=True, _lu=None):
    """Solve ``(I / sigma2 + tau * L) phi = r / sigma2`` for one slot."""
    r = np.asarray(r, dtype=float)
    if _lu is None:
        A = (sp.identity(g.C, format="csc") / sigma2 + tau * g.laplacian().tocsc()).tocsc()
        _lu = splu(A)
    phi = _lu.solve(r / sigma2)
    if center:
        phi = phi - phi.mean()
    return phi


def icm_objective(R, Phi, sigma2, tau, g: AdjacencyGraph):
    """Negative joint log-posterior (flat priors on sigma2 and each tau, up to a constant)."""
    L = g.laplacian()
    rank = g.C - 1
    n = R.size
    rss = float(np.sum((R - Phi) ** 2))
    out = 0.5 * n * np.log(sigma2) + rss / (2.0 * sigma2)
    for t in range(R.shape[0]):
        q = float(Phi[t] @ (L @ Phi[t]))
        out += 0.5 * tau[t] * q - 0.5 * rank * np.log(tau[t])
    return float(out)


def marginal_objective(R, sigma2, tau, g: AdjacencyGraph):
    """Negative log marginal likelihood of the residuals with phi integrated out."""
    lam, V = g.spectrum
    coef = R @ V
    var = np.full(R.shape, sigma2)
    var[:, 1:] += 1.0 / (tau[:, None] * lam[None, 1:])
    return float(0.5 * np.sum(np.log(var) + coef * coef / var))


def _rel_change(new, old):
    new, old = np.asarray(new, dtype=float), np.asarray(old, dtype=float)
    scale = max(float(np.max(np.abs(new))), float(np.max(np.abs(old))), 1e-300)
    return float(np.max(np.abs(new - old))) / scale


def car_smooth(
    residuals,
    g: AdjacencyGraph,
    slots: Sequence[int] | None = None,
    init: SpatialField | None = None,
    method: str = "icm",
    tau_max: float = TAU_MAX,
    sigma2_floor: float = SIGMA2_FLOOR,
    tol: float = 1e-8,
    max_sweeps: int | None = None,
) -> SpatialField:
    """Estimate the spatial field of a (T, C) residual array.

    Parameters
    ----------
    residuals : array of shape (T, C)
        Rows for slots outside ``slots`` are ignored and may be NaN.
    g : AdjacencyGraph
        Must be connected.
    slots : sequence of int, optional
        1-based slots to smooth; all rows by default.
    init : SpatialField, optional
        Warm start. Slots without a finite ``tau`` start from ``1 / sigma2``.
    method : {"icm", "marginal"}
    tau_max, sigma2_floor : float
        Numerical guards. A slot whose field has ``phi' L phi < 1e-12`` gets
        ``tau = tau_max`` and is listed in ``pinned``.
    tol : float
        Stop when the largest relative parameter change drops below this.
    max_sweeps : int, optional
        Defaults to 100 for ICM and 1000 EM iterations for ``"marginal"``.
    """
    R_all = np.asarray(residuals, dtype=float)
    if R_all.ndim == 1:
        R_all = R_all.reshape(1, -1)
    T, C = R_all.shape
    if C != g.C:
        raise ValueError(f"residuals have {C} tracts, graph has {g.C}")
    g.require_connected()
    slots = tuple(range(1, T + 1)) if slots is None else tuple(sorted(int(s) for s in slots))
    if not slots:
        raise ValueError("no slots to smooth")
    if any(not 1 <= s <= T for s in slots):
        raise ValueError("slot index out of range")
    rows = np.array(slots) - 1
    R = R_all[rows]
    if not np.all(np.isfinite(R)):
        raise ValueError("every smoothed slot needs a finite residual for every tract")
    if method not in ("icm", "marginal"):
        raise ValueError(f"unknown method {method!r}")
    if max_sweeps is None:
        max_sweeps = 100 if method == "icm" else 1000

    phi_out = np.zeros((T, C))
    tau_out = np.full(T, np.nan)
    if float(np.sum(R * R)) == 0.0:
        tau_out[rows] = tau_max
        return SpatialField(phi_out, tau_out, sigma2_floor, slots, slots, 0, True, np.zeros(0), method)

    if init is not None and init.phi.shape == (T, C):
        Phi = init.phi[rows].copy()
        Phi -= Phi.mean(axis=1, keepdims=True)
        sigma2 = max(float(init.sigma2), sigma2_floor)
        tau = init.tau[rows].copy()
    else:
        Phi = np.zeros_like(R)
        sigma2 = max(float(np.var(R)), sigma2_floor)
        tau = np.full(len(slots), np.nan)
    tau = np.where(np.isfinite(tau) & (tau > 0), tau, 1.0 / sigma2)
    tau = np.minimum(tau, tau_max)

    if method == "icm":
        Phi, sigma2, tau, pinned, sweeps, converged, hist = _icm(R, g, Phi, sigma2, tau, tau_max, sigma2_floor, tol, max_sweeps)
    else:
        Phi, sigma2, tau, pinned, sweeps, converged, hist = _marginal(R, g, sigma2, tau, tau_max, sigma2_floor, tol, max_sweeps)

    phi_out[rows] = Phi
    tau_out[rows] = tau
    pinned_slots = tuple(s for s, p in zip(slots, pinned) if p)
    return SpatialField(phi_out, tau_out, float(sigma2), slots, pinned_slots, sweeps, converged, np.array(hist), method)


def _icm(R, g, Phi, sigma2, tau, tau_max, sigma2_floor, tol, max_sweeps):
    L = g.laplacian()
    rank = g.C - 1
    Lc = L.tocsc()
    eye = sp.identity(g.C, format="csc")
    pinned = np.zeros(R.shape[0], dtype=bool)
    hist = [icm_objective(R, Phi, sigma2, tau, g)]
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        old = (Phi.copy(), sigma2, tau.copy())
        for t in range(R.shape[0]):
            lu = splu((eye / sigma2 + tau[t] * Lc).tocsc())
            Phi[t] = solve_phi(R[t], g, sigma2, tau[t], _lu=lu)
        sigma2 = max(float(np.sum((R - Phi) ** 2)) / R.size, sigma2_floor)
        for t in range(R.shape[0]):
            q = float(Phi[t] @ (L @ Phi[t]))
            tau[t] = tau_max if q < 1e-12 else min(rank / q, tau_max)
            pinned[t] = tau[t] >= tau_max
        hist.append(icm_objective(R, Phi, sigma2, tau, g))
        change = max(_rel_change(Phi, old[0]), abs(sigma2 - old[1]) / max(sigma2, old[1]), _rel_change(tau, old[2]))
        if change < tol:
            converged = True
            break
    return Phi, sigma2, tau, pinned, sweeps, converged, hist


def _marginal(R, g, sigma2, tau, tau_max, sigma2_floor, tol, max_iter):
    lam, V = g.spectrum
    coef = R @ V
    n = R.size
    rank = g.C - 1
    hist = [marginal_objective(R, sigma2, tau, g)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        old_s, old_t = sigma2, tau.copy()
        prec = 1.0 / sigma2 + tau[:, None] * lam[None, :]
        mean = (coef / sigma2) / prec
        var = 1.0 / prec
        mean[:, 0] = 0.0
        var[:, 0] = 0.0
        sigma2 = max(float(np.sum((coef - mean) ** 2) + np.sum(var)) / n, sigma2_floor)
        q = np.sum(lam[None, :] * (mean * mean + var), axis=1)
        tau = np.minimum(rank / np.maximum(q, 1e-300), tau_max)
        hist.append(marginal_objective(R, sigma2, tau, g))
        change = max(abs(sigma2 - old_s) / max(sigma2, old_s), _rel_change(tau, old_t))
        if change < tol:
            converged = True
            break
    Phi = np.vstack([solve_phi(R[t], g, sigma2, tau[t]) for t in range(R.shape[0])])
    pinned = tau >= tau_max
    return Phi, sigma2, tau, pinned, it, converged, hist
