"""Synthetic spatio-temporal panels with a known signal and planted CAR fields."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .panel import Panel, QUANTITATIVE
from .spatial import AdjacencyGraph, build_graph, grid_graph


def _linear(X):
    return X[:, 0] + 2.0 * X[:, 1] - X[:, 2]


def _additive_nonlinear(X):
    return 2.0 * np.sin(np.pi * X[:, 0]) + X[:, 1] ** 2 + (X[:, 2] > 0.5).astype(float)


def _friedman(X):
    return 10.0 * np.sin(np.pi * X[:, 0] * X[:, 1]) + 20.0 * (X[:, 2] - 0.5) ** 2 + 10.0 * X[:, 3] + 5.0 * X[:, 4]


SIGNALS = {
    "linear": (_linear, 3),
    "additive-nonlinear": (_additive_nonlinear, 3),
    "friedman": (_friedman, 5),
}


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings.

    ``grid`` gives lattice dimensions; ``edges`` (pairs of tract ids) overrides
    it. ``p`` defaults to the number of signal covariates plus three noise
    columns. ``spatial_slots`` are 1-based.
    """

    grid: tuple = (10, 10)
    edges: tuple | None = None
    T: int = 10
    p: int | None = None
    signal: str = "additive-nonlinear"
    spatial_slots: tuple = ()
    tau_true: float = 1.0
    sigma2_true: float = 1.0
    missing_rate: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.signal not in SIGNALS:
            raise ValueError(f"unknown signal {self.signal!r}; available: {sorted(SIGNALS)}")
        if self.T < 1:
            raise ValueError("T must be positive")
        if not all(1 <= int(s) <= self.T for s in self.spatial_slots):
            raise ValueError("spatial_slots must lie in 1..T")
        if not (self.tau_true > 0 and self.sigma2_true >= 0):
            raise ValueError("tau_true must be positive and sigma2_true non-negative")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        if self.p is not None and self.p < SIGNALS[self.signal][1]:
            raise ValueError(f"signal {self.signal!r} needs at least {SIGNALS[self.signal][1]} covariates")

    @property
    def n_covariates(self) -> int:
        return self.p if self.p is not None else SIGNALS[self.signal][1] + 3


@dataclass(frozen=True, eq=False)
class SynthTruth:
    f: np.ndarray  # per row, f_true(x) on the complete covariates
    phi: np.ndarray  # (T, C)
    X_complete: np.ndarray = field(repr=False)


def sample_icar(g: AdjacencyGraph, tau: float, rng, size=None) -> np.ndarray:
    """Draw from the intrinsic CAR on the sum-zero subspace, precision ``tau * L``."""
    lam, V = g.spectrum
    shape = (g.C - 1,) if size is None else (size, g.C - 1)
    z = rng.standard_normal(shape)
    return (z / np.sqrt(tau * lam[1:])) @ V[:, 1:].T


def generate(spec: SynthSpec):
    """Return ``(panel, graph, truth)``.

    Rows are ordered by slot, then tract. Covariates are uniform on [0, 1);
    ``y = f_true(x) + phi_true + N(0, sigma2_true)``; missingness hits
    covariate cells uniformly at random after ``f_true`` is evaluated.
    """
    rng = np.random.default_rng(spec.rng_seed)
    if spec.edges is not None:
        g = build_graph([tuple(e) for e in spec.edges])
    else:
        g = grid_graph(*spec.grid)
    g.require_connected()
    C, T, p = g.C, spec.T, spec.n_covariates
    n = C * T

    X = rng.uniform(size=(n, p))
    f = SIGNALS[spec.signal][0](X)
    phi = np.zeros((T, C))
    for s in sorted(set(int(s) for s in spec.spatial_slots)):
        draw = sample_icar(g, spec.tau_true, rng)
        phi[s - 1] = draw - draw.mean()
    slot = np.repeat(np.arange(1, T + 1), C)
    tract = np.tile(np.arange(C), T)
    y = f + phi[slot - 1, tract] + rng.normal(0.0, np.sqrt(spec.sigma2_true), n)

    Xm = X.copy()
    if spec.missing_rate > 0:
        Xm[rng.uniform(size=X.shape) < spec.missing_rate] = np.nan
        for j in range(p):
            if np.all(np.isnan(Xm[:, j])):
                Xm[0, j] = X[0, j]

    panel = Panel(
        tract_ids=g.tract_ids,
        time_labels=tuple(range(1, T + 1)),
        tract=tract,
        slot=slot,
        y=y,
        X=Xm,
        covariate_names=tuple(f"x{j + 1}" for j in range(p)),
        covariate_kinds=(QUANTITATIVE,) * p,
        levels=((),) * p,
    )
    return panel, g, SynthTruth(f, phi, X)
