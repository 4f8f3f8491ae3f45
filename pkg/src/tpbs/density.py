"""Low-rank product-histogram density estimation.

The density is a mixture of S products of per-dimension histograms: the
coordinates are conditionally independent given a latent component.  Fitting
is EM with the closed-form maximum-likelihood M-step (responsibility-weighted
histograms), so the recorded log-likelihood trace is nondecreasing; the
returned model's bins get one pseudo-count of Laplace smoothing per bin to
keep every density strictly positive (its value appears in denominators
downstream).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .splines import SplineSpace, basis_masses

__all__ = ["DensityModel", "fit_density", "density_eval", "cross_gram"]


@dataclass
class DensityModel:
    """Mixture weights plus per-dimension histogram heights.

    ``bins[n]`` has shape (S, B_n); entry (s, b) is the density value of
    component s on bin [b/B_n, (b+1)/B_n), so rows average to 1 (unit mass).
    """

    weights: np.ndarray
    bins: list[np.ndarray]
    log_likelihoods: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any(self.weights < -1e-12) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be a probability vector")
        s = self.weights.shape[0]
        for n, values in enumerate(self.bins):
            if values.shape[0] != s:
                raise ValueError(f"bins[{n}] has {values.shape[0]} rows, expected {s}")
            if np.any(values < 0):
                raise ValueError(f"bins[{n}] has negative values")
            mass = values.mean(axis=1)
            if np.any(np.abs(mass - 1.0) > 1e-9):
                raise ValueError(f"bins[{n}] rows must have unit mass, got {mass}")

    @property
    def num_components(self) -> int:
        return self.weights.shape[0]

    @property
    def input_dim(self) -> int:
        return len(self.bins)

    @property
    def bins_per_dim(self) -> list[int]:
        return [b.shape[1] for b in self.bins]

    def component_values(self, n: int, x: np.ndarray) -> np.ndarray:
        """Histogram heights of every component of dimension n at points x;
        shape (len(x), S)."""
        values = self.bins[n]
        idx = _bin_index(np.asarray(x, dtype=float), values.shape[1])
        return values[:, idx].T


def _bin_index(x: np.ndarray, num_bins: int) -> np.ndarray:
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("density inputs must lie in [0, 1]")
    return np.minimum((x * num_bins).astype(int), num_bins - 1)


def density_eval(density: DensityModel, x: np.ndarray) -> float:
    """Mixture density at one point of [0, 1]^N."""
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != density.input_dim:
        raise ValueError(f"expected {density.input_dim} coordinates, got {x.shape[0]}")
    per_comp = density.weights.copy()
    for n in range(density.input_dim):
        per_comp *= density.component_values(n, x[n : n + 1])[0]
    return float(per_comp.sum())


def density_eval_batch(density: DensityModel, points: np.ndarray) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    per_comp = np.broadcast_to(density.weights, (points.shape[0], density.num_components)).copy()
    for n in range(density.input_dim):
        per_comp *= density.component_values(n, points[:, n])
    return per_comp.sum(axis=1)


def _log_component_scores(weights, bins, bin_idx):
    """log(w_s) + sum_n log bins[n][s, idx_n] for every (sample, component)."""
    with np.errstate(divide="ignore"):
        scores = np.broadcast_to(
            np.log(weights), (bin_idx[0].shape[0], weights.shape[0])
        ).copy()
        for values, idx in zip(bins, bin_idx):
            scores += np.log(values[:, idx].T)
    return scores


def _m_step(resp, bin_idx, bins_per_dim, pseudo_count=0.0):
    """Responsibility-weighted histogram update; optional Laplace smoothing."""
    total = resp.sum(axis=0)
    weights = total / resp.shape[0]
    bins = []
    for idx, num_bins in zip(bin_idx, bins_per_dim):
        counts = np.zeros((resp.shape[1], num_bins))
        for b in range(num_bins):
            sel = idx == b
            if sel.any():
                counts[:, b] = resp[sel].sum(axis=0)
        counts += pseudo_count
        mass = counts.sum(axis=1, keepdims=True)
        mass[mass == 0.0] = 1.0  # dead component: leave its bins at zero
        bins.append(counts / mass * num_bins)
    return weights, bins


def _seed_responsibilities(points, num_components, rng):
    """Soft assignments around greedy distance-weighted seed points."""
    m = points.shape[0]
    centers = [points[rng.integers(m)]]
    for _ in range(num_components - 1):
        d2 = np.min(
            [np.sum((points - c) ** 2, axis=1) for c in centers], axis=0
        )
        if d2.sum() <= 0:
            centers.append(points[rng.integers(m)])
            continue
        centers.append(points[rng.choice(m, p=d2 / d2.sum())])
    d2 = np.stack([np.sum((points - c) ** 2, axis=1) for c in centers], axis=1)
    nearest = d2.argmin(axis=1)
    resp = np.full((m, num_components), 0.2 / max(num_components - 1, 1))
    resp[np.arange(m), nearest] = 0.8
    if num_components == 1:
        resp[:] = 1.0
    return resp


def fit_density(
    points: np.ndarray,
    num_components: int,
    bins_per_dim: int | list[int] = 100,
    em_iters: int = 100,
    seed: int = 0,
    pseudo_count: float = 1.0,
) -> DensityModel:
    """Fit the mixture by EM.

    The log-likelihood trace (one entry per iteration, evaluated on the
    unsmoothed ML parameters) is stored on the returned model; it is
    nondecreasing.  The returned bins carry ``pseudo_count`` Laplace
    smoothing so they are strictly positive.

    Raises:
        ValueError: more components than points, or points outside [0, 1]^N.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    m, ndim = points.shape
    if num_components < 1:
        raise ValueError("need at least one component")
    if num_components > m:
        raise ValueError(f"{num_components} components exceed {m} points")
    if isinstance(bins_per_dim, int):
        bins_per_dim = [bins_per_dim] * ndim
    bin_idx = [_bin_index(points[:, n], bins_per_dim[n]) for n in range(ndim)]

    rng = np.random.default_rng(seed)
    resp = _seed_responsibilities(points, num_components, rng)
    trace = []
    for _ in range(em_iters):
        weights, bins = _m_step(resp, bin_idx, bins_per_dim)
        scores = _log_component_scores(weights, bins, bin_idx)
        norm = logsumexp(scores, axis=1)
        trace.append(float(norm.sum()))
        resp = np.exp(scores - norm[:, None])
    weights, bins = _m_step(resp, bin_idx, bins_per_dim, pseudo_count=pseudo_count)
    return DensityModel(
        weights=weights, bins=bins, log_likelihoods=np.asarray(trace)
    )


def cross_gram(space: SplineSpace, bin_values: np.ndarray) -> np.ndarray:
    """Inner products <B_k, p> of every basis function with a histogram.

    ``bin_values`` holds the histogram heights on the uniform bins of [0, 1].
    The integrand is piecewise polynomial of degree p on each span-bin
    overlap, so per-piece quadrature is exact.
    """
    bin_values = np.asarray(bin_values, dtype=float)
    num_bins = bin_values.shape[-1]
    masses = bin_mass_table(space, num_bins)
    return bin_values @ masses


def bin_mass_table(space: SplineSpace, num_bins: int) -> np.ndarray:
    """(num_bins, K) table of basis masses over each uniform bin, cached."""
    key = ("bin_masses", num_bins)
    if key not in space._cache:
        edges = np.linspace(0.0, 1.0, num_bins + 1)
        table = np.empty((num_bins, space.num_basis))
        for b in range(num_bins):
            table[b] = basis_masses(space, (edges[b], edges[b + 1]))
        space._cache[key] = table
    return space._cache[key]
