"""Independent verification oracles.

Brute-force reference computations for the closed-form machinery: dense
tensor-grid quadrature for energies and marginals, dense basis contraction
for the forward pass, and central finite differences for gradients.  These
deliberately avoid the Gram/Hadamard assembly path so the two routes only
agree if both are right.  Quadrature uses per-piece Gauss rules sized to the
piecewise-polynomial integrands, so oracle values are exact up to rounding.
"""

from __future__ import annotations

import numpy as np

from .density import DensityModel
from .energy import ParamGrad
from .model import TpbsModel
from .splines import SplineSpace, eval_basis_dense

__all__ = [
    "dense_forward",
    "quadrature_factor_norm",
    "quadrature_energy",
    "quadrature_uniform_marginal",
    "quadrature_conditional_marginal",
    "finite_difference_grad",
]


def piece_rule(
    space: SplineSpace,
    interval: tuple[float, float] = (0.0, 1.0),
    extra_edges: np.ndarray | None = None,
    order: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Gauss nodes/weights over every (span, extra-edge) piece inside interval."""
    lo, hi = interval
    edges = set(space.span_breaks().tolist())
    if extra_edges is not None:
        edges |= set(np.asarray(extra_edges, dtype=float).tolist())
    edges |= {lo, hi}
    edges = np.array(sorted(e for e in edges if lo <= e <= hi))
    order = order or (space.degree + 1)
    base_nodes, base_weights = np.polynomial.legendre.leggauss(order)
    nodes, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        if b <= a:
            continue
        half = 0.5 * (b - a)
        nodes.append(0.5 * (a + b) + half * base_nodes)
        weights.append(half * base_weights)
    return np.concatenate(nodes), np.concatenate(weights)


def dense_forward(model: TpbsModel, x: np.ndarray) -> np.ndarray:
    """Forward pass summing all K basis terms per dimension (no banding)."""
    x = np.asarray(x, dtype=float).ravel()
    prod = np.ones(model.rank)
    for n, space in enumerate(model.spaces):
        basis = eval_basis_dense(space, float(x[n]))
        prod *= model.coeffs[n] @ basis
    return prod @ model.out_vectors


def quadrature_factor_norm(model: TpbsModel, n: int, r: int, num_pieces: int = 64) -> float:
    """Composite-quadrature L2 norm of one univariate factor."""
    nodes, weights = piece_rule(model.spaces[n], order=num_pieces)
    values = np.array(
        [model.coeffs[n][r] @ eval_basis_dense(model.spaces[n], x) for x in nodes]
    )
    return float(np.sqrt(np.sum(weights * values * values)))


def _factor_tables(model: TpbsModel, intervals) -> tuple[list, list, list]:
    """Per-dimension factor values/derivatives at per-dimension quadrature nodes."""
    values, derivs, weights = [], [], []
    for n, space in enumerate(model.spaces):
        nodes, w = piece_rule(space, intervals[n])
        basis0 = np.array([eval_basis_dense(space, x, 0) for x in nodes])
        basis1 = np.array([eval_basis_dense(space, x, 1) for x in nodes])
        values.append(basis0 @ model.coeffs[n].T)  # (nodes, R)
        derivs.append(basis1 @ model.coeffs[n].T)
        weights.append(w)
    return values, derivs, weights


def quadrature_energy(
    model: TpbsModel, intervals: list[tuple[float, float]] | None = None
) -> float:
    """Tensor-product quadrature of the squared gradient norm over a box.

    Exact for the piecewise-polynomial integrand.  ``intervals`` defaults to
    the whole unit cube.
    """
    ndim = model.input_dim
    if intervals is None:
        intervals = [(0.0, 1.0)] * ndim
    values, derivs, weights = _factor_tables(model, intervals)
    total = 0.0
    for q in range(ndim):
        # partial derivative along q on the full tensor grid
        part = None
        for n in range(ndim):
            table = derivs[n] if n == q else values[n]  # (nodes_n, R)
            if part is None:
                part = table
            else:
                part = part[..., None, :] * table  # (..., nodes_n, R)
        grid = part @ model.out_vectors  # (..., M)
        sq = np.sum(grid * grid, axis=-1)
        for n in range(ndim - 1, -1, -1):
            sq = np.tensordot(sq, weights[n], axes=([n], [0]))
        total += float(sq)
    return total


def quadrature_uniform_marginal(model: TpbsModel, mask) -> np.ndarray:
    """Integrate the forward pass over the missing coordinates on a dense
    tensor grid (no separability shortcut)."""
    missing = np.flatnonzero(~mask.observed)
    if missing.size == 0:
        return dense_forward(model, mask.values)
    rules = [piece_rule(model.spaces[d]) for d in missing]
    out = np.zeros(model.output_dim)
    grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    wgrids = np.meshgrid(*[r[1] for r in rules], indexing="ij")
    coords = np.stack([g.ravel() for g in grids], axis=1)
    wtotal = np.prod(np.stack([w.ravel() for w in wgrids], axis=1), axis=1)
    point = np.array(mask.values, dtype=float)
    for c, w in zip(coords, wtotal):
        point[missing] = c
        out += w * dense_forward(model, point)
    return out


def quadrature_conditional_marginal(
    model: TpbsModel, density: DensityModel, mask
) -> np.ndarray:
    """Conditional expectation by brute-force quadrature of g * p over the
    missing coordinates, divided by the observed-marginal mass."""
    missing = np.flatnonzero(~mask.observed)
    weights = density.weights
    obs_heights = np.ones(density.num_components)
    for n in np.flatnonzero(mask.observed):
        obs_heights = obs_heights * density.component_values(n, mask.values[n : n + 1])[0]
    denominator = float(obs_heights @ weights)
    if missing.size == 0:
        return dense_forward(model, mask.values)
    rules = []
    for d in missing:
        num_bins = density.bins[d].shape[1]
        rules.append(
            piece_rule(model.spaces[d], extra_edges=np.linspace(0.0, 1.0, num_bins + 1))
        )
    grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    wgrids = np.meshgrid(*[r[1] for r in rules], indexing="ij")
    coords = np.stack([g.ravel() for g in grids], axis=1)
    wtotal = np.prod(np.stack([w.ravel() for w in wgrids], axis=1), axis=1)
    point = np.array(mask.values, dtype=float)
    numerator = np.zeros(model.output_dim)
    for c, w in zip(coords, wtotal):
        point[missing] = c
        heights = obs_heights.copy()
        for d, x in zip(missing, c):
            heights = heights * density.component_values(d, np.array([x]))[0]
        numerator += w * float(heights @ weights) * dense_forward(model, point)
    return numerator / denominator


def finite_difference_grad(fn, model: TpbsModel, step: float = 1e-5) -> ParamGrad:
    """Central-difference gradient of a scalar function of the model."""
    coeff_grads = []
    for n, block in enumerate(model.coeffs):
        g = np.zeros_like(block)
        for i in range(block.shape[0]):
            for j in range(block.shape[1]):
                saved = block[i, j]
                block[i, j] = saved + step
                up = fn(model)
                block[i, j] = saved - step
                down = fn(model)
                block[i, j] = saved
                g[i, j] = (up - down) / (2.0 * step)
        coeff_grads.append(g)
    out = model.out_vectors
    og = np.zeros_like(out)
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            saved = out[i, j]
            out[i, j] = saved + step
            up = fn(model)
            out[i, j] = saved - step
            down = fn(model)
            out[i, j] = saved
            og[i, j] = (up - down) / (2.0 * step)
    return ParamGrad(coeff_grads=coeff_grads, out_grad=og)
