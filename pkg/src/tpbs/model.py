"""Low-rank tensor-product spline models.

A model maps [0, 1]^N to R^M as a sum of R separable components: component r
is an output vector v_r scaled by the product over dimensions of univariate
spline factors g_{n,r}(x_n) = sum_k c[n][r][k] B_{n,k}(x_n).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .splines import SplineSpace, design_matrix, eval_basis, gram

__all__ = [
    "TpbsModel",
    "ScalerParams",
    "DimensionError",
    "init_model",
    "forward",
    "forward_batch",
    "factor_norms",
]


class DimensionError(ValueError):
    """Input or stored-parameter dimensions are inconsistent."""


@dataclass
class ScalerParams:
    """Per-feature min-max scaling fitted on the training split.

    ``transform`` maps raw features into [0, 1] and clamps values that fall
    outside the training range; constant features are widened by ``eps`` so
    they map to 0.5.
    """

    mins: np.ndarray
    maxs: np.ndarray
    eps: float = 1e-6

    def __post_init__(self):
        self.mins = np.asarray(self.mins, dtype=float)
        self.maxs = np.asarray(self.maxs, dtype=float)
        if np.any(self.maxs <= self.mins):
            raise ValueError("scaler requires max > min for every feature")

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        scaled = (x - self.mins) / (self.maxs - self.mins)
        return np.clip(scaled, 0.0, 1.0)

    def inverse(self, u: np.ndarray) -> np.ndarray:
        return self.mins + np.asarray(u, dtype=float) * (self.maxs - self.mins)


@dataclass
class TpbsModel:
    """Parameter container for the rank-R separable spline model.

    Attributes:
        spaces: one SplineSpace per input dimension.
        coeffs: list of (R, K_n) arrays; row r holds the spline coefficients
            of factor g_{n,r}.
        out_vectors: (R, M) array; row r is the output vector of component r.
        scaler: optional feature scaler carried along for inference on raw
            inputs.

    Mutation rights belong to the trainer (single writer); inference treats
    the model as immutable and may share it across threads.
    """

    spaces: list[SplineSpace]
    coeffs: list[np.ndarray]
    out_vectors: np.ndarray
    scaler: ScalerParams | None = None

    def __post_init__(self):
        if len(self.spaces) != len(self.coeffs):
            raise DimensionError(
                f"{len(self.spaces)} spaces but {len(self.coeffs)} coefficient blocks"
            )
        rank = self.out_vectors.shape[0]
        for n, (space, block) in enumerate(zip(self.spaces, self.coeffs)):
            if block.shape != (rank, space.num_basis):
                raise DimensionError(
                    f"coeff block {n} has shape {block.shape}, "
                    f"expected ({rank}, {space.num_basis})"
                )
            if not np.all(np.isfinite(block)):
                raise ValueError(f"non-finite coefficients in dimension {n}")
        if not np.all(np.isfinite(self.out_vectors)):
            raise ValueError("non-finite output vectors")

    @property
    def input_dim(self) -> int:
        return len(self.spaces)

    @property
    def rank(self) -> int:
        return self.out_vectors.shape[0]

    @property
    def output_dim(self) -> int:
        return self.out_vectors.shape[1]

    @property
    def num_params(self) -> int:
        return sum(c.size for c in self.coeffs) + self.out_vectors.size

    def copy(self) -> "TpbsModel":
        return replace(
            self,
            coeffs=[c.copy() for c in self.coeffs],
            out_vectors=self.out_vectors.copy(),
        )


def init_model(
    input_dim: int,
    rank: int,
    output_dim: int,
    spaces: SplineSpace | list[SplineSpace],
    seed: int = 0,
    init_scale: float = 0.1,
) -> TpbsModel:
    """Seeded random initialization.

    Coefficients are 1 + Uniform(-init_scale, init_scale), so every factor
    starts near the constant-1 function (partition of unity) and component
    products stay O(1) at any input dimension; output vectors are
    Normal(0, init_scale^2).  Deterministic under ``seed``.
    """
    if rank < 1 or output_dim < 1 or input_dim < 1:
        raise ValueError("input_dim, rank and output_dim must be positive")
    if isinstance(spaces, SplineSpace):
        spaces = [spaces] * input_dim
    if len(spaces) != input_dim:
        raise DimensionError(f"expected {input_dim} spaces, got {len(spaces)}")
    rng = np.random.default_rng(seed)
    coeffs = [
        1.0 + rng.uniform(-init_scale, init_scale, size=(rank, sp.num_basis)) for sp in spaces
    ]
    out_vectors = rng.normal(0.0, init_scale, size=(rank, output_dim)) if init_scale > 0 else (
        np.zeros((rank, output_dim))
    )
    return TpbsModel(spaces=list(spaces), coeffs=coeffs, out_vectors=out_vectors)


def _check_point(model: TpbsModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != model.input_dim:
        raise DimensionError(f"expected {model.input_dim} coordinates, got {x.shape[0]}")
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError(f"point {x} outside [0, 1]^{model.input_dim}")
    return x


def forward(model: TpbsModel, x: np.ndarray) -> np.ndarray:
    """Model output at one point of [0, 1]^N, shape (M,).

    Uses banded basis evaluation: O(R N (p+1) + R M).
    """
    x = _check_point(model, x)
    prod = np.ones(model.rank)
    for space, block, xi in zip(model.spaces, model.coeffs, x):
        first, vals = eval_basis(space, float(xi), 0)
        prod *= block[:, first : first + space.degree + 1] @ vals
    return prod @ model.out_vectors


def forward_batch(model: TpbsModel, points: np.ndarray) -> np.ndarray:
    """Model outputs for a (num_points, N) array, shape (num_points, M)."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[1] != model.input_dim:
        raise DimensionError(
            f"expected points of shape (*, {model.input_dim}), got {points.shape}"
        )
    if np.any(points < 0.0) or np.any(points > 1.0):
        raise ValueError("points outside the unit hypercube")
    prod = np.ones((points.shape[0], model.rank))
    for n, (space, block) in enumerate(zip(model.spaces, model.coeffs)):
        prod *= design_matrix(space, points[:, n]) @ block.T
    return prod @ model.out_vectors


def factor_norms(model: TpbsModel) -> np.ndarray:
    """Per-component norm products s_r = ||v_r|| prod_n ||g_{n,r}||.

    ||g||^2 is the Gram quadratic form over [0, 1].  Entry r is zero iff
    v_r = 0 or some factor of component r is identically zero.
    """
    s = np.linalg.norm(model.out_vectors, axis=1)
    for space, block in zip(model.spaces, model.coeffs):
        g0 = gram(space)
        sq = np.einsum("rk,rk->r", g0.right_apply(block), block)
        s *= np.sqrt(np.maximum(sq, 0.0))
    return s
