"""Prediction from incomplete observations.

Three estimators share a pretrained separable model: mean imputation
(evaluate at the training means), uniform marginalization (integrate missing
factors over [0, 1]), and density-weighted marginalization (conditional
expectation under a fitted product-histogram mixture).  All work in scaled
coordinates; ``ObservationMask.from_raw`` applies the model's scaler and
clamps first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .density import DensityModel, bin_mass_table
from .model import DimensionError, ScalerParams, TpbsModel, forward
from .splines import basis_masses, eval_basis

__all__ = [
    "ObservationMask",
    "MarginalPredictor",
    "predict_full",
    "predict_mean_impute",
    "predict_uniform_marginal",
    "predict_density_marginal",
    "mask_suite",
]


@dataclass
class ObservationMask:
    """Which coordinates of one sample were observed, and their scaled values.

    ``values`` has full length N; entries at unobserved positions are ignored.
    """

    observed: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.observed = np.asarray(self.observed, dtype=bool)
        self.values = np.asarray(self.values, dtype=float)
        if self.observed.shape != self.values.shape:
            raise ValueError("observed and values must have equal length")
        seen = self.values[self.observed]
        if seen.size and (seen.min() < 0.0 or seen.max() > 1.0):
            raise ValueError("observed values must be scaled into [0, 1]")

    @classmethod
    def from_raw(cls, scaler: ScalerParams, raw_values: np.ndarray, observed: np.ndarray):
        observed = np.asarray(observed, dtype=bool)
        scaled = scaler.transform(np.where(observed, raw_values, scaler.mins))
        return cls(observed=observed, values=np.where(observed, scaled, 0.0))

    @property
    def num_missing(self) -> int:
        return int((~self.observed).sum())


def predict_full(model: TpbsModel, x: np.ndarray) -> np.ndarray:
    """Alias of the model forward pass, for interface symmetry."""
    return forward(model, x)


def predict_mean_impute(
    model: TpbsModel, mask: ObservationMask, train_means: np.ndarray
) -> np.ndarray:
    """Evaluate at the point whose missing entries are the (scaled) training
    feature means.

    Raises:
        ValueError: means unavailable (non-finite) at a missing coordinate.
    """
    _check_mask(model, mask)
    train_means = np.asarray(train_means, dtype=float)
    if train_means.shape[0] != model.input_dim:
        raise DimensionError(
            f"train_means has {train_means.shape[0]} entries, expected {model.input_dim}"
        )
    if not np.all(np.isfinite(train_means[~mask.observed])):
        raise ValueError("training means unavailable for some missing coordinate")
    point = np.where(mask.observed, mask.values, train_means)
    return forward(model, point)


def _check_mask(model: TpbsModel, mask: ObservationMask) -> None:
    if mask.observed.shape[0] != model.input_dim:
        raise DimensionError(
            f"mask covers {mask.observed.shape[0]} coordinates, "
            f"model expects {model.input_dim}"
        )


def _factor_values(model: TpbsModel, n: int, x: float) -> np.ndarray:
    space = model.spaces[n]
    first, vals = eval_basis(space, x, 0)
    return model.coeffs[n][:, first : first + space.degree + 1] @ vals


def predict_uniform_marginal(model: TpbsModel, mask: ObservationMask) -> np.ndarray:
    """Integrate every missing factor over [0, 1] (exact basis masses);
    reduces to the plain forward pass when nothing is missing."""
    _check_mask(model, mask)
    prod = np.ones(model.rank)
    for n in range(model.input_dim):
        if mask.observed[n]:
            prod *= _factor_values(model, n, float(mask.values[n]))
        else:
            prod *= model.coeffs[n] @ basis_masses(model.spaces[n])
    return prod @ model.out_vectors


class MarginalPredictor:
    """Precomputed tables for repeated density-weighted marginalization.

    Per dimension: the (R, S) cross inner products <g_{n,r}, p_{n,s}> used
    for missing coordinates.  A single evaluation multiplies per-dimension
    (R, S) matrices elementwise (observed dimensions contribute the outer
    product of factor values and component heights) and contracts with the
    mixture weights and output vectors.
    """

    def __init__(self, model: TpbsModel, density: DensityModel, den_floor: float = 1e-300):
        if density.input_dim != model.input_dim:
            raise DimensionError(
                f"density has {density.input_dim} dimensions, model {model.input_dim}"
            )
        self.model = model
        self.density = density
        self.den_floor = den_floor
        self.cross = []
        for n, space in enumerate(model.spaces):
            masses = bin_mass_table(space, density.bins[n].shape[1])
            basis_inner = density.bins[n] @ masses  # (S, K)
            self.cross.append(model.coeffs[n] @ basis_inner.T)  # (R, S)

    def predict(self, mask: ObservationMask) -> np.ndarray:
        _check_mask(self.model, mask)
        model, density = self.model, self.density
        pair = np.ones((model.rank, density.num_components))
        observed_heights = np.ones(density.num_components)
        for n in range(model.input_dim):
            if mask.observed[n]:
                x = float(mask.values[n])
                heights = density.component_values(n, np.array([x]))[0]
                pair = pair * np.outer(_factor_values(model, n, x), heights)
                observed_heights = observed_heights * heights
            else:
                pair = pair * self.cross[n]
        denominator = float(observed_heights @ density.weights)
        if not denominator > self.den_floor:
            raise ValueError(
                f"marginal density {denominator!r} at the observed coordinates "
                f"is below the floor {self.den_floor!r}"
            )
        numerator = (pair @ density.weights) @ model.out_vectors
        return numerator / denominator


def predict_density_marginal(
    model: TpbsModel,
    density: DensityModel,
    mask: ObservationMask,
    den_floor: float = 1e-300,
) -> np.ndarray:
    """Conditional expectation of the model output given the observed
    coordinates, under the fitted mixture density.

    With a uniform density this equals the uniform marginal exactly; with no
    missing coordinates it equals the forward pass.
    """
    return MarginalPredictor(model, density, den_floor).predict(mask)


def mask_suite(
    features_scaled: np.ndarray, num_missing: int, seed: int = 0
) -> list[ObservationMask]:
    """One mask per sample hiding ``num_missing`` uniformly random coordinates.

    Masks are drawn once and frozen; deterministic under ``seed``.

    Raises:
        ValueError: num_missing >= the number of coordinates.
    """
    features_scaled = np.atleast_2d(np.asarray(features_scaled, dtype=float))
    ndim = features_scaled.shape[1]
    if not 0 <= num_missing < ndim:
        raise ValueError(f"num_missing must be in [0, {ndim}), got {num_missing}")
    rng = np.random.default_rng(seed)
    masks = []
    for row in features_scaled:
        observed = np.ones(ndim, dtype=bool)
        if num_missing:
            observed[rng.choice(ndim, size=num_missing, replace=False)] = False
        masks.append(ObservationMask(observed=observed, values=np.where(observed, row, 0.0)))
    return masks


def write_predictions(path, rows) -> None:
    """Batch-prediction output: one line per (sample, estimator) with columns
    sample id, estimator name, prediction, target, num_missing."""
    with open(path, "w") as handle:
        handle.write("sample\testimator\tprediction\ttarget\tnum_missing\n")
        for sample_id, estimator, prediction, target, num_missing in rows:
            handle.write(
                f"{sample_id}\t{estimator}\t{prediction!r}\t{target!r}\t{num_missing}\n"
            )
