"""Low-rank tensor-product B-spline models with closed-form Dirichlet-energy
regularization and marginalization-based inference from incomplete samples.

Submodules import lazily so the CLI can cap BLAS thread pools before numpy
loads.
"""

__version__ = "0.1.0"

_EXPORTS = {
    # splines
    "SplineSpace": "splines",
    "BandedGram": "splines",
    "build_space": "splines",
    "eval_basis": "splines",
    "gram": "splines",
    "basis_masses": "splines",
    # model
    "TpbsModel": "model",
    "ScalerParams": "model",
    "DimensionError": "model",
    "init_model": "model",
    "forward": "model",
    "forward_batch": "model",
    "factor_norms": "model",
    # serialization
    "save_model": "serialize",
    "load_model": "serialize",
    "save_density": "serialize",
    "load_density": "serialize",
    "ModelFileError": "serialize",
    # energy
    "LdeConfig": "energy",
    "ParamGrad": "energy",
    "EnergyAssembler": "energy",
    "EnergyDecomposition": "energy",
    "DegenerateModelError": "energy",
    "dirichlet_energy": "energy",
    "local_dirichlet_energy": "energy",
    "grad_energy": "energy",
    "de_decomposition": "energy",
    # training
    "TrainConfig": "training",
    "TrainReport": "training",
    "TrainingError": "training",
    "Metrics": "training",
    "train": "training",
    "metrics": "training",
    "objective": "training",
    "grad_objective": "training",
    # density
    "DensityModel": "density",
    "fit_density": "density",
    "density_eval": "density",
    "cross_gram": "density",
    # inference
    "ObservationMask": "inference",
    "MarginalPredictor": "inference",
    "predict_full": "inference",
    "predict_mean_impute": "inference",
    "predict_uniform_marginal": "inference",
    "predict_density_marginal": "inference",
    "mask_suite": "inference",
    # data
    "RawTable": "data",
    "Dataset": "data",
    "Manifest": "data",
    "load_csv": "data",
    "split": "data",
    "fit_scaler": "data",
    "apply_scaler": "data",
    "load_manifest": "data",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        import importlib

        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return __all__ + ["__version__"]
