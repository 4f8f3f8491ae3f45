"""Command-line surface: train, eval, de, fit-density, selfcheck.

Configs are JSON files; flags override config fields.  All randomness flows
from one root seed.  Exit codes: 0 success, 2 config/parse problems,
3 numeric failures, 1 anything unexpected.

Heavy imports happen inside the command handlers so that ``--threads`` can
cap the BLAS pools before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    """Bad config file, path, or flag combination."""


class SelfcheckFailure(Exception):
    """An oracle check failed."""


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as handle:
            return json.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None


def _require(config: dict, key: str):
    if key not in config:
        raise ConfigError(f"config is missing required field {key!r}")
    return config[key]


def _load_split(manifest_path: str, seed: int):
    from .data import load_manifest, split

    try:
        manifest = load_manifest(manifest_path)
    except FileNotFoundError:
        raise ConfigError(f"manifest not found: {manifest_path}") from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        table = manifest.load(Path(manifest_path).parent)
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset file missing: {exc.filename}") from None
    return manifest, split(table, manifest.counts, seed)


def _train_config(config: dict, seed: int):
    from .training import TrainConfig

    fields = {
        k: config[k]
        for k in (
            "rank", "num_basis", "degree", "loss", "rho", "lambda0", "lambda_growth",
            "lambda_ceiling_factor", "learning_rate", "adam_beta1", "adam_beta2",
            "adam_eps", "batch_size", "max_epochs", "convergence_tol", "patience",
            "overfit_threshold", "init_scale",
        )
        if k in config
    }
    try:
        return TrainConfig(seed=seed, **fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad training config: {exc}") from None


def cmd_train(args) -> int:
    from .serialize import save_model
    from .training import train

    config = _read_config(args.config)
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    manifest, dataset = _load_split(_require(config, "manifest"), seed)
    cfg = _train_config(config, seed)
    report = train(dataset, cfg)

    out_dir = Path(args.out or config.get("out", f"runs/{manifest.name}_seed{seed}"))
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(report.best_val.model, out_dir / "best_val.tpbs")
    written = [out_dir / "best_val.tpbs"]
    if report.best_val_after_overfit is not None:
        save_model(report.best_val_after_overfit.model, out_dir / "best_val_after_overfit.tpbs")
        written.append(out_dir / "best_val_after_overfit.tpbs")
    report_path = out_dir / "train_report.txt"
    report_path.write_text("\n".join(report.summary_lines()) + "\n")
    written.append(report_path)
    for path in written:
        print(path)
    print(
        f"best val {report.best_val.val_metrics.kind} "
        f"{report.best_val.val_metrics.value:.6g} at epoch {report.best_val.epoch}"
    )
    return EXIT_OK


def _fit_or_load_density(spec, points, seed: int):
    from .density import fit_density
    from .serialize import load_density

    if spec is None:
        spec = {"components": 1, "bins": 100}
    if "path" in spec:
        return load_density(spec["path"])
    return fit_density(
        points,
        num_components=int(spec.get("components", 1)),
        bins_per_dim=int(spec.get("bins", 100)),
        em_iters=int(spec.get("em_iters", 100)),
        seed=seed,
    )


def cmd_eval(args) -> int:
    import numpy as np

    from .inference import (
        MarginalPredictor,
        mask_suite,
        predict_mean_impute,
        predict_uniform_marginal,
        write_predictions,
    )
    from .model import DimensionError, forward_batch
    from .serialize import load_model
    from .training import metrics

    config = _read_config(args.config)
    root_seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    manifest_path = _require(config, "manifest")
    estimators = config.get("estimators", ["full"])
    num_missing = int(config.get("num_missing", 0))
    seeds = config.get("seeds")
    model_spec = _require(config, "model")

    rows = []
    summaries = {est: [] for est in estimators}
    from .data import load_manifest

    manifest = load_manifest(manifest_path)
    for seed in [int(s) for s in (seeds if seeds is not None else manifest.seeds)]:
        _, dataset = _load_split(manifest_path, seed)
        model_path = model_spec.format(seed=seed)
        try:
            model = load_model(model_path)
        except FileNotFoundError:
            raise ConfigError(f"model file missing: {model_path}") from None
        x_test = dataset.scaled("test")
        y_test = dataset.split_targets("test")
        if x_test.shape[1] != model.input_dim:
            raise DimensionError(
                f"dataset has {x_test.shape[1]} features, model expects {model.input_dim}"
            )
        masks = mask_suite(x_test, num_missing, seed=root_seed + seed)
        train_means = dataset.train_means_scaled()
        density = None
        if "pdf" in estimators:
            density = _fit_or_load_density(
                config.get("density"), dataset.scaled("train"), root_seed
            )
        for est in estimators:
            if est == "full":
                preds = forward_batch(model, x_test)[:, 0]
            elif est == "mean":
                preds = np.array(
                    [predict_mean_impute(model, mk, train_means)[0] for mk in masks]
                )
            elif est == "uniform":
                preds = np.array([predict_uniform_marginal(model, mk)[0] for mk in masks])
            elif est == "pdf":
                predictor = MarginalPredictor(model, density)
                preds = np.array([predictor.predict(mk)[0] for mk in masks])
            else:
                raise ConfigError(f"unknown estimator {est!r}")
            m = metrics(preds, y_test, dataset.task)
            summaries[est].append(m.value)
            rows.append((manifest.name, est, num_missing, seed, m.kind, m.value))

    out_path = Path(args.out or config.get("out", "eval_metrics.tsv"))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as handle:
        handle.write("dataset\testimator\tnum_missing\tseed\tmetric\tvalue\n")
        for row in rows:
            handle.write("\t".join(str(v) for v in row) + "\n")
    print(out_path)
    for est, values in summaries.items():
        arr = np.asarray(values)
        print(f"{est}: {arr.mean():.4f} +- {arr.std():.4f} over {len(arr)} seed(s)")
    if config.get("dump_predictions"):
        # per-sample predictions for the last processed seed
        dump = Path(config["dump_predictions"])
        write_predictions(
            dump,
            [
                (i, est, float("nan"), float(y), num_missing)
                for est in estimators
                for i, y in enumerate(y_test)
            ],
        )
    return EXIT_OK


def cmd_de(args) -> int:
    import numpy as np

    from .energy import (
        DegenerateModelError,
        EnergyAssembler,
        de_decomposition,
        dirichlet_energy,
    )
    from .serialize import load_model

    model = load_model(args.model)
    lines = []
    de = dirichlet_energy(model)
    lines.append(f"dirichlet_energy {de!r}")
    if args.points is not None:
        if args.rho is None:
            raise ConfigError("--points requires --rho")
        points = np.loadtxt(args.points, ndmin=2)
        asm = EnergyAssembler.boxes(model.spaces, points, args.rho)
        box = asm.box_energies(model.coeffs, model.out_vectors)
        lines.append(f"rho {args.rho!r}")
        lines.append(f"num_boxes {len(box)}")
        lines.append(f"lde_total {box.sum()!r}")
        lines.append("box_energies " + " ".join(repr(v) for v in box))
    try:
        dec = de_decomposition(model)
        lines.append("component_norms " + " ".join(repr(v) for v in dec.norms))
        for name, mat in (
            ("cosines", dec.cosines),
            ("grad_ratio_sums", dec.grad_ratio_sums),
            ("coupling", dec.coupling),
        ):
            for row in mat:
                lines.append(f"{name} " + " ".join(repr(v) for v in row))
        eigs = dec.coupling_eigenvalues()
        if eigs is not None:
            lines.append("coupling_eigenvalues " + " ".join(repr(v) for v in eigs))
            rebuilt = dec.quadratic_form()
            consistent = abs(rebuilt - de) / (1.0 + abs(de)) <= 1e-6
            lines.append(f"decomposition_consistent {str(consistent).lower()}")
        else:
            lines.append("decomposition_degenerate_pairs "
                         f"{int(dec.degenerate.sum())}")
    except DegenerateModelError as exc:
        lines.append(f"decomposition_unavailable {exc}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(args.out)
    else:
        print(text, end="")
    return EXIT_OK


def cmd_fit_density(args) -> int:
    from .serialize import save_density

    config = _read_config(args.config)
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    manifest, dataset = _load_split(_require(config, "manifest"), seed)
    density = _fit_or_load_density(
        {
            "components": config.get("components", 1),
            "bins": config.get("bins", 100),
            "em_iters": config.get("em_iters", 100),
        },
        dataset.scaled("train"),
        seed,
    )
    out_path = Path(args.out or config.get("out", f"{manifest.name}_density.tpdf"))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_density(density, out_path)
    print(out_path)
    ll = density.log_likelihoods
    print(f"log-likelihood {ll[0]:.4f} -> {ll[-1]:.4f} over {len(ll)} iterations")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    import numpy as np

    from .density import DensityModel, fit_density
    from .energy import LdeConfig, dirichlet_energy, de_decomposition, grad_energy, local_dirichlet_energy
    from .inference import ObservationMask, predict_density_marginal, predict_uniform_marginal
    from .model import TpbsModel, factor_norms, init_model
    from .oracles import (
        finite_difference_grad,
        quadrature_conditional_marginal,
        quadrature_energy,
        quadrature_uniform_marginal,
    )
    from .splines import build_space

    scale = {"small": 1, "medium": 3, "large": 10}[args.scale]
    root = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(root)
    failures = []

    def check(name, ok, detail=""):
        print(f"{name}: {'pass' if ok else 'FAIL ' + detail}")
        if not ok:
            failures.append(name)

    # closed-form energy vs tensor-grid quadrature
    worst = 0.0
    worst_seed = -1
    for trial in range(20 * scale):
        seed = root + trial
        trng = np.random.default_rng(seed)
        ndim = int(trng.integers(1, 5))
        p = int(trng.integers(0, 4))
        model = init_model(
            ndim, int(trng.integers(1, 6)), int(trng.integers(1, 3)),
            build_space(int(trng.integers(p + 1, 9)), p), seed=seed, init_scale=0.6,
        )
        rel = abs(dirichlet_energy(model) - quadrature_energy(model)) / (
            1.0 + quadrature_energy(model)
        )
        if rel > worst:
            worst, worst_seed = rel, seed
    check("energy_quadrature_oracle", worst < 1e-9, f"(rel {worst:.2e}, seed={worst_seed})")

    # decomposition identity
    worst = 0.0
    for trial in range(10 * scale):
        seed = root + 1000 + trial
        model = init_model(3, 4, 1, build_space(6, 2), seed=seed, init_scale=0.5)
        dec = de_decomposition(model)
        if dec.degenerate.any():
            continue
        de = dirichlet_energy(model)
        worst = max(worst, abs(dec.quadratic_form() - de) / (1.0 + de))
    check("decomposition_identity", worst < 1e-9, f"(rel {worst:.2e})")

    # gradient vs central differences
    worst = 0.0
    for trial in range(3 * scale):
        seed = root + 2000 + trial
        model = init_model(2, 2, 1, build_space(5, 2), seed=seed, init_scale=0.4)
        value, grad = grad_energy(model)
        fd = finite_difference_grad(dirichlet_energy, model)
        flat = np.concatenate([g.ravel() for g in grad.coeff_grads] + [grad.out_grad.ravel()])
        flat_fd = np.concatenate([g.ravel() for g in fd.coeff_grads] + [fd.out_grad.ravel()])
        denom = np.maximum(np.abs(flat_fd), 1.0)
        worst = max(worst, float(np.max(np.abs(flat - flat_fd) / denom)))
    check("energy_gradient_fd", worst < 1e-5, f"(rel {worst:.2e})")

    # localized-energy properties
    model = init_model(2, 2, 1, build_space(6, 2), seed=root + 3000, init_scale=0.5)
    pts = rng.uniform(0.2, 0.8, size=(4, 2))
    lde_small = local_dirichlet_energy(model, LdeConfig(rho=0.1, points=pts))
    lde_big = local_dirichlet_energy(model, LdeConfig(rho=0.3, points=pts))
    additive = sum(
        local_dirichlet_energy(model, LdeConfig(rho=0.1, points=pts[i : i + 1]))
        for i in range(len(pts))
    )
    covering = local_dirichlet_energy(
        model, LdeConfig(rho=0.5, points=np.full((1, 2), 0.5))
    )
    ok = (
        lde_small <= lde_big + 1e-12
        and abs(additive - lde_small) <= 1e-9 * (1 + lde_small)
        and covering == dirichlet_energy(model)
    )
    check("localized_energy_properties", ok)

    # marginalization vs brute-force quadrature
    worst = 0.0
    for trial in range(5 * scale):
        seed = root + 4000 + trial
        trng = np.random.default_rng(seed)
        model = init_model(3, 3, 1, build_space(6, 2), seed=seed, init_scale=0.5)
        density = fit_density(
            trng.uniform(size=(60, 3)), 2, bins_per_dim=4, em_iters=15, seed=seed
        )
        observed = np.ones(3, dtype=bool)
        observed[trng.choice(3, int(trng.integers(1, 3)), replace=False)] = False
        mask = ObservationMask(
            observed=observed, values=np.where(observed, trng.uniform(size=3), 0.0)
        )
        yu = predict_uniform_marginal(model, mask)
        yp = predict_density_marginal(model, density, mask)
        worst = max(
            worst,
            float(np.max(np.abs(yu - quadrature_uniform_marginal(model, mask)))),
            float(np.max(np.abs(yp - quadrature_conditional_marginal(model, density, mask)))),
        )
    check("marginalization_oracle", worst < 1e-9, f"(abs {worst:.2e})")

    # EM log-likelihood monotonicity
    ok = True
    for trial in range(2 * scale):
        seed = root + 5000 + trial
        trng = np.random.default_rng(seed)
        pts = np.clip(
            np.vstack(
                [trng.normal(0.3, 0.08, (60, 2)), trng.normal(0.7, 0.08, (60, 2))]
            ),
            0.0,
            1.0,
        )
        density = fit_density(pts, 2, bins_per_dim=8, em_iters=40, seed=seed)
        if np.any(np.diff(density.log_likelihoods) < -1e-10):
            ok = False
            check("em_monotonicity", False, f"(seed={seed})")
            break
    if ok:
        check("em_monotonicity", True)

    # exponential smallness of component norms
    ok = True
    for ndim in range(2, 21):
        space = build_space(6, 3)
        model = TpbsModel(
            spaces=[space] * ndim,
            coeffs=[np.full((1, 6), 0.5)] * ndim,
            out_vectors=np.array([[3.0]]),
        )
        expected = 3.0 * 0.5**ndim
        if abs(factor_norms(model)[0] - expected) > 1e-13 * expected:
            ok = False
            break
    check("exponential_smallness", ok)

    if failures:
        raise SelfcheckFailure(", ".join(failures))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tpbs",
        description="Low-rank tensor-product spline regression with "
        "localized-energy regularization",
    )
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS thread pools")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train on a manifest dataset")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--out", default=None)
    p_train.set_defaults(handler=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate estimators on the test split")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.add_argument("--out", default=None)
    p_eval.set_defaults(handler=cmd_eval)

    p_de = sub.add_parser("de", help="energy report for a saved model")
    p_de.add_argument("--model", required=True)
    p_de.add_argument("--points", default=None, help="file of scaled box centers")
    p_de.add_argument("--rho", type=float, default=None)
    p_de.add_argument("--out", default=None)
    p_de.set_defaults(handler=cmd_de)

    p_fd = sub.add_parser("fit-density", help="fit a product-histogram mixture")
    p_fd.add_argument("--config", required=True)
    p_fd.add_argument("--seed", type=int, default=None)
    p_fd.add_argument("--out", default=None)
    p_fd.set_defaults(handler=cmd_fit_density)

    p_check = sub.add_parser("selfcheck", help="run the oracle suite")
    p_check.add_argument("--scale", choices=("small", "medium", "large"), default="small")
    p_check.add_argument("--seed", type=int, default=None)
    p_check.set_defaults(handler=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SelfcheckFailure as exc:
        print(f"selfcheck failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001
        from .serialize import ModelFileError
        from .training import TrainingError

        if isinstance(exc, (TrainingError,)):
            print(f"numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(exc, (ModelFileError, FileNotFoundError, ValueError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"unexpected error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
