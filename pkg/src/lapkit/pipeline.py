"""Batch experiment harness: MAP training, Laplace fitting, sweeps, FSP runs.

Every operation is a pure function of (config, seed) writing its artifacts
under an output directory, so identical configs reproduce byte-identical
files. Configs are plain dicts (from TOML or JSON) deep-merged over the
defaults below.
"""

from __future__ import annotations

import copy
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from . import datasets, evidence, metrics
from .calibrate import CalibResult, GridSpec, gradient_calibrate, grid_search
from .curvature import (
    CurvEstimate,
    estimate_diagonal,
    estimate_full,
    estimate_lanczos,
    estimate_lobpcg,
    ggn_vp,
    hessian_vp,
    restrict_operator,
)
from .errors import ConfigError, DomainError
from .fsp import TRAIN_GRAM_NUGGET, ContextSet, fsp_posterior, fsp_predict, fsp_train, sample_context
from .gp import GPPrior, KernelSpec
from .nets import (
    Batch,
    ModelSpec,
    dense_layer_names,
    forward,
    grad,
    init_params,
    jacobian,
    loss_value,
    mlp,
)
from .optim import AdamConfig, run_adam
from .posterior import Hyperparams, cov_block, posterior_fn
from .predictive import predictive_by_name
from .pushforward import ensemble_predict, linear_pushforward
from .serialize import load_checkpoint, read_json, save_checkpoint, write_csv, write_json
from .trees import ParamTree, flatten, subtree_indices, tree_map, unflatten

CURV_KINDS = ("full", "diagonal", "lanczos", "lobpcg")

DEFAULTS: dict = {
    "task": "sine_regression",
    "seed": 0,
    "data": {
        "n": 128,
        "noise": 0.1,
        "clusters": [[-1.0, -0.25], [0.25, 1.0]],
        "n_test": 256,
        "val_fraction": 0.2,
    },
    "model": {"hidden": [50], "activation": "tanh"},
    "train": {"steps": 2500, "lr": 0.01, "prior_prec": 1e-4},
    "laplace": {
        "operator": "ggn",
        "curv": "full",
        "rank": 80,
        "block_size": None,
        "tol": 1e-8,
        "subnetwork": "all",
        "pushforward": "linear",
        "samples": 256,
        "predictive": "mean_field_0",
        "calibration": {
            "objective": "lml",
            "method": "gs",
            "grid": {"lo": -5.0, "hi": 5.0, "n": 41},
            "gd": {"steps": 60, "lr": 0.15},
            "init": {"prior_prec": 1.0, "obs_noise": 1.0},
        },
    },
    "sweep": {
        "curvs": list(CURV_KINDS),
        "objectives": None,  # default per task: sine -> [lml, nll], moons -> [lml, ece]
        "methods": ["gs", "gd"],
        "pushforwards": ["linear", "nonlinear"],
    },
    "fsp": {
        "prior": {"kind": "periodic", "variance": 1.0, "lengthscale": 1.0, "period": 1.0},
        "context": {
            "sampler": "uniform_box",
            "n_train": 32,
            "n_posterior": 512,
            "posterior_sampler": "halton",
            "domain": [[-2.0, 2.0]],
        },
        "train": {"steps": 4000, "lr": 0.01, "batch_size": 32},
        "obs_noise": 0.01,
        "lanczos_rank": 500,
        "grid": {"lo": -3.0, "hi": 3.0, "n": 601},
    },
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    if path.endswith(".toml"):
        import tomli

        with open(path, "rb") as fh:
            return tomli.load(fh)
    if path.endswith(".json"):
        try:
            return read_json(path)
        except json.JSONDecodeError as err:
            raise ConfigError(f"invalid JSON config {path}: {err}") from err
    raise ConfigError(f"config must be .toml or .json, got {path}")


def resolve_config(raw: dict, seed: Optional[int] = None) -> dict:
    cfg = deep_merge(DEFAULTS, raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    task = cfg["task"]
    if task not in datasets.TASKS:
        raise ConfigError(f"unknown task {task!r}, expected one of {datasets.TASKS}")
    cfg["loss"] = cfg.get("loss") or ("mse" if task == "sine_regression" else "cross_entropy")
    if cfg["sweep"].get("objectives") is None:
        cfg["sweep"]["objectives"] = ["lml", "nll"] if task == "sine_regression" else ["lml", "ece"]
    return cfg


def build_model(cfg: dict) -> ModelSpec:
    task = cfg["task"]
    in_dim, out_dim = (1, 1) if task == "sine_regression" else (2, 2)
    model_cfg = cfg["model"]
    if "layers" in model_cfg:
        return ModelSpec.from_dict(model_cfg)
    return mlp(in_dim, list(model_cfg["hidden"]), out_dim, model_cfg.get("activation", "tanh"))


def prepare_data(cfg: dict) -> dict:
    """Deterministic train/val/test draw: fit and val are a seeded 80/20 split.

    Toy configs may pin the dataset exactly via data.points / data.targets;
    with val_fraction 0 the full set serves as both fit and val.
    """
    seed = int(cfg["seed"])
    dcfg = cfg["data"]
    task = cfg["task"]
    if "points" in dcfg:
        train = Batch(np.asarray(dcfg["points"], dtype=np.float64),
                      np.asarray(dcfg["targets"], dtype=np.float64))
        test = train
    else:
        clusters = tuple(tuple(c) for c in dcfg["clusters"])
        kwargs = {"clusters": clusters} if task == "sine_regression" else {}
        train = datasets.gen_data(task, int(dcfg["n"]), float(dcfg["noise"]), seed, **kwargs)
        test = datasets.gen_data(task, int(dcfg["n_test"]), float(dcfg["noise"]), seed + 1, **kwargs)
    n_val = int(round(train.n * float(dcfg["val_fraction"])))
    if n_val == 0:
        return {"train": train, "fit": train, "val": train, "test": test}
    rng = np.random.default_rng(seed + 2)
    order = rng.permutation(train.n)
    val_idx, fit_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    fit = Batch(train.inputs[fit_idx], train.targets[fit_idx])
    val = Batch(train.inputs[val_idx], train.targets[val_idx])
    return {"train": train, "fit": fit, "val": val, "test": test}


def train_map(cfg: dict, out_dir: str) -> dict:
    """MAP training (Adam on loss + tau/2 ||theta||^2); writes checkpoint.json."""
    model = build_model(cfg)
    loss = cfg["loss"]
    tcfg = cfg["train"]
    seed = int(cfg["seed"])
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "checkpoint.json")

    if "params" in tcfg:  # fixed weights supplied directly (toy configs)
        params = tree_map(lambda leaf: np.asarray(leaf, dtype=np.float64), tcfg["params"])
        save_checkpoint(path, model, params, {"seed": seed, "loss": loss, "trained": False})
        return {"checkpoint": path, "final_loss": None, "loss_trace": []}

    data = prepare_data(cfg)
    fit = data["fit"]
    tau_train = float(tcfg["prior_prec"])
    params0 = init_params(model, seed=seed + 3)
    template = params0

    def value_and_grad(x, step):
        params = unflatten(x, template)
        value = loss_value(loss, forward(model, params, fit.inputs), fit.targets)
        g = grad(model, params, fit, loss)
        return value + 0.5 * tau_train * float(x @ x), g + tau_train * x

    final, trace = run_adam(value_and_grad, flatten(params0), AdamConfig.from_dict(tcfg))
    params = unflatten(final, template)
    save_checkpoint(path, model, params, {"seed": seed, "loss": loss, "trained": True})
    result = {"checkpoint": path, "final_loss": trace[-1], "loss_trace": trace}
    if cfg["task"] == "sine_regression":
        resid = forward(model, params, fit.inputs) - fit.targets
        result["train_rmse"] = float(np.sqrt(np.mean(resid**2)))
    return result


def _active_indices(cfg: dict, model: ModelSpec, params: ParamTree) -> Optional[np.ndarray]:
    subnet = cfg["laplace"].get("subnetwork", "all")
    if subnet == "all":
        return None
    if subnet == "last_layer":
        return subtree_indices(params, (dense_layer_names(model)[-1],))
    raise ConfigError(f"unknown subnetwork {subnet!r}, expected 'all' or 'last_layer'")


def _chunk_batches(batch: Batch, size: int = 32) -> list[Batch]:
    out = []
    for start in range(0, batch.n, size):
        out.append(Batch(batch.inputs[start : start + size], batch.targets[start : start + size]))
    return out


def make_estimate(cfg: dict, model: ModelSpec, params: ParamTree, fit: Batch, curv: str):
    """Curvature operator (masked if configured) compressed per ``curv``."""
    lcfg = cfg["laplace"]
    loss = cfg["loss"]
    data = _chunk_batches(fit)
    if lcfg.get("operator", "ggn") == "hessian":
        op = hessian_vp(model, loss, data, params)
    else:
        op = ggn_vp(model, loss, data, params)
    active = _active_indices(cfg, model, params)
    if active is not None:
        op = restrict_operator(op, active)
    seed = int(cfg["seed"]) + 5
    rank = min(int(lcfg["rank"]), op.dim)
    tol = float(lcfg["tol"])
    if curv == "full":
        est = estimate_full(op)
    elif curv == "diagonal":
        est = estimate_diagonal(op)
    elif curv == "lanczos":
        est = estimate_lanczos(op, rank, seed=seed, tol=tol)
    elif curv == "lobpcg":
        est = estimate_lobpcg(op, rank, block_size=lcfg.get("block_size"), seed=seed, tol=tol)
    else:
        raise ConfigError(f"unknown curv {curv!r}, expected one of {CURV_KINDS}")
    return est, active


def _regression_point_nll(mean, var_f, sigma2, y):
    return metrics.gaussian_nll(mean, var_f + sigma2, y)


def _classification_probs_linear(cfg, model, params, state, x, active):
    out = linear_pushforward(model, params, state, x, active=active)
    name = cfg["laplace"].get("predictive", "mean_field_0")
    fn = predictive_by_name(name)
    if name == "mc_bridge":
        return fn(out.mean, out.cov, int(cfg["laplace"].get("samples", 256)), seed=int(cfg["seed"]) + 7)
    return fn(out.mean, out.cov)


def make_objective(cfg: dict, model, params, estimate, active, fit: Batch, val: Batch, objective: str):
    """(objective fn over log-hyperparams, direction). LML never touches covariances."""
    loss = cfg["loss"]
    if objective == "lml":
        fn = evidence.lml_objective(estimate, model, params, fit, loss, active=active)
        return fn, "max"

    # Downstream metrics: linear pushforward on the held-out validation split.
    if loss == "mse":
        jac = jacobian(model, params, val.inputs)[:, 0, :]  # (n_val, P)
        if active is not None:
            jac = jac[:, active]
        mean = forward(model, params, val.inputs)[:, 0]
        target = val.targets[:, 0]
        # One-time spectral form of the estimate makes each evaluation of
        # diag(J H^-1 J^T) O(n_val * P); identical to the per-structure
        # covariance solves to roundoff.
        vals, vecs = estimate.spectrum()
        if estimate.kind == "low_rank":
            proj_sq = (jac @ vecs) ** 2 if vals.size else np.zeros((jac.shape[0], 0))
            row_sq = np.sum(jac * jac, axis=1)
        elif estimate.kind == "diagonal":
            proj_sq, row_sq = jac * jac, None
        else:
            proj_sq, row_sq = (jac @ vecs) ** 2, None

        def var_f(tau: float, sigma2: float) -> np.ndarray:
            if estimate.kind == "low_rank":
                s = vals / sigma2
                core = 1.0 / (1.0 / s + 1.0 / tau) if s.size else np.zeros(0)
                return row_sq / tau - proj_sq @ core / tau**2
            return proj_sq @ (1.0 / (vals / sigma2 + tau))

        def regression_nll(log_tau: float, log_sigma2: float = 0.0) -> float:
            tau, sigma2 = math.exp(log_tau), math.exp(log_sigma2)
            if tau <= 0.0 or sigma2 <= 0.0:  # exp underflow during calibration
                return float("nan")
            variance = var_f(tau, sigma2) + sigma2
            if np.any(variance <= 0.0) or not np.all(np.isfinite(variance)):
                return float("nan")
            return metrics.gaussian_nll(mean, variance, target)

        if objective == "nll":
            return regression_nll, "min"
        raise ConfigError(f"objective {objective!r} unsupported for regression")

    labels = val.targets.astype(np.intp)

    def class_probs(log_tau: float) -> Optional[np.ndarray]:
        tau = math.exp(log_tau)
        if tau <= 0.0:
            return None
        hp = Hyperparams(tau, 1.0)
        state = posterior_fn(estimate, hp)
        return np.stack(
            [
                _classification_probs_linear(cfg, model, params, state, val.inputs[i], active)
                for i in range(val.n)
            ]
        )

    if objective == "nll":

        def class_nll(log_tau: float, log_sigma2: float = 0.0) -> float:
            probs = class_probs(log_tau)
            if probs is None:
                return float("nan")
            picked = probs[np.arange(val.n), labels]
            return float(-np.mean(np.log(np.maximum(picked, 1e-300))))

        return class_nll, "min"
    if objective == "ece":

        def class_ece(log_tau: float, log_sigma2: float = 0.0) -> float:
            probs = class_probs(log_tau)
            if probs is None:
                return float("nan")
            return metrics.ece(probs, labels)

        return class_ece, "min"
    raise ConfigError(f"unknown calibration objective {objective!r}")


def calibrate(cfg: dict, model, params, estimate, active, fit: Batch, val: Batch,
              objective: str, method: str) -> CalibResult:
    ccfg = cfg["laplace"]["calibration"]
    fn, direction = make_objective(cfg, model, params, estimate, active, fit, val, objective)
    init = dict(ccfg["init"])
    if method == "fixed":  # pin hyperparameters, no search (toy configs)
        tau = float(init["prior_prec"])
        sigma2 = float(init.get("obs_noise", 1.0))
        value = fn(math.log(tau), math.log(sigma2))
        return CalibResult(
            best={"prior_prec": tau, "obs_noise": sigma2},
            best_objective=value,
            objective_name=objective,
            method="fixed",
            direction=direction,
            trace=[(0, tau, sigma2, value)],
        )
    if method == "gs":
        gcfg = ccfg["grid"]
        grid = GridSpec(float(gcfg["lo"]), float(gcfg["hi"]), int(gcfg["n"]))
        sigma2 = float(init.get("obs_noise", 1.0))
        log_s2 = math.log(sigma2)
        return grid_search(
            lambda tau: fn(math.log(tau), log_s2),
            grid,
            direction=direction,
            objective_name=objective,
            obs_noise=sigma2,
        )
    if method == "gd":
        gd = ccfg["gd"]
        if cfg["loss"] != "mse":
            init.pop("obs_noise", None)  # classification: tau only
        return gradient_calibrate(
            fn,
            init,
            steps=int(gd["steps"]),
            lr=float(gd["lr"]),
            direction=direction,
            objective_name=objective,
        )
    raise ConfigError(f"unknown calibration method {method!r}, expected 'gs' or 'gd'")


def _objective_at_tau1(calib: CalibResult) -> float:
    for _, tau, _, value in calib.trace:
        if tau == 1.0:
            return value
    return float("nan")


def evaluate(cfg: dict, model, params, estimate, active, calib: CalibResult,
             test: Batch, pushforward: str, cell_seed: int) -> dict:
    """Test metrics for one calibrated posterior and pushforward choice."""
    hp = Hyperparams(calib.best["prior_prec"], calib.best.get("obs_noise", 1.0))
    state = posterior_fn(estimate, hp)
    loss = cfg["loss"]
    n_samples = int(cfg["laplace"].get("samples", 256))
    out = {"tau": hp.prior_prec, "sigma2": hp.obs_noise,
           "nll": float("nan"), "crps": float("nan"), "ece": float("nan")}

    if pushforward == "linear":
        means = np.empty((test.n, model.output_dim))
        covs = np.empty((test.n, model.output_dim, model.output_dim))
        for i in range(test.n):
            g = linear_pushforward(model, params, state, test.inputs[i], active=active)
            means[i], covs[i] = g.mean, g.cov
    elif pushforward == "nonlinear":
        draws = ensemble_predict(model, params, state, test.inputs, n_samples, cell_seed, active=active)
        means = draws.mean(axis=0)
        centered = draws - means
        covs = np.einsum("snc,snd->ncd", centered, centered) / (n_samples - 1)
    else:
        raise ConfigError(f"unknown pushforward {pushforward!r}")

    if loss == "mse":
        var_f = covs[:, 0, 0]
        y = test.targets[:, 0]
        out["nll"] = metrics.gaussian_nll(means[:, 0], var_f + hp.obs_noise, y)
        out["crps"] = metrics.crps_gaussian(means[:, 0], np.sqrt(var_f + hp.obs_noise), y)
    else:
        labels = test.targets.astype(np.intp)
        if pushforward == "nonlinear":
            shifted = draws - draws.max(axis=2, keepdims=True)
            probs = np.exp(shifted)
            probs /= probs.sum(axis=2, keepdims=True)
            probs = probs.mean(axis=0)
        else:
            name = cfg["laplace"].get("predictive", "mean_field_0")
            fn = predictive_by_name(name)
            rows = []
            for i in range(test.n):
                if name == "mc_bridge":
                    rows.append(fn(means[i], covs[i], n_samples, seed=cell_seed + i))
                else:
                    rows.append(fn(means[i], covs[i]))
            probs = np.stack(rows)
        picked = probs[np.arange(test.n), labels]
        out["nll"] = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
        out["ece"] = metrics.ece(probs, labels)
    return out


def _prediction_grid(cfg: dict) -> np.ndarray:
    gcfg = cfg["fsp"]["grid"]
    return np.linspace(float(gcfg["lo"]), float(gcfg["hi"]), int(gcfg["n"]))


def run_laplace(cfg: dict, checkpoint: str, out_dir: str) -> dict:
    """Curvature -> estimate -> calibration -> posterior artifacts."""
    model, params, _meta = load_checkpoint(checkpoint)
    data = prepare_data(cfg)
    lcfg = cfg["laplace"]
    os.makedirs(out_dir, exist_ok=True)

    est, active = make_estimate(cfg, model, params, data["fit"], lcfg["curv"])
    calib = calibrate(
        cfg, model, params, est, active, data["fit"], data["val"],
        lcfg["calibration"]["objective"], lcfg["calibration"]["method"],
    )
    cell_seed = int(cfg["seed"]) + 6
    metrics_out = evaluate(cfg, model, params, est, active, calib, data["test"], lcfg["pushforward"], cell_seed)

    estimate_path = write_json(os.path.join(out_dir, "estimate.json"), est.to_dict())
    calib_path = write_csv(
        os.path.join(out_dir, "calibration.csv"),
        ["step_or_gridpoint", "tau", "sigma2", "objective"],
        calib.trace,
    )
    artifacts = {"estimate": estimate_path, "calibration": calib_path}

    hp = Hyperparams(calib.best["prior_prec"], calib.best.get("obs_noise", 1.0))
    if cfg["task"] == "sine_regression":
        state = posterior_fn(est, hp)
        grid = np.linspace(-2.0, 2.0, 201)
        mean = np.empty(201)
        std = np.empty(201)
        for i, x in enumerate(grid):
            g = linear_pushforward(model, params, state, np.array([x]), active=active)
            mean[i], std[i] = g.mean[0], math.sqrt(max(g.cov[0, 0], 0.0))
        pred = {
            "type": "grid_prediction",
            "x": grid.tolist(),
            "mean": mean.tolist(),
            "std": std.tolist(),
        }
        artifacts["predictions"] = write_json(os.path.join(out_dir, "predictions.json"), pred)

    dim = est.dim
    if dim == 2:
        state = posterior_fn(est, hp)
        cov = np.column_stack([state.cov_vp(e) for e in np.eye(2)])
        vals, vecs = np.linalg.eigh(cov)  # ascending
        center = flatten(params) if active is None else flatten(params)[active]
        ellipse = {
            "type": "ellipse",
            "center": center.tolist(),
            "axes": [math.sqrt(vals[1]), math.sqrt(vals[0])],  # major, minor (1 sigma)
            "angle_rad": math.atan2(vecs[1, 1], vecs[0, 1]),
        }
        artifacts["ellipse"] = write_json(os.path.join(out_dir, "ellipse.json"), ellipse)

    summary = {
        "tau": hp.prior_prec,
        "sigma2": hp.obs_noise,
        "objective": calib.objective_name,
        "method": calib.method,
        "best_objective": calib.best_objective,
        "metrics": metrics_out,
        "posterior_dim": dim,
        "artifacts": artifacts,
    }
    write_json(os.path.join(out_dir, "posterior.json"), summary)
    return summary


def run_sweep(cfg: dict, out_dir: str, threads: int = 4) -> dict:
    """Cartesian (curv x calibration x pushforward) sweep; one CSV row per cell."""
    os.makedirs(out_dir, exist_ok=True)
    trained = train_map(cfg, out_dir)
    model, params, _ = load_checkpoint(trained["checkpoint"])
    data = prepare_data(cfg)
    scfg = cfg["sweep"]
    curvs = list(scfg["curvs"])
    objectives = list(scfg["objectives"])
    methods = list(scfg["methods"])
    pushforwards = list(scfg["pushforwards"])

    pool = ThreadPoolExecutor(max_workers=max(1, int(threads)))
    try:
        est_futures = {
            curv: pool.submit(make_estimate, cfg, model, params, data["fit"], curv)
            for curv in curvs
        }
        estimates: dict = {}
        est_errors: dict = {}
        for curv, fut in est_futures.items():
            try:
                estimates[curv] = fut.result()
            except Exception as err:  # noqa: BLE001 -- cell isolation by design
                est_errors[curv] = f"{type(err).__name__}: {err}"

        calib_futures = {}
        for curv in curvs:
            if curv not in estimates:
                continue
            est, active = estimates[curv]
            for objective in objectives:
                for method in methods:
                    calib_futures[(curv, objective, method)] = pool.submit(
                        calibrate, cfg, model, params, est, active,
                        data["fit"], data["val"], objective, method,
                    )
        calibs: dict = {}
        calib_errors: dict = {}
        for key, fut in calib_futures.items():
            try:
                calibs[key] = fut.result()
            except Exception as err:  # noqa: BLE001
                calib_errors[key] = f"{type(err).__name__}: {err}"

        def timed_evaluate(est, active, calib, push, cell_seed):
            start = time.perf_counter()
            cell = evaluate(cfg, model, params, est, active, calib, data["test"], push, cell_seed)
            return cell, time.perf_counter() - start

        rows = []
        cell_index = 0
        eval_futures = {}
        for curv in curvs:
            for objective in objectives:
                for method in methods:
                    for push in pushforwards:
                        key = (curv, objective, method, push)
                        cell_seed = int(cfg["seed"]) * 1000 + 6 + cell_index
                        cell_index += 1
                        if curv in est_errors:
                            eval_futures[key] = (None, est_errors[curv])
                        elif (curv, objective, method) in calib_errors:
                            eval_futures[key] = (None, calib_errors[(curv, objective, method)])
                        else:
                            est, active = estimates[curv]
                            calib = calibs[(curv, objective, method)]
                            fut = pool.submit(timed_evaluate, est, active, calib, push, cell_seed)
                            eval_futures[key] = (fut, None)

        for key, (fut, error) in eval_futures.items():
            curv, objective, method, push = key
            row = {
                "curv": curv,
                "calibration": f"{objective}-{method}",
                "pushforward": push,
                "tau": float("nan"),
                "sigma2": float("nan"),
                "nll": float("nan"),
                "crps": float("nan"),
                "ece": float("nan"),
                "objective_best": float("nan"),
                "objective_tau1": float("nan"),
                "wall_time_s": 0.0,
                "error": error or "",
            }
            if fut is not None:
                try:
                    cell, elapsed = fut.result()
                    calib = calibs[(curv, objective, method)]
                    row.update(cell)
                    row["objective_best"] = calib.best_objective
                    row["objective_tau1"] = _objective_at_tau1(calib)
                    row["wall_time_s"] = elapsed
                except Exception as err:  # noqa: BLE001
                    row["error"] = f"{type(err).__name__}: {err}"
            rows.append(row)
    finally:
        pool.shutdown(wait=True)

    # Wall-clock times live in a sidecar so sweep.csv stays byte-identical
    # across reruns with the same config and seeds.
    header = [
        "curv", "calibration", "pushforward", "tau", "sigma2",
        "nll", "crps", "ece", "objective_best", "objective_tau1", "error",
    ]
    csv_rows = [[row[col] for col in header] for row in rows]
    report = write_csv(os.path.join(out_dir, "sweep.csv"), header, csv_rows)
    timing = {
        f"{row['curv']}/{row['calibration']}/{row['pushforward']}": row["wall_time_s"]
        for row in rows
    }
    write_json(os.path.join(out_dir, "sweep_timing.json"), timing)
    return {"report": report, "n_rows": len(rows), "checkpoint": trained["checkpoint"]}


def run_fsp(cfg: dict, out_dir: str) -> dict:
    """Algorithm-1 training then Algorithm-2 posterior; emits grid predictions."""
    os.makedirs(out_dir, exist_ok=True)
    model = build_model(cfg)
    data = prepare_data(cfg)
    fcfg = cfg["fsp"]
    loss = cfg["loss"]
    seed = int(cfg["seed"])
    prior = GPPrior(KernelSpec.from_dict(fcfg["prior"]))
    ccfg = fcfg["context"]
    obs_noise = float(fcfg["obs_noise"])

    params0 = init_params(model, seed=seed + 3)
    params = fsp_train(
        model,
        params0,
        prior,
        {"sampler": ccfg["sampler"], "n": int(ccfg["n_train"]), "domain": ccfg["domain"]},
        data["train"],
        int(fcfg["train"]["batch_size"]),
        AdamConfig.from_dict(fcfg["train"]),
        seed=seed + 4,
        loss=loss,
        obs_noise=obs_noise,
        gram_nugget=fcfg["train"].get("gram_nugget", TRAIN_GRAM_NUGGET),
    )
    context = sample_context(
        ccfg.get("posterior_sampler", "halton"),
        ccfg["domain"],
        int(ccfg["n_posterior"]),
        seed=seed + 8,
    )
    post = fsp_posterior(
        model, prior, context, data["train"], params,
        loss=loss, obs_noise=obs_noise,
        lanczos_rank=int(fcfg["lanczos_rank"]), seed=seed + 9,
    )

    checkpoint = save_checkpoint(
        os.path.join(out_dir, "fsp_checkpoint.json"), model, params,
        {"seed": seed, "loss": loss, "trained": True, "fsp": True},
    )
    grid = _prediction_grid(cfg)
    mean, var = fsp_predict(model, post, grid[:, None])
    pred = {
        "type": "grid_prediction",
        "x": grid.tolist(),
        "mean": mean[:, 0].tolist(),
        "std": np.sqrt(var[:, 0]).tolist(),
    }
    pred_path = write_json(os.path.join(out_dir, "fsp_predictions.json"), pred)

    _, ctx_var = fsp_predict(model, post, context.points)
    prior_var = prior.kernel.variance
    diag = {
        "truncation_index": post.truncation_index,
        "kept_rank": post.diagnostics["kept_rank"],
        "gram_rank": post.diagnostics["gram_rank"],
        "projection_rank": post.diagnostics["projection_rank"],
        "truncated_all": post.diagnostics["truncated_all"],
        "variance_bound_ok": bool(np.all(ctx_var <= prior_var)),
        "max_context_variance": float(ctx_var.max()),
        "prior_marginal_variance": prior_var,
    }
    diag_path = write_json(os.path.join(out_dir, "fsp_diagnostics.json"), diag)
    return {
        "checkpoint": checkpoint,
        "predictions": pred_path,
        "diagnostics": diag_path,
        **diag,
    }


def plot_data(artifact_paths: list, out_dir: str) -> list:
    """Convert artifact JSONs (grid predictions, ellipses) into CSV files."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for path in artifact_paths:
        if not os.path.exists(path):
            raise ConfigError(f"artifact not found: {path}")
        artifact = read_json(path)
        stem = os.path.splitext(os.path.basename(path))[0]
        target = os.path.join(out_dir, f"{stem}.csv")
        kind = artifact.get("type")
        if kind == "grid_prediction":
            x = artifact["x"]
            mean = np.asarray(artifact["mean"], dtype=np.float64)
            std = np.asarray(artifact["std"], dtype=np.float64)
            if mean.ndim == 1:
                rows = [[x[i], mean[i], std[i]] for i in range(len(x))]
                written.append(write_csv(target, ["x", "mean", "std"], rows))
            else:
                c = mean.shape[1]
                header = ["x"] + [f"mean_{j}" for j in range(c)] + [f"std_{j}" for j in range(c)]
                rows = [[x[i], *mean[i], *std[i]] for i in range(len(x))]
                written.append(write_csv(target, header, rows))
        elif kind == "ellipse":
            cx, cy = artifact["center"]
            major, minor = artifact["axes"]
            angle = artifact["angle_rad"]
            rows = [
                [1, cx, cy, major, minor, angle],
                [2, cx, cy, 2.0 * major, 2.0 * minor, angle],
            ]
            header = ["level", "center_x", "center_y", "axis_major", "axis_minor", "angle_rad"]
            written.append(write_csv(target, header, rows))
        else:
            raise ConfigError(f"artifact {path} has unknown type {kind!r}")
    return written


def gen_data_files(cfg: dict, out_dir: str) -> dict:
    """Generate the task dataset and write its CSV."""
    os.makedirs(out_dir, exist_ok=True)
    data = prepare_data(cfg)
    header, rows = datasets.data_rows(cfg["task"], data["train"])
    path = write_csv(os.path.join(out_dir, "data.csv"), header, rows)
    return {"data": path, "n": data["train"].n, "task": cfg["task"]}
