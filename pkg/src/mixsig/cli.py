"""Command-line entry point: ``mixsig generate | fit | evaluate``.

Exit codes: 0 success, 2 user or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from jax.nn import softmax

from . import elbo as elbo_mod
from .baselines import ClsConfig, cls_fit, pls_fit, pls_predict, pls_select_components
from .config import RunConfig, dataclass_kwargs, load_config, override_seed
from .datasets import (
    FLOAT_FORMAT,
    MixtureDataset,
    ToyConfig,
    generate_toy,
    load_dataset,
    read_matrix,
    save_dataset,
)
from .errors import (
    ConfigError,
    ConvergenceFailure,
    DegenerateDeflation,
    MixsigError,
    NonFiniteElbo,
    NonFiniteStatistic,
    NoSuccessfulRestart,
    NotPositiveDefinite,
    SingleClassTruth,
)
from .metrics import classification_metrics, regression_metrics
from .numerics import RngStream
from .training import FitConfig, fit_with_restarts, snv, write_trace

log = logging.getLogger("mixsig")

NUMERICAL_ERRORS = (
    NoSuccessfulRestart,
    NonFiniteElbo,
    NonFiniteStatistic,
    NotPositiveDefinite,
    ConvergenceFailure,
    DegenerateDeflation,
)
RESOLVED_CONFIG = "config.resolved.ini"


def _fmt(v) -> str:
    return FLOAT_FORMAT % v


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def _write_metrics(path, metrics: dict) -> None:
    _write_rows(path, ["metric", "value"], [(k, float(v)) for k, v in metrics.items()])


def _prepare_out(out) -> Path:
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig, out) -> int:
    try:
        toy = ToyConfig(**cfg.toy)
    except ValueError as exc:
        raise ConfigError(f"[toy] {exc}") from exc
    data = generate_toy(toy)
    d = _prepare_out(out)
    save_dataset(data, d)
    h = data.truth["h"]
    rows = [(i, 0, float(h[i])) for i in range(toy.n_train)]
    rows += [(i, 1, float(h[toy.n_train + i])) for i in range(toy.n_test)]
    _write_rows(d / "truth_latents.csv", ["row", "is_test", "h"], rows)
    (d / RESOLVED_CONFIG).write_text(cfg.to_ini(), encoding="utf-8")
    print(f"wrote toy dataset ({toy.n_train} train, {toy.n_test} test, M={toy.M}) to {d}")
    return 0


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _load_data(cfg: RunConfig) -> MixtureDataset:
    data = load_dataset(cfg.data["dir"], cfg.data["mode"])
    if cfg.data["preprocess"] == "snv":
        y_test = snv(data.Y_test) if data.n_test else data.Y_test
        data = MixtureDataset(
            snv(data.Y_train), data.R_train, y_test, data.lam, data.R_test_truth, data.mode, data.provenance,
        )
    return data


def _weight_columns(c, mode):
    if mode == "regression":
        return [f"mean_{k}" for k in range(c)] + [f"alpha_{k}" for k in range(c)]
    return [f"prob_{k}" for k in range(c)] + [f"logit_{k}" for k in range(c)]


def _prediction_rows(mean, params, mode):
    # alpha is written on its natural scale; logits as they are
    shown = np.exp(params) if mode == "regression" else params
    return [(i, *map(float, mean[i]), *map(float, shown[i])) for i in range(mean.shape[0])]


def _score(data: MixtureDataset, mean, alpha=None) -> dict:
    truth = data.R_test_truth
    if data.mode == "regression":
        if alpha is not None:
            m = regression_metrics(alpha, truth)
            return {"mse": m.mse, "rmse": m.rmse, "nlpd": m.nlpd}
        mse = float(np.mean((mean - truth) ** 2))
        return {"mse": mse, "rmse": float(np.sqrt(mse))}
    labels = np.argmax(truth, axis=1)
    try:
        m = classification_metrics(mean, labels)
        return {"accuracy": m.accuracy, "lpp": m.lpp, "roc_auc": m.roc_auc}
    except SingleClassTruth:
        acc = float(np.mean(np.argmax(mean, axis=1) == labels))
        lpp = float(np.sum(np.log(np.maximum(mean[np.arange(labels.size), labels], 1e-12))))
        return {"accuracy": acc, "lpp": lpp, "roc_auc": float("nan")}


def _fit_config(cfg: RunConfig) -> FitConfig:
    values = dict(cfg.fit)
    values["variant"] = "independent" if values["method"] == "ws-gplvm-ind" else "correlated"
    values["mode"] = cfg.data["mode"]
    try:
        return FitConfig(**dataclass_kwargs(FitConfig, values))
    except ValueError as exc:
        raise ConfigError(f"[fit] {exc}") from exc


def _fit_ws(cfg: RunConfig, data: MixtureDataset, d: Path, jobs: int) -> dict:
    fcfg = _fit_config(cfg)
    res = fit_with_restarts(data, fcfg, jobs=jobs)
    state = res.state
    c = data.n_components
    mean, _ = elbo_mod.predict_weights(state)
    params = state.vs.weight_params
    _write_rows(d / "predictions.csv", ["row", *_weight_columns(c, data.mode)], _prediction_rows(mean, params, data.mode))
    n_a = fcfg.latent_dim
    header = ["is_test", "row", *[f"mean_{a}" for a in range(n_a)], *[f"var_{a}" for a in range(n_a)]]
    rows = [(0, i, *map(float, state.vs.mu[i]), *map(float, np.exp(state.vs.log_var[i]))) for i in range(data.n_train)]
    rows += [
        (1, i, *map(float, state.vs.mu_star[i]), *map(float, np.exp(state.vs.log_var_star[i])))
        for i in range(data.n_test)
    ]
    _write_rows(d / "latents.csv", header, rows)
    pure = []
    for i in range(data.n_test):
        queries = [(state.vs.mu_star[i], lam) for lam in data.lam]
        for comp in range(c):
            post = elbo_mod.predict_pure(state, res.qu, queries, comp)
            pure += [(i, comp, float(lam), float(mu), float(v)) for lam, mu, v in zip(data.lam, post.mean, post.variance)]
    _write_rows(d / "pure_signals.csv", ["row", "component", "lambda", "mean", "variance"], pure)
    write_trace(res, d / "elbo_trace.csv")
    summary = {"elbo": res.final_elbo, "restart_index": float(res.restart_index)}
    if data.R_test_truth is not None and data.n_test:
        alpha = np.exp(params) if data.mode == "regression" else None
        summary.update(_score(data, mean, alpha))
    return summary


def _fit_cls(cfg: RunConfig, data: MixtureDataset, d: Path) -> dict:
    f = cfg.fit
    ccfg = ClsConfig(
        variant="cls_gp" if f["method"] == "cls-gp" else "cls",
        mode=cfg.data["mode"],
        restarts=f["restarts"],
        seed=f["seed"],
        max_iter=f["stage3_max_iter"],
        tol=f["stage3_tol"],
        sigma2_init=f["sigma2_init"],
        sigma_f2_range=f["sigma_f2_range"],
        gamma_init=f["gamma_init"],
        prior_alpha=f["prior_alpha"],
        jitter=f["jitter"],
    )
    state, value = cls_fit(data, ccfg)
    c = data.n_components
    mom = state.test_weights().test_weight_moments()
    _write_rows(
        d / "predictions.csv", ["row", *_weight_columns(c, data.mode)],
        _prediction_rows(mom.mean, state.weight_params, data.mode),
    )
    pure = []
    var = np.diagonal(state.cov, axis1=1, axis2=2)
    for i in range(data.n_test):
        for comp in range(c):
            pure += [
                (i, comp, float(lam), float(state.mean[j, comp]), float(var[j, comp]))
                for j, lam in enumerate(data.lam)
            ]
    _write_rows(d / "pure_signals.csv", ["row", "component", "lambda", "mean", "variance"], pure)
    _write_rows(d / "elbo_trace.csv", ["iteration", "stage", "sigma2", "elbo"], state.trace)
    summary = {"elbo": value}
    if data.R_test_truth is not None and data.n_test:
        alpha = np.exp(state.weight_params) if data.mode == "regression" else None
        summary.update(_score(data, mom.mean, alpha))
    return summary


def _fit_pls(cfg: RunConfig, data: MixtureDataset, d: Path) -> dict:
    f = cfg.fit
    n, m = data.Y_train.shape
    folds = min(f["pls_folds"], n)
    kmax = max(1, min(f["pls_kmax"], m, n - 1 - (n + folds - 1) // folds))
    if folds < 2 or n < 3:
        raise ConfigError("PLS needs at least 3 training rows")
    k = pls_select_components(data.Y_train, data.R_train, folds, kmax, RngStream(f["seed"]))
    model = pls_fit(data.Y_train, data.R_train, k)
    c = data.n_components
    pred = pls_predict(model, data.Y_test) if data.n_test else np.zeros((0, c))
    if data.mode == "classification":
        scores = np.clip(pred, 1e-12, None)
        out = scores / scores.sum(axis=1, keepdims=True)
        header = [f"prob_{j}" for j in range(c)]
    else:
        out = pred
        header = [f"mean_{j}" for j in range(c)]
    _write_rows(d / "predictions.csv", ["row", *header], [(i, *map(float, out[i])) for i in range(out.shape[0])])
    summary = {"n_components": float(k)}
    if data.R_test_truth is not None and data.n_test:
        summary.update(_score(data, out))
    return summary


def cmd_fit(cfg: RunConfig, out, jobs: int = 1) -> int:
    data = _load_data(cfg)
    d = _prepare_out(out)
    (d / RESOLVED_CONFIG).write_text(cfg.to_ini(), encoding="utf-8")
    method = cfg.fit["method"]
    if method in ("ws-gplvm", "ws-gplvm-ind"):
        summary = _fit_ws(cfg, data, d, jobs)
    elif method in ("cls", "cls-gp"):
        summary = _fit_cls(cfg, data, d)
    else:
        summary = _fit_pls(cfg, data, d)
    _write_metrics(d / "metrics.csv", summary)
    for k, v in summary.items():
        print(f"{k} = {_fmt(v)}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def _columns(header, prefix):
    return [i for i, h in enumerate(header) if h.startswith(prefix)]


def cmd_evaluate(predictions, truth, mode, out=None) -> int:
    pred, header = read_matrix(predictions)
    header = header or []
    r_true, _ = read_matrix(truth)
    if pred.shape[0] != r_true.shape[0]:
        raise ConfigError(f"{pred.shape[0]} prediction rows but {r_true.shape[0]} truth rows")
    c = r_true.shape[1]
    if mode == "regression":
        alpha_cols = _columns(header, "alpha_")
        mean_cols = _columns(header, "mean_")
        if alpha_cols:
            alpha = pred[:, alpha_cols]
            if alpha.shape[1] != c:
                raise ConfigError(f"{alpha.shape[1]} predicted components but {c} in truth")
            m = regression_metrics(alpha, r_true)
            metrics = {"mse": m.mse, "rmse": m.rmse, "nlpd": m.nlpd}
        else:
            if not mean_cols:
                mean_cols = list(range(1, pred.shape[1])) if header else list(range(pred.shape[1]))
            mean = pred[:, mean_cols]
            if mean.shape[1] != c:
                raise ConfigError(f"{mean.shape[1]} predicted components but {c} in truth")
            mse = float(np.mean((mean - r_true) ** 2))
            metrics = {"mse": mse, "rmse": float(np.sqrt(mse))}
    else:
        prob_cols = _columns(header, "prob_")
        if prob_cols:
            probs = pred[:, prob_cols]
        elif _columns(header, "logit_"):
            probs = np.asarray(softmax(pred[:, _columns(header, "logit_")], axis=1))
        else:
            probs = pred
        if probs.shape[1] != c:
            raise ConfigError(f"{probs.shape[1]} predicted classes but {c} in truth")
        m = classification_metrics(probs, np.argmax(r_true, axis=1))
        metrics = {"accuracy": m.accuracy, "lpp": m.lpp, "roc_auc": m.roc_auc}
    d = _prepare_out(out) if out is not None else Path(predictions).parent
    _write_metrics(d / "metrics.csv", metrics)
    for k, v in metrics.items():
        print(f"{k} = {_fmt(v)}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixsig", description="Weighted-sum GPLVM signal separation")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic toy dataset")
    g.add_argument("--config", help="INI config file ([toy] section)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, help="overrides the configured seeds")

    f = sub.add_parser("fit", help="fit a model and predict the test rows")
    f.add_argument("--config", help="INI config file ([data] and [fit] sections)")
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--seed", type=int, help="overrides the configured seeds")
    f.add_argument("--jobs", type=int, default=1, help="worker processes for restarts")
    f.add_argument("--method", choices=["ws-gplvm", "ws-gplvm-ind", "cls", "cls-gp", "pls"])
    f.add_argument("--data", help="dataset directory (overrides [data] dir)")

    e = sub.add_parser("evaluate", help="score predictions against true weights")
    e.add_argument("--predictions", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--mode", choices=["regression", "classification"], default="regression")
    e.add_argument("--out", help="directory for metrics.csv (default: next to predictions)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "evaluate":
            return cmd_evaluate(args.predictions, args.truth, args.mode, args.out)
        cfg = load_config(args.config) if args.config else load_config(text="")
        if args.seed is not None:
            override_seed(cfg, args.seed)
        if args.command == "generate":
            return cmd_generate(cfg, args.out)
        if args.method:
            cfg.fit["method"] = args.method
        if args.data:
            cfg.data["dir"] = args.data
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        return cmd_fit(cfg, args.out, args.jobs)
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (MixsigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
