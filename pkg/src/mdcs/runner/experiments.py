"""Evaluation, the bootstrap model-variance protocol, and parameter sweeps."""

from __future__ import annotations

import logging

import numpy as np

from mdcs import dataops, metrics
from mdcs.metrics import GROUPS
from mdcs.runner import reporting, training
from mdcs.runner.config import TrainConfig

log = logging.getLogger(__name__)

DEFAULT_CS_ALPHA = 0.6

# Rows of the three-expert lambda table, in the order they are usually reported.
LAMBDA_TRIPLES = (
    (0.0, 0.0, 0.0),
    (1.0, 1.0, 1.0),
    (2.0, 2.0, 2.0),
    (0.0, 0.0, 1.0),
    (1.0, 2.0, 2.0),
    (0.0, 1.0, 2.0),
    (-0.5, 1.0, 2.5),
)


class ProtocolError(RuntimeError):
    pass


def evaluate(model, cfg: TrainConfig, test_set, split):
    dump = training.predict(model, test_set)
    report = reporting.build_report(dump, split, cfg.to_text(), model.lambdas)
    return report, dump


def run_once(cfg: TrainConfig, datasets=None):
    """Train and evaluate one configuration; returns ``(report, dump, train_result)``."""
    train_set, test_set = datasets if datasets is not None else training.build_datasets(cfg)
    result = training.train(cfg, train_set)
    split = training.shot_split_for(cfg, train_set)
    report, dump = evaluate(result.model, cfg, test_set, split)
    return report, dump, result


def _row(report: dict, name: str) -> dict:
    return next(r for r in report["rows"] if r["model"] == name)


def summary(report: dict) -> dict:
    """Ensemble accuracy per group plus the overall diversity factor."""
    ens = _row(report, "Ensemble")
    out = {g: ens[g] for g in GROUPS if g in ens}
    out["sigma"] = _row(report, "Ensemble (sigma)")["All"]
    return out


def seed_list(cfg: TrainConfig, n_seeds: int) -> list:
    return [cfg.seed + i for i in range(n_seeds)]


def _mean_rows(summaries: list) -> dict:
    keys = [k for k in summaries[0] if all(k in s for s in summaries)]
    return {k: float(np.mean([s[k] for s in summaries])) for k in keys}


def _variant_member(cfg, base_train, probe, k):
    boot = dataops.bootstrap_resample(base_train, cfg.seed + k)
    result = training.train(cfg, boot)
    return training.predict(result.model, probe)


def variance_protocol(cfg: TrainConfig, m: int, paired: bool = False, datasets=None) -> dict:
    """Train ``m`` models on class-count-preserving bootstrap resamples and
    measure the spread of their true-class probabilities on the probe set.

    Member ``k`` (1-based) resamples with seed ``cfg.seed + k``; initialization
    and shuffling stay tied to ``cfg.seed``. In paired mode the protocol runs
    once without consistency self-distillation (``alpha = 0``) and once with it.
    """
    if m < 2:
        raise ValueError("the variance protocol needs m >= 2")
    base_train, probe = datasets if datasets is not None else training.build_datasets(cfg)
    split = training.shot_split_for(cfg, base_train)
    if paired:
        on_alpha = cfg.alpha if cfg.alpha > 0 else DEFAULT_CS_ALPHA
        variants = [("w/o CS", cfg.replace(alpha=0.0)), ("w/ CS", cfg.replace(alpha=on_alpha))]
    else:
        variants = [("w/ CS" if cfg.alpha > 0 else "w/o CS", cfg)]
    columns, accuracy = {}, {}
    for name, variant in variants:
        rows, accs = [], []
        for k in range(1, m + 1):
            try:
                dump = _variant_member(variant, base_train, probe, k)
            except Exception as exc:
                raise ProtocolError(f"variance member {k} ({name}) failed: {exc}") from exc
            rows.append(metrics.truth_probabilities(dump))
            accs.append(metrics.shot_accuracy(dump, split, metrics.ensemble_predictions(dump))["All"])
        var = metrics.model_variance(np.vstack(rows), probe.labels, split)
        columns[name] = var.by_group
        accuracy[name] = float(np.mean(accs))
        log.info("variance %s: %.6f", name, var.mean)
    return {"m": m, "columns": columns, "accuracy": accuracy,
            "shot_split": [s.value for s in split.assignment], "config": cfg.to_text()}


def lambda_sweep(cfg: TrainConfig, values, n_seeds: int = 1) -> list:
    """One row per lambda setting; each value is a scalar (single expert) or a tuple."""
    values = list(values)
    if len(values) < 2:
        raise ValueError("a sweep needs at least two points")
    rows = []
    for value in values:
        lambdas = tuple(float(v) for v in np.atleast_1d(value))
        run_cfg = cfg.replace(M=len(lambdas), lambdas=lambdas)
        per_seed = [summary(run_once(run_cfg.replace(seed=s))[0]) for s in seed_list(cfg, n_seeds)]
        rows.append({"lambda": list(lambdas), "M": len(lambdas), "seeds": n_seeds, **_mean_rows(per_seed)})
    return rows


def expert_count_sweep(cfg: TrainConfig, counts, n_seeds: int = 1) -> list:
    rows = []
    for M in counts:
        run_cfg = cfg.replace(M=int(M))
        per_seed = [summary(run_once(run_cfg.replace(seed=s))[0]) for s in seed_list(cfg, n_seeds)]
        rows.append({"M": int(M), "lambda": list(run_cfg.lambdas), "seeds": n_seeds, **_mean_rows(per_seed)})
    return rows


def alpha_sweep(cfg: TrainConfig, alphas, n_seeds: int = 1) -> list:
    rows = []
    for alpha in alphas:
        run_cfg = cfg.replace(alpha=float(alpha))
        per_seed = [summary(run_once(run_cfg.replace(seed=s))[0]) for s in seed_list(cfg, n_seeds)]
        rows.append({"alpha": float(alpha), "seeds": n_seeds, **_mean_rows(per_seed)})
    return rows


SWEEP_COLUMNS = {
    "lambda": ["lambda", "M", "seeds", *GROUPS, "sigma"],
    "experts": ["M", "lambda", "seeds", *GROUPS, "sigma"],
    "alpha": ["alpha", "seeds", *GROUPS, "sigma"],
}
