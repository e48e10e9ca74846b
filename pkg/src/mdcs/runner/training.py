"""MDCS training loop, prediction and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from mdcs import dataops, losses, metrics, netcore
from mdcs.runner.config import ConfigError, TrainConfig

log = logging.getLogger(__name__)

# Stream tags keep the independent random streams of one run apart.
_TRAIN_DATA, _TEST_DATA, _SHUFFLE, _WEAK, _STRONG = 101, 102, 201, 202, 203


def build_datasets(cfg: TrainConfig):
    """Training and test sets from files, or the synthetic long-tailed benchmark."""
    if cfg.train_data:
        train = _read(cfg.train_data)
    else:
        counts = dataops.exp_longtail_counts(dataops.ImbalanceProfile(cfg.classes, cfg.n_max, cfg.beta))
        train = dataops.synth_gaussians(cfg.classes, cfg.dim, counts, cfg.separation, [cfg.seed, _TRAIN_DATA])
    if cfg.test_data:
        test = _read(cfg.test_data)
    else:
        C, d = (train.num_classes, train.dim) if cfg.train_data else (cfg.classes, cfg.dim)
        test = dataops.synth_gaussians(
            C, d, np.full(C, cfg.test_per_class), cfg.separation, [cfg.seed, _TEST_DATA]
        )
    return train, test


def _read(path):
    try:
        return dataops.read_dataset_csv(path)
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from None


def shot_split_for(cfg: TrainConfig, train: dataops.LabeledDataset) -> dataops.ShotSplit:
    return dataops.shot_partition(train.counts, cfg.many_threshold, cfg.few_threshold)


def init_model(cfg: TrainConfig, input_dim: int, num_classes: int) -> netcore.MultiExpertModel:
    return netcore.MultiExpertModel.initialize(
        input_dim, list(cfg.widths), num_classes, list(cfg.lambdas), cfg.scale, seed=cfg.seed
    )


@dataclass
class TrainResult:
    model: netcore.MultiExpertModel
    state: netcore.SgdState
    log: list = field(default_factory=list)

    @property
    def epochs_done(self) -> int:
        return len(self.log)


def train(cfg: TrainConfig, train_set: dataops.LabeledDataset | None = None) -> TrainResult:
    """Run the weak/strong two-view training loop for ``cfg.epochs`` epochs.

    Batch order comes from a per-epoch shuffle stream; each instance's views
    come from per-epoch augmentation streams indexed by instance id, so the
    augmentation an instance receives does not depend on batch composition.
    """
    if train_set is None:
        train_set, _ = build_datasets(cfg)
    if train_set.counts.min() < 1:
        raise ConfigError("every class needs at least one training sample")
    model = init_model(cfg, train_set.dim, train_set.num_classes)
    dws = [losses.DistributionWeight(lam, train_set.counts) for lam in cfg.lambdas]
    distill = cfg.distill
    state = netcore.SgdState(
        cfg.lr, cfg.momentum, cfg.weight_decay, cfg.nesterov, cfg.schedule, max(cfg.epochs, 1)
    )
    history = []
    # overflow surfaces as a non-finite loss, which is reported with its position
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            history.append(_run_epoch(cfg, model, state, train_set, dws, distill, epoch))
            log.debug("epoch %d total %.6f", epoch, history[-1]["total"])
    return TrainResult(model, state, history)


def _run_epoch(cfg, model, state, train_set, dws, distill, epoch) -> dict:
    X, y = train_set.features, train_set.labels
    order = np.random.default_rng([cfg.seed, _SHUFFLE, epoch]).permutation(train_set.n)
    weak_views = dataops.augment_batch(X, cfg.weak_policy, np.random.default_rng([cfg.seed, _WEAK, epoch]))
    strong_views = dataops.augment_batch(X, cfg.strong_policy, np.random.default_rng([cfg.seed, _STRONG, epoch]))
    M = model.num_experts
    sums = np.zeros(1 + 3 * M)
    batches = 0
    for b, start in enumerate(range(0, train_set.n, cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        try:
            out = losses.total_loss(model, weak_views[idx], strong_views[idx], y[idx], dws, distill)
        except netcore.NumericError as exc:
            # non-finite logits come from the shared backbone, so every expert is hit
            raise netcore.NumericError(f"{exc} at epoch {epoch}, batch {b}, expert all") from None
        if not math.isfinite(out.value):
            bad = next((mu for mu in range(M) if not math.isfinite(out.diversity[mu] + out.consistency[mu])), None)
            raise netcore.NumericError(f"non-finite loss at epoch {epoch}, batch {b}, expert {bad}")
        grads = netcore.backward(model, out.cache, out.dlogits)
        model.load_parameters(netcore.sgd_step(model.parameters(), grads, state, epoch))
        sums += [out.value, *out.diversity, *out.consistency, *out.confident_fraction]
        batches += 1
    means = sums / batches
    row = {"epoch": epoch, "lr": netcore.lr_at(state, epoch), "total": float(means[0])}
    for mu in range(M):
        row[f"dl_{mu}"] = float(means[1 + mu])
        row[f"cs_{mu}"] = float(means[1 + M + mu])
        row[f"ci_frac_{mu}"] = float(means[1 + 2 * M + mu])
    return row


def predict(model: netcore.MultiExpertModel, dataset: dataops.LabeledDataset) -> metrics.PredictionDump:
    """Raw expert logits on un-augmented inputs."""
    if dataset.dim != model.input_dim:
        raise netcore.ShapeError(
            f"dataset has {dataset.dim} features but the model expects {model.input_dim}"
        )
    if dataset.num_classes != model.num_classes:
        raise netcore.ShapeError(
            f"dataset has {dataset.num_classes} classes but the model has {model.num_classes}"
        )
    logits, _ = netcore.forward(model, dataset.features)
    return metrics.PredictionDump(np.arange(dataset.n), dataset.labels, np.stack(logits))


def write_train_log(history, path) -> None:
    if not history:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,lr,total\n")
        return
    keys = list(history[0])
    lines = [",".join(keys)]
    for row in history:
        lines.append(",".join(str(row[k]) if k == "epoch" else format(row[k], ".17g") for k in keys))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
