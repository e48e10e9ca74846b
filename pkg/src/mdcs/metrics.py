"""Per-expert correct sets, diversity factor, ensembling, shot accuracy, model variance."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from mdcs.dataops import Shot, ShotSplit

GROUPS = ("Many", "Medium", "Few", "All")


class DumpError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionDump:
    """Raw expert logits for a test set: ``logits[mu, i, k]``."""

    ids: np.ndarray
    labels: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        labels = np.asarray(self.labels, dtype=np.int64)
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 3 or logits.shape[0] < 1:
            raise DumpError("logits must be shaped (experts, instances, classes)")
        if ids.shape != labels.shape or labels.shape != (logits.shape[1],):
            raise DumpError("ids, labels and logits disagree on the instance count")
        if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[2]):
            raise DumpError("labels out of range [0, C)")
        if np.unique(ids).size != ids.size:
            raise DumpError("duplicate instance ids")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "logits", logits)

    @property
    def num_experts(self) -> int:
        return self.logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[2]

    def __len__(self) -> int:
        return self.ids.size


def expert_predictions(dump: PredictionDump, expert: int) -> np.ndarray:
    return np.argmax(dump.logits[expert], axis=1)


def expert_correct_set(dump: PredictionDump, expert: int) -> frozenset:
    hit = expert_predictions(dump, expert) == dump.labels
    return frozenset(dump.ids[hit].tolist())


def diversity_factor(sets, n_test: int) -> float:
    """Fraction of the ``n_test`` instances solved by at least one expert."""
    if n_test <= 0:
        raise ValueError("n_test must be positive")
    union = set()
    for s in sets:
        union |= set(s)
    return len(union) / n_test


def ensemble_logits(dump: PredictionDump) -> np.ndarray:
    return dump.logits.mean(axis=0)


def ensemble_predictions(dump: PredictionDump) -> np.ndarray:
    return np.argmax(ensemble_logits(dump), axis=1)


def ensemble_predict(dump: PredictionDump, instance: int) -> int:
    """Argmax of the uniform mean of raw expert logits for one instance row."""
    return int(np.argmax(dump.logits[:, instance, :].mean(axis=0)))


def _group_masks(labels: np.ndarray, split: ShotSplit) -> dict:
    if labels.size and labels.max() >= len(split.assignment):
        raise ValueError(f"class {int(labels.max())} is missing from the shot split")
    groups = split.group_of(labels)
    masks = {shot.value: groups == shot.value for shot in Shot}
    masks["All"] = np.ones(labels.size, dtype=bool)
    return masks


def shot_accuracy(dump: PredictionDump, split: ShotSplit, predictions) -> dict:
    """Accuracy per shot group; groups without instances are left out."""
    hit = np.asarray(predictions) == dump.labels
    out = {}
    for name, mask in _group_masks(dump.labels, split).items():
        if mask.any():
            out[name] = float(hit[mask].mean())
    return out


def shot_diversity(dump: PredictionDump, split: ShotSplit) -> dict:
    """Diversity factor per shot group, each normalized by its own size."""
    hits = np.stack([expert_predictions(dump, mu) == dump.labels for mu in range(dump.num_experts)])
    any_hit = hits.any(axis=0)
    out = {}
    for name, mask in _group_masks(dump.labels, split).items():
        if mask.any():
            out[name] = float(any_hit[mask].mean())
    return out


def truth_probabilities(dump: PredictionDump) -> np.ndarray:
    """Softmax probability of the true class under the ensemble's mean logits."""
    z = ensemble_logits(dump)
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p[np.arange(len(dump)), dump.labels]


@dataclass(frozen=True)
class VarianceResult:
    per_instance: np.ndarray
    mean: float
    by_group: dict


def model_variance(pm, labels=None, split: ShotSplit | None = None) -> VarianceResult:
    """Population variance over the ``m`` model rows of a prediction matrix."""
    pm = np.asarray(pm, dtype=np.float64)
    if pm.ndim != 2 or pm.shape[0] < 2:
        raise ValueError("prediction matrix needs at least 2 model rows")
    if pm.size and (pm.min() < 0 or pm.max() > 1):
        raise ValueError("prediction matrix entries must lie in [0, 1]")
    # centering on the first row keeps identical rows at exactly zero
    d = pm - pm[0]
    per = ((d - d.mean(axis=0)) ** 2).mean(axis=0)
    by_group = {}
    if labels is not None and split is not None:
        for name, mask in _group_masks(np.asarray(labels, dtype=np.int64), split).items():
            if mask.any():
                by_group[name] = float(per[mask].mean())
    return VarianceResult(per, float(per.mean()), by_group)


def write_dump_csv(dump: PredictionDump, path) -> None:
    C = dump.num_classes
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label", "expert", *[f"logit_{k}" for k in range(C)]])
        for i in range(len(dump)):
            for mu in range(dump.num_experts):
                writer.writerow(
                    [int(dump.ids[i]), int(dump.labels[i]), mu,
                     *[format(v, ".17g") for v in dump.logits[mu, i]]]
                )


def read_dump_csv(path) -> PredictionDump:
    """Read a dump; rows may come in any order but every (id, expert) must appear once."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:3] != ["id", "label", "expert"]:
            raise DumpError(f"{path}: bad header")
        C = len(header) - 3
        rows = {}
        labels = {}
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != C + 3:
                raise DumpError(f"{path}:{line_no}: expected {C + 3} fields")
            i, y, mu = int(row[0]), int(row[1]), int(row[2])
            if labels.setdefault(i, y) != y:
                raise DumpError(f"{path}:{line_no}: conflicting label for id {i}")
            if (i, mu) in rows:
                raise DumpError(f"{path}:{line_no}: duplicate row for id {i}, expert {mu}")
            rows[(i, mu)] = [float(v) for v in row[3:]]
    if not rows:
        raise DumpError(f"{path}: no prediction rows")
    ids = sorted(labels)
    experts = sorted({mu for _, mu in rows})
    if experts != list(range(len(experts))):
        raise DumpError(f"{path}: expert ids must be 0..M-1, got {experts}")
    logits = np.empty((len(experts), len(ids), C))
    for col, i in enumerate(ids):
        for mu in experts:
            if (i, mu) not in rows:
                raise DumpError(f"{path}: id {i} is missing expert {mu}")
            logits[mu, col] = rows[(i, mu)]
    return PredictionDump(np.array(ids), np.array([labels[i] for i in ids]), logits)

