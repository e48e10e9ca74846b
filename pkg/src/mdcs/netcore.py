"""Shared-backbone MLP with cosine expert heads, analytic backprop and SGD.

Everything runs in float64. Parameters live in plain ``numpy`` arrays keyed
by name (``backbone.{i}.weight``, ``backbone.{i}.bias``, ``head.{mu}.weight``)
so the optimizer, the gradient checker and the checkpoint writer all share one
flat view of the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

EPS = 1e-12
CKPT_HEADER = "MDCS-CKPT v1"


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


def l2_normalize(x: np.ndarray):
    """Row-wise ``x / max(||x||, EPS)``; also returns the clamped norms."""
    norms = np.maximum(np.sqrt(np.einsum("ij,ij->i", x, x)), EPS)[:, None]
    return x / norms, norms


def l2_normalize_backward(grad_out, x_hat, norms):
    proj = np.einsum("ij,ij->i", grad_out, x_hat)[:, None]
    return (grad_out - x_hat * proj) / norms


class MultiExpertModel:
    """Affine/ReLU backbone shared by ``M`` cosine-classifier heads.

    ReLU sits between backbone layers only; the last affine output is the
    feature vector fed to every head. Each head scores class ``k`` as
    ``scale * <w_k/|w_k|, f/|f|>`` and carries its own ``lambda``.
    """

    def __init__(self, weights, biases, heads, lambdas, scale=16.0):
        if len(weights) != len(biases) or not weights:
            raise ShapeError("backbone needs matching, non-empty weight and bias lists")
        if len(heads) < 1 or len(heads) != len(lambdas):
            raise ShapeError("need one lambda per head and at least one head")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.heads = [np.asarray(h, dtype=np.float64) for h in heads]
        self.lambdas = [float(v) for v in lambdas]
        self.scale = float(scale)
        self.version = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: bias shape {b.shape} vs weight {w.shape}")
            if i and w.shape[0] != self.weights[i - 1].shape[1]:
                raise ShapeError(f"layer {i} input width does not match layer {i - 1}")
        C, h = self.heads[0].shape
        for mu, head in enumerate(self.heads):
            if head.shape != (C, h) or h != self.feature_dim:
                raise ShapeError(f"head {mu} shape {head.shape} incompatible with backbone")

    @classmethod
    def initialize(cls, input_dim, widths, num_classes, lambdas, scale=16.0, seed=0):
        """Glorot-uniform affine weights, zero biases, unit-norm head rows."""
        rng = np.random.default_rng(seed)
        dims = [input_dim, *widths]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        heads = []
        for _ in lambdas:
            rows = rng.standard_normal((num_classes, dims[-1]))
            heads.append(l2_normalize(rows)[0])
        return cls(weights, biases, heads, lambdas, scale)

    @property
    def num_experts(self) -> int:
        return len(self.heads)

    @property
    def num_classes(self) -> int:
        return self.heads[0].shape[0]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def widths(self) -> list:
        return [w.shape[1] for w in self.weights]

    def parameters(self) -> dict:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"backbone.{i}.weight"] = w
            params[f"backbone.{i}.bias"] = b
        for mu, head in enumerate(self.heads):
            params[f"head.{mu}.weight"] = head
        return params

    def load_parameters(self, params: dict) -> None:
        current = self.parameters()
        if params.keys() != current.keys():
            raise ShapeError("parameter names differ from the model's")
        for name, value in params.items():
            if np.shape(value) != current[name].shape:
                raise ShapeError(f"{name}: shape {np.shape(value)} != {current[name].shape}")
        n = len(self.weights)
        self.weights = [np.array(params[f"backbone.{i}.weight"], dtype=np.float64) for i in range(n)]
        self.biases = [np.array(params[f"backbone.{i}.bias"], dtype=np.float64) for i in range(n)]
        self.heads = [
            np.array(params[f"head.{mu}.weight"], dtype=np.float64) for mu in range(len(self.heads))
        ]
        self.version += 1

    def copy(self) -> "MultiExpertModel":
        return MultiExpertModel(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [h.copy() for h in self.heads],
            list(self.lambdas),
            self.scale,
        )


@dataclass
class ForwardCache:
    model_id: int
    version: int
    inputs: list
    preacts: list
    feat_hat: np.ndarray
    feat_norm: np.ndarray
    head_hats: list
    head_norms: list


def forward(model: MultiExpertModel, x):
    """Per-expert logit matrices for the batch ``x`` plus a backprop cache."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != model.input_dim:
        raise ShapeError(f"expected input of shape (n, {model.input_dim}), got {a.shape}")
    inputs, preacts = [], []
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(a)
        z = a @ w + b
        preacts.append(z)
        a = np.maximum(z, 0.0) if i < last else z
    feat_hat, feat_norm = l2_normalize(a)
    logits, head_hats, head_norms = [], [], []
    for head in model.heads:
        w_hat, w_norm = l2_normalize(head)
        head_hats.append(w_hat)
        head_norms.append(w_norm)
        logits.append(model.scale * (feat_hat @ w_hat.T))
    cache = ForwardCache(
        id(model), model.version, inputs, preacts, feat_hat, feat_norm, head_hats, head_norms
    )
    return logits, cache


def backward(model: MultiExpertModel, cache: ForwardCache, dlogits) -> dict:
    """Gradients of the loss for every parameter, given dLoss/dlogits per expert."""
    if cache.model_id != id(model) or cache.version != model.version:
        raise StaleCacheError("forward cache does not belong to the current model state")
    if len(dlogits) != model.num_experts:
        raise ShapeError("need one upstream gradient per expert")
    grads = {}
    d_feat_hat = np.zeros_like(cache.feat_hat)
    for mu, g in enumerate(dlogits):
        g = np.asarray(g, dtype=np.float64)
        w_hat = cache.head_hats[mu]
        d_feat_hat += model.scale * (g @ w_hat)
        d_w_hat = model.scale * (g.T @ cache.feat_hat)
        grads[f"head.{mu}.weight"] = l2_normalize_backward(d_w_hat, w_hat, cache.head_norms[mu])
    d_features = l2_normalize_backward(d_feat_hat, cache.feat_hat, cache.feat_norm)
    grads.update(backbone_backward(model, cache, d_features))
    return {name: grads[name] for name in model.parameters()}


def backbone_backward(model: MultiExpertModel, cache: ForwardCache, d_features) -> dict:
    """Backbone parameter gradients given dLoss/d(unnormalized features)."""
    grads = {}
    da = np.asarray(d_features, dtype=np.float64)
    last = len(model.weights) - 1
    for i in range(last, -1, -1):
        dz = da if i == last else da * (cache.preacts[i] > 0)
        grads[f"backbone.{i}.weight"] = cache.inputs[i].T @ dz
        grads[f"backbone.{i}.bias"] = dz.sum(axis=0)
        if i:
            da = dz @ model.weights[i].T
    return grads


def features(cache: ForwardCache) -> np.ndarray:
    """Unnormalized backbone output recorded in a forward cache."""
    return cache.preacts[-1]


@dataclass
class SgdState:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    schedule: str = "linear"
    total_epochs: int = 1
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.schedule not in ("linear", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def lr_at(state: SgdState, epoch) -> float:
    if not 0 <= epoch < state.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {state.total_epochs})")
    frac = epoch / state.total_epochs
    if state.schedule == "linear":
        return state.lr0 * (1.0 - frac)
    return state.lr0 * 0.5 * (1.0 + math.cos(math.pi * frac))


def sgd_step(params: dict, grads: dict, state: SgdState, epoch) -> dict:
    """One momentum-SGD update; momentum buffers in ``state`` are updated in place."""
    lr = lr_at(state, epoch)
    m, wd = state.momentum, state.weight_decay
    updated = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter {p.shape}")
        d = g + wd * p
        v = state.buffers.get(name)
        v = d.copy() if v is None else m * v + d
        state.buffers[name] = v
        step = d + m * v if state.nesterov else v
        updated[name] = p - lr * step
    return updated


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple
    tolerance: float
    analytic: dict
    numeric: dict

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    loss_fn: Callable, params, h: float = 1e-3, tolerance: float = 1e-4
) -> GradCheckReport:
    """Compare ``loss_fn``'s analytic gradient with central differences.

    ``loss_fn(params) -> (loss, grads)`` where ``params`` is a dict of arrays
    (a bare array is wrapped as ``{"p": array}``). Relative error per
    component is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    bare = not isinstance(params, dict)
    point = {"p": np.array(params, dtype=np.float64)} if bare else {
        k: np.array(v, dtype=np.float64) for k, v in params.items()
    }

    def call(p):
        loss, grads = loss_fn(p["p"] if bare else p)
        loss = float(loss)
        if not math.isfinite(loss):
            raise NumericError(f"loss is not finite: {loss}")
        return loss, ({"p": grads} if bare else grads)

    _, analytic = call(point)
    analytic = {k: np.asarray(v, dtype=np.float64).reshape(point[k].shape) for k, v in analytic.items()}
    numeric = {}
    worst, worst_err = None, 0.0
    for name, value in point.items():
        fd = np.empty_like(value)
        flat = value.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up, _ = call(point)
            flat[idx] = orig - h
            down, _ = call(point)
            flat[idx] = orig
            fd.reshape(-1)[idx] = (up - down) / (2.0 * h)
        numeric[name] = fd
        a = analytic[name]
        if not value.size:
            continue
        err = np.abs(a - fd) / np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-8)
        k = int(np.argmax(err))
        if worst is None or err.flat[k] > worst_err:
            worst_err = float(err.flat[k])
            worst = (name, tuple(int(i) for i in np.unravel_index(k, value.shape)))
    return GradCheckReport(worst_err, worst, tolerance, analytic, numeric)


def _fmt(values) -> str:
    return " ".join(format(float(v), ".17g") for v in np.asarray(values).reshape(-1))


def save_checkpoint(model: MultiExpertModel, path, state: SgdState | None = None, epochs_done=0):
    """Write the text checkpoint: header, meta records, then tensor records."""
    lines = [CKPT_HEADER]
    lines.append(f"meta M {model.num_experts}")
    lines.append(f"meta scale {format(model.scale, '.17g')}")
    lines.append(f"meta lambdas {_fmt(model.lambdas)}")
    lines.append(f"meta epochs_done {int(epochs_done)}")
    if state is not None:
        lines.append(
            "meta sgd "
            f"lr0={format(state.lr0, '.17g')} momentum={format(state.momentum, '.17g')} "
            f"weight_decay={format(state.weight_decay, '.17g')} nesterov={int(state.nesterov)} "
            f"schedule={state.schedule} total_epochs={state.total_epochs}"
        )
    tensors = dict(model.parameters())
    if state is not None:
        for name in model.parameters():
            if name in state.buffers:
                tensors[f"momentum.{name}"] = state.buffers[name]
    for name, value in tensors.items():
        lines.append(f"tensor {name} {' '.join(str(s) for s in value.shape)}")
        lines.append(_fmt(value))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, state_or_None, epochs_done)``."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != CKPT_HEADER:
        raise ValueError(f"{path}: not an {CKPT_HEADER} checkpoint")
    meta, tensors = {}, {}
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        if parts[0] == "meta":
            meta[parts[1]] = parts[2:]
            i += 1
        elif parts[0] == "tensor":
            name, shape = parts[1], tuple(int(s) for s in parts[2:])
            values = np.array([float(v) for v in lines[i + 1].split()], dtype=np.float64)
            if values.size != math.prod(shape):
                raise ValueError(f"{path}: tensor {name} expects {math.prod(shape)} values")
            tensors[name] = values.reshape(shape)
            i += 2
        else:
            raise ValueError(f"{path}: unexpected record {parts[0]!r} on line {i + 1}")
    M = int(meta["M"][0])
    n_layers = sum(1 for k in tensors if k.startswith("backbone.") and k.endswith(".weight"))
    model = MultiExpertModel(
        [tensors[f"backbone.{j}.weight"] for j in range(n_layers)],
        [tensors[f"backbone.{j}.bias"] for j in range(n_layers)],
        [tensors[f"head.{mu}.weight"] for mu in range(M)],
        [float(v) for v in meta["lambdas"]],
        float(meta["scale"][0]),
    )
    state = None
    if "sgd" in meta:
        kv = dict(item.split("=", 1) for item in meta["sgd"])
        state = SgdState(
            lr0=float(kv["lr0"]),
            momentum=float(kv["momentum"]),
            weight_decay=float(kv["weight_decay"]),
            nesterov=bool(int(kv["nesterov"])),
            schedule=kv["schedule"],
            total_epochs=int(kv["total_epochs"]),
        )
        for name in model.parameters():
            if f"momentum.{name}" in tensors:
                state.buffers[name] = tensors[f"momentum.{name}"]
    return model, state, int(meta.get("epochs_done", ["0"])[0])
