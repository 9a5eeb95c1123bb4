"""Weighted cross-entropy, SGD with momentum, train/eval loops and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import data as D
from . import fctn
from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError, LabelError, NumericError
from .metrics import ConfusionMatrix, accuracy, averaged, mcc
from .model import FocalConvNet, ModelConfig, build
from .params import ParamStore
from .tensor import Tensor

log = logging.getLogger(__name__)

PARAM_PREFIX = "param."
VELOCITY_PREFIX = "optim.velocity."
META_KEY = "meta.json"

HISTORY_FIELDS = ["epoch", "loss", "acc", "weighted_f1", "mcc"]


def weighted_ce(logits: Tensor, labels, weights) -> Tensor:
    """``sum_n w[y_n] * -log softmax(logits_n)[y_n] / sum_n w[y_n]``."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"weighted_ce expects logits (N, K) and labels (N,), got {logits.shape} and {labels.shape}")
    k = logits.shape[1]
    if weights.shape != (k,):
        raise DimensionError(f"weighted_ce: {weights.shape[0] if weights.ndim else 0} weights for {k} classes")
    if ((labels < 0) | (labels >= k)).any():
        raise LabelError(f"labels outside [0, {k}): {labels[(labels < 0) | (labels >= k)][:5].tolist()}")
    if (weights <= 0).any():
        raise ConfigError("class weights must be positive")
    if not np.isfinite(logits.data).all():
        raise NumericError("weighted_ce received non-finite logits")
    w = weights[labels]
    picked = T.take_along(T.log_softmax(logits, axis=1), labels)
    return T.mul(T.tsum(T.mul(picked, w)), -1.0 / w.sum())


@dataclass
class OptimizerState:
    lr: float
    momentum: float
    velocity: dict[str, np.ndarray]
    weight_decay: float = 0.0

    @classmethod
    def create(cls, params: ParamStore, lr: float = 1e-3, momentum: float = 0.9, weight_decay: float = 0.0):
        return cls(lr, momentum, {k: np.zeros_like(t.data) for k, t in params.items()}, weight_decay)


def sgd_step(params: ParamStore, grads: Mapping[str, np.ndarray] | None, state: OptimizerState) -> ParamStore:
    """Classical momentum: ``v <- mu*v + g``; ``w <- w - lr*v``.

    ``grads=None`` reads each parameter's ``.grad`` (missing grads count as zero).
    """
    if list(state.velocity) != params.names():
        raise ConfigError("optimizer velocity does not mirror the parameter store")
    for name, t in params.items():
        g = grads.get(name) if grads is not None else t.grad
        g = np.zeros_like(t.data) if g is None else g
        if state.weight_decay:
            g = g + state.weight_decay * t.data
        v = state.velocity[name]
        v *= state.momentum
        v += g
        t.data = t.data - state.lr * v
    return params


# -- checkpoints -------------------------------------------------------------------
def save_checkpoint(
    params: ParamStore, optimizer_state: OptimizerState | None, path: str | os.PathLike, meta: dict | None = None
) -> None:
    entries: dict[str, np.ndarray] = {}
    for name, t in params.items():
        entries[PARAM_PREFIX + name] = t.data
    if optimizer_state is not None:
        entries["optim.lr"] = np.array(optimizer_state.lr, dtype=np.float64)
        entries["optim.momentum"] = np.array(optimizer_state.momentum, dtype=np.float64)
        entries["optim.weight_decay"] = np.array(optimizer_state.weight_decay, dtype=np.float64)
        for name, v in optimizer_state.velocity.items():
            entries[VELOCITY_PREFIX + name] = v
    if meta is not None:
        entries[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    tmp = Path(str(path) + ".tmp")
    fctn.save_container(tmp, entries)
    os.replace(tmp, path)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer_state: OptimizerState | None
    meta: dict = field(default_factory=dict)

    def num_param_scalars(self) -> int:
        return sum(a.size for a in self.params.values())


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        entries = fctn.load_container(path)
    except FileNotFoundError:
        raise FormatError(f"checkpoint not found: {path}") from None
    params = {k[len(PARAM_PREFIX) :]: v for k, v in entries.items() if k.startswith(PARAM_PREFIX)}
    state = None
    if "optim.lr" in entries:
        state = OptimizerState(
            lr=float(entries["optim.lr"]),
            momentum=float(entries["optim.momentum"]),
            velocity={k[len(VELOCITY_PREFIX) :]: v for k, v in entries.items() if k.startswith(VELOCITY_PREFIX)},
            weight_decay=float(entries.get("optim.weight_decay", 0.0)),
        )
    meta = json.loads(entries[META_KEY].tobytes().decode("utf-8")) if META_KEY in entries else {}
    return Checkpoint(params, state, meta)


def net_from_checkpoint(path: str | os.PathLike) -> tuple[FocalConvNet, Checkpoint]:
    ckpt = load_checkpoint(path)
    if "model_config" not in ckpt.meta:
        raise FormatError(f"{path}: checkpoint carries no model_config")
    net = build(ModelConfig.from_dict(ckpt.meta["model_config"]), seed=0)
    net.params.load_state_dict(ckpt.params)
    return net, ckpt


# -- evaluation / training ---------------------------------------------------------------
@dataclass
class TrainOptions:
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 8
    eval_batch_size: int = 16
    weight_decay: float = 0.0
    augment: bool = True
    weighted_loss: bool = True
    output_dir: str | None = None

    def validate(self) -> None:
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError(f"invalid optimizer settings lr={self.lr} momentum={self.momentum}")


@dataclass
class EvalResult:
    confusion: ConfusionMatrix
    loss: float

    def metrics(self) -> dict:
        return {
            "loss": self.loss,
            "acc": accuracy(self.confusion),
            "weighted_f1": averaged(self.confusion, "weighted")[2],
            "mcc": mcc(self.confusion),
        }


def evaluate(net: FocalConvNet, manifest: D.Manifest, weights=None, batch_size: int = 16) -> EvalResult:
    k = net.config.num_classes
    if manifest.num_classes != k:
        raise ConfigError(f"manifest has {manifest.num_classes} classes, model predicts {k}")
    weights = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    cm = ConfusionMatrix.empty(k, manifest.class_names)
    num = den = 0.0
    with T.no_grad():
        for batch in D.split_iter(manifest, batch_size, shuffle_seed=None, size=net.config.input_size):
            x, y = D.stack(batch)
            logits = net(Tensor(x))
            loss = weighted_ce(logits, y, weights).item()
            wsum = float(weights[y].sum())
            num += loss * wsum
            den += wsum
            cm.update(y, logits.data.argmax(axis=1))
    return EvalResult(cm, num / den if den else float("nan"))


@dataclass
class TrainResult:
    net: FocalConvNet
    history: list[dict]
    optimizer_state: OptimizerState
    best_checkpoint: str | None = None
    last_checkpoint: str | None = None


def train(
    config: ModelConfig,
    train_manifest: D.Manifest,
    val_manifest: D.Manifest | None = None,
    epochs: int = 1,
    seed: int = 0,
    options: TrainOptions | None = None,
) -> TrainResult:
    """Train from scratch with SGD + momentum on the weighted cross-entropy.

    Each history record holds the epoch's mean training loss and the
    validation metrics after that epoch; record 0 evaluates the initial model
    (its ``loss`` is the initial validation loss). The best-by-weighted-F1
    parameters are checkpointed when ``options.output_dir`` is set.
    """
    opts = options or TrainOptions()
    opts.validate()
    if epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {epochs}")
    if train_manifest.num_classes != config.num_classes:
        raise ConfigError(f"training manifest has {train_manifest.num_classes} classes, config expects {config.num_classes}")
    val_manifest = val_manifest if val_manifest is not None else train_manifest
    net = build(config, seed)
    weights = D.class_weights(train_manifest) if opts.weighted_loss else np.ones(config.num_classes)
    state = OptimizerState.create(net.params, opts.lr, opts.momentum, opts.weight_decay)
    out_dir = Path(opts.output_dir) if opts.output_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    history: list[dict] = []
    best_f1 = -math.inf
    best_path = last_path = None

    def record(epoch: int, train_loss: float | None) -> dict:
        nonlocal best_f1, best_path
        ev = evaluate(net, val_manifest, weights, opts.eval_batch_size)
        m = ev.metrics()
        rec = {
            "epoch": epoch,
            "loss": m["loss"] if train_loss is None else train_loss,
            "acc": m["acc"],
            "weighted_f1": m["weighted_f1"],
            "mcc": m["mcc"],
        }
        history.append(rec)
        log.info("epoch %d loss %.6f acc %.4f wF1 %.4f mcc %.4f", epoch, rec["loss"], rec["acc"], rec["weighted_f1"], rec["mcc"])
        if out_dir and rec["weighted_f1"] > best_f1:
            best_f1 = rec["weighted_f1"]
            best_path = str(out_dir / "best.fctn")
            save_checkpoint(net.params, state, best_path, _meta(config, opts, seed, epoch, m))
        return rec

    record(0, None)
    for epoch in range(1, epochs + 1):
        total = 0.0
        nb = 0
        batches = D.split_iter(
            train_manifest,
            opts.batch_size,
            shuffle_seed=seed,
            epoch=epoch,
            size=config.input_size,
            augment_seed=seed if opts.augment else None,
        )
        for bi, batch in enumerate(batches):
            x, y = D.stack(batch)
            net.params.zero_grad()
            loss = weighted_ce(net(Tensor(x)), y, weights)
            lv = loss.item()
            if not math.isfinite(lv):
                raise NumericError(f"non-finite loss {lv} at epoch {epoch}, batch {bi}")
            loss.backward()
            sgd_step(net.params, None, state)
            total += lv
            nb += 1
        record(epoch, total / max(nb, 1))

    if out_dir:
        last_path = str(out_dir / "last.fctn")
        save_checkpoint(net.params, state, last_path, _meta(config, opts, seed, epochs, history[-1]))
        write_history(history, out_dir / "history.csv", out_dir / "history.json")
    return TrainResult(net, history, state, best_path, last_path)


def _meta(config: ModelConfig, opts: TrainOptions, seed: int, epoch: int, metrics: dict) -> dict:
    return {
        "model_config": config.to_dict(),
        "seed": seed,
        "epoch": epoch,
        "eval_batch_size": opts.eval_batch_size,
        "metrics": {k: metrics[k] for k in ("loss", "acc", "weighted_f1", "mcc") if k in metrics},
    }


def write_history(history: list[dict], csv_path, json_path=None) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for rec in history:
            w.writerow({k: (repr(float(rec[k])) if k != "epoch" else rec[k]) for k in HISTORY_FIELDS})
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(history, fh, indent=2)
            fh.write("\n")
