"""Config-driven training runs shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data import DescriptorDataset
from .network import (
    EpochMetrics,
    JointNetwork,
    NetworkParams,
    OptimizerState,
    cycle_size,
    init_joint,
    init_params,
    joint_train_epoch,
    train,
)
from .numeric import ShapeError, derive_seed


@dataclass
class JointHistory:
    a: list[EpochMetrics]
    b: list[EpochMetrics]


def _check_dims(cfg: RunConfig, ds: DescriptorDataset, which: str = "data") -> None:
    m = cfg.model
    if m.D_in is not None and m.D_in != ds.D:
        raise ShapeError(f"{which}: descriptor dim {ds.D} != model.D_in {m.D_in}")
    if m.n_classes is not None and m.n_classes != ds.n_classes and which == "data":
        raise ShapeError(f"{which}: {ds.n_classes} classes != model.n_classes {m.n_classes}")


def make_state(cfg: RunConfig) -> OptimizerState:
    o = cfg.optim
    frozen = {"C", "s"} if cfg.model.head == "avg" else set()
    return OptimizerState(learning_rate=o.lr, momentum=o.momentum, weight_decay=o.weight_decay,
                          lr_milestones=list(o.lr_milestones), decay_smoothing=o.decay_smoothing,
                          frozen=frozen)


def _apply_head(cfg: RunConfig, C: np.ndarray, s: np.ndarray) -> None:
    if cfg.model.head == "avg":
        C[...] = 0.0
    if cfg.model.smoothing_init is not None:
        s[...] = float(cfg.model.smoothing_init)


def _K(cfg: RunConfig) -> int:
    return 1 if cfg.model.head == "avg" else cfg.model.K


def build_model(cfg: RunConfig, ds: DescriptorDataset) -> NetworkParams:
    _check_dims(cfg, ds)
    params = init_params(ds.D, cfg.model.D_proj, _K(cfg), ds.n_classes, cfg.seed, cfg.normalize)
    _apply_head(cfg, params.C, params.s)
    return params


def train_single(cfg: RunConfig, ds: DescriptorDataset, log=None) -> tuple[NetworkParams, list[EpochMetrics]]:
    params = build_model(cfg, ds)
    state = make_state(cfg)
    history = train(params, ds, state, cfg.schedule.epochs, cfg.seed, cfg.optim.batch,
                    cfg.schedule.size_cycle, log)
    return params, history


def train_joint(cfg: RunConfig, ds_a: DescriptorDataset, ds_b: DescriptorDataset,
                log=None) -> tuple[JointNetwork, JointHistory]:
    """Shared projection, one head per dataset, summed weighted losses."""
    _check_dims(cfg, ds_a)
    _check_dims(cfg, ds_b, "data2")
    if ds_a.D != ds_b.D:
        raise ShapeError(f"joint datasets differ in descriptor dim: {ds_a.D} vs {ds_b.D}")
    joint = init_joint(ds_a.D, cfg.model.D_proj, _K(cfg), (ds_a.n_classes, ds_b.n_classes),
                       cfg.seed, cfg.normalize)
    for h in joint.heads:
        _apply_head(cfg, h["C"], h["s"])
    state = make_state(cfg)
    hist = JointHistory([], [])
    weights = tuple(cfg.joint.loss_weights)
    for epoch in range(cfg.schedule.epochs):
        n_desc = (cycle_size(cfg.schedule.size_cycle, epoch), cycle_size(cfg.joint.size_cycle2, epoch))
        ma, mb = joint_train_epoch(joint, ds_a, ds_b, state, derive_seed(cfg.seed, "epoch", epoch),
                                   cfg.optim.batch, n_desc, weights, state.lr_at(epoch))
        hist.a.append(ma)
        hist.b.append(mb)
        if log is not None:
            log(epoch, ma, mb)
    return joint, hist
