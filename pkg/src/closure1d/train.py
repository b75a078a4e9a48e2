"""Training protocol: short time-sequence batching, RMSprop with
exponential LR decay, L1/L2 regularization, magnitude pruning, tied-row
re-projection, and multi-scenario round-robin.

All randomness flows through one seeded generator consumed on the serial
path, so a (config, seed) pair reproduces runs bitwise on one machine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adjoint import DataSet, grad_phi, grad_theta, integrate_adjoint, loss_eval
from .core import ConstantHistory, InterpolantHistory
from .forward import BlowUpError, ClosureModel, integrate_forward
from .nets import (
    apply_constraints,
    fold_grads,
    get_free_params,
    prune,
    set_free_params,
)

__all__ = [
    "TrainConfig",
    "TrainingScenario",
    "RMSprop",
    "iterations_per_epoch",
    "lr_at",
    "add_regularization",
    "sample_batch",
    "compute_batch_gradient",
    "train_run",
]


@dataclass
class TrainConfig:
    batch_time: int = 3          # steps per short sequence
    stride: int = 1              # data extraction stride within a sequence
    batch_size: int = 16
    epochs: int = 150
    iters_per_epoch: int | None = None  # None -> derived from the formula
    lr0: float = 0.075
    decay_rate: float = 0.97
    decay_steps: float = 4.0
    l1_factor: float = 0.0
    l2_factor: float = 0.0
    l1_factor_nonmark: float | None = None  # None -> same as l1_factor
    l2_factor_nonmark: float | None = None
    prune_threshold: float = 0.0
    prune_every: int = 1         # iterations between prune checks
    prune_start_epoch: int = 0
    loss_kind: str = "mse"
    seed: int = 0
    round_robin_block: int = 8
    skip_budget: int = 50        # tolerated blow-up batches before aborting

    def __post_init__(self):
        if self.batch_time < 2:
            raise ValueError("batch_time must be at least 2 steps")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        for name in ("batch_size", "epochs", "round_robin_block"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("lr0", "decay_rate", "decay_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainingScenario:
    """One (model, grid, data) unit participating in training.

    snapshots are full-field targets at every `data_every`-th step of the
    training window; validation snapshots (optional) cover the window right
    after it and are used for the per-epoch rollout metric.
    """

    name: str
    model: ClosureModel
    grid: object
    dt: float
    snap_times: np.ndarray          # strictly increasing, step-aligned
    snapshots: np.ndarray           # (n_snaps, n_states, n_nodes)
    val_times: np.ndarray | None = None
    val_snapshots: np.ndarray | None = None

    def __post_init__(self):
        self.snap_times = np.asarray(self.snap_times, dtype=float)
        self.snapshots = np.asarray(self.snapshots, dtype=float)
        if np.any(np.diff(self.snap_times) <= 0):
            raise ValueError("snapshot times must be strictly increasing")
        gap = (self.snap_times[1] - self.snap_times[0]) / self.dt
        if abs(gap - round(gap)) > 1e-6 or round(gap) < 1:
            raise ValueError(
                f"snapshot spacing {self.snap_times[1] - self.snap_times[0]} "
                f"is not a positive multiple of dt={self.dt}; stale dataset?"
            )

    @property
    def steps_per_snap(self) -> int:
        return round((self.snap_times[1] - self.snap_times[0]) / self.dt)


def iterations_per_epoch(n_steps: int, batch_size: int, batch_time: int) -> int:
    if min(n_steps, batch_size, batch_time) <= 0:
        raise ValueError("all inputs must be positive")
    return math.ceil(n_steps / (batch_size * batch_time) + 1)


def lr_at(iteration: int, lr0: float, decay_rate: float, decay_steps: float) -> float:
    return lr0 * decay_rate ** (iteration / decay_steps)


def add_regularization(grads: np.ndarray, params: np.ndarray,
                       l1_factor: float, l2_factor: float,
                       frozen: np.ndarray | None = None) -> np.ndarray:
    """Gradient of l1*|p| + l2*p^2 added in place; sign(0) = 0, so exactly
    pruned weights feel no L1 push. frozen marks pruned entries to skip."""
    reg = l1_factor * np.sign(params) + 2.0 * l2_factor * params
    if frozen is not None:
        reg[frozen] = 0.0
    grads += reg
    return grads


class RMSprop:
    """Second-moment-normalized gradient step on a flat parameter vector."""

    def __init__(self, n_params: int, rho: float = 0.9, eps: float = 1e-8):
        self.v = np.zeros(n_params)
        self.rho = rho
        self.eps = eps
        self.iteration = 0

    def step(self, params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
        self.v = self.rho * self.v + (1.0 - self.rho) * grads * grads
        self.iteration += 1
        return params - lr * grads / (np.sqrt(self.v) + self.eps)


@dataclass
class BatchMember:
    start_index: int   # snapshot index of the initial condition
    t_start: float
    u0: np.ndarray
    data: DataSet
    history: object


def sample_batch(scn: TrainingScenario, cfg: TrainConfig, rng) -> list[BatchMember]:
    """B short sequences: each starts at a random data snapshot and carries
    in-window targets at the configured stride."""
    tau = scn.model.tau
    dt = scn.dt
    sps = scn.steps_per_snap
    if cfg.batch_time % sps:
        raise ValueError("batch_time must be a multiple of the snapshot stride")
    span_snaps = cfg.batch_time // sps
    # earliest start must leave room for the history window in the data
    min_start = 0
    if scn.model.nonmarkovian is not None:
        min_start = math.ceil(tau / (sps * dt) - 1e-9)
    max_start = len(scn.snap_times) - 1 - span_snaps
    if max_start < min_start:
        raise ValueError("training window too short for the batch time")
    n_starts = max_start - min_start + 1
    take = min(cfg.batch_size, n_starts)
    starts = min_start + rng.choice(n_starts, size=take, replace=False)

    members = []
    for s0 in np.sort(starts):
        t_start = scn.snap_times[s0]
        u0 = scn.snapshots[s0]
        # target offsets: every stride-th snapshot after the start
        offs = list(range(cfg.stride, span_snaps + 1, cfg.stride))
        if not offs:
            offs = [span_snaps]
        times = scn.snap_times[s0 + np.array(offs)]
        n = scn.grid.n_nodes
        data = DataSet(
            times,
            [np.arange(n)] * len(offs),
            [scn.snapshots[s0 + o] for o in offs],
            cfg.loss_kind,
        )
        if scn.model.nonmarkovian is not None:
            lo = np.searchsorted(scn.snap_times, t_start - tau - 1e-12)
            history = InterpolantHistory(
                scn.snap_times[lo : s0 + 1], scn.snapshots[lo : s0 + 1], t_start
            )
        else:
            history = ConstantHistory(u0, t_start)
        members.append(BatchMember(s0, t_start, u0, data, history))
    return members


def _trainable_nets(model: ClosureModel):
    nets = []
    if model.markovian is not None and model.markovian.trainable:
        nets.append(model.markovian.net)
    if model.nonmarkovian is not None and model.nonmarkovian.trainable:
        nets.append(model.nonmarkovian.net)
    return nets


def get_model_params(model: ClosureModel) -> np.ndarray:
    parts = [get_free_params(net) for net in _trainable_nets(model)]
    return np.concatenate(parts) if parts else np.zeros(0)


def set_model_params(model: ClosureModel, vec: np.ndarray) -> None:
    pos = 0
    for net in _trainable_nets(model):
        n = len(get_free_params(net))
        set_free_params(net, vec[pos : pos + n])
        pos += n


def frozen_mask(model: ClosureModel) -> np.ndarray:
    """Flat boolean vector marking pruned free parameters."""
    parts = []
    for net in _trainable_nets(model):
        last = len(net.weights) - 1
        for li, m in enumerate(net.masks):
            if li == last and net.constraint is not None:
                rows = net.constraint.free_rows(m.shape[0])
                parts.append(m[rows].ravel())
            else:
                parts.append(m.ravel())
    return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)


def compute_batch_gradient(scn: TrainingScenario, members, cfg: TrainConfig):
    """Mean loss and mean flat gradient over batch members; members whose
    forward solve blows up are skipped and counted."""
    model = scn.model
    total_g = None
    total_loss = 0.0
    used = 0
    skipped = 0
    for m in members:
        t_end = m.t_start + cfg.batch_time * scn.dt
        hist = m.history
        if model.nonmarkovian is None and not isinstance(hist, ConstantHistory):
            hist = ConstantHistory(m.u0, m.t_start)
        try:
            traj, _ = integrate_forward(model, scn.grid, hist, m.t_start,
                                        t_end, scn.dt)
        except BlowUpError:
            skipped += 1
            continue
        total_loss += loss_eval(traj, m.data)
        rec = integrate_adjoint(traj, m.data, model, scn.grid, scn.dt)
        parts = []
        if model.markovian is not None and model.markovian.trainable:
            parts.append(fold_grads(
                model.markovian.net, grad_phi(traj, rec, model, scn.grid)))
        if model.nonmarkovian is not None and model.nonmarkovian.trainable:
            parts.append(fold_grads(
                model.nonmarkovian.net,
                grad_theta(traj, rec, model, hist, scn.grid)))
        g = np.concatenate(parts) if parts else np.zeros(0)
        total_g = g if total_g is None else total_g + g
        used += 1
    if used == 0:
        return None, 0.0, skipped
    return total_g / used, total_loss / used, skipped


def _regularize(model: ClosureModel, grads: np.ndarray, cfg: TrainConfig):
    """Apply the per-term L1/L2 factors on the matching slices of the flat
    gradient."""
    l1m, l2m = cfg.l1_factor, cfg.l2_factor
    l1d = cfg.l1_factor_nonmark if cfg.l1_factor_nonmark is not None else l1m
    l2d = cfg.l2_factor_nonmark if cfg.l2_factor_nonmark is not None else l2m
    pos = 0
    frozen = frozen_mask(model)
    nets = _trainable_nets(model)
    factors = []
    if model.markovian is not None and model.markovian.trainable:
        factors.append((l1m, l2m))
    if model.nonmarkovian is not None and model.nonmarkovian.trainable:
        factors.append((l1d, l2d))
    params = get_model_params(model)
    for net, (l1, l2) in zip(nets, factors):
        n = len(get_free_params(net))
        sl = slice(pos, pos + n)
        add_regularization(grads[sl], params[sl], l1, l2, frozen[sl])
        pos += n
    return grads


def validation_loss(scn: TrainingScenario, cfg: TrainConfig) -> float:
    """Continuous rollout across the validation window from its first
    snapshot; infinite on blow-up."""
    if scn.val_times is None or len(scn.val_times) < 2:
        return math.nan
    model = scn.model
    t0 = float(scn.val_times[0])
    T = float(scn.val_times[-1])
    if model.nonmarkovian is not None:
        all_t = np.concatenate([scn.snap_times, scn.val_times])
        all_u = np.concatenate([scn.snapshots, scn.val_snapshots])
        order = np.argsort(all_t)
        history = InterpolantHistory(all_t[order], all_u[order], t0)
    else:
        history = ConstantHistory(scn.val_snapshots[0], t0)
    try:
        traj, _ = integrate_forward(model, scn.grid, history, t0, T, scn.dt)
    except BlowUpError:
        return math.inf
    n = scn.grid.n_nodes
    data = DataSet(scn.val_times[1:], [np.arange(n)] * (len(scn.val_times) - 1),
                   list(scn.val_snapshots[1:]), cfg.loss_kind)
    return loss_eval(traj, data)


def train_run(scenarios, cfg: TrainConfig, callback=None):
    """Run the full protocol over one or more scenarios.

    Returns (history_rows, final_params). history_rows are dicts with keys
    epoch, iter, scenario, train_loss, val_loss, lr, n_pruned, n_skipped.
    """
    scenarios = list(scenarios)
    if not scenarios:
        raise ValueError("need at least one scenario")
    model = scenarios[0].model
    for s in scenarios[1:]:
        if s.model is not model:
            raise ValueError("scenarios must share one closure model")

    rng = np.random.default_rng(cfg.seed)
    params = get_model_params(model)
    opt = RMSprop(len(params))
    if cfg.iters_per_epoch is not None:
        ipe = cfg.iters_per_epoch
    else:
        n_steps = round(
            (scenarios[0].snap_times[-1] - scenarios[0].snap_times[0])
            / scenarios[0].dt
        )
        ipe = iterations_per_epoch(n_steps, cfg.batch_size, cfg.batch_time)

    rows = []
    it = 0
    total_skipped = 0
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        epoch_iters = 0
        for k in range(ipe):
            scn = scenarios[(it // cfg.round_robin_block) % len(scenarios)]
            members = sample_batch(scn, cfg, rng)
            grads, loss, skipped = compute_batch_gradient(scn, members, cfg)
            total_skipped += skipped
            if total_skipped > cfg.skip_budget:
                raise RuntimeError(
                    f"exceeded blow-up skip budget ({cfg.skip_budget})"
                )
            lr = lr_at(it, cfg.lr0, cfg.decay_rate, cfg.decay_steps)
            if grads is not None:
                grads = _regularize(model, grads, cfg)
                params = opt.step(params, grads, lr)
                set_model_params(model, params)
                epoch_loss += loss
                epoch_iters += 1
            it += 1
            if (cfg.prune_threshold > 0 and epoch >= cfg.prune_start_epoch
                    and it % cfg.prune_every == 0):
                for net in _trainable_nets(model):
                    prune(net, cfg.prune_threshold)
                    apply_constraints(net)
                params = get_model_params(model)
        train_loss = epoch_loss / max(epoch_iters, 1)
        n_pruned = int(frozen_mask(model).sum())
        for scn in scenarios:
            vloss = validation_loss(scn, cfg)
            rows.append({
                "epoch": epoch,
                "iter": it,
                "scenario": scn.name,
                "train_loss": train_loss,
                "val_loss": vloss,
                "lr": lr_at(it, cfg.lr0, cfg.decay_rate, cfg.decay_steps),
                "n_pruned": n_pruned,
                "n_skipped": total_skipped,
            })
        if callback is not None:
            callback(epoch, rows[-1])
    return rows, params
