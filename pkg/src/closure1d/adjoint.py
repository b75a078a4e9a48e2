"""Backward-in-time solver for the coupled adjoint fields and gradient
assembly.

Two adjoint fields are integrated backward from zero terminal conditions:
lam receives jump injections at data times and drives the gradient of the
instantaneous closure weights; mu accumulates -lam and, together with its
advanced-time value, drives the gradient of the memory closure weights.
Spatial terms reuse the forward stencils, which on periodic grids makes
the discretized backward system the exact transpose of the linearized
forward one. Time integrals for the gradients use composite Simpson with
Hermite-interpolated midpoints so the quadrature error does not dominate
the RK4 error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import _hermite
from .forward import ClosureModel, ClosureTerm
from .nets import vjp_input, vjp_params
from .stencil import adjoint_divergence

__all__ = [
    "DataSet",
    "AdjointRecord",
    "loss_eval",
    "loss_jump",
    "adjoint_rhs",
    "integrate_adjoint",
    "grad_phi",
    "grad_theta",
]

_LOSS_KINDS = ("mse", "mae")


@dataclass
class DataSet:
    """Targets at discrete times and node subsets.

    targets[i] has shape (n_states, len(node_idx[i])).
    """

    times: np.ndarray
    node_idx: list
    targets: list
    loss_kind: str = "mse"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("data times must be strictly increasing")
        if self.loss_kind not in _LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {_LOSS_KINDS}")
        self.node_idx = [np.asarray(ix, dtype=int) for ix in self.node_idx]
        self.targets = [np.atleast_2d(np.asarray(d, dtype=float)) for d in self.targets]


def loss_eval(traj, data: DataSet) -> float:
    """Mean over data times of the per-time mean nodal error, summed over
    state components."""
    total = 0.0
    for t, ix, d in zip(data.times, data.node_idx, data.targets):
        u = np.atleast_2d(traj.query(t))[:, ix]
        r = u - d
        if data.loss_kind == "mse":
            total += np.sum(r * r) / len(ix)
        else:
            total += np.sum(np.abs(r)) / len(ix)
    return total / len(data.times)


def loss_jump(u_at_t: np.ndarray, data: DataSet, i: int) -> np.ndarray:
    """Nodal loss derivative injected into lam when the backward sweep
    crosses data time i."""
    u_at_t = np.atleast_2d(u_at_t)
    jump = np.zeros_like(u_at_t)
    ix = data.node_idx[i]
    r = u_at_t[:, ix] - data.targets[i]
    scale = 1.0 / (len(data.times) * len(ix))
    if data.loss_kind == "mse":
        jump[:, ix] = scale * 2.0 * r
    else:
        jump[:, ix] = scale * np.sign(r)
    return jump


def _cotangent_fields(term: ClosureTerm, u, grid, t, cot):
    """a[k] = cot^T d(term)/d(k-th spatial derivative of u), k = 0..3,
    each of shape (n_states, n_nodes)."""
    n_states, n = u.shape
    feats = term.lib.eval_features(u, grid, t)
    g = vjp_input(term.net, feats, cot)  # (n_features, n)
    partials, _ = term.lib.feature_partials(u, grid, t)
    n_terms = term.lib.n_terms
    g_r = g.reshape(n_states, n_terms, n)
    p_r = partials.reshape(n_states, n_terms, 4, n)
    return np.einsum("sjn,sjkn->ksn", g_r, p_r)


def _divergence_sum(a, grid):
    """-a0 + d_x(a1) - d_xx(a2) + d_xxx(a3), the alternating-sign stack of
    product-field derivatives from the backward equations."""
    out = -a[0]
    out += adjoint_divergence(a[1], 1, grid)
    out -= adjoint_divergence(a[2], 2, grid)
    out += adjoint_divergence(a[3], 3, grid)
    return out


def adjoint_rhs(t, lam, mu, mu_adv, traj, model: ClosureModel, grid):
    """(d lam/dt, d mu/dt) away from data times."""
    u = np.atleast_2d(traj.query(t))
    dlam = np.zeros_like(lam)
    for term in (model.base, model.markovian):
        if term is not None:
            dlam += _divergence_sum(_cotangent_fields(term, u, grid, t, lam), grid)
    if model.nonmarkovian is not None:
        w = mu - mu_adv
        dlam += _divergence_sum(
            _cotangent_fields(model.nonmarkovian, u, grid, t, w), grid
        )
    dmu = -lam
    if grid.bc == "dirichlet":
        dlam[:, 0] = dlam[:, -1] = 0.0
        dmu = dmu.copy()
        dmu[:, 0] = dmu[:, -1] = 0.0
    return dlam, dmu


@dataclass
class AdjointRecord:
    """Backward solution on the forward step grid.

    lam has two-sided values at data times: lam_plus is the limit from
    above (pre-jump during the backward sweep), lam_minus from below,
    each stored with its time derivative for Hermite interpolation.
    mu is continuous; queries at or past the final time return zero.
    """

    t0: float
    dt: float
    times: np.ndarray
    lam_plus: np.ndarray   # (N+1, n_states, n)
    lam_minus: np.ndarray
    dlam_plus: np.ndarray
    dlam_minus: np.ndarray
    mu: np.ndarray

    def query_mu(self, t: float) -> np.ndarray:
        T = self.times[-1]
        if t >= T - 1e-12:
            return np.zeros_like(self.mu[0])
        j = int(np.floor((t - self.t0) / self.dt + 1e-9))
        tj = self.times[j]
        if abs(t - tj) < 1e-12:
            return self.mu[j].copy()
        # d mu/dt = -lam, taken from the side facing into the interval
        return _hermite(
            t, tj, self.times[j + 1],
            self.mu[j], self.mu[j + 1],
            -self.lam_plus[j], -self.lam_minus[j + 1],
        )

    def lam_mid(self, j: int) -> np.ndarray:
        """Hermite value of lam at the midpoint of panel [t_j, t_{j+1}]."""
        tm = 0.5 * (self.times[j] + self.times[j + 1])
        return _hermite(
            tm, self.times[j], self.times[j + 1],
            self.lam_plus[j], self.lam_minus[j + 1],
            self.dlam_plus[j], self.dlam_minus[j + 1],
        )

    def mu_mid(self, j: int) -> np.ndarray:
        tm = 0.5 * (self.times[j] + self.times[j + 1])
        return _hermite(
            tm, self.times[j], self.times[j + 1],
            self.mu[j], self.mu[j + 1],
            -self.lam_plus[j], -self.lam_minus[j + 1],
        )


def integrate_adjoint(traj, data: DataSet, model: ClosureModel, grid,
                      dt: float) -> AdjointRecord:
    """RK4 backward from the trajectory's final time to its start, applying
    lam jumps exactly at data times."""
    t0, T = traj.t0, traj.t_last
    n_steps = round((T - t0) / dt)
    if abs(t0 + n_steps * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise ValueError("dt not aligned with the trajectory interval")
    times = t0 + dt * np.arange(n_steps + 1)

    jump_at = {}
    for i, ti in enumerate(data.times):
        j = round((ti - t0) / dt)
        if not (0 <= j <= n_steps) or abs(times[j] - ti) > 1e-9 * max(1.0, abs(T)):
            raise ValueError(f"data time {ti} is not on the step grid")
        jump_at[j] = i

    shape = (model.n_states, grid.n_nodes)
    z = np.zeros((n_steps + 1,) + shape)
    rec = AdjointRecord(t0, dt, times, z.copy(), z.copy(), z.copy(), z.copy(),
                        z.copy())
    tau = model.tau

    def rhs(t, lam_s, mu_s):
        mu_adv = rec.query_mu(t + tau) if model.nonmarkovian is not None else None
        return adjoint_rhs(t, lam_s, mu_s, mu_adv, traj, model, grid)

    lam = np.zeros(shape)
    mu = np.zeros(shape)
    h = -dt
    for j in range(n_steps, -1, -1):
        t = times[j]
        rec.mu[j] = mu
        rec.lam_plus[j] = lam
        d_pre = rhs(t, lam, mu)
        rec.dlam_plus[j] = d_pre[0]
        i = jump_at.get(j)
        if i is not None:
            # backward crossing of a data time: the loss derivative leaves
            # with a minus sign so that grad_phi = -sum(lam * dF/dphi)
            # matches finite differences of the scalar loss
            lam = lam - loss_jump(traj.query(t), data, i)
            d_pre = rhs(t, lam, mu)
        rec.lam_minus[j] = lam
        rec.dlam_minus[j] = d_pre[0]
        if j == 0:
            break
        k1l, k1m = d_pre
        k2l, k2m = rhs(t + 0.5 * h, lam + 0.5 * h * k1l, mu + 0.5 * h * k1m)
        k3l, k3m = rhs(t + 0.5 * h, lam + 0.5 * h * k2l, mu + 0.5 * h * k2m)
        k4l, k4m = rhs(t + h, lam + h * k3l, mu + h * k3m)
        lam = lam + (h / 6.0) * (k1l + 2.0 * k2l + 2.0 * k3l + k4l)
        mu = mu + (h / 6.0) * (k1m + 2.0 * k2m + 2.0 * k3m + k4m)
        if grid.bc == "dirichlet":
            lam[:, 0] = lam[:, -1] = 0.0
            mu[:, 0] = mu[:, -1] = 0.0
    return rec


def _param_accumulate(term: ClosureTerm, feats, cot, acc):
    for g, a in zip(vjp_params(term.net, feats, cot), acc):
        a += g


def _simpson_time_sum(rec: AdjointRecord, emit):
    """Composite Simpson over the step grid.

    emit(t, weight, 'grid', j) is called for grid points with the combined
    endpoint weight; emit(t, weight, 'mid', j) for panel midpoints. The
    callee picks the correct one-sided adjoint values.
    """
    n = len(rec.times) - 1
    dt = rec.dt
    for j, t in enumerate(rec.times):
        emit(t, dt / 6.0, "grid", j)
    for j in range(n):
        tm = 0.5 * (rec.times[j] + rec.times[j + 1])
        emit(tm, 4.0 * dt / 6.0, "mid", j)


def grad_phi(traj, rec: AdjointRecord, model: ClosureModel, grid):
    """Gradient of the loss w.r.t. the instantaneous closure weights.

    Simpson in time, summed over nodes; at data times the lam value from
    the correct side of the jump weights each panel endpoint.
    """
    if model.markovian is None:
        raise ValueError("no Markovian term present")
    term = model.markovian
    n = len(rec.times) - 1
    acc = [np.zeros_like(w) for w in term.net.weights]

    def emit(t, w, kind, j):
        if kind == "grid":
            cot = np.zeros_like(rec.lam_plus[j])
            if j > 0:
                cot += w * rec.lam_minus[j]
            if j < n:
                cot += w * rec.lam_plus[j]
        else:
            cot = w * rec.lam_mid(j)
        u = np.atleast_2d(traj.query(t))
        _param_accumulate(term, term.lib.eval_features(u, grid, t), -cot, acc)

    _simpson_time_sum(rec, emit)
    return acc


def grad_theta(traj, rec: AdjointRecord, model: ClosureModel, history, grid):
    """Gradient of the loss w.r.t. the memory closure weights: the direct
    window, the delayed window, and the history-quadrature seed."""
    if model.nonmarkovian is None:
        raise ValueError("no non-Markovian term present")
    term = model.nonmarkovian
    tau = term.tau
    n = len(rec.times) - 1
    acc = [np.zeros_like(w) for w in term.net.weights]

    def emit(t, w, kind, j):
        if kind == "grid":
            # interior grid points belong to two panels, endpoints to one
            cot = (2.0 * w if 0 < j < n else w) * rec.mu[j]
        else:
            cot = w * rec.mu_mid(j)
        u_now = np.atleast_2d(traj.query(t))
        _param_accumulate(term, term.lib.eval_features(u_now, grid, t), -cot, acc)
        u_del = np.atleast_2d(traj.query(t - tau))
        _param_accumulate(
            term, term.lib.eval_features(u_del, grid, t - tau), cot, acc
        )

    _simpson_time_sum(rec, emit)

    # seed term: quadrature over the history window, cotangent mu at t0;
    # panels match the forward y(t0) seed so the two stay consistent
    m = max(8, math.ceil(tau / rec.dt))
    s = np.linspace(rec.t0 - tau, rec.t0, m + 1)
    wq = np.full(m + 1, tau / m)
    wq[0] *= 0.5
    wq[-1] *= 0.5
    mu0 = rec.mu[0]
    for sk, wk in zip(s, wq):
        hfield = np.atleast_2d(history(sk))
        _param_accumulate(
            term, term.lib.eval_features(hfield, grid, sk), -wk * mu0, acc
        )
    return acc
