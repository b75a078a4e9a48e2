"""Method-of-lines forward integrator for the closure-augmented model.

The model tendency is the sum of a fixed base term, an optional
instantaneous (Markovian) closure, and an optional memory closure carried
by the auxiliary state y in split form: dy/dt is the difference of the
memory net evaluated now and one delay ago, with y(0) seeded by a history
quadrature. Classical fixed-step RK4; every accepted step is appended to
a dense trajectory store together with its time derivative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import TrajectoryStore
from .library import FeatureLibrary
from .nets import DenseNet, net_forward

__all__ = [
    "ClosureTerm",
    "NonMarkovianTerm",
    "ClosureModel",
    "BlowUpError",
    "init_y0",
    "forward_rhs",
    "integrate_forward",
]


class BlowUpError(RuntimeError):
    def __init__(self, t: float):
        super().__init__(f"nonfinite state at t={t}")
        self.t = t


@dataclass
class ClosureTerm:
    lib: FeatureLibrary
    net: DenseNet
    trainable: bool = True

    def output(self, u: np.ndarray, grid, t: float) -> np.ndarray:
        feats = self.lib.eval_features(u, grid, t)
        return net_forward(self.net, feats)


@dataclass
class NonMarkovianTerm(ClosureTerm):
    tau: float = 0.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("delay tau must be positive")


@dataclass
class ClosureModel:
    n_states: int
    base: ClosureTerm | None = None
    markovian: ClosureTerm | None = None
    nonmarkovian: NonMarkovianTerm | None = None

    def __post_init__(self):
        for term in (self.base, self.markovian, self.nonmarkovian):
            if term is None or getattr(term, "net", None) is None:
                continue
            if term.net.in_dim != term.lib.n_features(self.n_states):
                raise ValueError(
                    f"net expects {term.net.in_dim} inputs but library yields "
                    f"{term.lib.n_features(self.n_states)} features"
                )
            if term.net.out_dim != self.n_states:
                raise ValueError(
                    f"net output dim {term.net.out_dim} != n_states {self.n_states}"
                )

    @property
    def tau(self) -> float:
        return self.nonmarkovian.tau if self.nonmarkovian else 0.0


def term_output(term, u: np.ndarray, grid, t: float) -> np.ndarray:
    return term.output(u, grid, t)


def init_y0(model: ClosureModel, history, grid, dt: float, t0: float = 0.0):
    """Seed the memory state by composite-trapezoid quadrature of the memory
    net over the trailing history window [t0 - tau, t0]."""
    if model.nonmarkovian is None:
        raise ValueError("no non-Markovian term present")
    tau = model.tau
    m = max(8, math.ceil(tau / dt))
    s = np.linspace(t0 - tau, t0, m + 1)
    w = np.full(m + 1, tau / m)
    w[0] *= 0.5
    w[-1] *= 0.5
    y0 = np.zeros((model.n_states, grid.n_nodes))
    for sk, wk in zip(s, w):
        y0 += wk * term_output(model.nonmarkovian, history(sk), grid, sk)
    return y0


def forward_rhs(t, u, y, model: ClosureModel, traj, grid):
    """(du/dt, dy/dt) at time t; delayed values come from the trajectory."""
    du = np.zeros_like(u)
    if model.base is not None:
        du += term_output(model.base, u, grid, t)
    if model.markovian is not None:
        du += term_output(model.markovian, u, grid, t)
    if model.nonmarkovian is None:
        return du, None
    du += y
    u_del = traj.query(t - model.tau)
    dy = term_output(model.nonmarkovian, u, grid, t) - term_output(
        model.nonmarkovian, u_del, grid, t - model.tau
    )
    return du, dy


def integrate_forward(model: ClosureModel, grid, history, t0: float, T: float,
                      dt: float):
    """Integrate with fixed-step RK4 on [t0, T].

    Returns (u_store, y_store); y_store is None without a memory term.
    Raises BlowUpError on the first nonfinite state.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    n_steps = round((T - t0) / dt)
    if n_steps < 0 or abs(t0 + n_steps * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise ValueError(f"dt={dt} does not divide the interval [{t0}, {T}]")
    tau = model.tau
    if model.nonmarkovian is not None:
        ratio = tau / dt
        if dt > tau + 1e-12 or abs(ratio - round(ratio)) > 1e-9:
            raise ValueError(
                f"method of steps requires dt <= tau and tau/dt integer "
                f"(dt={dt}, tau={tau})"
            )

    u = np.atleast_2d(np.asarray(history(t0), dtype=float))
    if u.shape != (model.n_states, grid.n_nodes):
        raise ValueError(
            f"history field shape {u.shape} != ({model.n_states}, {grid.n_nodes})"
        )
    u_store = TrajectoryStore(history, tau)
    y_store = None
    y = None
    if model.nonmarkovian is not None:
        y = init_y0(model, history, grid, dt, t0)
        y_store = TrajectoryStore(None, 0.0)

    du, dy = forward_rhs(t0, u, y, model, u_store_boot(u_store, t0, u), grid)
    u_store.append_knot(t0, u, du)
    if y_store is not None:
        y_store.append_knot(t0, y, dy)

    for step in range(n_steps):
        t = t0 + step * dt
        k1u, k1y = du, dy
        k2u, k2y = forward_rhs(t + 0.5 * dt, u + 0.5 * dt * k1u,
                               _madd(y, 0.5 * dt, k1y), model, u_store, grid)
        k3u, k3y = forward_rhs(t + 0.5 * dt, u + 0.5 * dt * k2u,
                               _madd(y, 0.5 * dt, k2y), model, u_store, grid)
        k4u, k4y = forward_rhs(t + dt, u + dt * k3u,
                               _madd(y, dt, k3y), model, u_store, grid)
        u = u + (dt / 6.0) * (k1u + 2.0 * k2u + 2.0 * k3u + k4u)
        if y is not None:
            y = y + (dt / 6.0) * (k1y + 2.0 * k2y + 2.0 * k3y + k4y)
        t_new = t0 + (step + 1) * dt
        if not np.all(np.isfinite(u)) or (y is not None and not np.all(np.isfinite(y))):
            raise BlowUpError(t_new)
        du, dy = forward_rhs(t_new, u, y, model, u_store, grid)
        u_store.append_knot(t_new, u, du)
        if y_store is not None:
            y_store.append_knot(t_new, y, dy)
    return u_store, y_store


def u_store_boot(store, t0, u):
    """Store view used for the very first RHS evaluation, before any knot
    exists: delayed queries at t0 - tau fall through to the history."""
    if store.times:
        return store

    class _Boot:
        def query(self, t):
            if store.history is not None and t <= t0 + 1e-12:
                return store.history(t)
            return u

    return _Boot()


def _madd(y, a, dy):
    return None if y is None else y + a * dy
