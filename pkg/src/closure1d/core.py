"""Grids, history functions and dense-output trajectory storage.

Fields are stored as arrays of shape (n_states, n_nodes). The trajectory
store keeps every accepted integrator step together with its time
derivative, so queries between knots use cubic Hermite interpolation and
reproduce stored knots exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Grid1D",
    "make_grid",
    "ConstantHistory",
    "InterpolantHistory",
    "TrajectoryStore",
    "write_fields_csv",
    "read_fields_csv",
]

_BC_KINDS = ("periodic", "dirichlet")


@dataclass(frozen=True)
class Grid1D:
    """Uniform 1D grid with a boundary-condition kind.

    Periodic grids exclude the duplicate right endpoint, so
    h = (x_max - x_min) / n_nodes; Dirichlet grids include both endpoints,
    h = (x_max - x_min) / (n_nodes - 1).
    """

    x_min: float
    x_max: float
    n_nodes: int
    bc: str

    @property
    def h(self) -> float:
        if self.bc == "periodic":
            return (self.x_max - self.x_min) / self.n_nodes
        return (self.x_max - self.x_min) / (self.n_nodes - 1)

    @property
    def x(self) -> np.ndarray:
        return self.x_min + self.h * np.arange(self.n_nodes)


def make_grid(x_min: float, x_max: float, n: int, bc: str) -> Grid1D:
    if bc not in _BC_KINDS:
        raise ValueError(f"unknown bc kind {bc!r}, expected one of {_BC_KINDS}")
    if x_max <= x_min:
        raise ValueError(f"degenerate interval [{x_min}, {x_max}]")
    if n < 5:
        raise ValueError(f"need at least 5 nodes for the widest stencil, got {n}")
    return Grid1D(float(x_min), float(x_max), int(n), bc)


class ConstantHistory:
    """History that extends a single field backward in time unchanged."""

    kind = "constant"

    def __init__(self, u0: np.ndarray, t_end: float = 0.0):
        self.u0 = np.array(u0, dtype=float)
        self.t_end = float(t_end)

    def __call__(self, t: float) -> np.ndarray:
        return self.u0.copy()

    def derivative(self, t: float) -> np.ndarray:
        return np.zeros_like(self.u0)


class InterpolantHistory:
    """History backed by data snapshots, linearly interpolated in time.

    Used for short-sequence training where the window starts mid-trajectory
    and the only information on [t_start - tau, t_start] is data.
    """

    kind = "data"

    def __init__(self, times: np.ndarray, snapshots: np.ndarray, t_end: float):
        times = np.asarray(times, dtype=float)
        if times.ndim != 1 or len(times) < 1:
            raise ValueError("need at least one snapshot time")
        if np.any(np.diff(times) <= 0):
            raise ValueError("snapshot times must be strictly increasing")
        self.times = times
        self.snapshots = np.asarray(snapshots, dtype=float)
        self.t_end = float(t_end)

    def __call__(self, t: float) -> np.ndarray:
        ts = self.times
        if t <= ts[0]:
            return self.snapshots[0].copy()
        if t >= ts[-1]:
            return self.snapshots[-1].copy()
        j = int(np.searchsorted(ts, t, side="right")) - 1
        if ts[j] == t:
            return self.snapshots[j].copy()
        w = (t - ts[j]) / (ts[j + 1] - ts[j])
        return (1.0 - w) * self.snapshots[j] + w * self.snapshots[j + 1]

    def derivative(self, t: float) -> np.ndarray:
        ts = self.times
        if t <= ts[0] or t >= ts[-1] or len(ts) < 2:
            return np.zeros_like(self.snapshots[0])
        j = int(np.searchsorted(ts, t, side="right")) - 1
        return (self.snapshots[j + 1] - self.snapshots[j]) / (ts[j + 1] - ts[j])


def _hermite(t, t0, t1, y0, y1, d0, d1):
    """Cubic Hermite value on [t0, t1] from endpoint values and slopes."""
    dt = t1 - t0
    s = (t - t0) / dt
    s2 = s * s
    s3 = s2 * s
    h00 = 2.0 * s3 - 3.0 * s2 + 1.0
    h10 = s3 - 2.0 * s2 + s
    h01 = -2.0 * s3 + 3.0 * s2
    h11 = s3 - s2
    return h00 * y0 + h10 * dt * d0 + h01 * y1 + h11 * dt * d1


class TrajectoryStore:
    """Time-ordered dense-output record of a field solution.

    Queryable anywhere in [t0 - tau, t_last]; times before the first knot
    delegate to the history function. Exact at knots, C1 piecewise cubic
    Hermite in between.
    """

    def __init__(self, history=None, tau: float = 0.0):
        self.history = history
        self.tau = float(tau)
        self.times: list[float] = []
        self.values: list[np.ndarray] = []
        self.derivs: list[np.ndarray] = []

    @property
    def t0(self) -> float:
        return self.times[0]

    @property
    def t_last(self) -> float:
        return self.times[-1]

    def append_knot(self, t: float, u: np.ndarray, du: np.ndarray) -> None:
        if self.times and t <= self.times[-1]:
            raise ValueError(
                f"knot time {t} not after last stored time {self.times[-1]}"
            )
        self.times.append(float(t))
        self.values.append(np.array(u, dtype=float))
        self.derivs.append(np.array(du, dtype=float))

    def query(self, t: float) -> np.ndarray:
        if not self.times:
            raise ValueError("empty trajectory store")
        ts = self.times
        if t < ts[0]:
            if self.history is None or t < ts[0] - self.tau - 1e-12:
                raise ValueError(f"query time {t} below covered interval")
            return self.history(t)
        if t > ts[-1]:
            if t > ts[-1] + 1e-9 * max(1.0, abs(t)):
                raise ValueError(f"query time {t} above covered interval {ts[-1]}")
            return self.values[-1].copy()
        j = int(np.searchsorted(ts, t, side="left"))
        if j < len(ts) and ts[j] == t:
            return self.values[j].copy()
        j -= 1
        return _hermite(
            t, ts[j], ts[j + 1],
            self.values[j], self.values[j + 1],
            self.derivs[j], self.derivs[j + 1],
        )


def write_fields_csv(path, times, grid: Grid1D, fields) -> None:
    """Write field snapshots as `t,x,state_0,...` rows, time block-ordered."""
    fields = [np.atleast_2d(np.asarray(f, dtype=float)) for f in fields]
    n_states = fields[0].shape[0]
    x = grid.x
    with open(path, "w") as fh:
        header = "t,x," + ",".join(f"state_{s}" for s in range(n_states))
        fh.write(header + "\n")
        for t, f in zip(times, fields):
            for i in range(grid.n_nodes):
                vals = ",".join(repr(float(f[s, i])) for s in range(n_states))
                fh.write(f"{float(t)!r},{float(x[i])!r},{vals}\n")


def read_fields_csv(path):
    """Inverse of write_fields_csv: returns (times, x, list of fields)."""
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    tcol = raw[:, 0]
    # consecutive rows with equal t form one snapshot block
    boundaries = [0] + [i for i in range(1, len(tcol)) if tcol[i] != tcol[i - 1]]
    boundaries.append(len(tcol))
    times, fields = [], []
    x = None
    for b0, b1 in zip(boundaries[:-1], boundaries[1:]):
        block = raw[b0:b1]
        times.append(block[0, 0])
        if x is None:
            x = block[:, 1]
        fields.append(block[:, 2:].T.copy())
    return np.array(times), x, fields
