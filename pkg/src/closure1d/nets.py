"""Bias-free dense networks with hand-rolled reverse-mode VJPs.

Supports linear and swish activations, optional output scaling by the
absolute value of a designated input component, tied-row constraints on
the last layer, and permanent magnitude pruning masks. Inputs are
processed column-wise, so a whole grid's worth of feature vectors goes
through in one call.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DenseNet",
    "ConstraintSpec",
    "swish",
    "swish_prime",
    "net_forward",
    "vjp_input",
    "vjp_params",
    "apply_constraints",
    "project_constraint_grads",
    "prune",
    "trainable_weight_count",
    "get_free_params",
    "set_free_params",
    "fold_grads",
    "net_to_doc",
    "net_from_doc",
    "save_net",
    "load_net",
]

_ACTS = ("linear", "swish")


def swish(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s


def swish_prime(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s + z * s * (1.0 - s)


@dataclass
class ConstraintSpec:
    """Tied rows of the last layer's weight matrix.

    derived maps a row index to a linear combination {free_row: coeff};
    an empty combination pins the row at zero. Free rows are every row
    not listed in derived.
    """

    derived: dict[int, dict[int, float]]

    def free_rows(self, n_rows: int) -> list[int]:
        return [r for r in range(n_rows) if r not in self.derived]

    def validate(self, n_rows: int) -> None:
        free = set(self.free_rows(n_rows))
        for row, combo in self.derived.items():
            if not 0 <= row < n_rows:
                raise ValueError(f"derived row {row} out of range")
            for src in combo:
                if src not in free:
                    raise ValueError(
                        f"derived row {row} references non-free row {src}"
                    )


@dataclass
class DenseNet:
    weights: list[np.ndarray]
    activations: list[str]
    masks: list[np.ndarray] = field(default_factory=list)  # True = pruned
    constraint: ConstraintSpec | None = None
    output_scale_index: int | None = None  # |input[idx]| multiplies the output

    def __post_init__(self):
        self.weights = [np.array(w, dtype=float) for w in self.weights]
        if len(self.weights) != len(self.activations):
            raise ValueError("one activation tag per layer required")
        for act in self.activations:
            if act not in _ACTS:
                raise ValueError(f"unknown activation {act!r}")
        for wa, wb in zip(self.weights[:-1], self.weights[1:]):
            if wb.shape[1] != wa.shape[0]:
                raise ValueError(
                    f"layer dimension mismatch: {wa.shape} -> {wb.shape}"
                )
        if not self.masks:
            self.masks = [np.zeros_like(w, dtype=bool) for w in self.weights]
        if self.constraint is not None:
            self.constraint.validate(self.weights[-1].shape[0])

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "DenseNet":
        return DenseNet(
            [w.copy() for w in self.weights],
            list(self.activations),
            [m.copy() for m in self.masks],
            self.constraint,
            self.output_scale_index,
        )


def _forward_cache(net: DenseNet, x: np.ndarray):
    """Forward pass keeping pre-activations; x has shape (in_dim, batch)."""
    zs = []  # pre-activations per layer
    a = x
    acts = [a]
    for w, act in zip(net.weights, net.activations):
        z = w @ a
        zs.append(z)
        a = swish(z) if act == "swish" else z
        acts.append(a)
    return zs, acts


def net_forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    if x.shape[0] != net.in_dim:
        raise ValueError(f"input dim {x.shape[0]} != net in_dim {net.in_dim}")
    _, acts = _forward_cache(net, x)
    out = acts[-1]
    if net.output_scale_index is not None:
        out = out * np.abs(x[net.output_scale_index])
    return out[:, 0] if squeeze else out


def _backprop(net: DenseNet, x: np.ndarray, cot: np.ndarray,
              want_input: bool, want_params: bool):
    zs, acts = _forward_cache(net, x)
    raw_out = acts[-1]

    g_x_extra = None
    if net.output_scale_index is not None:
        idx = net.output_scale_index
        u = x[idx]
        # out = raw * |u|; subgradient of |u| at 0 taken as 0
        if want_input:
            g_x_extra = np.sum(cot * raw_out, axis=0) * np.sign(u)
        cot = cot * np.abs(u)

    grads = [None] * len(net.weights) if want_params else None
    delta = cot
    for li in range(len(net.weights) - 1, -1, -1):
        if net.activations[li] == "swish":
            delta = delta * swish_prime(zs[li])
        if want_params:
            g = delta @ acts[li].T
            g[net.masks[li]] = 0.0
            grads[li] = g
        delta = net.weights[li].T @ delta

    g_x = delta if want_input else None
    if want_input and g_x_extra is not None:
        g_x = g_x.copy()
        g_x[net.output_scale_index] += g_x_extra
    return g_x, grads


def vjp_input(net: DenseNet, x: np.ndarray, cot: np.ndarray) -> np.ndarray:
    """cotangent^T d(output)/d(input), shapes (out, batch) -> (in, batch)."""
    x = np.asarray(x, dtype=float)
    cot = np.asarray(cot, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x, cot = x[:, None], cot[:, None]
    if cot.shape[0] != net.out_dim:
        raise ValueError(f"cotangent dim {cot.shape[0]} != out_dim {net.out_dim}")
    g_x, _ = _backprop(net, x, cot, want_input=True, want_params=False)
    return g_x[:, 0] if squeeze else g_x


def vjp_params(net: DenseNet, x: np.ndarray, cot: np.ndarray) -> list[np.ndarray]:
    """Per-weight cotangents, summed over the batch; masked entries get zero."""
    x = np.asarray(x, dtype=float)
    cot = np.asarray(cot, dtype=float)
    if x.ndim == 1:
        x, cot = x[:, None], cot[:, None]
    if cot.shape[0] != net.out_dim:
        raise ValueError(f"cotangent dim {cot.shape[0]} != out_dim {net.out_dim}")
    _, grads = _backprop(net, x, cot, want_input=False, want_params=True)
    return grads


def apply_constraints(net: DenseNet) -> None:
    """Overwrite derived rows of the last layer from their free rows."""
    if net.constraint is None:
        return
    w = net.weights[-1]
    for row, combo in net.constraint.derived.items():
        w[row] = 0.0
        for src, coeff in combo.items():
            w[row] += coeff * w[src]


def project_constraint_grads(spec: ConstraintSpec, grad: np.ndarray) -> np.ndarray:
    """Fold derived-row gradients into free rows (chain rule through the
    tying map); derived rows are zeroed in the result."""
    g = np.array(grad, dtype=float)
    for row, combo in spec.derived.items():
        for src, coeff in combo.items():
            g[src] += coeff * g[row]
        g[row] = 0.0
    return g


def prune(net: DenseNet, threshold: float) -> int:
    """Zero and permanently mask weights below threshold in magnitude.

    Derived rows of a constrained last layer are never masked directly;
    they follow their free rows. Returns the number of newly masked weights.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    if threshold == 0:
        return 0
    newly = 0
    for li, (w, m) in enumerate(zip(net.weights, net.masks)):
        hit = (~m) & (np.abs(w) < threshold)
        if li == len(net.weights) - 1 and net.constraint is not None:
            for row in net.constraint.derived:
                hit[row] = False
        w[hit] = 0.0
        m |= hit
        newly += int(hit.sum())
    return newly


def trainable_weight_count(net: DenseNet) -> int:
    """Architecture-level trainable count: all weights minus derived rows."""
    total = sum(w.size for w in net.weights)
    if net.constraint is not None:
        in_dim = net.weights[-1].shape[1]
        total -= len(net.constraint.derived) * in_dim
    return total


def get_free_params(net: DenseNet) -> np.ndarray:
    """Flatten the free parameters (derived rows excluded) into one vector."""
    parts = []
    last = len(net.weights) - 1
    for li, w in enumerate(net.weights):
        if li == last and net.constraint is not None:
            rows = net.constraint.free_rows(w.shape[0])
            parts.append(w[rows].ravel())
        else:
            parts.append(w.ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def set_free_params(net: DenseNet, vec: np.ndarray) -> None:
    """Scatter a free-parameter vector back, re-derive tied rows, re-zero
    masked entries."""
    pos = 0
    last = len(net.weights) - 1
    for li, w in enumerate(net.weights):
        if li == last and net.constraint is not None:
            rows = net.constraint.free_rows(w.shape[0])
            n = len(rows) * w.shape[1]
            w[rows] = vec[pos : pos + n].reshape(len(rows), w.shape[1])
        else:
            n = w.size
            w[...] = vec[pos : pos + n].reshape(w.shape)
        pos += n
    if pos != len(vec):
        raise ValueError("parameter vector length mismatch")
    for w, m in zip(net.weights, net.masks):
        w[m] = 0.0
    apply_constraints(net)


def fold_grads(net: DenseNet, grads: list[np.ndarray]) -> np.ndarray:
    """Full weight-shaped gradients -> flat free-parameter gradient,
    respecting tied rows and prune masks."""
    parts = []
    last = len(net.weights) - 1
    for li, g in enumerate(grads):
        g = np.where(net.masks[li], 0.0, g)
        if li == last and net.constraint is not None:
            g = project_constraint_grads(net.constraint, g)
            rows = net.constraint.free_rows(g.shape[0])
            parts.append(g[rows].ravel())
        else:
            parts.append(g.ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def net_to_doc(net: DenseNet) -> dict:
    """Self-describing dict; floats stored as hex for exact round trip."""
    return {
        "layers": [
            {
                "shape": list(w.shape),
                "activation": act,
                "weights": [v.hex() for v in w.ravel()],
                "mask": m.ravel().astype(int).tolist(),
            }
            for w, act, m in zip(net.weights, net.activations, net.masks)
        ],
        "output_scale_index": net.output_scale_index,
        "constraint": None
        if net.constraint is None
        else {
            str(row): {str(src): c for src, c in combo.items()}
            for row, combo in net.constraint.derived.items()
        },
    }


def net_from_doc(doc: dict) -> DenseNet:
    weights, acts, masks = [], [], []
    for layer in doc["layers"]:
        shape = tuple(layer["shape"])
        w = np.array([float.fromhex(v) for v in layer["weights"]]).reshape(shape)
        m = np.array(layer["mask"], dtype=bool).reshape(shape)
        weights.append(w)
        acts.append(layer["activation"])
        masks.append(m)
    constraint = None
    if doc.get("constraint") is not None:
        constraint = ConstraintSpec(
            {
                int(row): {int(src): float(c) for src, c in combo.items()}
                for row, combo in doc["constraint"].items()
            }
        )
    return DenseNet(weights, acts, masks, constraint, doc.get("output_scale_index"))


def save_net(net: DenseNet, path) -> None:
    with open(path, "w") as fh:
        json.dump(net_to_doc(net), fh, indent=1)


def load_net(path) -> DenseNet:
    with open(path) as fh:
        doc = json.load(fh)
    return net_from_doc(doc)
