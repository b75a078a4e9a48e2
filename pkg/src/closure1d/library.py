"""Candidate-term function library bridging nets and the backward solver.

Each term maps local data (u, ux, uxx, uxxx, x, t) to a nodewise feature
and carries closed-form partials with respect to u and each spatial
derivative. For multi-state fields the library is applied per state and
the features concatenated state-major, so the feature count seen by a net
is n_states * n_terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .stencil import spatial_derivative

__all__ = ["FeatureLibrary", "TERM_NAMES"]

# slot order for partials: (u, ux, uxx, uxxx)
_ZERO = None  # marker for identically-zero partials


@dataclass(frozen=True)
class _Term:
    name: str
    value: callable
    partials: tuple  # length 4, callables or None


def _terms():
    t = {}

    def add(name, value, partials):
        t[name] = _Term(name, value, partials)

    one = lambda u, ux, uxx, uxxx, x, tt: np.ones_like(u)
    add("u", lambda u, ux, uxx, uxxx, x, tt: u, (one, _ZERO, _ZERO, _ZERO))
    add("u2", lambda u, ux, uxx, uxxx, x, tt: u * u,
        (lambda u, ux, uxx, uxxx, x, tt: 2.0 * u, _ZERO, _ZERO, _ZERO))
    add("ux", lambda u, ux, uxx, uxxx, x, tt: ux, (_ZERO, one, _ZERO, _ZERO))
    add("u_ux", lambda u, ux, uxx, uxxx, x, tt: u * ux,
        (lambda u, ux, uxx, uxxx, x, tt: ux,
         lambda u, ux, uxx, uxxx, x, tt: u, _ZERO, _ZERO))
    add("uxx", lambda u, ux, uxx, uxxx, x, tt: uxx, (_ZERO, _ZERO, one, _ZERO))
    add("uxxx", lambda u, ux, uxx, uxxx, x, tt: uxxx, (_ZERO, _ZERO, _ZERO, one))
    add("u_uxx", lambda u, ux, uxx, uxxx, x, tt: u * uxx,
        (lambda u, ux, uxx, uxxx, x, tt: uxx, _ZERO,
         lambda u, ux, uxx, uxxx, x, tt: u, _ZERO))
    add("x", lambda u, ux, uxx, uxxx, x, tt: x * np.ones_like(u),
        (_ZERO, _ZERO, _ZERO, _ZERO))
    add("t", lambda u, ux, uxx, uxxx, x, tt: tt * np.ones_like(u),
        (_ZERO, _ZERO, _ZERO, _ZERO))
    add("one", lambda u, ux, uxx, uxxx, x, tt: np.ones_like(u),
        (_ZERO, _ZERO, _ZERO, _ZERO))
    return t


TERMS = _terms()
TERM_NAMES = tuple(TERMS)


class FeatureLibrary:
    """Ordered candidate-term list evaluated nodewise per state."""

    def __init__(self, term_names):
        unknown = [n for n in term_names if n not in TERMS]
        if unknown:
            raise ValueError(f"unknown term names {unknown}; valid: {TERM_NAMES}")
        self.term_names = tuple(term_names)
        self.terms = [TERMS[n] for n in term_names]

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    def n_features(self, n_states: int) -> int:
        return n_states * self.n_terms

    def _derivatives(self, u, grid):
        return (
            spatial_derivative(u, 1, grid),
            spatial_derivative(u, 2, grid),
            spatial_derivative(u, 3, grid),
        )

    def eval_features(self, u: np.ndarray, grid, t: float) -> np.ndarray:
        """Feature matrix of shape (n_states * n_terms, n_nodes)."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        d1, d2, d3 = self._derivatives(u, grid)
        x = grid.x
        rows = []
        for s in range(u.shape[0]):
            for term in self.terms:
                rows.append(term.value(u[s], d1[s], d2[s], d3[s], x, t))
        return np.array(rows)

    def feature_partials(self, u: np.ndarray, grid, t: float = 0.0):
        """Partials tensor (n_features, 4, n_nodes) with slot order
        (u, ux, uxx, uxxx), plus the owning state of each feature."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        n_states, n = u.shape
        d1, d2, d3 = self._derivatives(u, grid)
        x = grid.x
        out = np.zeros((n_states * self.n_terms, 4, n))
        owners = np.zeros(n_states * self.n_terms, dtype=int)
        i = 0
        for s in range(n_states):
            for term in self.terms:
                owners[i] = s
                for slot, p in enumerate(term.partials):
                    if p is not None:
                        out[i, slot] = p(u[s], d1[s], d2[s], d3[s], x, t)
                i += 1
        return out, owners
