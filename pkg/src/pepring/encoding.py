"""Lifting constraints to the control signals consumed by the denoiser.

Type constraints become one-hot rows on the constrained nodes (zero rows
elsewhere); distance constraints become radial-basis vectors attached to
exactly the constrained edges. Unconstrained edges are represented by
absence, not by a sentinel vector. Both encodings read indices, types
and scalar distances only, so they are invariant to any rigid motion of
the graph by construction, and distinct constraints map to distinct
signals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .constraints import ConstraintPair, DistanceConstraint, TypeConstraint
from .graph import N_TYPES


@dataclass(frozen=True)
class RbfSpec:
    """Evenly spaced Gaussian bumps over a distance range."""

    channels: int = 32
    d_min: float = 0.0
    d_max: float = 20.0
    gamma: float | None = None

    def __post_init__(self):
        if self.channels < 2:
            raise ValueError("need at least 2 RBF channels")
        if not self.d_max > self.d_min:
            raise ValueError("d_max must exceed d_min")
        if self.gamma is None:
            spacing = (self.d_max - self.d_min) / (self.channels - 1)
            object.__setattr__(self, "gamma", 1.0 / (2.0 * spacing * spacing))
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        centers = np.linspace(self.d_min, self.d_max, self.channels)
        centers.setflags(write=False)
        object.__setattr__(self, "_centers", centers)

    @property
    def centers(self) -> np.ndarray:
        return self._centers

    def lift(self, distance: float) -> tuple[np.ndarray, bool]:
        """RBF vector for one distance; clamps out-of-range values and flags it."""
        clamped = distance < self.d_min or distance > self.d_max
        d = min(max(distance, self.d_min), self.d_max)
        delta = d - self.centers
        return np.exp(-self.gamma * (delta * delta)), clamped


@dataclass(frozen=True)
class EdgeSignal:
    i: int
    j: int
    vec: np.ndarray
    clamped: bool = False


@dataclass(frozen=True)
class ControlSignals:
    """Denoiser-ready form of one constraint pair."""

    node_signal: np.ndarray  # [n, N_TYPES]
    edges: tuple[EdgeSignal, ...] = ()

    @property
    def n_nodes(self) -> int:
        return self.node_signal.shape[0]

    @property
    def any_clamped(self) -> bool:
        return any(e.clamped for e in self.edges)

    @property
    def is_unconditional(self) -> bool:
        return not self.edges and not self.node_signal.any()


def encode_type(c: TypeConstraint, n_nodes: int) -> np.ndarray:
    """One-hot row per constrained node, exact zero rows elsewhere."""
    signal = np.zeros((n_nodes, N_TYPES))
    for node, t in c.entries:
        if node >= n_nodes:
            raise ValueError(f"type constraint node {node} outside graph of {n_nodes}")
        signal[node, t] = 1.0
    return signal


def encode_distance(c: DistanceConstraint, spec: RbfSpec) -> tuple[EdgeSignal, ...]:
    out = []
    for i, j, d in c.entries:
        vec, clamped = spec.lift(d)
        out.append(EdgeSignal(i, j, vec, clamped))
    return tuple(out)


def encode_pair(pair: ConstraintPair, n_nodes: int, spec: RbfSpec) -> ControlSignals:
    """Joint signal; an empty side contributes its unconditional form."""
    for i, j, _ in pair.dists.entries:
        if j >= n_nodes:
            raise ValueError(f"distance constraint pair ({i},{j}) outside graph of {n_nodes}")
    return ControlSignals(
        node_signal=encode_type(pair.types, n_nodes),
        edges=encode_distance(pair.dists, spec),
    )


def unconditional(n_nodes: int) -> ControlSignals:
    """The signal fed to the no-constraint branch: zero rows, no edges."""
    return ControlSignals(node_signal=np.zeros((n_nodes, N_TYPES)), edges=())


def linf_distance(a: ControlSignals, b: ControlSignals) -> float:
    """Largest elementwise gap between two signals; absent edges count as zeros."""
    if a.node_signal.shape != b.node_signal.shape:
        raise ValueError("signals cover different node counts")
    gap = float(np.max(np.abs(a.node_signal - b.node_signal))) if a.node_signal.size else 0.0
    ea = {(e.i, e.j): e.vec for e in a.edges}
    eb = {(e.i, e.j): e.vec for e in b.edges}
    for key in set(ea) | set(eb):
        va = ea.get(key)
        vb = eb.get(key)
        if va is None:
            va = np.zeros_like(vb)
        if vb is None:
            vb = np.zeros_like(va)
        gap = max(gap, float(np.max(np.abs(va - vb))))
    return gap
