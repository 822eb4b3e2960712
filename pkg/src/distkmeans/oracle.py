"""Centralized k-means used as ground truth for the distributed protocol.

The distance and tie-breaking helpers here are also what every agent uses
to pick its centroid, so the two implementations cannot drift apart on
conventions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InputError


def weighted_sq_distance(x: np.ndarray, c: np.ndarray, norm_weights: Optional[np.ndarray] = None) -> np.ndarray:
    """``||A (x - c)||^2`` along the last axis, ``A = diag(norm_weights)``."""
    diff = np.asarray(x, dtype=float) - np.asarray(c, dtype=float)
    if norm_weights is not None:
        diff = diff * np.asarray(norm_weights, dtype=float)
    return np.sum(diff * diff, axis=-1)


def nearest(x: np.ndarray, centroids: np.ndarray, norm_weights: Optional[np.ndarray] = None) -> int:
    """0-based index of the nearest centroid; ties go to the smallest index."""
    dist = weighted_sq_distance(x[None, :], centroids, norm_weights)
    return int(np.argmin(dist))


def draw_centroid(rng: np.random.Generator, low: np.ndarray, high: np.ndarray) -> np.ndarray:
    """One uniform draw per component. Initial and repair draws both go through here."""
    return rng.uniform(low, high)


def draw_centroids(rng: np.random.Generator, k: int, low: np.ndarray, high: np.ndarray) -> np.ndarray:
    return np.array([draw_centroid(rng, low, high) for _ in range(k)])


@dataclass
class KMeansState:
    """Snapshot after one assignment + refinement step.

    ``labels`` are 1-based; ``empty`` flags clusters nobody chose, whose
    centroid was left untouched.
    """

    step: int
    centroids: np.ndarray
    labels: np.ndarray
    d: float
    empty: np.ndarray
    repaired: tuple[int, ...] = ()


def assign(x: np.ndarray, centroids: np.ndarray, norm_weights: Optional[np.ndarray] = None) -> np.ndarray:
    """1-based nearest-centroid label for each observation."""
    x = np.asarray(x, dtype=float)
    c = np.asarray(centroids, dtype=float)
    if not np.all(np.isfinite(c)):
        raise InputError("assignment needs finite centroids")
    dist = weighted_sq_distance(x[:, None, :], c[None, :, :], norm_weights)
    return np.argmin(dist, axis=1) + 1


def refine(x: np.ndarray, labels: np.ndarray, k: int,
           previous: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """Cluster means and an emptiness mask.

    Empty clusters keep their ``previous`` centroid (NaN when none is given).
    """
    x = np.asarray(x, dtype=float)
    labels = np.asarray(labels)
    out = np.full((k, x.shape[1]), np.nan) if previous is None else np.array(previous, dtype=float)
    empty = np.zeros(k, dtype=bool)
    for j in range(k):
        members = labels == j + 1
        if members.any():
            out[j] = x[members].mean(axis=0)
        else:
            empty[j] = True
    return out, empty


def objective(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray,
              norm_weights: Optional[np.ndarray] = None) -> float:
    c = np.asarray(centroids, dtype=float)[np.asarray(labels) - 1]
    return float(weighted_sq_distance(x, c, norm_weights).sum())


def kmeans(x: np.ndarray, initial_centroids: np.ndarray, max_steps: int,
           exit_mode: str = "none", delta_max: float = 1e-6,
           norm_weights: Optional[np.ndarray] = None,
           repair_rng: Optional[np.random.Generator] = None,
           init_low: Optional[np.ndarray] = None, init_high: Optional[np.ndarray] = None,
           ) -> tuple[list[KMeansState], str]:
    """Lloyd iterations with the protocol's exit rules and repair draws.

    A cluster left empty at step ``T - 1`` gets a fresh random centroid at
    the start of step ``T``, drawn from ``repair_rng`` in slot order; pass
    the generator positioned right after the initial draws to mirror the
    distributed run. Returns the per-step trace and the exit reason
    (``"C1"``, ``"C2"`` or ``"M-exhausted"``).
    """
    x = np.asarray(x, dtype=float)
    centroids = np.array(initial_centroids, dtype=float)
    k = len(centroids)
    if exit_mode not in ("C1", "C2", "none"):
        raise InputError(f"unknown exit mode {exit_mode!r}")
    trace: list[KMeansState] = []
    empty = np.zeros(k, dtype=bool)
    for step in range(1, max_steps + 1):
        repaired = tuple(int(j) for j in np.nonzero(empty)[0])
        if repaired:
            if repair_rng is None or init_low is None or init_high is None:
                raise InputError("an empty cluster needs repair_rng and the init range")
            for j in repaired:
                centroids[j] = draw_centroid(repair_rng, init_low, init_high)
        labels = assign(x, centroids, norm_weights)
        centroids, empty = refine(x, labels, k, centroids)
        d = objective(x, centroids, labels, norm_weights)
        trace.append(KMeansState(step, centroids.copy(), labels, d, empty.copy(), repaired))
        if step >= 2:
            prev = trace[-2]
            if exit_mode == "C1" and np.array_equal(labels, prev.labels):
                return trace, "C1"
            if exit_mode == "C2" and abs(d - prev.d) < delta_max:
                return trace, "C2"
    return trace, "M-exhausted"
