"""Keypoint selection: random preselection, farthest point sampling (FPS)
and attention-weighted farthest point sampling (WFPS)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_KEYPOINTS_PER_LEVEL = {8: 128, 4: 128, 2: 128}


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class Candidate:
    u: float
    v: float
    weight: float
    world: tuple[float, float, float]

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0:
            raise SelectionError(f"candidate weight {self.weight} outside [0, 1]")
        if not np.all(np.isfinite(self.world)):
            raise SelectionError("candidate world point must be finite")


@dataclass(frozen=True)
class SelectionConfig:
    k_preselect: int = 1024
    keypoints_per_level: dict = field(default_factory=lambda: dict(DEFAULT_KEYPOINTS_PER_LEVEL))
    rng_seed: int = 0
    weighted: bool = True  # WFPS when True, plain FPS otherwise

    def counts(self, n_candidates: int, scale: int) -> tuple[int, int]:
        """Effective (K, N_s) for a level with ``n_candidates`` candidates."""
        n_s = int(self.keypoints_per_level[scale])
        k = int(self.k_preselect)
        if n_s > k:
            logger.warning("N_s=%d exceeds K=%d at scale %d; raising K", n_s, k, scale)
            k = n_s
        if k > n_candidates:
            logger.info("K=%d exceeds %d candidates at scale %d; clamping", k, n_candidates, scale)
            k = n_candidates
        return k, min(n_s, k)


def preselect(candidates, k: int, seed: int) -> list:
    """Uniformly draw ``k`` distinct candidates; output keeps input order."""
    n = len(candidates)
    if n == 0:
        raise SelectionError("no candidates to preselect from")
    if k >= n:
        return list(candidates)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return [candidates[i] for i in idx]


def _coords(candidates) -> np.ndarray:
    if isinstance(candidates, np.ndarray):
        return np.asarray(candidates, dtype=np.float64)[:, :2]
    return np.array([[c.u, c.v] for c in candidates], dtype=np.float64).reshape(-1, 2)


def _greedy(uv: np.ndarray, weights: np.ndarray | None, n: int, seed_index: int) -> list[int]:
    m = len(uv)
    if m == 0:
        raise SelectionError("no candidates")
    if n > m:
        raise SelectionError(f"cannot select {n} of {m} candidates")
    if not 0 <= seed_index < m:
        raise SelectionError(f"seed index {seed_index} out of range")
    if n <= 0:
        return []
    selected = [seed_index]
    du = uv[:, 0] - uv[seed_index, 0]
    dv = uv[:, 1] - uv[seed_index, 1]
    min_d = np.sqrt(du * du + dv * dv)
    taken = np.zeros(m, dtype=bool)
    taken[seed_index] = True
    for _ in range(n - 1):
        score = min_d * weights if weights is not None else min_d.copy()
        score[taken] = -np.inf
        q = int(np.argmax(score))  # first maximum = lowest index on ties
        selected.append(q)
        taken[q] = True
        du = uv[:, 0] - uv[q, 0]
        dv = uv[:, 1] - uv[q, 1]
        np.minimum(min_d, np.sqrt(du * du + dv * dv), out=min_d)
    return selected


def fps(candidates, n: int, seed_index: int = 0) -> list[int]:
    """Greedy max-min selection in (u, v); returns candidate indices in pick order."""
    return _greedy(_coords(candidates), None, n, seed_index)


def wfps(candidates, n: int, seed_index: int | None = None, weights=None) -> list[int]:
    """Greedy selection maximising ``weight * min distance to the selected set``.

    Without ``seed_index`` the highest-weight candidate starts the sequence.
    With all weights zero every score ties at 0 and the order degenerates to
    ascending index.
    """
    uv = _coords(candidates)
    if weights is None:
        weights = np.array([c.weight for c in candidates], dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if seed_index is None:
        if len(weights) == 0:
            raise SelectionError("no candidates")
        seed_index = int(np.argmax(weights))
    return _greedy(uv, weights, n, seed_index)
