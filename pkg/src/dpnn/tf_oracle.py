"""Tucker-1 depth-mode projection used as the pretraining target.

The volume is unfolded along depth into a ``D x (H*W)`` matrix. Its leading
left singular vector weights the depth slices; the weighted slice sum is
min-max normalized into [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .data import Volume

EIG_TOL = 1e-10


@dataclass
class ProjectionTarget:
    map: np.ndarray
    source_id: str = ""
    degenerate: bool = False


def normalize_map(m) -> tuple[np.ndarray, bool]:
    """Min-max scale to [0, 1]; a constant grid becomes all 0.5 and is flagged."""
    m = np.asarray(m, dtype=np.float64)
    if np.isnan(m).any():
        raise ContractError("cannot normalize a map containing NaN")
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.full(m.shape, 0.5), True
    return (m - lo) / (hi - lo), False


def power_iteration(gram: np.ndarray, tol: float = EIG_TOL, max_iter: int = 100_000) -> np.ndarray:
    v = np.ones(gram.shape[0]) / np.sqrt(gram.shape[0])
    for _ in range(max_iter):
        w = gram @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return v
        w /= norm
        if np.linalg.norm(w - v) < tol:
            return w
        v = w
    return v


def leading_depth_vector(unfolded: np.ndarray) -> np.ndarray:
    """Leading left singular vector of a ``D x (H*W)`` unfolding, sign fixed by a nonnegative sum."""
    gram = unfolded @ unfolded.T
    try:
        _, vecs = np.linalg.eigh(gram)
        u = vecs[:, -1]
    except np.linalg.LinAlgError:
        u = power_iteration(gram)
    return -u if u.sum() < 0 else u


def tucker_project(volume: Volume | np.ndarray, source_id: str | None = None) -> ProjectionTarget:
    vox = volume.voxels if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float64)
    sid = source_id if source_id is not None else getattr(volume, "id", "")
    if vox.ndim != 3 or vox.size == 0:
        raise ContractError("tucker_project needs a non-empty [D, H, W] volume")
    if not np.all(np.isfinite(vox)):
        raise ContractError("tucker_project needs finite voxels")
    d, h, w = vox.shape
    peak = np.abs(vox).max()
    if peak == 0:
        return ProjectionTarget(np.zeros((h, w)), sid, degenerate=True)
    unfolded = (vox / peak).reshape(d, h * w)
    u = leading_depth_vector(unfolded)
    weighted = (u @ unfolded).reshape(h, w)
    m, flag = normalize_map(weighted)
    return ProjectionTarget(m, sid, degenerate=flag)
