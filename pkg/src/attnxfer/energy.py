"""Sliding-window energy of attention maps and the unsupervised video classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class VideoScoreTable:
    scores: np.ndarray  # one real per concept
    n_frames: int

    @property
    def winner(self) -> int:
        return int(np.argmax(self.scores))


def _check_window(m: np.ndarray, s: int) -> None:
    if m.ndim != 2:
        raise ValueError("attention map must be two-dimensional")
    if not 1 <= s <= min(m.shape):
        raise ValueError(f"window size {s} outside [1, {min(m.shape)}]")


def _window_sum(m: np.ndarray, r: int, c: int, s: int) -> float:
    return float(m[r : r + s, c : c + s].sum())


def window_energy(attention, s: int = 3) -> float:
    """Largest sum over all ``s x s`` windows fully inside the map (step 1)."""
    m = np.asarray(attention, dtype=np.float64)
    _check_window(m, s)
    h, w = m.shape
    best = -np.inf
    for r in range(h - s + 1):
        for c in range(w - s + 1):
            v = _window_sum(m, r, c, s)
            if v > best:
                best = v
    return best


def window_sums(attention, s: int = 3) -> np.ndarray:
    """All window sums via a summed-area table, shape ``(h-s+1, w-s+1)``."""
    m = np.asarray(attention, dtype=np.float64)
    _check_window(m, s)
    sat = np.zeros((m.shape[0] + 1, m.shape[1] + 1))
    sat[1:, 1:] = m.cumsum(0).cumsum(1)
    return sat[s:, s:] - sat[:-s, s:] - sat[s:, :-s] + sat[:-s, :-s]


def window_energy_fast(attention, s: int = 3) -> float:
    """Same value as :func:`window_energy`, in O(w*h).

    The summed-area table picks the windows whose approximate sum lies within
    the rounding bound of the maximum; those few are then summed directly so
    the result is bit-identical to the double loop.
    """
    m = np.asarray(attention, dtype=np.float64)
    sums = window_sums(m, s)
    h, w = m.shape
    # inclusion-exclusion over four prefix sums, each with O((h+w) eps sum|x|) error
    tol = 8.0 * (h + w + 4) * np.finfo(np.float64).eps * float(np.abs(m).sum())
    top = sums.max()
    rows, cols = np.nonzero(sums >= top - 2.0 * tol)
    return max(_window_sum(m, r, c, s) for r, c in zip(rows, cols))


def video_score(maps, s: int = 3) -> float:
    """Mean window energy over the frames of one video, for one concept."""
    maps = list(maps)
    if not maps:
        raise ValueError("video has no frames")
    return float(np.mean([window_energy_fast(m, s) for m in maps]))


def score_video(stacks, s: int = 3) -> VideoScoreTable:
    """Per-concept video scores from per-frame map stacks ``(N, n, h, w)``."""
    stacks = np.asarray(stacks, dtype=np.float64)
    if stacks.ndim != 4 or stacks.shape[0] == 0:
        raise ValueError("expected a non-empty (frames, concepts, h, w) array")
    n = stacks.shape[1]
    scores = np.array([video_score(stacks[:, c], s) for c in range(n)])
    return VideoScoreTable(scores, stacks.shape[0])


def classify_unatt(stacks, s: int = 3) -> tuple[int, VideoScoreTable]:
    """Concept with the highest mean energy; ties go to the lowest index."""
    table = score_video(stacks, s)
    return table.winner, table
