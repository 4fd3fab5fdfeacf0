"""k-sigma detection for numeric series and surge detection for categorical counts."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

UP = "up"
DOWN = "down"

SIGMA_FLOOR = 1e-9


def sigma_flags(values, baseline_window: int = 60, k_sigma: float = 3.0) -> np.ndarray:
    """Per-point flags: +1 above mean + k*std, -1 below mean - k*std, else 0.

    Mean and (population) std come from the ``baseline_window`` values strictly
    preceding each point; the first ``baseline_window`` points are never flagged.
    """
    if baseline_window < 2:
        raise ValueError("baseline_window must be >= 2")
    values = np.asarray(values, dtype=float)
    flags = np.zeros(len(values), dtype=np.int8)
    if len(values) <= baseline_window:
        return flags
    windows = sliding_window_view(values[:-1], baseline_window)
    mu = windows.mean(axis=1)
    sigma = np.maximum(windows.std(axis=1), SIGMA_FLOOR)
    tail = values[baseline_window:]
    flags[baseline_window:][tail > mu + k_sigma * sigma] = 1
    flags[baseline_window:][tail < mu - k_sigma * sigma] = -1
    return flags


def detect_numeric_anomalies(
    series: Sequence[tuple[int, float]], baseline_window: int = 60, k_sigma: float = 3.0
) -> list[tuple[int, str]]:
    if not series:
        return []
    ts = [t for t, _ in series]
    flags = sigma_flags([v for _, v in series], baseline_window, k_sigma)
    return [(ts[i], UP if flags[i] > 0 else DOWN) for i in np.flatnonzero(flags)]


def detect_categorical_surge(
    window_counts: Mapping[str, int],
    history: Sequence[Mapping[str, int]],
    k_sigma: float = 3.0,
    min_count: int = 5,
    min_history: int = 5,
) -> set[str]:
    """Values whose count in the current window jumps above mean + k*std of
    their counts in the history windows (and reaches ``min_count``)."""
    if len(history) < min_history:
        return set()
    anomalous = set()
    for value, count in window_counts.items():
        if count < min_count:
            continue
        past = np.array([h.get(value, 0) for h in history], dtype=float)
        if count > past.mean() + k_sigma * past.std():
            anomalous.add(value)
    return anomalous
