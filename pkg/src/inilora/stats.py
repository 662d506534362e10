"""Per-layer weight statistics and the global initialization parameters.

Per-layer mean and standard deviation use population normalization (divide
by the element count, not count - 1). The global parameters are unweighted
arithmetic means over layers, regardless of layer size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = ["LayerStats", "GlobalInitParams", "layer_stats", "global_init"]


@dataclass(frozen=True)
class LayerStats:
    layer_name: str
    mu: float
    sigma: float
    element_count: int


@dataclass(frozen=True)
class GlobalInitParams:
    mu_bar: float
    sigma_bar: float
    n_layers: int


def layer_stats(w: np.ndarray, name: str) -> LayerStats:
    """Population mean and standard deviation over all entries of one layer."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError(f"layer {name!r} is empty")
    mu = float(np.mean(w))
    sigma = float(np.sqrt(np.mean((w - mu) ** 2)))
    return LayerStats(layer_name=name, mu=mu, sigma=sigma, element_count=int(w.size))


def global_init(stats: Sequence[LayerStats]) -> GlobalInitParams:
    """Unweighted layer averages of (mu, sigma); the shared init parameters."""
    if len(stats) == 0:
        raise ValueError("global_init needs at least one layer")
    mu_bar = float(np.mean([s.mu for s in stats]))
    sigma_bar = float(np.mean([s.sigma for s in stats]))
    return GlobalInitParams(mu_bar=mu_bar, sigma_bar=sigma_bar, n_layers=len(stats))
