"""Adapted linear layers: a frozen matrix plus trainable low-rank factors.

Every strategy constructs the layer so that its effective weight
frozen + scaling * (b @ a) equals the original weight at working precision,
so the adapted model initially computes exactly the base function. The
strategies differ only in where the factors start:

  lora            a ~ kaiming-uniform(fan_in=k), b = 0, frozen = w0
  inilora         factors and residual from a gradient-descent approximation
  inilora-alpha   a, b ~ N(0, sigma^2), sigma defaults to 0.5
  inilora-beta-kn a, b ~ kaiming-normal (fan_in = k for a, r for b)
  inilora-beta-ku same with kaiming-uniform
  inilora-iter0   a, b ~ N(0, sigma_bar^2), the global weight-stats sigma

The non-lora strategies freeze w0 - scaling * (b @ a); pass
use_residual=False to freeze w0 itself instead (the adapted layer then
starts offset by b @ a).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .approx import ApproxResult
from .tensor import DistributionSpec, content_hash, derive_seed, load_wtn1, sample, save_wtn1

__all__ = [
    "STRATEGY_KINDS",
    "InitStrategy",
    "AdaptedLinear",
    "init_adapter",
    "adapter_forward",
    "adapter_grads",
    "merge",
    "save_adapter",
    "load_adapter",
]

STRATEGY_KINDS = (
    "lora",
    "inilora",
    "inilora-alpha",
    "inilora-beta-kn",
    "inilora-beta-ku",
    "inilora-iter0",
)

DEFAULT_ALPHA_SIGMA = 0.5


@dataclass(frozen=True)
class InitStrategy:
    """Strategy selector. `sigma` is the draw std for the normal-based kinds:
    inilora-alpha (default 0.5) and inilora-iter0 (the global sigma-bar,
    required)."""

    kind: str
    sigma: float | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {STRATEGY_KINDS}")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @classmethod
    def lora(cls) -> "InitStrategy":
        return cls("lora")

    @classmethod
    def inilora(cls) -> "InitStrategy":
        return cls("inilora")

    @classmethod
    def alpha(cls, sigma: float = DEFAULT_ALPHA_SIGMA) -> "InitStrategy":
        return cls("inilora-alpha", sigma=sigma)

    @classmethod
    def beta_kn(cls) -> "InitStrategy":
        return cls("inilora-beta-kn")

    @classmethod
    def beta_ku(cls) -> "InitStrategy":
        return cls("inilora-beta-ku")

    @classmethod
    def iter0(cls, sigma_bar: float) -> "InitStrategy":
        return cls("inilora-iter0", sigma=sigma_bar)


@dataclass
class AdaptedLinear:
    """Linear layer decomposed as frozen + scaling * (b @ a).

    `frozen` is write-protected after construction; only a and b train.
    """

    frozen: np.ndarray
    a: np.ndarray
    b: np.ndarray
    scaling: float = 1.0
    strategy: InitStrategy | None = None
    w0_hash: str | None = None
    seed: int | None = None

    def __post_init__(self):
        d, k = self.frozen.shape
        r = self.a.shape[0]
        if self.a.shape != (r, k) or self.b.shape != (d, r):
            raise ValueError(
                f"adapter shape mismatch: frozen {self.frozen.shape}, "
                f"a {self.a.shape}, b {self.b.shape}"
            )
        if not self.scaling > 0:
            raise ValueError(f"scaling must be positive, got {self.scaling}")
        self.frozen.setflags(write=False)

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def out_dim(self) -> int:
        return self.frozen.shape[0]

    @property
    def in_dim(self) -> int:
        return self.frozen.shape[1]

    def trainable_params(self) -> int:
        return self.a.size + self.b.size


def init_adapter(w0: np.ndarray, strategy: InitStrategy, rank: int, seed: int,
                 approx: ApproxResult | None = None, scaling: float = 1.0,
                 use_residual: bool = True) -> AdaptedLinear:
    """Build an adapted layer over w0 under the given strategy.

    `approx` is required for (and only for) the inilora strategy and must
    have been computed from this exact w0 (hash-checked against stale
    cache artifacts).
    """
    w0 = np.asarray(w0, dtype=np.float64)
    if w0.ndim != 2:
        raise ValueError(f"w0 must be 2-D, got shape {w0.shape}")
    d, k = w0.shape
    if not 1 <= rank < min(d, k):
        raise ValueError(f"rank must be in [1, min(d, k)) = [1, {min(d, k)}), got {rank}")
    if (approx is not None) != (strategy.kind == "inilora"):
        raise ValueError("an ApproxResult must be supplied iff strategy is 'inilora'")

    seed_a = derive_seed(seed, "factor_a")
    seed_b = derive_seed(seed, "factor_b")

    if strategy.kind == "lora":
        a = sample(DistributionSpec.kaiming_uniform(fan_in=k), rank, k, seed_a)
        b = np.zeros((d, rank), dtype=np.float64)
        frozen = w0.copy()
    elif strategy.kind == "inilora":
        if approx.w0_hash != content_hash(w0):
            raise ValueError(
                "approximation was computed for a different weight matrix "
                f"(stale cache?): {approx.w0_hash} != {content_hash(w0)}"
            )
        if approx.a.shape[0] != rank:
            raise ValueError(
                f"approximation rank {approx.a.shape[0]} does not match requested rank {rank}"
            )
        a = approx.a.copy()
        b = approx.b.copy()
        frozen = approx.residual.copy() if use_residual else w0.copy()
    else:
        if strategy.kind == "inilora-alpha":
            sigma = strategy.sigma if strategy.sigma is not None else DEFAULT_ALPHA_SIGMA
            spec_a = spec_b = DistributionSpec.normal(0.0, sigma)
        elif strategy.kind == "inilora-iter0":
            if strategy.sigma is None:
                raise ValueError("inilora-iter0 needs the global sigma-bar as strategy.sigma")
            spec_a = spec_b = DistributionSpec.normal(0.0, strategy.sigma)
        elif strategy.kind == "inilora-beta-kn":
            spec_a = DistributionSpec.kaiming_normal(fan_in=k)
            spec_b = DistributionSpec.kaiming_normal(fan_in=rank)
        else:  # inilora-beta-ku
            spec_a = DistributionSpec.kaiming_uniform(fan_in=k)
            spec_b = DistributionSpec.kaiming_uniform(fan_in=rank)
        a = sample(spec_a, rank, k, seed_a)
        b = sample(spec_b, d, rank, seed_b)
        frozen = w0 - scaling * (b @ a) if use_residual else w0.copy()

    return AdaptedLinear(
        frozen=frozen, a=a, b=b, scaling=scaling, strategy=strategy,
        w0_hash=content_hash(w0), seed=seed,
    )


def adapter_forward(layer: AdaptedLinear, x: np.ndarray) -> np.ndarray:
    """y = x @ W_eff^T without materializing W_eff: x frozen^T + scaling (x a^T) b^T."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ValueError(
            f"input shape {x.shape} incompatible with adapter in_dim {layer.in_dim}"
        )
    return x @ layer.frozen.T + layer.scaling * ((x @ layer.a.T) @ layer.b.T)


def adapter_grads(layer: AdaptedLinear, x: np.ndarray, upstream: np.ndarray):
    """Chain rule through the adapted layer for upstream = dL/dy.

    Returns (dL/da, dL/db, dL/dx); the frozen matrix has no gradient slot.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise ValueError(f"input shape {x.shape} incompatible with in_dim {layer.in_dim}")
    if upstream.shape != (x.shape[0], layer.out_dim):
        raise ValueError(
            f"upstream shape {upstream.shape} incompatible with "
            f"({x.shape[0]}, {layer.out_dim})"
        )
    s = layer.scaling
    gb_proj = upstream @ layer.b          # (n, r)
    grad_a = s * (gb_proj.T @ x)          # (r, k)
    grad_b = s * (upstream.T @ (x @ layer.a.T))  # (d, r)
    grad_x = upstream @ layer.frozen + s * (gb_proj @ layer.a)  # (n, k)
    return grad_a, grad_b, grad_x


def merge(layer: AdaptedLinear) -> np.ndarray:
    """Materialize the effective weight frozen + scaling * (b @ a)."""
    return layer.frozen + layer.scaling * (layer.b @ layer.a)


def save_adapter(path, layer: AdaptedLinear) -> Path:
    """Write an adapter checkpoint: a/b/frozen WTN1 files plus meta.json."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_wtn1(path / "a.wtn1", layer.a)
    save_wtn1(path / "b.wtn1", layer.b)
    save_wtn1(path / "frozen.wtn1", layer.frozen)
    strategy = layer.strategy
    meta = {
        "strategy": None if strategy is None else {"kind": strategy.kind, "sigma": strategy.sigma},
        "rank": layer.rank,
        "scaling": layer.scaling,
        "seed": layer.seed,
        "w0_hash": layer.w0_hash,
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_adapter(path) -> AdaptedLinear:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    strategy = None
    if meta["strategy"] is not None:
        strategy = InitStrategy(meta["strategy"]["kind"], meta["strategy"]["sigma"])
    layer = AdaptedLinear(
        frozen=load_wtn1(path / "frozen.wtn1"),
        a=np.array(load_wtn1(path / "a.wtn1")),
        b=np.array(load_wtn1(path / "b.wtn1")),
        scaling=meta["scaling"],
        strategy=strategy,
        w0_hash=meta["w0_hash"],
        seed=meta["seed"],
    )
    if layer.rank != meta["rank"]:
        raise ValueError(f"checkpoint rank {meta['rank']} does not match factors {layer.rank}")
    return layer
