"""Weight approximation: factor a weight matrix as B A by gradient descent,
record the loss trajectory, and persist results in a content-addressed cache.

A run is fully determined by (w0, config): factors start from seeded normal
draws, take `steps` Adam updates on the squared-Frobenius reconstruction
objective under a step-decay schedule, and the residual w0 - B A is frozen
alongside the factors. Identical inputs give byte-identical artifacts, no
matter how many layers run concurrently.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .optim import (
    AdamState,
    DivergenceError,
    StepLRSchedule,
    adam_step,
    lr_at,
    residual_grads,
)
from .stats import global_init, layer_stats
from .tensor import content_hash, derive_seed, load_wtn1, sample, save_wtn1
from .tensor import DistributionSpec

__all__ = [
    "ApproxConfig",
    "ApproxResult",
    "TrajectoryPoint",
    "approximate",
    "trajectory_moving_average",
    "Manifest",
    "ManifestLayer",
    "load_manifest",
    "write_manifest",
    "CacheEntry",
    "ApproxCache",
    "ModelApproxRun",
    "approximate_model",
]

DEFAULT_CONCURRENCY = 64

_VALID_ROLES = ("query", "value", "other")


class TrajectoryPoint(NamedTuple):
    step: int
    frobenius_sq: float
    mse: float


@dataclass(frozen=True)
class ApproxConfig:
    """Hyperparameters of one approximation run.

    init_sigma None means "use the target's own population std" for a single
    matrix, or the global sigma-bar across target layers for a model run.
    """

    rank: int
    steps: int = 20000
    lr: float = 5e-4
    schedule: StepLRSchedule | None = None
    init_mu: float = 0.0
    init_sigma: float | None = None
    seed: int = 0
    trajectory_stride: int = 100
    checkpoint_steps: tuple[int, ...] = ()

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.trajectory_stride < 1:
            raise ValueError(f"trajectory_stride must be >= 1, got {self.trajectory_stride}")
        if self.init_sigma is not None and not self.init_sigma > 0:
            raise ValueError(f"init_sigma must be positive, got {self.init_sigma}")
        if self.schedule is not None and self.schedule.base_lr != self.lr:
            raise ValueError(
                f"schedule.base_lr {self.schedule.base_lr} disagrees with lr {self.lr}"
            )
        if any(s < 0 for s in self.checkpoint_steps):
            raise ValueError("checkpoint steps must be >= 0")
        object.__setattr__(self, "checkpoint_steps", tuple(sorted(set(self.checkpoint_steps))))

    def resolved_schedule(self) -> StepLRSchedule:
        return self.schedule if self.schedule is not None else StepLRSchedule(base_lr=self.lr)

    def resolve_sigma(self, w0: np.ndarray) -> float:
        if self.init_sigma is not None:
            return self.init_sigma
        sigma = layer_stats(w0, "target").sigma
        if not sigma > 0:
            raise ValueError(
                "target weights have zero variance; pass an explicit init_sigma"
            )
        return sigma


@dataclass
class ApproxResult:
    """Factors, frozen residual, and the recorded loss trajectory of one run."""

    a: np.ndarray
    b: np.ndarray
    residual: np.ndarray
    final_mse: float
    trajectory: list[TrajectoryPoint]
    config: ApproxConfig
    w0_hash: str
    checkpoints: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def approximate(w0: np.ndarray, cfg: ApproxConfig) -> ApproxResult:
    """Run the factorization loop on one weight matrix.

    Factors are initialized from N(init_mu, init_sigma^2) with independent
    sub-seeds per factor, then optimized for cfg.steps Adam updates. The
    trajectory records (step, frobenius_sq, mse) at step 0, every
    trajectory_stride steps, and the final step. steps == 0 returns the raw
    random draws with their residual.
    """
    w0 = np.asarray(w0, dtype=np.float64)
    if w0.ndim != 2:
        raise ValueError(f"w0 must be 2-D, got shape {w0.shape}")
    d, k = w0.shape
    if cfg.rank >= min(d, k):
        raise ValueError(f"rank must be < min(d, k) = {min(d, k)}, got {cfg.rank}")

    sigma = cfg.resolve_sigma(w0)
    schedule = cfg.resolved_schedule()
    init = DistributionSpec.normal(cfg.init_mu, sigma)
    a = sample(init, cfg.rank, k, derive_seed(cfg.seed, "factor_a"))
    b = sample(init, d, cfg.rank, derive_seed(cfg.seed, "factor_b"))

    state_a = AdamState.init(a.shape)
    state_b = AdamState.init(b.shape)
    n = d * k
    want_checkpoint = set(cfg.checkpoint_steps)
    checkpoints: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    if 0 in want_checkpoint:
        checkpoints[0] = (a.copy(), b.copy())

    trajectory: list[TrajectoryPoint] = []
    diff = w0 - b @ a
    for t in range(cfg.steps):
        fro = float(np.sum(diff * diff))
        if not np.isfinite(fro):
            raise DivergenceError(
                f"approximation diverged at step {t} (config: {cfg})", step=t
            )
        if t % cfg.trajectory_stride == 0:
            trajectory.append(TrajectoryPoint(t, fro, fro / n))
        grad_a, grad_b = residual_grads(diff, a, b)
        lr = lr_at(schedule, t)
        a, state_a = adam_step(state_a, a, grad_a, lr)
        b, state_b = adam_step(state_b, b, grad_b, lr)
        if (t + 1) in want_checkpoint:
            checkpoints[t + 1] = (a.copy(), b.copy())
        diff = w0 - b @ a

    # The final diff doubles as the frozen residual.
    final_fro = float(np.sum(diff * diff))
    if not np.isfinite(final_fro):
        raise DivergenceError(
            f"approximation diverged at step {cfg.steps} (config: {cfg})", step=cfg.steps
        )
    trajectory.append(TrajectoryPoint(cfg.steps, final_fro, final_fro / n))
    return ApproxResult(
        a=a,
        b=b,
        residual=diff,
        final_mse=final_fro / n,
        trajectory=trajectory,
        config=replace(cfg, init_sigma=sigma, schedule=schedule),
        w0_hash=content_hash(w0),
        checkpoints=checkpoints,
    )


def trajectory_moving_average(trajectory: Sequence[TrajectoryPoint], at_step: int,
                              window: int) -> float:
    """Mean MSE over trajectory points with step in [at_step - window, at_step]."""
    values = [p.mse for p in trajectory if at_step - window <= p.step <= at_step]
    if not values:
        raise ValueError(f"no trajectory points within {window} steps of {at_step}")
    return float(np.mean(values))


# --------------------------------------------------------------------------
# Model manifests
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestLayer:
    name: str
    role: str
    file: str
    rows: int
    cols: int


@dataclass(frozen=True)
class Manifest:
    model_id: str
    layers: tuple[ManifestLayer, ...]
    root: Path

    def resolve_file(self, layer: ManifestLayer) -> Path:
        p = Path(layer.file)
        return p if p.is_absolute() else self.root / p


def _check_name(name: str, what: str) -> str:
    if not name or any(c in name for c in "/\\\0") or name in (".", ".."):
        raise ValueError(f"{what} {name!r} is not usable as a path component")
    return name


def load_manifest(path) -> Manifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    layers = []
    for entry in doc["layers"]:
        role = entry["role"]
        if role not in _VALID_ROLES:
            raise ValueError(f"layer {entry['name']!r}: unknown role {role!r}")
        layers.append(ManifestLayer(
            name=_check_name(entry["name"], "layer name"),
            role=role,
            file=entry["file"],
            rows=int(entry["rows"]),
            cols=int(entry["cols"]),
        ))
    return Manifest(
        model_id=_check_name(doc["model_id"], "model_id"),
        layers=tuple(layers),
        root=path.parent,
    )


def write_manifest(path, model_id: str, layers: Sequence[ManifestLayer]) -> Path:
    path = Path(path)
    doc = {
        "model_id": model_id,
        "layers": [
            {"name": l.name, "role": l.role, "file": l.file, "rows": l.rows, "cols": l.cols}
            for l in layers
        ],
    }
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def select_layers(manifest: Manifest, targets) -> list[ManifestLayer]:
    """Filter layers by name or role; None or "all" selects everything."""
    if targets is None:
        return list(manifest.layers)
    tokens = {targets} if isinstance(targets, str) else set(targets)
    if "all" in tokens:
        return list(manifest.layers)
    return [l for l in manifest.layers if l.name in tokens or l.role in tokens]


# --------------------------------------------------------------------------
# Content-addressed cache
# --------------------------------------------------------------------------

def _float_repr(x: float) -> str:
    return repr(float(x))


def cache_key_digest(w0_hash: str, cfg: ApproxConfig, sigma: float) -> str:
    """Deterministic digest of the exact-match key tuple."""
    schedule = cfg.resolved_schedule()
    key = {
        "w0_hash": w0_hash,
        "rank": cfg.rank,
        "steps": cfg.steps,
        "seed": cfg.seed,
        "lr": _float_repr(cfg.lr),
        "lr_step_size": schedule.step_size,
        "lr_gamma": _float_repr(schedule.gamma),
        "init_mu": _float_repr(cfg.init_mu),
        "init_sigma": _float_repr(sigma),
    }
    canon = json.dumps(key, sort_keys=True).encode("utf-8")
    return hashlib.sha256(canon).hexdigest()[:32]


@dataclass(frozen=True)
class CacheEntry:
    """Persisted approximation artifact for one (layer, config) pair."""

    model_id: str
    layer_name: str
    role: str
    w0_hash: str
    rank: int
    steps: int
    seed: int
    lr: float
    lr_step_size: int
    lr_gamma: float
    init_mu: float
    init_sigma: float
    a_path: Path
    b_path: Path
    r_path: Path
    a_hash: str
    b_hash: str
    r_hash: str
    final_mse: float
    created_at: str
    key_digest: str

    def config(self) -> ApproxConfig:
        return ApproxConfig(
            rank=self.rank,
            steps=self.steps,
            lr=self.lr,
            schedule=StepLRSchedule(self.lr, self.lr_step_size, self.lr_gamma),
            init_mu=self.init_mu,
            init_sigma=self.init_sigma,
            seed=self.seed,
        )


class ApproxCache:
    """Filesystem cache keyed by (weight hash, config).

    Layout: <root>/<model_id>/<layer_name>/<key-digest>/
    holding a.wtn1, b.wtn1, r.wtn1, meta.json, trajectory.csv. Stores are
    atomic (write to a temp dir, rename into place); entries whose payload
    no longer matches the recorded digests are quarantined and treated as
    misses.
    """

    def __init__(self, root):
        self.root = Path(root)

    def entry_dir(self, model_id: str, layer_name: str, key_digest: str) -> Path:
        return self.root / model_id / layer_name / key_digest

    def lookup(self, model_id: str, layer_name: str, key_digest: str) -> CacheEntry | None:
        entry_dir = self.entry_dir(model_id, layer_name, key_digest)
        meta_path = entry_dir / "meta.json"
        if not meta_path.is_file():
            return None
        try:
            entry = self._read_entry(entry_dir)
            self._verify(entry)
        except (ValueError, KeyError, OSError, json.JSONDecodeError):
            self._quarantine(entry_dir)
            return None
        return entry

    def store(self, model_id: str, layer_name: str, role: str,
              result: ApproxResult) -> CacheEntry:
        cfg = result.config
        sigma = cfg.init_sigma
        digest = cache_key_digest(result.w0_hash, cfg, sigma)
        entry_dir = self.entry_dir(model_id, layer_name, digest)
        schedule = cfg.resolved_schedule()
        meta = {
            "model_id": model_id,
            "layer_name": layer_name,
            "role": role,
            "w0_hash": result.w0_hash,
            "rank": cfg.rank,
            "steps": cfg.steps,
            "seed": cfg.seed,
            "lr": cfg.lr,
            "lr_step_size": schedule.step_size,
            "lr_gamma": schedule.gamma,
            "init_mu": cfg.init_mu,
            "init_sigma": sigma,
            "a_hash": content_hash(result.a),
            "b_hash": content_hash(result.b),
            "r_hash": content_hash(result.residual),
            "final_mse": result.final_mse,
            "created_at": datetime.now(timezone.utc).isoformat(),
            "key_digest": digest,
        }

        tmp = entry_dir.parent / f".tmp.{digest}.{os.getpid()}"
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        try:
            save_wtn1(tmp / "a.wtn1", result.a)
            save_wtn1(tmp / "b.wtn1", result.b)
            save_wtn1(tmp / "r.wtn1", result.residual)
            with open(tmp / "trajectory.csv", "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["step", "frobenius_sq", "mse"])
                for p in result.trajectory:
                    writer.writerow([p.step, _float_repr(p.frobenius_sq), _float_repr(p.mse)])
            (tmp / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
            try:
                os.rename(tmp, entry_dir)
            except OSError:
                if not entry_dir.is_dir():
                    raise
                # Lost a store race; the existing entry is byte-identical.
                shutil.rmtree(tmp)
        finally:
            if tmp.exists():
                shutil.rmtree(tmp, ignore_errors=True)
        return self._read_entry(entry_dir)

    def load_result(self, entry: CacheEntry) -> ApproxResult:
        """Rehydrate an ApproxResult from a verified cache entry."""
        a = load_wtn1(entry.a_path)
        b = load_wtn1(entry.b_path)
        residual = load_wtn1(entry.r_path)
        trajectory = []
        traj_path = entry.a_path.parent / "trajectory.csv"
        with open(traj_path, newline="") as f:
            for row in csv.DictReader(f):
                trajectory.append(TrajectoryPoint(
                    int(row["step"]), float(row["frobenius_sq"]), float(row["mse"])
                ))
        return ApproxResult(
            a=a,
            b=b,
            residual=residual,
            final_mse=entry.final_mse,
            trajectory=trajectory,
            config=entry.config(),
            w0_hash=entry.w0_hash,
        )

    def _read_entry(self, entry_dir: Path) -> CacheEntry:
        meta = json.loads((entry_dir / "meta.json").read_text())
        return CacheEntry(
            model_id=meta["model_id"],
            layer_name=meta["layer_name"],
            role=meta["role"],
            w0_hash=meta["w0_hash"],
            rank=meta["rank"],
            steps=meta["steps"],
            seed=meta["seed"],
            lr=meta["lr"],
            lr_step_size=meta["lr_step_size"],
            lr_gamma=meta["lr_gamma"],
            init_mu=meta["init_mu"],
            init_sigma=meta["init_sigma"],
            a_path=entry_dir / "a.wtn1",
            b_path=entry_dir / "b.wtn1",
            r_path=entry_dir / "r.wtn1",
            a_hash=meta["a_hash"],
            b_hash=meta["b_hash"],
            r_hash=meta["r_hash"],
            final_mse=meta["final_mse"],
            created_at=meta["created_at"],
            key_digest=meta["key_digest"],
        )

    def _verify(self, entry: CacheEntry) -> None:
        for path, expect in ((entry.a_path, entry.a_hash),
                             (entry.b_path, entry.b_hash),
                             (entry.r_path, entry.r_hash)):
            if content_hash(load_wtn1(path)) != expect:
                raise ValueError(f"payload digest mismatch in {path}")

    def _quarantine(self, entry_dir: Path) -> None:
        n = 0
        while True:
            target = entry_dir.with_name(f"{entry_dir.name}.quarantined.{n}")
            if not target.exists():
                break
            n += 1
        try:
            os.rename(entry_dir, target)
        except OSError:
            shutil.rmtree(entry_dir, ignore_errors=True)


# --------------------------------------------------------------------------
# Whole-model driver
# --------------------------------------------------------------------------

def cached_approximate(cache: ApproxCache, model_id: str, layer_name: str, role: str,
                       w0: np.ndarray, cfg: ApproxConfig):
    """Approximate through the cache: exact-key hit or compute-and-store.

    cfg.init_sigma must already be resolved to a number (it is part of the
    key). Returns (entry, result, hit).
    """
    if cfg.init_sigma is None:
        raise ValueError("cached_approximate needs a resolved init_sigma")
    digest = cache_key_digest(content_hash(w0), cfg, cfg.init_sigma)
    entry = cache.lookup(model_id, layer_name, digest)
    if entry is not None:
        return entry, cache.load_result(entry), True
    result = approximate(w0, cfg)
    entry = cache.store(model_id, layer_name, role, result)
    return entry, result, False


@dataclass
class ModelApproxRun:
    """Outcome of approximate_model: cache entries plus per-layer failures."""

    entries: list[CacheEntry]
    failures: dict[str, str]
    cache_hits: int

    @property
    def ok(self) -> bool:
        return not self.failures


def _load_layer(manifest: Manifest, layer: ManifestLayer) -> np.ndarray:
    path = manifest.resolve_file(layer)
    w0 = load_wtn1(path)
    if w0.shape != (layer.rows, layer.cols):
        raise ValueError(
            f"layer {layer.name!r}: file shape {w0.shape} does not match "
            f"manifest ({layer.rows}, {layer.cols})"
        )
    return w0


def approximate_model(manifest: Manifest, targets, cfg: ApproxConfig,
                      concurrency: int = DEFAULT_CONCURRENCY,
                      cache: ApproxCache | None = None,
                      checkpoint_dir=None) -> ModelApproxRun:
    """Approximate every targeted layer, at most `concurrency` jobs in flight.

    Per-layer seeds derive from (cfg.seed, layer name), so results are
    independent of scheduling and bit-identical to a serial run. Layers
    already present in the cache are returned without recomputation; runs
    that capture intermediate checkpoints (cfg.checkpoint_steps plus a
    checkpoint_dir) always recompute, writing the factor snapshots under
    <checkpoint_dir>/<layer>/<step>/.
    """
    if concurrency < 1:
        raise ValueError(f"concurrency must be >= 1, got {concurrency}")
    if cache is None:
        cache = ApproxCache(manifest.root / "cache")

    selected = select_layers(manifest, targets)
    if not selected:
        raise ValueError(f"no layers match targets {targets!r}")

    failures: dict[str, str] = {}
    loaded: dict[str, np.ndarray] = {}
    for layer in selected:
        try:
            loaded[layer.name] = _load_layer(manifest, layer)
        except (OSError, ValueError) as e:
            failures[layer.name] = str(e)

    if cfg.init_sigma is not None:
        sigma = cfg.init_sigma
    else:
        per_layer = [layer_stats(w, name) for name, w in loaded.items()]
        if not per_layer:
            return ModelApproxRun(entries=[], failures=failures, cache_hits=0)
        sigma = global_init(per_layer).sigma_bar
        if not sigma > 0:
            raise ValueError("global sigma-bar is zero; pass an explicit init_sigma")

    hits = 0

    def job(layer: ManifestLayer) -> tuple[CacheEntry, bool]:
        w0 = loaded[layer.name]
        layer_cfg = replace(cfg, seed=derive_seed(cfg.seed, layer.name), init_sigma=sigma)
        if layer_cfg.checkpoint_steps and checkpoint_dir is not None:
            # Checkpoint captures bypass the lookup: a cached entry holds
            # only the final factors, not the intermediate ones.
            result = approximate(w0, layer_cfg)
            for step, (ca, cb) in result.checkpoints.items():
                step_dir = Path(checkpoint_dir) / layer.name / str(step)
                step_dir.mkdir(parents=True, exist_ok=True)
                save_wtn1(step_dir / "a.wtn1", ca)
                save_wtn1(step_dir / "b.wtn1", cb)
            return cache.store(manifest.model_id, layer.name, layer.role, result), False
        entry, _, hit = cached_approximate(
            cache, manifest.model_id, layer.name, layer.role, w0, layer_cfg
        )
        return entry, hit

    pending = [l for l in selected if l.name in loaded]
    results: dict[str, CacheEntry] = {}
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        futures = {pool.submit(job, layer): layer for layer in pending}
        for future, layer in futures.items():
            try:
                entry, hit = future.result()
            except (ValueError, DivergenceError, OSError) as e:
                failures[layer.name] = str(e)
                continue
            results[layer.name] = entry
            if hit:
                hits += 1

    entries = [results[l.name] for l in selected if l.name in results]
    return ModelApproxRun(entries=entries, failures=failures, cache_hits=hits)
