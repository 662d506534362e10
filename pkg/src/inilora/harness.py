"""Desk-scale experiment harness.

A small frozen feed-forward model stands in for a large network: a few
chained linear layers, two of which play the "query"/"value" roles that get
adapted. Synthetic tasks are teacher-student: the teacher shares the base
weights except for a planted low-rank shift on the adapted layers, so a
rank-matched adapter can in principle fit it. On top of that sit the sweep
drivers that emit the comparison tables (approximation degree, init sigma,
init distribution) as CSV/JSON reports.

Everything is deterministic per seed: base weights, task data, adapter
initialization, and batch order all derive their own sub-seeds.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapters import AdaptedLinear, InitStrategy, adapter_forward, adapter_grads, init_adapter
from .approx import (
    ApproxCache,
    ApproxConfig,
    ApproxResult,
    ManifestLayer,
    approximate,
    cached_approximate,
    write_manifest,
)
from .optim import AdamState, DivergenceError, adam_step
from .stats import global_init, layer_stats
from .tensor import DistributionSpec, derive_seed, sample, save_wtn1

__all__ = [
    "LayerSpec",
    "ToyModelSpec",
    "ToyModel",
    "default_toy_spec",
    "build_toy_model",
    "export_model",
    "model_sigma_bar",
    "Task",
    "make_task",
    "TrainConfig",
    "RunReport",
    "AdaptedModel",
    "adapt_model",
    "adapt_model_from_factors",
    "plain_model",
    "evaluate",
    "finetune",
    "train_adapted",
    "compare_strategies",
    "sweep_approx_degree",
    "sweep_sigma",
    "sweep_distributions",
    "DEFAULT_CHECKPOINT_GRID",
    "DEFAULT_SIGMA_GRID",
    "write_rows_csv",
    "write_loss_curves_csv",
    "summarize",
    "experiment_dir",
    "moving_average",
]

DEFAULT_CHECKPOINT_GRID = (100, 500, 1000, 2000, 4000, 10000, 20000)
DEFAULT_SIGMA_GRID = (0.0001, 0.001, 0.01, 0.1, 0.5, 1.0)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    role: str  # query | value | other
    out_dim: int
    in_dim: int


@dataclass(frozen=True)
class ToyModelSpec:
    layers: tuple[LayerSpec, ...]
    adapted_roles: tuple[str, ...] = ("query", "value")
    nonlinearity: str = "tanh"  # tanh | relu | none
    head: str = "regression"  # regression | classification
    base_seed: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.in_dim != prev.out_dim:
                raise ValueError(
                    f"layer {cur.name!r} in_dim {cur.in_dim} does not chain "
                    f"from {prev.name!r} out_dim {prev.out_dim}"
                )
        if self.nonlinearity not in ("tanh", "relu", "none"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.head not in ("regression", "classification"):
            raise ValueError(f"unknown head {self.head!r}")
        if not any(l.role in self.adapted_roles for l in self.layers):
            raise ValueError("no layer matches the adapted roles")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def adapted_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.role in self.adapted_roles]


def default_toy_spec(in_dim: int = 32, hidden: int = 64, out_dim: int = 16,
                     head: str = "regression", base_seed: int = 0) -> ToyModelSpec:
    """Four-layer default: two adapted hidden x hidden query/value layers."""
    return ToyModelSpec(
        layers=(
            LayerSpec("input_proj", "other", hidden, in_dim),
            LayerSpec("query", "query", hidden, hidden),
            LayerSpec("value", "value", hidden, hidden),
            LayerSpec("head", "other", out_dim, hidden),
        ),
        head=head,
        base_seed=base_seed,
    )


@dataclass
class ToyModel:
    spec: ToyModelSpec
    weights: dict[str, np.ndarray]

    def model_id(self) -> str:
        return f"toy_{self.spec.base_seed}"


def build_toy_model(spec: ToyModelSpec) -> ToyModel:
    """Generate the frozen base weights, std 1/sqrt(fan_in) per layer."""
    weights = {}
    for layer in spec.layers:
        init = DistributionSpec.normal(0.0, 1.0 / np.sqrt(layer.in_dim))
        w = sample(init, layer.out_dim, layer.in_dim,
                   derive_seed(spec.base_seed, "base", layer.name))
        w.setflags(write=False)
        weights[layer.name] = w
    return ToyModel(spec=spec, weights=weights)


def export_model(model: ToyModel, out_dir) -> Path:
    """Write the model as WTN1 files plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    layers = []
    for spec in model.spec.layers:
        w = model.weights[spec.name]
        fname = f"{spec.name}.wtn1"
        save_wtn1(out_dir / fname, w)
        layers.append(ManifestLayer(
            name=spec.name, role=spec.role, file=fname,
            rows=w.shape[0], cols=w.shape[1],
        ))
    return write_manifest(out_dir / "manifest.json", model.model_id(), layers)


def model_sigma_bar(model: ToyModel) -> float:
    """Global sigma-bar over the adapted (targeted) layers."""
    stats = [layer_stats(model.weights[l.name], l.name)
             for l in model.spec.adapted_layers()]
    return global_init(stats).sigma_bar


# --------------------------------------------------------------------------
# Synthetic tasks
# --------------------------------------------------------------------------

@dataclass
class Task:
    kind: str  # matrix-regression | token-classification
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    delta_rank: int
    teacher_weights: dict[str, np.ndarray]

    @property
    def metric_name(self) -> str:
        return "accuracy" if self.kind == "token-classification" else "mse"


def make_task(model: ToyModel, kind: str = "matrix-regression",
              n_train: int = 256, n_eval: int = 128, delta_rank: int = 8,
              delta_scale: float = 0.05, seed: int = 0) -> Task:
    """Teacher-student dataset with a planted rank-`delta_rank` weight shift.

    The teacher reuses the base weights except that every adapted layer gets
    W0 + delta with rank(delta) = delta_rank and entry scale ~ delta_scale.
    delta_rank 0 leaves the teacher identical to the base model.
    """
    if kind not in ("matrix-regression", "token-classification"):
        raise ValueError(f"unknown task kind {kind!r}")
    if n_train < 1 or n_eval < 1:
        raise ValueError("n_train and n_eval must be >= 1")
    if delta_rank < 0:
        raise ValueError(f"delta_rank must be >= 0, got {delta_rank}")

    teacher = dict(model.weights)
    for layer in model.spec.adapted_layers():
        w0 = model.weights[layer.name]
        if delta_rank == 0:
            teacher[layer.name] = w0
            continue
        unit = DistributionSpec.normal(0.0, 1.0)
        u = sample(unit, w0.shape[0], delta_rank, derive_seed(seed, "delta_u", layer.name))
        v = sample(unit, delta_rank, w0.shape[1], derive_seed(seed, "delta_v", layer.name))
        teacher[layer.name] = w0 + (delta_scale / np.sqrt(delta_rank)) * (u @ v)

    unit_in = DistributionSpec.normal(0.0, 1.0)
    x_train = sample(unit_in, n_train, model.spec.in_dim, derive_seed(seed, "x_train"))
    x_eval = sample(unit_in, n_eval, model.spec.in_dim, derive_seed(seed, "x_eval"))

    teacher_model = AdaptedModel(
        spec=model.spec,
        layers=[(l, teacher[l.name]) for l in model.spec.layers],
    )
    out_train = teacher_model.forward(x_train)
    out_eval = teacher_model.forward(x_eval)
    if kind == "token-classification":
        y_train = np.argmax(out_train, axis=1)
        y_eval = np.argmax(out_eval, axis=1)
    else:
        y_train, y_eval = out_train, out_eval

    return Task(kind=kind, x_train=x_train, y_train=y_train,
                x_eval=x_eval, y_eval=y_eval, delta_rank=delta_rank,
                teacher_weights=teacher)


# --------------------------------------------------------------------------
# Adapted model: forward / backward
# --------------------------------------------------------------------------

@dataclass
class AdaptedModel:
    """Layer stack where each entry is a plain weight or an AdaptedLinear."""

    spec: ToyModelSpec
    layers: list[tuple[LayerSpec, np.ndarray | AdaptedLinear]]

    def adapted(self) -> dict[str, AdaptedLinear]:
        return {ls.name: layer for ls, layer in self.layers
                if isinstance(layer, AdaptedLinear)}

    def trainable_params(self) -> int:
        return sum(layer.trainable_params() for layer in self.adapted().values())

    def _apply(self, layer, x: np.ndarray) -> np.ndarray:
        if isinstance(layer, AdaptedLinear):
            return adapter_forward(layer, x)
        return x @ layer.T

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x: np.ndarray):
        """Forward pass keeping (input, post-activation) per layer for backprop."""
        act = self.spec.nonlinearity
        h = np.asarray(x, dtype=np.float64)
        caches = []
        last = len(self.layers) - 1
        for i, (ls, layer) in enumerate(self.layers):
            z = self._apply(layer, h)
            out = z if i == last else _activate(z, act)
            caches.append((h, out))
            h = out
        return h, caches

    def backward(self, caches, upstream: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Backprop dL/dy through the stack; returns (dL/da, dL/db) per adapted layer."""
        act = self.spec.nonlinearity
        grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        d_out = upstream
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            ls, layer = self.layers[i]
            x_in, out = caches[i]
            dz = d_out if i == last else _activation_grad(d_out, out, act)
            if isinstance(layer, AdaptedLinear):
                ga, gb, dx = adapter_grads(layer, x_in, dz)
                grads[ls.name] = (ga, gb)
            else:
                dx = dz @ layer
            d_out = dx
        return grads


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(dh: np.ndarray, out: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return dh * (1.0 - out * out)
    if kind == "relu":
        return dh * (out > 0)
    return dh


def plain_model(model: ToyModel) -> AdaptedModel:
    return AdaptedModel(
        spec=model.spec,
        layers=[(l, model.weights[l.name]) for l in model.spec.layers],
    )


def adapt_model(model: ToyModel, strategy: InitStrategy, rank: int, seed: int,
                approx_results: dict[str, ApproxResult] | None = None,
                scaling: float = 1.0, use_residual: bool = True) -> AdaptedModel:
    """Wrap every adapted-role layer in an adapter; other layers stay plain.

    Per-layer init seeds derive from (seed, layer name), matching the
    derivation used by whole-model approximation runs.
    """
    layers: list[tuple[LayerSpec, np.ndarray | AdaptedLinear]] = []
    for ls in model.spec.layers:
        w0 = model.weights[ls.name]
        if ls.role in model.spec.adapted_roles:
            approx = None
            if strategy.kind == "inilora":
                approx = (approx_results or {}).get(ls.name)
                if approx is None:
                    raise ValueError(
                        f"strategy 'inilora' needs an ApproxResult for layer {ls.name!r}"
                    )
            adapter = init_adapter(
                w0, strategy, rank, derive_seed(seed, ls.name),
                approx=approx, scaling=scaling, use_residual=use_residual,
            )
            layers.append((ls, adapter))
        else:
            layers.append((ls, w0))
    return AdaptedModel(spec=model.spec, layers=layers)


def adapt_model_from_factors(model: ToyModel, factors: dict[str, tuple[np.ndarray, np.ndarray]],
                             scaling: float = 1.0) -> AdaptedModel:
    """Build adapters directly from (a, b) factor pairs, recomputing residuals."""
    layers: list[tuple[LayerSpec, np.ndarray | AdaptedLinear]] = []
    for ls in model.spec.layers:
        w0 = model.weights[ls.name]
        if ls.role in model.spec.adapted_roles:
            if ls.name not in factors:
                raise ValueError(f"missing factors for adapted layer {ls.name!r}")
            a, b = factors[ls.name]
            frozen = w0 - scaling * (b @ a)
            layers.append((ls, AdaptedLinear(frozen=frozen, a=a.copy(), b=b.copy(),
                                             scaling=scaling)))
        else:
            layers.append((ls, w0))
    return AdaptedModel(spec=model.spec, layers=layers)


# --------------------------------------------------------------------------
# Losses, metrics, training loop
# --------------------------------------------------------------------------

def _regression_loss(pred: np.ndarray, target: np.ndarray):
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, 2.0 * diff / diff.size


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _classification_loss(logits: np.ndarray, labels: np.ndarray):
    n = logits.shape[0]
    p = _softmax(logits)
    eps = 1e-12
    loss = float(-np.mean(np.log(p[np.arange(n), labels] + eps)))
    grad = p
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def evaluate(adapted: AdaptedModel, task: Task) -> float:
    """Eval-split metric: MSE for regression, exact-match accuracy otherwise."""
    out = adapted.forward(task.x_eval)
    if task.kind == "token-classification":
        return float(np.mean(np.argmax(out, axis=1) == task.y_eval))
    diff = out - task.y_eval
    return float(np.mean(diff * diff))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 400
    batch_size: int = 32
    lr: float = 1e-2
    seed: int = 0
    rank: int = 8
    eval_every: int = 50
    scaling: float = 1.0
    use_residual: bool = True

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.rank < 1 or self.eval_every < 1:
            raise ValueError(f"invalid train config: {self}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


@dataclass
class RunReport:
    """Everything one fine-tuning run produced."""

    strategy: str
    rank: int
    seed: int
    metric_name: str
    train_loss: list[float]
    eval_steps: list[int]
    eval_metrics: list[float]
    final_metric: float
    trainable_params: int
    diverged: bool
    wall_time_s: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        doc = json.loads(text)
        return cls(**doc)


def train_adapted(adapted: AdaptedModel, task: Task, cfg: TrainConfig,
                  strategy_label: str) -> RunReport:
    """Adam fine-tuning of the adapter factors only; frozen parts never move.

    Logs the batch loss every step and the eval metric every cfg.eval_every
    steps (plus step 0 and the final step). A non-finite loss stops the run
    and flags the report as diverged.
    """
    t0 = time.perf_counter()
    adapters = adapted.adapted()
    states = {name: (AdamState.init(l.a.shape), AdamState.init(l.b.shape))
              for name, l in adapters.items()}
    rng = np.random.Generator(np.random.Philox(key=derive_seed(cfg.seed, "batches")))
    n_train = task.x_train.shape[0]
    loss_fn = (_classification_loss if task.kind == "token-classification"
               else _regression_loss)

    train_loss: list[float] = []
    eval_steps: list[int] = [0]
    eval_metrics: list[float] = [evaluate(adapted, task)]
    diverged = False

    for step in range(cfg.steps):
        idx = rng.integers(0, n_train, size=cfg.batch_size)
        xb, yb = task.x_train[idx], task.y_train[idx]
        out, caches = adapted.forward_cached(xb)
        loss, upstream = loss_fn(out, yb)
        train_loss.append(loss)
        if not np.isfinite(loss):
            diverged = True
            break
        grads = adapted.backward(caches, upstream)
        try:
            for name, layer in adapters.items():
                ga, gb = grads[name]
                state_a, state_b = states[name]
                layer.a, state_a = adam_step(state_a, layer.a, ga, cfg.lr)
                layer.b, state_b = adam_step(state_b, layer.b, gb, cfg.lr)
                states[name] = (state_a, state_b)
        except DivergenceError:
            diverged = True
            break
        if (step + 1) % cfg.eval_every == 0 and (step + 1) != cfg.steps:
            eval_steps.append(step + 1)
            eval_metrics.append(evaluate(adapted, task))

    if not diverged and cfg.steps > 0:
        eval_steps.append(cfg.steps)
        eval_metrics.append(evaluate(adapted, task))
    final_metric = float("nan") if diverged else eval_metrics[-1]

    return RunReport(
        strategy=strategy_label,
        rank=cfg.rank,
        seed=cfg.seed,
        metric_name=task.metric_name,
        train_loss=train_loss,
        eval_steps=eval_steps,
        eval_metrics=eval_metrics,
        final_metric=final_metric,
        trainable_params=adapted.trainable_params(),
        diverged=diverged,
        wall_time_s=time.perf_counter() - t0,
    )


def finetune(model: ToyModel, strategy: InitStrategy, task: Task, cfg: TrainConfig,
             approx_results: dict[str, ApproxResult] | None = None) -> RunReport:
    """Initialize adapters under `strategy` and train them on `task`."""
    adapted = adapt_model(model, strategy, cfg.rank, cfg.seed,
                          approx_results=approx_results, scaling=cfg.scaling,
                          use_residual=cfg.use_residual)
    return train_adapted(adapted, task, cfg, strategy.kind)


def approximate_adapted_layers(model: ToyModel, approx_cfg: ApproxConfig,
                               cache: ApproxCache | None = None) -> dict[str, ApproxResult]:
    """Run the weight approximation for every adapted layer.

    Per-layer seeds derive from (approx_cfg.seed, layer name); init sigma
    defaults to the model's global sigma-bar over the adapted layers. With a
    cache, previously computed layers are loaded instead of recomputed
    (unless checkpoints are requested, which the cache does not hold).
    """
    sigma = approx_cfg.init_sigma if approx_cfg.init_sigma is not None else model_sigma_bar(model)
    results = {}
    for ls in model.spec.adapted_layers():
        layer_cfg = replace(approx_cfg, seed=derive_seed(approx_cfg.seed, ls.name),
                            init_sigma=sigma)
        w0 = model.weights[ls.name]
        if cache is not None and not layer_cfg.checkpoint_steps:
            _, result, _ = cached_approximate(
                cache, model.model_id(), ls.name, ls.role, w0, layer_cfg
            )
        else:
            result = approximate(w0, layer_cfg)
        results[ls.name] = result
    return results


def compare_strategies(model: ToyModel, task: Task, cfg: TrainConfig,
                       strategies: dict[str, InitStrategy],
                       approx_results: dict[str, ApproxResult] | None = None
                       ) -> dict[str, RunReport]:
    """One finetune per labelled strategy, same task and seed, for overlays."""
    return {
        label: finetune(model, strat, task, replace(cfg), approx_results=approx_results)
        for label, strat in strategies.items()
    }


# --------------------------------------------------------------------------
# Sweeps
# --------------------------------------------------------------------------

def sweep_approx_degree(model: ToyModel, task: Task, train_cfg: TrainConfig,
                        approx_cfg: ApproxConfig,
                        checkpoint_steps: Sequence[int] = DEFAULT_CHECKPOINT_GRID,
                        warn=None) -> list[dict]:
    """Fine-tune from approximation checkpoints of increasing optimization depth.

    Returns one row per checkpoint: the checkpoint step, the mean
    reconstruction MSE across adapted layers at that step, and the final
    fine-tuned metric. Checkpoints beyond the approximation run are skipped
    with a warning.
    """
    wanted = tuple(sorted(set(checkpoint_steps)))
    run_cfg = replace(approx_cfg, checkpoint_steps=wanted)
    results = approximate_adapted_layers(model, run_cfg)

    rows = []
    for step in wanted:
        missing = [name for name, res in results.items() if step not in res.checkpoints]
        if missing:
            if warn is not None:
                warn(f"checkpoint step {step} not available (run has "
                     f"{run_cfg.steps} steps); row skipped")
            continue
        factors = {name: res.checkpoints[step] for name, res in results.items()}
        approx_mse = float(np.mean([
            np.mean((model.weights[name] - b @ a) ** 2)
            for name, (a, b) in factors.items()
        ]))
        adapted = adapt_model_from_factors(model, factors, scaling=train_cfg.scaling)
        report = train_adapted(adapted, task, train_cfg, f"checkpoint-{step}")
        rows.append({
            "checkpoint_step": step,
            "approx_mse": approx_mse,
            "final_metric": report.final_metric,
            "seed": train_cfg.seed,
            "diverged": report.diverged,
        })
    return rows


def sweep_sigma(model: ToyModel, task: Task, train_cfg: TrainConfig,
                sigmas: Sequence[float] = DEFAULT_SIGMA_GRID,
                seeds: Sequence[int] = (0, 1)) -> list[dict]:
    """Normal-init std sweep: one inilora-alpha(sigma) finetune per (sigma, seed)."""
    rows = []
    for sigma in sigmas:
        for seed in seeds:
            cfg = replace(train_cfg, seed=seed)
            report = finetune(model, InitStrategy.alpha(sigma), task, cfg)
            rows.append({
                "sigma": sigma,
                "seed": seed,
                "final_metric": report.final_metric,
                "diverged": report.diverged,
            })
    return rows


def distribution_grid(model: ToyModel) -> dict[str, InitStrategy]:
    """The initialization-comparison grid, keyed by report label."""
    sigma_bar = model_sigma_bar(model)
    return {
        "normal-sigma-bar": InitStrategy.iter0(sigma_bar),
        "normal-0.5": InitStrategy.alpha(0.5),
        "kaiming-normal": InitStrategy.beta_kn(),
        "kaiming-uniform": InitStrategy.beta_ku(),
        "lora": InitStrategy.lora(),
    }


def sweep_distributions(model: ToyModel, task: Task, train_cfg: TrainConfig,
                        seeds: Sequence[int] = (0, 1),
                        grid: dict[str, InitStrategy] | None = None) -> list[dict]:
    """Initialization-distribution sweep over the standard grid."""
    if grid is None:
        grid = distribution_grid(model)
    rows = []
    for label, strategy in grid.items():
        for seed in seeds:
            cfg = replace(train_cfg, seed=seed)
            report = finetune(model, strategy, task, cfg)
            rows.append({
                "distribution": label,
                "seed": seed,
                "final_metric": report.final_metric,
                "diverged": report.diverged,
            })
    return rows


def summarize(rows: list[dict], group_key: str) -> list[dict]:
    """Mean +- std of final_metric per group, excluding diverged runs."""
    groups: dict = {}
    for row in rows:
        groups.setdefault(row[group_key], []).append(row)
    out = []
    for key, members in groups.items():
        completed = [m["final_metric"] for m in members if not m["diverged"]]
        out.append({
            group_key: key,
            "metric_mean": float(np.mean(completed)) if completed else float("nan"),
            "metric_std": float(np.std(completed)) if completed else float("nan"),
            "n_runs": len(members),
            "n_diverged": sum(1 for m in members if m["diverged"]),
        })
    return out


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average; entry i averages values[max(0, i-window+1) .. i]."""
    values = np.asarray(values, dtype=np.float64)
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    cum = np.cumsum(values)
    out = np.empty_like(values)
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        total = cum[i] - (cum[lo - 1] if lo > 0 else 0.0)
        out[i] = total / (i - lo + 1)
    return out


# --------------------------------------------------------------------------
# Report emission
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return str(v).lower()
    return str(v)


def write_rows_csv(path, rows: list[dict], columns: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(list(columns))
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])
    return path


def write_loss_curves_csv(path, reports: dict[str, RunReport]) -> Path:
    """Long-format (step, value, series) training-loss curves for overlay plots."""
    rows = []
    for label, report in reports.items():
        for step, loss in enumerate(report.train_loss):
            rows.append({"step": step, "value": loss, "series": label})
    return write_rows_csv(path, rows, ["step", "value", "series"])


def experiment_dir(out_root, experiment: str, timestamp: str | None = None) -> Path:
    """<out_root>/<experiment>/<utc timestamp>/ created and returned."""
    if timestamp is None:
        timestamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S.%f")
    path = Path(out_root) / experiment / timestamp
    path.mkdir(parents=True, exist_ok=True)
    return path
