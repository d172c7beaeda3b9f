"""Loss, Adam, the mini-batch training loop, and the gradient-check harness."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .graphs import Laplacian, AdjacencyMatrix, normalized_laplacian
from .model import (
    MODES,
    ModelDims,
    ModelParams,
    Propagators,
    PROB_CLAMP,
    backward_window,
    build_propagators,
    forward_window,
    init_params,
)
from .universe import WindowSample

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

#: CLI-level propagator modes; single-X picks one of the three graphs.
CLI_MODES = ("single-S", "single-I", "single-T", "multi", "dynamic", "none")


def core_mode(mode: str) -> str:
    """Map a CLI-level mode to the network-level propagator mode."""
    if mode in ("single-S", "single-I", "single-T"):
        return "single"
    if mode in MODES:
        return mode
    raise ValueError(f"unknown mode {mode!r}")


def select_laplacians(mode: str, laplacians: Sequence[Laplacian]) -> list[Laplacian]:
    """Pick the laplacians a mode needs from the (S, I, T) triple."""
    if mode in ("dynamic", "none"):
        return []
    by_kind = {lap.kind: lap for lap in laplacians}
    try:
        if mode == "multi":
            return [by_kind["shareholding"], by_kind["industry"], by_kind["topicality"]]
        key = {"single-S": "shareholding", "single-I": "industry", "single-T": "topicality"}[mode]
        return [by_kind[key]]
    except KeyError as exc:
        raise ValueError(f"mode {mode!r} requires the {exc.args[0]} graph") from exc


def cross_entropy_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross entropy over stocks, with probabilities clamped
    to [1e-12, 1 - 1e-12] before the logs."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if probs.shape != labels.shape:
        raise ValueError(f"length mismatch: {probs.shape} vs {labels.shape}")
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(labels * np.log(p) + (1.0 - labels) * np.log1p(-p)))


@dataclass
class TrainConfig:
    """Hyperparameters; defaults follow the tuned reference configuration
    (lag 5, kernel size 1, Adam at 0.01, batch 32, hidden widths 16/32)."""

    lag: int = 5
    kernel_size: int = 1
    mode: str = "multi"
    learning_rate: float = 0.01
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    shuffle: bool = False
    n_features: int = 4
    gcn_hidden: int = 16
    gcn_out: int = 32
    gru_hidden: int = 32
    gru_out: int = 32

    def __post_init__(self) -> None:
        if self.lag < 1:
            raise ValueError("lag must be >= 1")
        if self.kernel_size < 1:
            raise ValueError("kernel size must be >= 1")
        if self.mode not in CLI_MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def model_dims(self, n_stocks: int) -> ModelDims:
        return ModelDims(
            n_stocks=n_stocks,
            n_features=self.n_features,
            gcn_hidden=self.gcn_hidden,
            gcn_out=self.gcn_out,
            gru_hidden=self.gru_hidden,
            gru_out=self.gru_out,
            kernel_size=self.kernel_size,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in mapping:
                raw = mapping[f.name]
                if f.type in ("int", int):
                    kwargs[f.name] = int(raw)
                elif f.type in ("float", float):
                    kwargs[f.name] = float(raw)
                elif f.type in ("bool", bool):
                    kwargs[f.name] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
                else:
                    kwargs[f.name] = raw
        return cls(**kwargs)


def read_config_file(path: str | Path) -> dict[str, str]:
    """key=value lines; blank lines and # comments ignored."""
    values: dict[str, str] = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{line_no}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Bias-corrected first/second moment accumulators, one pair per tensor."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={name: np.zeros_like(t) for name, t in params.named_tensors()},
            v={name: np.zeros_like(t) for name, t in params.named_tensors()},
        )


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    learning_rate: float,
) -> tuple[ModelParams, AdamState]:
    """One in-place Adam update, applied tensor by tensor in fixed order."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, tensor in params.named_tensors():
        g = grads[name]
        if not np.isfinite(g).all():
            raise ValueError(f"non-finite gradient for tensor {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        tensor -= learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based; 0 = no epoch finished

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def write_csv(self, path: str | Path) -> None:
        # Wall-clock is deliberately left out so identical runs produce
        # byte-identical files; timings live in the run manifest.
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "val_accuracy"])
            for i in range(self.epochs_run):
                writer.writerow(
                    [
                        i + 1,
                        f"{self.train_loss[i]:.17g}",
                        f"{self.val_loss[i]:.17g}",
                        f"{self.val_accuracy[i]:.17g}",
                    ]
                )


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the partial history."""

    def __init__(self, message: str, history: TrainHistory):
        super().__init__(message)
        self.history = history


def predict_samples(
    samples: Sequence[WindowSample], params: ModelParams, props: Propagators
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked probabilities and labels over samples: two (M, N) arrays."""
    probs = np.empty((len(samples), params.dims.n_stocks))
    labels = np.empty_like(probs)
    for i, sample in enumerate(samples):
        yhat, _ = forward_window(sample.window, params, props)
        probs[i] = yhat
        labels[i] = sample.label
    return probs, labels


def mean_loss_accuracy(
    samples: Sequence[WindowSample],
    params: ModelParams,
    props: Propagators,
    threshold: float = 0.5,
) -> tuple[float, float]:
    probs, labels = predict_samples(samples, params, props)
    loss = float(
        np.mean([cross_entropy_loss(probs[i], labels[i]) for i in range(len(samples))])
    )
    accuracy = float(np.mean((probs > threshold).astype(np.int64) == labels))
    return loss, accuracy


def train(
    train_samples: Sequence[WindowSample],
    val_samples: Sequence[WindowSample],
    laplacians: Sequence[Laplacian] | None,
    config: TrainConfig,
    init: ModelParams | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Mini-batch Adam with validation-based early stopping.

    Batches walk the training samples in chronological order (seeded
    shuffling is opt-in). After each epoch the validation loss is computed;
    the best-validation parameters are kept and training stops after
    `patience` epochs without improvement, or at `max_epochs`. A non-finite
    loss aborts with the history collected so far.
    """
    if not train_samples or not val_samples:
        raise ValueError("train and validation splits must be nonempty")
    n_stocks = train_samples[0].window.shape[1]
    mode = core_mode(config.mode)
    if init is not None:
        params = init.copy()
        if params.mode != mode:
            raise ValueError(f"checkpoint mode {params.mode!r} does not match config mode {config.mode!r}")
    else:
        params = init_params(config.model_dims(n_stocks), mode, config.seed)
    params.validate()
    state = AdamState.for_params(params)
    shuffle_rng = np.random.default_rng(config.seed)

    history = TrainHistory()
    best_val = math.inf
    best_params = params.copy()
    epochs_since_best = 0

    n = len(train_samples)
    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        order = shuffle_rng.permutation(n) if config.shuffle else np.arange(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            batch = [train_samples[i] for i in order[start : start + config.batch_size]]
            props = build_propagators(params, laplacians)
            grad_sum: dict[str, np.ndarray] | None = None
            for sample in batch:
                yhat, trace = forward_window(sample.window, params, props)
                loss = cross_entropy_loss(yhat, sample.label)
                if not math.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite training loss at epoch {epoch}", history
                    )
                loss_sum += loss
                grads = backward_window(trace, sample.label, params)
                if grad_sum is None:
                    grad_sum = grads
                else:
                    for name in grad_sum:
                        grad_sum[name] += grads[name]
            scale = 1.0 / len(batch)
            for name in grad_sum:
                grad_sum[name] *= scale
            adam_step(params, grad_sum, state, config.learning_rate)

        props = build_propagators(params, laplacians)
        val_loss, val_acc = mean_loss_accuracy(val_samples, params, props)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", history)
        history.train_loss.append(loss_sum / n)
        history.val_loss.append(val_loss)
        history.val_accuracy.append(val_acc)
        history.epoch_seconds.append(time.perf_counter() - started)

        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
            history.best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= config.patience:
                break
    return best_params, history


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckResult:
    mode: str
    kernel_size: int
    per_tensor: dict[str, float]
    tolerance: float
    elapsed_seconds: float

    @property
    def max_rel_err(self) -> float:
        return max(self.per_tensor.values())

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def format(self) -> str:
        lines = [
            f"mode={self.mode} k={self.kernel_size} "
            f"max_rel_err={self.max_rel_err:.3e} "
            f"{'PASS' if self.passed else 'FAIL'} ({self.elapsed_seconds:.2f}s)"
        ]
        for name, err in sorted(self.per_tensor.items()):
            flag = "ok" if err < self.tolerance else "FAIL"
            lines.append(f"  {name:<14s} {err:.3e} {flag}")
        return "\n".join(lines)


def _random_laplacian(rng: np.random.Generator, n: int, kind: str, symmetric: bool) -> Laplacian:
    w = rng.uniform(0.0, 1.0, size=(n, n))
    w[rng.uniform(size=(n, n)) < 0.4] = 0.0
    if symmetric:
        w = np.triu(w, 1)
        w = w + w.T
    np.fill_diagonal(w, 0.0)
    return normalized_laplacian(AdjacencyMatrix(kind, w))


def gradcheck(
    mode: str,
    *,
    seed: int = 0,
    kernel_size: int = 1,
    n_stocks: int = 5,
    n_features: int = 3,
    gcn_hidden: int = 4,
    gcn_out: int = 4,
    gru_hidden: int = 4,
    gru_out: int = 4,
    lag: int = 3,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    corrupt_tensor: str | None = None,
) -> GradCheckResult:
    """Compare analytic gradients against central finite differences.

    Every entry of every trainable tensor is perturbed by +-step and the loss
    re-evaluated; the relative error uses max(|analytic|, |numeric|, 1e-6) as
    the denominator so near-zero gradients are compared on an absolute floor.
    `corrupt_tensor` is a self-test hook that perturbs one analytic gradient
    so the failure path can be exercised.
    """
    started = time.perf_counter()
    rng = np.random.default_rng(seed)
    dims = ModelDims(
        n_stocks=n_stocks,
        n_features=n_features,
        gcn_hidden=gcn_hidden,
        gcn_out=gcn_out,
        gru_hidden=gru_hidden,
        gru_out=gru_out,
        kernel_size=kernel_size,
    )
    if mode == "single":
        laplacians = [_random_laplacian(rng, n_stocks, "industry", symmetric=False)]
    elif mode == "multi":
        laplacians = [
            _random_laplacian(rng, n_stocks, "shareholding", symmetric=True),
            _random_laplacian(rng, n_stocks, "industry", symmetric=False),
            _random_laplacian(rng, n_stocks, "topicality", symmetric=False),
        ]
    else:
        laplacians = []
    params = init_params(dims, mode, seed)
    window = rng.uniform(0.0, 1.0, size=(lag, n_stocks, n_features))
    labels = rng.integers(0, 2, size=n_stocks).astype(np.float64)

    def loss_now() -> float:
        props = build_propagators(params, laplacians)
        yhat, _ = forward_window(window, params, props)
        return cross_entropy_loss(yhat, labels)

    props = build_propagators(params, laplacians)
    yhat, trace = forward_window(window, params, props)
    analytic = backward_window(trace, labels, params)
    if corrupt_tensor is not None:
        analytic[corrupt_tensor] = analytic[corrupt_tensor] + 0.5

    per_tensor: dict[str, float] = {}
    for name, tensor in params.named_tensors():
        g_ana = analytic[name]
        worst = 0.0
        flat = tensor.reshape(-1)
        g_flat = g_ana.reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + step
            plus = loss_now()
            flat[idx] = original - step
            minus = loss_now()
            flat[idx] = original
            numeric = (plus - minus) / (2.0 * step)
            denom = max(abs(g_flat[idx]), abs(numeric), 1e-6)
            worst = max(worst, abs(g_flat[idx] - numeric) / denom)
        per_tensor[name] = worst
    return GradCheckResult(
        mode=mode,
        kernel_size=kernel_size,
        per_tensor=per_tensor,
        tolerance=tolerance,
        elapsed_seconds=time.perf_counter() - started,
    )


def gradcheck_all(seed: int = 0, tolerance: float = 1e-4) -> list[GradCheckResult]:
    """The canonical suite: both polynomial branches plus the dynamic mode."""
    cases = [("single", 1), ("single", 2), ("multi", 1), ("multi", 2), ("dynamic", 1)]
    return [
        gradcheck(mode, kernel_size=k, seed=seed, tolerance=tolerance) for mode, k in cases
    ]
