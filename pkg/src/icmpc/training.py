"""Mini-batch trainer: Adam, non-negativity projection, early stopping,
gradient telemetry and checkpoint serialization.

NaN handling is deliberately permissive: an exploding batch is logged and
skipped, the parameters keep their last finite values (re-projected), and
training goes on. Only a sustained run of non-finite epochs marks the run
failed. Gradient clipping exists as a switch but defaults off: the
long-sequence stability comparison is only meaningful on raw gradients.
"""

from __future__ import annotations

import base64
import json
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .models import ModelSpec, forward, init_params

NAN_FAIL_STREAK = 5


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    validation_fraction: float = 0.2
    grad_clip: float | None = None

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochTelemetry:
    epoch: int
    train_loss: float
    val_loss: float
    max_grad_norm: float
    wall_time_s: float


@dataclass
class TrainResult:
    params: dict[str, Parameter]
    telemetry: list[EpochTelemetry]
    best_val_loss: float
    best_epoch: int
    failed: bool
    nan_epochs: int
    epoch_times: list[float] = field(default_factory=list)


class EarlyStopper:
    """Stop after `patience` consecutive epochs without a new best
    validation loss. Non-finite losses never count as improvements."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = -1
        self.stall = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if math.isfinite(val_loss) and val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.stall = 0
            return False
        self.stall += 1
        return self.stall >= self.patience


class AdamState:
    def __init__(self, params: dict[str, Parameter]):
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0


def adam_step(params: dict[str, Parameter], grads: dict[str, np.ndarray],
              state: AdamState, config: TrainConfig) -> bool:
    """Apply one bias-corrected Adam update in place, then project every
    constrained parameter back onto [0, inf).

    Returns False without touching anything when any gradient is
    non-finite; the caller logs that as a NaN event and continues.
    """
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            return False
    if config.grad_clip is not None:
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > config.grad_clip:
            grads = {k: g * (config.grad_clip / total) for k, g in grads.items()}
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    for name, g in grads.items():
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** state.t)
        v_hat = v / (1.0 - b2 ** state.t)
        p.value -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
        p.project()
    return True


def max_layer_grad_norm(grads: dict[str, np.ndarray]) -> float:
    """Max over parameters of the l2 norm of that parameter's gradient.
    Non-finite gradients poison the value to nan on purpose."""
    worst = 0.0
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            return float("nan")
        worst = max(worst, float(np.sqrt((g * g).sum())))
    return worst


def mse_loss(pred: ad.Node, target: np.ndarray) -> ad.Node:
    diff = ad.sub(pred, ad.constant(target))
    return ad.reduce_mean(ad.mul(diff, diff))


def _eval_loss(params, spec, x, y, batch_size) -> float:
    total, count = 0.0, 0
    for start in range(0, len(x), batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        pred = forward(xb, params, spec).value
        total += float(((pred - yb) ** 2).mean()) * len(xb)
        count += len(xb)
    return total / max(count, 1)


def chronological_split(x: np.ndarray, y: np.ndarray, validation_fraction: float):
    """Last fraction is validation; time series must not leak across the cut."""
    n_val = max(1, int(round(len(x) * validation_fraction)))
    n_train = len(x) - n_val
    if n_train < 1:
        raise ValueError("dataset too small for the requested validation fraction")
    return (x[:n_train], y[:n_train]), (x[n_train:], y[n_train:])


def train(params: dict[str, Parameter], spec: ModelSpec, x: np.ndarray, y: np.ndarray,
          config: TrainConfig) -> TrainResult:
    """Mean-squared-error training with early stopping on validation loss.

    ``x``: (n, T, d_in), ``y``: (n, output_dim), both already scaled.
    Returns the best-validation parameters and the full telemetry series,
    NaN epochs included.
    """
    if len(x) == 0:
        raise ValueError("empty dataset")
    if len(x) != len(y):
        raise ValueError(f"feature/target length mismatch: {len(x)} vs {len(y)}")
    (x_tr, y_tr), (x_val, y_val) = chronological_split(x, y, config.validation_fraction)

    rng = np.random.default_rng(config.seed)
    state = AdamState(params)
    stopper = EarlyStopper(config.patience)
    telemetry: list[EpochTelemetry] = []
    epoch_times: list[float] = []
    best_params = {k: p.copy() for k, p in params.items()}
    nan_epochs = 0
    nan_streak = 0
    failed = False

    for epoch in range(config.max_epochs):
        tic = time.perf_counter()
        order = rng.permutation(len(x_tr))
        epoch_loss, seen = 0.0, 0
        epoch_norm = 0.0
        epoch_norm_nan = False
        for start in range(0, len(x_tr), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss = mse_loss(forward(x_tr[idx], params, spec), y_tr[idx])
            loss_val = float(loss.value)
            grads = ad.backward(loss)
            norm = max_layer_grad_norm(grads)
            if math.isnan(norm):
                epoch_norm_nan = True
            else:
                epoch_norm = max(epoch_norm, norm)
            if math.isfinite(loss_val):
                epoch_loss += loss_val * len(idx)
                seen += len(idx)
            adam_step(params, grads, state, config)
        train_loss = epoch_loss / seen if seen else float("nan")
        val_loss = _eval_loss(params, spec, x_val, y_val, config.batch_size)
        wall = time.perf_counter() - tic
        epoch_times.append(wall)
        telemetry.append(EpochTelemetry(
            epoch=epoch, train_loss=train_loss, val_loss=val_loss,
            max_grad_norm=float("nan") if epoch_norm_nan else epoch_norm,
            wall_time_s=wall))

        epoch_is_nan = not (math.isfinite(train_loss) and math.isfinite(val_loss))
        if epoch_is_nan:
            nan_epochs += 1
            nan_streak += 1
            if nan_streak >= NAN_FAIL_STREAK:
                failed = True
                break
        else:
            nan_streak = 0

        should_stop = stopper.update(epoch, val_loss)
        if stopper.best_epoch == epoch:
            best_params = {k: p.copy() for k, p in params.items()}
        if should_stop:
            break

    if stopper.best_epoch < 0:
        failed = True  # every epoch was non-finite; nothing usable was seen
    return TrainResult(params=best_params, telemetry=telemetry,
                       best_val_loss=stopper.best, best_epoch=stopper.best_epoch,
                       failed=failed, nan_epochs=nan_epochs, epoch_times=epoch_times)


# ---------------------------------------------------------------------------
# min-max scaling

@dataclass
class MinMaxScaler:
    """Per-column [0, 1] scaling; degenerate columns map to 0."""

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, arr: np.ndarray) -> "MinMaxScaler":
        flat = arr.reshape(-1, arr.shape[-1])
        return cls(lo=flat.min(axis=0), hi=flat.max(axis=0))

    @property
    def span(self) -> np.ndarray:
        span = self.hi - self.lo
        return np.where(span > 0.0, span, 1.0)

    def transform(self, arr: np.ndarray) -> np.ndarray:
        return (arr - self.lo) / self.span

    def inverse(self, arr: np.ndarray) -> np.ndarray:
        return arr * self.span + self.lo


# ---------------------------------------------------------------------------
# stability sweep

@dataclass
class SweepCell:
    architecture: str
    sequence_length: int
    seed: int
    telemetry: list[EpochTelemetry]
    nan_epochs: int
    failed: bool
    median_grad_norm: float
    max_grad_norm: float
    spike_ratio: float

    @property
    def has_spike(self) -> bool:
        return self.nan_epochs > 0 or self.spike_ratio >= 10.0


def _grad_stats(telemetry: list[EpochTelemetry]) -> tuple[float, float, float]:
    finite = [t.max_grad_norm for t in telemetry if math.isfinite(t.max_grad_norm)]
    if not finite:
        return float("nan"), float("nan"), float("inf")
    med = float(np.median(finite))
    peak = float(max(finite))
    ratio = peak / med if med > 0 else float("inf")
    return med, peak, ratio


def run_sweep_cell(architecture: str, sequence_length: int, dataset, seed: int,
                   config: TrainConfig, spec_template: dict) -> SweepCell:
    x, y = dataset
    spec_kwargs = dict(spec_template)
    spec_kwargs.update(architecture=architecture, sequence_length=sequence_length,
                       input_dim=x.shape[-1], output_dim=y.shape[-1])
    spec = ModelSpec(**spec_kwargs)
    cfg = TrainConfig(**{**config.to_dict(), "seed": seed})
    params = init_params(spec, np.random.default_rng(seed))
    result = train(params, spec, x, y, cfg)
    med, peak, ratio = _grad_stats(result.telemetry)
    return SweepCell(architecture=architecture, sequence_length=sequence_length,
                     seed=seed, telemetry=result.telemetry, nan_epochs=result.nan_epochs,
                     failed=result.failed, median_grad_norm=med, max_grad_norm=peak,
                     spike_ratio=ratio)


def stability_sweep(architectures, sequence_lengths, dataset_fn, config: TrainConfig,
                    spec_template: dict | None = None, jobs: int = 1) -> list[SweepCell]:
    """Train every (architecture, sequence length) cell under identical
    split/optimizer/early-stopping settings; per-cell seeds are
    config.seed + cell index. Failures are recorded, never raised."""
    spec_template = dict(spec_template or {})
    tasks = []
    index = 0
    for arch in architectures:
        for n in sequence_lengths:
            tasks.append((arch, n, dataset_fn(n), config.seed + index))
            index += 1
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_sweep_cell, a, n, d, s, config, spec_template)
                       for a, n, d, s in tasks]
            return [f.result() for f in futures]
    return [run_sweep_cell(a, n, d, s, config, spec_template) for a, n, d, s in tasks]


# ---------------------------------------------------------------------------
# telemetry CSV

def format_float(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Inf" if x > 0 else "-Inf"
    return repr(float(x))


def write_telemetry_csv(path, telemetry: list[EpochTelemetry]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss,max_grad_norm,wall_time_s\n")
        for t in telemetry:
            fh.write(f"{t.epoch},{format_float(t.train_loss)},{format_float(t.val_loss)},"
                     f"{format_float(t.max_grad_norm)},{format_float(t.wall_time_s)}\n")


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, Parameter], spec: ModelSpec,
                    extra: dict | None = None) -> None:
    """Single JSON document: spec, auxiliary metadata and every tensor as a
    base64 little-endian float64 payload. Round-trips bit-exactly."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "spec": spec.to_dict(),
        "extra": extra or {},
        "params": [
            {
                "name": p.name,
                "shape": list(p.value.shape),
                "non_negative": p.non_negative,
                "data": base64.b64encode(np.ascontiguousarray(p.value, dtype="<f8").tobytes()).decode(),
            }
            for p in params.values()
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[dict[str, Parameter], ModelSpec, dict]:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"not valid JSON: {exc}") from exc
    for key in ("format_version", "spec", "params"):
        if key not in doc:
            raise CheckpointError(f"checkpoint missing field {key!r}")
    if doc["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported format_version {doc['format_version']!r}")
    spec = ModelSpec.from_dict(doc["spec"])
    params: dict[str, Parameter] = {}
    for entry in doc["params"]:
        for key in ("name", "shape", "non_negative", "data"):
            if key not in entry:
                raise CheckpointError(f"parameter entry missing field {key!r}")
        raw = np.frombuffer(base64.b64decode(entry["data"]), dtype="<f8")
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if raw.size != expected:
            raise CheckpointError(f"parameter {entry['name']!r} payload has {raw.size} "
                                  f"values, shape {entry['shape']} wants {expected}")
        value = raw.reshape(entry["shape"]).astype(np.float64).copy()
        params[entry["name"]] = Parameter(entry["name"], value, entry["non_negative"])
    return params, spec, doc.get("extra", {})
