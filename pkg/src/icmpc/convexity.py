"""Numerical convexity verification and the bivariate surface-fitting study.

The convex architectures are probed with random midpoint tests rather than
proved: a probe draws two points and an interpolation weight and checks
f(lam*x + (1-lam)*y) <= lam*f(x) + (1-lam)*f(y) + tol per output
coordinate. The same machinery doubles as a negative control on the
unconstrained baselines, which must violate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict

import numpy as np

from . import models as m
from . import training as tr

TOY_FUNCTIONS = ("f1", "f2", "f3")
GRID_SIDE = 41


def toy_function(fid: str, x, y):
    """Three non-convex bivariate benchmark surfaces.

    f3's x^(4/3) uses the real odd-root convention (cbrt(x)**4), so the
    term is defined and smooth-ish for x < 0; (x**2)**(2/3) is NOT used.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if fid == "f1":
        return -np.cos(4.0 * x ** 2 + 4.0 * y ** 2)
    if fid == "f2":
        inner = np.minimum(x ** 2 + y ** 2, (2 * x - 1) ** 2 + (2 * y - 1) ** 2 - 2.0)
        return np.maximum(inner, -((2 * x + 1) ** 2) - (2 * y + 1) ** 2 + 4.0)
    if fid == "f3":
        pow43 = np.cbrt(x) ** 4
        return x ** 2 * (4.0 - 2.1 * x ** 2 + pow43) - 4.0 * y ** 2 * (1.0 - y ** 2) + x * y
    raise ValueError(f"unknown toy function {fid!r}")


def make_surface_dataset(fid: str, n_train: int = 2000, n_test: int = 500,
                         seed: int = 0, lo: float = -1.0, hi: float = 1.0):
    """Uniform random samples of a toy surface over [lo, hi]^2, split
    train/test; deterministic from the seed."""
    if n_train + n_test < 4:
        raise ValueError("need at least 4 points")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(n_train + n_test, 2))
    vals = toy_function(fid, pts[:, 0], pts[:, 1])
    return (pts[:n_train], vals[:n_train]), (pts[n_train:], vals[n_train:])


@dataclass
class ConvexityReport:
    architecture: str
    probes: int
    violations: int
    max_violation: float
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


def midpoint_convexity_check(fwd, input_dim: int, probes: int = 1000, seed: int = 0,
                             lo: float = -2.0, hi: float = 2.0, tol: float = 1e-8,
                             architecture: str = "unknown") -> ConvexityReport:
    """``fwd`` maps a flat input vector to an output vector (values only).
    A non-finite output counts as a violation with infinite magnitude."""
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = np.random.default_rng(seed)
    violations = 0
    worst = 0.0
    for _ in range(probes):
        a = rng.uniform(lo, hi, size=input_dim)
        b = rng.uniform(lo, hi, size=input_dim)
        lam = rng.uniform(0.0, 1.0)
        fa, fb = np.asarray(fwd(a)), np.asarray(fwd(b))
        fm = np.asarray(fwd(lam * a + (1.0 - lam) * b))
        if not (np.all(np.isfinite(fa)) and np.all(np.isfinite(fb)) and np.all(np.isfinite(fm))):
            violations += 1
            worst = float("inf")
            continue
        gap = fm - (lam * fa + (1.0 - lam) * fb)
        peak = float(gap.max())
        if peak > tol:
            violations += 1
            worst = max(worst, peak)
    return ConvexityReport(architecture=architecture, probes=probes,
                           violations=violations, max_violation=worst, seed=seed)


def model_midpoint_check(params, spec: m.ModelSpec, probes: int = 1000, seed: int = 0,
                         lo: float = -2.0, hi: float = 2.0, tol: float = 1e-8) -> ConvexityReport:
    shape = (spec.sequence_length, spec.input_dim)

    def fwd(flat):
        return m.predict(flat.reshape(shape), params, spec)

    return midpoint_convexity_check(fwd, spec.sequence_length * spec.input_dim,
                                    probes=probes, seed=seed, lo=lo, hi=hi, tol=tol,
                                    architecture=spec.architecture)


@dataclass
class MonotonicityReport:
    architecture: str
    probes: int
    flags: int
    max_decrease: float
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


def monotonicity_check(fwd_expanded, sequence_length: int, input_dim: int,
                       probes: int = 500, seed: int = 0, delta: float = 1e-3,
                       tol: float = 1e-10, architecture: str = "unknown") -> MonotonicityReport:
    """Perturb one coordinate of the +x half of the expanded input upward
    while holding the -x half fixed; flag any output decrease beyond tol.

    ``fwd_expanded`` maps an expanded input (T, 2*d_in) to output values.
    """
    rng = np.random.default_rng(seed)
    flags = 0
    worst = 0.0
    for _ in range(probes):
        x = rng.uniform(-2.0, 2.0, size=(sequence_length, input_dim))
        xhat = np.concatenate([x, -x], axis=-1)
        t = int(rng.integers(0, sequence_length))
        j = int(rng.integers(0, input_dim))
        bumped = xhat.copy()
        bumped[t, j] += delta
        base = np.asarray(fwd_expanded(xhat))
        moved = np.asarray(fwd_expanded(bumped))
        drop = float((base - moved).max())
        if drop > tol:
            flags += 1
            worst = max(worst, drop)
    return MonotonicityReport(architecture=architecture, probes=probes,
                              flags=flags, max_decrease=worst, seed=seed)


def model_monotonicity_check(params, spec: m.ModelSpec, probes: int = 500,
                             seed: int = 0) -> MonotonicityReport:
    def fwd(xhat):
        return m.forward_expanded(xhat, params, spec).value

    return monotonicity_check(fwd, spec.sequence_length, spec.input_dim,
                              probes=probes, seed=seed, architecture=spec.architecture)


# ---------------------------------------------------------------------------
# surface fitting

@dataclass
class SurfaceFitConfig:
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0
    epochs: int = 1500
    learning_rate: float = 5e-3
    batch_size: int = 256
    patience: int = 200
    d_model: int = 64
    d_ff: int = 128
    hidden_dim: int = 64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SurfaceFitConfig":
        return cls(**d)


@dataclass
class FitReport:
    function: str
    architecture: str
    test_mse: float
    r2: float
    training_time_s: float
    mean_epoch_time_s: float
    epochs_run: int
    failed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _surface_spec(architecture: str, cfg: SurfaceFitConfig) -> m.ModelSpec:
    # Scalar inputs are presented as length-1 sequences.
    return m.ModelSpec(architecture, input_dim=2, output_dim=1, sequence_length=1,
                       d_model=cfg.d_model, d_ff=cfg.d_ff, hidden_dim=cfg.hidden_dim)


def fit_surface(architecture: str, fid: str, cfg: SurfaceFitConfig):
    """Train one model on a toy surface; returns the fit report, the dense
    prediction grid (x, y, true, pred) and the trained model bundle."""
    if architecture not in ("iceot", "iclstm"):
        raise ValueError(f"surface fitting supports iceot/iclstm, got {architecture!r}")
    (x_tr, y_tr), (x_te, y_te) = make_surface_dataset(fid, cfg.n_train, cfg.n_test, cfg.seed)
    spec = _surface_spec(architecture, cfg)

    x_scaler = tr.MinMaxScaler.fit(x_tr)
    y_scaler = tr.MinMaxScaler.fit(y_tr[:, None])
    xs = x_scaler.transform(x_tr)[:, None, :]
    ys = y_scaler.transform(y_tr[:, None])

    params = m.init_params(spec, np.random.default_rng(cfg.seed))
    train_cfg = tr.TrainConfig(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                               max_epochs=cfg.epochs, patience=cfg.patience, seed=cfg.seed)
    tic = time.perf_counter()
    result = tr.train(params, spec, xs, ys, train_cfg)
    elapsed = time.perf_counter() - tic

    def predict_raw(pts: np.ndarray) -> np.ndarray:
        scaled = x_scaler.transform(pts)[:, None, :]
        out = m.predict(scaled, result.params, spec)
        return y_scaler.inverse(out)[:, 0]

    pred_te = predict_raw(x_te)
    test_mse = float(((pred_te - y_te) ** 2).mean())
    ss_res = float(((y_te - pred_te) ** 2).sum())
    ss_tot = float(((y_te - y_te.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot

    axis = np.linspace(-1.0, 1.0, GRID_SIDE)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    grid_pts = np.column_stack([gx.ravel(), gy.ravel()])
    grid_true = toy_function(fid, grid_pts[:, 0], grid_pts[:, 1])
    grid_pred = predict_raw(grid_pts)

    report = FitReport(function=fid, architecture=architecture, test_mse=test_mse,
                       r2=r2, training_time_s=elapsed,
                       mean_epoch_time_s=float(np.mean(result.epoch_times)),
                       epochs_run=len(result.telemetry), failed=result.failed)
    grid = np.column_stack([grid_pts, grid_true, grid_pred])
    bundle = {"params": result.params, "spec": spec,
              "x_scaler": x_scaler, "y_scaler": y_scaler}
    return report, grid, bundle


def write_grid_csv(path, fid: str, grid: np.ndarray) -> None:
    with open(path, "w") as fh:
        note = "; x^(4/3) uses the real odd-root branch cbrt(x)^4" if fid == "f3" else ""
        fh.write(f"# function={fid} domain=[-1,1]x[-1,1]{note}\n")
        fh.write("x,y,true,pred\n")
        for row in grid:
            fh.write(",".join(tr.format_float(v) for v in row) + "\n")
