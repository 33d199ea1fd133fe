"""Traffic time-series forecasting with a linear reduction plus EHH network.

Input is a rectangular CSV whose header holds node ids and whose rows are
consecutive time stamps (an optional leading timestamp column is skipped).
Each supervised sample is a window of the last ``window`` readings of all
nodes; the target is every node's reading ``horizon`` steps after the window.
One model is trained per horizon.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .ehh import LinearEhh, fit_linear_ehh
from .errors import ConfigError, DataError, ShapeError

log = logging.getLogger(__name__)

TIME_COLUMNS = {"", "time", "timestamp", "date", "datetime"}


@dataclass
class SeriesDataset:
    values: np.ndarray  # (length, n_nodes), no missing entries
    nodes: List[str]
    interval_min: float = 5.0
    mean: np.ndarray = None
    std: np.ndarray = None
    imputed: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.nodes):
            raise ShapeError(f"values {self.values.shape} do not match {len(self.nodes)} nodes")
        if not np.all(np.isfinite(self.values)):
            raise DataError("dataset contains missing or non-finite values")
        if self.mean is None:
            self.mean = self.values.mean(axis=0)
            std = self.values.std(axis=0)
            self.std = np.where(std > 0, std, 1.0)

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    def standardized(self) -> np.ndarray:
        return (self.values - self.mean) / self.std

    def destandardize(self, z) -> np.ndarray:
        return np.asarray(z) * self.std + self.mean


def _interpolate_columns(values: np.ndarray) -> int:
    """Fill NaNs per column by linear interpolation (edges take the nearest value)."""
    filled = 0
    t = np.arange(values.shape[0])
    for j in range(values.shape[1]):
        col = values[:, j]
        bad = np.isnan(col)
        if bad.all():
            raise DataError(f"column {j} has no numeric values")
        if bad.any():
            col[bad] = np.interp(t[bad], t[~bad], col[~bad])
            filled += int(bad.sum())
    return filled


def ingest_csv(path, interval_min: float = 5.0) -> SeriesDataset:
    """Parse a node-by-time CSV; empty or ``nan`` cells are interpolated."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    skip = 1 if header and header[0].lower() in TIME_COLUMNS else 0
    nodes = header[skip:]
    if not nodes:
        raise DataError(f"{path}: no node columns in header")
    data = []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
        vals = []
        for c, cell in enumerate(row[skip:], start=skip + 1):
            cell = cell.strip()
            if cell == "" or cell.lower() in ("nan", "na", "null"):
                vals.append(np.nan)
                continue
            try:
                vals.append(float(cell))
            except ValueError:
                raise DataError(f"{path}: row {r}, column {c}: non-numeric cell {cell!r}") from None
        data.append(vals)
    if not data:
        raise DataError(f"{path}: no data rows")
    values = np.array(data, dtype=np.float64)
    imputed = _interpolate_columns(values)
    if imputed:
        log.info("%s: interpolated %d missing cells", path, imputed)
    return SeriesDataset(values, nodes, interval_min, imputed=imputed)


def write_csv(dataset: SeriesDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(dataset.nodes)
        for row in dataset.values:
            w.writerow([repr(float(v)) for v in row])


def synthetic_series(
    n_nodes: int = 15,
    length: int = 2016,
    seed: int = 0,
    period: int = 288,
    ar=(0.5, 0.3, 0.1),
    noise: float = 1.0,
) -> SeriesDataset:
    """Speed-like series: a daily sinusoid plus an autoregressive disturbance.

    The disturbance at each node depends on its own last two values and on
    the current value of the neighbouring node, so only lags 0-2 carry
    information beyond the sinusoid. Defaults give one week at 5-minute
    cadence.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    phase = rng.uniform(0, 2 * np.pi, n_nodes)
    level = rng.uniform(50.0, 65.0, n_nodes)
    amp = rng.uniform(6.0, 12.0, n_nodes)
    base = level + amp * np.sin(2 * np.pi * t[:, None] / period + phase)
    a1, a2, c = ar
    z = np.zeros((length, n_nodes))
    eps = rng.normal(0.0, noise, (length, n_nodes))
    for k in range(2, length):
        z[k] = a1 * z[k - 1] + a2 * z[k - 2] + eps[k]
        z[k] += c * np.roll(z[k], 1)
    return SeriesDataset(base + z, [f"n{i}" for i in range(n_nodes)], 5.0)


def n_samples(length: int, window: int, horizon: int) -> int:
    return length - window - horizon + 1


def make_windows(values: np.ndarray, window: int, horizon: int):
    """Supervised pairs.

    Feature ``(node, lag)`` sits at column ``node * window + lag`` where lag 0
    is the most recent reading. Sample ``s`` reads rows ``s .. s+window-1``
    and targets row ``s + window - 1 + horizon``.
    """
    L, N = values.shape
    S = n_samples(L, window, horizon)
    if window < 1 or horizon < 1:
        raise ConfigError("window and horizon must be >= 1")
    if S < 1:
        raise DataError(f"series of length {L} too short for window {window} and horizon {horizon}")
    idx = np.arange(S)[:, None] + (window - 1 - np.arange(window))[None, :]  # (S, lag)
    X = values[idx]  # (S, lag, N)
    X = X.transpose(0, 2, 1).reshape(S, N * window)
    Y = values[np.arange(S) + window - 1 + horizon]
    return X, Y


def feature_names(nodes: Sequence[str], window: int) -> List[str]:
    return [f"{n}@lag{lag}" for n in nodes for lag in range(window)]


def split(n: int, fractions=(0.6, 0.2, 0.2)):
    """Chronological train/val/test index ranges."""
    if n < 5:
        raise DataError(f"need at least 5 samples to split, got {n}")
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    n_train = min(max(n_train, 1), n - 2)
    n_val = min(max(n_val, 1), n - n_train - 1)
    return (np.arange(0, n_train), np.arange(n_train, n_train + n_val), np.arange(n_train + n_val, n))


def evaluate(predictions, targets) -> Dict[str, float]:
    """MAE, R^2 (against the global target mean) and RMSE.

    >>> m = evaluate([1.0, 3.0], [1.0, 2.0]); (m["MAE"], m["R2"], round(m["RMSE"], 4))
    (0.5, -1.0, 0.7071)
    """
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"predictions {p.shape} and targets {y.shape} differ")
    if y.size == 0:
        raise DataError("no targets to evaluate")
    err = y - p
    ss_res = float(np.sum(err**2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    undefined = ss_tot == 0.0
    return {
        "MAE": float(np.mean(np.abs(err))),
        "R2": float("nan") if undefined else 1.0 - ss_res / ss_tot,
        "RMSE": float(np.sqrt(ss_res / y.size)),
        "R2_undefined": undefined,
    }


@dataclass
class ForecastConfig:
    window: int = 12
    d_ehh: int = 16
    lam: float = 1e-4
    steps: int = 300
    lr: float = 0.01
    cap: Optional[int] = 64
    seed: int = 0

    def __post_init__(self):
        if self.window < 1 or self.d_ehh < 1 or self.steps < 0 or self.lr <= 0 or self.lam < 0:
            raise ConfigError("invalid forecast configuration")


@dataclass
class ForecastResult:
    horizon: int
    test: Dict[str, float]
    val: Dict[str, float]
    persistence: Dict[str, float]
    model: LinearEhh
    importance: List[tuple] = field(default_factory=list)  # (component, sigma)

    def metrics_json(self) -> dict:
        return {
            "horizon": self.horizon,
            "MAE": self.test["MAE"],
            "R2": self.test["R2"],
            "RMSE": self.test["RMSE"],
            "R2_undefined": self.test["R2_undefined"],
            "params": self.model.n_params(),
            "neurons": int(self.model.ehh.n_nodes),
            "val": self.val,
            "persistence": self.persistence,
        }

    def write(self, metrics_path, anova_path) -> None:
        with open(metrics_path, "w") as fh:
            json.dump(self.metrics_json(), fh, indent=2, sort_keys=True)
        with open(anova_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["component", "sigma"])
            for name, s in self.importance:
                w.writerow([name, repr(float(s))])

    def lag_importance(self, window: int) -> np.ndarray:
        """Total importance per lag, summed over nodes."""
        sig = np.array([s for _, s in self.importance]).reshape(-1, window)
        return sig.sum(axis=0)


def forecast_run(dataset: SeriesDataset, horizon: int, config: ForecastConfig = ForecastConfig()) -> ForecastResult:
    """Train on the first 60% of samples, select on the next 20%, test on the rest."""
    X, Y = make_windows(dataset.values, config.window, horizon)
    tr, va, te = split(X.shape[0])
    rng = np.random.default_rng([config.seed, horizon])
    model = fit_linear_ehh(
        X[tr], Y[tr], config.d_ehh, config.lam, rng, cap=config.cap, steps=config.steps, lr=config.lr,
        X_val=X[va], Y_val=Y[va],
    )
    last = X[:, :: config.window]  # lag-0 column of every node
    sigma = model.importance(X[tr])
    return ForecastResult(
        horizon,
        test=evaluate(model.predict(X[te]), Y[te]),
        val=evaluate(model.predict(X[va]), Y[va]),
        persistence=evaluate(last[te], Y[te]),
        model=model,
        importance=list(zip(feature_names(dataset.nodes, config.window), sigma.tolist())),
    )


def _run_one(args):
    dataset, h, config = args
    return forecast_run(dataset, h, config)


def forecast_all(dataset: SeriesDataset, horizons=(3, 6, 9), config: ForecastConfig = ForecastConfig(),
                 workers: int = 1) -> List[ForecastResult]:
    """One model per horizon; ``workers > 1`` trains horizons in parallel processes."""
    jobs = [(dataset, int(h), config) for h in horizons]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_one, jobs))
    return [_run_one(j) for j in jobs]


def config_dict(config: ForecastConfig) -> dict:
    return asdict(config)
