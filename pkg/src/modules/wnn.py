"""Plaintext wavelet neural network with a Gaussian mother wavelet.

One hidden layer of wavelons, t_j = (sum_i w_ij x_i - b_j) / a_j, and a linear
output node yhat = sum_j W_j f(t_j). ``mode="exact"`` uses f(t) = exp(-t^2);
``mode="poly"`` uses the truncated Taylor form 1 - t^2 + t^4 / 2, which is the
only activation the encrypted trainer can evaluate.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from .datasets.model import Dataset
from .errors import ContractViolationError, DataLoadError, ShapeError
from .metrics import accuracy
from .reporting import BatchLogEntry, TrainReport

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

A_MIN = 1e-3
DECISION_THRESHOLD = 0.5

Mode = Literal["exact", "poly"]
StopRule = Literal["either", "both"]


@dataclass(frozen=True)
class WnnShape:
    nin: int
    nhn: Optional[int] = None
    nout: int = 1

    def __post_init__(self):
        if self.nin < 1:
            raise ShapeError(f"nin must be >= 1, got {self.nin}")
        if self.nhn is None:
            object.__setattr__(self, "nhn", self.nin)
        if self.nhn < 1:
            raise ShapeError(f"nhn must be >= 1, got {self.nhn}")
        if self.nout != 1:
            raise ShapeError("Only a single output node is supported")


@dataclass
class WnnParams:
    w: np.ndarray  # nin x nhn
    W: np.ndarray
    b: np.ndarray
    a: np.ndarray

    @property
    def shape(self) -> WnnShape:
        return WnnShape(nin=self.w.shape[0], nhn=self.w.shape[1])

    def copy(self) -> "WnnParams":
        return WnnParams(*(getattr(self, f.name).copy() for f in fields(self)))

    def groups(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class MomentumState:
    w: np.ndarray
    W: np.ndarray
    b: np.ndarray
    a: np.ndarray

    @classmethod
    def zeros(cls, shape: WnnShape) -> "MomentumState":
        return cls(
            w=np.zeros((shape.nin, shape.nhn)),
            W=np.zeros(shape.nhn),
            b=np.zeros(shape.nhn),
            a=np.zeros(shape.nhn),
        )

    def groups(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class Gradients:
    """Partials of the squared error with respect to each parameter group."""

    w: np.ndarray
    W: np.ndarray
    b: np.ndarray
    a: np.ndarray

    def groups(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class ForwardResult:
    yhat: float
    t: np.ndarray
    f: np.ndarray


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    eta: float = Field(0.1, gt=0)
    alpha: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(32, ge=1)
    convergence_epsilon: float = Field(1e-4, gt=0)
    max_epochs: int = Field(100, ge=0)
    target_accuracy: Optional[float] = None
    stop_rule: StopRule = "either"
    seed: int = 0
    workers: int = Field(1, ge=1)


# --- model ---------------------------------------------------------------------


def init_params(shape: WnnShape, rng: np.random.Generator) -> Tuple[WnnParams, MomentumState]:
    """Uniform draws on the open interval (0, 1), in the order w, W, b, a."""
    low = np.nextafter(0.0, 1.0)
    w = rng.uniform(low, 1.0, size=(shape.nin, shape.nhn))
    W = rng.uniform(low, 1.0, size=shape.nhn)
    b = rng.uniform(low, 1.0, size=shape.nhn)
    a = rng.uniform(low, 1.0, size=shape.nhn)
    return WnnParams(w=w, W=W, b=b, a=a), MomentumState.zeros(shape)


def activation(t, mode: Mode = "exact"):
    """Value and derivative of the mother wavelet at ``t`` (scalar or array)."""
    t = np.asarray(t, dtype=float)
    if mode == "exact":
        value = np.exp(-t * t)
        derivative = -2.0 * t * value
    elif mode == "poly":
        t2 = t * t
        value = 1.0 - t2 + 0.5 * t2 * t2
        derivative = -2.0 * t + 2.0 * t2 * t
    else:
        raise ContractViolationError(f"Unknown activation mode: {mode}")
    if value.ndim == 0:
        return float(value), float(derivative)
    return value, derivative


def clamp_dilation(a: np.ndarray) -> np.ndarray:
    sign = np.where(a < 0, -1.0, 1.0)
    return sign * np.maximum(np.abs(a), A_MIN)


def _check_input(params: WnnParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != params.w.shape[0]:
        raise ShapeError(f"Expected {params.w.shape[0]} features, got {x.shape[0]}")
    return x


def forward(params: WnnParams, x: Sequence[float], mode: Mode = "exact") -> ForwardResult:
    x = _check_input(params, x)
    if np.any(np.abs(params.a) < A_MIN):
        raise ContractViolationError(f"Dilation below the clamp {A_MIN}")
    t = (x @ params.w - params.b) / params.a
    f, _ = activation(t, mode)
    f = np.atleast_1d(f)
    return ForwardResult(yhat=float(params.W @ f), t=np.atleast_1d(t), f=f)


def mse(y: Sequence[float], yhat: Sequence[float]) -> float:
    y = np.asarray(y, dtype=float).ravel()
    yhat = np.asarray(yhat, dtype=float).ravel()
    if y.size == 0:
        raise ContractViolationError("mse of an empty sequence")
    if y.shape != yhat.shape:
        raise ShapeError(f"Length mismatch: {y.size} labels vs {yhat.size} predictions")
    return float(np.mean((y - yhat) ** 2))


def gradients(params: WnnParams, x: Sequence[float], y: float, mode: Mode = "exact") -> Gradients:
    x = _check_input(params, x)
    result = forward(params, x, mode)
    _, fprime = activation(result.t, mode)
    r = y - result.yhat
    k = r * params.W * np.atleast_1d(fprime) / params.a
    return Gradients(
        w=-2.0 * np.outer(x, k),
        W=-2.0 * r * result.f,
        b=2.0 * k,
        a=2.0 * k * result.t,
    )


def batch_gradients(
    params: WnnParams,
    X: np.ndarray,
    y: np.ndarray,
    mode: Mode = "exact",
    workers: int = 1,
) -> Gradients:
    """Mean of per-sample gradients, reduced in sample order."""
    if len(X) == 0:
        raise ContractViolationError("batch_gradients of an empty batch")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_sample = list(pool.map(lambda i: gradients(params, X[i], y[i], mode), range(len(X))))
    else:
        per_sample = [gradients(params, X[i], y[i], mode) for i in range(len(X))]
    total = per_sample[0].groups()
    total = {name: value.copy() for name, value in total.items()}
    for g in per_sample[1:]:
        for name, value in g.groups().items():
            total[name] = total[name] + value
    return Gradients(**{name: value / len(per_sample) for name, value in total.items()})


def update_step(
    params: WnnParams,
    momentum: MomentumState,
    grads: Gradients,
    config: TrainConfig,
) -> Tuple[WnnParams, MomentumState]:
    """delta = -eta * grad + alpha * previous delta; param += delta."""
    new_params, new_momentum = {}, {}
    for name, value in params.groups().items():
        delta = -config.eta * getattr(grads, name) + config.alpha * getattr(momentum, name)
        new_momentum[name] = delta
        new_params[name] = value + delta
    new_params["a"] = clamp_dilation(new_params["a"])
    return WnnParams(**new_params), MomentumState(**new_momentum)


def predict_labels(params: WnnParams, X: np.ndarray, mode: Mode = "exact") -> Tuple[List[int], List[float]]:
    scores = [forward(params, x, mode).yhat for x in np.atleast_2d(X)] if len(X) else []
    labels = [int(s >= DECISION_THRESHOLD) for s in scores]
    return labels, scores


# --- training --------------------------------------------------------------------


def iter_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Shuffle 0..n-1 and yield consecutive index batches (last may be short)."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


class ConvergenceMonitor:
    """Stopping rule on the batch MSE change and the running accuracy.

    ``either`` stops once the MSE change drops below epsilon or the running
    accuracy exceeds the target. ``both`` keeps going while the change is at
    least epsilon or the accuracy is at most the target.
    """

    def __init__(self, config: TrainConfig):
        self.epsilon = config.convergence_epsilon
        self.target = config.target_accuracy
        self.rule = config.stop_rule
        self.previous = 0.0

    def update(self, batch_mse: float, running_accuracy: float) -> Optional[str]:
        delta = abs(batch_mse - self.previous)
        self.previous = batch_mse
        converged = delta < self.epsilon
        reached = self.target is not None and running_accuracy > self.target
        if self.rule == "either":
            if converged:
                return "converged"
            if reached:
                return "target_accuracy"
            return None
        if converged and (reached or self.target is None):
            return "converged"
        return None


def check_binary_labels(labels: np.ndarray) -> None:
    values = set(np.unique(labels).tolist())
    if not values <= {0, 1}:
        raise DataLoadError(f"Labels must be 0/1, found {sorted(values)}")


def train_plain(
    data: Dataset,
    shape: Optional[WnnShape] = None,
    config: Optional[TrainConfig] = None,
    mode: Mode = "exact",
    progress: bool = False,
    on_batch: Optional[Callable[[int, int, WnnParams], None]] = None,
) -> Tuple[WnnParams, TrainReport]:
    """Mini-batch gradient descent with momentum.

    ``on_batch(epoch, batch, params)`` is called after every update; the
    encrypted trainer's shadow tests use it to capture the trajectory.
    """
    config = config or TrainConfig()
    X = np.asarray(data.features, dtype=float)
    y = np.asarray(data.labels, dtype=float)
    check_binary_labels(y)
    if len(X) == 0:
        raise ContractViolationError(f"Dataset {data.name} has no samples")
    shape = shape or WnnShape(nin=X.shape[1])
    if shape.nin != X.shape[1]:
        raise ShapeError(f"Shape nin={shape.nin} does not match {X.shape[1]} features")

    rng = np.random.default_rng(config.seed)
    params, momentum = init_params(shape, rng)
    monitor = ConvergenceMonitor(config)
    report = TrainReport(mode="plain", activation=mode, seeds={"train": config.seed})
    stop_reason = "max_epochs"

    epochs = tqdm(range(config.max_epochs), desc=f"plain[{data.name}]", disable=not progress)
    for epoch in epochs:
        started = time.perf_counter()
        correct = seen = 0
        stop = None
        for batch_no, idx in enumerate(iter_batches(len(X), config.batch_size, rng)):
            batch_started = time.perf_counter()
            yhat = [forward(params, X[i], mode).yhat for i in idx]
            grads = batch_gradients(params, X[idx], y[idx], mode, workers=config.workers)
            params, momentum = update_step(params, momentum, grads, config)

            batch_mse = mse(y[idx], yhat)
            correct += sum(int(p >= DECISION_THRESHOLD) == int(t) for p, t in zip(yhat, y[idx]))
            seen += len(idx)
            elapsed_ms = (time.perf_counter() - batch_started) * 1000
            report.loss_trace.append(batch_mse)
            report.batch_log.append(BatchLogEntry(epoch=epoch, batch=batch_no, mse=batch_mse, elapsed_ms=elapsed_ms))
            logger.debug("epoch %d batch %d mse=%.6f", epoch, batch_no, batch_mse)
            if on_batch is not None:
                on_batch(epoch, batch_no, params)
            stop = monitor.update(batch_mse, correct / seen)
            if stop:
                break
        report.epoch_seconds.append(time.perf_counter() - started)
        report.epochs_run = epoch + 1
        logger.info("plain epoch %d: batches=%d last_mse=%.6f", epoch, len(report.batch_log), report.loss_trace[-1])
        if stop:
            stop_reason = stop
            break

    labels, _ = predict_labels(params, X, mode)
    report.train_accuracy = accuracy(y.astype(int).tolist(), labels) if len(X) else None
    report.batches_run = len(report.batch_log)
    report.stop_reason = stop_reason
    return params, report


# --- checkpoints -----------------------------------------------------------------


def save_checkpoint(path: Path, params: WnnParams, momentum: Optional[MomentumState] = None) -> None:
    """YAML checkpoint: shape header then each group as nested float lists."""
    shape = params.shape
    doc = {
        "shape": {"nin": shape.nin, "nhn": shape.nhn, "nout": 1},
        "params": {name: value.tolist() for name, value in params.groups().items()},
    }
    if momentum is not None:
        doc["momentum"] = {name: value.tolist() for name, value in momentum.groups().items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        yaml.safe_dump(doc, handle, sort_keys=False)


def load_checkpoint(path: Path) -> Tuple[WnnParams, Optional[MomentumState]]:
    with open(path, "r", encoding="utf-8") as handle:
        doc = yaml.safe_load(handle)
    try:
        shape = WnnShape(nin=doc["shape"]["nin"], nhn=doc["shape"]["nhn"])
        groups = {name: np.asarray(doc["params"][name], dtype=float) for name in ("w", "W", "b", "a")}
    except (KeyError, TypeError) as exc:
        raise ContractViolationError(f"Malformed checkpoint {path}: {exc}") from exc
    params = WnnParams(**groups)
    if params.w.shape != (shape.nin, shape.nhn):
        raise ShapeError(f"Checkpoint weights {params.w.shape} disagree with shape header")
    momentum = None
    if "momentum" in doc:
        momentum = MomentumState(**{name: np.asarray(doc["momentum"][name], dtype=float) for name in ("w", "W", "b", "a")})
    return params, momentum
