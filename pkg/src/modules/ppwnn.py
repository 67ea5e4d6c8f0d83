"""Wavelet network training and testing over CKKS ciphertexts.

Every parameter and every feature value is its own scalar ciphertext. The
division by the dilation is replaced by an encrypted reciprocal ``inv_a``
that the key custodian recomputes in the clear at each refresh; within a
batch the start-of-batch reciprocal is used.

Levels consumed from the top, per stage::

    linear        u = sum_i w_ij x_i                  1
    dilate        t = (u - b) inv_a                   2
    square        t^2                                 3
    quartic       t^4, t^3                            4
    activation    f = 1 - t^2 + t^4 / 2               5
    output        yhat = sum_j W_j f_j                6
    chain         k = (y - yhat) f'(t) W inv_a        7
    input grads   dE/dw = -2 k x, dE/da = 2 k t       8
    batch mean    x (1 / batch size)                  9
    update        delta = -eta g + alpha delta        10
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, replace
from functools import reduce
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import yaml
from tqdm import tqdm

from . import ckks
from .ckks import CkksCiphertext, CkksContext, CkksParams, KeySet, PublicKey, RelinKey
from .datasets.model import Dataset
from .errors import ContractViolationError, DepthBudgetError, EncodingRangeError, FormatError
from .metrics import Metrics, evaluate
from .reporting import BatchLogEntry, TrainReport
from .serialization import deserialize_many, serialize_many
from .wnn import (
    DECISION_THRESHOLD,
    ConvergenceMonitor,
    MomentumState,
    TrainConfig,
    WnnParams,
    WnnShape,
    clamp_dilation,
    init_params,
    iter_batches,
)

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

FORWARD_DEPTH = 6
GRADIENT_DEPTH = 8
BATCH_MEAN_DEPTH = 9
TRAINING_DEPTH = 10
MAX_FEATURE_MAGNITUDE = 100.0

GROUPS = ("w", "W", "b", "a")


# --- types -------------------------------------------------------------------------


@dataclass(frozen=True)
class EncryptedSample:
    features: Tuple[CkksCiphertext, ...]
    label: CkksCiphertext
    index: int


@dataclass(frozen=True)
class EncryptedWnnParams:
    """Scalar ciphertexts for parameters, reciprocal dilations and momentum deltas.

    ``w`` and ``dw`` are nin x nhn nested tuples; the others have nhn entries.
    """

    shape: WnnShape
    w: Tuple[Tuple[CkksCiphertext, ...], ...]
    W: Tuple[CkksCiphertext, ...]
    b: Tuple[CkksCiphertext, ...]
    a: Tuple[CkksCiphertext, ...]
    inv_a: Tuple[CkksCiphertext, ...]
    dw: Tuple[Tuple[CkksCiphertext, ...], ...]
    dW: Tuple[CkksCiphertext, ...]
    db: Tuple[CkksCiphertext, ...]
    da: Tuple[CkksCiphertext, ...]
    generation: int = 0

    def ciphertexts(self) -> Iterator[CkksCiphertext]:
        """All ciphertexts in checkpoint order: w, W, b, a, inv_a, dw, dW, db, da."""
        for name in ("w", "W", "b", "a", "inv_a", "dw", "dW", "db", "da"):
            group = getattr(self, name)
            if name in ("w", "dw"):
                for row in group:
                    yield from row
            else:
                yield from group

    @property
    def min_level(self) -> int:
        return min(ct.level for ct in self.ciphertexts())


@dataclass(frozen=True)
class EncryptedForward:
    yhat: CkksCiphertext
    t: Tuple[CkksCiphertext, ...]
    t2: Tuple[CkksCiphertext, ...]
    t3: Tuple[CkksCiphertext, ...]
    f: Tuple[CkksCiphertext, ...]


@dataclass(frozen=True)
class EncryptedGradients:
    w: Tuple[Tuple[CkksCiphertext, ...], ...]
    W: Tuple[CkksCiphertext, ...]
    b: Tuple[CkksCiphertext, ...]
    a: Tuple[CkksCiphertext, ...]


@contextmanager
def _stage(name: str, required: int):
    try:
        yield
    except DepthBudgetError as exc:
        raise DepthBudgetError(f"[{name}] {exc} (circuit requires depth {required})", required_depth=required, stage=name) from exc


def _require_levels(level: int, required: int, stage: str) -> None:
    if level - 1 < required:
        raise DepthBudgetError(
            f"[{stage}] circuit requires depth {required} but the inputs have only {level - 1} levels to spend; "
            f"the coefficient modulus chain needs at least {required + 1} primes",
            required_depth=required,
            stage=stage,
        )


# --- roles -------------------------------------------------------------------------


class KeyCustodian:
    """Holds the secret key: encrypts, decrypts, refreshes parameters and computes batch statistics."""

    def __init__(self, keys: KeySet, rng: np.random.Generator):
        if keys.secret_key is None:
            raise ContractViolationError("KeyCustodian needs a key set with the secret key")
        self._keys = keys
        self._rng = rng
        self.context: CkksContext = keys.context
        self.last_params: Optional[WnnParams] = None
        self.last_momentum: Optional[MomentumState] = None

    @property
    def public_keys(self) -> KeySet:
        return self._keys.public_view()

    def encrypt_value(self, value: float) -> CkksCiphertext:
        pt = ckks.encode([float(value)], self.context)
        return ckks.encrypt(pt, self._keys.public_key, self._rng)

    def decrypt_value(self, ct: CkksCiphertext) -> float:
        return ckks.decode(ckks.decrypt(ct, self._keys.secret_key))[0]

    def decrypt_values(self, cts: Sequence[CkksCiphertext]) -> np.ndarray:
        return np.array([self.decrypt_value(ct) for ct in cts], dtype=float)

    def _encrypt_vector(self, values: np.ndarray) -> Tuple[CkksCiphertext, ...]:
        return tuple(self.encrypt_value(v) for v in values)

    def _encrypt_matrix(self, values: np.ndarray) -> Tuple[Tuple[CkksCiphertext, ...], ...]:
        return tuple(self._encrypt_vector(row) for row in values)

    def encrypt_params(self, params: WnnParams, momentum: MomentumState, generation: int = 0) -> EncryptedWnnParams:
        a = clamp_dilation(params.a)
        self.last_params = replace(params.copy(), a=a)
        self.last_momentum = momentum
        return EncryptedWnnParams(
            shape=params.shape,
            w=self._encrypt_matrix(params.w),
            W=self._encrypt_vector(params.W),
            b=self._encrypt_vector(params.b),
            a=self._encrypt_vector(a),
            inv_a=self._encrypt_vector(1.0 / a),
            dw=self._encrypt_matrix(momentum.w),
            dW=self._encrypt_vector(momentum.W),
            db=self._encrypt_vector(momentum.b),
            da=self._encrypt_vector(momentum.a),
            generation=generation,
        )

    def decrypt_params(self, enc: EncryptedWnnParams) -> Tuple[WnnParams, MomentumState]:
        """Clear parameters and momentum, with the decrypted dilation re-clamped."""
        matrix = lambda rows: np.array([self.decrypt_values(row) for row in rows], dtype=float)
        params = WnnParams(
            w=matrix(enc.w),
            W=self.decrypt_values(enc.W),
            b=self.decrypt_values(enc.b),
            a=clamp_dilation(self.decrypt_values(enc.a)),
        )
        momentum = MomentumState(
            w=matrix(enc.dw),
            W=self.decrypt_values(enc.dW),
            b=self.decrypt_values(enc.db),
            a=self.decrypt_values(enc.da),
        )
        return params, momentum

    def decrypt_inverse_dilation(self, enc: EncryptedWnnParams) -> np.ndarray:
        return self.decrypt_values(enc.inv_a)

    def refresh(self, enc: EncryptedWnnParams) -> EncryptedWnnParams:
        """Decrypt everything, re-reciprocate the clamped dilation, re-encrypt at the top level."""
        params, momentum = self.decrypt_params(enc)
        refreshed = self.encrypt_params(params, momentum, generation=enc.generation + 1)
        logger.debug("Refreshed encrypted parameters to generation %d", refreshed.generation)
        return refreshed

    def batch_statistics(self, predictions: Sequence[CkksCiphertext], labels: Sequence[CkksCiphertext]) -> Tuple[float, int]:
        """Batch MSE and number of correct 0.5-threshold predictions, computed in the clear."""
        yhat = self.decrypt_values(predictions)
        y = np.rint(self.decrypt_values(labels))
        batch_mse = float(np.mean((y - yhat) ** 2))
        correct = int(np.sum((yhat >= DECISION_THRESHOLD).astype(int) == y.astype(int)))
        return batch_mse, correct


class ComputeNode:
    """Homomorphic evaluation with public and relinearization keys only."""

    def __init__(self, context: CkksContext, public_key: PublicKey, relin_key: RelinKey):
        self.context = context
        self.public_key = public_key
        self._rlk = relin_key

    # ciphertext helpers; operands at different levels are mod-switched down first

    def _mul(self, a: CkksCiphertext, b: CkksCiphertext) -> CkksCiphertext:
        level = min(a.level, b.level)
        return ckks.eval_mul(ckks.mod_switch_to(a, level), ckks.mod_switch_to(b, level), self._rlk)

    def _add(self, a: CkksCiphertext, b: CkksCiphertext) -> CkksCiphertext:
        return ckks.eval_add(*ckks.align(a, b))

    def _sub(self, a: CkksCiphertext, b: CkksCiphertext) -> CkksCiphertext:
        return ckks.eval_sub(*ckks.align(a, b))

    def _add_const(self, a: CkksCiphertext, value: float) -> CkksCiphertext:
        return ckks.eval_add(a, ckks.encode_constant(value, self.context, level=a.level, scale=a.scale))

    def _sum(self, cts: Sequence[CkksCiphertext]) -> CkksCiphertext:
        return reduce(self._add, cts)

    def encrypted_forward(self, enc: EncryptedWnnParams, sample: EncryptedSample) -> EncryptedForward:
        if len(sample.features) != enc.shape.nin:
            raise ContractViolationError(f"Sample has {len(sample.features)} features, model expects {enc.shape.nin}")
        _require_levels(min(enc.min_level, min(ct.level for ct in sample.features)), FORWARD_DEPTH, "forward")
        with _stage("forward", FORWARD_DEPTH):
            t, t2, t3, f, terms = [], [], [], [], []
            for j in range(enc.shape.nhn):
                u = self._sum([self._mul(enc.w[i][j], x) for i, x in enumerate(sample.features)])
                t_j = self._mul(self._sub(u, enc.b[j]), enc.inv_a[j])
                t2_j = self._mul(t_j, t_j)
                t4_j = self._mul(t2_j, t2_j)
                t3_j = self._mul(t_j, t2_j)
                half_t4 = ckks.eval_mul_const(t4_j, 0.5)
                f_j = self._add_const(self._sub(half_t4, t2_j), 1.0)
                t.append(t_j)
                t2.append(t2_j)
                t3.append(t3_j)
                f.append(f_j)
                terms.append(self._mul(enc.W[j], f_j))
            yhat = self._sum(terms)
        return EncryptedForward(yhat=yhat, t=tuple(t), t2=tuple(t2), t3=tuple(t3), f=tuple(f))

    def _sample_gradients(self, enc: EncryptedWnnParams, sample: EncryptedSample, fwd: EncryptedForward) -> EncryptedGradients:
        r = self._sub(sample.label, fwd.yhat)
        gw_cols, gW, gb, ga = [], [], [], []
        for j in range(enc.shape.nhn):
            q = self._mul(enc.W[j], enc.inv_a[j])
            fprime = ckks.eval_mul_integer(self._sub(fwd.t3[j], fwd.t[j]), 2)
            k = self._mul(r, self._mul(fprime, q))
            gb.append(ckks.eval_mul_integer(k, 2))
            gW.append(ckks.eval_mul_integer(self._mul(r, fwd.f[j]), -2))
            ga.append(ckks.eval_mul_integer(self._mul(k, fwd.t[j]), 2))
            gw_cols.append([ckks.eval_mul_integer(self._mul(k, x), -2) for x in sample.features])
        gw = tuple(tuple(gw_cols[j][i] for j in range(enc.shape.nhn)) for i in range(enc.shape.nin))
        return EncryptedGradients(w=gw, W=tuple(gW), b=tuple(gb), a=tuple(ga))

    def encrypted_batch_gradients(
        self,
        enc: EncryptedWnnParams,
        batch: Sequence[EncryptedSample],
        forwards: Optional[Sequence[EncryptedForward]] = None,
        workers: int = 1,
    ) -> EncryptedGradients:
        """Mean of per-sample encrypted gradients, folded in batch order."""
        if not batch:
            raise ContractViolationError("encrypted_batch_gradients of an empty batch")
        _require_levels(enc.min_level, BATCH_MEAN_DEPTH, "gradients")
        if forwards is None:
            forwards = self.forward_batch(enc, batch, workers)
        with _stage("gradients", BATCH_MEAN_DEPTH):
            per_sample = _ordered_map(lambda pair: self._sample_gradients(enc, *pair), list(zip(batch, forwards)), workers)
            scale = 1.0 / len(batch)
            mean = lambda cts: ckks.eval_mul_const(self._sum(cts), scale)
            nin, nhn = enc.shape.nin, enc.shape.nhn
            return EncryptedGradients(
                w=tuple(tuple(mean([g.w[i][j] for g in per_sample]) for j in range(nhn)) for i in range(nin)),
                W=tuple(mean([g.W[j] for g in per_sample]) for j in range(nhn)),
                b=tuple(mean([g.b[j] for g in per_sample]) for j in range(nhn)),
                a=tuple(mean([g.a[j] for g in per_sample]) for j in range(nhn)),
            )

    def forward_batch(self, enc: EncryptedWnnParams, batch: Sequence[EncryptedSample], workers: int = 1) -> List[EncryptedForward]:
        return _ordered_map(lambda sample: self.encrypted_forward(enc, sample), list(batch), workers)

    def encrypted_update(self, enc: EncryptedWnnParams, grads: EncryptedGradients, config: TrainConfig) -> EncryptedWnnParams:
        """delta = (-eta) grad + alpha delta_old; param = param + delta. ``inv_a`` is left for the next refresh."""
        with _stage("update", TRAINING_DEPTH):

            def step(param: CkksCiphertext, grad: CkksCiphertext, old: CkksCiphertext) -> Tuple[CkksCiphertext, CkksCiphertext]:
                delta = self._add(ckks.eval_mul_const(grad, -config.eta), ckks.eval_mul_const(old, config.alpha))
                return self._add(delta, param), delta

            def step_vector(params, gs, olds):
                pairs = [step(p, g, o) for p, g, o in zip(params, gs, olds)]
                return tuple(p for p, _ in pairs), tuple(d for _, d in pairs)

            w_rows, dw_rows = [], []
            for row, g_row, d_row in zip(enc.w, grads.w, enc.dw):
                new_row, new_delta = step_vector(row, g_row, d_row)
                w_rows.append(new_row)
                dw_rows.append(new_delta)
            W, dW = step_vector(enc.W, grads.W, enc.dW)
            b, db = step_vector(enc.b, grads.b, enc.db)
            a, da = step_vector(enc.a, grads.a, enc.da)
        return replace(enc, w=tuple(w_rows), W=W, b=b, a=a, dw=tuple(dw_rows), dW=dW, db=db, da=da)


def _ordered_map(fn: Callable, items: list, workers: int) -> list:
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


@dataclass(frozen=True)
class RoleSplit:
    custodian: KeyCustodian
    compute: ComputeNode

    @property
    def context(self) -> CkksContext:
        return self.compute.context

    @classmethod
    def create(cls, params: CkksParams, seed: int = 0) -> "RoleSplit":
        context = CkksContext(params)
        rng = np.random.default_rng(seed)
        keys = ckks.keygen(context, rng)
        custodian = KeyCustodian(keys, rng)
        compute = ComputeNode(context, keys.public_key, keys.relin_key)
        logger.info(
            "Role split ready: N=%d, %d chain primes, profile=%s", params.poly_degree, context.top_level, params.profile
        )
        return cls(custodian=custodian, compute=compute)


def training_params(profile: str = "test-insecure", poly_degree: Optional[int] = None, scale_bits: int = 40) -> CkksParams:
    """CKKS parameters deep enough for one training batch."""
    if profile == "secure":
        return CkksParams.secure()
    return CkksParams.test_insecure(depth=TRAINING_DEPTH, poly_degree=poly_degree or 8192, scale_bits=scale_bits)


# --- operations --------------------------------------------------------------------


def encrypt_dataset(data: Dataset, keys: KeySet, rng: np.random.Generator) -> List[EncryptedSample]:
    """One fresh scalar ciphertext per feature value and per label."""
    if data.n_samples and np.max(np.abs(data.features)) > MAX_FEATURE_MAGNITUDE:
        raise EncodingRangeError(f"{data.name}: feature magnitude exceeds {MAX_FEATURE_MAGNITUDE}; standardize first")
    encrypt = lambda v: ckks.encrypt(ckks.encode([float(v)], keys.context), keys.public_key, rng)
    samples = []
    for index, (row, label) in enumerate(zip(data.features, data.labels)):
        samples.append(EncryptedSample(features=tuple(encrypt(v) for v in row), label=encrypt(label), index=index))
    logger.info("Encrypted %s: %d samples x %d features", data.name, data.n_samples, data.n_features)
    return samples


def refresh_params(enc: EncryptedWnnParams, custodian: KeyCustodian) -> EncryptedWnnParams:
    return custodian.refresh(enc)


def train_encrypted(
    enc_data: Sequence[EncryptedSample],
    shape: WnnShape,
    config: TrainConfig,
    roles: RoleSplit,
    progress: bool = False,
    on_batch: Optional[Callable[[int, int, EncryptedWnnParams], None]] = None,
    name: str = "encrypted",
) -> Tuple[EncryptedWnnParams, TrainReport]:
    """Encrypted mini-batch training with a parameter refresh after every batch.

    Initial parameters and the batch schedule come from ``default_rng(config.seed)``
    exactly as in ``wnn.train_plain``, so both trainers walk the same trajectory.
    """
    custodian, compute = roles.custodian, roles.compute
    _require_levels(roles.context.top_level, TRAINING_DEPTH, "setup")

    rng = np.random.default_rng(config.seed)
    params, momentum = init_params(shape, rng)
    enc = custodian.encrypt_params(params, momentum)
    monitor = ConvergenceMonitor(config)
    report = TrainReport(mode="encrypted", activation="poly", dataset=name, seeds={"train": config.seed})
    stop_reason = "max_epochs"
    deepest = 0

    epochs = tqdm(range(config.max_epochs), desc=f"encrypted[{name}]", disable=not progress)
    for epoch in epochs:
        started = time.perf_counter()
        correct = seen = 0
        stop = None
        for batch_no, idx in enumerate(iter_batches(len(enc_data), config.batch_size, rng)):
            batch_started = time.perf_counter()
            batch = [enc_data[i] for i in idx]
            forwards = compute.forward_batch(enc, batch, config.workers)
            grads = compute.encrypted_batch_gradients(enc, batch, forwards, config.workers)
            updated = compute.encrypted_update(enc, grads, config)
            deepest = max(deepest, roles.context.top_level - updated.min_level)
            with _stage("refresh", TRAINING_DEPTH):
                enc = custodian.refresh(updated)

            batch_mse, batch_correct = custodian.batch_statistics([f.yhat for f in forwards], [s.label for s in batch])
            correct += batch_correct
            seen += len(batch)
            elapsed_ms = (time.perf_counter() - batch_started) * 1000
            report.loss_trace.append(batch_mse)
            report.batch_log.append(BatchLogEntry(epoch=epoch, batch=batch_no, mse=batch_mse, elapsed_ms=elapsed_ms))
            logger.debug("encrypted epoch %d batch %d mse=%.6f (%.0f ms)", epoch, batch_no, batch_mse, elapsed_ms)
            if on_batch is not None:
                on_batch(epoch, batch_no, enc)
            stop = monitor.update(batch_mse, correct / seen)
            if stop:
                break
        report.epoch_seconds.append(time.perf_counter() - started)
        report.epochs_run = epoch + 1
        if report.loss_trace:
            logger.info("encrypted epoch %d: %.1f s, last_mse=%.6f", epoch, report.epoch_seconds[-1], report.loss_trace[-1])
        if stop:
            stop_reason = stop
            break

    report.batches_run = len(report.batch_log)
    report.stop_reason = stop_reason
    report.max_depth_consumed = deepest if report.batches_run else None
    logger.info("Encrypted training finished after %d batches (%s)", report.batches_run, stop_reason)
    return enc, report


def predict_encrypted(
    enc_params: EncryptedWnnParams,
    enc_test: Sequence[EncryptedSample],
    roles: RoleSplit,
    workers: int = 1,
) -> Tuple[List[int], List[float]]:
    forwards = roles.compute.forward_batch(enc_params, enc_test, workers)
    scores = roles.custodian.decrypt_values([f.yhat for f in forwards]).tolist()
    return [int(s >= DECISION_THRESHOLD) for s in scores], scores


def test_encrypted(
    enc_params: EncryptedWnnParams,
    enc_test: Sequence[EncryptedSample],
    roles: RoleSplit,
    workers: int = 1,
) -> Metrics:
    """Encrypted forward per sample; the custodian decrypts scores and labels and scores them."""
    labels_pred, scores = predict_encrypted(enc_params, enc_test, roles, workers)
    truth = np.rint(roles.custodian.decrypt_values([s.label for s in enc_test])).astype(int).tolist()
    return evaluate(truth, labels_pred, scores)


test_encrypted.__test__ = False


# --- checkpoints -------------------------------------------------------------------


def save_encrypted_checkpoint(enc: EncryptedWnnParams, directory: Path, config_hash: str = "") -> Path:
    """``manifest.yaml`` plus ``params.bin`` (length-prefixed serialized ciphertexts)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cts = list(enc.ciphertexts())
    (directory / "params.bin").write_bytes(serialize_many(cts))
    manifest = {
        "shape": {"nin": enc.shape.nin, "nhn": enc.shape.nhn, "nout": 1},
        "generation": enc.generation,
        "config_hash": config_hash,
        "params_digest": cts[0].context.params.digest().hex(),
        "ciphertexts": len(cts),
        "order": ["w", "W", "b", "a", "inv_a", "dw", "dW", "db", "da"],
    }
    with open(directory / "manifest.yaml", "w", encoding="utf-8") as handle:
        yaml.safe_dump(manifest, handle, sort_keys=False)
    return directory


def load_encrypted_checkpoint(directory: Path, context: CkksContext) -> Tuple[EncryptedWnnParams, dict]:
    directory = Path(directory)
    with open(directory / "manifest.yaml", "r", encoding="utf-8") as handle:
        manifest = yaml.safe_load(handle)
    shape = WnnShape(nin=manifest["shape"]["nin"], nhn=manifest["shape"]["nhn"])
    cts = deserialize_many((directory / "params.bin").read_bytes(), context)
    nin, nhn = shape.nin, shape.nhn
    expected = 2 * nin * nhn + 7 * nhn
    if len(cts) != expected or len(cts) != manifest["ciphertexts"]:
        raise FormatError(f"Checkpoint holds {len(cts)} ciphertexts, shape {nin}x{nhn} needs {expected}")

    it = iter(cts)
    take_vector = lambda: tuple(next(it) for _ in range(nhn))
    take_matrix = lambda: tuple(take_vector() for _ in range(nin))
    enc = EncryptedWnnParams(
        shape=shape,
        w=take_matrix(),
        W=take_vector(),
        b=take_vector(),
        a=take_vector(),
        inv_a=take_vector(),
        dw=take_matrix(),
        dW=take_vector(),
        db=take_vector(),
        da=take_vector(),
        generation=int(manifest["generation"]),
    )
    return enc, manifest
