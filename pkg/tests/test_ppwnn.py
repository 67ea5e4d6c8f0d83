import inspect

import numpy as np
import pytest
import yaml

from modules import ppwnn, wnn
from modules.ckks import CkksParams, KeySet, SecretKey
from modules.datasets.model import Dataset
from modules.errors import ContractViolationError, DepthBudgetError, EncodingRangeError, FormatError
from modules.ppwnn import ComputeNode, KeyCustodian, RoleSplit
from modules.serialization import serialize
from modules.wnn import MomentumState, TrainConfig, WnnParams, WnnShape

TOL = 1e-4


@pytest.fixture(scope="module")
def roles():
    return RoleSplit.create(CkksParams.test_insecure(depth=ppwnn.TRAINING_DEPTH, poly_degree=32), seed=1)


@pytest.fixture(scope="module")
def data_rng():
    return np.random.default_rng(99)


def _small_dataset(n=40, nin=2, seed=0, spread=0.1):
    rng = np.random.default_rng(seed)
    features = rng.normal(scale=spread, size=(n, nin))
    labels = np.array([i % 2 for i in range(n)])
    return Dataset("tiny", features, labels, tuple(f"x{i}" for i in range(nin)))


def _params(nin, nhn, seed=5):
    rng = np.random.default_rng(seed)
    return WnnParams(
        w=rng.uniform(-0.5, 0.5, size=(nin, nhn)),
        W=rng.uniform(0.2, 0.8, size=nhn),
        b=rng.uniform(-0.2, 0.2, size=nhn),
        a=rng.uniform(0.7, 1.2, size=nhn),
    )


def _tame_seed(shape, limit=5000):
    """First seed whose initial dilations and translations keep t within the unit interval."""
    for seed in range(limit):
        params, _ = wnn.init_params(shape, np.random.default_rng(seed))
        if params.a.min() >= 0.6 and params.b.max() <= 0.3:
            return seed
    raise AssertionError("no suitable seed")


def _decrypt_grads(custodian, grads):
    return {
        "w": np.array([custodian.decrypt_values(row) for row in grads.w]),
        "W": custodian.decrypt_values(grads.W),
        "b": custodian.decrypt_values(grads.b),
        "a": custodian.decrypt_values(grads.a),
    }


# --- roles -------------------------------------------------------------------------


def test_compute_node_never_sees_the_secret_key(roles):
    for name, member in inspect.getmembers(ComputeNode, inspect.isfunction):
        for parameter in inspect.signature(member).parameters.values():
            assert parameter.annotation not in (SecretKey, KeySet), f"{name}.{parameter.name}"
            assert "secret" not in parameter.name
    for value in vars(roles.compute).values():
        assert not isinstance(value, (SecretKey, KeySet))


def test_custodian_requires_secret_key(roles):
    public_only = roles.custodian.public_keys

    assert public_only.secret_key is None
    with pytest.raises(ContractViolationError, match="secret key"):
        KeyCustodian(public_only, np.random.default_rng(0))


def test_training_params_profiles():
    params = ppwnn.training_params(poly_degree=64)

    assert params.max_depth == ppwnn.TRAINING_DEPTH
    assert params.insecure is True
    assert ppwnn.training_params("secure").max_depth >= ppwnn.TRAINING_DEPTH


# --- data --------------------------------------------------------------------------


def test_encrypt_dataset_roundtrip(roles, data_rng):
    data = _small_dataset(n=3)

    samples = ppwnn.encrypt_dataset(data, roles.custodian.public_keys, data_rng)

    assert [s.index for s in samples] == [0, 1, 2]
    for sample, row, label in zip(samples, data.features, data.labels):
        assert np.allclose(roles.custodian.decrypt_values(sample.features), row, atol=1e-6)
        assert roles.custodian.decrypt_value(sample.label) == pytest.approx(label, abs=1e-6)
        assert sample.label.level == roles.context.top_level


def test_encrypt_dataset_edge_cases(roles, data_rng):
    empty = Dataset("empty", np.zeros((0, 2)), np.zeros(0), ("x0", "x1"))
    wild = Dataset("wild", np.array([[500.0, 0.0]]), np.array([1]), ("x0", "x1"))

    assert ppwnn.encrypt_dataset(empty, roles.custodian.public_keys, data_rng) == []
    with pytest.raises(EncodingRangeError, match="standardize first"):
        ppwnn.encrypt_dataset(wild, roles.custodian.public_keys, data_rng)


# --- refresh -----------------------------------------------------------------------


def test_refresh_clamps_dilation_and_restores_top_level(roles):
    custodian = roles.custodian
    params = WnnParams(w=np.ones((1, 2)), W=np.ones(2), b=np.zeros(2), a=np.array([1e-6, -0.5]))
    enc = custodian.encrypt_params(params, MomentumState.zeros(WnnShape(nin=1, nhn=2)))

    assert custodian.decrypt_inverse_dilation(enc) == pytest.approx([1000.0, -2.0], rel=1e-6)
    lowered = roles.compute.encrypted_update(
        enc,
        ppwnn.EncryptedGradients(w=enc.dw, W=enc.dW, b=enc.db, a=enc.da),
        TrainConfig(eta=0.1, alpha=0.0),
    )
    assert lowered.min_level < roles.context.top_level

    refreshed = ppwnn.refresh_params(lowered, custodian)

    assert refreshed.generation == 1
    assert refreshed.min_level == roles.context.top_level
    assert custodian.decrypt_values(refreshed.a) == pytest.approx([1e-3, -0.5], abs=1e-6)


def test_decrypted_dilation_stays_usable_at_the_clamp(roles):
    custodian = roles.custodian
    params = WnnParams(w=np.ones((2, 1)), W=np.ones(1), b=np.zeros(1), a=np.array([1e-6]))
    enc = custodian.encrypt_params(params, MomentumState.zeros(WnnShape(nin=2, nhn=1)))
    features = np.array([[0.001, 0.0], [0.0, -0.002]])

    for _ in range(20):
        clear, _ = custodian.decrypt_params(enc)
        assert abs(clear.a[0]) >= wnn.A_MIN
        labels, scores = wnn.predict_labels(clear, features, mode="poly")
        assert len(labels) == len(scores) == 2


def test_batch_statistics(roles):
    custodian = roles.custodian
    predictions = [custodian.encrypt_value(v) for v in (0.2, 0.7, 0.6)]
    labels = [custodian.encrypt_value(v) for v in (0, 1, 0)]

    batch_mse, correct = custodian.batch_statistics(predictions, labels)

    assert batch_mse == pytest.approx((0.04 + 0.09 + 0.36) / 3, abs=1e-6)
    assert correct == 2


# --- circuits ----------------------------------------------------------------------


def test_encrypted_forward_matches_poly_forward(roles, data_rng):
    params = WnnParams(w=np.array([[1.0]]), W=np.array([1.0]), b=np.array([0.0]), a=np.array([1.0]))
    enc = roles.custodian.encrypt_params(params, MomentumState.zeros(params.shape))
    sample = ppwnn.encrypt_dataset(Dataset("one", np.array([[0.5]]), np.array([1]), ("x",)), roles.custodian.public_keys, data_rng)[0]

    result = roles.compute.encrypted_forward(enc, sample)

    assert roles.custodian.decrypt_value(result.yhat) == pytest.approx(0.78125, abs=TOL)
    assert result.yhat.level == roles.context.top_level - ppwnn.FORWARD_DEPTH


def test_encrypted_forward_random_model(roles, data_rng):
    params = _params(nin=3, nhn=2)
    data = _small_dataset(n=2, nin=3, spread=0.5)
    enc = roles.custodian.encrypt_params(params, MomentumState.zeros(params.shape))
    samples = ppwnn.encrypt_dataset(data, roles.custodian.public_keys, data_rng)

    forwards = roles.compute.forward_batch(enc, samples)

    for fwd, row in zip(forwards, data.features):
        expected = wnn.forward(params, row, "poly")
        assert roles.custodian.decrypt_value(fwd.yhat) == pytest.approx(expected.yhat, abs=TOL)
        assert roles.custodian.decrypt_values(fwd.t) == pytest.approx(expected.t, abs=TOL)


def test_forward_batch_is_worker_independent(roles, data_rng):
    params = _params(nin=2, nhn=1)
    enc = roles.custodian.encrypt_params(params, MomentumState.zeros(params.shape))
    samples = ppwnn.encrypt_dataset(_small_dataset(n=3), roles.custodian.public_keys, data_rng)

    serial = roles.compute.forward_batch(enc, samples)
    threaded = roles.compute.forward_batch(enc, samples, workers=3)

    assert [serialize(f.yhat) for f in serial] == [serialize(f.yhat) for f in threaded]


def test_encrypted_forward_rejects_wrong_arity(roles, data_rng):
    params = _params(nin=2, nhn=1)
    enc = roles.custodian.encrypt_params(params, MomentumState.zeros(params.shape))
    sample = ppwnn.encrypt_dataset(_small_dataset(n=1, nin=3), roles.custodian.public_keys, data_rng)[0]

    with pytest.raises(ContractViolationError, match="model expects 2"):
        roles.compute.encrypted_forward(enc, sample)


def test_encrypted_batch_gradients_match_plaintext(roles, data_rng):
    params = _params(nin=2, nhn=2)
    data = _small_dataset(n=3, spread=0.5)
    enc = roles.custodian.encrypt_params(params, MomentumState.zeros(params.shape))
    samples = ppwnn.encrypt_dataset(data, roles.custodian.public_keys, data_rng)

    grads = roles.compute.encrypted_batch_gradients(enc, samples)
    expected = wnn.batch_gradients(params, data.features, data.labels, mode="poly")

    decrypted = _decrypt_grads(roles.custodian, grads)
    for name, value in expected.groups().items():
        assert np.allclose(decrypted[name], value, atol=TOL), name
    assert grads.W[0].level == roles.context.top_level - ppwnn.BATCH_MEAN_DEPTH


def test_encrypted_update_matches_plaintext_step(roles, data_rng):
    params = _params(nin=2, nhn=2)
    momentum = MomentumState(
        w=np.full((2, 2), 0.05), W=np.array([0.1, -0.1]), b=np.array([0.02, 0.0]), a=np.array([-0.03, 0.01])
    )
    data = _small_dataset(n=2, spread=0.5)
    config = TrainConfig(eta=0.1, alpha=0.9)
    enc = roles.custodian.encrypt_params(params, momentum)
    samples = ppwnn.encrypt_dataset(data, roles.custodian.public_keys, data_rng)

    updated = roles.compute.encrypted_update(enc, roles.compute.encrypted_batch_gradients(enc, samples), config)
    got_params, got_momentum = roles.custodian.decrypt_params(updated)
    plain_grads = wnn.batch_gradients(params, data.features, data.labels, mode="poly")
    want_params, want_momentum = wnn.update_step(params, momentum, plain_grads, config)

    for name, value in want_params.groups().items():
        assert np.allclose(getattr(got_params, name), value, atol=TOL), name
        assert np.allclose(getattr(got_momentum, name), getattr(want_momentum, name), atol=TOL), name
    assert roles.context.top_level - updated.min_level == ppwnn.TRAINING_DEPTH


def test_empty_batch_is_rejected(roles):
    params = _params(nin=2, nhn=1)
    enc = roles.custodian.encrypt_params(params, MomentumState.zeros(params.shape))

    with pytest.raises(ContractViolationError, match="empty batch"):
        roles.compute.encrypted_batch_gradients(enc, [])


@pytest.mark.parametrize("depth, fails", [(5, True), (6, False)])
def test_forward_depth_requirement(depth, fails):
    shallow = RoleSplit.create(CkksParams.test_insecure(depth=depth, poly_degree=32), seed=2)
    params = _params(nin=1, nhn=1)
    enc = shallow.custodian.encrypt_params(params, MomentumState.zeros(params.shape))
    sample = ppwnn.EncryptedSample(
        features=(shallow.custodian.encrypt_value(0.3),), label=shallow.custodian.encrypt_value(1.0), index=0
    )

    if fails:
        with pytest.raises(DepthBudgetError, match="requires depth 6") as excinfo:
            shallow.compute.encrypted_forward(enc, sample)
        assert excinfo.value.stage == "forward"
    else:
        result = shallow.compute.encrypted_forward(enc, sample)
        assert result.yhat.level == 1


def test_training_rejects_a_shallow_chain(data_rng):
    shallow = RoleSplit.create(CkksParams.test_insecure(depth=5, poly_degree=32), seed=3)

    with pytest.raises(DepthBudgetError, match="at least 11 primes") as excinfo:
        ppwnn.train_encrypted([], WnnShape(nin=2), TrainConfig(), shallow)
    assert excinfo.value.required_depth == ppwnn.TRAINING_DEPTH


# --- training ----------------------------------------------------------------------


def test_zero_epochs_returns_initial_parameters(roles, data_rng):
    samples = ppwnn.encrypt_dataset(_small_dataset(n=4), roles.custodian.public_keys, data_rng)
    config = TrainConfig(max_epochs=0, seed=12)

    enc, report = ppwnn.train_encrypted(samples, WnnShape(nin=2), config, roles)
    initial, _ = wnn.init_params(WnnShape(nin=2), np.random.default_rng(12))

    assert report.batches_run == 0
    assert report.max_depth_consumed is None
    assert enc.generation == 0
    assert roles.custodian.decrypt_values(enc.W) == pytest.approx(initial.W, abs=1e-6)


@pytest.mark.slow
def test_encrypted_training_shadows_plain_poly_training(roles, data_rng):
    shape = WnnShape(nin=2, nhn=1)
    data = _small_dataset(n=40)
    config = TrainConfig(
        eta=0.01, alpha=0.5, batch_size=4, max_epochs=2, convergence_epsilon=1e-12, seed=_tame_seed(shape)
    )
    plain_trace, enc_trace = [], []

    _, plain_report = wnn.train_plain(
        data, shape, config, mode="poly", on_batch=lambda e, b, p: plain_trace.append(p.copy())
    )
    samples = ppwnn.encrypt_dataset(data, roles.custodian.public_keys, data_rng)
    enc, enc_report = ppwnn.train_encrypted(
        samples, shape, config, roles, on_batch=lambda e, b, p: enc_trace.append(roles.custodian.decrypt_params(p)[0])
    )

    assert len(enc_trace) == len(plain_trace) == 20
    for step, (mine, theirs) in enumerate(zip(enc_trace, plain_trace)):
        for name, value in theirs.groups().items():
            assert np.allclose(getattr(mine, name), value, atol=TOL), f"batch {step}: {name}"
    assert np.allclose(enc_report.loss_trace, plain_report.loss_trace, atol=TOL)
    assert enc_report.max_depth_consumed == ppwnn.TRAINING_DEPTH
    assert enc_report.stop_reason == "max_epochs"
    assert enc.generation == 20

    metrics = ppwnn.test_encrypted(enc, samples[:10], roles, workers=2)
    final, _ = roles.custodian.decrypt_params(enc)
    labels, _ = wnn.predict_labels(final, data.features[:10], mode="poly")
    assert metrics.n == 10
    assert metrics.accuracy == pytest.approx(np.mean(np.array(labels) == data.labels[:10]))


@pytest.mark.slow
def test_encrypted_training_drift_stays_bounded_over_five_epochs(roles, data_rng):
    shape = WnnShape(nin=3, nhn=2)
    data = _small_dataset(n=24, nin=3, seed=4)
    config = TrainConfig(
        eta=0.02, alpha=0.5, batch_size=4, max_epochs=5, convergence_epsilon=1e-12, seed=_tame_seed(shape)
    )
    plain_trace, enc_trace = [], []

    wnn.train_plain(data, shape, config, mode="poly", on_batch=lambda e, b, p: plain_trace.append(p.copy()))
    samples = ppwnn.encrypt_dataset(data, roles.custodian.public_keys, data_rng)
    _, enc_report = ppwnn.train_encrypted(
        samples, shape, config, roles, on_batch=lambda e, b, p: enc_trace.append(roles.custodian.decrypt_params(p)[0])
    )

    assert enc_report.epochs_run == 5
    assert len(enc_trace) == len(plain_trace) == 30
    for step, (mine, theirs) in enumerate(zip(enc_trace, plain_trace)):
        tolerance = 1e-2 if step < 20 else 0.05
        for name, value in theirs.groups().items():
            assert np.max(np.abs(getattr(mine, name) - value)) < tolerance, f"batch {step}: {name}"


# --- checkpoints -------------------------------------------------------------------


def test_encrypted_checkpoint_roundtrip(roles, tmp_path):
    params = _params(nin=2, nhn=2)
    enc = roles.custodian.encrypt_params(params, MomentumState.zeros(params.shape), generation=4)

    ppwnn.save_encrypted_checkpoint(enc, tmp_path / "ckpt", config_hash="abc123")
    loaded, manifest = ppwnn.load_encrypted_checkpoint(tmp_path / "ckpt", roles.context)

    assert manifest["config_hash"] == "abc123"
    assert manifest["ciphertexts"] == 2 * 2 * 2 + 7 * 2
    assert loaded.generation == 4
    assert [serialize(ct) for ct in loaded.ciphertexts()] == [serialize(ct) for ct in enc.ciphertexts()]
    decrypted, _ = roles.custodian.decrypt_params(loaded)
    assert np.allclose(decrypted.w, params.w, atol=1e-6)


def test_encrypted_checkpoint_count_mismatch(roles, tmp_path):
    params = _params(nin=2, nhn=1)
    enc = roles.custodian.encrypt_params(params, MomentumState.zeros(params.shape))
    directory = ppwnn.save_encrypted_checkpoint(enc, tmp_path / "ckpt")
    manifest_path = directory / "manifest.yaml"
    manifest = yaml.safe_load(manifest_path.read_text(encoding="utf-8"))
    manifest["shape"]["nhn"] = 2
    manifest_path.write_text(yaml.safe_dump(manifest), encoding="utf-8")

    with pytest.raises(FormatError, match="needs 22"):
        ppwnn.load_encrypted_checkpoint(directory, roles.context)
