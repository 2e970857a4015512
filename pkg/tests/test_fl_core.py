import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chainfl.errors import EmptyAggregationError, InvalidInputError, TrainingDivergedError
from chainfl.fl_core import (
    Activation,
    Dataset,
    MlpArchitecture,
    ModelParameters,
    TrainConfig,
    WeightedSubmission,
    aggregate,
    aggregation_weights,
    evaluate,
    forward,
    init_model,
    load_checkpoint,
    local_train,
    loss_and_grad,
    save_checkpoint,
)
from chainfl.ledger import hash_model

from oracles import central_difference, mlp_forward_scalar


def test_param_count_closed_form():
    assert MlpArchitecture((4, 10, 3)).param_count == 4 * 10 + 10 + 10 * 3 + 3 == 83


@pytest.mark.parametrize("sizes", [(4,), (4, 1), (0, 3), (3, -2, 2)])
def test_bad_architectures(sizes):
    with pytest.raises(InvalidInputError):
        MlpArchitecture(sizes)


def test_init_deterministic_and_zero_bias(arch):
    a, b = init_model(arch, 5), init_model(arch, 5)
    assert a == b
    assert init_model(arch, 6) != a
    for w, bias in a.layers():
        assert np.all(bias == 0)
        bound = math.sqrt(6 / sum(w.shape))
        assert np.all(np.abs(w) <= bound)


def test_parameters_reject_wrong_length_and_nan(arch):
    with pytest.raises(InvalidInputError):
        ModelParameters(np.zeros(arch.param_count - 1), arch)
    bad = np.zeros(arch.param_count)
    bad[0] = np.nan
    with pytest.raises(InvalidInputError):
        ModelParameters(bad, arch)


def test_forward_zero_weights_is_uniform():
    arch = MlpArchitecture((5, 7, 4))
    model = ModelParameters(np.zeros(arch.param_count), arch)
    probs = forward(model, np.random.default_rng(0).normal(size=(10, 5)))
    assert np.allclose(probs, 0.25, atol=1e-15)


def test_forward_rows_sum_to_one(arch):
    model = init_model(arch, 1)
    probs = forward(model, np.random.default_rng(1).normal(scale=5, size=(200, 4)))
    assert np.all(probs >= 0)
    assert np.max(np.abs(probs.sum(axis=1) - 1)) <= 1e-9


def test_forward_width_mismatch(arch):
    with pytest.raises(InvalidInputError):
        forward(init_model(arch, 0), np.zeros((2, 5)))


@pytest.mark.parametrize("activation", ["relu", "sigmoid"])
def test_forward_matches_hand_arithmetic_on_2_2_2(activation):
    arch = MlpArchitecture((2, 2, 2), Activation(activation))
    # W1 row-major, b1, W2 row-major, b2
    values = [0.5, -1.0, 2.0, 0.25, 0.1, -0.2, 1.5, -0.5, 0.3, 0.7, 0.05, -0.05]
    model = ModelParameters(values, arch)
    layers = [([[0.5, -1.0], [2.0, 0.25]], [0.1, -0.2]), ([[1.5, -0.5], [0.3, 0.7]], [0.05, -0.05])]
    x = [0.8, -0.3]
    expected = mlp_forward_scalar(layers, x, activation)
    assert forward(model, np.array([x]))[0] == pytest.approx(expected, abs=1e-14)


def test_learning_rate_zero_is_identity(arch, blob_data):
    model = init_model(arch, 3)
    out = local_train(model, blob_data, TrainConfig(0.0, 2, 10, 1))
    assert out == model


def test_single_step_matches_finite_difference(arch):
    model = init_model(arch, 4)
    x = np.array([[0.3, -1.2, 0.7, 2.0]])
    y = np.array([2])
    lr = 0.1
    out = local_train(model, Dataset(x, y), TrainConfig(lr, 1, 1, 0))

    def loss(v):
        return loss_and_grad(ModelParameters(v, arch), x, y)[0]

    g = np.array(central_difference(loss, list(model.values)))
    expected = model.values - lr * g
    step = out.values - model.values
    assert np.linalg.norm(step - (expected - model.values)) <= 1e-4 * np.linalg.norm(lr * g)


def test_training_reduces_loss_on_separable_blobs(arch, blob_data):
    model = init_model(arch, 2)
    losses = []
    for epoch in range(10):
        model = local_train(model, blob_data, TrainConfig(0.05, 1, 16, epoch))
        losses.append(loss_and_grad(model, blob_data.features, blob_data.labels)[0])
    assert losses[-1] < losses[0]
    # trend: each epoch's loss sits below the first-epoch loss
    assert all(l < losses[0] + 1e-12 for l in losses[1:])


def test_training_does_not_mutate_input(arch, blob_data):
    model = init_model(arch, 2)
    before = model.values.copy()
    local_train(model, blob_data, TrainConfig(0.1, 1, 8, 0))
    assert np.array_equal(model.values, before)


def test_training_is_bit_deterministic(arch, blob_data):
    cfg = TrainConfig(0.05, 2, 16, 42)
    a = local_train(init_model(arch, 1), blob_data, cfg)
    b = local_train(init_model(arch, 1), blob_data, cfg)
    assert a.canonical_bytes() == b.canonical_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point
def test_divergence_reports_step(arch, blob_data):
    with pytest.raises(TrainingDivergedError) as err:
        local_train(init_model(arch, 1), blob_data, TrainConfig(1e305, 1, 8, 0))
    assert err.value.step >= 0


def test_batch_larger_than_data_rejected(arch):
    ds = Dataset(np.zeros((3, 4)), np.zeros(3))
    with pytest.raises(InvalidInputError):
        local_train(init_model(arch, 0), ds, TrainConfig(0.1, 1, 4, 0))


def test_evaluate_perfect_and_pure(arch, blob_data):
    model = init_model(arch, 0)
    acc = evaluate(model, blob_data)
    assert evaluate(model, blob_data) == acc
    # an output bias that makes class y win for every row y == const
    labels = np.zeros(blob_data.size, dtype=int)
    values = np.zeros(arch.param_count)
    values[-3:] = [5.0, 0.0, 0.0]
    assert evaluate(ModelParameters(values, arch), Dataset(blob_data.features, labels)) == 1.0


def test_evaluate_zero_model_on_balanced_data_is_near_chance():
    c = 4
    arch = MlpArchitecture((3, 5, c))
    rng = np.random.default_rng(11)
    ds = Dataset(rng.normal(size=(500, 3)), np.arange(500) % c)
    acc = evaluate(ModelParameters(np.zeros(arch.param_count), arch), ds)
    # all-tie rows predict class 0, so accuracy is exactly the class-0 share
    assert abs(acc - 1 / c) <= 0.1


def test_evaluate_ties_go_to_lowest_class():
    arch = MlpArchitecture((2, 3))
    ds = Dataset(np.ones((4, 2)), [0, 1, 2, 0])
    assert evaluate(ModelParameters(np.zeros(arch.param_count), arch), ds) == 0.5


def _params(arch, fill):
    return ModelParameters(np.full(arch.param_count, float(fill)), arch)


def test_aggregate_mean_of_two():
    arch = MlpArchitecture((1, 2))  # 4 parameters
    out = aggregate([(_params(arch, 2), 10, 0, 0), (_params(arch, 4), 10, 0, 0)])
    assert np.all(out.values == 3.0)


def test_aggregate_single_client_exact(arch):
    p = init_model(arch, 9)
    assert aggregate([WeightedSubmission(p, 17)]) == p


def test_aggregate_flagged_client_equals_removal(arch):
    rng = np.random.default_rng(0)
    ps = [ModelParameters(rng.normal(size=arch.param_count), arch) for _ in range(3)]
    with_flag = aggregate([(ps[0], 30, 0, 0), (ps[1], 50, 0, 1), (ps[2], 20, 0, 0)])
    without = aggregate([(ps[0], 30, 0, 0), (ps[2], 20, 0, 0)])
    assert np.max(np.abs(with_flag.values - without.values)) <= 1e-12


def test_aggregate_all_flagged(arch):
    p = init_model(arch, 0)
    with pytest.raises(EmptyAggregationError):
        aggregate([(p, 5, 1, 0), (p, 5, 0, 1)])


def test_aggregate_architecture_mismatch():
    a = init_model(MlpArchitecture((2, 2)), 0)
    b = init_model(MlpArchitecture((3, 2)), 0)
    with pytest.raises(InvalidInputError):
        aggregate([(a, 1, 0, 0), (b, 1, 0, 0)])


@settings(max_examples=100, deadline=None)
@given(
    sizes=st.lists(st.integers(1, 500), min_size=1, max_size=8),
    data=st.data(),
)
def test_aggregation_properties(sizes, data):
    arch = MlpArchitecture((2, 3, 2))
    seed = data.draw(st.integers(0, 2**32 - 1))
    flags = data.draw(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=len(sizes), max_size=len(sizes)))
    flags[data.draw(st.integers(0, len(sizes) - 1))] = (0, 0)
    rng = np.random.default_rng(seed)
    ps = [ModelParameters(rng.normal(size=arch.param_count), arch) for _ in sizes]
    subs = [(p, n, a, b) for p, n, (a, b) in zip(ps, sizes, flags)]

    weights = aggregation_weights(subs)
    assert sum(w for w, (a, b) in zip(weights, flags) if a == b == 0) == pytest.approx(1.0, abs=1e-12)

    kept = [s for s in subs if s[2] == s[3] == 0]
    assert np.max(np.abs(aggregate(subs).values - aggregate(kept).values)) <= 1e-12

    same = aggregate([(ps[0], n, 0, 0) for n in sizes])
    assert np.max(np.abs(same.values - ps[0].values)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), activation=st.sampled_from(["relu", "sigmoid"]))
def test_gradient_matches_central_differences(seed, activation):
    rng = np.random.default_rng(seed)
    arch = MlpArchitecture((3, 5, 3), Activation(activation))
    model = ModelParameters(rng.normal(size=arch.param_count), arch)
    x = rng.normal(size=(6, 3))
    y = rng.integers(0, 3, 6)
    _, g = loss_and_grad(model, x, y)
    num = np.array(central_difference(lambda v: loss_and_grad(ModelParameters(v, arch), x, y)[0], list(model.values)))
    assert np.linalg.norm(g - num) <= 1e-4 * max(np.linalg.norm(num), 1e-8)


def test_checkpoint_round_trip_rehashes_identically(tmp_path, arch):
    p = init_model(arch, 12)
    path = tmp_path / "ckpt.json"
    save_checkpoint(p, path)
    back = load_checkpoint(path)
    assert back == p
    assert hash_model(back) == hash_model(p)
    assert bytes.fromhex(p.to_checkpoint()["parameters_hex"]) == p.canonical_bytes()[4 * len(arch.layer_sizes):]
