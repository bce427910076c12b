import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from meshuda import tensor as T
from meshuda.exceptions import ConfigError, InsufficientBatchError
from meshuda.uda import (
    DomainRegularizer,
    UdaConfig,
    binary_cross_entropy_logits,
    cmd_distance,
    combined_objective,
    coral_distance,
    dann_domain_loss,
    grad_reverse,
    make_discriminator,
)
from oracles import cmd_direct, coral_direct

unit = st.floats(0, 1, allow_nan=False)
batch_pair = st.tuples(st.integers(2, 8), st.integers(2, 8), st.integers(1, 4)).flatmap(
    lambda s: st.tuples(arrays(np.float64, (s[0], s[2]), elements=unit),
                        arrays(np.float64, (s[1], s[2]), elements=unit)))


@given(batch_pair)
def test_coral_matches_direct_evaluation(pair):
    hs, ht = pair
    assert coral_distance(hs, ht).item() == pytest.approx(coral_direct(hs, ht), rel=1e-10, abs=1e-14)


@given(batch_pair, st.integers(1, 6))
def test_cmd_matches_direct_evaluation(pair, order):
    hs, ht = pair
    got = cmd_distance(hs, ht, order, (0.0, 1.0)).item()
    assert got == pytest.approx(cmd_direct(hs, ht, order, 0.0, 1.0), rel=1e-10, abs=1e-14)


@given(batch_pair)
def test_distances_are_nonnegative_and_zero_on_identical_batches(pair):
    hs, _ = pair
    assert coral_distance(hs, hs).item() == 0.0
    assert cmd_distance(hs, hs, 5, (0.0, 1.0)).item() == 0.0


def test_cmd_bound_scaling():
    hs = np.array([[0.0], [1.0]])
    ht = np.array([[0.5], [0.5]])
    # doubling the interval halves the first-order and quarters the second-order term
    assert cmd_distance(hs, ht, 2, (0.0, 2.0)).item() == pytest.approx(0.25 / 4)
    assert cmd_distance(ht + 0.5, ht, 1, (0.0, 2.0)).item() == pytest.approx(0.25)


def test_input_validation():
    with pytest.raises(InsufficientBatchError):
        coral_distance(np.ones((1, 2)), np.ones((3, 2)))
    with pytest.raises(ConfigError):
        cmd_distance(np.ones((2, 1)), np.ones((2, 1)), 2, (1.0, 0.0))
    with pytest.raises(ConfigError):
        UdaConfig(kind="mmd")
    with pytest.raises(ConfigError):
        UdaConfig(kind="cmd", lam=-1.0)
    with pytest.raises(ConfigError):
        combined_objective(1.0, 1.0, -0.5)


def test_none_kind_forces_zero_lambda():
    assert UdaConfig(kind="none", lam=3.0).lam == 0.0
    assert not DomainRegularizer(UdaConfig("none"), 4).active
    assert not DomainRegularizer(UdaConfig("cmd", 0.0), 4).active


def test_combined_objective():
    assert combined_objective(2.0, T.Tensor(3.0), 0.5).item() == 3.5
    assert combined_objective(2.0, T.Tensor(3.0), 0.0).item() == 2.0
    assert combined_objective(2.0, None, 0.3).item() == 2.0


def test_gradient_reversal_is_identity_forward_and_negated_backward():
    h = T.parameter(np.array([[1.0, -2.0]]))
    with T.Tape() as tape:
        out = T.reduce_sum(T.mul(grad_reverse(h, 0.7), np.array([[3.0, 5.0]])))
    assert out.item() == pytest.approx(-7.0)
    assert np.allclose(T.backward(out, tape, [h])[h], [[-2.1, -3.5]])


def test_bce_with_logits_matches_closed_form():
    logits = np.array([[-30.0], [0.0], [2.0], [40.0]])
    labels = np.array([0.0, 1.0, 0.0, 1.0])
    p = 1 / (1 + np.exp(-logits[:, 0]))
    ref = -np.mean(labels * np.log(np.clip(p, 1e-300, 1)) + (1 - labels) * np.log(np.clip(1 - p, 1e-300, 1)))
    assert binary_cross_entropy_logits(T.Tensor(logits), labels).item() == pytest.approx(ref, rel=1e-10)


def test_dann_loss_at_chance_is_log_two():
    disc = make_discriminator(2, (4,), seed=0)
    for name in disc.names():
        disc.tensors[name] = T.parameter(np.zeros(disc[name].shape), name)
    loss = dann_domain_loss(np.ones((3, 2)), np.zeros((5, 2)), disc)
    assert loss.item() == pytest.approx(np.log(2.0))


def test_discriminator_descent_separates_domains_while_features_ascend():
    rng = np.random.default_rng(0)
    hs = rng.normal(-1, 0.3, (32, 2))
    ht = rng.normal(1, 0.3, (32, 2))
    disc = make_discriminator(2, (8,), seed=1)
    start = dann_domain_loss(hs, ht, disc).item()
    for _ in range(200):
        params = disc.values()
        with T.Tape() as tape:
            loss = dann_domain_loss(hs, ht, disc)
        grads = T.backward(loss, tape, params)
        for name, p in zip(disc.names(), params):
            disc.tensors[name] = T.parameter(p.data - 0.5 * grads[p], name)
    assert dann_domain_loss(hs, ht, disc).item() < 0.5 * start
    # the reversed gradient pushes source features towards the target side
    leaf = T.parameter(hs)
    with T.Tape() as tape:
        loss = dann_domain_loss(leaf, ht, disc)
    g = T.backward(loss, tape, [leaf])[leaf]
    moved = hs - 0.5 * g
    assert dann_domain_loss(moved, ht, disc).item() > dann_domain_loss(hs, ht, disc).item()


def test_regularizer_dispatch():
    rng = np.random.default_rng(2)
    zs, zt = T.Tensor(rng.normal(size=(6, 3))), T.Tensor(rng.normal(size=(6, 3)))
    cmd = DomainRegularizer(UdaConfig("cmd", 0.1), 3)
    assert cmd.distance(zs, zt).item() == pytest.approx(
        cmd_direct(np.tanh(zs.data), np.tanh(zt.data), 5, -1.0, 1.0), rel=1e-12)
    coral = DomainRegularizer(UdaConfig("coral", 0.1), 3)
    assert coral.distance(zs, zt).item() == pytest.approx(coral_direct(zs.data, zt.data), rel=1e-12)
    dann = DomainRegularizer(UdaConfig("dann", 0.1), 3, seed=4)
    assert len(dann.parameters()) == 4
    assert dann.distance(zs, zt).item() > 0
    with pytest.raises(ConfigError):
        DomainRegularizer(UdaConfig("none"), 3).distance(zs, zt)


def test_config_round_trip():
    cfg = UdaConfig("dann", 0.01, disc_hidden=(16, 8))
    assert UdaConfig.from_dict(cfg.to_dict()) == cfg
