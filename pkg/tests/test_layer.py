import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from molex import tensor as T
from molex.errors import ConfigError, ShapeError
from molex.layer import (GatingNetwork, LoRAExpert, MoLExLayer, extend_experts, gate, lora_apply,
                         molex_forward, route)
from molex.losses import orth_loss
from molex.tensor import Tensor

from conftest import check_grads


def random_layer(rng, d=8, n=3, k=2, r=2, ffn=None, gate_scale=1.0):
    experts = [LoRAExpert(T.parameter(rng.normal(size=(d, r))), T.parameter(rng.normal(size=(r, d))))
               for _ in range(n)]
    g = GatingNetwork(T.parameter(rng.normal(size=(d, n)) * gate_scale),
                      T.parameter(rng.normal(size=(d, n)) * 0.1))
    return MoLExLayer(experts, g, k, ffn)


def dense_mixture(layer, phi, mask=None):
    """Materialize every A_i B_i and mix with the raw gate scores, optionally masked."""
    logits = phi @ layer.gating.w_g.data
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    g = z / z.sum(axis=-1, keepdims=True)
    if mask is not None:
        g = g * mask
    out = np.zeros_like(phi)
    for i, e in enumerate(layer.experts):
        out += g[:, i:i + 1] * (phi @ (e.a.data @ e.b.data).T)
    return out, g


def sort_oracle(scores, k):
    pairs = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return pairs[:k]


# ---------------------------------------------------------------- lora_apply

def test_lora_zero_a_gives_zero(rng):
    e = LoRAExpert(Tensor(np.zeros((6, 2))), Tensor(rng.normal(size=(2, 6))))
    assert np.array_equal(lora_apply(e, Tensor(rng.normal(size=(4, 6)))).data, np.zeros((4, 6)))


def test_lora_hand_example():
    e = LoRAExpert(Tensor([[1.0], [0.0]]), Tensor([[0.0, 1.0]]))
    np.testing.assert_array_equal(lora_apply(e, Tensor([[3.0, 5.0]])).data, [[5.0, 0.0]])


def test_lora_matches_dense_product(rng):
    e = LoRAExpert(Tensor(rng.normal(size=(16, 4))), Tensor(rng.normal(size=(4, 16))))
    phi = rng.normal(size=(7, 16))
    oracle = ((e.a.data @ e.b.data) @ phi.T).T
    np.testing.assert_allclose(lora_apply(e, Tensor(phi)).data, oracle, atol=1e-12)


def test_lora_shape_error(rng):
    e = LoRAExpert.init(8, 2, rng)
    with pytest.raises(ShapeError):
        lora_apply(e, Tensor(np.ones((3, 7))))


def test_lora_rejects_mismatched_factors():
    with pytest.raises(ShapeError):
        LoRAExpert(Tensor(np.ones((8, 2))), Tensor(np.ones((3, 8))))


def test_fresh_expert_is_a_no_op(rng):
    e = LoRAExpert.init(8, 2, rng)
    assert np.array_equal(e.weight(), np.zeros((8, 8)))


# ---------------------------------------------------------------- gate

def test_zero_gate_is_uniform(rng):
    g = GatingNetwork(Tensor(np.zeros((5, 4))), Tensor(np.zeros((5, 4))))
    out = gate(g, Tensor(rng.normal(size=(3, 5)))).data
    np.testing.assert_allclose(out, np.full((3, 4), 0.25), atol=1e-15)


def test_gate_softmax_of_logits():
    g = GatingNetwork(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.zeros((1, 3))))
    x = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(gate(g, Tensor([[1.0]])).data[0], np.exp(x) / np.exp(x).sum(), atol=1e-12)


def test_noisy_gate_is_seed_deterministic(rng):
    g = GatingNetwork(Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(5, 4))))
    phi = Tensor(rng.normal(size=(6, 5)))
    a = gate(g, phi, training=True, rng=np.random.default_rng(7)).data
    b = gate(g, phi, training=True, rng=np.random.default_rng(7)).data
    assert np.array_equal(a, b)
    clean = gate(g, phi).data
    assert not np.allclose(a, clean)


def test_noise_is_off_at_inference(rng):
    g = GatingNetwork(Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(5, 4))))
    phi = Tensor(rng.normal(size=(6, 5)))
    a = gate(g, phi, training=False, rng=np.random.default_rng(1)).data
    b = gate(g, phi, training=False, rng=np.random.default_rng(2)).data
    assert np.array_equal(a, b)


def test_initial_noise_scale_is_one_tenth(rng):
    g = GatingNetwork.init(6, 3)
    assert np.logaddexp(0.0, g.noise_bias) == pytest.approx(0.1)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 10), st.integers(1, 12), st.integers(0, 2 ** 32 - 1))
def test_gate_rows_sum_to_one(n, d, seed):
    r = np.random.default_rng(seed)
    g = GatingNetwork(Tensor(r.normal(size=(d, n)) * 5), Tensor(r.normal(size=(d, n))))
    out = gate(g, Tensor(r.normal(size=(4, d)) * 3), training=True, rng=r).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out >= 0) and np.all(out <= 1)


# ---------------------------------------------------------------- route

def test_route_top2():
    np.testing.assert_array_equal(route(np.array([0.4, 0.3, 0.2, 0.1]), 2).indices, [0, 1])


def test_route_k_equals_n_sorts_everything():
    np.testing.assert_array_equal(route(np.array([0.1, 0.4, 0.2, 0.3]), 4).indices, [1, 3, 2, 0])


def test_route_rejects_k_above_n():
    with pytest.raises(ConfigError):
        route(np.array([0.5, 0.5]), 3)


def test_route_matches_sort_oracle(rng):
    n = 6
    for _ in range(200):
        s = rng.dirichlet(np.ones(n))
        k = int(rng.integers(1, n + 1))
        assert list(route(s, k).indices) == sort_oracle(list(s), k)


def test_route_ties_prefer_lower_index():
    s = np.array([0.25, 0.25, 0.25, 0.25])
    np.testing.assert_array_equal(route(s, 2).indices, [0, 1])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.floats(-100, 100), st.integers(0, 2 ** 32 - 1))
def test_route_is_shift_invariant(n, c, seed):
    r = np.random.default_rng(seed)
    logits = r.normal(size=(5, n))
    k = int(r.integers(1, n + 1))
    a = route(T.softmax(Tensor(logits)), k).indices
    b = route(T.softmax(Tensor(logits + c)), k).indices
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- molex_forward

def test_zero_experts_leave_ffn_output(rng):
    ffn = lambda x: T.tanh(x * 0.5)
    layer = MoLExLayer.init(8, 4, 2, 2, rng, ffn=ffn)
    phi = Tensor(rng.normal(size=(5, 8)))
    out, _ = molex_forward(layer, phi)
    assert np.array_equal(out.data, ffn(phi).data)


def test_single_expert_has_unit_weight(rng):
    layer = random_layer(rng, n=1, k=1, ffn=lambda x: x * 2.0)
    phi = rng.normal(size=(4, 8))
    e = layer.experts[0]
    expected = phi @ (e.a.data @ e.b.data).T + 2 * phi
    np.testing.assert_allclose(molex_forward(layer, Tensor(phi))[0].data, expected, atol=1e-12)


def test_topk_matches_masked_dense_oracle(rng):
    layer = random_layer(rng, d=8, n=3, k=2)
    phi = rng.normal(size=(10, 8))
    out, dec = molex_forward(layer, Tensor(phi))
    oracle, _ = dense_mixture(layer, phi, dec.mask())
    np.testing.assert_allclose(out.data, oracle, atol=1e-12)


def test_k_equals_n_is_dense_mixture(rng):
    layer = random_layer(rng, d=8, n=4, k=4)
    phi = rng.normal(size=(6, 8))
    oracle, _ = dense_mixture(layer, phi)
    np.testing.assert_allclose(molex_forward(layer, Tensor(phi))[0].data, oracle, atol=1e-12)


def test_scores_are_not_renormalized_over_topk(rng):
    layer = random_layer(rng, d=8, n=4, k=1)
    phi = rng.normal(size=(1, 8))
    out, dec = molex_forward(layer, Tensor(phi))
    i = dec.indices[0, 0]
    g = dec.scores[0, i]
    assert g < 1.0
    e = layer.experts[i]
    np.testing.assert_allclose(out.data, g * phi @ (e.a.data @ e.b.data).T, atol=1e-12)


def test_batched_input_keeps_leading_dims(rng):
    layer = random_layer(rng, d=8, n=3, k=2)
    phi = rng.normal(size=(2, 5, 8))
    out, dec = molex_forward(layer, Tensor(phi))
    assert out.shape == (2, 5, 8)
    assert dec.indices.shape == (2, 5, 2) and dec.scores.shape == (2, 5, 3)
    flat, _ = molex_forward(layer, Tensor(phi.reshape(10, 8)))
    np.testing.assert_allclose(out.data.reshape(10, 8), flat.data, atol=1e-14)


def test_unselected_expert_gets_zero_gradient(rng):
    layer = random_layer(rng, d=6, n=4, k=1)
    # make expert 3 lose everywhere
    layer.gating.w_g.data[:, 3] = -50.0 * np.sign(np.ones(6))
    phi = Tensor(np.abs(rng.normal(size=(5, 6))))
    out, dec = molex_forward(layer, phi)
    assert 3 not in dec.selected_experts()
    T.tsum(out * out).backward()
    for p in layer.experts[3].parameters():
        assert p.grad is None or not np.any(p.grad)
    assert np.any(layer.experts[dec.indices[0, 0]].b.grad)


def test_molex_and_orth_gradients_match_finite_differences(rng):
    d = 6
    w_ffn = rng.normal(size=(d, d))
    layer = random_layer(rng, d=d, n=3, k=2, ffn=lambda x: x @ w_ffn, gate_scale=0.5)
    phi = Tensor(rng.normal(size=(4, d)))
    target = rng.normal(size=(4, d))
    # freeze routing so that finite differences never cross a top-K boundary
    _, dec0 = molex_forward(layer, phi)

    def loss():
        out, dec = molex_forward(layer, phi)
        assert np.array_equal(dec.indices, dec0.indices)
        l_orth, _ = orth_loss([layer], [dec])
        return T.tsum((out - target) ** 2) + l_orth * 0.01

    params = [p for e in layer.experts for p in e.parameters()] + [layer.gating.w_g]
    check_grads(loss, params)


def test_k_above_n_is_rejected(rng):
    with pytest.raises(ConfigError):
        MoLExLayer.init(8, 3, 4, 2, rng)


def test_cost_scales_with_k_not_n(rng):
    d, n, r = 256, 12, 32
    phi = Tensor(rng.normal(size=(1024, d)))

    def timed(k):
        layer = random_layer(np.random.default_rng(0), d=d, n=n, k=k, r=r)
        best = np.inf
        for _ in range(3):
            t0 = time.perf_counter()
            molex_forward(layer, phi)
            best = min(best, time.perf_counter() - t0)
        return best

    assert timed(12) >= 2.0 * timed(2)


# ---------------------------------------------------------------- extend_experts

def test_extend_by_one_freezes_old_experts(rng):
    layer = MoLExLayer.init(8, 5, 2, 2, rng)
    extend_experts(layer, 1, rng)
    assert layer.num_experts == 6
    assert [e.trainable for e in layer.experts] == [False] * 5 + [True]
    assert layer.gating.w_g.shape == (8, 6) and layer.gating.w_noise.shape == (8, 6)


def test_extend_by_two_grows_gate_output(rng):
    layer = MoLExLayer.init(8, 5, 2, 2, rng)
    extend_experts(layer, 2, rng)
    assert gate(layer.gating, Tensor(rng.normal(size=(3, 8)))).shape == (3, 7)


def test_extend_rejects_zero(rng):
    with pytest.raises(ConfigError):
        extend_experts(MoLExLayer.init(8, 5, 2, 2, rng), 0, rng)


def test_forward_after_extension_only_renormalizes(rng):
    layer = random_layer(rng, d=8, n=5, k=2)
    old_g = layer.gating.w_g.data.copy()
    phi = rng.normal(size=(12, 8))
    before, dec_before = molex_forward(layer, Tensor(phi))
    extend_experts(layer, 1, rng)
    np.testing.assert_array_equal(layer.gating.w_g.data[:, :5], old_g)
    after, dec_after = molex_forward(layer, Tensor(phi))
    same = np.all(dec_after.indices < 5, axis=-1) & np.all(dec_after.indices == dec_before.indices, axis=-1)
    assert same.any()
    # old experts keep winning: output scales by the ratio of the new to old softmax partition
    for row in np.flatnonzero(same):
        contrib_before = before.data[row]
        ratio = dec_after.scores[row, dec_after.indices[row, 0]] / dec_before.scores[row, dec_before.indices[row, 0]]
        np.testing.assert_allclose(after.data[row], ratio * contrib_before, atol=1e-12)
