"""Tensor core, layers, optimizer, gradient checking and RNG streams."""

import numpy as np
import pytest

from maefuse.errors import ConfigError, ContractError, NonFiniteError
from maefuse.nnkit import functional as F
from maefuse.nnkit.gradcheck import grad_check, relative_error
from maefuse.nnkit.layers import Conv2d, Linear, Module, MultiHeadAttention
from maefuse.nnkit.optim import AdamW
from maefuse.nnkit.rng import STREAMS, from_state, get_state, set_state, stream
from maefuse.nnkit.tensor import Parameter, Tensor, default_dtype, log, no_grad


class TestTensor:
    """Autodiff bookkeeping and the finiteness contract."""

    def test_broadcast_gradient_is_reduced_to_operand_shape(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.arange(4.0), requires_grad=True)
        (a * b).sum().backward()
        np.testing.assert_array_equal(a.grad, np.tile(np.arange(4.0), (3, 1)))
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))

    def test_shared_node_accumulates_gradient(self):
        x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
        (x * x + x).sum().backward()
        np.testing.assert_array_equal(x.grad, [5.0, 7.0])

    def test_nonfinite_forward_raises(self):
        with pytest.raises(NonFiniteError):
            log(Tensor(np.array([0.0, 1.0])))

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert not y.requires_grad

    def test_float64_scalars_keep_precision(self):
        t = Tensor(np.ones((2, 3))).sum()
        assert (t * (1.0 / 3.0)).dtype == np.float64

    def test_default_dtype_context(self):
        with default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32


class TestFunctional:
    """Worked examples for convolution and attention."""

    def test_identity_1x1_conv(self):
        x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
        out = F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_channel_sum(self):
        out = F.conv2d(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 2, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 2.0))

    def test_same_padding_shape(self):
        out = F.conv2d(Tensor(np.zeros((1, 1, 32, 32))), Tensor(np.zeros((8, 1, 3, 3))), None, stride=1, pad=1)
        assert out.shape == (1, 8, 32, 32)

    def test_conv_channel_mismatch_names_dimension(self):
        with pytest.raises(ContractError, match="channel"):
            F.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))

    @pytest.fixture
    def mha(self):
        return MultiHeadAttention(8, 2, np.random.default_rng(0)).astype(np.float64)

    def test_single_key_attention_is_value_projection(self, mha):
        rng = np.random.default_rng(1)
        q, kv = Tensor(rng.standard_normal((2, 5, 8))), Tensor(rng.standard_normal((2, 1, 8)))
        p = mha.params()
        v = F.linear(kv, p["wv"], p["bv"])
        expected = F.linear(v, p["wo"], p["bo"]).data
        np.testing.assert_allclose(mha(q, kv).data, np.broadcast_to(expected, (2, 5, 8)), atol=1e-12)

    def test_duplicated_keys_leave_output_unchanged(self, mha):
        rng = np.random.default_rng(2)
        q, kv = Tensor(rng.standard_normal((1, 3, 8))), rng.standard_normal((1, 4, 8))
        doubled = Tensor(np.concatenate([kv, kv], axis=1))
        np.testing.assert_allclose(mha(q, Tensor(kv)).data, mha(q, doubled).data, atol=1e-6)

    def test_key_permutation_invariance(self, mha):
        rng = np.random.default_rng(3)
        q, kv = Tensor(rng.standard_normal((1, 3, 8))), rng.standard_normal((1, 6, 8))
        perm = rng.permutation(6)
        np.testing.assert_allclose(mha(q, Tensor(kv)).data, mha(q, Tensor(kv[:, perm])).data, atol=1e-6)

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            MultiHeadAttention(6, 4, np.random.default_rng(0))

    def test_cross_entropy_uniform_logits(self):
        loss = F.cross_entropy(Tensor(np.zeros((3, 7))), [0, 3, 6])
        np.testing.assert_allclose(loss.item(), np.log(7.0), atol=1e-6)


class TestGradCheck:
    """The finite-difference oracle itself."""

    def test_polynomial_exactness(self):
        res = grad_check(lambda x: (x * x).sum(), [np.array([1.0, 2.0, 3.0])])
        assert res.passed
        assert res.max_rel_error < 1e-9

    def test_rejects_non_scalar(self):
        with pytest.raises(ContractError):
            grad_check(lambda x: x * 2.0, [np.ones(3)])

    def test_detects_wrong_gradient(self):
        def bad(x):
            from maefuse.nnkit.tensor import make_op

            return make_op(np.asarray((x.data**2).sum()), (x,), lambda g: (g * x.data,), "bad")

        assert not grad_check(bad, [np.array([1.0, -2.0])]).passed

    def test_relative_error_is_normwise(self):
        assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
        np.testing.assert_allclose(relative_error(np.array([3.0, 4.0]), np.array([0.0, 0.0])), 1.0)


class TestModules:
    """Parameter naming, freezing and casting."""

    def test_names_are_dotted_paths(self):
        class Net(Module):
            def __init__(self):
                self.fc = Linear(3, 2, np.random.default_rng(0))
                self.convs = [Conv2d(1, 2, 3, np.random.default_rng(1))]
                self.assign_names()

        names = [p.name for p in Net().parameters()]
        assert names == ["fc.weight", "fc.bias", "convs.0.weight", "convs.0.bias"]

    def test_freeze_blocks_gradients(self):
        lin = Linear(3, 2, np.random.default_rng(0))
        lin.freeze()
        out = lin(Tensor(np.ones((1, 3)), requires_grad=True)).sum()
        out.backward()
        assert all(p.grad is None for p in lin.parameters())
        assert lin.num_trainable() == 0


class TestAdamW:
    """One-step closed forms of the decoupled-decay update."""

    def _param(self, value):
        return Parameter(np.array([value], dtype=np.float64), name="p")

    def test_zero_grad_no_decay_is_noop(self):
        p = self._param(1.0)
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        p.grad = np.zeros(1)
        opt.step()
        assert p.data[0] == 1.0

    def test_decay_only(self):
        p = self._param(1.0)
        opt = AdamW([p], lr=0.1, weight_decay=0.01)
        p.grad = np.zeros(1)
        opt.step()
        np.testing.assert_allclose(p.data[0], 0.999, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("g", [1e-3, 0.5, -2.0, 40.0])
    def test_first_step_is_signed_lr(self, g):
        p = self._param(0.0)
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        p.grad = np.array([g])
        opt.step()
        np.testing.assert_allclose(p.data[0], -0.1 * np.sign(g), atol=0.1 * 1e-8 / abs(g) + 1e-15)

    def test_nan_aborts_without_partial_update(self):
        a, b = self._param(1.0), Parameter(np.array([2.0]), name="q")
        opt = AdamW([a, b], lr=0.1)
        a.grad, b.grad = np.array([1.0]), np.array([np.nan])
        with pytest.raises(NonFiniteError):
            opt.step()
        assert a.data[0] == 1.0 and b.data[0] == 2.0
        assert opt.state.step == 0

    def test_frozen_parameter_untouched(self):
        p = self._param(1.0)
        p.frozen = True
        opt = AdamW([p], lr=0.1)
        opt.step()
        assert p.data[0] == 1.0


class TestRng:
    """Named Philox streams."""

    def test_same_seed_same_draws(self):
        np.testing.assert_array_equal(stream(7, "data").random(5), stream(7, "data").random(5))

    def test_streams_are_independent(self):
        draws = [stream(7, name).random(4).tobytes() for name in STREAMS]
        assert len(set(draws)) == len(STREAMS)

    def test_state_round_trip(self):
        g = stream(3, "mask")
        g.random(11)
        state = get_state(g)
        expected = g.random(6)
        np.testing.assert_array_equal(from_state(state).random(6), expected)
        h = stream(99, "init")
        set_state(h, state)
        np.testing.assert_array_equal(h.random(6), expected)

    def test_known_first_draw(self):
        # Pinned so that any change to the stream derivation is noticed.
        assert stream(0, "data").integers(0, 2**32) == 1182374381
        assert stream(0, "init").integers(0, 2**32) == 55784017
