"""Tests for the two-encoder fusion network and its gradients."""

import numpy as np
import pytest

from bmsfed.balance import local_prototypes, me_loss_and_grad
from bmsfed.errors import BmsError
from bmsfed.models import Modality
from bmsfed.network import (
    GROUPS,
    ExecPath,
    GradientVector,
    ModelParams,
    backward,
    ce_loss_and_grad,
    encode,
    forward_multi,
    forward_uni,
    init_params,
    param_delta,
    sgd_step,
)
from bmsfed.numkit import RngStream


def _perturbed(params, group, pos, index, h):
    groups = {name: [a.copy() for a in arrays] for name, arrays in params.groups().items()}
    groups[group][pos][index] += h
    return ModelParams.from_groups(groups)


def _check_gradient(params, loss_fn, grads, rng, samples=4, h=1e-6):
    """Central differences on a few random entries of every populated group."""
    for group in grads.mask:
        for pos, analytic in enumerate(grads.get(group)):
            for _ in range(samples):
                index = tuple(int(rng.integers(0, s)) for s in analytic.shape)
                plus = loss_fn(_perturbed(params, group, pos, index, h))
                minus = loss_fn(_perturbed(params, group, pos, index, -h))
                numeric = (plus - minus) / (2 * h)
                a = analytic[index]
                assert abs(a - numeric) <= 1e-4 * max(abs(a), abs(numeric)) + 1e-7, (
                    group, pos, index, a, numeric,
                )


class TestInit:
    """Parameter initialisation and grouping."""

    def test_shapes(self, small_params):
        assert small_params.encoder_a.input_dim == 4
        assert small_params.encoder_i.input_dim == 3
        assert small_params.embedding_dim == 2
        assert small_params.num_classes == 3
        assert small_params.fusion.weight.shape == (4, 3)

    def test_biases_start_at_zero(self, small_params):
        for b in small_params.encoder_a.biases + small_params.encoder_i.biases:
            assert np.all(b == 0)
        assert np.all(small_params.fusion.bias == 0)

    def test_deterministic(self):
        a = init_params(4, 3, 3, RngStream(1, 1))
        b = init_params(4, 3, 3, RngStream(1, 1))
        assert np.array_equal(a.flatten(), b.flatten())

    def test_groups_roundtrip(self, small_params):
        rebuilt = ModelParams.from_groups(small_params.groups())
        assert np.array_equal(rebuilt.flatten(), small_params.flatten())
        assert rebuilt.serial != small_params.serial

    def test_fusion_blocks(self, small_params):
        groups = small_params.groups()
        assert np.array_equal(groups["fusion_a"][0], small_params.fusion.weight[:2])
        assert np.array_equal(groups["fusion_i"][0], small_params.fusion.weight[2:])

    def test_invalid_layers(self):
        with pytest.raises(BmsError) as exc:
            init_params(4, 3, 3, RngStream(0, 0), layers=0)
        assert exc.value.code == "BMS-203"


class TestForward:
    """Forward passes."""

    def test_multi_logits_match_manual(self, small_params, rng):
        xa, xi = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
        fwd = forward_multi(small_params, xa, xi)
        expected = (
            encode(small_params, xa, Modality.A) @ small_params.fusion.weight[:2]
            + encode(small_params, xi, Modality.I) @ small_params.fusion.weight[2:]
            + small_params.fusion.bias
        )
        assert np.allclose(fwd.logits, expected, atol=1e-12)
        assert fwd.path is ExecPath.MULTI

    def test_uni_uses_block_and_bias(self, small_params, rng):
        xi = rng.normal(size=(5, 3))
        fwd = forward_uni(small_params, xi, Modality.I)
        expected = fwd.z @ small_params.fusion.weight[2:] + small_params.fusion.bias
        assert np.allclose(fwd.logits, expected)
        assert fwd.path is ExecPath.UNI_I

    def test_permutation_equivariant(self, small_params, rng):
        xa, xi = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
        perm = rng.permutation(6)
        a = forward_multi(small_params, xa, xi).logits
        b = forward_multi(small_params, xa[perm], xi[perm]).logits
        assert np.allclose(a[perm], b, atol=1e-12)

    def test_width_mismatch(self, small_params):
        with pytest.raises(BmsError) as exc:
            forward_multi(small_params, np.ones((2, 5)), np.ones((2, 3)))
        assert exc.value.code == "BMS-100"

    def test_batch_mismatch(self, small_params):
        with pytest.raises(BmsError) as exc:
            forward_multi(small_params, np.ones((2, 4)), np.ones((3, 3)))
        assert exc.value.code == "BMS-100"

    def test_unavailable_modality(self, small_params):
        with pytest.raises(BmsError) as exc:
            forward_uni(small_params, np.ones((2, 4)), Modality.A, available={Modality.I})
        assert exc.value.code == "BMS-200"


class TestCrossEntropy:
    """Softmax cross-entropy."""

    def test_uniform_logits(self):
        loss, dlogits = ce_loss_and_grad(np.zeros((2, 4)), [0, 3])
        assert loss == pytest.approx(np.log(4))
        assert np.allclose(dlogits.sum(axis=1), 0.0)

    def test_saturated_logits(self):
        loss, _ = ce_loss_and_grad(np.array([[30.0, -30.0]]), [0])
        assert loss <= 1e-12

    def test_large_logits_stay_finite(self):
        loss, dlogits = ce_loss_and_grad(np.array([[1000.0, -1000.0]]), [1])
        assert np.isfinite(loss)
        assert loss == pytest.approx(2000.0)
        assert np.all(np.isfinite(dlogits))

    def test_label_out_of_range(self):
        with pytest.raises(BmsError) as exc:
            ce_loss_and_grad(np.zeros((1, 3)), [3])
        assert exc.value.code == "BMS-201"


class TestBackward:
    """Analytic gradients against central finite differences."""

    def test_multi_ce_gradient(self, small_params, rng):
        xa, xi = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
        y = rng.integers(0, 3, size=6)

        def loss_fn(p):
            return ce_loss_and_grad(forward_multi(p, xa, xi).logits, y)[0]

        fwd = forward_multi(small_params, xa, xi)
        _, dlogits = ce_loss_and_grad(fwd.logits, y)
        grads = backward(small_params, fwd, dlogits)
        assert grads.mask == frozenset(GROUPS)
        _check_gradient(small_params, loss_fn, grads, rng)

    @pytest.mark.parametrize("modality", [Modality.A, Modality.I])
    def test_uni_ce_gradient(self, small_params, rng, modality):
        width = 4 if modality is Modality.A else 3
        x = rng.normal(size=(6, width))
        y = rng.integers(0, 3, size=6)

        def loss_fn(p):
            return ce_loss_and_grad(forward_uni(p, x, modality).logits, y)[0]

        fwd = forward_uni(small_params, x, modality)
        _, dlogits = ce_loss_and_grad(fwd.logits, y)
        grads = backward(small_params, fwd, dlogits)
        _check_gradient(small_params, loss_fn, grads, rng)

    def test_uni_mask_is_exact(self, small_params, rng):
        fwd = forward_uni(small_params, rng.normal(size=(3, 4)), Modality.A)
        _, dlogits = ce_loss_and_grad(fwd.logits, [0, 1, 2])
        grads = backward(small_params, fwd, dlogits)
        assert grads.mask == frozenset({"encoder_a", "fusion_a", "fusion_bias"})
        assert grads.get("encoder_i") is None

    def test_ce_plus_me_gradient(self, small_params, rng):
        """Extra embedding gradient flows through the encoder."""
        xa, xi = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
        y = np.array([0, 1, 2, 0, 1, 2])
        protos = local_prototypes(rng.normal(size=(6, 2)), y, Modality.A)

        def loss_fn(p):
            fwd = forward_multi(p, xa, xi)
            ce = ce_loss_and_grad(fwd.logits, y)[0]
            return ce + 0.7 * me_loss_and_grad(fwd.z_a, y, protos)[0]

        fwd = forward_multi(small_params, xa, xi)
        _, dlogits = ce_loss_and_grad(fwd.logits, y)
        _, dz = me_loss_and_grad(fwd.z_a, y, protos)
        grads = backward(small_params, fwd, dlogits, dz_a=0.7 * dz)
        _check_gradient(small_params, loss_fn, grads, rng)

    def test_stale_cache(self, small_params, rng):
        fwd = forward_multi(small_params, rng.normal(size=(2, 4)), rng.normal(size=(2, 3)))
        _, dlogits = ce_loss_and_grad(fwd.logits, [0, 1])
        stepped = sgd_step(small_params, backward(small_params, fwd, dlogits), 0.1)
        with pytest.raises(BmsError) as exc:
            backward(stepped, fwd, dlogits)
        assert exc.value.code == "BMS-202"

    def test_missing_cache(self, small_params):
        with pytest.raises(BmsError) as exc:
            backward(small_params, None, np.zeros((1, 3)))
        assert exc.value.code == "BMS-202"

    def test_path_mismatch(self, small_params, rng):
        fwd = forward_uni(small_params, rng.normal(size=(2, 3)), Modality.I)
        _, dlogits = ce_loss_and_grad(fwd.logits, [0, 1])
        with pytest.raises(BmsError) as exc:
            backward(small_params, fwd, dlogits, path=ExecPath.MULTI)
        assert exc.value.code == "BMS-202"


class TestUpdates:
    """SGD steps and parameter deltas."""

    def test_sgd_moves_against_gradient(self, small_params, rng):
        xa, xi = rng.normal(size=(8, 4)), rng.normal(size=(8, 3))
        y = rng.integers(0, 3, size=8)
        fwd = forward_multi(small_params, xa, xi)
        before, dlogits = ce_loss_and_grad(fwd.logits, y)
        stepped = sgd_step(small_params, backward(small_params, fwd, dlogits), 1e-3)
        after = ce_loss_and_grad(forward_multi(stepped, xa, xi).logits, y)[0]
        assert after < before

    def test_absent_groups_untouched(self, small_params, rng):
        fwd = forward_uni(small_params, rng.normal(size=(4, 4)), Modality.A)
        _, dlogits = ce_loss_and_grad(fwd.logits, [0, 1, 2, 0])
        stepped = sgd_step(small_params, backward(small_params, fwd, dlogits), 0.5)
        assert np.array_equal(stepped.groups()["encoder_i"][0], small_params.groups()["encoder_i"][0])
        assert np.array_equal(stepped.fusion.weight[2:], small_params.fusion.weight[2:])

    def test_nonpositive_lr(self, small_params):
        grads = GradientVector.zeros_like(small_params, GROUPS)
        with pytest.raises(BmsError) as exc:
            sgd_step(small_params, grads, 0.0)
        assert exc.value.code == "BMS-203"

    def test_delta_of_step_is_lr_times_grad(self, small_params, rng):
        fwd = forward_multi(small_params, rng.normal(size=(3, 4)), rng.normal(size=(3, 3)))
        _, dlogits = ce_loss_and_grad(fwd.logits, [0, 1, 2])
        grads = backward(small_params, fwd, dlogits)
        delta = param_delta(small_params, sgd_step(small_params, grads, 0.1))
        assert np.allclose(delta.flatten(), 0.1 * grads.flatten(), atol=1e-14)

    def test_flatten_zero_fills_absent(self, small_params):
        grads = GradientVector.zeros_like(small_params, {"fusion_bias"})
        assert grads.flatten().shape == small_params.flatten().shape
        assert grads.flatten(only=["fusion_a"]).shape == (6,)
