import numpy as np
import pytest

from shapereg.backbone import (AdamState, BackboneConfig, BackboneParams,
                               adam_step, backward, backward_batch, forward,
                               forward_batch, init_adam, init_params,
                               load_checkpoint, save_checkpoint,
                               zeros_like_params)
from helpers import make_pseudo
from shapereg.errors import ShapeMismatch
from shapereg.geometry import LandmarkSet
from shapereg.heatmap import l1_coordinate_loss, region_attention_loss, \
    sample_offsets

CFG = BackboneConfig(n_landmarks=3, image_size=16, pool_size=4, hidden=8,
                     heatmap_size=6)


def small_setup(seed=0):
    rng = np.random.default_rng(seed)
    params = init_params(CFG, rng)
    image = rng.uniform(0, 1, (16, 16))
    return rng, params, image


class TestForward:
    def test_zero_params_give_half_everywhere(self):
        params = zeros_like_params(init_params(CFG, np.random.default_rng(0)))
        image = np.random.default_rng(1).uniform(0, 1, (16, 16))
        out = forward(CFG, params, image)
        np.testing.assert_array_equal(out, np.full_like(out, 0.5))

    def test_outputs_strictly_in_unit_interval(self):
        _, params, image = small_setup(2)
        out = forward(CFG, params, image)
        assert np.all(out > 0) and np.all(out < 1)
        assert out.shape == (3, 6, 6)

    def test_deterministic(self):
        _, params, image = small_setup(3)
        a = forward(CFG, params, image)
        b = forward(CFG, params, image)
        np.testing.assert_array_equal(a, b)

    def test_shape_mismatch(self):
        _, params, _ = small_setup(4)
        with pytest.raises(ShapeMismatch):
            forward(CFG, params, np.zeros((8, 8)))

    def test_batch_matches_single(self):
        rng, params, _ = small_setup(5)
        images = rng.uniform(0, 1, (4, 16, 16))
        batch = forward_batch(CFG, params, images)
        for i in range(4):
            np.testing.assert_allclose(batch[i], forward(CFG, params, images[i]),
                                       atol=1e-15)


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        _, params, image = small_setup(6)
        grads = backward(CFG, params, image, np.zeros((3, 6, 6)))
        for arr in grads.arrays():
            assert np.all(arr == 0)

    def test_linearity(self):
        rng, params, image = small_setup(7)
        up_a = rng.standard_normal((3, 6, 6))
        up_b = rng.standard_normal((3, 6, 6))
        g_a = backward(CFG, params, image, up_a)
        g_b = backward(CFG, params, image, up_b)
        g_ab = backward(CFG, params, image, up_a + up_b)
        for x, y, z in zip(g_a.arrays(), g_b.arrays(), g_ab.arrays()):
            np.testing.assert_allclose(x + y, z, atol=1e-12)

    def test_upstream_shape_checked(self):
        _, params, image = small_setup(8)
        with pytest.raises(ShapeMismatch):
            backward(CFG, params, image, np.zeros((3, 5, 5)))

    @pytest.mark.parametrize("loss_kind", ["l1", "region-attention"])
    def test_full_chain_gradient_check(self, loss_kind):
        rng, params, image = small_setup(9)
        target = LandmarkSet(rng.uniform(0.2, 0.8, (3, 2)))
        pseudo = make_pseudo(target.coords)
        offsets = sample_offsets(3, rng)

        def loss_of(p):
            hm = forward(CFG, p, image)
            if loss_kind == "l1":
                return l1_coordinate_loss(hm, target)[0]
            return region_attention_loss(hm, pseudo, offsets)[0]

        hm = forward(CFG, params, image)
        if loss_kind == "l1":
            _, up = l1_coordinate_loss(hm, target)
        else:
            _, up = region_attention_loss(hm, pseudo, offsets)
        grads = backward(CFG, params, image, up)

        step = 1e-6
        checked = 0
        worst = 0.0
        picker = np.random.default_rng(10)
        for arr, grad in zip(params.arrays(), grads.arrays()):
            flat = arr.reshape(-1)
            gflat = grad.reshape(-1)
            idx = picker.choice(flat.size, size=min(15, flat.size),
                                replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                up_loss = loss_of(params)
                flat[i] = orig - step
                down_loss = loss_of(params)
                flat[i] = orig
                fd = (up_loss - down_loss) / (2 * step)
                denom = max(abs(fd), abs(gflat[i]), 1e-7)
                worst = max(worst, abs(gflat[i] - fd) / denom)
                checked += 1
        assert checked >= 50
        assert worst < 1e-4


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        _, params, _ = small_setup(11)
        adam = init_adam(params)
        new_params, new_state = adam_step(adam, params, zeros_like_params(params))
        for old, new in zip(params.arrays(), new_params.arrays()):
            np.testing.assert_array_equal(old, new)
        assert new_state.step_count == 1

    def test_first_step_is_signed_learning_rate(self):
        _, params, _ = small_setup(12)
        adam = init_adam(params, lr=1e-3)
        grads = BackboneParams(*[np.sign(np.random.default_rng(13)
                                         .standard_normal(a.shape)) * 0.5
                                 for a in params.arrays()])
        new_params, _ = adam_step(adam, params, grads)
        for old, new, g in zip(params.arrays(), new_params.arrays(),
                               grads.arrays()):
            # step 1 with bias correction: m_hat = g, v_hat = g^2, so the
            # update is -lr * g / (|g| + eps)
            expected = -1e-3 * np.sign(g) * (0.5 / (0.5 + 1e-8))
            np.testing.assert_allclose(new - old, expected, atol=1e-9)

    def test_constant_gradient_moves_against_sign(self):
        _, params, _ = small_setup(14)
        adam = init_adam(params, lr=1e-3)
        g = BackboneParams(*[np.full_like(a, 0.2) for a in params.arrays()])
        current = params.copy()
        start = params.copy()
        for _ in range(50):
            current, adam = adam_step(adam, current, g)
        for s, c in zip(start.arrays(), current.arrays()):
            moved = c - s
            assert np.all(moved < 0)
            # per-step magnitude approaches lr
            assert np.all(np.abs(moved) <= 50 * 1e-3 * 1.01)
            assert np.all(np.abs(moved) >= 0.9 * 50 * 1e-3 * 0.5)

    def test_rejects_bad_betas(self):
        _, params, _ = small_setup(15)
        with pytest.raises(ValueError):
            AdamState(first_moment=zeros_like_params(params),
                      second_moment=zeros_like_params(params), beta1=1.0)

    def test_shape_mismatch(self):
        _, params, _ = small_setup(16)
        adam = init_adam(params)
        bad = zeros_like_params(params)
        bad.layer1_bias = np.zeros(3)
        with pytest.raises(ShapeMismatch):
            adam_step(adam, params, bad)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        rng, params, image = small_setup(17)
        adam = init_adam(params, lr=2e-3)
        up = rng.standard_normal((3, 6, 6))
        grads = backward(CFG, params, image, up)
        params, adam = adam_step(adam, params, grads)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, CFG, params, adam, "pretrained", 7, 42)
        cfg2, params2, adam2, stage, epoch, seed = load_checkpoint(path)
        assert cfg2 == CFG
        assert (stage, epoch, seed) == ("pretrained", 7, 42)
        assert adam2.step_count == adam.step_count
        assert adam2.lr == adam.lr
        for a, b in zip(params.arrays(), params2.arrays()):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(adam.first_moment.arrays(),
                        adam2.first_moment.arrays()):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(adam.second_moment.arrays(),
                        adam2.second_moment.arrays()):
            np.testing.assert_array_equal(a, b)
