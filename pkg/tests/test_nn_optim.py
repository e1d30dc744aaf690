import numpy as np
import pytest

from bevis import autodiff as ad
from bevis.autodiff import Tensor
from bevis.nn import BatchNorm, Conv3x3, Dense, class_weights
from bevis.optim import Adam, AdamConfig

from gradcheck import assert_close, numeric_grad


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((5, 13)))
    loss = ad.cross_entropy(logits, np.arange(5) % 13, np.ones(13))
    assert loss.item() == pytest.approx(np.log(13.0), rel=1e-12)


def test_cross_entropy_margin_limit():
    labels = np.array([2])
    prev = None
    for margin in (1.0, 5.0, 20.0):
        z = np.zeros((1, 4))
        z[0, 2] = margin
        loss = ad.cross_entropy(Tensor(z), labels, np.ones(4)).item()
        if prev is not None:
            assert loss < prev
        prev = loss
    assert prev < 1e-8


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError, match="out of range"):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]), np.ones(3))
    with pytest.raises(ValueError, match="positive"):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 1]), np.zeros(3))


def test_class_weights_formula():
    labels = np.array([0] * 50 + [1] * 50)
    w = class_weights(labels, 3)
    assert w[0] == pytest.approx(np.log(2.0))
    assert w[1] == pytest.approx(np.log(2.0))
    assert w[2] == pytest.approx(-np.log(1e-6))  # absent class clamps


@pytest.mark.parametrize("seed", range(20))
def test_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(6, 4))
    labels = rng.integers(0, 4, size=6)
    w = rng.uniform(0.5, 2.0, size=4)

    def forward(arrs):
        return float(ad.cross_entropy(Tensor(arrs[0]), labels, w).data)

    zt = Tensor(z, requires_grad=True)
    ad.cross_entropy(zt, labels, w).backward()
    assert_close(zt.grad, numeric_grad(forward, [z], 0), what="cross_entropy")


def test_batchnorm_running_stats_and_modes():
    rng = np.random.default_rng(3)
    bn = BatchNorm("bn", 2, momentum=0.5)
    x = rng.normal(loc=4.0, scale=2.0, size=(200, 2))
    out_train = bn(Tensor(x), training=True)
    # train mode normalizes with batch stats
    assert np.allclose(out_train.data.mean(axis=0), 0.0, atol=1e-10)
    mean_after_one = bn.running_mean.copy()
    assert np.allclose(mean_after_one, 0.5 * x.mean(axis=0))
    # eval mode uses frozen statistics and does not update them
    out_eval = bn(Tensor(x), training=False)
    assert np.allclose(bn.running_mean, mean_after_one)
    expected = (x - mean_after_one) / np.sqrt(bn.running_var + bn.eps)
    assert np.allclose(out_eval.data, expected)


def test_adam_zero_gradient_keeps_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p})
    p.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])
    assert opt.step_count == 1


def test_adam_first_step_hand_computed():
    # independent hand evaluation of the Adam recurrence for g=1, t=1
    cfg = AdamConfig()
    m = (1 - cfg.beta1) * 1.0
    v = (1 - cfg.beta2) * 1.0
    mhat = m / (1 - cfg.beta1)
    vhat = v / (1 - cfg.beta2)
    expected_delta = -cfg.base_lr * mhat / (np.sqrt(vhat) + cfg.eps)

    p = Tensor(np.array(0.5), requires_grad=True)
    opt = Adam({"p": p}, cfg)
    p.grad = np.array(1.0)
    opt.step()
    assert p.data == pytest.approx(0.5 + expected_delta, abs=0.0)
    assert expected_delta == pytest.approx(-1e-3, rel=1e-6)


def test_adam_decay_schedule():
    cfg = AdamConfig(decay_rate=0.7, decay_interval=5000)
    opt = Adam({"p": Tensor(np.array(0.0), requires_grad=True)}, cfg)
    assert opt.lr() == pytest.approx(cfg.base_lr)
    opt.step_count = 5000
    assert opt.lr() == pytest.approx(cfg.base_lr * 0.7)
    opt.step_count = 10000
    assert opt.lr() == pytest.approx(cfg.base_lr * 0.49)


def test_adam_rejects_non_finite_gradients():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"p": p})
    p.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError, match="p"):
        opt.step()
    assert np.array_equal(p.data, [1.0])  # step rejected, nothing mutated
    assert opt.step_count == 0


def _train_tiny_net(seed, steps):
    rng = np.random.default_rng(seed)
    dense = Dense("d", 3, 2, rng)
    bn = BatchNorm("bn", 2)
    opt = Adam({**dense.params(), **bn.params()})
    x = np.random.default_rng(99).normal(size=(8, 3))
    y = np.random.default_rng(98).integers(0, 2, size=8)
    for _ in range(steps):
        opt.zero_grad()
        out = bn(dense(Tensor(x)), training=True)
        loss = ad.cross_entropy(out, y, np.ones(2))
        loss.backward()
        opt.step()
    return {k: p.data.copy() for k, p in {**dense.params(), **bn.params()}.items()}


def test_training_determinism_bit_identical():
    a = _train_tiny_net(seed=5, steps=7)
    b = _train_tiny_net(seed=5, steps=7)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes(), k


def test_conv_dense_param_shapes():
    rng = np.random.default_rng(0)
    conv = Conv3x3("c", 4, 8, rng)
    assert conv.w.shape == (3, 3, 4, 8)
    dense = Dense("d", 5, 7, rng)
    assert dense.w.shape == (5, 7)
    assert set(conv.params()) == {"c.w", "c.b"}
