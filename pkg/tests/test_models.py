import numpy as np
import pytest

from countadapt.autodiff import Tensor, backward, gradcheck, mse_loss
from countadapt.errors import CheckpointError, ConfigError
from countadapt.models import (
    DiscriminatorConfig, EstimatorConfig, discriminator_forward,
    estimator_config_from_params, estimator_forward, expected_discriminator_names,
    init_params, load_checkpoint, predict_count, save_checkpoint,
)

TINY = EstimatorConfig(in_channels=3, depth=2, base_channels=2)


def rand_image(size, seed=0, channels=3, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(0, 1, (channels, size, size)).astype(dtype))


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("size", [32, 64, 96])
def test_estimator_preserves_spatial_size(size):
    params = init_params(EstimatorConfig(depth=4, base_channels=4), rng_seed=0)
    out = estimator_forward(params, rand_image(size))
    assert out.shape == (size, size)


def test_estimator_output_nonnegative_and_finite():
    params = init_params(TINY, rng_seed=1)
    for seed in range(3):
        out = estimator_forward(params, rand_image(32, seed=seed))
        assert out.data.min() >= 0.0
        assert np.isfinite(out.data).all()
        assert np.isfinite(predict_count(out))


def test_estimator_rejects_indivisible_size():
    params = init_params(TINY, rng_seed=0)
    with pytest.raises(ConfigError, match="divisible by 4"):
        estimator_forward(params, rand_image(30))


def test_estimator_rejects_wrong_channels():
    params = init_params(TINY, rng_seed=0)
    with pytest.raises(ConfigError, match="channels"):
        estimator_forward(params, rand_image(32, channels=1))


def test_estimator_config_recovered_from_params():
    cfg = EstimatorConfig(in_channels=3, depth=3, base_channels=4)
    params = init_params(cfg, rng_seed=2)
    assert estimator_config_from_params(params) == cfg


def test_predict_count_properties():
    assert predict_count(Tensor(np.zeros((8, 8)))) == 0.0
    rng = np.random.default_rng(3)
    a = rng.uniform(0, 1, (8, 8)).astype(np.float32)
    b = rng.uniform(0, 1, (8, 8)).astype(np.float32)
    lhs = predict_count(Tensor(a + b))
    rhs = predict_count(Tensor(a)) + predict_count(Tensor(b))
    assert abs(lhs - rhs) < 1e-4


def test_predict_count_matches_density_map_mass():
    from countadapt.data import BoundingBox, generate_density_map
    boxes = [BoundingBox(8, 8, 4, 4), BoundingBox(20, 20, 5, 5), BoundingBox(28, 6, 3, 3)]
    dm = generate_density_map(boxes, 32, 32)
    assert abs(predict_count(dm) - 3.0) < 3e-4


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

def test_discriminator_shapes():
    params = init_params(DiscriminatorConfig(), rng_seed=0)
    rng = np.random.default_rng(0)
    out64 = discriminator_forward(params, Tensor(rng.uniform(0, 1, (1, 64, 64)).astype(np.float32)))
    assert out64.shape == (1, 2, 2)
    out32 = discriminator_forward(params, Tensor(rng.uniform(0, 1, (1, 32, 32)).astype(np.float32)))
    assert out32.shape == (1, 1, 1)


def test_discriminator_outputs_are_probabilities():
    params = init_params(DiscriminatorConfig(), rng_seed=1)
    rng = np.random.default_rng(2)
    out = discriminator_forward(params, Tensor(rng.standard_normal((1, 32, 32)).astype(np.float32)))
    assert np.all(out.data > 0.0) and np.all(out.data < 1.0)


def test_discriminator_rejects_indivisible():
    params = init_params(DiscriminatorConfig(), rng_seed=0)
    with pytest.raises(ConfigError, match="divisible by 32"):
        discriminator_forward(params, Tensor(np.zeros((1, 48, 48))))


def test_discriminator_layer1_weight_shape():
    params = init_params(DiscriminatorConfig(), rng_seed=0)
    assert params["layer1.weight"].shape == (64, 1, 4, 4)


def test_discriminator_parameter_count_constant():
    # layer-by-layer: c_out*c_in*16 + c_out over (1->64->128->256->512->1)
    params = init_params(DiscriminatorConfig(), rng_seed=0)
    expected = 0
    c_in = 1
    for c_out in (64, 128, 256, 512, 1):
        expected += c_out * c_in * 16 + c_out
        c_in = c_out
    assert expected == 2_762_689
    assert params.n_scalars == expected


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------

def test_init_deterministic():
    a = init_params(TINY, rng_seed=7)
    b = init_params(TINY, rng_seed=7)
    assert a.names() == b.names()
    for name in a.names():
        assert np.array_equal(a[name].data, b[name].data)


def test_init_biases_zero_weights_bounded():
    params = init_params(TINY, rng_seed=5)
    for name, t in params.items():
        if name.endswith(".bias"):
            assert np.all(t.data == 0.0)
        else:
            fan_in = int(np.prod(t.shape[1:]))
            assert np.abs(t.data).max() <= np.sqrt(6.0 / fan_in)


# ---------------------------------------------------------------------------
# full-model gradients
# ---------------------------------------------------------------------------

def test_estimator_end_to_end_gradcheck():
    from countadapt.autodiff import perturb_params
    params = init_params(TINY, rng_seed=3, dtype=np.float64)
    perturb_params(params, seed=3)
    image = rand_image(32, seed=4, dtype=np.float64)
    report = gradcheck(lambda *_: estimator_forward(params, image),
                       params.tensors(), tolerance=1e-4, step=1e-6, seed=0, max_coords=8)
    assert report.passed, f"max rel err {report.max_rel_err}"


def test_discriminator_end_to_end_gradcheck():
    from countadapt.autodiff import perturb_params
    params = init_params(DiscriminatorConfig(), rng_seed=3, dtype=np.float64)
    perturb_params(params, seed=4)
    rng = np.random.default_rng(5)
    density = Tensor(rng.uniform(0, 1, (1, 32, 32)), dtype=np.float64)
    report = gradcheck(lambda *_: discriminator_forward(params, density),
                       params.tensors(), tolerance=1e-4, step=1e-6, seed=0, max_coords=4)
    assert report.passed, f"max rel err {report.max_rel_err}"


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bit_identical_forward(tmp_path):
    params = init_params(TINY, rng_seed=9)
    image = rand_image(32, seed=1)
    before = estimator_forward(params, image).data
    path = tmp_path / "psi.ckpt"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    after = estimator_forward(loaded, image).data
    assert np.array_equal(before, after)
    for name in params.names():
        assert np.array_equal(params[name].data, loaded[name].data)


def test_checkpoint_moments_roundtrip(tmp_path):
    params = init_params(TINY, rng_seed=9)
    for t in params.tensors():
        t.grad = np.ones_like(t.data)
    from countadapt.autodiff import adam_step
    adam_step(params, lr=1e-3)
    path = tmp_path / "psi.ckpt"
    save_checkpoint(params, path, with_moments=True)
    loaded = load_checkpoint(path)
    assert loaded.step_count == 1
    for name in params.names():
        m0, v0 = params.moments(name)
        m1, v1 = loaded.moments(name)
        assert np.array_equal(m0, m1) and np.array_equal(v0, v1)


def test_checkpoint_truncated_file(tmp_path):
    params = init_params(TINY, rng_seed=0)
    path = tmp_path / "psi.ckpt"
    save_checkpoint(params, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_not_a_checkpoint(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"hello world\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_estimator_checkpoint_rejected_as_discriminator(tmp_path):
    params = init_params(TINY, rng_seed=0)
    path = tmp_path / "psi.ckpt"
    save_checkpoint(params, path)
    with pytest.raises(CheckpointError, match="names"):
        load_checkpoint(path, expected_names=expected_discriminator_names())


def test_loaded_params_train(tmp_path):
    # loaded checkpoints participate in backward like fresh params
    params = init_params(TINY, rng_seed=0)
    path = tmp_path / "psi.ckpt"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    out = estimator_forward(loaded, rand_image(32))
    backward(mse_loss(out, Tensor(np.zeros((32, 32), dtype=np.float32))))
    assert loaded["head.weight"].grad is not None
