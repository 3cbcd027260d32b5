import numpy as np
import pytest

from kdlab import nn
from kdlab import tensor as T
from kdlab.errors import ConfigError, FormatError, UsageError
from kdlab.tensor import Tensor


def small_spec():
    return [nn.conv2d(1, 4, 3, padding=1), nn.relu(), nn.conv2d(4, 4, 3, padding=1),
            nn.global_avg_pool(), nn.linear(4, 3)]


def test_init_deterministic():
    a = nn.init_network(small_spec(), 2, seed=42)
    b = nn.init_network(small_spec(), 2, seed=42)
    for pa, pb in zip(a.params(), b.params()):
        assert np.array_equal(pa.data, pb.data)


def test_init_bound_fan_in_6():
    net = nn.init_network([nn.linear(6, 50)], 0, seed=0)
    w = net.layers[0].weight.data
    assert np.all(np.abs(w) <= 1.0)
    assert np.all(net.layers[0].bias.data == 0.0)


def test_init_mean_monte_carlo():
    # 1e4 uniform draws on [-b, b]: empirical mean within 3 std errors of 0
    net = nn.init_network([nn.linear(4, 2500)], 0, seed=7)
    w = net.layers[0].weight.data.reshape(-1)
    bound = np.sqrt(6.0 / 4)
    se = bound / np.sqrt(3.0) / np.sqrt(w.size)
    assert abs(w.mean()) < 3 * se


def test_malformed_spec():
    with pytest.raises(ConfigError):
        nn.init_network([{"kind": "pooling"}], 0, seed=0)
    with pytest.raises(ConfigError):
        nn.init_network([nn.dropout(0.0)], 0, seed=0)


def test_eval_forward_deterministic():
    net = nn.init_network(small_spec(), 2, seed=1).eval()
    x = np.random.default_rng(0).normal(size=(2, 1, 8, 8))
    out1, feat1 = net.forward(Tensor(x))
    out2, feat2 = net.forward(Tensor(x))
    assert np.array_equal(out1.data, out2.data)
    assert np.array_equal(feat1.data, feat2.data)
    assert feat1.shape == (2, 4, 8, 8)


def test_dropout_keep_one_is_identity():
    spec = [nn.conv2d(1, 2, 3, padding=1), nn.dropout(1.0)]
    net = nn.init_network(spec, 0, seed=3).train()
    ref = nn.init_network(spec[:1], 0, seed=3).train()
    x = np.random.default_rng(1).normal(size=(2, 1, 5, 5))
    out, _ = net.forward(Tensor(x))
    out_ref, _ = ref.forward(Tensor(x))
    assert np.array_equal(out.data, out_ref.data)


def test_zero_input_zero_bias_linear():
    net = nn.init_network([nn.linear(4, 3)], 0, seed=0)
    out, _ = net.forward(Tensor(np.zeros((2, 4))))
    assert np.all(out.data == 0.0)


def test_forward_shape_error_names_layer():
    net = nn.init_network(small_spec(), 2, seed=0)
    with pytest.raises(Exception, match="layer 0"):
        net.forward(Tensor(np.ones((2, 3))))


# -- batch standardization ---------------------------------------------------

def make_bs_layer(channels=3):
    layer = nn.Layer(nn.batch_standardize(channels))
    layer.init(np.random.default_rng(0))
    return layer


def test_train_mode_mean_zero_var_one():
    layer = make_bs_layer()
    x = np.random.default_rng(2).normal(2.0, 3.0, size=(8, 3, 5, 5))
    out = layer.forward(Tensor(x), train=True, rng=None)
    mu = out.data.mean(axis=(0, 2, 3))
    var = out.data.var(axis=(0, 2, 3))
    assert np.max(np.abs(mu)) < 1e-10
    assert np.max(np.abs(var - 1.0)) < 1e-8


def test_constant_channel_goes_to_zero():
    layer = make_bs_layer(1)
    x = np.full((4, 1, 3, 3), 7.0)
    out = layer.forward(Tensor(x), train=True, rng=None)
    assert np.all(out.data == 0.0)


def test_batch_size_one_train_raises():
    layer = make_bs_layer()
    with pytest.raises(UsageError):
        layer.forward(Tensor(np.ones((1, 3, 2, 2))), train=True, rng=None)


def test_eval_uses_frozen_formula():
    layer = make_bs_layer(2)
    layer.running_mean = np.array([1.0, -1.0])
    layer.running_var = np.array([4.0, 0.25])
    x = np.random.default_rng(3).normal(size=(2, 2, 3, 3))
    out = layer.forward(Tensor(x), train=False, rng=None)
    expected = (x - layer.running_mean.reshape(1, 2, 1, 1)) / np.sqrt(
        layer.running_var.reshape(1, 2, 1, 1) + 1e-5)
    assert np.max(np.abs(out.data - expected)) < 1e-15


def test_running_stats_ema_update():
    layer = make_bs_layer(1)
    x = np.random.default_rng(4).normal(5.0, 2.0, size=(16, 1, 4, 4))
    layer.forward(Tensor(x), train=True, rng=None)
    expected_mean = 0.9 * 0.0 + 0.1 * x.mean()
    assert abs(layer.running_mean[0] - expected_mean) < 1e-12


# -- projection ---------------------------------------------------------------

def test_projection_maps_channels():
    proj = nn.Projection(4, 8, seed=0)
    feat = Tensor(np.random.default_rng(5).normal(size=(2, 4, 6, 6)))
    out = proj(feat)
    assert out.shape == (2, 8, 6, 6)


# -- persistence --------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    net = nn.init_network(small_spec(), 2, seed=9).eval()
    path = tmp_path / "w.json"
    nn.save_weights(net, path)
    loaded = nn.load_weights(path).eval()
    x = np.random.default_rng(6).normal(size=(2, 1, 8, 8))
    out1, _ = net.forward(Tensor(x))
    out2, _ = loaded.forward(Tensor(x))
    assert np.array_equal(out1.data, out2.data)
    # second save is byte-identical
    path2 = tmp_path / "w2.json"
    nn.save_weights(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_load_shape_mismatch(tmp_path):
    import json
    net = nn.init_network(small_spec(), 2, seed=9)
    path = tmp_path / "w.json"
    nn.save_weights(net, path)
    doc = json.loads(path.read_text())
    doc["layers"][0]["shape"] = [1, 1, 3, 3]
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="layer 0"):
        nn.load_weights(path)


def test_load_missing_layer_values(tmp_path):
    import json
    net = nn.init_network(small_spec(), 2, seed=9)
    path = tmp_path / "w.json"
    nn.save_weights(net, path)
    doc = json.loads(path.read_text())
    del doc["layers"][4]["values"]
    path.write_text(json.dumps(doc))
    with pytest.raises(FormatError, match="layer 4"):
        nn.load_weights(path)


def test_standardize_is_differentiable():
    layer = make_bs_layer(2)
    rng = np.random.default_rng(7)

    def f(x):
        out = layer.forward(x, train=True, rng=None)
        return T.reduce_mean(T.square(out))

    x = Tensor(rng.normal(size=(4, 2, 3, 3)))
    # mean/var treated as constants of the batch; still finite and smooth
    assert np.isfinite(T.grad_check(f, x))
