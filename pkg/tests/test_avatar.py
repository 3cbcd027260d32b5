import numpy as np
import pytest

from kdlab import avatar as av
from kdlab.errors import ConfigError
from kdlab.tensor import Tensor


def feat(shape=(2, 3, 4, 4), seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def test_zero_ratio_copies_source():
    f = feat()
    aset = av.generate(f, av.AvatarConfig(count=4, dropout_ratio=0.0, seed=1))
    for a in aset.features:
        assert np.array_equal(a.data, f.data)


def test_determinism():
    f = feat()
    cfg = av.AvatarConfig(count=3, dropout_ratio=0.3, seed=5)
    a1 = av.generate(f, cfg, stream_id=9)
    a2 = av.generate(f, cfg, stream_id=9)
    for x, y in zip(a1.features, a2.features):
        assert np.array_equal(x.data, y.data)
    a3 = av.generate(f, cfg, stream_id=10)
    assert not np.array_equal(a1.features[0].data, a3.features[0].data)


def test_dropout_fraction_binomial_band():
    n = 10**6
    f = Tensor(np.ones((1, 1, 1000, 1000)))
    aset = av.generate(f, av.AvatarConfig(count=1, dropout_ratio=0.1, seed=2))
    frac = 1.0 - aset.features[0].data.mean()
    assert abs(frac - 0.1) < 3 * np.sqrt(0.1 * 0.9 / n)


def test_survivors_unchanged_no_rescale():
    f = feat(seed=3)
    aset = av.generate(f, av.AvatarConfig(count=1, dropout_ratio=0.4, seed=3))
    a = aset.features[0].data
    kept = a != 0
    assert np.array_equal(a[kept], f.data[kept])


def test_shape_preserved():
    f = feat((3, 2, 5, 7))
    aset = av.generate(f, av.AvatarConfig(count=2, dropout_ratio=0.2, seed=0))
    for a in aset.features:
        assert a.shape == f.shape


def test_avatars_detached():
    f = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    aset = av.generate(f, av.AvatarConfig(count=1, dropout_ratio=0.5, seed=0))
    assert not aset.features[0].requires_grad
    assert aset.features[0]._parents == ()


def test_zero_count_rejected():
    with pytest.raises(ConfigError):
        av.AvatarConfig(count=0)


def test_per_avatar_ratios():
    cfg = av.AvatarConfig(count=2, per_avatar_ratios=[0.0, 0.9], seed=1)
    f = feat(seed=4)
    aset = av.generate(f, cfg)
    assert np.array_equal(aset.features[0].data, f.data)
    assert np.mean(aset.features[1].data == 0) > 0.5
    with pytest.raises(ConfigError):
        av.AvatarConfig(count=3, per_avatar_ratios=[0.1])


def test_avatars_distinct_for_positive_ratio():
    f = feat((1, 4, 16, 16), seed=5)  # 1024 elements
    for trial in range(100):
        cfg = av.AvatarConfig(count=3, dropout_ratio=0.1, seed=trial)
        aset = av.generate(f, cfg, stream_id=trial)
        for i in range(3):
            for j in range(i + 1, 3):
                assert not np.array_equal(aset.features[i].data, aset.features[j].data)


# -- residual second moment oracle -------------------------------------------

def test_oracle_zero_ratio():
    est = av.residual_moment_oracle(feat(seed=6), 0.0, n_draws=10**4)
    assert np.all(est == 0.0)


def test_oracle_single_position_analytic():
    f = np.full((1, 1, 1, 1), 2.0)
    est = av.residual_moment_oracle(f, 0.1, n_draws=10**6, seed=1)
    # mask dropout: E[(F_a - F_t)^2] = m * F^2 = 0.4
    assert abs(est[0, 0, 0, 0] - 0.4) / 0.4 < 0.02


def test_oracle_quadratic_scaling():
    rng = np.random.default_rng(7)
    f = rng.uniform(0.5, 2.0, size=(1, 2, 3, 3))
    e1 = av.residual_moment_oracle(f, 0.2, n_draws=10**5, seed=2)
    e2 = av.residual_moment_oracle(2 * f, 0.2, n_draws=10**5, seed=3)
    assert np.allclose(e2 / e1, 4.0, rtol=0.1)


def test_oracle_proportionality_constant_depends_only_on_m():
    # load-bearing step: residual moment / F^2 is a constant in the feature
    rng = np.random.default_rng(8)
    f = rng.uniform(0.5, 3.0, size=(1, 1, 4, 4))
    m = 0.3
    est = av.residual_moment_oracle(f, m, n_draws=2 * 10**5, seed=4)
    consts = est / (f * f)
    assert np.max(np.abs(consts - m)) < 0.02
