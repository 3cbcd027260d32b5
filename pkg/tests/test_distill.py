import numpy as np
import pytest

from kdlab import avatar as av
from kdlab import distill as ds
from kdlab import tensor as T
from kdlab import uncertainty as unc
from kdlab.errors import ShapeError, UsageError, VerificationError
from kdlab.tensor import Tensor


def avatar_set(features):
    feats = [Tensor(np.asarray(f, dtype=np.float64)) for f in features]
    return av.AvatarSet(features=feats, source=feats[0])


def sigma_of(values, mode="full"):
    return unc.SigmaTensor(np.asarray(values, dtype=np.float64), mode)


ONE = np.ones((1, 1, 1, 1))


def test_vanilla_perfect_mimic_is_zero():
    f = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    loss = ds.vanilla_ensemble_loss(avatar_set([f, f]), Tensor(f), None)
    assert loss.item() == 0.0


def test_vanilla_hand_case():
    # k=1, single position: avatar 2, student 1 -> (2-1)^2 / 1 = 1
    loss = ds.vanilla_ensemble_loss(avatar_set([2.0 * ONE]), Tensor(1.0 * ONE), None)
    assert loss.item() == 1.0


def test_vanilla_linear_in_avatars():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 1, 2, 3, 3))
    s = Tensor(rng.normal(size=(1, 2, 3, 3)))
    l_ab = ds.vanilla_ensemble_loss(avatar_set([a, b]), s, None).item()
    l_a = ds.vanilla_ensemble_loss(avatar_set([a]), s, None).item()
    l_b = ds.vanilla_ensemble_loss(avatar_set([b]), s, None).item()
    assert abs(l_ab - 0.5 * (l_a + l_b)) < 1e-12


def test_projection_shape_mismatch():
    aset = avatar_set([np.ones((1, 4, 2, 2))])
    with pytest.raises(ShapeError):
        ds.vanilla_ensemble_loss(aset, Tensor(np.ones((1, 3, 2, 2))), None)


def test_akd_mse_unit_sigma_reduces_to_vanilla():
    rng = np.random.default_rng(2)
    feats = [rng.normal(size=(2, 3, 4, 4)) for _ in range(3)]
    s = Tensor(rng.normal(size=(2, 3, 4, 4)))
    v = ds.vanilla_ensemble_loss(avatar_set(feats), s, None).item()
    a = ds.akd_mse_loss(avatar_set(feats), s, None, unc.SigmaTensor.unit()).item()
    assert abs(v - a) < 1e-12


def test_akd_mse_hand_case():
    # avatar 2, student 1, sigma 2 -> ((2-1)/2)^2 = 0.25
    st = sigma_of(2.0 * np.ones((1, 1, 1)))
    loss = ds.akd_mse_loss(avatar_set([2.0 * ONE]), Tensor(1.0 * ONE), None, st)
    assert abs(loss.item() - 0.25) < 1e-15


def test_akd_mse_quadratic_in_sigma():
    rng = np.random.default_rng(3)
    feats = [rng.normal(size=(1, 2, 3, 3))]
    s = Tensor(rng.normal(size=(1, 2, 3, 3)))
    s1 = sigma_of(np.full((2, 3, 3), 1.0))
    s2 = sigma_of(np.full((2, 3, 3), 2.0))
    l1 = ds.akd_mse_loss(avatar_set(feats), s, None, s1).item()
    l2 = ds.akd_mse_loss(avatar_set(feats), s, None, s2).item()
    assert abs(l2 - l1 / 4.0) < 1e-12


def test_akd_mse_sigma_below_floor_rejected():
    st = unc.SigmaTensor(np.full((1, 1, 1), 1e-4), "scalar")
    with pytest.raises(UsageError):
        ds.akd_mse_loss(avatar_set([ONE]), Tensor(ONE), None, st)


def test_akd_kl_identical_distributions_zero():
    f = np.random.default_rng(4).normal(size=(2, 3, 4, 4))
    loss = ds.akd_kl_loss(avatar_set([f]), Tensor(f), None, None)
    assert abs(loss.item()) < 1e-14


def test_akd_kl_infinite_temperature_limit():
    rng = np.random.default_rng(5)
    feats = [rng.normal(size=(1, 2, 4, 4))]
    s = Tensor(rng.normal(size=(1, 2, 4, 4)))
    big = sigma_of(np.full((2, 4, 4), 1e6))
    big.normalized = False
    loss = ds.akd_kl_loss(avatar_set(feats), s, None, big)
    assert loss.item() < 1e-9


def test_akd_kl_two_element_hand_case():
    # avatar (1, 0), student (0, 1), sigma 1, softmax over the 2 spatial cells
    a = np.array([1.0, 0.0]).reshape(1, 1, 1, 2)
    s = np.array([0.0, 1.0]).reshape(1, 1, 1, 2)
    e = np.e
    pa = np.array([e / (1 + e), 1 / (1 + e)])
    ps = pa[::-1]
    expected = np.sum(pa * np.log(pa / ps))
    loss = ds.akd_kl_loss(avatar_set([a]), Tensor(s), None, None,
                          axes="per_channel_spatial")
    assert abs(loss.item() - expected) < 1e-12


def test_losses_nonnegative():
    rng = np.random.default_rng(6)
    for _ in range(20):
        feats = [rng.normal(size=(1, 2, 3, 3)) for _ in range(2)]
        s = Tensor(rng.normal(size=(1, 2, 3, 3)))
        st = sigma_of(rng.uniform(0.5, 2.0, size=(2, 3, 3)))
        assert ds.akd_mse_loss(avatar_set(feats), s, None, st).item() >= 0.0
        assert ds.akd_kl_loss(avatar_set(feats), s, None, st).item() >= 0.0


def test_no_gradient_to_teacher_or_sigma():
    rng = np.random.default_rng(7)
    t_feat = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    aset = av.generate(t_feat.detach(), av.AvatarConfig(count=2, dropout_ratio=0.2, seed=0))
    s = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    st = sigma_of(rng.uniform(0.5, 2.0, size=(2, 3, 3)))
    loss = ds.akd_mse_loss(aset, s, None, st)
    loss.backward()
    assert s.grad is not None
    assert t_feat.grad is None


# -- analytic gradient forms --------------------------------------------------

def test_analytic_grad_mse_values():
    assert ds.analytic_grad_mse(2.0, 2.0, 1.0) == 0.0
    assert ds.analytic_grad_mse(2.0, 1.0, 2.0) == -0.5


def test_mse_ratio_is_inverse_sigma_squared():
    g1 = ds.analytic_grad_mse(2.0, 1.0, 1.0)
    g2 = ds.analytic_grad_mse(2.0, 1.0, 2.0)
    assert g2 / g1 == 0.25


def test_analytic_grad_kl_zero_at_match():
    f = np.random.default_rng(8).normal(size=(1, 2, 3, 3))
    g = ds.analytic_grad_kl(f, f, np.ones_like(f))
    assert np.max(np.abs(g)) < 1e-15


def test_analytic_grad_kl_bounded_by_distribution_gap():
    rng = np.random.default_rng(9)
    t = rng.normal(size=(1, 1, 2, 2))
    s = rng.normal(size=(1, 1, 2, 2))
    g = ds.analytic_grad_kl(t, s, np.ones_like(t), axes="all_CHW")
    # sigma = 1: g = p_s - p_t elementwise, each in (-1, 1)
    assert np.all(np.abs(g) < 1.0)


def test_analytic_grad_kl_matches_autodiff():
    rng = np.random.default_rng(10)
    t = rng.normal(size=(1, 1, 1, 4))
    s = rng.normal(size=(1, 1, 1, 4))
    sig = np.broadcast_to(rng.uniform(0.5, 2.0, size=(1, 1, 1, 1)), t.shape).copy()
    for axes in ("per_channel_spatial", "all_CHW"):
        g_an = ds.analytic_grad_kl(t, s, sig, axes)
        g_ad = ds._autodiff_grad_kl(t, s, sig, axes)
        assert np.max(np.abs(g_an - g_ad)) < 1e-9


def test_verify_gradients_report():
    report = ds.verify_gradients(n_trials=20, fd_trials=2)
    assert report.max_abs_err_autodiff < 1e-9
    assert report.max_rel_err_finite_diff < 1e-5
    assert len(report.ratio_samples) == 20
    for sig, rm, _ in report.ratio_samples:
        assert abs(rm - 1.0 / sig**2) <= 1e-12 * max(1.0, 1.0 / sig**2)


def test_verify_gradients_rejects_too_few_trials():
    with pytest.raises(UsageError):
        ds.verify_gradients(n_trials=5)


def test_grad_report_exports():
    report = ds.verify_gradients(n_trials=10, fd_trials=1)
    text = report.to_json()
    assert '"max_abs_err_autodiff"' in text
    csv = report.ratio_csv()
    assert csv.splitlines()[0] == "sigma,ratio_mse,ratio_kl"
    assert len(csv.splitlines()) == 11
