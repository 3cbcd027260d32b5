"""Distillation objectives and their analytic gradient forms.

Losses mimic avatar features with the projected student feature. The
uncertainty field sigma enters as a constant divisor (a per-position
temperature); no gradient flows through it or through the avatars.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError, UsageError, VerificationError
from .tensor import Tensor
from .uncertainty import SIGMA_FLOOR, SigmaTensor

# softmax-axis conventions for the KL form, as (axis indices of B x C x H x W)
KL_AXES = {
    "per_channel_spatial": (2, 3),  # channel-wise softmax over spatial positions
    "all_CHW": (1, 2, 3),
}


@dataclass
class DistillConfig:
    loss_kind: str = "mse"               # mse | kl
    kl_softmax_axes: str = "per_channel_spatial"
    alpha: float = 1.0
    sigma: SigmaTensor = None            # None -> unit temperature

    def __post_init__(self):
        if self.loss_kind not in ("mse", "kl"):
            raise UsageError(f"unknown loss kind {self.loss_kind!r}")
        if self.kl_softmax_axes not in KL_AXES:
            raise UsageError(f"unknown softmax-axis convention {self.kl_softmax_axes!r}")
        if self.alpha <= 0:
            raise UsageError("distill weight must be positive")


def _project(student_feat, proj, target_shape):
    mapped = proj(student_feat) if proj is not None else student_feat
    if mapped.shape != target_shape:
        raise ShapeError(
            f"projected student feature {mapped.shape} != avatar shape {target_shape}")
    return mapped


def _sigma_tensor(sigma):
    if sigma is None:
        return None
    if np.any(sigma.values < SIGMA_FLOOR - 1e-12):
        raise UsageError(f"sigma element below floor {SIGMA_FLOOR}")
    return Tensor(sigma.broadcast_values())


def vanilla_ensemble_loss(avatars, student_feat, proj):
    """Equal-weight feature mimic: mean over avatars of the per-element
    squared error between each avatar and the projected student feature,
    averaged over batch, channels and positions."""
    mapped = _project(student_feat, proj, avatars.features[0].shape)
    total = None
    for feat in avatars.features:
        err = T.reduce_mean(T.square(T.sub(feat, mapped)))
        total = err if total is None else T.add(total, err)
    return T.scale(total, 1.0 / len(avatars))


def akd_mse_loss(avatars, student_feat, proj, sigma):
    """Uncertainty-weighted mimic: both sides divided by sigma before the
    squared error. sigma is a constant; no gradient reaches it."""
    st = _sigma_tensor(sigma)
    mapped = _project(student_feat, proj, avatars.features[0].shape)
    if st is not None:
        mapped = T.div(mapped, st)
    total = None
    for feat in avatars.features:
        target = T.div(feat, st) if st is not None else feat
        err = T.reduce_mean(T.square(T.sub(target, mapped)))
        total = err if total is None else T.add(total, err)
    return T.scale(total, 1.0 / len(avatars))


def akd_kl_loss(avatars, student_feat, proj, sigma, axes="per_channel_spatial"):
    """KL between temperature-softened distributions p = softmax(F / sigma),
    averaged over the non-softmax axes and over avatars."""
    if axes not in KL_AXES:
        raise UsageError(f"unknown softmax-axis convention {axes!r}")
    ax = KL_AXES[axes]
    st = _sigma_tensor(sigma)
    mapped = _project(student_feat, proj, avatars.features[0].shape)
    s_scaled = T.div(mapped, st) if st is not None else mapped
    log_ps = T.log_softmax(s_scaled, axes=ax)
    total = None
    for feat in avatars.features:
        t_scaled = T.div(feat, st) if st is not None else feat
        pa = T.softmax(t_scaled, axes=ax)
        log_pa = T.log_softmax(t_scaled, axes=ax)
        kl_elem = T.mul(pa, T.sub(log_pa, log_ps))
        kl = T.reduce_sum(kl_elem, axes=ax, keepdims=True)
        total = kl if total is None else T.add(total, kl)
    # mean over batch (and channel, for the per-channel convention)
    return T.scale(T.reduce_mean(total), 1.0 / len(avatars))


def analytic_grad_mse(teacher_elem, student_elem, sigma_elem):
    """d/ds of ((t - s)/sigma)^2 per element: 2 (s - t) / sigma^2."""
    t = np.asarray(teacher_elem, dtype=np.float64)
    s = np.asarray(student_elem, dtype=np.float64)
    sig = np.asarray(sigma_elem, dtype=np.float64)
    return 2.0 * (s - t) / (sig * sig)


def softened_distribution(feat, sigma_vals, axes):
    x = feat / sigma_vals
    x = x - x.max(axis=axes, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axes, keepdims=True)


def analytic_grad_kl(teacher_feat, student_feat, sigma_vals, axes="per_channel_spatial"):
    """Per-element gradient of KL(p_t || p_s) w.r.t. the raw student feature:
    (p_s * sum(p_t) - p_t) / sigma, with p = softmax(F / sigma) over the
    configured axes (sum(p_t) over those axes is 1 by normalization)."""
    ax = KL_AXES[axes]
    t = np.asarray(teacher_feat, dtype=np.float64)
    s = np.asarray(student_feat, dtype=np.float64)
    sig = np.broadcast_to(np.asarray(sigma_vals, dtype=np.float64), t.shape)
    pt = softened_distribution(t, sig, ax)
    ps = softened_distribution(s, sig, ax)
    g = ps * pt.sum(axis=ax, keepdims=True) - pt
    return g / sig


@dataclass
class GradReport:
    max_abs_err_autodiff: float = 0.0
    max_rel_err_finite_diff: float = 0.0
    ratio_samples: list = field(default_factory=list)  # (sigma, ratio_mse, ratio_kl)

    def to_json(self):
        return json.dumps({
            "format_version": 1,
            "max_abs_err_autodiff": self.max_abs_err_autodiff,
            "max_rel_err_finite_diff": self.max_rel_err_finite_diff,
            "ratio_samples": [list(r) for r in self.ratio_samples],
        }, sort_keys=True)

    def ratio_csv(self):
        lines = ["sigma,ratio_mse,ratio_kl"]
        for sig, rm, rk in self.ratio_samples:
            lines.append(f"{sig!r},{rm!r},{rk!r}")
        return "\n".join(lines) + "\n"


def _autodiff_grad_mse(t_vals, s_vals, sigma_vals):
    """Autodiff gradient of sum(((t - s)/sigma)^2) w.r.t. s."""
    s = Tensor(s_vals, requires_grad=True)
    t = Tensor(t_vals)
    sig = Tensor(np.broadcast_to(sigma_vals, t_vals.shape).copy())
    loss = T.reduce_sum(T.square(T.sub(T.div(t, sig), T.div(s, sig))))
    loss.backward()
    return s.grad


def _autodiff_grad_kl(t_vals, s_vals, sigma_vals, axes):
    ax = KL_AXES[axes]
    s = Tensor(s_vals, requires_grad=True)
    t = Tensor(t_vals)
    sig = Tensor(np.broadcast_to(sigma_vals, t_vals.shape).copy())
    pt = T.softmax(T.div(t, sig), axes=ax)
    log_pt = T.log_softmax(T.div(t, sig), axes=ax)
    log_ps = T.log_softmax(T.div(s, sig), axes=ax)
    loss = T.reduce_sum(T.mul(pt, T.sub(log_pt, log_ps)))
    loss.backward()
    return s.grad


def verify_gradients(n_trials=100, shape=(2, 3, 4, 4), seed=0,
                     fd_trials=5, tol_autodiff=1e-9, tol_fd=1e-5):
    """Check analytic formulas against autodiff (and autodiff against finite
    differences) on random features and sigma fields; also sample the
    gradient-vs-temperature ratio curves.

    Raises VerificationError when any tolerance is exceeded.
    """
    if n_trials < 10:
        raise UsageError("need at least 10 trials")
    rng = np.random.default_rng(seed)
    report = GradReport()
    B, C, H, W = shape
    sigma_shapes = [(1, 1, 1, 1), (1, C, H, W), (1, C, 1, 1), (1, 1, H, W)]

    for trial in range(n_trials):
        t_vals = rng.uniform(-2, 2, size=shape)
        s_vals = rng.uniform(-2, 2, size=shape)
        sig_shape = sigma_shapes[trial % len(sigma_shapes)]
        sigma_vals = rng.uniform(0.25, 4.0, size=sig_shape)
        sig_full = np.broadcast_to(sigma_vals, shape)

        g_ad = _autodiff_grad_mse(t_vals, s_vals, sig_full)
        g_an = analytic_grad_mse(t_vals, s_vals, sig_full)
        err = float(np.max(np.abs(g_ad - g_an)))
        report.max_abs_err_autodiff = max(report.max_abs_err_autodiff, err)
        if err > tol_autodiff:
            raise VerificationError(f"MSE analytic vs autodiff: {err:.3e} > {tol_autodiff}")

        axes = "per_channel_spatial" if trial % 2 == 0 else "all_CHW"
        g_ad_kl = _autodiff_grad_kl(t_vals, s_vals, sig_full, axes)
        g_an_kl = analytic_grad_kl(t_vals, s_vals, sig_full, axes)
        err_kl = float(np.max(np.abs(g_ad_kl - g_an_kl)))
        report.max_abs_err_autodiff = max(report.max_abs_err_autodiff, err_kl)
        if err_kl > tol_autodiff:
            raise VerificationError(f"KL analytic vs autodiff ({axes}): {err_kl:.3e}")

        # ratio samples against the sigma-free gradients (Fig.-style curve data)
        g0 = analytic_grad_mse(t_vals, s_vals, np.ones(shape))
        pos = np.unravel_index(int(np.argmax(np.abs(g0))), shape)
        sig_at = float(sig_full[pos])
        ratio_mse = float(g_an[pos] / g0[pos])
        g0_kl = analytic_grad_kl(t_vals, s_vals, np.ones(shape), axes)
        ratio_kl = float(g_an_kl[pos] / g0_kl[pos]) if g0_kl[pos] != 0 else float("nan")
        report.ratio_samples.append((sig_at, ratio_mse, ratio_kl))
        if abs(ratio_mse - 1.0 / sig_at ** 2) > 1e-12 * max(1.0, 1.0 / sig_at ** 2):
            raise VerificationError(
                f"MSE gradient ratio {ratio_mse} deviates from 1/sigma^2 at sigma={sig_at}")

    # finite-difference spot checks on a small case (expensive, so few trials)
    small = (1, 2, 3, 3)
    for trial in range(fd_trials):
        t_vals = rng.uniform(-2, 2, size=small)
        sigma_vals = rng.uniform(0.25, 4.0, size=(1, 2, 1, 1))
        sig_full = np.broadcast_to(sigma_vals, small).copy()
        t_const = Tensor(t_vals)
        sig_const = Tensor(sig_full)

        def f_mse(s):
            return T.reduce_sum(T.square(T.sub(T.div(t_const, sig_const),
                                               T.div(s, sig_const))))

        def f_kl(s):
            ax = KL_AXES["per_channel_spatial"]
            pt = T.softmax(T.div(t_const, sig_const), axes=ax)
            log_pt = T.log_softmax(T.div(t_const, sig_const), axes=ax)
            log_ps = T.log_softmax(T.div(s, sig_const), axes=ax)
            return T.reduce_sum(T.mul(pt, T.sub(log_pt, log_ps)))

        s0 = Tensor(rng.uniform(-2, 2, size=small))
        for f in (f_mse, f_kl):
            err = T.grad_check(f, s0)
            report.max_rel_err_finite_diff = max(report.max_rel_err_finite_diff, err)
            if err > tol_fd:
                raise VerificationError(f"autodiff vs finite differences: {err:.3e} > {tol_fd}")

    return report
