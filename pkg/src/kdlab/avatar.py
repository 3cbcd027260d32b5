"""Perturbation-generated supervisor features.

Each avatar is a mask-dropout copy of the standardized teacher feature:
elements are zeroed independently with probability m and survivors are NOT
rescaled. The residual second moment E[(F_a - F_t)^2] is then m * F_t^2
per position (it would be m^2 * F_t^2 for the deterministic scaling
F_a = (1-m) F_t; only the proportionality to F_t^2 is load-bearing, the
constant is absorbed when sigma is normalized).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


@dataclass
class AvatarConfig:
    count: int = 5
    dropout_ratio: float = 0.1
    per_avatar_ratios: list = None
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("avatar count must be >= 1")
        ratios = self.ratios()
        if len(ratios) != self.count:
            raise ConfigError(f"per_avatar_ratios must have length {self.count}")
        for m in ratios:
            if not 0.0 <= m < 1.0:
                raise ConfigError(f"dropout ratio {m} outside [0, 1)")

    def ratios(self):
        if self.per_avatar_ratios is not None:
            return list(self.per_avatar_ratios)
        return [self.dropout_ratio] * self.count


@dataclass
class AvatarSet:
    features: list  # k detached Tensors, each shaped like the source
    source: Tensor  # the standardized teacher FeatureBatch

    def __len__(self):
        return len(self.features)


def _mask_rng(seed, stream_id, index):
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF,
                                  stream_id & 0xFFFFFFFFFFFFFFFF, index])


def generate(teacher_feat, cfg, stream_id=0):
    """Draw cfg.count mask-dropout perturbations of the teacher feature.

    Pure in (teacher_feat, cfg.seed, stream_id): the mask stream is keyed by
    (seed, stream_id, avatar index), so repeated calls are bit-identical and
    distinct stream_ids are independent.
    """
    src = teacher_feat.data
    feats = []
    for i, m in enumerate(cfg.ratios()):
        if m == 0.0:
            feats.append(Tensor(src.copy()))
            continue
        rng = _mask_rng(cfg.seed, stream_id, i)
        keep = rng.random(src.shape) >= m
        feats.append(Tensor(src * keep))
    return AvatarSet(features=feats, source=teacher_feat)


def residual_moment_oracle(teacher_feat, m, n_draws, seed=0, chunk=4096):
    """Monte Carlo estimate of the per-position mean of (F_a - F_t)^2.

    Simulates actual dropout masks (in chunks) rather than using the
    closed form, so it stays an independent check of the analytic constant:
    m * F^2 for mask dropout (the deterministic scaling F_a = (1-m) F would
    give m^2 * F^2 instead).
    """
    src = np.asarray(teacher_feat.data if isinstance(teacher_feat, Tensor) else teacher_feat,
                     dtype=np.float64)
    if m == 0.0:
        return np.zeros_like(src)
    rng = np.random.default_rng(seed)
    total = np.zeros_like(src)
    done = 0
    while done < n_draws:
        n = min(chunk, n_draws - done)
        keep = rng.random((n,) + src.shape) >= m
        resid = src * keep - src
        total += np.sum(resid * resid, axis=0)
        done += n
    return total / n_draws
