"""Synthetic data, teacher/student training, distillation runs and the
ablation suites.

Every run is a pure function of its config (including seed): datasets,
weight init, batch order and avatar masks all come from seeded generators,
so reruns are bit-identical and parallel ablations match serial ones.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import stats

from . import avatar as av
from . import distill as ds
from . import nn
from . import tensor as T
from .errors import ConfigError, TrainingError
from .tensor import Tensor
from .uncertainty import MergeMode, SigmaEstimator, SigmaTensor

MODES = ("baseline", "avatars_equal", "akd")

# reference regime for the component-ordering study (and the `ablate` command)
ORDERING_SEEDS = 20


def default_ablation_base():
    """Experiment settings for the component/merge ablations: KL mimic with
    the softmax taken over the whole feature map and the spatial uncertainty
    merge. Under this convention the unit-temperature target is sharp enough
    that plain mimicking often destabilizes training; avatar smoothing helps
    and the sigma temperature largely cures it, which is exactly the
    mechanism the ablation is meant to expose."""
    return {"loss_kind": "kl", "kl_softmax_axes": "all_CHW",
            "merge_mode": "spatial", "k": 5, "m": 0.3, "alpha": 1.0,
            "lr": 0.05, "momentum": 0.9, "epochs": 30, "batch_size": 32}


def default_ablation_dataset():
    """Dataset regime for the ablations: small train split (so distillation
    matters) and a large test split (so per-seed accuracy deltas are not
    drowned in evaluation noise)."""
    return {"n_train": 256, "n_test": 16384, "amplitude_spread": 0.5}

_BUMP_CENTERS = [(4, 4), (4, 12), (12, 4), (12, 12)]


@dataclass
class ToyDatasetSpec:
    n_train: int = 512
    n_test: int = 512
    classes: int = 4
    height: int = 16
    width: int = 16
    channels: int = 1
    noise_std: float = 0.3
    amplitude_spread: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.n_train % self.classes or self.n_test % self.classes:
            raise ConfigError("n_train and n_test must be divisible by classes")


@dataclass
class ExperimentConfig:
    mode: str = "akd"
    loss_kind: str = "mse"
    kl_softmax_axes: str = "per_channel_spatial"
    merge_mode: str = "channel"
    k: int = 5
    m: float = 0.1
    per_avatar_ratios: tuple = None  # optional distinct dropout ratio per avatar
    alpha: float = 1.0
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.loss_kind not in ("mse", "kl"):
            raise ConfigError(f"unknown loss kind {self.loss_kind!r}")
        if self.kl_softmax_axes not in ds.KL_AXES:
            raise ConfigError(f"unknown softmax-axis convention {self.kl_softmax_axes!r}")
        MergeMode(self.merge_mode)  # raises ValueError on junk
        if self.mode == "baseline":
            # baseline mimics the teacher feature directly
            self.k = 1
            self.m = 0.0
            self.per_avatar_ratios = None
        elif self.per_avatar_ratios is not None:
            if len(self.per_avatar_ratios) != self.k:
                raise ConfigError("per_avatar_ratios length must equal k")
        elif self.m == 0.0:
            # unperturbed avatars are all identical; collapse to one so the
            # per-step losses are bit-identical to the baseline's
            self.k = 1


@dataclass
class RunMetrics:
    seed: int
    teacher_acc: float = 0.0
    student_acc: float = 0.0
    final_task_loss: float = 0.0
    final_distill_loss: float = 0.0
    epoch_trace: list = field(default_factory=list)
    wall_time: float = 0.0  # informational only; never in primary outputs

    def to_dict(self, include_wall_time=False):
        d = asdict(self)
        if not include_wall_time:
            d.pop("wall_time")
        return d


# -- synthetic data ----------------------------------------------------------

def _class_amplitudes(classes, spread, rng):
    # Fixed per-class amplitude offsets around 1 (plus a small seeded jitter):
    # the global-average-pool head is translation-invariant, so bump position
    # alone cannot carry the label; amplitude does.
    if classes == 1:
        return np.ones(1)
    spaced = 1.0 + spread * np.linspace(-1.0, 1.0, classes)
    return spaced + 0.03 * rng.uniform(-1, 1, size=classes)


def _make_split(spec, n, rng, amplitudes):
    labels = np.tile(np.arange(spec.classes), n // spec.classes)
    ii, jj = np.meshgrid(np.arange(spec.height), np.arange(spec.width), indexing="ij")
    x = np.empty((n, spec.channels, spec.height, spec.width))
    for idx in range(n):
        c = labels[idx]
        ci, cj = _BUMP_CENTERS[c % 4]
        bump = amplitudes[c] * np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2.0 * 2.0 ** 2))
        x[idx] = bump[None] + rng.normal(0.0, spec.noise_std,
                                         size=(spec.channels, spec.height, spec.width))
    return x, labels


def make_dataset(spec):
    """Returns (x_train, y_train, x_test, y_test), deterministic in spec.seed."""
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    amplitudes = _class_amplitudes(spec.classes, spec.amplitude_spread, rng)
    x_tr, y_tr = _make_split(spec, spec.n_train, rng, amplitudes)
    x_te, y_te = _make_split(spec, spec.n_test, rng, amplitudes)
    return x_tr, y_tr, x_te, y_te


# -- optimization ------------------------------------------------------------

class SGD:
    def __init__(self, params, lr, momentum=0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def cross_entropy(logits, labels):
    n, classes = logits.shape
    onehot = np.zeros((n, classes))
    onehot[np.arange(n), labels] = 1.0
    lsm = T.log_softmax(logits, axes=(1,))
    return T.scale(T.reduce_sum(T.mul(lsm, Tensor(onehot))), -1.0 / n)


def accuracy(net, x, y, batch_size=128):
    net.eval()
    correct = 0
    for lo in range(0, len(y), batch_size):
        logits, _ = net.forward(Tensor(x[lo:lo + batch_size]))
        correct += int(np.sum(np.argmax(logits.data, axis=1) == y[lo:lo + batch_size]))
    return correct / len(y)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def _check_finite(loss_val):
    if not np.isfinite(loss_val):
        raise TrainingError(f"loss diverged to {loss_val}")


# -- teacher training --------------------------------------------------------

def train_teacher(dataset_spec, seed, width=16, epochs=30, lr=0.05, momentum=0.9,
                  batch_size=32, dataset=None):
    t0 = time.perf_counter()
    if dataset is None:
        dataset = make_dataset(dataset_spec)
    x_tr, y_tr, x_te, y_te = dataset
    net = nn.init_network(
        nn.teacher_spec(dataset_spec.channels, width, dataset_spec.classes),
        nn.TEACHER_TAP_INDEX, seed=[seed, 0x7EAC])
    opt = SGD(net.params(), lr, momentum)
    order_rng = np.random.default_rng([seed, 0x0BDE])
    metrics = RunMetrics(seed=seed)
    for epoch in range(epochs):
        net.train()
        epoch_loss = 0.0
        nb = 0
        for idx in _batches(len(y_tr), batch_size, order_rng):
            opt.zero_grad()
            logits, _ = net.forward(Tensor(x_tr[idx]))
            loss = cross_entropy(logits, y_tr[idx])
            _check_finite(loss.item())
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
            nb += 1
        metrics.epoch_trace.append({"epoch": epoch, "task_loss": epoch_loss / nb})
    metrics.teacher_acc = accuracy(net, x_te, y_te)
    metrics.final_task_loss = metrics.epoch_trace[-1]["task_loss"]
    metrics.wall_time = time.perf_counter() - t0
    net.eval()
    return net, metrics


# -- frozen-teacher feature statistics ---------------------------------------

class FeatureStandardizer:
    """Per-channel standardization with statistics frozen from a full pass
    of the teacher over the training set (the exact dataset mean/variance,
    not an EMA: the zero-mean condition should hold as tightly as float64
    allows)."""

    def __init__(self, mean, var, eps=nn.BS_VAR_FLOOR):
        self.mean = mean
        self.var = var
        self.eps = eps

    @classmethod
    def fit(cls, teacher, x, batch_size=128):
        feats = _tap_features(teacher, x, batch_size)
        mean = feats.mean(axis=(0, 2, 3))
        var = feats.var(axis=(0, 2, 3))
        return cls(mean, var)

    def __call__(self, feat_data):
        mu = self.mean.reshape(1, -1, 1, 1)
        denom = np.sqrt(self.var + self.eps).reshape(1, -1, 1, 1)
        return (feat_data - mu) / denom


def _tap_features(teacher, x, batch_size=128):
    teacher.eval()
    chunks = []
    for lo in range(0, len(x), batch_size):
        _, feat = teacher.forward(Tensor(x[lo:lo + batch_size]))
        chunks.append(feat.data)
    return np.concatenate(chunks, axis=0)


def estimate_sigma(teacher, standardizer, x, merge_mode, batch_size=128):
    """Frozen-teacher pass over the training set: Welford over standardized
    tap features, then merge/floor/normalize."""
    teacher.eval()
    est = None
    for lo in range(0, len(x), batch_size):
        _, feat = teacher.forward(Tensor(x[lo:lo + batch_size]))
        std_feat = standardizer(feat.data)
        if est is None:
            est = SigmaEstimator(std_feat.shape[1:])
        est.update(std_feat)
    return est.finalize(MergeMode(merge_mode))


# -- distillation ------------------------------------------------------------

def distill_student(teacher, cfg, dataset_spec, dataset=None, sigma=None,
                    sigma_override=None):
    """Train a half-width student against the frozen teacher.

    baseline: mimic the standardized teacher feature directly (k=1, m=0,
    unit temperature). avatars_equal: equal-weight avatar mimic. akd:
    avatars plus the uncertainty temperature. sigma_override substitutes an
    arbitrary temperature field (used for the fixed-temperature
    equivalence checks).
    """
    t0 = time.perf_counter()
    if dataset is None:
        dataset = make_dataset(dataset_spec)
    x_tr, y_tr, x_te, y_te = dataset
    teacher.eval()
    teacher_snapshot = [p.data.copy() for p in teacher.params()]
    for p in teacher.params():
        p.requires_grad = False  # frozen supervisor; keeps it off the tape

    standardizer = FeatureStandardizer.fit(teacher, x_tr)
    if cfg.mode == "akd":
        if sigma_override is not None:
            sigma = sigma_override
        elif sigma is None:
            sigma = estimate_sigma(teacher, standardizer, x_tr, cfg.merge_mode)
    else:
        sigma = None  # unit temperature

    classes = dataset_spec.classes
    teacher_width = teacher.layers[-1].spec["n_in"]
    student = nn.init_network(
        nn.student_spec(dataset_spec.channels, teacher_width // 2, classes),
        nn.TEACHER_TAP_INDEX, seed=[cfg.seed, 0x57D])
    proj = nn.Projection(teacher_width // 2, teacher_width, seed=[cfg.seed, 0x974])
    opt = SGD(student.params() + proj.params(), cfg.lr, cfg.momentum)

    avatar_cfg = av.AvatarConfig(count=cfg.k, dropout_ratio=cfg.m,
                                 per_avatar_ratios=(list(cfg.per_avatar_ratios)
                                                    if cfg.per_avatar_ratios else None),
                                 seed=cfg.seed)
    order_rng = np.random.default_rng([cfg.seed, 0x0BDE])
    metrics = RunMetrics(seed=cfg.seed)

    # teacher features never change; standardize the whole set once
    t_std_all = standardizer(_tap_features(teacher, x_tr))

    for epoch in range(cfg.epochs):
        student.train()
        task_sum = 0.0
        distill_sum = 0.0
        nb = 0
        for step, idx in enumerate(_batches(len(y_tr), cfg.batch_size, order_rng)):
            xb = Tensor(x_tr[idx])
            t_std = Tensor(t_std_all[idx])  # detached constant
            stream_id = epoch * 100000 + step
            avatars = av.generate(t_std, avatar_cfg, stream_id)

            opt.zero_grad()
            logits, s_feat = student.forward(xb)
            task_loss = cross_entropy(logits, y_tr[idx])
            if cfg.loss_kind == "mse":
                d_loss = ds.akd_mse_loss(avatars, s_feat, proj, sigma)
            else:
                d_loss = ds.akd_kl_loss(avatars, s_feat, proj, sigma,
                                        axes=cfg.kl_softmax_axes)
            loss = T.add(task_loss, T.scale(d_loss, cfg.alpha))
            _check_finite(loss.item())
            loss.backward()
            opt.step()
            task_sum += task_loss.item()
            distill_sum += d_loss.item()
            nb += 1
        metrics.epoch_trace.append({"epoch": epoch,
                                    "task_loss": task_sum / nb,
                                    "distill_loss": distill_sum / nb})

    for p, snap in zip(teacher.params(), teacher_snapshot):
        if not np.array_equal(p.data, snap):
            raise TrainingError("teacher parameters changed during distillation")

    metrics.teacher_acc = accuracy(teacher, x_te, y_te)
    metrics.student_acc = accuracy(student, x_te, y_te)
    metrics.final_task_loss = metrics.epoch_trace[-1]["task_loss"]
    metrics.final_distill_loss = metrics.epoch_trace[-1]["distill_loss"]
    metrics.wall_time = time.perf_counter() - t0
    return student, metrics


# -- working-capacity ensemble experiment ------------------------------------

def ensemble_eval(teacher, k, m, seed, dataset_spec, dataset=None, batch_size=128):
    """Average the teacher head's softmax over k dropout-perturbed copies of
    the tap feature (prediction averaging as the classification stand-in for
    detection-box fusion). Perturbs the raw tap feature so the frozen head
    stays calibrated. Returns (single_acc, ensemble_acc)."""
    if dataset is None:
        dataset = make_dataset(dataset_spec)
    _, _, x_te, y_te = dataset
    teacher.eval()
    tap = teacher.feature_tap_index
    correct_single = 0
    correct_ens = 0
    cfg = av.AvatarConfig(count=k, dropout_ratio=m, seed=seed)
    for bi, lo in enumerate(range(0, len(y_te), batch_size)):
        xb = Tensor(x_te[lo:lo + batch_size])
        yb = y_te[lo:lo + batch_size]
        logits, feat = teacher.forward(xb)
        correct_single += int(np.sum(np.argmax(logits.data, axis=1) == yb))
        avatars = av.generate(feat.detach(), cfg, stream_id=bi)
        prob_sum = None
        for a_feat in avatars.features:
            out = teacher.forward_from(a_feat, tap + 1)
            p = T.softmax(out, axes=(1,)).data
            prob_sum = p if prob_sum is None else prob_sum + p
        correct_ens += int(np.sum(np.argmax(prob_sum, axis=1) == yb))
    n = len(y_te)
    return correct_single / n, correct_ens / n


def ensemble_curve(teacher, ks, m, seeds, dataset_spec, dataset=None):
    """Rows of (k, mean_single, mean_ensemble, std) over seeds."""
    rows = []
    for k in ks:
        singles, ensembles = [], []
        for seed in seeds:
            s, e = ensemble_eval(teacher, k, m, seed, dataset_spec, dataset)
            singles.append(s)
            ensembles.append(e)
        rows.append({"k": k,
                     "mean_single": float(np.mean(singles)),
                     "mean_ensemble": float(np.mean(ensembles)),
                     "std": float(np.std(ensembles))})
    return rows


# -- ablations ---------------------------------------------------------------

def _ablation_configs(base, suites):
    """3 component rows and/or 4 merge rows, in fixed order."""
    rows = []
    if "component" in suites:
        for mode in MODES:
            rows.append(("component", dict(base, mode=mode)))
    if "merge" in suites:
        for merge in ("scalar", "full", "channel", "spatial"):
            rows.append(("merge", dict(base, mode="akd", merge_mode=merge)))
    return rows


def _run_one(tag, cfg_dict, seed, dataset_kw):
    spec = ToyDatasetSpec(seed=seed, **dataset_kw)
    dataset = make_dataset(spec)
    teacher, t_metrics = train_teacher(spec, seed, dataset=dataset)
    cfg = ExperimentConfig(seed=seed, **cfg_dict)
    _, metrics = distill_student(teacher, cfg, spec, dataset=dataset)
    return {"tag": tag, "seed": seed, "mode": cfg.mode, "loss_kind": cfg.loss_kind,
            "merge_mode": cfg.merge_mode if cfg.mode == "akd" else "",
            "k": cfg.k, "m": cfg.m,
            "student_acc": metrics.student_acc, "teacher_acc": metrics.teacher_acc,
            "final_distill_loss": metrics.final_distill_loss}


def sign_test(wins, losses):
    """One-sided sign test p-value: P(X >= wins) under Binomial(n, 1/2),
    ties dropped."""
    n = wins + losses
    if n == 0:
        return 1.0
    return float(stats.binomtest(wins, n, 0.5, alternative="greater").pvalue)


def ablation_suite(base_cfg, seeds, dataset_kw=None, max_workers=None,
                   suites=("component", "merge")):
    """Run the component and/or merge ablations for every seed.

    Returns (records, summary): per-run records in deterministic order and a
    summary with per-configuration mean/std plus pairwise sign tests.
    Thread-parallel across runs when max_workers > 1; results are ordered by
    (config row, seed) regardless.
    """
    dataset_kw = dataset_kw or {}
    rows = _ablation_configs(base_cfg, suites)
    jobs = [(tag, cfg, seed) for tag, cfg in rows for seed in seeds]
    if max_workers is None or max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as ex:
            records = list(ex.map(lambda j: _run_one(j[0], j[1], j[2], dataset_kw), jobs))
    else:
        records = [_run_one(tag, cfg, seed, dataset_kw) for tag, cfg, seed in jobs]

    summary = {"format_version": 1, "n_seeds": len(seeds), "rows": []}
    by_key = {}
    for rec in records:
        key = (rec["tag"], rec["mode"], rec["merge_mode"])
        by_key.setdefault(key, []).append(rec)
    for (tag, mode, merge), recs in by_key.items():
        accs = [r["student_acc"] for r in recs]
        label = mode if tag == "component" else f"akd/{merge}"
        summary["rows"].append({"tag": tag, "mode": label,
                                "mean_acc": float(np.mean(accs)),
                                "std": float(np.std(accs)),
                                "n_seeds": len(recs)})

    def accs_for(mode):
        return {r["seed"]: r["student_acc"] for r in records
                if r["tag"] == "component" and r["mode"] == mode}

    pairs = [("akd", "baseline"), ("akd", "avatars_equal"), ("avatars_equal", "baseline")]
    summary["sign_tests"] = {}
    if "component" not in suites:
        return records, summary
    for hi, lo in pairs:
        a, b = accs_for(hi), accs_for(lo)
        wins = sum(1 for s in seeds if a[s] > b[s])
        losses = sum(1 for s in seeds if a[s] < b[s])
        summary["sign_tests"][f"{hi}_vs_{lo}"] = {
            "wins": wins, "losses": losses, "p": sign_test(wins, losses)}
    return records, summary
