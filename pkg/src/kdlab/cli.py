"""Command-line entry point.

Subcommands: train-teacher, distill, ablate, verify, ensemble-eval.
Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 runtime/training error. Every command echoes its fully-resolved config
into the output directory; primary outputs are byte-identical across
reruns (wall-clock timings go to stderr only).
"""

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import avatar as av
from . import distill as ds
from . import harness, nn
from . import uncertainty as unc
from .errors import ConfigError, FormatError, KdlabError, TrainingError, VerificationError

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3

DEFAULT_CONFIG = {
    "dataset": {"n_train": 512, "n_test": 512, "classes": 4, "height": 16,
                "width": 16, "channels": 1, "noise_std": 0.3,
                "amplitude_spread": 0.5, "seed": 0},
    "teacher": {"width": 16, "epochs": 30, "lr": 0.05, "momentum": 0.9,
                "batch_size": 32},
    "experiment": {"mode": "akd", "loss_kind": "kl",
                   "kl_softmax_axes": "per_channel_spatial",
                   "merge_mode": "spatial", "k": 5, "m": 0.1,
                   "per_avatar_ratios": None,
                   "alpha": 1.0, "lr": 0.05, "momentum": 0.9,
                   "epochs": 30, "batch_size": 32, "seed": 0},
}

# the ablate command defaults to the component-ordering study regime
ABLATE_CONFIG = copy.deepcopy(DEFAULT_CONFIG)
ABLATE_CONFIG["dataset"].update(harness.default_ablation_dataset())
ABLATE_CONFIG["experiment"].update(harness.default_ablation_base())


def _merge_config(defaults, overrides, path=""):
    out = copy.deepcopy(defaults)
    for key, val in overrides.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {here} must be an object")
            out[key] = _merge_config(defaults[key], val, here)
        else:
            out[key] = val
    return out


def load_config(path, defaults=None):
    defaults = defaults if defaults is not None else DEFAULT_CONFIG
    if path is None:
        return copy.deepcopy(defaults)
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return _merge_config(defaults, doc)


def _echo_config(cfg, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w", encoding="utf-8") as f:
        json.dump({"format_version": 1, **cfg}, f, sort_keys=True, indent=2)


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True)


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(repr(v) if isinstance(v, float) else str(v)
                             for v in row) + "\n")


# -- subcommands -------------------------------------------------------------

def cmd_train_teacher(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["dataset"]["seed"] = args.seed
    out_dir = Path(args.out)
    _echo_config(cfg, out_dir)
    spec = harness.ToyDatasetSpec(**cfg["dataset"])
    tc = cfg["teacher"]
    net, metrics = harness.train_teacher(
        spec, spec.seed, width=tc["width"], epochs=tc["epochs"], lr=tc["lr"],
        momentum=tc["momentum"], batch_size=tc["batch_size"])
    nn.save_weights(net, out_dir / "teacher.json")
    _write_json({"format_version": 1, **metrics.to_dict()}, out_dir / "metrics.json")
    print(f"teacher_acc={metrics.teacher_acc:.4f} "
          f"(wall {metrics.wall_time:.1f}s)", file=sys.stderr)
    return EXIT_OK


def _load_teacher(path):
    if not os.path.exists(path):
        raise ConfigError(f"teacher weight file not found: {path}")
    return nn.load_weights(path)


def cmd_distill(args):
    cfg = load_config(args.config)
    exp = cfg["experiment"]
    mode_map = {"baseline": "baseline", "avatars": "avatars_equal", "akd": "akd"}
    if args.mode:
        exp["mode"] = mode_map[args.mode]
    if args.mode == "baseline" and (args.k is not None or args.m is not None):
        raise ConfigError("--mode baseline contradicts --k/--m (no perturbation)")
    for flag, key in (("loss", "loss_kind"), ("merge", "merge_mode"),
                      ("k", "k"), ("m", "m"), ("seed", "seed")):
        val = getattr(args, flag)
        if val is not None:
            exp[key] = val
            if key in ("k", "m"):
                # explicit --k/--m means a uniform dropout ratio
                exp["per_avatar_ratios"] = None
    out_dir = Path(args.out)
    _echo_config(cfg, out_dir)

    teacher = _load_teacher(args.teacher)
    spec = harness.ToyDatasetSpec(**cfg["dataset"])
    run_cfg = harness.ExperimentConfig(**exp)
    dataset = harness.make_dataset(spec)

    sigma = None
    if run_cfg.mode == "akd":
        standardizer = harness.FeatureStandardizer.fit(teacher, dataset[0])
        sigma = harness.estimate_sigma(teacher, standardizer, dataset[0],
                                       run_cfg.merge_mode)
        with open(out_dir / "sigma.json", "w", encoding="utf-8") as f:
            f.write(sigma.to_json())

    _, metrics = harness.distill_student(teacher, run_cfg, spec,
                                         dataset=dataset, sigma=sigma)
    doc = {"format_version": 1, **metrics.to_dict()}
    doc["mode"] = run_cfg.mode
    doc["loss_kind"] = run_cfg.loss_kind
    if sigma is not None:
        doc["merge_mode"] = run_cfg.merge_mode
        doc["sigma_shape"] = list(sigma.shape)
    trace = doc.pop("epoch_trace")
    _write_json(doc, out_dir / "metrics.json")
    _write_csv(out_dir / "trace.csv",
               ["epoch", "task_loss", "distill_loss"],
               [(r["epoch"], r["task_loss"], r["distill_loss"]) for r in trace])
    print(f"student_acc={metrics.student_acc:.4f} teacher_acc={metrics.teacher_acc:.4f} "
          f"(wall {metrics.wall_time:.1f}s)", file=sys.stderr)
    return EXIT_OK


def cmd_ablate(args):
    cfg = load_config(args.config, ABLATE_CONFIG)
    out_dir = Path(args.out)
    _echo_config(cfg, out_dir)
    seeds = list(range(args.seeds))
    exp = cfg["experiment"]
    base = {k: exp[k] for k in ("loss_kind", "kl_softmax_axes", "merge_mode",
                                "k", "m", "per_avatar_ratios", "alpha",
                                "lr", "momentum", "epochs", "batch_size")}
    dataset_kw = {k: v for k, v in cfg["dataset"].items() if k != "seed"}
    workers = int(os.environ.get("AKD_THREADS", os.cpu_count() or 1))
    records, summary = harness.ablation_suite(base, seeds, dataset_kw,
                                              max_workers=max(1, workers))
    _write_csv(out_dir / "results.csv",
               ["seed", "mode", "loss_kind", "merge_mode", "k", "m",
                "student_acc", "teacher_acc", "final_distill_loss"],
               [(r["seed"], r["mode"], r["loss_kind"], r["merge_mode"], r["k"],
                 r["m"], r["student_acc"], r["teacher_acc"],
                 r["final_distill_loss"]) for r in records])
    _write_json(summary, out_dir / "summary.json")
    for row in summary["rows"]:
        print(f"{row['tag']:9s} {row['mode']:14s} "
              f"{row['mean_acc']:.4f} +/- {row['std']:.4f}", file=sys.stderr)
    for name, st in summary["sign_tests"].items():
        print(f"sign test {name}: wins={st['wins']} losses={st['losses']} "
              f"p={st['p']:.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_ensemble_eval(args):
    out_dir = Path(args.out)
    cfg = load_config(args.config)
    _echo_config(cfg, out_dir)
    teacher = _load_teacher(args.teacher)
    spec = harness.ToyDatasetSpec(**cfg["dataset"])
    dataset = harness.make_dataset(spec)
    ks = [int(k) for k in args.k.split(",")]
    rows = harness.ensemble_curve(teacher, ks, args.m, list(range(args.seeds)),
                                  spec, dataset)
    _write_csv(out_dir / "curve.csv",
               ["k", "mean_single", "mean_ensemble", "std"],
               [(r["k"], r["mean_single"], r["mean_ensemble"], r["std"])
                for r in rows])
    for r in rows:
        print(f"k={r['k']:3d} single={r['mean_single']:.4f} "
              f"ensemble={r['mean_ensemble']:.4f}", file=sys.stderr)
    return EXIT_OK


# -- verification ------------------------------------------------------------

def run_verification(out_dir=None):
    """Run every analytic/oracle invariant suite; returns (ok, checks)."""
    checks = []

    def record(name, fn):
        try:
            detail = fn()
            checks.append({"name": name, "passed": True, "detail": detail})
        except (VerificationError, AssertionError) as e:
            checks.append({"name": name, "passed": False, "detail": str(e)})

    report_holder = {}

    def check_gradients():
        report = ds.verify_gradients(n_trials=100)
        report_holder["report"] = report
        return (f"max_abs_err_autodiff={report.max_abs_err_autodiff:.3e} "
                f"max_rel_err_fd={report.max_rel_err_finite_diff:.3e}")

    def check_ratio_law():
        report = report_holder.get("report")
        if report is None:
            raise VerificationError("gradient suite did not run")
        worst = max(abs(rm - 1.0 / sig ** 2) for sig, rm, _ in report.ratio_samples)
        if worst > 1e-12:
            raise VerificationError(f"MSE ratio law violated by {worst:.3e}")
        return f"max |ratio - 1/sigma^2| = {worst:.3e} over {len(report.ratio_samples)} samples"

    def check_residual_moment():
        feat = np.array([[[[1.0, 2.0], [0.5, -1.5]]]])
        m = 0.1
        est = av.residual_moment_oracle(feat, m, n_draws=200000, seed=7)
        expected = m * feat ** 2
        rel = np.max(np.abs(est - expected) / expected)
        if rel > 0.02:
            raise VerificationError(f"residual moment off by {rel:.3%}")
        est2 = av.residual_moment_oracle(2.0 * feat, m, n_draws=200000, seed=8)
        ratio = np.mean(est2 / est)
        if abs(ratio - 4.0) > 0.04:
            raise VerificationError(f"quadratic scaling ratio {ratio:.4f} != 4")
        return f"max rel err {rel:.4f}; doubling ratio {ratio:.3f}"

    def check_analytic_min():
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(20):
            r = float(rng.uniform(0.2, 3.0))
            grid = np.geomspace(r * r / 10, 10 * r * r, 401)
            argmin = unc.analytic_min_check(r, grid)
            step = grid[1] / grid[0]
            off = abs(np.log(argmin / (r * r))) / np.log(step)
            worst = max(worst, off)
            if off > 1.0:
                raise VerificationError(f"argmin {argmin} not within one grid step of {r * r}")
        return f"worst offset {worst:.2f} grid steps"

    def check_variance_oracle():
        rng = np.random.default_rng(5)
        samples = rng.normal(size=(1000, 3, 4, 4))
        est = unc.SigmaEstimator((3, 4, 4))
        for lo in range(0, 1000, 64):
            est.update(samples[lo:lo + 64])
        ref = unc.two_pass_variance(samples)
        rel = np.max(np.abs(est.variance() - ref) / np.maximum(np.abs(ref), 1e-300))
        if rel > 1e-10:
            raise VerificationError(f"Welford vs two-pass rel err {rel:.3e}")
        layer = nn.Layer(nn.batch_standardize(3))
        layer.init(np.random.default_rng(0))
        from .tensor import Tensor
        out = layer.forward(Tensor(rng.normal(size=(16, 3, 5, 5))), train=True, rng=None)
        mu = np.max(np.abs(out.data.mean(axis=(0, 2, 3))))
        if mu > 1e-10:
            raise VerificationError(f"standardized mean {mu:.3e} > 1e-10")
        return f"welford rel err {rel:.3e}; standardized |mean| {mu:.3e}"

    def check_reduction_identities():
        rng = np.random.default_rng(3)
        feat = rng.normal(size=(2, 3, 4, 4))
        s_feat = rng.normal(size=(2, 3, 4, 4))
        from .tensor import Tensor
        aset = av.generate(Tensor(feat), av.AvatarConfig(count=3, dropout_ratio=0.2, seed=1))
        unit = unc.SigmaTensor.unit()
        v = ds.vanilla_ensemble_loss(aset, Tensor(s_feat), None).item()
        a = ds.akd_mse_loss(aset, Tensor(s_feat), None, unit).item()
        if abs(v - a) > 1e-12:
            raise VerificationError(f"unit-sigma MSE reduction off by {abs(v - a):.3e}")
        kl_unit = ds.akd_kl_loss(aset, Tensor(s_feat), None, unit).item()
        kl_none = ds.akd_kl_loss(aset, Tensor(s_feat), None, None).item()
        if abs(kl_unit - kl_none) > 1e-9:
            raise VerificationError(f"unit-sigma KL reduction off by {abs(kl_unit - kl_none):.3e}")
        scalar = unc.sigma_from_variance(rng.uniform(0.5, 2.0, size=(3, 4, 4)), "scalar")
        if abs(float(scalar.values.reshape(())) - 1.0) > 1e-15:
            raise VerificationError("scalar merge did not normalize to exactly 1")
        a_scalar = ds.akd_mse_loss(aset, Tensor(s_feat), None, scalar).item()
        if abs(a_scalar - v) > 1e-9:
            raise VerificationError(f"scalar merge vs fixed temperature off by {abs(a_scalar - v):.3e}")
        return "unit-sigma and scalar-merge identities hold"

    record("gradient_triple_agreement", check_gradients)
    record("mse_ratio_law", check_ratio_law)
    record("residual_second_moment", check_residual_moment)
    record("local_objective_minimum", check_analytic_min)
    record("variance_oracle_and_zero_mean", check_variance_oracle)
    record("reduction_identities", check_reduction_identities)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report = report_holder.get("report")
        if report is not None:
            with open(out_dir / "grad_report.json", "w", encoding="utf-8") as f:
                f.write(report.to_json())
            with open(out_dir / "ratio_samples.csv", "w", encoding="utf-8") as f:
                f.write(report.ratio_csv())
        _write_json({"format_version": 1, "checks": checks}, out_dir / "verify.json")
    return all(c["passed"] for c in checks), checks


def cmd_verify(args):
    ok, checks = run_verification(args.out)
    for c in checks:
        status = "PASS" if c["passed"] else "FAIL"
        print(f"[{status}] {c['name']}: {c['detail']}")
    return EXIT_OK if ok else EXIT_VERIFY


# -- argument parsing --------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="kdlab",
                                description="feature-distillation workbench")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train-teacher", help="train and save the toy teacher")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(fn=cmd_train_teacher)

    d = sub.add_parser("distill", help="distill a student from a saved teacher")
    d.add_argument("--teacher", required=True)
    d.add_argument("--config")
    d.add_argument("--mode", choices=["baseline", "avatars", "akd"])
    d.add_argument("--loss", choices=["mse", "kl"])
    d.add_argument("--merge", choices=["scalar", "full", "channel", "spatial"])
    d.add_argument("--k", type=int)
    d.add_argument("--m", type=float)
    d.add_argument("--seed", type=int)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_distill)

    a = sub.add_parser("ablate", help="component and merge-mode ablations")
    a.add_argument("--config")
    a.add_argument("--seeds", type=int, required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)

    v = sub.add_parser("verify", help="analytic and oracle invariant suites")
    v.add_argument("--out", required=True)
    v.set_defaults(fn=cmd_verify)

    e = sub.add_parser("ensemble-eval", help="perturbed-ensemble accuracy curve")
    e.add_argument("--teacher", required=True)
    e.add_argument("--config")
    e.add_argument("--k", default="1,3,5,10",
                   help="comma-separated avatar counts")
    e.add_argument("--m", type=float, default=0.1)
    e.add_argument("--seeds", type=int, default=20)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_ensemble_eval)

    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (ConfigError, FormatError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as e:
        print(f"training error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except KdlabError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
