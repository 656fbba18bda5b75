"""``kwtalab`` command line: train, attack, theory sweeps, landscape and 1-D demo.

Every command writes its CSV outputs under ``--out`` together with a
``<command>.manifest.json`` sidecar recording the resolved configuration.
Exit status is 0 on success, 2 on usage errors and 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, attacks, data, nn, theorylab, training
from .tensor import make_rng


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _finetune(text: str) -> tuple[float, float, float]:
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("--finetune expects gamma_start:gamma_end:delta")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad --finetune value {text!r}") from None


def _interval(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a:b, got {text!r}") from None
    return a, b


# ---------------------------------------------------------------------------
# output plumbing


class Run:
    """Collects outputs for one command and writes its manifest."""

    def __init__(self, args, command: str):
        self.args = args
        self.command = command
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[str] = []
        self.start = time.perf_counter()

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(str(p))
        return p

    def write_csv(self, name: str, header, rows) -> Path:
        p = self.path(name)
        with open(p, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(header)
            w.writerows(rows)
        return p

    def finish(self) -> Path:
        config = {k: v for k, v in vars(self.args).items() if k != "func"}
        manifest = {
            "command": self.command,
            "config": config,
            "seed": getattr(self.args, "seed", None),
            "version": __version__,
            "outputs": self.outputs,
            "duration_s": time.perf_counter() - self.start,
        }
        p = self.out / f"{self.command}.manifest.json"
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
        return p


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _load_split(args, split: str, n: int | None, seed: int) -> data.Dataset:
    args.data = str(data.find_mnist_dir(args.data))
    ds = data.load_mnist(split, args.data)
    if n is not None and n < len(ds):
        ds = data.subset(ds, n, seed)
    return ds


def _attack_config(args) -> attacks.AttackConfig:
    cfg = attacks.AttackConfig(family=args.attack, epsilon=args.eps, steps=args.steps, step_size=args.step_size,
                               random_init=not args.no_random_init, decay=args.decay,
                               n_samples=args.noise_samples)
    try:
        attacks.check_attack_config(cfg)
    except ValueError as e:
        raise UsageError(str(e)) from None
    return cfg


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    if args.activation == "relu" and (args.gamma is not None or args.finetune is not None):
        raise UsageError("--gamma and --finetune apply only to --activation kwta")
    gamma = None
    sched = None
    if args.activation == "kwta":
        if args.finetune is not None:
            g0, g1, delta = args.finetune
            try:
                sched = training.FinetuneSchedule(g0, g1, delta, args.finetune_epochs)
            except ValueError as e:
                raise UsageError(str(e)) from None
            if args.gamma is not None and abs(args.gamma - g0) > 1e-12:
                raise UsageError("--gamma must equal the fine-tuning start ratio")
            gamma = g0
        else:
            gamma = 0.08 if args.gamma is None else args.gamma
        if not 0 < gamma <= 1:
            raise UsageError(f"--gamma must lie in (0, 1], got {gamma}")
    if args.adv_train and args.attack not in ("fgsm", "pgd", "mifgsm"):
        raise UsageError("--adv-train needs --attack fgsm, pgd or mifgsm")
    attack_cfg = _attack_config(args) if args.adv_train else None
    try:
        cfg = training.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                                   lr_schedule=((0, args.lr),), momentum=args.momentum, seed=args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None

    ds = _load_split(args, "train", args.train_size, args.seed)
    run = Run(args, "train")
    rng = make_rng(args.seed)
    if args.preset == "mnist-cnn":
        specs = nn.mnist_cnn_specs(args.activation, gamma, args.width_divisor)
    else:
        specs = nn.mnist_mlp_specs(args.activation, gamma)
    model = nn.build_model(specs, rng, (1, 28, 28), name=args.preset, seed=args.seed)
    if attack_cfg is not None:
        result = training.train_adversarial(model, ds, attack_cfg, cfg)
    else:
        result = training.train_standard(model, ds, cfg)
    if sched is not None:
        training.finetune_sparsity(model, ds, sched, cfg, result)
    model_path = run.path("model.kwta")
    nn.save_model(model, model_path)
    training.write_metrics_csv(result.metrics, run.path("metrics.csv"))
    run.finish()
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"trained {args.preset} ({args.activation}, gamma={model.gammas[0] if model.gammas else None}) "
              f"epochs={len(result.metrics)} loss={last.loss:.4f} acc={last.accuracy:.4f} -> {model_path}")
    else:
        print(f"saved untrained model -> {model_path}")
    return 0


# ---------------------------------------------------------------------------
# attack


def cmd_attack(args) -> int:
    cfg = _attack_config(args)
    model = nn.load_model(args.model)
    source = nn.load_model(args.transfer_source) if args.transfer_source else None
    ds = _load_split(args, "test", args.test_size, args.seed)
    if tuple(model.input_shape) != tuple(ds.images.shape[1:]):
        raise ValueError(f"model expects inputs {model.input_shape}, data has {ds.images.shape[1:]}")
    run = Run(args, "attack")
    if source is not None:
        report = attacks.transfer_attack(source, model, ds, cfg, seed=args.seed, batch_size=args.batch_size)
    else:
        report = attacks.evaluate_robust_accuracy(model, ds, cfg, seed=args.seed, batch_size=args.batch_size)
    attacks.write_attack_csv(report, run.path("attack.csv"))
    if cfg.family == "none":
        run.write_csv("attack_summary.csv", ["n", "a_std"], [[len(ds), repr(report.a_std)]])
        print(f"A_std={report.a_std:.4f} n={len(ds)}")
    else:
        run.write_csv("attack_summary.csv", ["attack", "epsilon", "steps", "n", "a_std", "a_rob", "max_linf"],
                      [[cfg.family, repr(cfg.epsilon), cfg.steps, len(ds), repr(report.a_std),
                        repr(report.a_rob), repr(report.max_linf)]])
        kind = " transfer" if source is not None else ""
        print(f"{cfg.family}{kind} eps={cfg.epsilon}: {report.summary()}")
    run.finish()
    return 0


# ---------------------------------------------------------------------------
# theory


def _summaries(run, name, reports):
    rows = [r.summary_row() for r in reports]
    theorylab.write_rows_csv(rows, run.path(f"{name}_summary.csv"))
    return rows


def _theory_dense(args, run):
    reports = []
    for l in args.l:
        try:
            cfg = theorylab.DenseTrialConfig(args.m, l, args.gamma, args.beta, args.trials, args.seed)
        except theorylab.ConfigError as e:
            raise UsageError(str(e)) from None
        reports.append(theorylab.dense_discontinuity_trial(cfg, args.threads))
    theorylab.write_rows_csv([r for rep in reports for r in rep.rows], run.path("dense_trials.csv"))
    for row in _summaries(run, "dense", reports):
        print(f"dense m={row['m']} l={row['l']} gamma={row['gamma']} beta={row['beta']}: "
              f"{row['successes']}/{row['trials']} = {row['fraction']:.4f} (seed {row['seed']})")
    print(f"non-decreasing in l (2 sigma): {theorylab.non_decreasing_within(reports)}")


def _theory_disjoint(args, run):
    reports = []
    for l in args.l:
        try:
            cfg = theorylab.DisjointTrialConfig(args.m, l, args.k, args.n_points, args.alpha, args.trials, args.seed)
        except theorylab.ConfigError as e:
            raise UsageError(str(e)) from None
        rep = theorylab.disjoint_pattern_trial(cfg, with_fit=not args.no_fit, threads=args.threads)
        for r in rep.rows:
            r["l"] = l
        reports.append(rep)
    theorylab.write_rows_csv([r for rep in reports for r in rep.rows], run.path("disjoint_trials.csv"))
    for row in _summaries(run, "disjoint", reports):
        extra = f" max_fit_error={row['max_fit_error']:.3g}" if "max_fit_error" in row else ""
        print(f"disjoint m={row['m']} l={row['l']} k={row['k']} N={row['n_points']} alpha={row['alpha']}: "
              f"{row['successes']}/{row['trials']} = {row['fraction']:.4f} "
              f"pairs={row['pair_disjoint_fraction']:.4f}{extra} (seed {row['seed']})")


def _theory_jump(args, run):
    try:
        reports = theorylab.jump_sweep(args.gammas, args.l, args.m, args.crossings, args.seed, args.t_max,
                                       args.threads)
    except theorylab.ConfigError as e:
        raise UsageError(str(e)) from None
    theorylab.write_rows_csv([r for rep in reports for r in rep.rows], run.path("jump_trials.csv"))
    rows = _summaries(run, "jump", reports)
    for row in rows:
        print(f"jump gamma={row['gamma']} k={row['k']}: crossings={row['successes']}/{row['trials']} "
              f"mean|x*|={row['mean_abs_x_star']:.6f} (seed {row['seed']})")
    means = [r["mean_abs_x_star"] for r in rows]
    print(f"mean |x*| strictly decreasing in gamma: {all(b < a for a, b in zip(means, means[1:]))}")


def _theory_bernoulli(args, run):
    try:
        rep = theorylab.bernoulli_experiment(args.n_points, args.m, args.p, args.l, args.gamma, args.trials,
                                             args.seed, strict=args.strict, threads=args.threads)
    except theorylab.ConfigError as e:
        raise UsageError(str(e)) from None
    theorylab.write_rows_csv(rep.rows, run.path("bernoulli_trials.csv"))
    row = _summaries(run, "bernoulli", [rep])[0]
    print(f"bernoulli N={args.n_points} m={args.m} p={args.p} l={args.l} gamma={args.gamma}: "
          f"{row['successes']}/{row['trials']} = {row['fraction']:.4f} (seed {args.seed})")


def _theory_fit_labels(args, run):
    try:
        theorylab.DisjointTrialConfig(args.m, args.l, args.k, args.n_points, args.alpha, 1, args.seed)
    except theorylab.ConfigError as e:
        raise UsageError(str(e)) from None
    from .tensor import gaussian_matrix, trial_rng

    for attempt in range(args.attempts):
        rng = trial_rng(args.seed, attempt)
        xs = theorylab.admissible_points(args.n_points, args.m, args.alpha, rng)
        W = gaussian_matrix(args.l, args.m, 1.0 / args.l, rng)
        zs = rng.uniform(-1.0, 1.0, args.n_points)
        try:
            v = theorylab.fit_labels(W, xs, zs, args.k)
            break
        except theorylab.PreconditionError as e:
            print(f"draw {attempt}: {e}")
    else:
        raise ValueError(f"no draw with disjoint patterns in {args.attempts} attempts; enlarge --l")
    Y = xs @ W.T
    from .kwta import winner_mask

    outs = np.where(winner_mask(Y, args.k), Y, 0.0) @ v
    rows = [{"draw": attempt, "point": i, "target": zs[i], "output": outs[i], "abs_error": abs(outs[i] - zs[i])}
            for i in range(args.n_points)]
    theorylab.write_rows_csv(rows, run.path("fit_labels.csv"))
    err = theorylab.fit_labels_error(W, xs, zs, v, args.k)
    print(f"fit-labels N={args.n_points} l={args.l} k={args.k}: nonzeros={np.count_nonzero(v)} "
          f"max error={err:.3g} (seed {args.seed})")


THEORY = {
    "dense": _theory_dense,
    "disjoint": _theory_disjoint,
    "jump": _theory_jump,
    "bernoulli": _theory_bernoulli,
    "fit-labels": _theory_fit_labels,
}


def cmd_theory(args) -> int:
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    run = Run(args, f"theory-{args.experiment}")
    THEORY[args.experiment](args, run)
    run.finish()
    return 0


# ---------------------------------------------------------------------------
# landscape and fit1d


def cmd_landscape(args) -> int:
    if args.samples < 1 or args.examples < 1:
        raise UsageError("--samples and --examples must be >= 1")
    models = [("model", nn.load_model(args.model))]
    if args.compare:
        models.append(("compare", nn.load_model(args.compare)))
    args.data = str(data.find_mnist_dir(args.data))
    ds = data.load_mnist("test", args.data)
    if args.first + args.examples > len(ds):
        raise UsageError("requested examples exceed the test split")
    run = Run(args, "landscape")
    summary = []
    for e in range(args.first, args.first + args.examples):
        x, y = ds.images[e], int(ds.labels[e])
        for tag, model in models:
            land = theorylab.loss_landscape(model, x, y, make_rng(args.seed + e), args.range, args.samples)
            name = f"landscape_{tag}_{e}.csv"
            run.write_csv(name, ["eps1", "eps2", "loss"],
                          [[_fmt(r["eps1"]), _fmt(r["eps2"]), _fmt(r["loss"])] for r in land.rows()])
            changes = theorylab.laplacian_sign_changes(land.loss)
            summary.append([e, y, tag, args.model if tag == "model" else args.compare, changes, int(land.fallback)])
            print(f"example {e} ({tag}): {land.loss.size} points, laplacian sign changes={changes}"
                  + (" [random g1: zero gradient]" if land.fallback else ""))
    run.write_csv("landscape_summary.csv", ["example", "label", "role", "model", "sign_changes", "fallback"], summary)
    run.finish()
    return 0


TARGETS = {
    "sin": np.sin,
    "const": lambda t: 0.7,
    "abs": abs,
    "cubic": lambda t: t ** 3 / 9 - t / 3,
}


def cmd_fit1d(args) -> int:
    if not 0 < args.gamma <= 1:
        raise UsageError(f"--gamma must lie in (0, 1], got {args.gamma}")
    a, b = args.interval
    try:
        t, v = data.synthetic_1d(TARGETS[args.target], args.points, a, b)
        cfg = training.TrainConfig(epochs=args.epochs, batch_size=16,
                                   lr_schedule=((0, args.lr), (math.ceil(0.75 * args.epochs), args.lr / 10)),
                                   momentum=0.9, seed=args.seed, loss="mse")
    except ValueError as e:
        raise UsageError(str(e)) from None
    run = Run(args, "fit1d")
    res = theorylab.fit_1d_demo(t, v, args.gamma, (args.width, args.width), cfg, args.seed, args.grid)
    run.write_csv("fit1d_samples.csv", ["t", "v"], [[_fmt(a_), _fmt(b_)] for a_, b_ in zip(t, v)])
    run.write_csv("fit1d_predictions.csv", ["t", "pred", "jump_after"],
                  [[_fmt(r["t"]), _fmt(r["pred"]), int(r["jump_after"])] for r in res.rows()])
    run.write_csv("fit1d_summary.csv", ["gamma", "target", "jumps", "threshold", "train_loss"],
                  [[repr(args.gamma), args.target, res.jump_count, repr(res.threshold), repr(float(res.train_loss))]])
    run.finish()
    print(f"fit1d gamma={args.gamma} target={args.target}: jumps={res.jump_count} "
          f"threshold={res.threshold:.3g} train_loss={res.train_loss:.3g}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_attack_flags(p, default_attack="pgd"):
    p.add_argument("--attack", default=default_attack, choices=attacks.FAMILIES)
    p.add_argument("--eps", type=float, default=0.3)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--step-size", type=float, default=None, help="default eps/10")
    p.add_argument("--no-random-init", action="store_true", help="start PGD at the clean input")
    p.add_argument("--decay", type=float, default=1.0, help="MI-FGSM momentum decay")
    p.add_argument("--noise-samples", type=int, default=1000, help="draws per example for gaussian_noise")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="runs", help="output directory (created if missing)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="worker processes for trial sweeps")
    common.add_argument("--data", default=None, help=f"MNIST IDX directory (default ${data.DATA_DIR_ENV})")

    parser = argparse.ArgumentParser(prog="kwtalab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kwtalab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train an MNIST model")
    p.add_argument("--preset", default="mnist-cnn", choices=sorted(nn.PRESETS))
    p.add_argument("--activation", default="kwta", choices=("relu", "kwta"))
    p.add_argument("--gamma", type=float, default=None, help="sparsity ratio (kwta only; default 0.08)")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--train-size", type=int, default=None, help="seeded training subset size")
    p.add_argument("--width-divisor", type=int, default=8, help="CNN width reduction (1 = full width)")
    p.add_argument("--finetune", type=_finetune, default=None, metavar="G0:G1:DELTA")
    p.add_argument("--finetune-epochs", type=int, default=2, help="epochs per fine-tuning stage")
    p.add_argument("--adv-train", action="store_true", help="train on attack examples")
    _add_attack_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", parents=[common], help="robust accuracy of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--transfer-source", default=None, help="craft on this model, score --model")
    p.add_argument("--test-size", type=int, default=None, help="seeded test subset size")
    p.add_argument("--batch-size", type=int, default=128)
    _add_attack_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("theory", help="Monte Carlo sweeps of k-WTA geometry")
    tsub = p.add_subparsers(dest="experiment", required=True)
    t = tsub.add_parser("dense", parents=[common])
    t.add_argument("--m", type=int, default=8)
    t.add_argument("--l", type=_ints, default=[64, 256, 1024, 4096])
    t.add_argument("--gamma", type=float, default=0.3)
    t.add_argument("--beta", type=float, default=0.25)
    t.add_argument("--trials", type=int, default=1000)
    t = tsub.add_parser("disjoint", parents=[common])
    t.add_argument("--m", type=int, default=16)
    t.add_argument("--l", type=_ints, default=[16384])
    t.add_argument("--k", type=int, default=4)
    t.add_argument("--n-points", type=int, default=10)
    t.add_argument("--alpha", type=float, default=0.5)
    t.add_argument("--trials", type=int, default=100)
    t.add_argument("--no-fit", action="store_true", help="skip label fitting on disjoint trials")
    t = tsub.add_parser("jump", parents=[common])
    t.add_argument("--gammas", type=_floats, default=[0.05, 0.1, 0.2, 0.4])
    t.add_argument("--l", type=int, default=512)
    t.add_argument("--m", type=int, default=32)
    t.add_argument("--crossings", type=int, default=200)
    t.add_argument("--t-max", type=float, default=1.0)
    t = tsub.add_parser("bernoulli", parents=[common])
    t.add_argument("--n-points", type=int, default=8)
    t.add_argument("--m", type=int, default=256)
    t.add_argument("--p", type=float, default=0.5)
    t.add_argument("--l", type=int, default=8192)
    t.add_argument("--gamma", type=float, default=0.2)
    t.add_argument("--trials", type=int, default=50)
    t.add_argument("--strict", action="store_true", help="enforce the asymptotic lower bound on p")
    t = tsub.add_parser("fit-labels", parents=[common])
    t.add_argument("--m", type=int, default=16)
    t.add_argument("--l", type=int, default=16384)
    t.add_argument("--k", type=int, default=4)
    t.add_argument("--n-points", type=int, default=8)
    t.add_argument("--alpha", type=float, default=0.5)
    t.add_argument("--attempts", type=int, default=20, help="layer redraws allowed when patterns overlap")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("landscape", parents=[common], help="loss grid around test examples")
    p.add_argument("--model", required=True)
    p.add_argument("--compare", default=None, help="second model evaluated on the same examples")
    p.add_argument("--samples", type=int, default=50, help="grid points per axis")
    p.add_argument("--range", type=float, default=0.04)
    p.add_argument("--examples", type=int, default=1)
    p.add_argument("--first", type=int, default=0, help="index of the first test example")
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("fit1d", parents=[common], help="fit a scalar function with a k-WTA MLP")
    p.add_argument("--gamma", type=float, default=0.15)
    p.add_argument("--target", default="sin", choices=sorted(TARGETS))
    p.add_argument("--points", type=int, default=40)
    p.add_argument("--interval", type=_interval, default=(-3.0, 3.0), metavar="A:B")
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--lr", type=float, default=0.003)
    p.add_argument("--grid", type=int, default=2000, help="evaluation points")
    p.set_defaults(func=cmd_fit1d)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"kwtalab: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"kwtalab: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
