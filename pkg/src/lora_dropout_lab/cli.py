"""Command-line entry point.

Every subcommand reads an optional JSON config, takes all randomness from
``--seed`` and writes CSV/JSON/SVG files under ``--out``. Exit status is 0
on success, 1 for configuration and usage errors, 2 for numerical
failures such as divergence or an unconverged probe.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import rng as rngmod
from . import reporting
from .checkpoint import check_widths, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .errors import CheckpointError, ConfigError, LabError, NumericalError
from .pipeline import build_datasets, finetune, pretrain
from .ensemble import evaluate
from .training import RUN_COLUMNS

CALIBRATION_COLUMNS = ("bin", "lo", "hi", "count", "mean_confidence", "accuracy")
JENSEN_COLUMNS = ("domain", "N", "trial", "lhs", "rhs", "gap")
STABILITY_COLUMNS = ("lam", "i", "perturbation")
MCNORM_COLUMNS = ("p", "draws", "dim", "mc_estimate", "closed_form", "rel_error", "std_error")


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(suppress: bool) -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; the copy on
    # the subcommands must not overwrite values given before it
    def d(value):
        return argparse.SUPPRESS if suppress else value

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=d(None), help="JSON experiment config")
    common.add_argument("--seed", type=int, default=d(None), help="master seed (overrides the config)")
    common.add_argument("--out", type=Path, default=d(Path("out")), help="output directory")
    common.add_argument("--quiet", action="store_true", default=d(False), help="suppress progress output")
    common.add_argument("--timing", action="store_true", default=d(False), help="record wall-clock times in run CSVs")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lora-lab", description="LoRA Dropout laboratory", parents=[_common(False)])
    common = _common(True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("pretrain", parents=[common], help="train the dense base model")

    ft = sub.add_parser("finetune", parents=[common], help="fine-tune adapters on the shifted task")
    ft.add_argument("--checkpoint", type=Path, help="pretrained checkpoint (default: pretrain in-process)")
    ft.add_argument("--p", type=float, help="dropout rate")
    ft.add_argument("--N", type=int, help="instances per iteration")
    ft.add_argument("--epochs", type=int)
    ft.add_argument("--mode", choices=("dropout", "explicit-reg", "plain"))

    ev = sub.add_parser("eval", parents=[common], help="evaluate a fine-tuned checkpoint")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--p", type=float, help="test-time dropout rate")
    ev.add_argument("--N", type=int, help="ensemble size")
    ev.add_argument("--single", action="store_true", help="unmasked single inference")

    sw = sub.add_parser("sweep", parents=[common], help="generalization gap over a p-grid")
    sw.add_argument("--p-grid", type=str, help="comma-separated rates")
    sw.add_argument("--seeds", type=int, help="number of seeds")
    sw.add_argument("--epochs", type=int)

    jc = sub.add_parser("jensen-check", parents=[common], help="ensemble loss vs mean instance loss")
    jc.add_argument("--checkpoint", type=Path, help="use this model on the fine-tune test split")
    jc.add_argument("--trials", type=int)
    jc.add_argument("--N", type=int)

    sp = sub.add_parser("stability-probe", parents=[common], help="leave-one-out stability probe")
    sp.add_argument("--problem", choices=("logistic", "quadratic"))

    mc = sub.add_parser("mcnorm-check", parents=[common], help="Monte Carlo masked-norm identity")
    mc.add_argument("--p", type=float)
    mc.add_argument("--draws", type=int)

    pl = sub.add_parser("plot", parents=[common], help="SVG chart of a run or sweep CSV")
    pl.add_argument("--input", type=Path, required=True)
    return parser


class _Ctx:
    def __init__(self, args):
        self.args = args
        self.cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig().validate()
        self.seed = self.cfg.seed if args.seed is None else args.seed
        if self.seed < 0 or self.seed >= 2**64:
            raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {self.seed}")
        self.out = args.out

    def log(self, msg):
        if not self.args.quiet:
            print(msg)

    def json(self, name, obj):
        path = reporting.write_json(self.out / name, obj)
        self.log(f"wrote {path}")

    def text(self, name, text):
        path = reporting.write_text(self.out / name, text)
        self.log(f"wrote {path}")


def _train_overrides(args, cfg):
    ov = {}
    for name in ("p", "N", "epochs", "mode"):
        v = getattr(args, name, None)
        if v is not None:
            ov[name] = v
    if ov:
        cfg.train = replace(cfg.train, **ov).validate()
    return cfg


def cmd_pretrain(ctx):
    model, rec = pretrain(ctx.cfg, ctx.seed)
    save_checkpoint(ctx.out / "pretrained.json", model, _model_spec(ctx, "dense"))
    ctx.log(f"wrote {ctx.out / 'pretrained.json'}")
    ctx.text("pretrain_run.csv", rec.to_csv(ctx.args.timing))
    ctx.log(f"pretrain: final loss {rec.final.train_loss:.4f}, accuracy {rec.final.train_acc:.4f}")


def _model_spec(ctx, kind):
    return {"widths": ctx.cfg.widths, "kind": kind, "seed": ctx.seed, "config": ctx.cfg.to_dict()}


def cmd_finetune(ctx):
    cfg = _train_overrides(ctx.args, ctx.cfg)
    data = build_datasets(cfg, ctx.seed)
    if ctx.args.checkpoint:
        base, _ = load_checkpoint(ctx.args.checkpoint)
        check_widths(base, cfg.widths)
    else:
        base, _ = pretrain(cfg, ctx.seed, data)
    model, rec = finetune(cfg, base, ctx.seed, data)
    save_checkpoint(ctx.out / "finetuned.json", model, _model_spec(ctx, cfg.model.adapter))
    ctx.log(f"wrote {ctx.out / 'finetuned.json'}")
    ctx.text("finetune_run.csv", rec.to_csv(ctx.args.timing))
    f = rec.final
    ctx.json(
        "finetune.json",
        {
            "seed": ctx.seed,
            "train": rec.config.to_dict(),
            "final": {
                "train_loss": f.train_loss,
                "test_loss": f.test_loss,
                "gap": f.test_loss - f.train_loss,
                "train_acc": f.train_acc,
                "test_acc": f.test_acc,
                "ece": f.ece,
            },
        },
    )
    ctx.log(f"finetune: train acc {f.train_acc:.4f}, test acc {f.test_acc:.4f}, gap {f.test_loss - f.train_loss:.4f}")


def cmd_eval(ctx):
    cfg, args = ctx.cfg, ctx.args
    model, _ = load_checkpoint(args.checkpoint)
    check_widths(model, cfg.widths)
    test = build_datasets(cfg, ctx.seed)["finetune-test"]
    p = cfg.train.p if args.p is None else args.p
    N = cfg.train.test_instances if args.N is None else args.N
    ensemble = cfg.eval.ensemble and not args.single
    result = evaluate(model, test.features, test.labels, p, N, ctx.seed, slot=2,
                      domain=cfg.eval.domain, ensemble=ensemble, bins=cfg.eval.bins)
    ctx.json("eval.json", result.to_dict(p=p, N=N, ensemble=ensemble, domain=cfg.eval.domain, seed=ctx.seed))
    rows = [(i, b.lo, b.hi, b.count, b.mean_confidence, b.accuracy) for i, b in enumerate(result.calibration.rows)]
    ctx.text("calibration.csv", reporting.csv_text(CALIBRATION_COLUMNS, rows))
    ctx.log(f"eval: loss {result.loss:.4f}, accuracy {result.accuracy:.4f}, ece {result.calibration.ece:.4f}")


def _sweep_chart(header, rows):
    by_seed = {}
    for r in rows:
        if int(r["diverged"]):
            continue
        by_seed.setdefault(r["seed"], []).append((float(r["p"]), float(r["gap"])))
    series = {f"seed {s}": tuple(zip(*sorted(v))) for s, v in sorted(by_seed.items(), key=lambda kv: int(kv[0]))}
    ps = sorted({float(r["p"]) for r in rows if not int(r["diverged"])})
    mean = [float(np.mean([float(r["gap"]) for r in rows if float(r["p"]) == p and not int(r["diverged"])])) for p in ps]
    series["mean"] = (ps, mean)
    return reporting.line_chart(series, "generalization gap vs dropout rate", "p", "test loss - train loss")


def _run_chart(header, rows):
    ep = [int(r["epoch"]) for r in rows]
    series = {
        "train_loss": (ep, [float(r["train_loss"]) for r in rows]),
        "test_loss": (ep, [float(r["test_loss"]) for r in rows]),
    }
    return reporting.line_chart(series, "loss per epoch", "epoch", "cross-entropy")


def cmd_sweep(ctx):
    from .theory.sweep import BOUND_COLUMNS, SWEEP_COLUMNS, gap_sweep

    cfg, args = ctx.cfg, ctx.args
    if args.epochs is not None:
        cfg.train = replace(cfg.train, epochs=args.epochs).validate()
    grid = None
    if args.p_grid:
        try:
            grid = [float(v) for v in args.p_grid.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"--p-grid must be comma-separated numbers, got {args.p_grid!r}") from None
        cfg.sweep = replace(cfg.sweep, p_grid=grid)
    if args.seeds is not None:
        cfg.sweep = replace(cfg.sweep, seeds=args.seeds)
    cfg.validate()

    cells = ctx.out / "cells"

    def sink(row):
        name = f"p={row.p!r}_seed={row.seed}.csv"
        reporting.write_text(cells / name, reporting.csv_text(SWEEP_COLUMNS, [row.as_tuple()]))

    record = gap_sweep(cfg, ctx.seed, cell_sink=sink)
    # merge the per-cell files in sorted key order
    merged = []
    for p in record.p_grid:
        for s in record.seeds:
            _, rows = reporting.read_csv(cells / f"p={p!r}_seed={s}.csv")
            merged.extend([r[c] for c in SWEEP_COLUMNS] for r in rows)
    text = reporting.csv_text(SWEEP_COLUMNS, merged)
    ctx.text("sweep.csv", text)
    ctx.text("sweep_bound.csv", reporting.csv_text(BOUND_COLUMNS, record.bound_rows()))
    ctx.json("sweep.json", {"seed": ctx.seed, **record.to_dict()})
    header, rows = reporting.read_csv(ctx.out / "sweep.csv")
    ctx.text("sweep_gap.svg", _sweep_chart(header, rows))
    for s in record.summary():
        ctx.log(f"p={s['p']:.2f}: mean gap {s['mean_gap']:.4f}, test acc {s['mean_test_acc']:.4f}, bound {s['bound']:.4f}")


def cmd_jensen(ctx):
    from .theory.checks import jensen_check, random_jensen_check

    cfg, args = ctx.cfg, ctx.args
    jc = cfg.jensen
    trials = jc.trials if args.trials is None else args.trials
    N = jc.N if args.N is None else args.N
    reports = []
    for domain in jc.domains:
        if args.checkpoint:
            model, _ = load_checkpoint(args.checkpoint)
            test = build_datasets(cfg, ctx.seed)["finetune-test"]
            rep = jensen_check(model, test.features, test.labels, jc.p, N, trials, ctx.seed, domain, jc.batch_size)
        else:
            rep = random_jensen_check(jc.widths, jc.rank, jc.p, N, trials, ctx.seed, domain, jc.batch_size)
        reports.append(rep)
    rows = [(r.domain, r.N, i, a, b, g) for r in reports for (i, a, b, g) in r.rows()]
    ctx.text("jensen.csv", reporting.csv_text(JENSEN_COLUMNS, rows))
    ctx.json("jensen.json", {"seed": ctx.seed, "reports": [r.to_dict() for r in reports]})
    for r in reports:
        ctx.log(f"jensen {r.domain}: {r.violations} violations in {trials} trials, min gap {r.gap.min():.3e}")


def cmd_stability(ctx):
    from .theory.stability import LogisticProblem, QuadraticProblem, stability_probe

    pr = ctx.cfg.probe
    kind = ctx.args.problem or pr.problem
    if kind == "logistic":
        problem = LogisticProblem.random(pr.n, pr.dim, pr.K, ctx.seed, pr.noise)
    elif kind == "quadratic":
        problem = QuadraticProblem(rngmod.derive(ctx.seed, rngmod.PROBE, 1).normal(size=pr.n))
    else:
        raise ConfigError(f"probe problem must be 'logistic' or 'quadratic', got {kind!r}")
    reports = [stability_probe(problem, lam, pr.p, pr.tol) for lam in pr.lam]
    rows = [(r.lam, i, v) for r in reports for (i, v) in r.rows()]
    ctx.text("stability.csv", reporting.csv_text(STABILITY_COLUMNS, rows))
    ctx.json("stability.json", {"seed": ctx.seed, "problem": kind, "reports": [r.to_dict() for r in reports]})
    for r in reports:
        ctx.log(f"lam={r.lam}: max perturbation {r.max_observed:.3e} <= bound {r.beta_bound:.3e}: {r.bound_satisfied}")


def cmd_mcnorm(ctx):
    from .theory.checks import entry_sparsity_check, mc_masked_norm_check, random_lora_mlp

    mc, args = ctx.cfg.mcnorm, ctx.args
    p = mc.p if args.p is None else args.p
    draws = mc.draws if args.draws is None else args.draws
    rep = mc_masked_norm_check(mc.delta, p, draws, ctx.seed)
    layer = random_lora_mlp([16, 16], ctx.cfg.model.rank, ctx.seed).layers[0]
    sparsity = entry_sparsity_check(layer, p, min(draws, 100_000), ctx.seed)
    row = [(rep.p, rep.draws, rep.dim, rep.mc_estimate, rep.closed_form, rep.rel_error, rep.std_error)]
    ctx.text("mcnorm.csv", reporting.csv_text(MCNORM_COLUMNS, row))
    ctx.json("mcnorm.json", {"seed": ctx.seed, "delta": list(mc.delta), **rep.to_dict(),
                             "entry_sparsity": sparsity.to_dict()})
    ctx.log(f"mcnorm: estimate {rep.mc_estimate:.6g}, closed form {rep.closed_form:.6g}, rel error {rep.rel_error:.2e}")


def cmd_plot(ctx):
    path = ctx.args.input
    if not path.is_file():
        raise ConfigError(f"input file not found: {path}")
    header, rows = reporting.read_csv(path)
    if "p" in header and "gap" in header:
        svg = _sweep_chart(header, rows)
    elif header[: len(RUN_COLUMNS)] == list(RUN_COLUMNS):
        svg = _run_chart(header, rows)
    else:
        raise ConfigError(f"{path} is neither a run nor a sweep CSV (columns {header})")
    ctx.text(path.stem + ".svg", svg)


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "jensen-check": cmd_jensen,
    "stability-probe": cmd_stability,
    "mcnorm-check": cmd_mcnorm,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ctx = _Ctx(args)
        COMMANDS[args.command](ctx)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, LabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
