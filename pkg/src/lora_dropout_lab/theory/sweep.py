"""Generalization gap as a function of the dropout rate.

Every ``(p, seed)`` cell fine-tunes a fresh adapter on top of the
pretrained model for that seed. Cells are independent and run in
parallel; results are merged in sorted ``(p, seed)`` order so the output
does not depend on scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..config import ExperimentConfig
from ..errors import DivergenceError
from ..parallel import parallel_map
from ..pipeline import build_datasets, finetune, per_sample_loss, pretrain
from ..ensemble import evaluate
from .bounds import generalization_bound
from .stability import LogisticProblem, stability_probe

SWEEP_COLUMNS = ("p", "seed", "train_loss", "test_loss", "gap", "train_acc", "test_acc", "ece", "diverged")
BOUND_COLUMNS = ("p", "bound")


@dataclass
class SweepRow:
    p: float
    seed: int
    train_loss: float
    test_loss: float
    train_acc: float
    test_acc: float
    ece: float
    diverged: bool
    single_acc: float = math.nan
    max_sample_loss: float = math.nan
    note: str = ""

    @property
    def gap(self) -> float:
        return self.test_loss - self.train_loss

    def as_tuple(self):
        return (
            self.p,
            self.seed,
            self.train_loss,
            self.test_loss,
            self.gap,
            self.train_acc,
            self.test_acc,
            self.ece,
            int(self.diverged),
        )


@dataclass
class BoundConstants:
    C: float
    eta: float
    lambda_min: float
    lam: float
    n: int
    delta: float
    source: dict = field(default_factory=dict)

    def bound(self, p: float) -> float:
        return generalization_bound(self.C, self.eta, self.lambda_min, self.lam, p, self.n, self.delta)

    def to_dict(self) -> dict:
        return {
            "C": self.C,
            "eta": self.eta,
            "lambda_min": self.lambda_min,
            "lam": self.lam,
            "n": self.n,
            "delta": self.delta,
            "source": self.source,
        }


@dataclass
class GapSweepRecord:
    p_grid: list
    seeds: list
    rows: list
    constants: BoundConstants

    def cell(self, p: float, seed: int) -> SweepRow:
        for r in self.rows:
            if r.p == p and r.seed == seed:
                return r
        raise KeyError((p, seed))

    def valid(self, p: float) -> list:
        return [r for r in self.rows if r.p == p and not r.diverged]

    def mean(self, p: float, name: str) -> float:
        vals = [getattr(r, name) for r in self.valid(p)]
        return float(np.mean(vals)) if vals else math.nan

    def bound_rows(self):
        return [(p, self.constants.bound(p)) for p in self.p_grid]

    def summary(self) -> list[dict]:
        out = []
        for p in self.p_grid:
            out.append(
                {
                    "p": p,
                    "runs": len(self.valid(p)),
                    "diverged": sum(1 for r in self.rows if r.p == p and r.diverged),
                    "mean_gap": self.mean(p, "gap"),
                    "mean_train_loss": self.mean(p, "train_loss"),
                    "mean_test_loss": self.mean(p, "test_loss"),
                    "mean_train_acc": self.mean(p, "train_acc"),
                    "mean_test_acc": self.mean(p, "test_acc"),
                    "mean_single_acc": self.mean(p, "single_acc"),
                    "mean_ece": self.mean(p, "ece"),
                    "bound": self.constants.bound(p),
                }
            )
        return out

    def to_dict(self) -> dict:
        return {
            "p_grid": self.p_grid,
            "seeds": self.seeds,
            "constants": self.constants.to_dict(),
            "summary": self.summary(),
            "diverged_cells": [
                {"p": r.p, "seed": r.seed, "note": r.note} for r in self.rows if r.diverged
            ],
        }


def sweep_seeds(master: int, count: int) -> list[int]:
    return [int(master) + k for k in range(count)]


def _run_cell(cfg, p, seed, pretrained, data) -> SweepRow:
    try:
        model, rec = finetune(cfg, pretrained, seed, data, p=p)
    except DivergenceError as exc:
        nan = math.nan
        return SweepRow(p, seed, nan, nan, nan, nan, nan, True, note=str(exc))
    f = rec.final
    test = data["finetune-test"]
    ens = evaluate(model, test.features, test.labels, rec.config.eval_rate, rec.config.test_instances,
                   seed, slot=2, domain=cfg.eval.domain, ensemble=True, bins=cfg.eval.bins)
    single = evaluate(model, test.features, test.labels, 0.0, 1, seed, slot=2,
                      domain=cfg.eval.domain, ensemble=False, bins=cfg.eval.bins)
    worst = float(per_sample_loss(ens, test.labels).max())
    return SweepRow(p, seed, f.train_loss, f.test_loss, f.train_acc, f.test_acc, f.ece, False,
                    single.accuracy, worst)


def probe_constants(cfg: ExperimentConfig, seed: int, threads=None) -> tuple[float, float, dict]:
    """``eta`` and ``Lambda_min`` from a stability probe on the configured convex instance."""
    pr = cfg.probe
    problem = LogisticProblem.random(pr.n, pr.dim, pr.K, seed, pr.noise)
    report = stability_probe(problem, cfg.sweep.lam, pr.p, pr.tol, threads)
    return report.eta, report.lambda_min, {"probe": report.to_dict()}


def gap_sweep(
    cfg: ExperimentConfig,
    seed: int,
    p_grid=None,
    n_seeds: int | None = None,
    threads=None,
    cell_sink=None,
) -> GapSweepRecord:
    """Fine-tune every ``(p, seed)`` cell and tabulate gaps next to the bound term.

    Parameters
    ----------
    cfg : ExperimentConfig
    seed : int
        Master seed; cell seeds are ``seed, seed + 1, ...``.
    p_grid, n_seeds : optional
        Override the sweep section of ``cfg``.
    cell_sink : callable, optional
        Called with each finished :class:`SweepRow` (e.g. to persist it)
        from the worker that produced it.
    """
    sw = cfg.sweep
    grid = sorted(float(p) for p in (sw.p_grid if p_grid is None else p_grid))
    seeds = sweep_seeds(seed, sw.seeds if n_seeds is None else n_seeds)
    data = {s: build_datasets(cfg, s) for s in seeds}
    pretrained = dict(zip(seeds, parallel_map(lambda s: pretrain(cfg, s, data[s])[0], seeds, threads)))
    cells = [(p, s) for p in grid for s in seeds]

    def work(cell):
        p, s = cell
        row = _run_cell(cfg, p, s, pretrained[s], data[s])
        if cell_sink is not None:
            cell_sink(row)
        return row

    rows = parallel_map(work, cells, threads)
    rows.sort(key=lambda r: (r.p, r.seed))

    source = {}
    if sw.C is None:
        finite = [r.max_sample_loss for r in rows if not r.diverged]
        C = float(max(finite)) if finite else 1.0
        source["C"] = "max per-sample test loss over cells"
    else:
        C = float(sw.C)
        source["C"] = "config"
    if sw.eta is None or sw.lambda_min is None:
        eta, lmin, extra = probe_constants(cfg, seed, threads)
        eta = float(sw.eta) if sw.eta is not None else eta
        lmin = float(sw.lambda_min) if sw.lambda_min is not None else lmin
        source.update(eta="probe" if sw.eta is None else "config",
                      lambda_min="probe" if sw.lambda_min is None else "config", **extra)
    else:
        eta, lmin = float(sw.eta), float(sw.lambda_min)
        source.update(eta="config", lambda_min="config")
    consts = BoundConstants(C, eta, lmin, sw.lam, cfg.data.n_train, sw.delta, source)
    return GapSweepRecord(grid, seeds, rows, consts)
