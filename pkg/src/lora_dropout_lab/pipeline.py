"""Generate -> pretrain -> fine-tune -> evaluate, driven by an :class:`ExperimentConfig`.

Everything random descends from one integer seed: datasets, initial
weights, batch order and masks each draw from their own derived stream.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import rng as rngmod
from .checkpoint import check_widths
from .config import ExperimentConfig
from .data import SPLITS, Dataset, generate_dataset
from .ensemble import Evaluation, evaluate
from .model import Model, mlp, with_adapters
from .training import RunRecord, TrainConfig, train

# INIT keys below 1000 are reserved for per-layer adapter initialisation
PRETRAIN_INIT_KEY = 1000


def build_datasets(cfg: ExperimentConfig, seed: int) -> dict[str, Dataset]:
    return {split: generate_dataset(cfg.data.spec(split, seed)) for split in SPLITS}


def pretrain_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    s = cfg.pretrain
    return TrainConfig(
        epochs=s.epochs,
        batch_size=s.batch_size,
        lr=s.lr,
        optimizer=s.optimizer,
        mode="plain",
        p=0.0,
        N=1,
        seed=seed,
    )


def pretrain(cfg: ExperimentConfig, seed: int, data: dict | None = None) -> tuple[Model, RunRecord]:
    """Train a plain dense MLP on the pretraining split.

    The pretraining split doubles as the evaluation set, since only the
    resulting weights matter downstream.
    """
    data = data or build_datasets(cfg, seed)
    model = mlp(cfg.widths, rngmod.derive(seed, rngmod.INIT, PRETRAIN_INIT_KEY))
    record = train(model, data["pretrain"], data["pretrain"], pretrain_config(cfg, seed))
    return model, record


def finetune_config(cfg: ExperimentConfig, seed: int, **overrides) -> TrainConfig:
    tc = replace(
        cfg.train,
        seed=seed,
        eval_domain=cfg.eval.domain,
        eval_ensemble=cfg.eval.ensemble,
        ece_bins=cfg.eval.bins,
    )
    return replace(tc, **overrides).validate()


def finetune(
    cfg: ExperimentConfig,
    pretrained: Model,
    seed: int,
    data: dict | None = None,
    **overrides,
) -> tuple[Model, RunRecord]:
    """Wrap ``pretrained`` in fresh adapters and fine-tune on the small shifted split.

    ``overrides`` replace fields of the training section (e.g. ``p``).
    """
    check_widths(pretrained, cfg.widths)
    data = data or build_datasets(cfg, seed)
    m = cfg.model
    model = with_adapters(pretrained, m.adapter, m.rank, seed, scale=m.scale, train_head=m.train_head)
    tc = finetune_config(cfg, seed, **overrides)
    record = train(model, data["finetune-train"], data["finetune-test"], tc)
    return model, record


def evaluate_model(
    cfg: ExperimentConfig,
    model: Model,
    dataset: Dataset,
    seed: int,
    ensemble: bool | None = None,
    p: float | None = None,
    N: int | None = None,
) -> Evaluation:
    """Evaluate with the configured test-time ensemble unless told otherwise."""
    tc = cfg.train
    rate = tc.eval_rate if p is None else p
    return evaluate(
        model,
        dataset.features,
        dataset.labels,
        p=rate,
        N=tc.test_instances if N is None else N,
        seed=seed,
        slot=2,
        domain=cfg.eval.domain,
        ensemble=cfg.eval.ensemble if ensemble is None else ensemble,
        bins=cfg.eval.bins,
    )


def per_sample_loss(evaluation: Evaluation, labels) -> np.ndarray:
    y = np.asarray(labels)
    probs = evaluation.probabilities[np.arange(len(y)), y]
    return -np.log(np.maximum(probs, np.finfo(np.float64).tiny))


@dataclass
class PipelineResult:
    pretrained: Model
    pretrain_record: RunRecord
    model: Model
    record: RunRecord
    ensemble_eval: Evaluation
    single_eval: Evaluation


def run_pipeline(cfg: ExperimentConfig, seed: int, **overrides) -> PipelineResult:
    """End-to-end run for one seed; ``overrides`` go to the fine-tune config."""
    data = build_datasets(cfg, seed)
    pre, pre_rec = pretrain(cfg, seed, data)
    model, rec = finetune(cfg, pre, seed, data, **overrides)
    test = data["finetune-test"]
    tc = finetune_config(cfg, seed, **overrides)
    ens = evaluate(model, test.features, test.labels, tc.eval_rate, tc.test_instances, seed, slot=2,
                   domain=cfg.eval.domain, ensemble=True, bins=cfg.eval.bins)
    single = evaluate(model, test.features, test.labels, 0.0, 1, seed, slot=2,
                      domain=cfg.eval.domain, ensemble=False, bins=cfg.eval.bins)
    return PipelineResult(pre, pre_rec, model, rec, ens, single)
