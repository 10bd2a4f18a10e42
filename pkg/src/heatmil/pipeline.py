"""Composite runs shared by the command line and the benchmark tests:
fit a model from a run config, and the four-row component ablation."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import RunConfig
from .errors import ConfigError
from .evaluation import EvalOptions, EvalReport, evaluate_dataset
from .model import ModelParams
from .training import TrainResult, train


def bind_to_data(cfg: RunConfig, bags) -> RunConfig:
    """Set the input width and label count from the data."""
    first = bags[0]
    return replace(cfg, model=replace(cfg.model, embed_dim=first.embed_dim, num_labels=first.num_labels,
                                      proj_dim=min(cfg.model.proj_dim, first.embed_dim)))


def fit(cfg: RunConfig, train_bags, val_bags, log_path=None) -> TrainResult:
    """Initialise from ``cfg.train.seed`` and train.  ``cfg`` must already be bound to the data."""
    if cfg.model.embed_dim != train_bags[0].embed_dim or cfg.model.num_labels != train_bags[0].num_labels:
        raise ConfigError("model config does not match the data; bind it first")
    params = ModelParams.init(cfg.model, seed=cfg.train.seed)
    return train(params, train_bags, val_bags, cfg.train, cfg.loss, log_path=log_path)


@dataclass(frozen=True)
class AblationRow:
    name: str
    context: bool
    smoothmax: bool
    regularizer: bool


ABLATION_ROWS = (
    AblationRow("none", False, False, False),
    AblationRow("CS", True, False, False),
    AblationRow("CS+SM", True, True, False),
    AblationRow("CS+SM+Rg", True, True, True),
)

REG_LAMBDA = 0.01
MULTI_LABEL_SMOOTHING = 0.1


def ablation_config(cfg: RunConfig, row: AblationRow) -> RunConfig:
    """Switch context suppression, pooling and regularisation for one row.

    Without SmoothMax the model pools with a hard max.  The regulariser is
    spectral decoupling, plus label smoothing when there are several labels.
    """
    model = replace(cfg.model, context_enabled=row.context,
                    pooling_mode="smoothmax" if row.smoothmax else "max")
    if row.regularizer:
        smoothing = MULTI_LABEL_SMOOTHING if cfg.model.num_labels > 1 else 0.0
        loss = replace(cfg.loss, lambda_sd=REG_LAMBDA, label_smoothing=smoothing)
    else:
        loss = replace(cfg.loss, lambda_sd=0.0, label_smoothing=0.0)
    return replace(cfg, model=model, loss=loss)


def row_metrics(report: EvalReport) -> dict:
    aucs = [a for a in report.data["auc"] if a is not None]
    return {"auc": float(np.mean(aucs)) if aucs else None, "dice": report.mean_dice}


def run_ablation(cfg: RunConfig, train_bags, val_bags, test_bags, seeds=(0,), jobs: int = 1) -> list[dict]:
    """Train and evaluate every ablation row for each seed.

    Returns one dict per row with per-seed and seed-averaged AUC and Dice.
    """
    cfg = bind_to_data(cfg, train_bags)
    out = []
    for row in ABLATION_ROWS:
        row_cfg = ablation_config(cfg, row)
        runs = []
        for seed in seeds:
            seeded = replace(row_cfg, train=replace(row_cfg.train, seed=int(seed)))
            res = fit(seeded, train_bags, val_bags)
            report = evaluate_dataset(res.params, test_bags, EvalOptions(), jobs=jobs)
            runs.append({"seed": int(seed), "best_epoch": res.best_epoch, **row_metrics(report)})
        out.append({
            "row": row.name, "context": row.context, "smoothmax": row.smoothmax, "regularizer": row.regularizer,
            "auc": _mean([r["auc"] for r in runs]), "dice": _mean([r["dice"] for r in runs]),
            "runs": runs,
        })
    return out


def _mean(values):
    v = [x for x in values if x is not None]
    return float(np.mean(v)) if v else None
