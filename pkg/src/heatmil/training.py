"""Training loop with early stopping, and hyperparameter grid search."""
from __future__ import annotations

import itertools
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .bags import BagOfPatches
from .errors import ConfigError, TrainingError, UndefinedMetricError
from .losses import LossConfig, loss_and_grad
from .metrics import auc, binarize_heatmap, dice
from .model import ModelConfig, ModelParams, backward_bag, forward_bag
from .optim import AdamW

SELECTION_METRICS = ("auto", "validation_dice", "validation_auc")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 50
    patience: int = 8
    selection_metric: str = "auto"
    accumulate: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ConfigError("patience must be in [0, max_epochs]")
        if self.selection_metric not in SELECTION_METRICS:
            raise ConfigError(f"selection_metric must be one of {SELECTION_METRICS}")
        if self.accumulate < 1:
            raise ConfigError("accumulate must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict]
    best_epoch: int
    best_metric: float
    metric_name: str


def bag_loss_and_grad(bag: BagOfPatches, params: ModelParams, loss_cfg: LossConfig, config: ModelConfig | None = None):
    """Loss of one bag and the gradient of every parameter (not accumulated)."""
    pred, cache = forward_bag(bag, params, config, return_cache=True)
    loss, d_y = loss_and_grad(pred.y_hat, bag.labels, loss_cfg)
    grads, _ = backward_bag(cache, d_y)
    return loss, grads


def choose_metric(bags, requested: str) -> str:
    if requested != "auto":
        return requested
    has_masks = any(b.mask is not None and b.labels.any() for b in bags)
    return "validation_dice" if has_masks else "validation_auc"


def validation_metric(params: ModelParams, bags, metric: str) -> float:
    """Mean Dice over (bag, label) pairs with a positive ground-truth mask, or mean per-label AUC."""
    cfg = params.config
    preds = [forward_bag(b, params) for b in bags]
    if metric == "validation_dice":
        scores = []
        for b, p in zip(bags, preds):
            if b.mask is None:
                continue
            for c in range(cfg.num_labels):
                if b.labels[c] and b.mask[c].any():
                    pm = binarize_heatmap(p.full_heatmap[c], "otsu", p.coverage, cfg.otsu_bins)
                    scores.append(dice(pm, b.mask[c]))
        if not scores:
            raise UndefinedMetricError("no validation bag carries a positive mask")
        return float(np.mean(scores))
    y = np.array([b.labels for b in bags])
    s = np.array([p.y_hat for p in preds])
    aucs = []
    for c in range(cfg.num_labels):
        try:
            aucs.append(auc(s[:, c], y[:, c]))
        except UndefinedMetricError:
            continue
    if not aucs:
        raise UndefinedMetricError("no label has both classes in the validation split")
    return float(np.mean(aucs))


def train(params: ModelParams, train_bags, val_bags, train_cfg: TrainConfig, loss_cfg: LossConfig,
          log_path=None) -> TrainResult:
    """Fit ``params`` (copied, not mutated) with AdamW and early stopping.

    Epoch 0 records the validation metric of the initial weights.  After
    every epoch the best checkpoint so far is kept; training stops once
    ``patience`` epochs pass without improvement or at ``max_epochs``.
    """
    if not train_bags or not val_bags:
        raise ConfigError("training and validation splits must be non-empty")
    params = params.copy()
    metric = choose_metric(val_bags, train_cfg.selection_metric)
    opt = AdamW(train_cfg.learning_rate, train_cfg.weight_decay, train_cfg.beta1, train_cfg.beta2,
                train_cfg.adam_eps)
    rng = np.random.default_rng(train_cfg.seed)
    log = open(log_path, "w") if log_path else None
    history = []

    def record(epoch, train_loss, value, selected, t0):
        rec = {"epoch": epoch, "train_loss": train_loss, "val_metric": value,
               "wall_time_ms": round((time.perf_counter() - t0) * 1000, 3), "selected": selected}
        history.append(rec)
        if log:
            log.write(json.dumps(rec) + "\n")
            log.flush()

    try:
        t0 = time.perf_counter()
        best = validation_metric(params, val_bags, metric)
        best_params, best_epoch = params.copy(), 0
        record(0, None, best, True, t0)
        stale = 0
        for epoch in range(1, train_cfg.max_epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(train_bags))
            losses = []
            params.zero_grad()
            pending = 0
            for step, i in enumerate(order, start=1):
                bag = train_bags[i]
                loss, grads = bag_loss_and_grad(bag, params, loss_cfg)
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite loss on bag {bag.bag_id!r} in epoch {epoch}, step {step}")
                losses.append(loss)
                params.accumulate(grads, 1.0 / train_cfg.accumulate)
                pending += 1
                if pending == train_cfg.accumulate or step == len(order):
                    opt.step(params)
                    params.zero_grad()
                    pending = 0
            value = validation_metric(params, val_bags, metric)
            improved = value > best
            if improved:
                best, best_params, best_epoch, stale = value, params.copy(), epoch, 0
            else:
                stale += 1
            record(epoch, float(np.mean(losses)), value, improved, t0)
            if stale >= train_cfg.patience:
                break
    finally:
        if log:
            log.close()
    return TrainResult(best_params, history, best_epoch, best, metric)


# ---------------------------------------------------------------- grid search


@dataclass
class GridSpec:
    alphas: tuple = (4.0, 6.0, 8.0, 10.0)
    learning_rates: tuple = (5e-5, 1e-4, 3e-4)
    lambdas: tuple = (0.0, 0.01, 0.05)

    def __post_init__(self):
        if not (self.alphas and self.learning_rates and self.lambdas):
            raise ConfigError("grid axes must be non-empty")

    def points(self):
        return list(itertools.product(self.alphas, self.learning_rates, self.lambdas))


@dataclass
class GridResult:
    best: dict
    leaderboard: list[dict] = field(default_factory=list)


def _train_point(args):
    model_cfg, train_cfg, loss_cfg, train_bags, val_bags, init_seed = args
    params = ModelParams.init(model_cfg, init_seed)
    res = train(params, train_bags, val_bags, train_cfg, loss_cfg)
    return res.best_metric, res.best_epoch, res.metric_name


def grid_search(spec: GridSpec, model_cfg: ModelConfig, train_cfg: TrainConfig, loss_cfg: LossConfig,
                train_bags, val_bags, budget: int | None = None, jobs: int = 1) -> GridResult:
    """Train one model per grid point and rank by the validation metric.

    Ties go to higher alpha, then lower learning rate, then lower lambda.
    ``budget`` caps the epochs of every point.
    """
    tcfg = replace(train_cfg, max_epochs=budget, patience=min(train_cfg.patience, budget)) if budget else train_cfg
    tasks, points = [], spec.points()
    for alpha, lr, lam in points:
        tasks.append((replace(model_cfg, alpha=alpha), replace(tcfg, learning_rate=lr),
                      replace(loss_cfg, lambda_sd=lam), train_bags, val_bags, train_cfg.seed))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_train_point, tasks))
    else:
        results = [_train_point(t) for t in tasks]
    board = [
        {"alpha": a, "learning_rate": lr, "lambda_sd": lam, "metric": m, "metric_name": name, "best_epoch": ep}
        for (a, lr, lam), (m, ep, name) in zip(points, results)
    ]
    board.sort(key=lambda r: (-r["metric"], -r["alpha"], r["learning_rate"], r["lambda_sd"],
                              json.dumps(r, sort_keys=True)))
    for rank, row in enumerate(board, start=1):
        row["rank"] = rank
    return GridResult(board[0], board)
