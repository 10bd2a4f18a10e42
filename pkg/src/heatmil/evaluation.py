"""Dataset-level evaluation and the JSON/CSV report format."""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from .errors import UndefinedMetricError
from .formats import atomic_write
from .metrics import (
    Stratum,
    assign_stratum,
    auc,
    binarize_heatmap,
    dice,
    lesion_dice,
    permutation_test,
    stratified_dice,
    summarize,
)
from .model import ModelParams, forward_bag
from .saliency import grad_cam_saliency
from .synthetic import SynthConfig

SCHEMA_VERSION = 1
# scaled analogue of the <1e6 / 1e6-1e7 / >1e7 pixel-area bins, sized for the default 56x56 map
DEFAULT_STRATA = SynthConfig().strata()

_summary = {
    "type": "object",
    "required": ["count", "mean", "std"],
    "properties": {"count": {"type": "integer", "minimum": 1},
                   "mean": {"type": "number", "minimum": 0, "maximum": 1},
                   "std": {"type": "number", "minimum": 0}},
}
_opt_summary = {"anyOf": [{"type": "null"}, _summary]}
_pvalue = {"anyOf": [{"type": "null"}, {"type": "number", "exclusiveMinimum": 0, "maximum": 1}]}
_unit = {"type": "number", "minimum": 0, "maximum": 1}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "heatmil evaluation report",
    "type": "object",
    "required": ["schema_version", "num_labels", "saliency", "binarization", "bags", "auc", "dice",
                 "strata_bounds", "strata", "lesions", "permutation"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "num_labels": {"type": "integer", "minimum": 1},
        "saliency": {"enum": ["builtin", "gradcam"]},
        "binarization": {"anyOf": [{"const": "otsu"}, {"type": "number"}]},
        "bags": {"type": "array", "items": {
            "type": "object",
            "required": ["bag_id", "labels", "y_hat", "dice"],
            "additionalProperties": False,
            "properties": {
                "bag_id": {"type": "string"},
                "labels": {"type": "array", "items": {"enum": [0, 1]}},
                "y_hat": {"type": "array", "items": _unit},
                "dice": {"anyOf": [{"type": "null"},
                                   {"type": "array", "items": {"anyOf": [{"type": "null"}, _unit]}}]},
            }}},
        "auc": {"type": "array", "items": {"anyOf": [{"type": "null"}, _unit]}},
        "dice": {"anyOf": [{"type": "null"}, {
            "type": "object", "required": ["overall", "per_label"], "additionalProperties": False,
            "properties": {"overall": _opt_summary, "per_label": {"type": "array", "items": _opt_summary}}}]},
        "strata_bounds": {"type": "array", "items": {
            "type": "object", "required": ["name", "lower", "upper"],
            "properties": {"name": {"type": "string"}, "lower": {"type": "number"},
                           "upper": {"type": ["number", "null"]}}}},
        "strata": {"type": "object", "additionalProperties": _summary},
        "lesions": {"type": "array", "items": {
            "type": "object", "required": ["bag_id", "label", "index", "area", "stratum", "dice"],
            "properties": {"bag_id": {"type": "string"}, "label": {"type": "integer"},
                           "index": {"type": "integer"}, "area": {"type": "integer", "minimum": 1},
                           "stratum": {"type": "string"}, "dice": _unit}}},
        "permutation": {"anyOf": [{"type": "null"}, {
            "type": "object", "required": ["iterations", "seed", "overall", "strata"],
            "properties": {"iterations": {"type": "integer", "minimum": 1}, "seed": {"type": "integer"},
                           "overall": _pvalue,
                           "strata": {"type": "object", "additionalProperties": _pvalue}}}]},
    },
}


@dataclass
class EvalOptions:
    binarization: str | float = "otsu"
    strata: list[Stratum] = field(default_factory=lambda: list(DEFAULT_STRATA))
    saliency: str = "builtin"
    permutation_iterations: int = 10_000
    seed: int = 0


@dataclass
class EvalReport:
    data: dict

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        data = json.loads(text)
        validate_report(data)
        return cls(data)

    def write(self, path):
        atomic_write(path, self.to_json().encode())

    @classmethod
    def read(cls, path) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def write_csv(self, path):
        c = self.data["num_labels"]
        header = ["bag_id"] + [f"label_{i}" for i in range(c)] + [f"y_hat_{i}" for i in range(c)] + \
                 [f"dice_{i}" for i in range(c)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for b in self.data["bags"]:
            d = b["dice"] or [None] * c
            w.writerow([b["bag_id"], *b["labels"], *[repr(v) for v in b["y_hat"]],
                        *["" if v is None else repr(v) for v in d]])
        atomic_write(path, buf.getvalue().encode())

    @property
    def mean_dice(self) -> float | None:
        d = self.data["dice"]
        return None if d is None or d["overall"] is None else d["overall"]["mean"]


def validate_report(data: dict):
    jsonschema.validate(data, REPORT_SCHEMA)


def _strata_json(strata):
    return [{"name": s.name, "lower": s.lower, "upper": None if math.isinf(s.upper) else s.upper} for s in strata]


def strata_from_json(items) -> list[Stratum]:
    return [Stratum(i["name"], i["lower"], math.inf if i["upper"] is None else i["upper"]) for i in items]


def predict_maps(bag, params: ModelParams, saliency: str):
    pred = forward_bag(bag, params)
    if saliency == "builtin":
        return pred, pred.full_heatmap, pred.coverage
    if saliency == "gradcam":
        maps, coverage, _ = grad_cam_saliency(bag, params)
        return pred, maps, coverage
    raise ValueError(f"unknown saliency source {saliency!r}")


def _score_bag(args):
    bag, params, opts = args
    cfg = params.config
    if bag.mask is None:
        pred = forward_bag(bag, params)
        return {"bag_id": bag.bag_id, "labels": [int(v) for v in bag.labels],
                "y_hat": [float(v) for v in pred.y_hat], "dice": None}, []
    pred, maps, coverage = predict_maps(bag, params, opts.saliency)
    bag_dice, lesions = [], []
    for c in range(cfg.num_labels):
        gt = bag.mask[c]
        if not (bag.labels[c] and gt.any()):
            bag_dice.append(None)
            continue
        pm = binarize_heatmap(maps[c], opts.binarization, coverage, cfg.otsu_bins)
        bag_dice.append(dice(pm, gt))
        for rec in lesion_dice(pm, gt):
            lesions.append({"bag_id": bag.bag_id, "label": c, "index": rec["index"], "area": rec["area"],
                            "stratum": assign_stratum(rec["area"], opts.strata), "dice": rec["dice"]})
    row = {"bag_id": bag.bag_id, "labels": [int(v) for v in bag.labels],
           "y_hat": [float(v) for v in pred.y_hat], "dice": bag_dice}
    return row, lesions


def evaluate_dataset(params: ModelParams, bags, options: EvalOptions | None = None,
                     comparator: EvalReport | None = None, jobs: int = 1) -> EvalReport:
    """Score every bag and aggregate AUC, Dice, per-lesion strata and,
    when a comparator report is given, one-tailed permutation p-values for
    "this report beats the comparator".

    Dice is averaged over (bag, label) pairs whose label is positive and
    whose ground-truth mask is non-empty.  ``jobs > 1`` scores bags in
    worker processes; the result is identical.
    """
    opts = options or EvalOptions()
    cfg = params.config
    bags = sorted(bags, key=lambda b: b.bag_id)
    has_masks = any(b.mask is not None for b in bags)
    tasks = [(b, params, opts) for b in bags]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            scored = list(ex.map(_score_bag, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        scored = [_score_bag(t) for t in tasks]
    rows = [r for r, _ in scored]
    lesions = [rec for _, recs in scored for rec in recs]
    per_label: list[list[float]] = [[] for _ in range(cfg.num_labels)]
    for r in rows:
        for c, d in enumerate(r["dice"] or []):
            if d is not None:
                per_label[c].append(d)

    y = np.array([r["labels"] for r in rows])
    s = np.array([r["y_hat"] for r in rows])
    aucs = []
    for c in range(cfg.num_labels):
        try:
            aucs.append(auc(s[:, c], y[:, c]))
        except UndefinedMetricError:
            aucs.append(None)

    dice_block = None
    if has_masks:
        flat = [d for lab in per_label for d in lab]
        dice_block = {"overall": summarize(flat) if flat else None,
                      "per_label": [summarize(v) if v else None for v in per_label]}

    data = {
        "schema_version": SCHEMA_VERSION,
        "num_labels": cfg.num_labels,
        "saliency": opts.saliency,
        "binarization": opts.binarization,
        "bags": rows,
        "auc": aucs,
        "dice": dice_block,
        "strata_bounds": _strata_json(opts.strata),
        "strata": stratified_dice(lesions, opts.strata),
        "lesions": lesions,
        "permutation": None,
    }
    if comparator is not None:
        data["permutation"] = compare_reports(data, comparator.data, opts)
    validate_report(data)
    return EvalReport(data)


def compare_reports(ours: dict, theirs: dict, opts: EvalOptions) -> dict:
    """Paired one-tailed tests of ``ours - theirs`` on per-bag and per-lesion Dice."""
    def bag_keys(report):
        out = {}
        for b in report["bags"]:
            for c, d in enumerate(b["dice"] or []):
                if d is not None:
                    out[(b["bag_id"], c)] = d
        return out

    def test(pairs):
        if not pairs:
            return None
        diffs = [a - b for a, b in pairs]
        return permutation_test(diffs, opts.permutation_iterations, opts.seed)

    mine, other = bag_keys(ours), bag_keys(theirs)
    overall = test([(mine[k], other[k]) for k in sorted(mine) if k in other])
    other_lesions = {(r["bag_id"], r["label"], r["index"]): r["dice"] for r in theirs["lesions"]}
    strata = {}
    for s in [b["name"] for b in ours["strata_bounds"]]:
        pairs = [(r["dice"], other_lesions[(r["bag_id"], r["label"], r["index"])])
                 for r in ours["lesions"]
                 if r["stratum"] == s and (r["bag_id"], r["label"], r["index"]) in other_lesions]
        p = test(pairs)
        if p is not None:
            strata[s] = p
    return {"iterations": opts.permutation_iterations, "seed": opts.seed, "overall": overall, "strata": strata}
