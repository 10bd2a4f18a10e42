import csv
import json

import jsonschema
import numpy as np
import pytest

from heatmil.bags import BagOfPatches
from heatmil.evaluation import EvalOptions, EvalReport, evaluate_dataset, strata_from_json, validate_report
from heatmil.metrics import connected_components
from heatmil.model import ModelConfig, ModelParams
from heatmil.synthetic import SynthConfig, generate_synthetic


@pytest.fixture(scope="module")
def setup():
    ds = generate_synthetic(SynthConfig(num_train=2, num_val=2, num_test=10, grid_rows=4, grid_cols=4,
                                        lesion_area_fractions=(0.01, 0.04, 0.1, 0.2)))
    cfg = ModelConfig(embed_dim=16, proj_dim=4, hidden_dim=4, num_labels=1)
    return ds["test"], ModelParams.init(cfg, seed=3)


@pytest.fixture(scope="module")
def report(setup):
    bags, params = setup
    return evaluate_dataset(params, bags, EvalOptions(permutation_iterations=200))


def strip_masks(bags):
    return [BagOfPatches(b.bag_id, b.embeddings, b.coords, b.labels, None) for b in bags]


def test_report_structure(report, setup):
    bags, _ = setup
    d = report.data
    assert len(d["bags"]) == len(bags) and d["permutation"] is None
    assert [b["bag_id"] for b in d["bags"]] == sorted(b.bag_id for b in bags)
    assert 0 <= d["auc"][0] <= 1


def test_dice_only_over_positive_bags(report, setup):
    bags, _ = setup
    by_id = {b.bag_id: b for b in bags}
    vals = []
    for row in report.data["bags"]:
        if by_id[row["bag_id"]].labels[0]:
            assert row["dice"][0] is not None
            vals.append(row["dice"][0])
        else:
            assert row["dice"] == [None]
    assert report.mean_dice == pytest.approx(np.mean(vals))
    assert report.data["dice"]["overall"]["count"] == len(vals)


def test_every_lesion_counted_once(report, setup):
    bags, _ = setup
    n = sum(len(connected_components(b.mask[0])) for b in bags if b.labels[0])
    assert len(report.data["lesions"]) == n
    assert sum(s["count"] for s in report.data["strata"].values()) == n


def test_masks_absent_gives_auc_only(setup):
    bags, params = setup
    d = evaluate_dataset(params, strip_masks(bags)).data
    assert d["dice"] is None and d["strata"] == {} and d["lesions"] == []
    assert all(b["dice"] is None for b in d["bags"]) and d["auc"][0] is not None


def test_self_comparison_gives_p_one(report, setup):
    bags, params = setup
    d = evaluate_dataset(params, bags, EvalOptions(permutation_iterations=200), comparator=report).data
    assert d["permutation"]["overall"] == 1.0
    assert d["permutation"]["strata"] and all(p == 1.0 for p in d["permutation"]["strata"].values())


def test_json_roundtrip_and_schema(report, tmp_path):
    report.write(tmp_path / "r.json")
    back = EvalReport.read(tmp_path / "r.json")
    assert back.data == json.loads(report.to_json())
    assert back.to_json() == report.to_json()
    assert strata_from_json(back.data["strata_bounds"]) == EvalOptions().strata
    bad = json.loads(report.to_json())
    bad["auc"] = [1.5]
    with pytest.raises(jsonschema.ValidationError):
        validate_report(bad)
    bad = json.loads(report.to_json())
    bad["extra"] = 1
    with pytest.raises(jsonschema.ValidationError):
        validate_report(bad)


def test_order_invariance(report, setup):
    bags, params = setup
    rng = np.random.default_rng(0)
    shuffled = [bags[i] for i in rng.permutation(len(bags))]
    assert evaluate_dataset(params, shuffled, EvalOptions(permutation_iterations=200)).to_json() == report.to_json()


def test_parallel_equals_serial(report, setup):
    bags, params = setup
    assert evaluate_dataset(params, bags, EvalOptions(permutation_iterations=200), jobs=2).to_json() == report.to_json()


def test_csv_rows(report, tmp_path):
    report.write_csv(tmp_path / "r.csv")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["bag_id", "label_0", "y_hat_0", "dice_0"]
    assert len(rows) == 1 + len(report.data["bags"])
    for row, b in zip(rows[1:], report.data["bags"]):
        assert row[0] == b["bag_id"] and float(row[2]) == b["y_hat"][0]
        assert (row[3] == "") == (b["dice"][0] is None)


def test_gradcam_and_fixed_threshold(setup):
    bags, params = setup
    d = evaluate_dataset(params, bags, EvalOptions(saliency="gradcam", binarization=0.5)).data
    assert d["saliency"] == "gradcam" and d["binarization"] == 0.5
    validate_report(d)
    with pytest.raises(ValueError):
        evaluate_dataset(params, bags, EvalOptions(saliency="attention"))


def test_single_class_auc_is_null(setup):
    bags, params = setup
    pos = [b for b in bags if b.labels[0]]
    assert evaluate_dataset(params, pos).data["auc"] == [None]
