import json

import numpy as np
import pytest

from drdselect.classifier import ClassifierConfig
from drdselect.config import resolve
from drdselect.evaluation import EvalReport, cross_eval, off_diagonal_means, run_sweep
from drdselect.experiment import Replicate, random_scores
from drdselect.gmm import LabeledDataset, sample_dataset
from drdselect.scoring import ScoreRecord


def small_cfg(**sweep):
    return resolve({
        "world": "W2o",
        "data": {"n_per_class": 60, "test_n_per_class": 100},
        "selector": {"B": 4, "num_eps": 4},
        "scoring": {"K": 2},
        "evaluation": {"seeds": [0, 1, 2], "epochs": 60, "dynamics_epochs": 6, "dynamics_runs": 1},
        "sweep": sweep,
    })


def test_report_cells_and_serialisation():
    rep = EvalReport("demo", {"budget": [0.1]}, seeds=[0, 1, 2])
    cell = rep.add([0.5, 0.6, 0.7], budget=0.1)
    assert cell["mean"] == pytest.approx(0.6)
    assert cell["std"] == pytest.approx(0.1)  # sample std
    assert rep.cell(budget=0.1) is cell
    with pytest.raises(KeyError):
        rep.cell(budget=0.2)
    with pytest.raises(AssertionError):
        rep.add([1.2], budget=0.3)
    body = json.loads(rep.to_json())
    assert "runtime_seconds" not in body
    assert rep.to_csv().splitlines()[0] == "experiment,budget,mean,std,n_seeds,accuracies"


def test_cross_eval_duplicated_strata(w2):
    # every stratum holds the same points, so every row is identical
    base = sample_dataset(w2, 20, 3)
    n = len(base)
    X = np.tile(base.X, (5, 1))
    y = np.tile(base.y, 5)
    ds = LabeledDataset(np.arange(5 * n), X, y, np.array(["inlier"] * 5 * n, dtype=object), 2)
    scores = [ScoreRecord(int(i), int(c), -1, float(i // n), 1, "copy") for i, c in zip(ds.ids, ds.y)]
    m = cross_eval(ds, scores, ds, scores, 5, ClassifierConfig(record=False, epochs=50))
    assert np.allclose(m, m[0])
    assert m.shape == (5, 5)


def test_cross_eval_missing_class(w2):
    ds = sample_dataset(w2, 10, 0)
    # lowest strata are pure class 0
    scores = [ScoreRecord(int(i), int(c), -1, float(c), 1, "label") for i, c in zip(ds.ids, ds.y)]
    with pytest.raises(ValueError, match="stratum 0"):
        cross_eval(ds, scores, ds, scores, 5)


def test_off_diagonal_means():
    m = np.arange(9.0).reshape(3, 3)
    assert list(off_diagonal_means(m)) == [1.5, 4.0, 6.5]


def test_ratio_sweep_is_full_factorial():
    cfg = small_cfg(budgets=[0.1, 0.2, 0.3, 0.5, 0.75])
    rep = run_sweep("ratio_sweep", cfg)
    assert len(rep.cells) == 25
    assert {c["method"] for c in rep.cells} == {"random", "drd+bws", "drd+ccs", "forgetting+bws", "el2n+bws"}
    assert all(len(c["accuracies"]) == 3 for c in rep.cells)
    assert all(0 <= a <= 1 for c in rep.cells for a in c["accuracies"])


def test_window_sweep_matches_bws_enumeration():
    rep = run_sweep("window_sweep", small_cfg())
    assert [c["start"] for c in rep.cells] == pytest.approx([0.05 * k for k in range(11)])


def test_hyper_sensitivity_grid_shape():
    cfg = small_cfg(hyper_B=[5, 20, 40], hyper_num_eps=[5, 20, 40], hyper_budgets=[0.3])
    cfg["selector"]["B"] = 4
    rep = run_sweep("hyper_sensitivity", cfg)
    assert len(rep.cells) == 9
    assert rep.axes["B"] == [5, 20, 40] and rep.axes["num_eps"] == [5, 20, 40]


def test_strategy_grid_and_timestep_comparison_shapes():
    cfg = small_cfg(strategy_budgets=[0.3], timesteps=[266, 388], timestep_budgets=[0.3])
    assert len(run_sweep("strategy_grid", cfg).cells) == 6
    rep = run_sweep("timestep_comparison", cfg)
    assert [c["timestep"] for c in rep.cells] == [266, 388, "ib"]
    assert rep.cells[0]["grid_position"] == 13


def test_sweep_is_reproducible():
    cfg = small_cfg(window_budgets=[0.5])
    a = run_sweep("window_sweep", cfg).to_json()
    assert a == run_sweep("window_sweep", cfg, threads=4).to_json()


def test_unknown_experiment():
    with pytest.raises(ValueError):
        run_sweep("table9", small_cfg())


def test_budget_monotonicity_for_random():
    cfg = resolve({"world": "W2overlap", "data": {"n_per_class": 200},
                   "evaluation": {"seeds": [0, 1, 2, 3, 4]}})
    reps = [Replicate(cfg, s) for s in range(5)]

    def mean_acc(b):
        return np.mean([r.test_accuracy(r.select("random", r.scores("random"), b).selected) for r in reps])

    assert mean_acc(1.0) >= mean_acc(0.1)
