import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glisson.evaluation import (AGGREGATE_HEADER, CELL_HEADER, ArtifactError, CellResult, ClassScheme,
                                ExperimentData, ExperimentReport, LeakageError, ProtocolConfig,
                                SplitPlan, accuracy, audit_splits, format_table, group_stage,
                                make_splits, mae, read_aggregate_csv, run_experiment,
                                write_aggregate_csv, write_cell_csv)
from glisson.imaging import ParameterError
from glisson.manifest import STAGE_NAMES, Element
from glisson.nn import TrainConfig
from glisson.phantom import DEFAULT_ROSTER
from oracles import naive_accuracy, naive_mae


def roster(counts=DEFAULT_ROSTER, variants=3):
    out = []
    for stage, n in enumerate(counts):
        for i in range(n):
            pid = f"P{stage}{i:04d}"
            base = f"images/{pid}.pgm"
            out.append(Element(base, pid, STAGE_NAMES[stage], 0, base))
            out += [Element(f"images/{pid}_a{v}.pgm", pid, STAGE_NAMES[stage], v, base)
                    for v in range(1, variants + 1)]
    return out


# class groupings ---------------------------------------------------------------

@pytest.mark.parametrize("stage,k,expected", [(1, 2, 0), (2, 3, 1), (3, 5, 3), (0, 2, 0), (2, 2, 1),
                                              (0, 3, 0), (4, 3, 2)])
def test_group_stage_examples(stage, k, expected):
    assert group_stage(stage, k) == expected


@pytest.mark.parametrize("k", [2, 3, 5])
def test_group_stage_monotone_and_onto(k):
    labels = [group_stage(s, k) for s in range(5)]
    assert labels == sorted(labels)
    assert set(labels) == set(range(k))
    assert ClassScheme(k).labels([0, 1, 2, 3, 4]).tolist() == labels


@pytest.mark.parametrize("stage,k", [(5, 2), (-1, 3), (1.5, 5), (1, 4)])
def test_group_stage_rejects_invalid(stage, k):
    with pytest.raises(ParameterError):
        group_stage(stage, k)


# splits ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def plans_157():
    elements = roster()
    return elements, make_splits(elements, folds=10, permutations=25, seed=3)


def test_full_protocol_has_250_cells_and_no_leakage(plans_157):
    elements, plans = plans_157
    assert len(elements) == 628
    assert len(plans) == 250
    audit_splits(plans, elements)
    pid = [e.patient_id for e in elements]
    for plan in plans:
        parts = [{pid[i] for i in part} for part in (plan.train, plan.val, plan.test)]
        assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
        # every patient's four variants travel together
        for part, ids in zip((plan.train, plan.val, plan.test), parts):
            assert len(part) == 4 * len(ids)


def test_test_folds_partition_each_permutation(plans_157):
    elements, plans = plans_157
    for p in range(25):
        test = sorted(i for plan in plans if plan.permutation == p for i in plan.test)
        assert test == list(range(len(elements)))


def test_fold_ratios_within_one_patient(plans_157):
    elements, plans = plans_157
    pid = [e.patient_id for e in elements]
    n = 157
    for plan in plans:
        sizes = [len({pid[i] for i in part}) for part in (plan.train, plan.val, plan.test)]
        assert abs(sizes[1] - 0.1 * n) <= 1 + 1e-9 and abs(sizes[2] - 0.1 * n) <= 1 + 1e-9
        assert abs(sizes[0] - 0.8 * n) <= 2 + 1e-9
        assert sum(sizes) == n


def test_every_test_fold_sees_every_stage(plans_157):
    elements, plans = plans_157
    for plan in plans:
        assert {elements[i].stage for i in plan.test} == set(STAGE_NAMES)


def test_same_seed_identical_plans_and_other_seed_differs():
    elements = roster((12, 12, 12, 12, 12), variants=1)
    a = make_splits(elements, folds=5, permutations=3, seed=1)
    assert a == make_splits(elements, folds=5, permutations=3, seed=1)
    assert a != make_splits(elements, folds=5, permutations=3, seed=2)


def test_two_folds_leave_validation_empty():
    plans = make_splits(roster((4, 4, 4, 4, 4), variants=0), folds=2, permutations=1)
    assert [len(p.val) for p in plans] == [0, 0]
    assert set(plans[0].train) == set(plans[1].test)


def test_too_few_patients_named_in_error():
    with pytest.raises(ParameterError, match="stage F3 has 3 patients"):
        make_splits(roster((10, 10, 10, 3, 10), variants=0), folds=10)
    with pytest.raises(ParameterError):
        make_splits([], folds=2)


def test_conflicting_stage_labels_rejected():
    els = roster((2, 2, 2, 2, 2), variants=0)
    els.append(Element("x.pgm", els[0].patient_id, "F4"))
    with pytest.raises(ParameterError, match="more than one stage"):
        make_splits(els, folds=2)


def test_audit_catches_leaks():
    els = roster((2, 2, 2, 2, 2), variants=1)
    leaky = SplitPlan(0, 0, 2, 0, train=(0, 2), val=(), test=(1, 3))
    with pytest.raises(LeakageError):
        audit_splits([leaky], els)


# metrics -----------------------------------------------------------------------

def test_metric_examples():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([0, 1, 2], [0, 2, 2]) == 2 / 3
    assert accuracy([1, 1], [0, 0]) == 0.0
    assert mae([0, 1, 2], [0, 1, 2]) == 0.0
    assert mae([0, 1, 2], [0, 2, 2]) == 1 / 3
    assert mae([0] * 7, [4] * 7) == 4.0


def test_metric_errors():
    with pytest.raises(ParameterError):
        accuracy([0, 1], [0])
    with pytest.raises(ParameterError):
        mae([], [])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 5).flatmap(lambda k: st.tuples(
    st.lists(st.integers(0, k - 1), min_size=1, max_size=60),
    st.lists(st.integers(0, k - 1), min_size=60, max_size=60))))
def test_metrics_match_naive_oracle(case):
    pred, truth = case
    truth = truth[:len(pred)]
    assert abs(accuracy(pred, truth) - naive_accuracy(pred, truth)) <= 1e-12
    assert abs(mae(pred, truth) - naive_mae(pred, truth)) <= 1e-12


# reports -----------------------------------------------------------------------

def test_report_aggregates_with_sample_std():
    r = ExperimentReport("mlnn", "roi", 2, [CellResult(0, 0, 1.0, 0.0), CellResult(0, 1, 0.5, 0.5)])
    assert r.acc_mean == 0.75 and r.mae_mean == 0.25
    assert r.acc_std == pytest.approx(np.std([1.0, 0.5], ddof=1))
    single = ExperimentReport("mlnn", "roi", 2, [CellResult(0, 0, 0.8, 0.2)])
    assert single.acc_std == 0.0


def test_report_rejects_out_of_range_cells():
    with pytest.raises(ValueError):
        ExperimentReport("mlnn", "roi", 2, [CellResult(0, 0, 1.2, 0.0)])
    with pytest.raises(ValueError):
        ExperimentReport("mlnn", "roi", 3, [CellResult(0, 0, 0.5, 2.5)])


def test_report_csvs_roundtrip(tmp_path):
    r = ExperimentReport("cnnl", "full", 3, [CellResult(0, 0, 0.1, 0.9), CellResult(0, 1, 1 / 3, 0.0)])
    write_cell_csv([r], tmp_path / "cells.csv")
    write_aggregate_csv([r], tmp_path / "agg.csv")
    lines = (tmp_path / "cells.csv").read_text().splitlines()
    assert lines[0] == ",".join(CELL_HEADER)
    assert lines[2] == "cnnl,full,3,0,1,0.3333333333333333,0.0"
    rows = read_aggregate_csv(tmp_path / "agg.csv")
    assert (tmp_path / "agg.csv").read_text().splitlines()[0] == ",".join(AGGREGATE_HEADER)
    assert rows[0]["acc_mean"] == r.acc_mean and rows[0]["classes"] == 3


def test_format_table_lists_rows_in_protocol_order():
    rows = [dict(model=m, mode="roi", classes=2, acc_mean=0.9, acc_std=0.01, mae_mean=0.1, mae_std=0.01)
            for m in ("concat", "mlnn", "cnnl", "cnn")]
    lines = format_table(rows).splitlines()
    assert [l.split()[0] for l in lines[2:]] == ["MLNN", "CNN", "CNNL", "CONCAT"]
    assert "90.00% ± 1.00" in lines[2]
    assert all(l == l.rstrip() for l in lines)


# experiments -------------------------------------------------------------------

def _feature_data(per_stage=6, variants=1, seed=0):
    els = roster((per_stage,) * 5, variants=variants)
    rng = np.random.default_rng(seed)
    stages = np.array([e.stage_index for e in els])
    feats = rng.normal(size=(len(els), 5)) * 0.3
    feats[:, 0] += 1.0 - 0.2 * stages
    feats[:, 2] += 1.0 - 0.2 * stages
    return ExperimentData(els, "roi", features=feats)


def test_smoke_one_permutation_two_folds():
    data = _feature_data()
    proto = ProtocolConfig(folds=2, permutations=1, seed=5, train=TrainConfig(max_epochs=30, patience=5))
    for k in (2, 3, 5):
        rep = run_experiment(data, "mlnn", k, proto)
        assert len(rep.cells) == 2
        assert [(c.permutation, c.fold) for c in rep.cells] == [(0, 0), (0, 1)]
        for c in rep.cells:
            assert 0.0 <= c.acc <= 1.0 and 0.0 <= c.mae <= k - 1
        assert rep.acc_std >= 0.0


def test_experiment_is_deterministic():
    data = _feature_data()
    proto = ProtocolConfig(folds=3, permutations=1, seed=2, train=TrainConfig(max_epochs=10, patience=3))
    a = run_experiment(data, "mlnn", 3, proto)
    b = run_experiment(data, "mlnn", 3, proto)
    assert a.cells == b.cells


def test_cnnl_smoke_on_tiny_images():
    els = roster((2,) * 5, variants=0)
    rng = np.random.default_rng(0)
    data = ExperimentData(els, "roi", images=rng.random((10, 1, 64, 192)),
                          lines=(rng.random((10, 1, 64, 192)) > 0.9).astype(float))
    proto = ProtocolConfig(folds=2, permutations=1, train=TrainConfig(max_epochs=1, patience=1))
    rep = run_experiment(data, "cnnl", 2, proto, model_options=dict(conv_channels=(2,), dense_units=4))
    assert len(rep.cells) == 2


def test_missing_artifacts_name_the_stage():
    data = _feature_data()
    with pytest.raises(ArtifactError, match="'extract'"):
        run_experiment(data, "cnn", 2, ProtocolConfig(folds=2, permutations=1))
    bare = ExperimentData(data.elements, "roi")
    with pytest.raises(ArtifactError, match="'features'"):
        run_experiment(bare, "mlnn", 2, ProtocolConfig(folds=2, permutations=1))


def test_wrong_image_size_for_mode():
    els = roster((2,) * 5, variants=0)
    data = ExperimentData(els, "full", images=np.zeros((10, 1, 64, 192)))
    with pytest.raises(ArtifactError, match="full"):
        run_experiment(data, "cnn", 2, ProtocolConfig(folds=2, permutations=1))


def test_unknown_kind_rejected():
    with pytest.raises(ParameterError, match="mlnn, cnn, cnnl, concat"):
        run_experiment(_feature_data(), "svm", 2)
