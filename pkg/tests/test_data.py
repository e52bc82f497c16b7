import json

import numpy as np
import pandas as pd
import pytest

from conftest import random_trial
from wedgefe.data import (TrialData, drop_period, load_csv, restrict_to_structure,
                          validation_report, write_csv)
from wedgefe.design import TrialDesign
from wedgefe.errors import DataError


def _frame(m=6, J=4, per_cell=100, seed=0):
    rng = np.random.default_rng(seed)
    design = TrialDesign("sw", J, m // (J - 1))
    z = design.allocation()
    rows = []
    for i in range(m):
        for j in range(1, J + 1):
            for k in range(per_cell):
                rows.append((i + 1, j, k + 1, int(z[i]), rng.normal(), rng.normal()))
    return design, pd.DataFrame(rows, columns=["cluster", "period", "individual", "sequence",
                                               "y", "x1"])


def test_load_counts_enrollment(tmp_path):
    design, df = _frame()
    path = tmp_path / "trial.csv"
    df.to_csv(path, index=False)
    data = load_csv(path, design)
    assert data.m == 6 and data.n == 2400
    np.testing.assert_array_equal(data.cluster_totals(), np.full(6, 400.0))
    np.testing.assert_array_equal(data.sizes(), np.full((6, 4), 100.0))
    assert data.covariate_names == ("x1",)


def test_period_out_of_range_reports_row(tmp_path):
    design, df = _frame(per_cell=2)
    df.loc[5, "period"] = 7
    df.to_csv(tmp_path / "bad.csv", index=False)
    with pytest.raises(DataError, match=r"row 6.*period 7 outside 1\.\.4"):
        load_csv(tmp_path / "bad.csv", design)


def test_sequence_outside_design_is_rejected(tmp_path):
    design, df = _frame(per_cell=2)
    df.loc[df.cluster == 3, "sequence"] = 9
    df.to_csv(tmp_path / "bad.csv", index=False)
    with pytest.raises(DataError, match="sequence 9 is not part"):
        load_csv(tmp_path / "bad.csv", design)


def test_two_sequences_for_one_cluster(tmp_path):
    design, df = _frame(per_cell=2)
    first = df.index[df.cluster == 2][0]
    df.loc[first, "sequence"] = 3 if df.loc[first, "sequence"] != 3 else 4
    df.to_csv(tmp_path / "bad.csv", index=False)
    with pytest.raises(DataError, match="two sequences"):
        load_csv(tmp_path / "bad.csv", design)


def test_missing_column_and_non_numeric(tmp_path):
    design, df = _frame(per_cell=2)
    df.drop(columns="y").to_csv(tmp_path / "a.csv", index=False)
    with pytest.raises(DataError, match="missing required column 'y'"):
        load_csv(tmp_path / "a.csv", design)
    df2 = df.astype({"y": object})
    df2.loc[3, "y"] = "abc"
    df2.to_csv(tmp_path / "b.csv", index=False)
    with pytest.raises(DataError, match=r"row 4.*'abc'"):
        load_csv(tmp_path / "b.csv", design)
    df3 = df.astype({"y": object})
    df3.loc[0, "y"] = ""
    df3.to_csv(tmp_path / "c.csv", index=False)
    with pytest.raises(DataError, match="row 1"):
        load_csv(tmp_path / "c.csv", design)
    with pytest.raises(DataError, match="no such file"):
        load_csv(tmp_path / "nope.csv", design)


def test_sequence_inferred_from_treatment_column(tmp_path):
    design, df = _frame(per_cell=3)
    df["treatment"] = (df.period >= df.sequence).astype(int)
    df.drop(columns="sequence").to_csv(tmp_path / "t.csv", index=False)
    data = load_csv(tmp_path / "t.csv", design)
    np.testing.assert_array_equal(data.z, design.allocation())
    df.loc[0, "treatment"] = 1
    df.drop(columns="sequence").to_csv(tmp_path / "t2.csv", index=False)
    with pytest.raises(DataError):
        load_csv(tmp_path / "t2.csv", design)


def test_round_trip(tmp_path, rng):
    data = random_trial(rng, m=5, p=2)
    text = write_csv(data, tmp_path / "rt.csv")
    assert "\r" not in text
    back = load_csv(tmp_path / "rt.csv", data.design)
    for a in ("cluster", "period", "individual", "y", "X"):
        np.testing.assert_array_equal(getattr(back, a), getattr(data, a))
    assert back.sequence_of == data.sequence_of
    assert write_csv(back) == text


def test_rows_are_sorted_and_views_partition(rng):
    data = random_trial(rng, m=6, p=1)
    perm = rng.permutation(data.n)
    shuffled = TrialData.from_arrays(data.design, data.cluster[perm], data.period[perm],
                                     data.y[perm], data.X[perm], sequence_of=data.sequence_of,
                                     individual=data.individual[perm])
    np.testing.assert_array_equal(shuffled.y, data.y)
    total = 0
    for c in data.cluster_ids:
        block = data.cluster_view(int(c))
        assert np.all(np.diff(block.periods) >= 0)
        total += block.y.size
        assert block.sizes.sum() == block.y.size
    assert total == data.n


def test_cluster_view_block_in_period_order():
    design = TrialDesign("sw", 4)
    period = [3, 1, 4, 1, 2, 4, 4]
    data = TrialData.from_arrays(design, [7] * 7, period, np.arange(7.0),
                                 sequence_of={7: 3})
    block = data.cluster_view(7)
    assert block.periods.tolist() == [1, 1, 2, 3, 4, 4, 4]
    assert block.sizes.tolist() == [2, 1, 1, 3]
    assert block.y.tolist() == [1.0, 3.0, 4.0, 0.0, 2.0, 5.0, 6.0]
    assert block.columns == ("period2", "period3", "period4", "Z")
    np.testing.assert_array_equal(block.Q[:, 3], [0, 0, 0, 1, 1, 1, 1])


def test_covariate_permutation_reorders_block(rng):
    data = random_trial(rng, m=4, p=3)
    perm = data.select_covariates(["x3", "x1", "x2"])
    c = int(data.cluster_ids[0])
    a, b = data.cluster_view(c), perm.cluster_view(c)
    np.testing.assert_array_equal(a.Q[:, :-3], b.Q[:, :-3])
    np.testing.assert_array_equal(a.Q[:, [-1, -3, -2]], b.Q[:, -3:])


def test_drop_period():
    design = TrialDesign("sw", 4, 2)
    rng = np.random.default_rng(3)
    data = random_trial(rng, design, m=6, p=0)
    before = data.cluster_totals().sum()
    out = drop_period(data, 4)
    assert set(out.period.tolist()) == {1, 2, 3}
    assert before - out.cluster_totals().sum() == data.sizes()[:, 3].sum()
    with pytest.raises(DataError):
        drop_period(out, 4)
    only = TrialData.from_arrays(design, [1, 1, 2], [4, 4, 1], [0.0, 1.0, 2.0],
                                 sequence_of={1: 2, 2: 3})
    with pytest.raises(DataError, match="cluster 1"):
        drop_period(only, 4)
    r = restrict_to_structure(data, "period")
    assert r.period.max() == 3
    assert restrict_to_structure(data, "constant") is data


def test_empty_mapped_cluster_is_dropped_with_warning():
    design = TrialDesign("pb", 2)
    with pytest.warns(UserWarning, match="cluster 9"):
        data = TrialData.from_arrays(design, [1, 1, 2, 2], [1, 2, 1, 2], [0.0, 1, 2, 3],
                                     sequence_of={1: 0, 2: 2, 9: 0})
    assert data.m == 2
    assert data.notes


def test_unassigned_cluster_and_bad_values():
    design = TrialDesign("pb", 2)
    with pytest.raises(DataError, match="no sequence"):
        TrialData.from_arrays(design, [1, 2], [1, 1], [0.0, 1.0], sequence_of={1: 0})
    with pytest.raises(DataError, match="not finite"):
        TrialData.from_arrays(design, [1, 2], [1, 1], [0.0, np.nan],
                              sequence_of={1: 0, 2: 2})


def test_validation_report_is_json(rng):
    data = random_trial(rng, m=4, p=1)
    rep = validation_report(data)
    assert rep["schema_version"] == 1
    assert json.loads(json.dumps(rep))["n_clusters"] == 4
