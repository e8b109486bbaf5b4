import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from balcause import Dataset, DoseTransform, Schema, TreatmentSpace, load_csv, validate, write_csv
from balcause.data import (
    BadLevel,
    DegenerateDoses,
    DoseOutOfRange,
    EmptyLevel,
    NonFinite,
    ShapeMismatch,
    check,
)
from balcause.errors import (
    EmptyFile,
    InvalidDataset,
    LevelOutOfRange,
    MissingColumn,
    NonNumericCell,
)


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


CAT = TreatmentSpace.categorical(2)


def test_treatment_space_validation():
    with pytest.raises(ValueError):
        TreatmentSpace.categorical(0)
    with pytest.raises(ValueError):
        TreatmentSpace.continuous(1.0, 1.0)
    with pytest.raises(ValueError):
        TreatmentSpace("ordinal")
    assert CAT.is_categorical and not TreatmentSpace.continuous(0, 1).is_categorical


def test_dataset_is_read_only_copy():
    a = np.array([0.0, 1.0, 2.0])
    ds = Dataset(a, [1, 2, 3], [1, 2, 3])
    a[0] = 9
    assert ds.treatment[0] == 0
    assert ds.covariates.shape == (3, 1) and ds.covariate_names == ("x1",)
    with pytest.raises(ValueError):
        ds.outcome[0] = 5.0


def test_validate_reports_every_violation():
    ds = Dataset([0, 1, 1.5, 3, 1], [1, np.nan, 2, 3, 4], [[1], [2], [np.inf], [4], [5]])
    found = validate(ds, CAT)
    assert NonFinite(1, "outcome") in found
    assert NonFinite(2, "x1") in found
    assert BadLevel(2, 1.5) in found and BadLevel(3, 3.0) in found
    assert EmptyLevel(2) in found
    assert len(found) == 5


def test_validate_continuous_findings():
    space = TreatmentSpace.continuous(0.0, 10.0)
    ds = Dataset([1.0, 12.0, -1.0], [0, 0, 0], np.zeros((3, 1)))
    assert validate(ds, space) == [DoseOutOfRange(1, 12.0), DoseOutOfRange(2, -1.0)]
    flat = Dataset([3.0, 3.0], [0, 1], np.zeros((2, 1)))
    assert validate(flat, space) == [DegenerateDoses()]


def test_validate_shape_mismatch_and_empty():
    ds = Dataset([0, 1], [1, 2, 3], np.zeros((2, 1)))
    assert isinstance(validate(ds, CAT)[0], ShapeMismatch)
    empty = Dataset(np.zeros(0), np.zeros(0), np.zeros((0, 1)))
    assert isinstance(validate(empty, CAT)[0], ShapeMismatch)


def test_check_raises_with_violation_list():
    ds = Dataset([0, 0], [1, 2], np.zeros((2, 1)))
    with pytest.raises(InvalidDataset) as err:
        check(ds, TreatmentSpace.categorical(1))
    assert err.value.violations == [EmptyLevel(1)]


def test_load_csv_with_intercept(tmp_path):
    p = _write(tmp_path, "y,a,z,w\n1.5,0,0.1,3\n2.5,1,0.2,4\n0.5,2,0.3,5\n")
    ds = load_csv(p, Schema("a", "y", ["w", "z"], intercept=True), CAT)
    assert ds.covariate_names == ("intercept", "w", "z")
    assert np.array_equal(ds.covariates, [[1, 3, 0.1], [1, 4, 0.2], [1, 5, 0.3]])
    assert np.array_equal(ds.outcome, [1.5, 2.5, 0.5]) and ds.intercept


def test_load_csv_errors(tmp_path):
    schema = Schema("a", "y", ["x"])
    with pytest.raises(EmptyFile):
        load_csv(_write(tmp_path, ""), schema, CAT)
    with pytest.raises(EmptyFile):
        load_csv(_write(tmp_path, "a,y,x\n"), schema, CAT)
    with pytest.raises(MissingColumn) as e:
        load_csv(_write(tmp_path, "a,y,z\n0,1,2\n"), schema, CAT)
    assert e.value.column == "x"
    with pytest.raises(NonNumericCell) as e:
        load_csv(_write(tmp_path, "a,y,x\n0,1,2\n1,oops,2\n"), schema, CAT)
    assert (e.value.row, e.value.col) == (1, "y")
    with pytest.raises(LevelOutOfRange) as e:
        load_csv(_write(tmp_path, "a,y,x\n0,1,2\n1,1,2\n2,0,0\n3,1,1\n"), schema, CAT)
    assert (e.value.row, e.value.value) == (3, 3.0)
    with pytest.raises(InvalidDataset):
        load_csv(_write(tmp_path, "a,y,x\n0,1,2\n1,1,2\n"), schema, CAT)


def test_load_csv_dose_transform_and_blank_lines(tmp_path):
    p = _write(tmp_path, "a,y,x\n4,1,0\n\n10,2,1\n16,3,2\n")
    tr = DoseTransform(shift=4.0, scale=20.0)
    ds = load_csv(p, Schema("a", "y", ["x"], dose_transform=tr), TreatmentSpace.continuous(0, 1))
    assert np.allclose(ds.treatment, [0.0, 0.3, 0.6])
    assert np.allclose(tr.inverse(ds.treatment), [4, 10, 16])


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 20).flatmap(lambda n: st.tuples(
    arrays(float, n, elements=st.floats(-1e6, 1e6, allow_subnormal=False)),
    arrays(float, (n, 2), elements=st.floats(-1e6, 1e6, allow_subnormal=False)),
    st.booleans())))
def test_write_then_load_round_trips_exactly(tmp_path_factory, payload):
    y, x, intercept = payload
    n = len(y)
    a = np.arange(n) % 3
    if intercept:
        x = np.column_stack([np.ones(n), x])
    names = (("intercept",) if intercept else ()) + ("u", "v")
    ds = Dataset(a, y, x, names, intercept)
    path = tmp_path_factory.mktemp("rt") / "rt.csv"
    write_csv(ds, path)
    back = load_csv(path, Schema("a", "y", ["u", "v"], intercept), CAT)
    assert np.array_equal(back.treatment, ds.treatment)
    assert np.array_equal(back.outcome, ds.outcome)
    assert np.array_equal(back.covariates, ds.covariates)
    assert back.covariate_names == ds.covariate_names


def test_round_trip_preserves_dose_scale(tmp_path):
    tr = DoseTransform(0.0, 20.0)
    ds = Dataset([0.1, 0.25, 0.7], [1, 2, 3], [[0.0], [1.0], [2.0]], ("x",), False, tr)
    write_csv(ds, tmp_path / "c.csv")
    text = (tmp_path / "c.csv").read_text().splitlines()
    assert text[0] == "a,y,x" and text[1].startswith("2.0,")
    back = load_csv(tmp_path / "c.csv", Schema("a", "y", ["x"], dose_transform=tr),
                    TreatmentSpace.continuous(0, 1))
    assert np.allclose(back.treatment, ds.treatment, rtol=0, atol=1e-15)


def test_take_and_with_covariates_keep_metadata():
    tr = DoseTransform(1.0, 2.0)
    ds = Dataset([1, 2, 3], [4, 5, 6], [[1], [2], [3]], ("z",), False, tr)
    sub = ds.take([2, 0])
    assert np.array_equal(sub.treatment, [3, 1]) and sub.dose_transform is tr
    other = ds.with_covariates(np.zeros((3, 2)))
    assert other.d == 2 and other.covariate_names == ("x1", "x2")
    assert math.isclose(other.outcome[1], 5)
