import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsd.data import (
    CsvSchema,
    DataError,
    PopulationFrame,
    SchemaError,
    SeedSpec,
    SimulatedTruth,
    ValidationError,
    ceil_count,
    emit_csv,
    load_csv,
    round_half_up,
    split_frame,
)


def _write(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_load_three_rows(tmp_path):
    path = _write(tmp_path, "f0,f1,treatment,conversion\n0.5,1,1,0\n-2,3.25,0,1\n7,8,1,1\n")
    frame = load_csv(path, {"features": ["f0", "f1"], "treatment": "treatment", "outcome": "conversion"})
    assert frame.n_rows == 3
    assert frame.feature_names == ("f0", "f1")
    np.testing.assert_array_equal(frame.features[:, 1], [1, 3.25, 8])
    np.testing.assert_array_equal(frame.outcome, [0, 1, 1])
    np.testing.assert_array_equal(frame.ids, [0, 1, 2])


def test_criteo_layout_ignores_extra_columns(tmp_path):
    rng = np.random.default_rng(0)
    cols = [f"f{j}" for j in range(12)]
    df = pd.DataFrame(rng.normal(size=(20, 12)), columns=cols)
    df["treatment"] = (rng.random(20) < 0.85).astype(int)
    df["conversion"] = (rng.random(20) < 0.1).astype(int)
    df["visit"] = 1
    df["exposure"] = 0
    path = tmp_path / "criteo.csv"
    df.to_csv(path, index=False)
    frame = load_csv(path, CsvSchema(tuple(cols), "conversion", "treatment"))
    assert frame.features.shape == (20, 12)
    assert "visit" not in frame.feature_names


def test_non_binary_outcome_names_row(tmp_path):
    path = _write(tmp_path, "f0,y\n1,0\n2,1\n3,2\n")
    with pytest.raises(ValidationError, match="row 2"):
        load_csv(path, {"features": ["f0"], "outcome": "y"})


def test_missing_column_is_schema_error(tmp_path):
    path = _write(tmp_path, "f0,y\n1,0\n")
    with pytest.raises(SchemaError):
        load_csv(path, {"features": ["f0", "f9"], "outcome": "y"})


@pytest.mark.parametrize("cell", ["abc", ""])
def test_unparsable_or_missing_feature(tmp_path, cell):
    path = _write(tmp_path, f"f0,y\n1,0\n{cell},1\n")
    with pytest.raises(ValidationError):
        load_csv(path, {"features": ["f0"], "outcome": "y"})


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError):
        load_csv(tmp_path / "nope.csv", {"features": ["f0"]})


def test_declared_id_column(tmp_path):
    path = _write(tmp_path, "uid,f0\n10,1\n30,2\n20,3\n")
    frame = load_csv(path, {"features": ["f0"], "id": "uid"})
    np.testing.assert_array_equal(frame.ids, [10, 30, 20])
    dup = _write(tmp_path, "uid,f0\n1,1\n1,2\n", "dup.csv")
    with pytest.raises(ValidationError):
        load_csv(dup, {"features": ["f0"], "id": "uid"})


@settings(max_examples=25, deadline=None)
@given(
    st.lists(
        st.tuples(st.floats(-1e12, 1e12, allow_nan=False), st.floats(-1e-3, 1e-3, allow_nan=False), st.integers(0, 1)),
        min_size=1,
        max_size=30,
    )
)
def test_csv_round_trip(tmp_path_factory, rows):
    X = np.array([[a, b] for a, b, _ in rows])
    w = np.array([c for _, _, c in rows])
    frame = PopulationFrame(X, ("a", "b"), treatment=w)
    path = emit_csv(frame, tmp_path_factory.mktemp("rt") / "f.csv")
    back = load_csv(path, {"features": ["a", "b"], "treatment": "treatment", "id": "id"})
    np.testing.assert_array_equal(back.features, frame.features)
    np.testing.assert_array_equal(back.treatment, frame.treatment)
    np.testing.assert_array_equal(back.ids, frame.ids)


def test_frame_invariants():
    with pytest.raises(ValidationError):
        PopulationFrame(np.zeros((3, 1)), ("a",), outcome=[0, 1])
    with pytest.raises(ValidationError):
        PopulationFrame(np.zeros((2, 1)), ("a",), treatment=[0, 3])
    with pytest.raises(ValidationError):
        PopulationFrame(np.array([[1.0], [np.nan]]), ("a",))
    with pytest.raises(SchemaError):
        PopulationFrame(np.zeros((2, 2)), ("a", "a"))


def test_frame_is_immutable():
    frame = PopulationFrame(np.zeros((2, 1)), ("a",), outcome=[0, 1])
    with pytest.raises(ValueError):
        frame.features[0, 0] = 1.0
    with pytest.raises(ValueError):
        frame.outcome[0] = 1


def test_take_keeps_ids():
    frame = PopulationFrame(np.arange(10.0)[:, None], ("a",))
    sub = frame.take([7, 2])
    np.testing.assert_array_equal(sub.ids, [7, 2])
    np.testing.assert_array_equal(sub.features[:, 0], [7.0, 2.0])


def test_split_frame_partition():
    frame = PopulationFrame(np.arange(10.0)[:, None], ("a",))
    a, b = split_frame(frame, [4, 6], SeedSpec(3, "s"))
    assert (a.n_rows, b.n_rows) == (4, 6)
    assert not set(a.ids) & set(b.ids)
    a2, b2 = split_frame(frame, [4, 6], SeedSpec(3, "s"))
    np.testing.assert_array_equal(a.ids, a2.ids)
    np.testing.assert_array_equal(b.ids, b2.ids)


def test_split_frame_too_large():
    frame = PopulationFrame(np.arange(10.0)[:, None], ("a",))
    with pytest.raises(ValidationError):
        split_frame(frame, [7, 7], 0)


def test_seed_streams():
    s = SeedSpec(42, "x")
    assert s.rng(3).random() == SeedSpec(42, "x").rng(3).random()
    assert s.rng(0).random() != s.rng(1).random()
    assert s.child("a").rng().random() != s.child("b").rng().random()
    assert SeedSpec(2**64 - 1).int_seed() >= 0
    with pytest.raises(ValidationError):
        SeedSpec(2**64)
    with pytest.raises(ValidationError):
        SeedSpec(-1)


def test_simulated_truth_bounds():
    t = SimulatedTruth([0.2, 0.9], [0.1, 0.1])
    np.testing.assert_allclose(t.mu1, [0.3, 1.0])
    np.testing.assert_allclose(t.phi(0.5), [0.25, 0.95])
    with pytest.raises(ValidationError):
        SimulatedTruth([0.95], [0.1])


def test_rounding_helpers():
    assert ceil_count(0.93, 100) == 93
    assert ceil_count(0.931, 100) == 94
    assert round_half_up(2.5) == 3
    assert round_half_up(2.4999) == 2
