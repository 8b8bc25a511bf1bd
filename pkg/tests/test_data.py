import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dplab.data import (
    AttributeSpec,
    DataError,
    Dataset,
    Schema,
    SplitSpec,
    load_delimited,
    load_with_schema,
    normalize_rows,
    read_schema,
    save_delimited,
    split,
    split_indices,
    synth_multiclass,
    write_schema,
)
from dplab.models import ModelArch, TrainingConfig, train


def test_round_trip_bit_exact(tmp_path):
    x = np.array([[0.1, 1 / 3, -2.5e-300], [math.pi, -0.0, 1e300], [7.0, 2**-1074, 0.2]])
    ds = Dataset(x, [0, 2, 1], 3)
    for header in (False, True):
        p = tmp_path / f"t{header}.csv"
        save_delimited(ds, p, header=header)
        back = load_delimited(p, label_column=3, header=header)
        assert back.features.tobytes() == x.tobytes()
        assert back.labels.tolist() == [0, 2, 1]


def test_header_without_flag_fails(tmp_path):
    p = tmp_path / "h.csv"
    save_delimited(Dataset(np.ones((2, 2)), [0, 1], 2), p, header=True)
    with pytest.raises(DataError, match="line 1"):
        load_delimited(p, label_column=2)


def test_malformed_row_names_line(tmp_path):
    lines = [f"{i * 0.1},{i * 0.2},{i % 2}" for i in range(20)]
    lines[16] = "0.3,oops,1"
    p = tmp_path / "bad.csv"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="line 17"):
        load_delimited(p, label_column=2)


def test_ragged_and_label_errors(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("1,2,0\n1,0\n")
    with pytest.raises(DataError, match="line 2"):
        load_delimited(p, label_column=2)
    p.write_text("1,2,0\n1,2,5\n")
    with pytest.raises(DataError, match="out of range"):
        load_delimited(p, label_column=2, num_classes=3)
    p.write_text("1,2,0.5\n")
    with pytest.raises(DataError, match="out of range"):
        load_delimited(p, label_column=2)


def test_tab_delimiter_and_column_selection(tmp_path):
    p = tmp_path / "t.tsv"
    p.write_text("9\t0.5\t1\t0.25\n9\t0.1\t0\t0.75\n")
    ds = load_delimited(p, label_column=2, feature_columns=(1, 3), delimiter="\t")
    assert ds.features.tolist() == [[0.5, 0.25], [0.1, 0.75]]
    assert ds.labels.tolist() == [1, 0]


def test_schema_round_trip(tmp_path):
    s = Schema(label_column=3, num_classes=4, feature_columns=(0, 1, 2), delimiter="\t", header=True,
               attributes=(AttributeSpec(1, (0.0, 0.5, 1.0)),))
    path = tmp_path / "x.schema"
    write_schema(s, path)
    assert read_schema(path) == s


def test_schema_ranges_and_comments(tmp_path):
    path = tmp_path / "y.schema"
    path.write_text("# comment\nlabel_column = 5\nfeature_columns = 0-2, 4\nattribute.4 = 0, 1  # binary\n")
    s = read_schema(path)
    assert s.feature_columns == (0, 1, 2, 4)
    assert s.attributes == (AttributeSpec(4, (0.0, 1.0)),)
    data = tmp_path / "y.csv"
    data.write_text("0.1,0.2,0.3,9,1,2\n")
    ds = load_with_schema(data, s)
    assert ds.attributes == [AttributeSpec(4, (0.0, 1.0))]
    path.write_text("num_classes = 3\n")
    with pytest.raises(DataError, match="label_column"):
        read_schema(path)


def test_attribute_spec_needs_two_values():
    with pytest.raises(DataError):
        AttributeSpec(0, (1.0,))


def test_normalize_rows():
    x = np.array([[0.0, 0.0], [0.0, 4.0], [0.3, 0.4], [3.0, 4.0]])
    out = normalize_rows(Dataset(x, [0, 0, 0, 0], 1)).features
    assert out[0].tolist() == [0.0, 0.0]
    assert out[1].tolist() == [0.0, 1.0]
    assert out[2].tolist() == [0.3, 0.4]
    assert np.allclose(out[3], [0.6, 0.8])
    again = normalize_rows(Dataset(out, [0] * 4, 1)).features
    assert np.array_equal(again, out)
    with pytest.raises(DataError):
        normalize_rows(Dataset(np.array([[np.nan, 0.0]]), [0], 1))


def test_split_exact_partition():
    ds = Dataset(np.arange(40.0).reshape(20, 2), np.zeros(20), 1)
    tr, te, sh = split(ds, SplitSpec(10, 10, 0, seed=4))
    assert len(tr) == len(te) == 10 and len(sh) == 0
    got = sorted(np.concatenate([tr.features[:, 0], te.features[:, 0]]).tolist())
    assert got == list(np.arange(0.0, 40.0, 2.0))
    a = split_indices(20, SplitSpec(10, 10, 0, seed=4))
    b = split_indices(20, SplitSpec(10, 10, 0, seed=4))
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    with pytest.raises(DataError):
        split_indices(20, SplitSpec(15, 10))


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 300), f=st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)), seed=st.integers(0, 2**32))
def test_split_disjoint_property(n, f, seed):
    total = sum(f) or 1.0
    sizes = [int(n * v / total / 1.0001) for v in f]
    tr, te, sh = split_indices(n, SplitSpec(*sizes, seed=seed))
    allidx = np.concatenate([tr, te, sh])
    assert len(np.unique(allidx)) == len(allidx) == sum(sizes)


def test_synth_norms_and_determinism():
    a = synth_multiclass(500, 20, 5, margin=1.0, label_noise=0.1, seed=3, num_binary=3)
    b = synth_multiclass(500, 20, 5, margin=1.0, label_noise=0.1, seed=3, num_binary=3)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    assert np.all(np.linalg.norm(a.features, axis=1) <= 1 + 1e-9)
    assert [s.attr_index for s in a.attributes] == [0, 1, 2]
    assert set(np.unique(a.features[:, 0])) <= set(a.attributes[0].domain)


def test_synth_margin_infeasible():
    with pytest.raises(DataError, match="margin"):
        synth_multiclass(10, 2, 4, margin=1.9, max_tries=200)


def _fit_acc(ds, seed=0, epochs=30):
    tr, te, _ = split(ds, SplitSpec(len(ds) // 2, len(ds) // 2, seed=seed))
    arch = ModelArch.softmax(ds.dim, ds.num_classes)
    m = train(tr, TrainingConfig(arch, batch_size=100, epochs=epochs, clip_threshold=math.inf))
    return m.accuracy(te.features, te.labels)


def test_synth_separable_reaches_090():
    ds = synth_multiclass(2000, 20, 10, margin=1.0, label_noise=0.0, seed=0, spread=0.3)
    assert _fit_acc(ds) >= 0.9


def test_synth_half_label_noise_caps_accuracy():
    ds = synth_multiclass(4000, 20, 10, margin=1.0, label_noise=0.5, seed=0, spread=0.3)
    assert _fit_acc(ds) <= 0.65
