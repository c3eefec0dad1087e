import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from paramtalk.tensorio import FormatError, read_tensor, write_tensor
from paramtalk.types import (
    AudioFeatureSequence,
    ExpressionSequence,
    NormStats,
    SubspacePartition,
    denormalize,
    linear_schedule,
    normalize,
)

from oracles import cumulative_product_loop


def test_normalize_centering():
    z = normalize(ExpressionSequence([[2.0, 4.0]]), NormStats([2, 4], [1, 1]))
    np.testing.assert_array_equal(z.values, [[0.0, 0.0]])


def test_normalize_arithmetic():
    z = normalize(ExpressionSequence([[3.0]]), NormStats([1.0], [2.0]))
    np.testing.assert_array_equal(z.values, [[1.0]])
    assert z.stats.std[0] == 2.0


@settings(max_examples=50, deadline=None)
@given(
    values=arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)),
                  elements=st.floats(-1e3, 1e3)),
    data=st.data(),
)
def test_normalize_round_trip(values, data):
    n = values.shape[1]
    mean = np.array(data.draw(st.lists(st.floats(-100, 100), min_size=n, max_size=n)))
    std = np.array(data.draw(st.lists(st.floats(1e-2, 100), min_size=n, max_size=n)))
    e = ExpressionSequence(values)
    back = denormalize(normalize(e, NormStats(mean, std)))
    scale = np.maximum(np.abs(values), 1.0)
    assert np.all(np.abs(back.values - values) / scale <= 1e-6)


def test_normalize_errors():
    e = ExpressionSequence([[1.0, 2.0]])
    with pytest.raises(ValueError, match="does not match"):
        normalize(e, NormStats([0.0], [1.0]))
    with pytest.raises(ValueError, match="positive"):
        NormStats([0.0, 0.0], [1.0, 0.0])


def test_expression_invariants():
    with pytest.raises(ValueError):
        ExpressionSequence([[np.nan]])
    with pytest.raises(ValueError):
        ExpressionSequence([[1.0]], fps=0)
    e = ExpressionSequence(np.zeros((50, 3)), fps=25)
    assert e.duration == 2.0
    with pytest.raises(ValueError):
        e.values[0, 0] = 1.0  # read-only
    with pytest.raises(ValueError):
        AudioFeatureSequence(np.zeros(3))


def test_linear_schedule_single_step():
    np.testing.assert_allclose(linear_schedule(1, 0.5, 0.5).alpha_bar, [0.5])


def test_linear_schedule_two_steps():
    np.testing.assert_allclose(linear_schedule(2, 0.1, 0.2).alpha_bar, [0.9, 0.72], rtol=1e-15)


def test_linear_schedule_default_against_loop():
    sched = linear_schedule(400, 1e-4, 0.02)
    betas = [1e-4 + (0.02 - 1e-4) * i / 399 for i in range(400)]
    np.testing.assert_allclose(sched.beta_step, betas, rtol=1e-12)
    ref = cumulative_product_loop(betas)
    assert sched.alpha_bar[399] == pytest.approx(ref[-1], rel=1e-12)
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all((sched.alpha_bar > 0) & (sched.alpha_bar < 1))


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
def test_linear_schedule_invalid(args):
    with pytest.raises(ValueError):
        linear_schedule(*args)


@settings(max_examples=30, deadline=None)
@given(T=st.integers(1, 500), lo=st.floats(1e-5, 0.5), span=st.floats(0, 0.49))
def test_alpha_bar_strictly_decreasing(T, lo, span):
    sched = linear_schedule(T, lo, lo + span)
    assert np.all(np.diff(sched.alpha_bar) < 0)


def test_partition_complement_and_validation():
    p = SubspacePartition(6, lip=(0, 3), eye=(5,))
    assert p.global_ == (1, 2, 4)
    assert set(p.lip) | set(p.eye) | set(p.global_) == set(range(6))
    with pytest.raises(ValueError, match="overlap"):
        SubspacePartition(4, lip=(0, 1), eye=(1,))
    with pytest.raises(ValueError, match="cover"):
        SubspacePartition(4, lip=(0,), eye=(1,), global_=(2,))
    assert SubspacePartition.from_dict(p.to_dict()) == p


def test_partition_from_one_based_json():
    p = SubspacePartition.from_dict({"n_dims": 4, "indexing": 1, "lip": [1, 2], "eye": [3]})
    assert p.lip == (0, 1) and p.eye == (2,) and p.global_ == (3,)


@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_tensor_container_round_trip(tmp_path, dtype):
    a = np.arange(24, dtype=np.float64).reshape(2, 3, 4) / 7
    write_tensor(tmp_path / "x.pdt", a, dtype)
    raw = (tmp_path / "x.pdt").read_bytes()
    assert raw[:4] == b"PDT1" and raw[4] == (0 if dtype == "f32" else 1) and raw[5] == 3
    assert int.from_bytes(raw[6:14], "little") == 2
    b = read_tensor(tmp_path / "x.pdt")
    np.testing.assert_allclose(b, a, rtol=1e-7 if dtype == "f32" else 0)


def test_tensor_container_csv_fallback(tmp_path):
    a = np.array([[1.5, -2.0], [3.25, 1e-9]])
    write_tensor(tmp_path / "x.csv", a)
    np.testing.assert_array_equal(read_tensor(tmp_path / "x.csv"), a)


def test_tensor_container_errors_name_file(tmp_path):
    bad = tmp_path / "bad.pdt"
    bad.write_bytes(b"NOPE\x01\x01")
    with pytest.raises(FormatError, match="bad.pdt"):
        read_tensor(bad)
    write_tensor(tmp_path / "t.pdt", np.ones((3, 3)))
    raw = (tmp_path / "t.pdt").read_bytes()
    (tmp_path / "t.pdt").write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="t.pdt"):
        read_tensor(tmp_path / "t.pdt")
