from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transferlab.data import (
    EmpiricalDataset,
    SyntheticSpec,
    csv_io,
    dataset_from_csv,
    dataset_to_csv,
    generate_synthetic,
    make_toy_instance,
)


class TestEmpiricalDataset:
    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            EmpiricalDataset(np.zeros((3, 2)), np.zeros((2, 1)))

    def test_non_finite(self):
        with pytest.raises(ValueError):
            EmpiricalDataset([[np.inf]], [[0.0]])

    def test_empty(self):
        with pytest.raises(ValueError):
            EmpiricalDataset(np.zeros((0, 2)), np.zeros((0, 1)))


class TestSynthetic:
    @pytest.mark.parametrize("kind", ["gaussian-blobs", "low-dim-manifold", "linear-teacher"])
    def test_deterministic(self, kind):
        spec = SyntheticSpec(kind, input_dim=4, output_dim=2, n_source=30, n_target=20, seed=9)
        (s1, t1), (s2, t2) = generate_synthetic(spec), generate_synthetic(spec)
        assert dataset_to_csv(s1) == dataset_to_csv(s2)
        assert dataset_to_csv(t1) == dataset_to_csv(t2)
        assert len(s1) == 30 and len(t1) == 20

    def test_seed_changes_sample(self):
        a = generate_synthetic(SyntheticSpec("gaussian-blobs", 3, 2, seed=1))[0]
        b = generate_synthetic(SyntheticSpec("gaussian-blobs", 3, 2, seed=2))[0]
        assert not a.equals(b)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown"):
            generate_synthetic(SyntheticSpec("spirals", 2, 2))

    def test_blobs_same_law(self):
        s, t = generate_synthetic(SyntheticSpec("gaussian-blobs", 2, 3, n_source=4000, n_target=4000))
        np.testing.assert_allclose(s.inputs.mean(axis=0), t.inputs.mean(axis=0), atol=0.15)
        np.testing.assert_allclose(s.targets.mean(axis=0), t.targets.mean(axis=0), atol=0.05)

    def test_shift_applied(self):
        base = SyntheticSpec("gaussian-blobs", 2, 2, n_source=50, n_target=50, seed=3)
        shifted = SyntheticSpec("gaussian-blobs", 2, 2, n_source=50, n_target=50, seed=3, shift=(1.0, -2.0))
        t0, t1 = generate_synthetic(base)[1], generate_synthetic(shifted)[1]
        np.testing.assert_allclose(t1.inputs - t0.inputs, np.tile([1.0, -2.0], (50, 1)))

    def test_linear_teacher_negate(self):
        s, t = generate_synthetic(
            SyntheticSpec("linear-teacher", 1, 1, n_source=10, n_target=10, label_map="negate")
        )
        np.testing.assert_allclose(s.targets, 2 * s.inputs)
        np.testing.assert_allclose(t.targets, -2 * t.inputs)
        assert s.inputs.sum() == pytest.approx(0.0, abs=1e-12)

    def test_manifold_codimension(self):
        s, t = generate_synthetic(SyntheticSpec("low-dim-manifold", 5, 1, manifold_dim=2, n_source=100))
        for ds in (s, t):
            centered = ds.inputs - ds.inputs.mean(axis=0)
            assert np.linalg.matrix_rank(centered, tol=1e-8) <= 4


class TestCsv:
    def test_round_trip(self, tmp_path):
        ds = EmpiricalDataset([[0.1, 1 / 3], [2.0, -1e-300], [np.pi, 7.0]], [[1.0, 2.0], [0.0, 0.5], [3.0, 4.0]])
        path = tmp_path / "d.csv"
        csv_io(path, "write", ds)
        assert csv_io(path, "read").equals(ds)
        assert b"\r" not in path.read_bytes()

    def test_dims_inferred(self):
        ds = dataset_from_csv("x0,x1,y0\n1,2,3\n")
        assert ds.input_dim == 2 and ds.target_dim == 1

    def test_empty(self, tmp_path):
        path = tmp_path / "e.csv"
        path.write_text("")
        with pytest.raises(ValueError, match="no rows"):
            csv_io(path, "read")

    def test_header_only(self):
        with pytest.raises(ValueError, match="no rows"):
            dataset_from_csv("x0,y0\n")

    def test_ragged_line_number(self):
        with pytest.raises(ValueError, match="line 3"):
            dataset_from_csv("x0,y0\n1,2\n1,2,3\n")

    def test_non_numeric_line_number(self):
        with pytest.raises(ValueError, match="line 2"):
            dataset_from_csv("x0,y0\n1,abc\n")

    def test_write_needs_dataset(self, tmp_path):
        with pytest.raises(ValueError):
            csv_io(tmp_path / "x.csv", "write")

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=2, max_size=12))
    def test_property_round_trip(self, vals):
        n = len(vals) // 2
        arr = np.array(vals[: 2 * n]).reshape(n, 2)
        ds = EmpiricalDataset(arr[:, :1], arr[:, 1:])
        assert dataset_from_csv(dataset_to_csv(ds)).equals(ds)


class TestToy:
    def test_norm_average(self):
        toy = make_toy_instance([[0.0], [1.0]], [[3.0, 0.0], [3.0, 0.0]], [[3.0, 0.0], [3.0, 0.0]])
        assert toy.norm_yS == 3.0
        assert toy.norm_diff == 0.0

    def test_345(self):
        toy = make_toy_instance([[0.0], [1.0]], [[3.0, 0.0]] * 2, [[0.0, 4.0]] * 2)
        assert toy.norm_diff == pytest.approx(5.0)
        assert toy.norm_yT == pytest.approx(4.0)

    def test_zero_atoms(self):
        with pytest.raises(ValueError):
            make_toy_instance(np.zeros((0, 1)), np.zeros((0, 1)), np.zeros((0, 1)))

    def test_unequal_lengths(self):
        with pytest.raises(ValueError):
            make_toy_instance([[0.0]], [[1.0], [2.0]], [[1.0], [2.0]])
