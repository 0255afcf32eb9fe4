import logging
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tsfo.data import (
    TimeSeriesDataset,
    WindowSpec,
    load_ucr_delimited,
    load_ucr_pair,
    min_max_normalize,
    normalize_dataset,
    resample_linear,
    segment_windows,
    subject_wise_split,
    synth_generate,
    window_count,
)
from tsfo.errors import InputError, ParseError


class TestLoader:
    def test_tab_separated(self, tmp_path):
        path = tmp_path / "toy.tsv"
        path.write_text("1\t0.5\t0.6\t0.7\n2\t1.0\t1.1\t1.2\n")
        ds = load_ucr_delimited(path)
        assert ds.instances.shape == (2, 1, 3)
        assert ds.labels.tolist() == [0, 1]

    def test_comma_separated_sparse_labels_remap(self, tmp_path):
        path = tmp_path / "toy.csv"
        path.write_text("9,1.0,2.0\n5,3.0,4.0\n")
        ds = load_ucr_delimited(path)
        assert ds.label_map == {"5": 0, "9": 1}
        assert ds.labels.tolist() == [1, 0]

    def test_ragged_rows_report_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1,1.0,2.0\n2,3.0\n")
        with pytest.raises(ParseError, match="line 2"):
            load_ucr_delimited(path)

    def test_bad_value_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1,1.0,2.0\n2,oops,4.0\n")
        with pytest.raises(ParseError, match="line 2"):
            load_ucr_delimited(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("\n")
        with pytest.raises(ParseError):
            load_ucr_delimited(path)

    def test_pair_keeps_predefined_split(self, tmp_path):
        train = tmp_path / "X_TRAIN.txt"
        test = tmp_path / "X_TEST.txt"
        train.write_text("1,0.0,1.0\n2,2.0,3.0\n")
        test.write_text("2,4.0,5.0\n")
        ds = load_ucr_pair(train, test)
        assert len(ds) == 3
        tr_idx, te_idx = ds.predefined_split
        assert tr_idx.tolist() == [0, 1] and te_idx.tolist() == [2]


UCR_DIR = os.environ.get("TSFO_UCR_DIR")


@pytest.mark.skipif(not UCR_DIR, reason="set TSFO_UCR_DIR to run archive shape checks")
class TestUcrArchiveShapes:
    def test_refrigeration_devices(self):
        ds = load_ucr_delimited(
            os.path.join(UCR_DIR, "RefrigerationDevices", "RefrigerationDevices_TRAIN.tsv")
        )
        assert len(ds) == 375
        assert ds.seq_len == 720
        assert ds.num_classes == 3

    def test_electric_devices(self):
        train = load_ucr_delimited(
            os.path.join(UCR_DIR, "ElectricDevices", "ElectricDevices_TRAIN.tsv")
        )
        test = load_ucr_delimited(
            os.path.join(UCR_DIR, "ElectricDevices", "ElectricDevices_TEST.tsv")
        )
        assert len(train) == 8926
        assert len(test) == 7711
        assert train.seq_len == test.seq_len == 96
        assert train.num_classes == 7


class TestNormalize:
    def test_basic(self):
        assert np.allclose(min_max_normalize([2.0, 4.0, 6.0]), [0.0, 0.5, 1.0])

    def test_idempotent_on_normalized(self):
        x = np.array([0.0, 0.25, 1.0], np.float32)
        assert np.allclose(min_max_normalize(x), x)

    def test_constant_midpoint(self):
        assert np.allclose(min_max_normalize([7.0, 7.0, 7.0]), [0.5, 0.5, 0.5])

    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=50))
    def test_range_invariant(self, values):
        out = min_max_normalize(np.array(values, np.float32))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_dataset_wrapper(self):
        ds = synth_generate(2, 3, 32, 0.5, seed=0)
        norm = normalize_dataset(ds)
        assert norm.instances.min() >= 0.0 and norm.instances.max() <= 1.0


class TestResample:
    def test_linear_midpoint(self):
        assert np.allclose(resample_linear([0.0, 2.0], 3), [0.0, 1.0, 2.0])

    def test_identity_length(self):
        x = np.array([1.0, 5.0, 2.0], np.float32)
        assert np.allclose(resample_linear(x, 3), x)

    def test_hand_interpolation(self):
        assert np.allclose(resample_linear([0.0, 1.0, 4.0], 5), [0.0, 0.5, 1.0, 2.5, 4.0])

    def test_endpoints_preserved(self):
        x = np.array([3.0, -1.0, 7.0, 2.0], np.float32)
        out = resample_linear(x, 9)
        assert out[0] == 3.0 and out[-1] == 2.0

    def test_too_short_rejected(self):
        with pytest.raises(InputError):
            resample_linear([1.0], 5)


class TestWindows:
    def test_count_and_offsets(self):
        x = np.arange(5, dtype=np.float32)[None, :]
        windows = segment_windows(x, WindowSpec(3, 1))
        assert len(windows) == 3
        assert [w[0, 0] for w in windows] == [0.0, 1.0, 2.0]

    def test_whole_series_window(self):
        x = np.zeros((1, 7), np.float32)
        assert len(segment_windows(x, WindowSpec(7, 7))) == 1

    def test_non_overlapping_tiling(self):
        x = np.zeros((1, 12), np.float32)
        assert len(segment_windows(x, WindowSpec(4, 4))) == 3

    def test_window_longer_than_series(self):
        with pytest.raises(InputError):
            segment_windows(np.zeros((1, 3), np.float32), WindowSpec(4, 4))

    def test_windows_inherit_label_and_subject(self):
        ds = synth_generate(3, 4, 64, 0.0, seed=5)
        from tsfo.data import window_dataset

        windowed = window_dataset(ds, WindowSpec(32, 16))
        per_series = window_count(64, 32, 16)
        assert len(windowed) == len(ds) * per_series
        for i in range(len(ds)):
            chunk = slice(i * per_series, (i + 1) * per_series)
            assert np.all(windowed.labels[chunk] == ds.labels[i])
            assert np.all(windowed.subjects[chunk] == ds.subjects[i])

    def test_exhaustive_formula_to_t100(self):
        x = np.zeros((1, 100), dtype=np.float32)
        for t in range(1, 101):
            for w in range(1, t + 1):
                for s in range(1, w + 1):
                    got = len(segment_windows(x[:, :t], WindowSpec(w, s)))
                    assert got == window_count(t, w, s)


def toy_subjects_dataset():
    subjects = np.array(["a"] * 3 + ["b"] + ["c"] * 2 + ["d"] * 2)
    return TimeSeriesDataset(
        name="toy",
        instances=np.arange(8, dtype=np.float32).reshape(8, 1, 1).repeat(16, axis=2),
        labels=np.array([0, 1, 0, 1, 0, 1, 0, 1]),
        label_map={0: 0, 1: 1},
        subjects=subjects,
    )


class TestSubjectSplit:
    def test_four_subjects_half(self):
        ds = toy_subjects_dataset()
        train, test = subject_wise_split(ds, 0.5, seed=0)
        assert len(set(train.subjects) & set(test.subjects)) == 0
        assert len(set(train.subjects)) == 2
        assert len(set(test.subjects)) == 2

    def test_deterministic(self):
        ds = toy_subjects_dataset()
        a = subject_wise_split(ds, 0.5, seed=11)
        b = subject_wise_split(ds, 0.5, seed=11)
        assert np.array_equal(a[0].instances, b[0].instances)

    def test_golden_assignment_seed_42(self):
        train, test = subject_wise_split(toy_subjects_dataset(), 0.5, seed=42)
        assert sorted(set(train.subjects.tolist())) == ["c", "d"]
        assert sorted(set(test.subjects.tolist())) == ["a", "b"]
        assert len(train) == 4 and len(test) == 4

    def test_partition_property_random_assignments(self):
        rng = np.random.default_rng(0)
        for trial in range(200):
            n_subjects = int(rng.integers(2, 9))
            n = int(rng.integers(n_subjects, 40))
            subjects = np.array(
                [f"s{rng.integers(0, n_subjects)}" for _ in range(n_subjects)]
                + [f"s{rng.integers(0, n_subjects)}" for _ in range(n - n_subjects)]
            )
            # make sure every subject id actually appears at least once
            subjects[:n_subjects] = [f"s{i}" for i in range(n_subjects)]
            ds = TimeSeriesDataset(
                name="r",
                instances=np.zeros((n, 1, 16), np.float32),
                labels=np.zeros(n, dtype=np.int64),
                label_map={0: 0},
                subjects=subjects,
            )
            train, test = subject_wise_split(ds, float(rng.uniform(0.2, 0.8)), seed=trial)
            assert len(train) + len(test) == n
            assert set(train.subjects) | set(test.subjects) == set(subjects)
            assert not set(train.subjects) & set(test.subjects)

    def test_missing_subjects_falls_back_to_predefined(self, caplog, tmp_path):
        train = tmp_path / "T_TRAIN.txt"
        test = tmp_path / "T_TEST.txt"
        train.write_text("1,0.0,1.0\n1,2.0,3.0\n")
        test.write_text("1,4.0,5.0\n")
        ds = load_ucr_pair(train, test)
        with caplog.at_level(logging.WARNING):
            tr, te = subject_wise_split(ds, 0.5, seed=0)
        assert "predefined" in caplog.text
        assert len(tr) == 2 and len(te) == 1

    def test_no_subjects_no_predefined_rejected(self):
        ds = synth_generate(2, 3, 32, 0.0, seed=0)
        ds.subjects = None
        with pytest.raises(InputError):
            subject_wise_split(ds, 0.5, seed=0)


def nearest_neighbor_accuracy(train, test):
    """Brute-force 1-NN on raw series (independent separability oracle)."""
    correct = 0
    flat_train = train.instances.reshape(len(train), -1)
    for x, y in zip(test.instances, test.labels):
        dists = np.linalg.norm(flat_train - x.ravel(), axis=1)
        correct += int(train.labels[np.argmin(dists)] == y)
    return correct / len(test)


class TestSynth:
    def test_zero_noise_identical_within_class(self):
        ds = synth_generate(3, 5, 64, 0.0, seed=1)
        for c in range(3):
            members = ds.instances[ds.labels == c]
            assert all(np.array_equal(members[0], m) for m in members)

    def test_same_seed_bit_identical(self):
        a = synth_generate(3, 4, 64, 0.1, seed=9)
        b = synth_generate(3, 4, 64, 0.1, seed=9)
        assert np.array_equal(a.instances, b.instances)

    def test_household_round_robin(self):
        ds = synth_generate(2, 12, 32, 0.0, seed=0)
        assert len(set(ds.subjects.tolist())) == 3  # ceil(12 / 5)

    def test_golden_one_nn_separability(self):
        ds = synth_generate(3, 30, 96, 0.05, seed=42)
        train, test = subject_wise_split(ds, 0.5, seed=42)
        assert nearest_neighbor_accuracy(train, test) >= 0.95

    def test_validation(self):
        with pytest.raises(InputError):
            synth_generate(1, 5, 64, 0.0, seed=0)
        with pytest.raises(InputError):
            synth_generate(3, 5, 8, 0.0, seed=0)
