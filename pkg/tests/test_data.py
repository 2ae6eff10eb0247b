import numpy as np
import pytest
from scipy.special import ndtri

from tempodiff import data
from tempodiff.data import (ACTIVITIES, ACTIVITY_ID, DataFormatError, DegenerateDataError, RawRecord,
                            SequenceWindow, make_mask, parse_raw, quantile_fit, quantile_inverse,
                            quantile_transform, segment_windows, stratified_split, toy_dataset)
from tempodiff.metrics import acf
from tempodiff.nn import ParameterError


def test_activity_ids_alphabetical():
    assert list(ACTIVITIES) == sorted(ACTIVITIES)
    assert len(ACTIVITIES) == 6 and ACTIVITY_ID["Downstairs"] == 0 and ACTIVITY_ID["Walking"] == 5


class TestParse:
    def test_wisdm_line(self, tmp_path):
        f = tmp_path / "raw.txt"
        f.write_text("33,Jogging,49105962326000,-0.69,12.68,0.50;\n")
        recs, skipped = parse_raw(f)
        assert skipped == 0
        assert recs == [RawRecord(33, ACTIVITY_ID["Jogging"], 49105962326000, -0.69, 12.68, 0.5)]

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        recs = [RawRecord(int(rng.integers(1, 30)), int(rng.integers(0, 6)), int(rng.integers(0, 10**14)),
                          *rng.normal(0, 5, 3)) for _ in range(50)]
        f = tmp_path / "raw.txt"
        f.write_text("\n".join(data.format_line(r) for r in recs) + "\n")
        assert parse_raw(f)[0] == recs

    def test_skips_bad_lines(self, tmp_path):
        f = tmp_path / "raw.txt"
        f.write_text("1,Walking,100,0.1,0.2,0.3;\n1,Dancing,150,0,0,0;\n1,Walking,oops,0,0,0\n1,Walking,200,1,2\n")
        recs, skipped = parse_raw(f)
        assert len(recs) == 1 and skipped == 3

    def test_user_filter(self, tmp_path):
        f = tmp_path / "raw.txt"
        f.write_text("1,Walking,100,0,0,0;\n2,Walking,100,0,0,0;\n3,Sitting,100,0,0,0;\n")
        recs, _ = parse_raw(f, users=[1, 3])
        assert [r.user for r in recs] == [1, 3]

    def test_empty_file(self, tmp_path):
        f = tmp_path / "raw.txt"
        f.write_text("")
        with pytest.raises(DataFormatError):
            parse_raw(f)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            parse_raw(tmp_path / "nope.txt")


def make_run(n, user=1, activity=5, start=0, period=50):
    return [RawRecord(user, activity, start + i * period, float(i), 0.0, 0.0) for i in range(n)]


class TestSegment:
    @pytest.mark.parametrize("L,expected", [(250, [0, 50, 100, 150]), (100, [0]), (99, []), (149, [0]),
                                            (150, [0, 50])])
    def test_offsets(self, L, expected):
        assert data.window_offsets(L, 100, 50) == expected
        # count formula floor((L - T) / stride) + 1
        assert len(expected) == (max((L - 100) // 50 + 1, 0) if L >= 100 else 0)

    def test_windows_follow_offsets(self):
        wins = segment_windows(make_run(250))
        assert [w.x0[0, 0] for w in wins] == [0.0, 50.0, 100.0, 150.0]
        assert all(w.x0.shape == (100, 3) for w in wins)

    def test_majority_label(self):
        recs = make_run(60, activity=ACTIVITY_ID["Walking"]) + \
            make_run(40, activity=ACTIVITY_ID["Jogging"], start=60 * 50)
        (w,) = segment_windows(recs)
        assert w.y == ACTIVITY_ID["Walking"]

    def test_tie_lowest_id(self):
        assert data.majority_label([5] * 50 + [1] * 50) == 1

    def test_never_mixes_users(self):
        recs = make_run(80, user=1) + make_run(80, user=2, start=80 * 50)
        assert segment_windows(recs) == []
        wins = segment_windows(make_run(120, user=1) + make_run(130, user=2))
        assert sorted(w.user for w in wins) == [1, 2]

    def test_gap_breaks_run(self):
        recs = make_run(80) + make_run(80, start=80 * 50 + 600)
        assert segment_windows(recs) == []
        recs = make_run(80) + make_run(80, start=80 * 50 + 400)
        assert len(segment_windows(recs)) == 2


class TestQuantile:
    def setup_method(self):
        self.rng = np.random.default_rng(0)
        self.train = np.column_stack([self.rng.exponential(2.0, 999), self.rng.normal(3, 1, 999)])

    def test_references_monotone(self):
        q = quantile_fit(self.train)
        assert np.all(np.diff(q.references, axis=0) >= 0)

    def test_median_maps_to_zero(self):
        q = quantile_fit(self.train)
        z = quantile_transform(np.median(self.train, axis=0)[None, :], q)
        np.testing.assert_allclose(z, 0.0, atol=1e-9)

    def test_round_trip(self):
        q = quantile_fit(self.train)
        vals = self.train[self.rng.choice(len(self.train), 1000)]
        np.testing.assert_allclose(quantile_inverse(quantile_transform(vals, q), q), vals, atol=1e-6)

    def test_round_trip_inside_range(self):
        big = self.rng.normal(size=(20000, 1))
        q = quantile_fit(big)
        vals = self.rng.uniform(big.min(), big.max(), size=(1000, 1))
        np.testing.assert_allclose(quantile_inverse(quantile_transform(vals, q), q), vals, atol=1e-6)

    def test_clip_above_max(self):
        q = quantile_fit(self.train)
        z = quantile_transform(self.train.max(axis=0)[None, :] + 100, q)
        assert np.all(np.isfinite(z)) and np.all(z <= ndtri(1 - 1e-7) + 1e-12)

    def test_approximately_standard_normal(self):
        big = self.rng.gamma(2.0, size=(20000, 2))
        z = quantile_transform(big, quantile_fit(big))
        assert np.all(np.abs(z.mean(axis=0)) < 0.05) and np.all(np.abs(z.std(axis=0) - 1) < 0.05)

    def test_degenerate(self):
        with pytest.raises(DegenerateDataError):
            quantile_fit(np.column_stack([np.ones(10), np.arange(10.0)]))

    def test_sidecar_round_trip(self, tmp_path):
        q = quantile_fit(self.train)
        q.save(tmp_path / "q.txt")
        q2 = data.QuantileMap.load(tmp_path / "q.txt")
        assert q2.references.tobytes() == q.references.tobytes()
        assert q2.fingerprint() == q.fingerprint()

    def test_ties(self):
        vals = np.repeat(np.arange(5.0), 40)[:, None]
        q = quantile_fit(vals)
        np.testing.assert_allclose(quantile_inverse(quantile_transform(vals, q), q), vals, atol=1e-6)


class TestMask:
    def test_complete(self):
        assert np.all(make_mask(np.zeros((100, 3))) == 1)

    def test_nan_entries_missing(self):
        w = np.zeros((4, 2))
        w[1, 0] = np.nan
        M = make_mask(w)
        assert M[1, 0] == 0 and M.sum() == 7

    def test_rate_one_rejected(self, rng):
        with pytest.raises(ParameterError):
            make_mask(np.zeros((2, 2)), 1.0, rng)

    def test_rate_concentration(self, rng):
        M = make_mask(np.zeros((1000, 100)), 0.2, rng)
        assert abs((M == 0).mean() - 0.2) < 0.01

    def test_normalize_zero_fills(self, rng):
        raw = toy_dataset(5, T_seq=20, D=2, n_classes=2, rng=rng)
        q = quantile_fit(np.concatenate([w.x0 for w in raw]))
        out = data.normalize_windows(raw, q, missing_rate=0.3, rng=rng)
        for w in out:
            assert set(np.unique(w.M)) <= {0.0, 1.0}
            assert np.all(w.x0[w.M == 0] == 0)


class TestSplit:
    def windows(self, counts):
        return [SequenceWindow(np.zeros((2, 1)), c) for c, n in enumerate(counts) for _ in range(n)]

    def test_arithmetic(self):
        s = stratified_split(self.windows([100]), seed=0)
        assert (len(s.train), len(s.val), len(s.test)) == (64, 16, 20)

    def test_disjoint_and_stratified(self):
        counts = [37, 100, 8, 251]
        s = stratified_split(self.windows(counts), seed=3)
        ids = [set(s.train_idx), set(s.val_idx), set(s.test_idx)]
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
        assert len(ids[0] | ids[1] | ids[2]) == sum(counts)
        test_counts = np.bincount([w.y for w in s.test], minlength=4)
        for n, k in zip(counts, test_counts):
            assert abs(k - 0.2 * n) <= 1

    def test_single_window_class_goes_to_train(self):
        with pytest.warns(UserWarning):
            s = stratified_split(self.windows([10, 1]), seed=0)
        assert [w.y for w in s.train].count(1) == 1

    def test_deterministic(self):
        w = self.windows([30, 20])
        a, b = stratified_split(w, seed=5), stratified_split(w, seed=5)
        assert np.array_equal(a.test_idx, b.test_idx) and np.array_equal(a.val_idx, b.val_idx)
        assert not np.array_equal(a.test_idx, stratified_split(w, seed=6).test_idx)


class TestToy:
    def test_static_class_low_variance(self, rng):
        wins = toy_dataset(20, T_seq=64, D=3, n_classes=3, rng=rng)
        var = {c: np.mean([w.x0.var() for w in wins if w.y == c]) for c in range(3)}
        assert var[0] < var[1] and var[0] < var[2]

    @pytest.mark.parametrize("label", [1, 2])
    def test_acf_peak_at_period(self, label):
        wins = toy_dataset(30, T_seq=100, D=1, n_classes=3, rng=np.random.default_rng(0))
        seqs = np.stack([w.x0 for w in wins if w.y == label])
        period = 100 // data.toy_frequency(label)
        a = acf(seqs, 0, 60).values
        lo = period // 2
        assert abs(np.argmax(a[lo:lo + period]) + lo - period) <= 2

    def test_deterministic(self):
        a = toy_dataset(4, T_seq=10, D=2, n_classes=3, rng=np.random.default_rng(1))
        b = toy_dataset(4, T_seq=10, D=2, n_classes=3, rng=np.random.default_rng(1))
        assert all(np.array_equal(x.x0, y.x0) and x.y == y.y for x, y in zip(a, b))

    def test_per_class_counts(self, rng):
        wins = toy_dataset([5, 2, 3], T_seq=8, D=2, n_classes=3, rng=rng)
        assert np.bincount([w.y for w in wins]).tolist() == [5, 2, 3]


def test_windows_csv_round_trip(tmp_path, rng):
    wins = toy_dataset(3, T_seq=6, D=3, n_classes=2, rng=rng)
    wins[0].M[2, 1] = 0
    data.write_windows_csv(tmp_path / "w.csv", wins, seq_ids=range(10, 16))
    ids, back = data.read_windows_csv(tmp_path / "w.csv")
    assert ids == list(range(10, 16))
    for a, b in zip(wins, back):
        assert a.x0.tobytes() == b.x0.tobytes() and a.y == b.y and np.array_equal(a.M, b.M)
