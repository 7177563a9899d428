import struct

import numpy as np
import pytest

from conftest import brute_matmul, brute_softmax_row, fm
from qalign.errors import (
    BadMagic,
    IoFailure,
    KOutOfRange,
    NonFiniteValue,
    ShapeMismatch,
    TruncatedPayload,
    UnsupportedDtype,
    UnsupportedRank,
    UnsupportedVersion,
)
from qalign.tensor import (
    FeatureMatrix,
    load_csv,
    load_tensor,
    matmul,
    row_softmax,
    row_topk,
    save_tensor,
    tensor_bytes,
)


def _raw_file(tmp_path, shape, payload, version=1, dtype=0, flags=0, magic=b"QALN"):
    blob = struct.pack("<4sHBBI", magic, version, dtype, flags, len(shape))
    blob += np.asarray(shape, dtype="<u8").tobytes()
    blob += np.asarray(payload, dtype="<f4").tobytes()
    path = tmp_path / "t.qaln"
    path.write_bytes(blob)
    return path


class TestTensorFile:
    def test_identity_decode(self, tmp_path):
        path = _raw_file(tmp_path, (2, 2), [1, 0, 0, 1])
        m = load_tensor(path)
        assert m.rows == 2 and m.cols == 2 and m.grid is None
        assert np.array_equal(m.data, np.eye(2, dtype=np.float32))

    def test_3d_flattening(self, tmp_path):
        path = _raw_file(tmp_path, (2, 2, 3), list(range(12)))
        m = load_tensor(path)
        assert m.rows == 4 and m.cols == 3
        assert m.grid == (2, 2)
        assert np.array_equal(m.data.reshape(-1), np.arange(12, dtype=np.float32))

    def test_truncated_payload(self, tmp_path):
        path = _raw_file(tmp_path, (2, 2), [1, 0, 0])
        with pytest.raises(TruncatedPayload):
            load_tensor(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = _raw_file(tmp_path, (2, 2), [1, 0, 0, 1, 5])
        with pytest.raises(TruncatedPayload):
            load_tensor(path)

    def test_bad_magic(self, tmp_path):
        path = _raw_file(tmp_path, (2, 2), [1, 0, 0, 1], magic=b"NOPE")
        with pytest.raises(BadMagic):
            load_tensor(path)

    def test_unsupported_version(self, tmp_path):
        path = _raw_file(tmp_path, (2, 2), [1, 0, 0, 1], version=2)
        with pytest.raises(UnsupportedVersion):
            load_tensor(path)

    def test_unsupported_dtype(self, tmp_path):
        path = _raw_file(tmp_path, (2, 2), [1, 0, 0, 1], dtype=1)
        with pytest.raises(UnsupportedDtype):
            load_tensor(path)

    def test_unsupported_rank(self, tmp_path):
        path = _raw_file(tmp_path, (4,), [1, 0, 0, 1])
        with pytest.raises(UnsupportedRank):
            load_tensor(path)

    def test_non_finite_payload(self, tmp_path):
        path = _raw_file(tmp_path, (1, 2), [1, np.inf])
        with pytest.raises(NonFiniteValue):
            load_tensor(path)

    def test_roundtrip_bytes_identical(self, tmp_path):
        m = fm([[1, 0], [0, 1]])
        p1, p2 = tmp_path / "a.qaln", tmp_path / "b.qaln"
        save_tensor(m, p1)
        save_tensor(load_tensor(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_roundtrip_preserves_grid(self, tmp_path):
        m = fm(np.arange(12).reshape(4, 3), grid=(2, 2))
        path = tmp_path / "g.qaln"
        save_tensor(m, path)
        back = load_tensor(path)
        assert back.grid == (2, 2)
        assert np.array_equal(back.data, m.data)
        assert tensor_bytes(back) == path.read_bytes()

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(IoFailure):
            save_tensor(fm([[1.0]]), tmp_path / "no" / "such" / "dir" / "x.qaln")

    def test_random_roundtrips(self, tmp_path):
        rng = np.random.default_rng(0)
        for i in range(20):
            m = FeatureMatrix(rng.standard_normal((5, 7)).astype(np.float32))
            path = tmp_path / f"r{i}.qaln"
            save_tensor(m, path)
            assert np.array_equal(load_tensor(path).data, m.data)


class TestFeatureMatrix:
    def test_rejects_non_finite(self):
        with pytest.raises(NonFiniteValue):
            fm([[np.nan, 0.0]])

    def test_rejects_bad_grid(self):
        from qalign.errors import BadDimensions

        with pytest.raises(BadDimensions):
            fm([[1, 2], [3, 4]], grid=(3, 1))

    def test_data_is_read_only(self):
        m = fm([[1.0, 2.0]])
        with pytest.raises(ValueError):
            m.data[0, 0] = 5.0


class TestCsv:
    def test_load(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("1,2,3\n4,5,6\n")
        m = load_csv(path)
        assert m.rows == 2 and m.cols == 3
        assert m.data[1, 2] == 6.0


class TestMatmul:
    def test_identity(self):
        out = matmul(fm([[1, 0], [0, 1]]), fm([[3, 4], [5, 6]]))
        assert np.array_equal(out.data, np.array([[3, 4], [5, 6]], dtype=np.float32))

    def test_1x2_times_2x1(self):
        out = matmul(fm([[1, 2]]), fm([[3], [4]]))
        assert out.data.shape == (1, 1)
        assert out.data[0, 0] == 11.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            matmul(fm(np.zeros((2, 3))), fm(np.zeros((2, 2))))

    def test_transpose_b(self):
        a, b = fm([[1, 2], [3, 4]]), fm([[1, 0], [0, 2]])
        assert np.array_equal(matmul(a, b, transpose_b=True).data, a.data @ b.data.T)

    def test_against_triple_loop_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            a = rng.standard_normal((16, 16)).astype(np.float32)
            b = rng.standard_normal((16, 16)).astype(np.float32)
            got = matmul(fm(a), fm(b)).data.astype(np.float64)
            want = brute_matmul(a, b)
            denom = np.maximum(np.abs(want), 1.0)
            assert np.max(np.abs(got - want) / denom) < 1e-5


class TestRowSoftmax:
    def test_symmetric_row(self):
        out = row_softmax(fm([[0.0, 0.0]]), 1.0)
        assert np.allclose(out.data, [[0.5, 0.5]])

    def test_huge_logit_does_not_overflow(self):
        out = row_softmax(fm([[1e4, 0.0]]), 1.0)
        assert np.all(np.isfinite(out.data))
        assert abs(out.data[0, 0] - 1.0) < 1e-6
        assert out.data[0, 1] < 1e-6

    def test_scalar_oracle_value(self):
        # Independently computed: exp(1/sqrt(2)) / (exp(1/sqrt(2)) + 1).
        out = row_softmax(fm([[1.0, 0.0]]), 1.0 / np.sqrt(2.0))
        assert out.data[0, 0] == pytest.approx(0.6697615493266569, abs=1e-6)
        assert out.data[0, 1] == pytest.approx(0.3302384506733431, abs=1e-6)

    def test_rows_sum_to_one_property(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            n, d = rng.integers(1, 12, size=2)
            m = fm(rng.standard_normal((n, d)) * rng.uniform(0.1, 50))
            scale = float(rng.uniform(0.05, 4.0))
            sums = row_softmax(m, scale).data.sum(axis=1)
            assert np.max(np.abs(sums - 1.0)) < 1e-6

    def test_matches_scalar_oracle_rows(self):
        rng = np.random.default_rng(3)
        m = rng.standard_normal((6, 5)).astype(np.float32)
        out = row_softmax(fm(m), 0.7)
        for r in range(6):
            want = brute_softmax_row(m[r], 0.7)
            assert np.allclose(out.data[r], want, atol=1e-6)


class TestRowTopk:
    def test_single_max(self):
        assert row_topk(fm([[0.1, 0.9, 0.5]]), 1).tolist() == [[1]]

    def test_tie_breaks_to_lowest_index(self):
        assert row_topk(fm([[0.5, 0.5]]), 1).tolist() == [[0]]

    def test_k2(self):
        assert row_topk(fm([[3, 1, 2]]), 2).tolist() == [[0, 2]]

    def test_k_out_of_range(self):
        with pytest.raises(KOutOfRange):
            row_topk(fm([[1, 2]]), 3)
        with pytest.raises(KOutOfRange):
            row_topk(fm([[1, 2]]), 0)

    def test_selection_property(self):
        rng = np.random.default_rng(23)
        for _ in range(50):
            n, d = int(rng.integers(1, 8)), int(rng.integers(2, 10))
            k = int(rng.integers(1, d + 1))
            m = rng.standard_normal((n, d)).astype(np.float32)
            idx = row_topk(fm(m), k)
            for r in range(n):
                sel = idx[r].tolist()
                assert len(set(sel)) == k
                rest = [c for c in range(d) if c not in sel]
                if rest:
                    assert min(m[r, sel]) >= max(m[r, rest])
