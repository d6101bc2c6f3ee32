import numpy as np
import pytest

from remap.errors import ContractError, DataError, FormatError
from remap.pq import (PQCodebook, adc_distances, adc_search, distance_table,
                      load_codebook, pq_decode, pq_encode, pq_train,
                      read_codes, save_codebook, truncate, write_codes)


def test_truncate_renormalizes():
    x = np.array([0.6, 0.0, 0.8, 0.0])
    out = truncate(x, 3)
    assert out.shape == (3,)
    assert np.allclose(out, [0.6, 0.0, 0.8])  # already unit after the cut
    out2 = truncate(np.array([3.0, 4.0, 12.0]), 2)
    assert np.allclose(out2, [0.6, 0.8])


def test_truncate_edge_cases():
    zeros = truncate(np.zeros(5), 3)
    assert np.array_equal(zeros, np.zeros(3))  # zero stays zero, no NaN
    full = truncate(np.array([0.0, 1.0]), 2)
    assert np.array_equal(full, [0.0, 1.0])
    with pytest.raises(ContractError):
        truncate(np.ones(3), 4)
    with pytest.raises(ContractError):
        truncate(np.ones(3), 0)


def test_kmeans_recovers_distinct_points():
    # k points, k clusters: distortion must reach exactly zero
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(8, 4)) * 10
    data = np.repeat(pts, 5, axis=0)
    book = pq_train(data, m=1, k=8, seed=0)
    assert book.histories[0][-1] == 0.0
    got = np.sort(book.centroids[0], axis=0)
    assert np.allclose(got, np.sort(pts, axis=0), atol=1e-12)


def test_kmeans_k1_is_the_mean():
    rng = np.random.default_rng(1)
    data = rng.normal(size=(100, 6))
    book = pq_train(data, m=2, k=1, seed=0)
    assert np.allclose(book.centroids[0][0], data[:, :3].mean(axis=0))
    assert np.allclose(book.centroids[1][0], data[:, 3:].mean(axis=0))


def test_distortion_history_is_monotone():
    rng = np.random.default_rng(2)
    data = rng.normal(size=(400, 8))
    book = pq_train(data, m=2, k=16, seed=3)
    assert len(book.histories) == 2
    for hist in book.histories:
        arr = np.asarray(hist)
        assert arr.size >= 1
        assert (np.diff(arr) <= 1e-12).all()


def test_pq_train_argument_checks():
    data = np.random.default_rng(0).normal(size=(10, 8))
    with pytest.raises(ContractError):
        pq_train(data, m=3, k=4, seed=0)  # 8 % 3 != 0
    with pytest.raises(ContractError):
        pq_train(data, m=2, k=300, seed=0)  # k > 256 breaks one-byte codes
    with pytest.raises(DataError):
        pq_train(data, m=2, k=16, seed=0)  # fewer points than centroids


def test_encode_decode_shapes_and_ties():
    centroids = np.zeros((2, 3, 2), dtype=np.float64)
    centroids[0] = [[0.0, 0.0], [1.0, 0.0], [0.5, 0.5]]
    centroids[1] = [[1.0, 1.0], [1.0, 1.0], [2.0, 2.0]]  # 0 and 1 identical
    book = PQCodebook(centroids=centroids)
    x = np.array([[0.0, 0.0, 1.0, 1.0]])
    codes = pq_encode(book, x)
    assert codes.dtype == np.uint8
    assert codes.shape == (1, 2)
    assert codes[0, 0] == 0
    assert codes[0, 1] == 0  # tie between codewords 0 and 1: lowest index
    back = pq_decode(book, codes)
    assert np.allclose(back, [[0.0, 0.0, 1.0, 1.0]])


def test_adc_equals_decoded_distance_exactly():
    # the table path must be bitwise identical to decoding and measuring
    rng = np.random.default_rng(7)
    data = rng.normal(size=(300, 16)).astype(np.float64)
    book = pq_train(data, m=4, k=8, seed=1)
    codes = pq_encode(book, data)
    decoded = pq_decode(book, codes)
    sub = book.sub_dim
    for _ in range(5):
        q = rng.normal(size=16)
        table = distance_table(book, q)
        fast = adc_distances(table, codes)
        # the oracle mirrors the block accumulation order but never builds
        # a table: per-vector, per-block squared distances, summed
        slow = np.zeros(decoded.shape[0])
        for b in range(book.m):
            lo, hi = b * sub, (b + 1) * sub
            slow += np.sum((decoded[:, lo:hi] - q[lo:hi]) ** 2, axis=1)
        assert np.array_equal(fast, slow)


def test_adc_search_orders_by_distance_then_id():
    centroids = np.zeros((1, 2, 2))
    centroids[0] = [[0.0, 0.0], [1.0, 0.0]]
    book = PQCodebook(centroids=centroids)
    codes = np.array([[1], [0], [1]], dtype=np.uint8)
    ids = ["zed", "mid", "abc"]
    ranked = adc_search(book, np.array([1.0, 0.0]), codes, ids)
    assert [i for i, _ in ranked] == ["abc", "zed", "mid"]
    assert ranked[0][1] == 0.0
    assert ranked[2][1] == 1.0


def test_codebook_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    data = rng.normal(size=(200, 12))
    book = pq_train(data, m=3, k=4, seed=5)
    path = tmp_path / "book.pqcb"
    save_codebook(book, path)
    again = load_codebook(path)
    assert np.array_equal(again.centroids,
                          book.centroids.astype(np.float32).astype(np.float64))
    assert again.code_bytes() == 3
    assert again.histories == ()  # diagnostics stay behind
    raw = path.read_bytes()
    assert raw[:8] == b"RMAPPQCB"


def test_codebook_rejects_corruption(tmp_path):
    rng = np.random.default_rng(3)
    book = pq_train(rng.normal(size=(50, 4)), m=2, k=4, seed=0)
    path = tmp_path / "book.pqcb"
    save_codebook(book, path)
    raw = bytearray(path.read_bytes())
    raw[0] = ord("X")
    bad = tmp_path / "bad.pqcb"
    bad.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_codebook(bad)
    trunc = tmp_path / "trunc.pqcb"
    trunc.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_codebook(trunc)


def test_codes_file_round_trip(tmp_path):
    codes = np.array([[0, 255, 3], [7, 1, 2]], dtype=np.uint8)
    ids = ["first", "second_longer_name"]
    path = tmp_path / "codes.bin"
    write_codes(ids, codes, path)
    got_ids, got_codes = read_codes(path, m=3)
    assert got_ids == ids
    assert np.array_equal(got_codes, codes)
    with pytest.raises(FormatError):
        read_codes(path, m=4)  # record boundaries stop lining up


def test_train_encode_search_end_to_end():
    # clustered data: ADC should rank the query's own cluster first
    rng = np.random.default_rng(9)
    centers = rng.normal(size=(4, 8)) * 5
    data = np.vstack([c + rng.normal(size=(30, 8)) * 0.1 for c in centers])
    ids = [f"v{i:03d}" for i in range(data.shape[0])]
    book = pq_train(data, m=2, k=8, seed=0)
    codes = pq_encode(book, data)
    ranked = adc_search(book, data[0], codes, ids)
    top30 = {i for i, _ in ranked[:30]}
    assert len(top30 & {f"v{i:03d}" for i in range(30)}) >= 28
