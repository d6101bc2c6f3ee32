"""Descriptor compaction: truncation and product quantization.

PQ splits a D-dim descriptor into m contiguous sub-blocks and learns a
k-centroid codebook per block with Lloyd's algorithm (k-means++ seeds).
Codes are the per-block centroid indices; search uses an asymmetric
distance table so query-to-code distance is exactly the squared
Euclidean distance to the decoded vector, with blocks summed in index
order to pin down float associativity.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .aggregate import l2_normalize
from .errors import ContractError, DataError, FormatError

CODEBOOK_MAGIC = b"RMAPPQCB"
CODEBOOK_VERSION = 1

DEFAULT_K = 256
DEFAULT_ITERS = 25
REL_IMPROVEMENT_STOP = 1e-4


def truncate(descriptor: np.ndarray, d: int) -> np.ndarray:
    """First d components, renormalized; a cheap compaction baseline."""
    v = np.asarray(descriptor, dtype=np.float64)
    if d < 1 or d > v.shape[0]:
        raise ContractError(f"truncate dim must be in [1, {v.shape[0]}], got {d}")
    return l2_normalize(v[:d].copy())


def _kmeans_plus_plus(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    centroids = np.empty((k, data.shape[1]), dtype=np.float64)
    centroids[0] = data[rng.integers(n)]
    d2 = np.sum((data - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining mass sits on chosen points; any point works
            centroids[j] = data[rng.integers(n)]
            continue
        probs = d2 / total
        centroids[j] = data[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((data - centroids[j]) ** 2, axis=1))
    return centroids


def _lloyd(data: np.ndarray, k: int, iters: int, rng: np.random.Generator):
    """Lloyd iterations; returns (centroids, distortion history).

    Distortion is the mean squared distance to the assigned centroid,
    measured at each assignment step, and is non-increasing: empty
    clusters are re-seeded from the current farthest point before means
    are recomputed, which can only tighten the next assignment.
    """
    centroids = _kmeans_plus_plus(data, k, rng)
    history = []
    prev = None
    for _ in range(iters):
        d2 = (np.sum(data ** 2, axis=1)[:, None]
              - 2.0 * data @ centroids.T
              + np.sum(centroids ** 2, axis=1)[None, :])
        assign = np.argmin(d2, axis=1)
        point_d2 = np.sum((data - centroids[assign]) ** 2, axis=1)
        distortion = float(point_d2.mean())
        history.append(distortion)
        empties = [j for j in range(k) if not np.any(assign == j)]
        for j in empties:
            far = int(np.argmax(point_d2))
            centroids[j] = data[far]
            assign[far] = j
            point_d2[far] = 0.0
        for j in range(k):
            members = data[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
        if prev is not None and prev > 0 and (prev - distortion) / prev < REL_IMPROVEMENT_STOP:
            break
        if distortion == 0.0:
            break
        prev = distortion
    return centroids, history


@dataclass
class PQCodebook:
    """Per-block centroids, shape (m, k, sub_dim); dim = m * sub_dim.

    histories holds the per-block distortion curve from training. It is a
    diagnostic only: save_codebook does not persist it.
    """

    centroids: np.ndarray
    histories: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 3:
            raise ContractError("PQ centroids must have shape (m, k, sub_dim)")

    @property
    def m(self) -> int:
        return self.centroids.shape[0]

    @property
    def k(self) -> int:
        return self.centroids.shape[1]

    @property
    def sub_dim(self) -> int:
        return self.centroids.shape[2]

    @property
    def dim(self) -> int:
        return self.m * self.sub_dim

    def code_bytes(self) -> int:
        return self.m  # one uint8 index per block while k <= 256


def pq_train(vectors: np.ndarray, m: int, k: int = DEFAULT_K,
             iters: int = DEFAULT_ITERS, seed: int = 0) -> PQCodebook:
    """Fit per-block codebooks on the training vectors.

    Each block gets its own rng stream (seed + block index) so adding
    blocks never perturbs earlier ones.
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise ContractError("pq_train expects a 2-d matrix of vectors")
    n, dim = X.shape
    if m < 1 or dim % m != 0:
        raise ContractError(f"descriptor dim {dim} is not divisible by m={m}")
    if not 1 <= k <= 256:
        raise ContractError(f"k must be in [1, 256] to fit one byte, got {k}")
    if n < k:
        raise DataError(f"PQ training needs at least k={k} vectors, got {n}")
    sub = dim // m
    centroids = np.empty((m, k, sub), dtype=np.float64)
    histories = []
    for b in range(m):
        rng = np.random.default_rng(seed + b)
        block = X[:, b * sub:(b + 1) * sub]
        centroids[b], hist = _lloyd(block, k, iters, rng)
        histories.append(tuple(hist))
    return PQCodebook(centroids=centroids, histories=tuple(histories))


def pq_encode(codebook: PQCodebook, vectors: np.ndarray) -> np.ndarray:
    """Nearest centroid index per block; ties go to the lowest index."""
    X = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if X.shape[1] != codebook.dim:
        raise ContractError(f"vectors have dim {X.shape[1]}, codebook expects "
                            f"{codebook.dim}")
    sub = codebook.sub_dim
    codes = np.empty((X.shape[0], codebook.m), dtype=np.uint8)
    for b in range(codebook.m):
        block = X[:, b * sub:(b + 1) * sub]
        C = codebook.centroids[b]
        d2 = (np.sum(block ** 2, axis=1)[:, None]
              - 2.0 * block @ C.T
              + np.sum(C ** 2, axis=1)[None, :])
        codes[:, b] = np.argmin(d2, axis=1)  # argmin takes the first minimum
    return codes


def pq_decode(codebook: PQCodebook, codes: np.ndarray) -> np.ndarray:
    codes = np.atleast_2d(np.asarray(codes))
    parts = [codebook.centroids[b][codes[:, b]] for b in range(codebook.m)]
    return np.concatenate(parts, axis=1)


def distance_table(codebook: PQCodebook, query: np.ndarray) -> np.ndarray:
    """Squared distance from each query sub-block to each centroid, (m, k)."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (codebook.dim,):
        raise ContractError(f"query dim {q.shape} does not match codebook dim "
                            f"{codebook.dim}")
    sub = codebook.sub_dim
    table = np.empty((codebook.m, codebook.k), dtype=np.float64)
    for b in range(codebook.m):
        diff = codebook.centroids[b] - q[b * sub:(b + 1) * sub]
        table[b] = np.sum(diff ** 2, axis=1)
    return table


def adc_distances(table: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Sum the per-block table entries in block index order.

    The explicit block-order accumulation makes the result exactly equal
    to the squared distance to the decoded vector computed the same way.
    """
    codes = np.atleast_2d(codes)
    m = table.shape[0]
    if codes.shape[1] != m:
        raise ContractError(f"codes have {codes.shape[1]} blocks, table has {m}")
    total = np.zeros(codes.shape[0], dtype=np.float64)
    for b in range(m):
        total += table[b, codes[:, b]]
    return total


def adc_search(codebook: PQCodebook, query: np.ndarray, codes: np.ndarray,
               image_ids: list[str]) -> list[tuple[str, float]]:
    """All (image_id, distance) pairs sorted ascending, ties by id."""
    codes = np.atleast_2d(codes)
    if codes.shape[0] != len(image_ids):
        raise ContractError(f"{codes.shape[0]} codes vs {len(image_ids)} ids")
    table = distance_table(codebook, query)
    dists = adc_distances(table, codes)
    order = sorted(range(len(image_ids)), key=lambda i: (dists[i], image_ids[i]))
    return [(image_ids[i], float(dists[i])) for i in order]


def save_codebook(codebook: PQCodebook, path: str | Path) -> None:
    header = {"m": codebook.m, "k": codebook.k, "sub_dim": codebook.sub_dim,
              "dim": codebook.dim}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CODEBOOK_MAGIC)
        fh.write(struct.pack("<2I", CODEBOOK_VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(codebook.centroids, dtype="<f4").tobytes())


def load_codebook(path: str | Path) -> PQCodebook:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != CODEBOOK_MAGIC:
        raise FormatError(f"{path}: bad codebook magic")
    version, hlen = struct.unpack_from("<2I", raw, 8)
    if version != CODEBOOK_VERSION:
        raise FormatError(f"{path}: unsupported codebook version {version}")
    header = json.loads(raw[16:16 + hlen].decode())
    m, k, sub = int(header["m"]), int(header["k"]), int(header["sub_dim"])
    body = raw[16 + hlen:]
    if len(body) != m * k * sub * 4:
        raise FormatError(f"{path}: centroid payload size mismatch")
    cents = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(m, k, sub)
    return PQCodebook(centroids=cents)


def write_codes(image_ids: list[str], codes: np.ndarray, path: str | Path) -> None:
    """Sequence of (u32 id length, id bytes, m code bytes) records."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.uint8))
    if codes.shape[0] != len(image_ids):
        raise ContractError(f"{codes.shape[0]} codes vs {len(image_ids)} ids")
    with open(path, "wb") as fh:
        for image_id, row in zip(image_ids, codes):
            ident = image_id.encode()
            fh.write(struct.pack("<I", len(ident)))
            fh.write(ident)
            fh.write(row.tobytes())


def read_codes(path: str | Path, m: int) -> tuple[list[str], np.ndarray]:
    """Inverse of write_codes; m comes from the codebook."""
    raw = Path(path).read_bytes()
    ids = []
    rows = []
    off = 0
    while off < len(raw):
        if off + 4 > len(raw):
            raise FormatError(f"{path}: truncated record header")
        (id_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + id_len + m > len(raw):
            raise FormatError(f"{path}: truncated record body")
        ids.append(raw[off:off + id_len].decode())
        off += id_len
        rows.append(np.frombuffer(raw, dtype=np.uint8, count=m, offset=off).copy())
        off += m
    if not ids:
        raise FormatError(f"{path}: no code records")
    return ids, np.stack(rows)
