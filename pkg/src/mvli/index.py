"""Centroid-based compressed multi-vector index.

All document token vectors are clustered with spherical k-means (cosine
geometry, centroids renormalized every iteration).  Each vector is stored as
its centroid id plus a per-dimension 8-bit uniform quantization of the
residual; nbits=0 selects the lossless mode that stores raw float64 vectors.
Search runs centroid-probing candidate generation followed by exact
late-interaction re-ranking on reconstructed vectors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .core import (
    ConfigError,
    CorruptionError,
    FeatureSet,
    FormatError,
    InputError,
    Rng,
    ShapeError,
    StateError,
    UnsupportedVersionError,
)
from .scoring import ScoredDoc

INDEX_MAGIC = b"MVLI"
INDEX_VERSION = 1


@dataclass(frozen=True)
class SearchParams:
    k: int
    nprobe: int = 4
    candidate_doc_cap: int = 256

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.nprobe < 1:
            raise ConfigError("nprobe must be >= 1")
        if self.candidate_doc_cap < self.k:
            raise ConfigError("candidate_doc_cap must be >= k")


@dataclass
class RetrievalIndex:
    dim: int
    nbits: int
    centroids: np.ndarray  # (K, dim) unit rows
    assignments: np.ndarray  # (N,) centroid id per vector
    codes: np.ndarray  # (N, dim) uint8, or float64 residuals when nbits == 0
    code_min: np.ndarray  # (dim,) per-dimension codebook scalars
    code_max: np.ndarray
    vec_owner: np.ndarray  # (N,) index into doc_ids
    doc_ids: list[str]
    doc_sizes: np.ndarray  # (n_docs,) token counts
    objective_trace: list[float] = field(default_factory=list)
    postings: list[np.ndarray] = field(default_factory=list)
    doc_centroids: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.postings:
            self.postings = [
                np.flatnonzero(self.assignments == c) for c in range(self.centroids.shape[0])
            ]
        if not self.doc_centroids:
            self.doc_centroids = [
                np.unique(self.assignments[np.flatnonzero(self.vec_owner == d)])
                for d in range(len(self.doc_ids))
            ]

    @property
    def n_vectors(self) -> int:
        return self.assignments.shape[0]


def _spherical_kmeans(
    vectors: np.ndarray, k: int, iters: int, rng: Rng
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """K-means under cosine distance; returns centroids, assignments, and the
    mean cosine-distance objective recorded at the start of each iteration."""
    n = vectors.shape[0]
    init_idx = rng.split("kmeans-init").generator().choice(n, size=k, replace=False)
    centroids = vectors[np.sort(init_idx)].copy()
    assignments = np.zeros(n, dtype=np.int64)
    trace: list[float] = []
    for _ in range(iters):
        sims = vectors @ centroids.T
        assignments = sims.argmax(axis=1)
        trace.append(float(np.mean(1.0 - sims[np.arange(n), assignments])))
        for c in range(k):
            members = np.flatnonzero(assignments == c)
            if members.size == 0:
                continue
            mean = vectors[members].mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm > 1e-12:
                centroids[c] = mean / norm
    sims = vectors @ centroids.T
    assignments = sims.argmax(axis=1)
    trace.append(float(np.mean(1.0 - sims[np.arange(n), assignments])))
    return centroids, assignments, trace


def default_k_centroids(n_vectors: int) -> int:
    return max(1, round(2.0 * np.sqrt(n_vectors)))


def build_index(
    corpus: Mapping[str, FeatureSet],
    k_centroids: int | None = None,
    kmeans_iters: int = 20,
    nbits: int = 8,
    seed: int = 0,
) -> RetrievalIndex:
    """Cluster and quantize all document token vectors.

    nbits=8 stores per-dimension uniform residual codes; nbits=0 stores exact
    float64 vectors (lossless mode).  Deterministic for a fixed seed.
    """
    if not corpus:
        raise InputError("cannot index an empty corpus")
    if nbits not in (0, 8):
        raise ConfigError(f"nbits must be 0 (lossless) or 8, got {nbits}")
    doc_ids = sorted(corpus)
    dims = {corpus[d].dim for d in doc_ids}
    if len(dims) != 1:
        raise ShapeError(f"corpus mixes vector dimensions: {sorted(dims)}")
    dim = dims.pop()
    vectors = np.vstack([corpus[d].vectors for d in doc_ids])
    owners = np.concatenate([
        np.full(len(corpus[d]), i, dtype=np.int64) for i, d in enumerate(doc_ids)
    ])
    doc_sizes = np.array([len(corpus[d]) for d in doc_ids], dtype=np.int64)
    n = vectors.shape[0]
    k = default_k_centroids(n) if k_centroids is None else k_centroids
    if k < 1:
        raise ConfigError("k_centroids must be >= 1")
    if k > n:
        raise ConfigError(f"k_centroids ({k}) exceeds the vector count ({n})")

    centroids, assignments, trace = _spherical_kmeans(vectors, k, kmeans_iters, Rng(seed))
    residuals = vectors - centroids[assignments]
    if nbits == 0:
        codes = vectors.astype(np.float64)
        code_min = np.zeros(dim)
        code_max = np.zeros(dim)
    else:
        code_min = residuals.min(axis=0)
        code_max = residuals.max(axis=0)
        spread = code_max - code_min
        scale = np.where(spread > 0, 255.0 / np.where(spread > 0, spread, 1.0), 0.0)
        codes = np.clip(np.rint((residuals - code_min) * scale), 0, 255).astype(np.uint8)
    return RetrievalIndex(
        dim=dim,
        nbits=nbits,
        centroids=centroids,
        assignments=assignments,
        codes=codes,
        code_min=code_min,
        code_max=code_max,
        vec_owner=owners,
        doc_ids=doc_ids,
        doc_sizes=doc_sizes,
        objective_trace=trace,
    )


def reconstruct(index: RetrievalIndex, vec_ids: np.ndarray) -> np.ndarray:
    """Dequantized vectors for the given vector ids."""
    if index.nbits == 0:
        return index.codes[vec_ids]
    spread = index.code_max - index.code_min
    step = np.where(spread > 0, spread / 255.0, 0.0)
    residuals = index.code_min + index.codes[vec_ids].astype(np.float64) * step
    return index.centroids[index.assignments[vec_ids]] + residuals


def _validate_index(index: RetrievalIndex) -> None:
    if index.centroids.size == 0 or index.assignments.size == 0:
        raise StateError("index is empty or was not built")
    if int(index.assignments.max()) >= index.centroids.shape[0]:
        raise StateError("index is corrupt: assignment references a missing centroid")


def search(index: RetrievalIndex, query: FeatureSet, params: SearchParams) -> list[ScoredDoc]:
    """Two-stage search: centroid-probed candidates, then exact re-ranking.

    Stage 1 probes the nprobe nearest centroids per query token, pools the
    owning documents, and keeps at most candidate_doc_cap of them by a
    centroid-level approximation of the late-interaction score.  Stage 2
    re-scores candidates exactly on dequantized vectors; ties break by doc_id.
    """
    _validate_index(index)
    if query.dim != index.dim:
        raise ShapeError(f"query dim {query.dim} does not match index dim {index.dim}")
    k_cent = index.centroids.shape[0]
    nprobe = min(params.nprobe, k_cent)
    cent_sims = query.vectors @ index.centroids.T  # (m, K)

    candidate_docs: set[int] = set()
    for i in range(cent_sims.shape[0]):
        if nprobe < k_cent:
            probed = np.argpartition(-cent_sims[i], nprobe - 1)[:nprobe]
        else:
            probed = np.arange(k_cent)
        for c in probed:
            vec_ids = index.postings[int(c)]
            if vec_ids.size:
                candidate_docs.update(np.unique(index.vec_owner[vec_ids]).tolist())
    if not candidate_docs:
        return []

    ordered = sorted(candidate_docs)
    if len(ordered) > params.candidate_doc_cap:
        approx = []
        for d in ordered:
            clist = index.doc_centroids[d]
            approx.append(float(cent_sims[:, clist].max(axis=1).sum()))
        ranked = sorted(zip(ordered, approx), key=lambda t: (-t[1], t[0]))
        ordered = sorted(d for d, _ in ranked[: params.candidate_doc_cap])

    results: list[ScoredDoc] = []
    for d in ordered:
        vec_ids = np.flatnonzero(index.vec_owner == d)
        doc_vectors = reconstruct(index, vec_ids)
        sims = query.vectors @ doc_vectors.T
        score = float(sims.max(axis=1).sum())
        results.append(ScoredDoc(index.doc_ids[d], score))
    results.sort(key=lambda s: (-s.score, s.doc_id))
    return results[: params.k]


# ---------------------------------------------------------------------------
# Binary file format: magic "MVLI", version u32, header, then the centroid,
# codebook, codes, postings, and document blocks; everything little-endian.
# ---------------------------------------------------------------------------


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CorruptionError("index file is truncated")
    return data


def save_index(index: RetrievalIndex, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<I", INDEX_VERSION))
        fh.write(struct.pack(
            "<IIQIB", index.dim, index.centroids.shape[0], index.n_vectors,
            len(index.doc_ids), index.nbits,
        ))
        fh.write(np.ascontiguousarray(index.centroids, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(index.code_min, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(index.code_max, dtype="<f8").tobytes())
        if index.nbits == 0:
            fh.write(np.ascontiguousarray(index.codes, dtype="<f8").tobytes())
        else:
            fh.write(np.ascontiguousarray(index.codes, dtype=np.uint8).tobytes())
        for c in range(index.centroids.shape[0]):
            vec_ids = index.postings[c]
            fh.write(struct.pack("<Q", vec_ids.size))
            fh.write(np.ascontiguousarray(vec_ids, dtype="<u8").tobytes())
        fh.write(np.ascontiguousarray(index.vec_owner, dtype="<u8").tobytes())
        for i, doc_id in enumerate(index.doc_ids):
            encoded = doc_id.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", int(index.doc_sizes[i])))


def load_index(path: str | Path) -> RetrievalIndex:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != INDEX_MAGIC:
            raise FormatError(f"{path}: not an index file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != INDEX_VERSION:
            raise UnsupportedVersionError(f"{path}: unsupported index version {version}")
        dim, k_cent, n_vec, n_docs, nbits = struct.unpack("<IIQIB", _read_exact(fh, 21))
        centroids = np.frombuffer(_read_exact(fh, 8 * k_cent * dim), dtype="<f8")
        centroids = centroids.reshape(k_cent, dim).copy()
        code_min = np.frombuffer(_read_exact(fh, 8 * dim), dtype="<f8").copy()
        code_max = np.frombuffer(_read_exact(fh, 8 * dim), dtype="<f8").copy()
        if nbits == 0:
            codes = np.frombuffer(_read_exact(fh, 8 * n_vec * dim), dtype="<f8")
            codes = codes.reshape(n_vec, dim).copy()
        else:
            codes = np.frombuffer(_read_exact(fh, n_vec * dim), dtype=np.uint8)
            codes = codes.reshape(n_vec, dim).copy()
        assignments = np.full(n_vec, -1, dtype=np.int64)
        postings = []
        for c in range(k_cent):
            (count,) = struct.unpack("<Q", _read_exact(fh, 8))
            vec_ids = np.frombuffer(_read_exact(fh, 8 * count), dtype="<u8").astype(np.int64)
            postings.append(vec_ids)
            assignments[vec_ids] = c
        if np.any(assignments < 0):
            raise CorruptionError(f"{path}: postings do not cover every vector")
        vec_owner = np.frombuffer(_read_exact(fh, 8 * n_vec), dtype="<u8").astype(np.int64)
        doc_ids = []
        doc_sizes = np.zeros(n_docs, dtype=np.int64)
        for i in range(n_docs):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            doc_ids.append(_read_exact(fh, name_len).decode("utf-8"))
            (doc_sizes[i],) = struct.unpack("<Q", _read_exact(fh, 8))
        if fh.read(1):
            raise CorruptionError(f"{path}: trailing bytes after document table")
    return RetrievalIndex(
        dim=dim,
        nbits=nbits,
        centroids=centroids,
        assignments=assignments,
        codes=codes,
        code_min=code_min,
        code_max=code_max,
        vec_owner=vec_owner,
        doc_ids=doc_ids,
        doc_sizes=doc_sizes,
        postings=postings,
    )
