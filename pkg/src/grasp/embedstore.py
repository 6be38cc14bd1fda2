"""Frozen semantic embedding matrices and exact top-k cosine retrieval.

Matrices are immutable once constructed (the backing arrays are marked
read-only) so that nothing downstream -- training included -- can mutate
the semantic databases.  Retrieval has brute-force semantics: the k most
cosine-similar rows excluding the query row itself, ties broken by
ascending row index.  Neighbor means are pooled from the rows of the
matrix as given (similarity is measured on internally normalized copies);
zero-norm rows have similarity 0 to everything but remain queryable.

On-disk formats:

* ``GEMB`` matrix file: magic ``GEMB`` | version u16 LE = 1 | dtype u8 = 1
  (32-bit IEEE-754) | reserved u8 = 0 | rows u64 | dim u64 | payload
  rows x dim float32 LE row-major.  TSV alternative:
  ``dense_id<TAB>space-separated decimals``.
* ``GNBC`` neighbor cache: magic ``GNBC`` | version u16 | k u32 | rows u64
  | dim u64 | per row: k neighbor ids u64 then dim pooled-mean float32.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .binio import Reader, Writer, read_file
from .dataset import InteractionDataset
from .errors import FormatError

GEMB_MAGIC = b"GEMB"
GNBC_MAGIC = b"GNBC"
FORMAT_VERSION = 1
DTYPE_F32 = 1

NORM_TOL = 1e-6


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Immutable row-major matrix of semantic embeddings.

    ``normalized`` marks matrices whose nonzero rows have unit L2 norm;
    ``zero_row_count`` reports rows that could not be normalized.
    """

    rows: int
    dim: int
    values: np.ndarray
    normalized: bool = False
    zero_row_count: int = 0

    def __post_init__(self):
        if self.values.shape != (self.rows, self.dim):
            raise ValueError(
                f"shape mismatch: declared {(self.rows, self.dim)}, got {self.values.shape}"
            )
        if self.rows and not np.isfinite(self.values).all():
            raise ValueError("embedding matrix contains non-finite values")
        if self.normalized and self.rows:
            norms = np.linalg.norm(self.values, axis=1)
            nonzero = norms > 0
            if nonzero.any() and np.abs(norms[nonzero] - 1.0).max() > NORM_TOL:
                raise ValueError("matrix flagged normalized but row norms deviate from 1")
        object.__setattr__(self, "values", _frozen(self.values))

    def row(self, index: int) -> np.ndarray:
        return self.values[index]


def matrix_from_array(values: np.ndarray) -> EmbeddingMatrix:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {values.shape}")
    return EmbeddingMatrix(rows=values.shape[0], dim=values.shape[1], values=values)


def normalize_rows(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Scale each nonzero row to unit L2 norm; zero rows stay zero (counted)."""
    norms = np.linalg.norm(m.values, axis=1, keepdims=True)
    zero = norms[:, 0] == 0.0
    safe = np.where(norms == 0.0, 1.0, norms)
    return replace(
        m,
        values=m.values / safe,
        normalized=True,
        zero_row_count=int(zero.sum()),
    )


def topk_neighbors(m: EmbeddingMatrix, row: int, k: int) -> list[tuple[int, float]]:
    """The k most similar rows to ``row`` (self excluded), best first.

    Requires a normalized matrix so that the dot product is cosine
    similarity.  Ties are broken by ascending row index; the result is
    exact regardless of any internal blocking.
    """
    if not m.normalized:
        raise ValueError("topk_neighbors requires a normalized matrix")
    if not (0 <= row < m.rows):
        raise ValueError(f"row {row} out of range for {m.rows} rows")
    if not (1 <= k <= m.rows - 1):
        raise ValueError(f"k={k} out of range: need 1 <= k <= rows-1 = {m.rows - 1}")
    sims = m.values @ m.values[row]
    order = _ranked_candidates(sims, row)[:k]
    return [(int(i), float(sims[i])) for i in order]


def _ranked_candidates(sims: np.ndarray, exclude: int) -> np.ndarray:
    sims = sims.copy()
    sims[exclude] = -np.inf
    # lexsort: primary key last -> sort by descending similarity, then index.
    return np.lexsort((np.arange(len(sims)), -sims))[: len(sims) - 1]


@dataclass(frozen=True)
class NeighborCache:
    """Precomputed top-k neighbor ids and pooled means for every row."""

    k: int
    neighbor_ids: np.ndarray
    pooled_means: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "neighbor_ids", _frozen(self.neighbor_ids))
        object.__setattr__(self, "pooled_means", _frozen(self.pooled_means))

    @property
    def rows(self) -> int:
        return self.neighbor_ids.shape[0]

    @property
    def dim(self) -> int:
        return self.pooled_means.shape[1]


def build_neighbor_cache(m: EmbeddingMatrix, k: int, block: int = 512) -> NeighborCache:
    """Exact neighbor ids plus the mean of each row's k neighbors.

    Similarity is computed on a normalized copy; pooled means average the
    rows of ``m`` as given, so callers pooling raw embeddings simply pass
    the raw matrix.  Blocked evaluation keeps memory bounded without
    changing the output.
    """
    if not (1 <= k <= m.rows - 1):
        raise ValueError(f"k={k} out of range: need 1 <= k <= rows-1 = {m.rows - 1}")
    unit = m.values if m.normalized else normalize_rows(m).values
    ids = np.empty((m.rows, k), dtype=np.int64)
    for start in range(0, m.rows, block):
        stop = min(start + block, m.rows)
        sims = unit[start:stop] @ unit.T
        for local, row in enumerate(range(start, stop)):
            ids[row] = _ranked_candidates(sims[local], row)[:k]
    pooled = m.values[ids].mean(axis=1)
    return NeighborCache(k=k, neighbor_ids=ids, pooled_means=pooled)


# ---------------------------------------------------------------------------
# Matrix / cache persistence


def save_embedding_matrix(m: EmbeddingMatrix, path) -> None:
    w = Writer()
    w.magic(GEMB_MAGIC)
    w.u16(FORMAT_VERSION)
    w.u8(DTYPE_F32)
    w.u8(0)
    w.u64(m.rows)
    w.u64(m.dim)
    w.f32_array(m.values)
    w.save(path)


def _load_binary_matrix(r: Reader) -> EmbeddingMatrix:
    r.magic(GEMB_MAGIC)
    version = r.u16()
    if version != FORMAT_VERSION:
        raise FormatError(f"{r.path}: unsupported version {version} at byte 4")
    dtype = r.u8()
    if dtype != DTYPE_F32:
        raise FormatError(f"{r.path}: unsupported dtype code {dtype} at byte 6")
    r.u8()
    rows = r.u64()
    dim = r.u64()
    if dim == 0:
        raise FormatError(f"{r.path}: dim must be positive")
    values = r.f32_array(rows * dim).reshape(rows, dim)
    r.expect_eof()
    return EmbeddingMatrix(rows=rows, dim=dim, values=values)


def _load_tsv_matrix(path) -> EmbeddingMatrix:
    rows: list[np.ndarray] = []
    width = None
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except UnicodeDecodeError as exc:
        raise FormatError(
            f"{path}: not a GEMB file (bad magic) and not a UTF-8 TSV ({exc})"
        ) from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise FormatError(f"{path}: line {lineno}: expected dense_id<TAB>values")
        try:
            dense_id = int(parts[0])
        except ValueError:
            raise FormatError(f"{path}: line {lineno}: non-integer dense id") from None
        if dense_id != len(rows):
            raise FormatError(f"{path}: line {lineno}: dense ids must be contiguous from 0")
        try:
            vec = np.array([float(v) for v in parts[1].split()], dtype=np.float64)
        except ValueError:
            raise FormatError(f"{path}: line {lineno}: non-numeric value") from None
        if width is None:
            width = len(vec)
        elif len(vec) != width:
            raise FormatError(f"{path}: line {lineno}: row width {len(vec)} != {width}")
        if not np.isfinite(vec).all():
            raise FormatError(f"{path}: line {lineno}: non-finite value")
        rows.append(vec)
    if not rows:
        raise FormatError(f"{path}: no embedding rows found")
    return matrix_from_array(np.stack(rows))


def load_embedding_matrix(path) -> EmbeddingMatrix:
    """Load a GEMB binary file or the TSV alternative (sniffed by magic)."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == GEMB_MAGIC:
        return _load_binary_matrix(read_file(path))
    return _load_tsv_matrix(path)


def save_neighbor_cache(cache: NeighborCache, path) -> None:
    w = Writer()
    w.magic(GNBC_MAGIC)
    w.u16(FORMAT_VERSION)
    w.u32(cache.k)
    w.u64(cache.rows)
    w.u64(cache.dim)
    for row in range(cache.rows):
        w.u64_array(cache.neighbor_ids[row])
        w.f32_array(cache.pooled_means[row])
    w.save(path)


def load_neighbor_cache(path) -> NeighborCache:
    r = read_file(path)
    r.magic(GNBC_MAGIC)
    version = r.u16()
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    k = r.u32()
    rows = r.u64()
    dim = r.u64()
    ids = np.empty((rows, k), dtype=np.int64)
    pooled = np.empty((rows, dim), dtype=np.float64)
    for row in range(rows):
        ids[row] = r.u64_array(k)
        pooled[row] = r.f32_array(dim)
    r.expect_eof()
    if rows and (ids.min() < 0 or ids.max() >= rows):
        raise FormatError(f"{path}: neighbor id out of range")
    if any(row in ids[row] for row in range(rows)):
        raise FormatError(f"{path}: a row lists itself among its neighbors")
    return NeighborCache(k=k, neighbor_ids=ids, pooled_means=pooled)


# ---------------------------------------------------------------------------
# Synthetic cluster-structured corpus


def synth_corpus(
    n_users: int = 500,
    m_items: int = 200,
    n_clusters: int = 8,
    dim: int = 32,
    noise: float = 0.1,
    seed: int = 42,
) -> tuple[InteractionDataset, EmbeddingMatrix, EmbeddingMatrix]:
    """Generate a desk-scale corpus with known cluster structure.

    Items are assigned round-robin to clusters whose centroids are
    orthogonal unit vectors; item embeddings are centroid + Gaussian noise.
    Each user picks a home cluster and draws a geometric-length sequence
    (mean 8, clamped to [3, 50]) of 80% in-cluster items; within a cluster
    item popularity falls off harmonically (weight 1/(1+rank)) so the
    corpus has a head/tail frequency profile.  User embeddings are the mean
    of their items' embeddings + noise.  Fully deterministic for a seed.
    """
    if n_clusters > m_items:
        raise ValueError(f"n_clusters={n_clusters} exceeds m_items={m_items}")
    if dim < n_clusters:
        raise ValueError(f"dim={dim} must be >= n_clusters={n_clusters}")
    if n_users < 1 or m_items < 2:
        raise ValueError("need at least 1 user and 2 items")

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    centroids = np.eye(dim, dtype=np.float64)[:n_clusters]
    clusters = np.arange(m_items, dtype=np.int64) % n_clusters
    item_values = centroids[clusters] + noise * rng.standard_normal((m_items, dim))

    cluster_members = [np.flatnonzero(clusters == c) for c in range(n_clusters)]
    member_weights = []
    for members in cluster_members:
        w = 1.0 / (1.0 + np.arange(len(members), dtype=np.float64))
        member_weights.append(w / w.sum())

    sequences: dict[int, list[int]] = {}
    for user in range(n_users):
        home = int(rng.integers(n_clusters))
        length = int(np.clip(rng.geometric(1.0 / 8.0), 3, 50))
        seq = []
        for _ in range(length):
            if rng.random() < 0.8 or n_clusters == 1:
                item = int(rng.choice(cluster_members[home], p=member_weights[home]))
            else:
                item = int(rng.integers(m_items))
                while clusters[item] == home:
                    item = int(rng.integers(m_items))
            seq.append(item)
        sequences[user] = seq

    user_values = np.empty((n_users, dim), dtype=np.float64)
    for user in range(n_users):
        user_values[user] = item_values[sequences[user]].mean(axis=0)
    user_values += noise * rng.standard_normal((n_users, dim))

    user_freq = np.array([len(sequences[u]) for u in range(n_users)], dtype=np.int64)
    item_freq = np.zeros(m_items, dtype=np.int64)
    for seq in sequences.values():
        for item in seq:
            item_freq[item] += 1

    ds = InteractionDataset(
        user_count=n_users,
        item_count=m_items,
        sequences=sequences,
        item_frequency=item_freq,
        user_frequency=user_freq,
        user_raw_ids=[str(u) for u in range(n_users)],
        item_raw_ids=[str(i) for i in range(m_items)],
    )
    return ds, matrix_from_array(user_values), matrix_from_array(item_values)


def write_interaction_log(ds: InteractionDataset, path) -> None:
    """Write a dataset back out in the standard log format (timestamp = position)."""
    with open(path, "w", encoding="utf-8") as fh:
        for user in range(ds.user_count):
            raw_user = ds.user_raw_ids[user] if ds.user_raw_ids else str(user)
            for ts, item in enumerate(ds.sequences[user]):
                raw_item = ds.item_raw_ids[item] if ds.item_raw_ids else str(item)
                fh.write(f"{raw_user}\t{raw_item}\t{ts}\n")
