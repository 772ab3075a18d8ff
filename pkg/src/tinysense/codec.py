"""Codebook quantization, bit-exact index packing, and rate accounting.

The codec maps a latent grid to a map of codeword indices (nearest neighbor
in Euclidean distance, ties to the lowest index), packs those indices into a
fixed-width bitstream, and can shrink a trained codebook to a smaller one
with K-means to trade reconstruction quality for bitrate.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import storage

LOST = -1  # sentinel for an index dropped in transit

MIN_CODEBOOK = 2
MAX_CODEBOOK = 1024


class CodecError(Exception):
    pass


class LostIndexError(CodecError):
    """Index map still contains LOST cells; run recovery before dequantizing."""


class CodebookMismatchError(CodecError):
    """Index map was produced with a different codebook."""


class CorruptStreamError(CodecError):
    """Unpacked an index outside the codebook range."""


class StreamLengthError(CodecError):
    """Bitstream byte length inconsistent with the declared grid."""


def codebook_hash(entries: np.ndarray) -> bytes:
    """8-byte content hash over (S, D, float32-LE entries)."""
    s, d = entries.shape
    h = hashlib.sha256()
    h.update(b"TSCB")
    h.update(np.array([s, d], dtype="<u4").tobytes())
    h.update(np.ascontiguousarray(entries, dtype="<f4").tobytes())
    return h.digest()[:8]


@dataclass(frozen=True)
class Codebook:
    """Ordered set of embedding vectors shared by edge and server.

    Entries are float64 but always exactly float32-representable, so the
    in-memory codebook, the .tscb file, and the wire handshake hash all agree.
    """

    entries: np.ndarray            # (S, D) float64, float32-exact
    id: bytes                      # 8-byte content hash
    parent_id: bytes | None = None

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @property
    def bits_per_index(self) -> int:
        return bits_for(self.size)


def make_codebook(entries, parent_id: bytes | None = None) -> Codebook:
    entries = np.asarray(entries, dtype=np.float64)
    if entries.ndim != 2:
        raise CodecError(f"codebook entries must be (S, D), got shape {entries.shape}")
    s = entries.shape[0]
    if not MIN_CODEBOOK <= s <= MAX_CODEBOOK:
        raise CodecError(f"codebook size must be in [{MIN_CODEBOOK}, {MAX_CODEBOOK}], got {s}")
    if not np.all(np.isfinite(entries)):
        raise CodecError("codebook entries must be finite")
    canon = entries.astype(np.float32).astype(np.float64)
    return Codebook(entries=canon, id=codebook_hash(canon), parent_id=parent_id)


@dataclass
class IndexMap:
    """Grid of codeword indices for one frame; LOST marks dropped cells."""

    grid: np.ndarray          # (gh, gw) int32, values in [0, S) or LOST
    codebook_id: bytes
    frame_id: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape  # type: ignore[return-value]

    def lost_cells(self) -> np.ndarray:
        return np.argwhere(self.grid == LOST)

    def has_lost(self) -> bool:
        return bool((self.grid == LOST).any())


@dataclass
class Bitstream:
    """Fixed-width packed indices: row-major, MSB-first, zero-padded tail."""

    payload: bytes
    bits_per_index: int
    index_count: int

    def __post_init__(self):
        expect = (self.index_count * self.bits_per_index + 7) // 8
        if len(self.payload) != expect:
            raise StreamLengthError(
                f"payload is {len(self.payload)} bytes, expected {expect} "
                f"for {self.index_count} indices at {self.bits_per_index} bits")


def bits_for(codebook_size: int) -> int:
    """ceil(log2 S) bits per index."""
    if codebook_size < MIN_CODEBOOK:
        raise CodecError(f"codebook size must be >= {MIN_CODEBOOK}, got {codebook_size}")
    return (codebook_size - 1).bit_length()


# ---------------------------------------------------------------------------
# quantize / dequantize
# ---------------------------------------------------------------------------

_SLAB = 2048  # cells per distance-matrix slab, bounds transient memory


def nearest_indices(z: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Nearest codebook entry per latent vector, ties to the lowest index.

    z: (..., D) against entries (S, D); returns int32 of z's leading shape.
    """
    if z.shape[-1] != entries.shape[1]:
        raise CodecError(f"latent dim {z.shape[-1]} != codebook dim {entries.shape[1]}")
    lead = z.shape[:-1]
    flat = z.reshape(-1, z.shape[-1])
    out = np.empty(flat.shape[0], dtype=np.int32)
    for start in range(0, flat.shape[0], _SLAB):
        block = flat[start:start + _SLAB]
        d2 = ((block[:, None, :] - entries[None, :, :]) ** 2).sum(axis=-1)
        out[start:start + _SLAB] = d2.argmin(axis=1)
    return out.reshape(lead)


def quantize(z: np.ndarray, cb: Codebook, frame_id: int = 0) -> tuple[IndexMap, np.ndarray]:
    """Map a (gh, gw, D) latent grid to indices and their codeword values."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3:
        raise CodecError(f"latent grid must be (gh, gw, D), got shape {z.shape}")
    idx = nearest_indices(z, cb.entries)
    imap = IndexMap(grid=idx.astype(np.int32), codebook_id=cb.id, frame_id=frame_id)
    return imap, cb.entries[idx]


def dequantize(imap: IndexMap, cb: Codebook) -> np.ndarray:
    """Exact table lookup of a fully-recovered index map."""
    if imap.has_lost():
        n = int((imap.grid == LOST).sum())
        raise LostIndexError(f"{n} LOST cells present; run recovery before dequantize")
    if imap.codebook_id != cb.id:
        raise CodebookMismatchError(
            f"index map codebook {imap.codebook_id.hex()} != codebook {cb.id.hex()}")
    if imap.grid.max(initial=0) >= cb.size:
        raise CorruptStreamError(f"index {int(imap.grid.max())} >= codebook size {cb.size}")
    return cb.entries[imap.grid]


# ---------------------------------------------------------------------------
# bit packing
# ---------------------------------------------------------------------------

def pack_indices(indices: np.ndarray, codebook_size: int) -> Bitstream:
    """Pack a flat run of indices at ceil(log2 S) bits each, MSB-first."""
    idx = np.asarray(indices).ravel()
    if idx.size and ((idx < 0).any() or (idx >= codebook_size).any()):
        if (idx == LOST).any():
            raise LostIndexError("cannot pack an index map with LOST cells")
        raise CodecError(f"index out of range for codebook size {codebook_size}")
    nbits = bits_for(codebook_size)
    shifts = np.arange(nbits - 1, -1, -1)
    bitmat = ((idx.astype(np.uint32)[:, None] >> shifts) & 1).astype(np.uint8)
    return Bitstream(payload=np.packbits(bitmat.ravel()).tobytes(),
                     bits_per_index=nbits, index_count=int(idx.size))


def unpack_indices(stream: Bitstream, codebook_size: int) -> np.ndarray:
    """Inverse of pack_indices; validates range and byte length."""
    nbits = bits_for(codebook_size)
    if nbits != stream.bits_per_index:
        raise StreamLengthError(
            f"stream uses {stream.bits_per_index} bits/index, codebook needs {nbits}")
    expect = (stream.index_count * nbits + 7) // 8
    if len(stream.payload) != expect:
        raise StreamLengthError(f"payload is {len(stream.payload)} bytes, expected {expect}")
    bits = np.unpackbits(np.frombuffer(stream.payload, dtype=np.uint8))
    bits = bits[:stream.index_count * nbits].reshape(stream.index_count, nbits)
    weights = (1 << np.arange(nbits - 1, -1, -1)).astype(np.uint32)
    idx = (bits * weights).sum(axis=1).astype(np.int32)
    if idx.size and idx.max() >= codebook_size:
        raise CorruptStreamError(
            f"unpacked index {int(idx.max())} >= codebook size {codebook_size}")
    return idx


def pack(imap: IndexMap, codebook_size: int) -> Bitstream:
    """Pack a whole index map row-major."""
    if imap.has_lost():
        raise LostIndexError("cannot pack an index map with LOST cells")
    return pack_indices(imap.grid, codebook_size)


def unpack(stream: Bitstream, dims: tuple[int, int], codebook_size: int,
           codebook_id: bytes = b"", frame_id: int = 0) -> IndexMap:
    gh, gw = dims
    if stream.index_count != gh * gw:
        raise StreamLengthError(
            f"stream holds {stream.index_count} indices, grid wants {gh * gw}")
    idx = unpack_indices(stream, codebook_size)
    return IndexMap(grid=idx.reshape(gh, gw), codebook_id=codebook_id, frame_id=frame_id)


# ---------------------------------------------------------------------------
# K-means codebook resizing
# ---------------------------------------------------------------------------

def _kmeans_cost(points: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    return float(((points - centroids[assign]) ** 2).sum(axis=1).mean())


def lloyd(points: np.ndarray, n_clusters: int, rng: np.random.Generator,
          max_iters: int = 100, tol: float = 1e-12,
          init: str = "sample") -> tuple[np.ndarray, np.ndarray, list[float]]:
    """One Lloyd's run. Returns (centroids, assignments, per-iteration costs).

    Each recorded cost is the mean squared distance of every point to its
    nearest centroid after that iteration's assignment+update; the sequence
    is nonincreasing.  Empty clusters are re-seeded from the farthest member
    of the most populated cluster.
    """
    k = points.shape[0]
    if init == "kmeans++":
        centroids = _kmeanspp_init(points, n_clusters, rng)
    else:
        centroids = points[rng.choice(k, size=n_clusters, replace=False)].copy()

    assign = np.full(k, -1, dtype=np.int64)
    costs: list[float] = []
    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
        new_assign = d2.argmin(axis=1)

        for c in range(n_clusters):
            members = points[new_assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
            else:
                counts = np.bincount(new_assign, minlength=n_clusters)
                big = int(counts.argmax())
                big_members = np.flatnonzero(new_assign == big)
                far = big_members[d2[big_members, big].argmax()]
                centroids[c] = points[far]
                new_assign[far] = c

        cost = _kmeans_cost(points, centroids, new_assign)
        converged = bool((new_assign == assign).all())
        assign = new_assign
        costs.append(cost)
        if converged or (len(costs) >= 2 and costs[-2] - costs[-1] < tol):
            break
    return centroids, assign, costs


def _kmeanspp_init(points: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    chosen = [int(rng.integers(points.shape[0]))]
    for _ in range(1, n_clusters):
        d2 = np.min(((points[:, None, :] - points[chosen][None, :, :]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            pool = [i for i in range(points.shape[0]) if i not in chosen]
            chosen.append(int(rng.choice(pool)))
        else:
            chosen.append(int(rng.choice(points.shape[0], p=d2 / total)))
    return points[chosen].copy()


def kmeans_resize(cb: Codebook, new_size: int, seed: int = 0, max_iters: int = 100,
                  tol: float = 1e-12, restarts: int = 8, init: str = "sample") -> Codebook:
    """Cluster a trained codebook down to new_size entries.

    Runs Lloyd's algorithm `restarts` times from distinct seeded inits and
    keeps the lowest-cost result; each run converges on its own (assignment
    fixpoint, cost decrease < tol, or max_iters).
    """
    if new_size >= cb.size:
        raise CodecError(f"resize target {new_size} must be < current size {cb.size}; "
                         "use the codebook directly")
    if new_size < MIN_CODEBOOK:
        raise CodecError(f"resize target must be >= {MIN_CODEBOOK}, got {new_size}")
    rng = np.random.default_rng(seed)
    best: tuple[float, np.ndarray] | None = None
    for _ in range(max(restarts, 1)):
        centroids, _, costs = lloyd(cb.entries, new_size, rng, max_iters, tol, init)
        if best is None or costs[-1] < best[0]:
            best = (costs[-1], centroids)
    assert best is not None
    return make_codebook(best[1], parent_id=cb.id)


# ---------------------------------------------------------------------------
# rate accounting
# ---------------------------------------------------------------------------

BYTES_PER_POINT = 4  # raw CSI billed at 4 bytes per amplitude value


def compressed_size_bits(f: int, t: int, m: int, codebook_size: int) -> int:
    """Exact payload size of one frame's index map, in bits (no padding)."""
    if f % m or t % m:
        raise CodecError(f"frame dims ({f},{t}) not divisible by downsampling factor {m}")
    return (f // m) * (t // m) * bits_for(codebook_size)


def compression_rate(f: int, t: int, c: int, m: int, codebook_size: int) -> float:
    """Raw bytes over compressed bytes for one frame (fractional bytes for bits)."""
    raw = f * t * c * BYTES_PER_POINT
    compressed = compressed_size_bits(f, t, m, codebook_size) / 8.0
    return raw / compressed


def raw_cost_bytes_per_sec(antennas: int, subcarriers: int, sample_rate_hz: float,
                           values_per_point: int = 2,
                           bytes_per_value: int = BYTES_PER_POINT) -> float:
    """Uncompressed CSI transport cost in bytes per second."""
    return antennas * subcarriers * sample_rate_hz * values_per_point * bytes_per_value


def raw_cost_mbps(antennas: int, subcarriers: int, sample_rate_hz: float,
                  values_per_point: int = 2,
                  bytes_per_value: int = BYTES_PER_POINT) -> float:
    """Same cost expressed in megabits per second (8 bits/byte, 1e6 bits/Mb)."""
    return raw_cost_bytes_per_sec(antennas, subcarriers, sample_rate_hz,
                                  values_per_point, bytes_per_value) * 8.0 / 1e6


# ---------------------------------------------------------------------------
# compressed-dataset container (.tsvq)
# ---------------------------------------------------------------------------

@dataclass
class CompressedDataset:
    """Packed index maps for a whole dataset plus what's needed to invert them."""

    index_maps: list[IndexMap]
    codebook_size: int
    codebook_id: bytes
    frame_shape: tuple[int, int, int]    # (F, T, C) of the original frames
    sample_rate_hz: float
    train_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.index_maps[0].grid.shape  # type: ignore[return-value]


def save_compressed(cd: CompressedDataset, path) -> None:
    gh, gw = cd.grid_shape
    w = storage.Writer(storage.MAGIC_INDEXES, storage.INDEXES_VERSION)
    w.u32(len(cd.index_maps))
    w.u32(cd.frame_shape[0])
    w.u32(cd.frame_shape[1])
    w.u32(cd.frame_shape[2])
    w.f32(cd.sample_rate_hz)
    w.u32(cd.codebook_size)
    w.raw(cd.codebook_id)
    w.u16(gh)
    w.u16(gw)
    w.u32(len(cd.train_idx))
    w.u32(len(cd.test_idx))
    w.raw(np.ascontiguousarray(cd.train_idx, dtype="<i4").tobytes())
    w.raw(np.ascontiguousarray(cd.test_idx, dtype="<i4").tobytes())
    for imap in cd.index_maps:
        if imap.grid.shape != (gh, gw):
            raise CodecError("all index maps in a file must share one grid shape")
        w.u32(imap.frame_id)
        w.raw(pack(imap, cd.codebook_size).payload)
    storage.write_file(path, w.finish())


def load_compressed(path) -> CompressedDataset:
    r = storage.read_file(path, storage.MAGIC_INDEXES, storage.INDEXES_VERSION)
    n = r.u32()
    f_dim, t_dim, c_dim = r.u32(), r.u32(), r.u32()
    rate = r.f32()
    s = r.u32()
    cb_id = r.raw(8)
    gh, gw = r.u16(), r.u16()
    n_train, n_test = r.u32(), r.u32()
    train_idx = np.frombuffer(r.raw(n_train * 4), dtype="<i4").copy()
    test_idx = np.frombuffer(r.raw(n_test * 4), dtype="<i4").copy()
    nbytes = (gh * gw * bits_for(s) + 7) // 8
    maps = []
    for _ in range(n):
        fid = r.u32()
        stream = Bitstream(payload=r.raw(nbytes), bits_per_index=bits_for(s),
                           index_count=gh * gw)
        maps.append(unpack(stream, (gh, gw), s, codebook_id=cb_id, frame_id=fid))
    r.done()
    return CompressedDataset(index_maps=maps, codebook_size=s, codebook_id=cb_id,
                             frame_shape=(f_dim, t_dim, c_dim), sample_rate_hz=rate,
                             train_idx=train_idx, test_idx=test_idx)


# ---------------------------------------------------------------------------
# codebook persistence (.tscb)
# ---------------------------------------------------------------------------

def save_codebook(cb: Codebook, path) -> None:
    w = storage.Writer(storage.MAGIC_CODEBOOK, storage.CODEBOOK_VERSION)
    w.u32(cb.size)
    w.u32(cb.dim)
    w.u8(1 if cb.parent_id else 0)
    w.raw(cb.parent_id if cb.parent_id else b"\x00" * 8)
    w.raw(np.ascontiguousarray(cb.entries, dtype="<f4").tobytes())
    storage.write_file(path, w.finish())


def load_codebook(path) -> Codebook:
    r = storage.read_file(path, storage.MAGIC_CODEBOOK, storage.CODEBOOK_VERSION)
    s = r.u32()
    d = r.u32()
    has_parent = r.u8()
    parent = r.raw(8)
    entries = np.frombuffer(r.raw(s * d * 4), dtype="<f4").reshape(s, d)
    r.done()
    return make_codebook(entries.astype(np.float64),
                         parent_id=parent if has_parent else None)
