"""Edge/server split over a TCP stream: framed wire protocol, loss-injecting
proxy, double-buffered acquisition pipeline, and latency/byte metering.

Wire frame layout (all integers little-endian):

    magic "TSNW" | version u8 | msg_type u8 | frame_id u32 |
    codebook_hash 8 bytes | grid_h u16 | grid_w u16 |
    chunk_seq u16 | chunk_count u16 | payload_len u32 |
    payload | crc32 u32 over header+payload

Index maps are split into chunks of at most ``chunk_indices`` raster-order
indices, so a single dropped chunk loses one contiguous run and the
receiver localizes it exactly from the chunk_seq gap.  Control frames
(HELLO, CODEBOOK_CHECK, ACK, STATS) are never dropped by the proxy.
"""

from __future__ import annotations

import logging
import math
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .codec import Bitstream, IndexMap, LOST
from .config import RunConfig

log = logging.getLogger("tinysense.transport")

WIRE_MAGIC = b"TSNW"
WIRE_VERSION = 1
HEADER = struct.Struct("<4sBBI8sHHHHI")
HEADER_SIZE = HEADER.size          # 30 bytes
TRAILER_SIZE = 4                   # crc32
FRAME_OVERHEAD = HEADER_SIZE + TRAILER_SIZE

MSG_HELLO = 1
MSG_CODEBOOK_CHECK = 2
MSG_INDEX_CHUNK = 3
MSG_ACK = 4
MSG_STATS = 5

ACK_OK = 0
ACK_BAD_CODEBOOK = 1


class TransportError(Exception):
    pass


class WireError(TransportError):
    """Malformed frame (bad magic/version or stream desync)."""


class HandshakeError(TransportError):
    pass


class CodebookHashMismatch(HandshakeError):
    pass


class RetriesExhausted(TransportError):
    pass


class OwnershipError(RuntimeError):
    """A buffer was touched by a stage that does not own it."""


# ---------------------------------------------------------------------------
# wire frames
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WireFrame:
    msg_type: int
    frame_id: int = 0
    codebook_hash: bytes = b"\x00" * 8
    grid_h: int = 0
    grid_w: int = 0
    chunk_seq: int = 0
    chunk_count: int = 0
    payload: bytes = b""


def encode_wire_frame(f: WireFrame) -> bytes:
    head = HEADER.pack(WIRE_MAGIC, WIRE_VERSION, f.msg_type, f.frame_id,
                       f.codebook_hash, f.grid_h, f.grid_w, f.chunk_seq,
                       f.chunk_count, len(f.payload))
    body = head + f.payload
    import zlib
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def try_decode_wire_frame(buf: bytes | bytearray, offset: int = 0):
    """Parse one frame starting at offset.

    Returns (WireFrame | None, consumed, crc_ok); (None, 0, True) means more
    bytes are needed.  Raises WireError on bad magic or version.
    """
    import zlib
    avail = len(buf) - offset
    if avail < HEADER_SIZE:
        return None, 0, True
    head = bytes(buf[offset:offset + HEADER_SIZE])
    magic, version, msg_type, frame_id, cb_hash, gh, gw, seq, count, plen = \
        HEADER.unpack(head)
    if magic != WIRE_MAGIC:
        raise WireError(f"bad magic {magic!r}")
    if version != WIRE_VERSION:
        raise WireError(f"unsupported wire version {version}")
    total = HEADER_SIZE + plen + TRAILER_SIZE
    if avail < total:
        return None, 0, True
    payload = bytes(buf[offset + HEADER_SIZE:offset + HEADER_SIZE + plen])
    (crc_stored,) = struct.unpack_from("<I", buf, offset + HEADER_SIZE + plen)
    crc_ok = (zlib.crc32(head + payload) & 0xFFFFFFFF) == crc_stored
    frame = WireFrame(msg_type=msg_type, frame_id=frame_id, codebook_hash=cb_hash,
                      grid_h=gh, grid_w=gw, chunk_seq=seq, chunk_count=count,
                      payload=payload)
    return frame, total, crc_ok


def pack_kv(pairs: dict[str, float]) -> bytes:
    """Length-prefixed key-value payload for STATS frames."""
    out = bytearray(struct.pack("<H", len(pairs)))
    for key in sorted(pairs):
        enc = key.encode("utf-8")
        out += struct.pack("<H", len(enc)) + enc + struct.pack("<d", pairs[key])
    return bytes(out)


def unpack_kv(payload: bytes) -> dict[str, float]:
    (n,) = struct.unpack_from("<H", payload, 0)
    pos = 2
    out = {}
    for _ in range(n):
        (klen,) = struct.unpack_from("<H", payload, pos)
        pos += 2
        key = payload[pos:pos + klen].decode("utf-8")
        pos += klen
        (val,) = struct.unpack_from("<d", payload, pos)
        pos += 8
        out[key] = val
    return out


def chunk_bounds_for_count(n_indices: int, count: int) -> list[tuple[int, int]]:
    """Raster-order slices for a known chunk count; shared by both sides."""
    size = math.ceil(n_indices / count)
    return [(i * size, min((i + 1) * size, n_indices)) for i in range(count)]


def chunk_bounds(n_indices: int, max_chunk: int) -> list[tuple[int, int]]:
    """Uniform chunk slices of at most max_chunk indices each."""
    count = max(1, math.ceil(n_indices / max_chunk))
    return chunk_bounds_for_count(n_indices, count)


# ---------------------------------------------------------------------------
# loss model
# ---------------------------------------------------------------------------

class LossModel:
    """Per-chunk Bernoulli drops, deterministic in (epsilon, seed, order)."""

    def __init__(self, epsilon: float, seed: int = 0):
        if not 0.0 <= epsilon <= 1.0:
            raise TransportError(f"epsilon must be in [0,1], got {epsilon}")
        self.epsilon = epsilon
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def should_drop(self) -> bool:
        return bool(self._rng.random() < self.epsilon)

    def replay(self, n: int) -> np.ndarray:
        """Drop decisions for the first n chunks of a fresh sequence."""
        rng = np.random.default_rng(self.seed)
        return rng.random(n) < self.epsilon


# ---------------------------------------------------------------------------
# double buffer
# ---------------------------------------------------------------------------

class BufferSlot:
    def __init__(self, name: str):
        self.name = name
        self.frames: list = []
        self.owner: str | None = None
        self._lock = threading.Lock()

    def take(self, who: str) -> None:
        with self._lock:
            if self.owner is not None:
                raise OwnershipError(f"buffer {self.name} owned by {self.owner}, "
                                     f"{who} tried to take it")
            self.owner = who

    def release(self, who: str) -> None:
        with self._lock:
            if self.owner != who:
                raise OwnershipError(f"buffer {self.name} owned by {self.owner}, "
                                     f"{who} tried to release it")
            self.owner = None


class DoubleBuffer:
    """Two slots cycling acquire -> encode; ownership tokens catch overlap."""

    def __init__(self):
        self.slots = (BufferSlot("A"), BufferSlot("B"))
        self.free_q: "queue.Queue[BufferSlot]" = queue.Queue()
        self.ready_q: "queue.Queue[BufferSlot | None]" = queue.Queue()
        for slot in self.slots:
            self.free_q.put(slot)
        self.swap_count = 0

    def next_for_fill(self, timeout: float | None = None) -> BufferSlot:
        slot = self.free_q.get(timeout=timeout)
        slot.take("acquire")
        slot.frames = []
        return slot

    def hand_to_encoder(self, slot: BufferSlot) -> None:
        slot.release("acquire")
        self.swap_count += 1
        self.ready_q.put(slot)

    def next_for_encode(self, timeout: float | None = None) -> BufferSlot | None:
        slot = self.ready_q.get(timeout=timeout)
        if slot is not None:
            slot.take("encode")
        return slot

    def return_from_encoder(self, slot: BufferSlot) -> None:
        slot.frames = []
        slot.release("encode")
        self.free_q.put(slot)

    def close(self) -> None:
        self.ready_q.put(None)


# ---------------------------------------------------------------------------
# edge
# ---------------------------------------------------------------------------

@dataclass
class FrameStats:
    frame_id: int
    buffer_index: int
    encode_ms: float
    pack_ms: float
    send_ms: float
    chunk_count: int
    payload_bytes: int        # packed indices only
    wire_bytes: int           # payload + per-chunk header/crc overhead


@dataclass
class EdgeStats:
    frames: list[FrameStats] = field(default_factory=list)
    buffer_fill_s: list[float] = field(default_factory=list)
    acquire_wait_ms: list[float] = field(default_factory=list)
    swap_count: int = 0
    bytes_sent: int = 0
    codebook_hash: bytes = b""

    def metered_frames(self) -> list[FrameStats]:
        """Cold start excluded: frames from the first buffer don't count."""
        return [f for f in self.frames if f.buffer_index > 0]


def _connect_with_retries(endpoint: tuple[str, int], retries: int,
                          timeout: float = 5.0) -> socket.socket:
    delay = 0.1
    last: Exception | None = None
    for _ in range(retries + 1):
        try:
            return socket.create_connection(endpoint, timeout=timeout)
        except OSError as exc:
            last = exc
            time.sleep(delay)
            delay *= 2
    raise RetriesExhausted(f"could not connect to {endpoint}: {last}")


class _FrameReader:
    """Buffers a socket and yields parsed frames; None on timeout."""

    def __init__(self, conn: socket.socket):
        self.conn = conn
        self.buf = bytearray()
        self.eof = False
        self.crc_failures = 0

    def next_frame(self) -> WireFrame | None:
        while True:
            frame, consumed, crc_ok = try_decode_wire_frame(self.buf)
            if frame is not None:
                del self.buf[:consumed]
                if not crc_ok:
                    self.crc_failures += 1
                    continue  # corrupt frame: skip, not fatal
                return frame
            if self.eof:
                return None
            try:
                chunk = self.conn.recv(65536)
            except socket.timeout:
                return None
            if not chunk:
                self.eof = True
                continue
            self.buf += chunk


def _expect_ack(reader: _FrameReader, what: str, timeout_s: float = 10.0) -> WireFrame:
    deadline = time.monotonic() + timeout_s
    while time.monotonic() < deadline:
        frame = reader.next_frame()
        if frame is None:
            if reader.eof:
                break
            continue
        if frame.msg_type == MSG_ACK:
            return frame
    raise HandshakeError(f"no ACK for {what}")


def frame_chunks(imap: IndexMap, codebook_size: int, max_chunk: int) -> list[WireFrame]:
    """Split one index map into INDEX_CHUNK frames (payloads packed per chunk)."""
    gh, gw = imap.grid.shape
    flat = imap.grid.ravel()
    bounds = chunk_bounds(flat.size, max_chunk)
    out = []
    for seq, (start, stop) in enumerate(bounds):
        stream = codec.pack_indices(flat[start:stop], codebook_size)
        out.append(WireFrame(msg_type=MSG_INDEX_CHUNK, frame_id=imap.frame_id,
                             codebook_hash=imap.codebook_id, grid_h=gh, grid_w=gw,
                             chunk_seq=seq, chunk_count=len(bounds),
                             payload=stream.payload))
    return out


def edge_run(frames, bundle, endpoint: tuple[str, int], cfg: RunConfig) -> EdgeStats:
    """Stream a source of CsiFrames to a server: acquire / encode / send.

    Acquisition paces itself to cfg.frame_rate_hz and fills alternating
    buffers of cfg.t_buf_s seconds; encoding (encode -> quantize -> pack ->
    chunk) runs on the previously filled buffer while the next one fills.
    """
    frames = list(frames)
    stats = EdgeStats(codebook_hash=bundle.codebook.id)
    conn = _connect_with_retries(endpoint, cfg.net_retries)
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    conn.settimeout(0.05)
    reader = _FrameReader(conn)
    try:
        conn.sendall(encode_wire_frame(WireFrame(msg_type=MSG_HELLO)))
        _expect_ack(reader, "HELLO")
        conn.sendall(encode_wire_frame(WireFrame(
            msg_type=MSG_CODEBOOK_CHECK, codebook_hash=bundle.codebook.id)))
        ack = _expect_ack(reader, "CODEBOOK_CHECK")
        if ack.payload and ack.payload[0] != ACK_OK:
            raise CodebookHashMismatch(
                f"server rejected codebook {bundle.codebook.id.hex()}")

        frames_per_buffer = max(1, int(round(cfg.frame_rate_hz * cfg.t_buf_s)))
        frame_gap = cfg.t_buf_s / frames_per_buffer
        dbuf = DoubleBuffer()
        send_q: "queue.Queue[tuple[list[bytes], FrameStats] | None]" = queue.Queue()
        errors: list[Exception] = []
        codebook_size = bundle.codebook.size

        def acquire():
            try:
                it = iter(frames)
                done = False
                buffer_index = 0
                while not done:
                    t_wait = time.monotonic()
                    slot = dbuf.next_for_fill()
                    stats.acquire_wait_ms.append((time.monotonic() - t_wait) * 1e3)
                    t_fill = time.monotonic()
                    for _ in range(frames_per_buffer):
                        try:
                            frame = next(it)
                        except StopIteration:
                            done = True
                            break
                        slot.frames.append((buffer_index, frame))
                        time.sleep(frame_gap)
                    stats.buffer_fill_s.append(time.monotonic() - t_fill)
                    dbuf.hand_to_encoder(slot)
                    buffer_index += 1
                dbuf.close()
            except Exception as exc:  # surfaced after join
                errors.append(exc)
                dbuf.close()

        def encode():
            try:
                while True:
                    slot = dbuf.next_for_encode()
                    if slot is None:
                        break
                    for buffer_index, frame in slot.frames:
                        t0 = time.monotonic()
                        z = bundle.encode(np.asarray(frame.amplitude, dtype=np.float64))
                        imap, _ = bundle.quantized(z, frame_id=frame.frame_id)
                        t1 = time.monotonic()
                        wires = frame_chunks(imap, codebook_size, cfg.chunk_indices)
                        blobs = [encode_wire_frame(w) for w in wires]
                        t2 = time.monotonic()
                        fs = FrameStats(
                            frame_id=frame.frame_id, buffer_index=buffer_index,
                            encode_ms=(t1 - t0) * 1e3, pack_ms=(t2 - t1) * 1e3,
                            send_ms=0.0, chunk_count=len(wires),
                            payload_bytes=sum(len(w.payload) for w in wires),
                            wire_bytes=sum(len(b) for b in blobs))
                        send_q.put((blobs, fs))
                    dbuf.return_from_encoder(slot)
                send_q.put(None)
            except Exception as exc:
                errors.append(exc)
                send_q.put(None)

        t_acquire = threading.Thread(target=acquire, name="edge-acquire")
        t_encode = threading.Thread(target=encode, name="edge-encode")
        t_acquire.start()
        t_encode.start()

        while True:
            item = send_q.get()
            if item is None:
                break
            blobs, fs = item
            t0 = time.monotonic()
            conn.sendall(b"".join(blobs))
            fs.send_ms = (time.monotonic() - t0) * 1e3
            stats.bytes_sent += fs.wire_bytes
            stats.frames.append(fs)

        t_acquire.join()
        t_encode.join()
        if errors:
            raise errors[0]
        stats.swap_count = dbuf.swap_count

        # STATS carries the frame count and grid dims so the server can
        # account for frames whose every chunk was lost (frame ids are
        # 0-based and consecutive within a session)
        gh = gw = 0
        if frames:
            z0 = bundle.encode(np.asarray(frames[0].amplitude, dtype=np.float64))
            gh, gw = z0.shape[0], z0.shape[1]
        conn.sendall(encode_wire_frame(WireFrame(
            msg_type=MSG_STATS, grid_h=gh, grid_w=gw,
            payload=pack_kv(meter(stats)))))
        _expect_ack(reader, "STATS")
        return stats
    finally:
        conn.close()


def meter(edge_stats: EdgeStats, server_result: "ServerResult | None" = None,
          frame_shape: tuple[int, int, int] | None = None) -> dict[str, float]:
    """Aggregate wall-clock and byte counters; cold-start buffer excluded."""
    metered = edge_stats.metered_frames() or edge_stats.frames
    out = {
        "frames": float(len(edge_stats.frames)),
        "encode_ms": sum(f.encode_ms for f in metered),
        "pack_ms": sum(f.pack_ms for f in metered),
        "tx_ms": sum(f.send_ms for f in metered),
        "bytes_sent": float(edge_stats.bytes_sent),
        "payload_bytes": float(sum(f.payload_bytes for f in edge_stats.frames)),
    }
    if server_result is not None:
        out["decode_ms"] = sum(r.decode_ms for r in server_result.frames)
        out["recover_ms"] = sum(r.recover_ms for r in server_result.frames)
    if frame_shape is not None:
        f_dim, t_dim, c_dim = frame_shape
        out["bytes_raw_equiv"] = float(
            len(edge_stats.frames) * f_dim * t_dim * c_dim * codec.BYTES_PER_POINT)
    return out


# ---------------------------------------------------------------------------
# server
# ---------------------------------------------------------------------------

@dataclass
class ServerFrame:
    frame_id: int
    index_grid: np.ndarray
    lost_cells: list[tuple[int, int]]
    x_hat: np.ndarray
    y_hat: np.ndarray
    decode_ms: float
    recover_ms: float
    nmse_db: float | None = None
    mpjpe: float | None = None


@dataclass
class ServerResult:
    frames: list[ServerFrame] = field(default_factory=list)
    edge_meter: dict[str, float] = field(default_factory=dict)
    crc_dropped_chunks: int = 0


class _PendingFrame:
    __slots__ = ("grid_h", "grid_w", "chunk_count", "chunks", "last_arrival")

    def __init__(self, grid_h, grid_w, chunk_count):
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.chunk_count = chunk_count
        self.chunks: dict[int, bytes] = {}
        self.last_arrival = time.monotonic()


def _assemble_grid(pending: _PendingFrame, codebook_size: int) -> np.ndarray:
    n = pending.grid_h * pending.grid_w
    bounds = chunk_bounds_for_count(n, pending.chunk_count)
    flat = np.full(n, LOST, dtype=np.int32)
    nbits = codec.bits_for(codebook_size)
    for seq, (start, stop) in enumerate(bounds):
        payload = pending.chunks.get(seq)
        if payload is None:
            continue
        stream = Bitstream(payload=payload, bits_per_index=nbits,
                           index_count=stop - start)
        flat[start:stop] = codec.unpack_indices(stream, codebook_size)
    return flat.reshape(pending.grid_h, pending.grid_w)


def server_run(bundle, endpoint: tuple[str, int], cfg: RunConfig,
               eval_truth: dict[int, tuple[np.ndarray, np.ndarray]] | None = None,
               _ready: "threading.Event | None" = None,
               _bound: list | None = None) -> ServerResult:
    """Serve one edge session: reassemble, recover, decode, estimate.

    Chunks missing after cfg.frame_timeout_ms (measured from a frame's last
    arrival) mark their cells LOST; recovery fills them when the bundle has
    a transformer.  With eval_truth (frame_id -> (X, Y)) per-frame NMSE and
    MPJPE are reported.
    """
    from . import metrics as _metrics

    result = ServerResult()
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    listener.bind(endpoint)
    listener.listen(1)
    if _bound is not None:
        _bound.append(listener.getsockname())
    if _ready is not None:
        _ready.set()

    pending: dict[int, _PendingFrame] = {}
    done_ids: set[int] = set()

    def finalize(fid: int) -> None:
        pf = pending.pop(fid)
        grid = _assemble_grid(pf, bundle.codebook.size)
        imap = IndexMap(grid=grid, codebook_id=bundle.codebook.id, frame_id=fid)
        lost = [tuple(c) for c in np.argwhere(grid == LOST)]
        recover_ms = 0.0
        if lost and bundle.transformer is not None:
            from . import recovery as _recovery
            t0 = time.monotonic()
            imap = _recovery.recover(imap, bundle.transformer, mode="argmax")
            recover_ms = (time.monotonic() - t0) * 1e3
        elif lost:
            filled = imap.grid.copy()
            filled[filled == LOST] = 0   # no recovery model: fall back to index 0
            imap = IndexMap(grid=filled, codebook_id=imap.codebook_id, frame_id=fid)
        t0 = time.monotonic()
        zq = codec.dequantize(imap, bundle.codebook)
        x_hat = bundle.decode(zq)
        y_hat = bundle.estimate(zq)
        decode_ms = (time.monotonic() - t0) * 1e3
        rec = ServerFrame(frame_id=fid, index_grid=imap.grid, lost_cells=lost,
                          x_hat=x_hat, y_hat=y_hat, decode_ms=decode_ms,
                          recover_ms=recover_ms)
        if eval_truth is not None and fid in eval_truth:
            x_true, y_true = eval_truth[fid]
            rec.nmse_db = _metrics.nmse_db(x_true, x_hat)
            rec.mpjpe = _metrics.mpjpe(y_hat, y_true)
        result.frames.append(rec)
        done_ids.add(fid)

    def flush_stale(now: float) -> None:
        timeout_s = cfg.frame_timeout_ms / 1e3
        for fid in sorted(pending):
            if now - pending[fid].last_arrival >= timeout_s:
                finalize(fid)

    try:
        conn, _ = listener.accept()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn.settimeout(0.01)
        reader = _FrameReader(conn)
        try:
            while True:
                frame = reader.next_frame()
                now = time.monotonic()
                flush_stale(now)
                if frame is None:
                    if reader.eof:
                        break
                    continue
                if frame.msg_type == MSG_HELLO:
                    conn.sendall(encode_wire_frame(WireFrame(
                        msg_type=MSG_ACK, payload=bytes([ACK_OK]))))
                elif frame.msg_type == MSG_CODEBOOK_CHECK:
                    ok = frame.codebook_hash == bundle.codebook.id
                    status = ACK_OK if ok else ACK_BAD_CODEBOOK
                    conn.sendall(encode_wire_frame(WireFrame(
                        msg_type=MSG_ACK, payload=bytes([status]))))
                    if not ok:
                        log.warning("codebook hash mismatch from edge; NACKed")
                elif frame.msg_type == MSG_INDEX_CHUNK:
                    if frame.codebook_hash != bundle.codebook.id:
                        continue  # unknown codebook: chunk unusable
                    if frame.frame_id in done_ids:
                        continue  # frame already timed out and finalized
                    pf = pending.get(frame.frame_id)
                    if pf is None:
                        pf = _PendingFrame(frame.grid_h, frame.grid_w,
                                           frame.chunk_count)
                        pending[frame.frame_id] = pf
                    pf.chunks[frame.chunk_seq] = frame.payload
                    pf.last_arrival = now
                    if len(pf.chunks) == pf.chunk_count:
                        finalize(frame.frame_id)
                elif frame.msg_type == MSG_STATS:
                    result.edge_meter = unpack_kv(frame.payload)
                    for fid in sorted(pending):
                        finalize(fid)
                    # frames that lost every chunk never created a pending
                    # entry; synthesize them as fully LOST grids
                    expected = int(result.edge_meter.get("frames", 0))
                    if frame.grid_h and frame.grid_w:
                        for fid in range(expected):
                            if fid not in done_ids:
                                pending[fid] = _PendingFrame(frame.grid_h,
                                                             frame.grid_w, 1)
                                finalize(fid)
                    conn.sendall(encode_wire_frame(WireFrame(
                        msg_type=MSG_ACK, payload=bytes([ACK_OK]))))
            for fid in sorted(pending):
                finalize(fid)
        finally:
            result.crc_dropped_chunks = reader.crc_failures
            conn.close()
    finally:
        listener.close()
    result.frames.sort(key=lambda r: r.frame_id)
    return result


class ServerHandle:
    """server_run on a thread; .endpoint() blocks until the socket is bound."""

    def __init__(self, bundle, cfg: RunConfig, host: str = "127.0.0.1", port: int = 0,
                 eval_truth=None):
        self._ready = threading.Event()
        self._bound: list = []
        self._result: list = []
        self._error: list = []

        def run():
            try:
                self._result.append(server_run(bundle, (host, port), cfg,
                                               eval_truth=eval_truth,
                                               _ready=self._ready,
                                               _bound=self._bound))
            except Exception as exc:
                self._error.append(exc)
                self._ready.set()

        self._thread = threading.Thread(target=run, name="server", daemon=True)
        self._thread.start()

    def endpoint(self, timeout: float = 10.0) -> tuple[str, int]:
        if not self._ready.wait(timeout):
            raise TransportError("server did not come up")
        if self._error:
            raise self._error[0]
        return self._bound[0]

    def result(self, timeout: float = 120.0) -> ServerResult:
        self._thread.join(timeout)
        if self._thread.is_alive():
            raise TransportError("server did not finish")
        if self._error:
            raise self._error[0]
        return self._result[0]


# ---------------------------------------------------------------------------
# loss proxy
# ---------------------------------------------------------------------------

class ProxyHandle:
    """TCP proxy that drops INDEX_CHUNK frames per the loss model.

    HELLO/CODEBOOK_CHECK/ACK/STATS always pass.  Forwarded frames are the
    original bytes, so an epsilon of 0 is a byte-identical pass-through.
    The drop log records (frame_id, chunk_seq) per dropped chunk.
    """

    def __init__(self, forward_to: tuple[str, int], loss: LossModel,
                 host: str = "127.0.0.1", port: int = 0):
        self.loss = loss
        self.forward_to = forward_to
        self.drop_log: list[tuple[int, int]] = []
        self._error: list = []
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(1)
        self.endpoint = self._listener.getsockname()
        self._thread = threading.Thread(target=self._run, name="proxy", daemon=True)
        self._thread.start()

    def _run(self):
        try:
            edge_conn, _ = self._listener.accept()
        except OSError:
            return
        edge_conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            server_conn = socket.create_connection(self.forward_to, timeout=10.0)
            server_conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError as exc:
            self._error.append(exc)
            edge_conn.close()
            return

        def upstream():
            buf = bytearray()
            try:
                while True:
                    while True:
                        frame, consumed, crc_ok = try_decode_wire_frame(buf)
                        if frame is None:
                            break
                        raw = bytes(buf[:consumed])
                        del buf[:consumed]
                        if (crc_ok and frame.msg_type == MSG_INDEX_CHUNK
                                and self.loss.should_drop()):
                            self.drop_log.append((frame.frame_id, frame.chunk_seq))
                            continue
                        server_conn.sendall(raw)
                    chunk = edge_conn.recv(65536)
                    if not chunk:
                        break
                    buf += chunk
            except OSError:
                pass
            finally:
                try:
                    server_conn.shutdown(socket.SHUT_WR)
                except OSError:
                    pass

        def downstream():
            try:
                while True:
                    chunk = server_conn.recv(65536)
                    if not chunk:
                        break
                    edge_conn.sendall(chunk)
            except OSError:
                pass
            finally:
                try:
                    edge_conn.shutdown(socket.SHUT_WR)
                except OSError:
                    pass

        t_up = threading.Thread(target=upstream, name="proxy-up", daemon=True)
        t_down = threading.Thread(target=downstream, name="proxy-down", daemon=True)
        t_up.start()
        t_down.start()
        t_up.join()
        t_down.join()
        edge_conn.close()
        server_conn.close()

    def join(self, timeout: float = 60.0) -> None:
        self._thread.join(timeout)
        if self._error:
            raise self._error[0]

    def close(self) -> None:
        try:
            self._listener.close()
        except OSError:
            pass
