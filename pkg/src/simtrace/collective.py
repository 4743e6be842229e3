"""Synchronous gradient exchange among worker processes.

Workers form a TCP ring ordered by rank. Gradients are concatenated into
one float64 buffer per step and exchanged with ring reduce-scatter +
allgather, so the number of messages per collective is O(world size),
independent of how many tensors are present. Reduction order is fixed by
ring position, making results bit-identical across runs and across ranks.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .nn import ParamStore

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class CollectiveAborted(RuntimeError):
    pass


def _send_blob(sock: socket.socket, payload: bytes):
    try:
        sock.sendall(_U32.pack(len(payload)) + payload)
    except OSError as e:
        raise CollectiveAborted(f"peer send failed: {e}") from e


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        try:
            data = sock.recv(min(n - got, 1 << 20))
        except OSError as e:
            raise CollectiveAborted(f"peer recv failed: {e}") from e
        if not data:
            raise CollectiveAborted("peer disconnected")
        chunks.append(data)
        got += len(data)
    return b"".join(chunks)


def _recv_blob(sock: socket.socket) -> bytes:
    n = _U32.unpack(_recv_exact(sock, 4))[0]
    return _recv_exact(sock, n)


def _connect_with_retry(host: str, port: int, timeout: float) -> socket.socket:
    import time
    deadline = time.monotonic() + timeout
    while True:
        try:
            return socket.create_connection((host, port), timeout=timeout)
        except (ConnectionRefusedError, OSError):
            if time.monotonic() > deadline:
                raise
            time.sleep(0.02)


class WorkerGroup:
    """One rank's view of the ring. world_size=1 needs no sockets."""

    def __init__(self, rank: int, world_size: int,
                 rendezvous: Optional[str] = None, timeout: float = 60.0):
        if not 0 <= rank < world_size:
            raise ValueError(f"rank {rank} outside world of {world_size}")
        self.rank = rank
        self.world_size = world_size
        self.messages_sent = 0
        self.collectives = 0
        self._right: Optional[socket.socket] = None
        self._left: Optional[socket.socket] = None
        if world_size == 1:
            return
        if rendezvous is None:
            raise ValueError("rendezvous address required for world_size > 1")
        host, _, port = rendezvous.rpartition(":")
        self._form_ring(host, int(port), timeout)

    def _form_ring(self, host: str, port: int, timeout: float):
        # every rank runs its own listener; rank 0 additionally collects the
        # listener table at the rendezvous address and hands it to everyone
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((host if self.rank == 0 else "127.0.0.1", 0))
        listener.listen(2)
        listener.settimeout(timeout)
        my_addr = listener.getsockname()

        if self.rank == 0:
            rendez = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            rendez.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            rendez.bind((host, port))
            rendez.listen(self.world_size)
            rendez.settimeout(timeout)
            table = {0: my_addr}
            conns = []
            for _ in range(self.world_size - 1):
                c, _ = rendez.accept()
                blob = _recv_blob(c)
                r, h, p = blob.decode("utf-8").split("|")
                table[int(r)] = (h, int(p))
                conns.append(c)
            payload = "|".join(f"{r}:{h}:{p}" for r, (h, p) in sorted(table.items()))
            for c in conns:
                _send_blob(c, payload.encode("utf-8"))
                c.close()
            rendez.close()
        else:
            rendez = _connect_with_retry(host, port, timeout)
            _send_blob(rendez, f"{self.rank}|{my_addr[0]}|{my_addr[1]}".encode("utf-8"))
            payload = _recv_blob(rendez).decode("utf-8")
            rendez.close()
            table = {}
            for part in payload.split("|"):
                r, h, p = part.split(":")
                table[int(r)] = (h, int(p))

        right_rank = (self.rank + 1) % self.world_size
        self._right = socket.create_connection(table[right_rank], timeout=timeout)
        self._right.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        left, _ = listener.accept()
        left.settimeout(timeout)
        left.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._left = left
        listener.close()

    def close(self):
        for s in (self._right, self._left):
            if s is not None:
                try:
                    s.close()
                except OSError:
                    pass
        self._right = self._left = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # ---- primitives ----

    def _send_chunk(self, arr: np.ndarray):
        _send_blob(self._right, arr.tobytes())
        self.messages_sent += 1

    def _recv_chunk(self, dtype) -> np.ndarray:
        return np.frombuffer(_recv_blob(self._left), dtype=dtype).copy()

    def _ring_allreduce(self, buf: np.ndarray, op) -> np.ndarray:
        """In-place ring reduce-scatter + allgather over a flat buffer."""
        n = self.world_size
        self.collectives += 1
        if n == 1:
            return buf
        segments = np.array_split(buf, n)
        for step in range(n - 1):
            send_i = (self.rank - step) % n
            recv_i = (self.rank - step - 1) % n
            self._send_chunk(segments[send_i])
            incoming = self._recv_chunk(buf.dtype)
            segments[recv_i] = op(segments[recv_i], incoming)
        for step in range(n - 1):
            send_i = (self.rank + 1 - step) % n
            recv_i = (self.rank - step) % n
            self._send_chunk(segments[send_i])
            segments[recv_i] = self._recv_chunk(buf.dtype)
        return np.concatenate(segments)

    # ---- public collectives ----

    def allreduce_presence(self, bitmap: np.ndarray) -> np.ndarray:
        """Bitwise OR across ranks of a uint8 presence map."""
        local = np.ascontiguousarray(bitmap, dtype=np.uint8)
        if self.world_size == 1:
            self.collectives += 1
            return local.copy()
        return self._ring_allreduce(local.copy(), np.bitwise_or)

    def allreduce_sum(self, buf: np.ndarray, average: bool = True) -> np.ndarray:
        out = self._ring_allreduce(np.ascontiguousarray(buf, dtype=np.float64).copy(),
                                   np.add)
        if average:
            out = out / self.world_size
        return out

    def allreduce_scalar(self, x: float, average: bool = True) -> float:
        return float(self.allreduce_sum(np.array([x]), average=average)[0])

    def broadcast(self, buf: np.ndarray, root: int = 0) -> np.ndarray:
        """Pass `root`'s buffer around the ring."""
        self.collectives += 1
        arr = np.ascontiguousarray(buf)
        if self.world_size == 1:
            return arr.copy()
        # (rank - root) mod n hops from the root along the ring
        position = (self.rank - root) % self.world_size
        if position == 0:
            self._send_chunk(arr)
            return arr.copy()
        incoming = self._recv_chunk(arr.dtype)
        if position < self.world_size - 1:
            self._send_chunk(incoming)
        return incoming


# ---------------------------------------------------------------------------
# gradient exchange on top of a parameter store


def exchange_gradients(group: WorkerGroup, store: ParamStore) -> int:
    """Union-present gradients, zero-filled, buffer-concatenated, averaged.

    Returns the number of parameter tensors that took part. After the call
    every rank holds identical averaged gradients in p.grad (zero-filled
    tensors included), and parameters absent on every rank keep grad=None.
    """
    names = store.names()
    presence = np.array([1 if store[n].grad is not None else 0 for n in names],
                        dtype=np.uint8)
    union = group.allreduce_presence(presence)
    active = [n for n, present in zip(names, union) if present]
    if not active:
        return 0
    parts = []
    for n in active:
        p = store[n]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        parts.append(g.reshape(-1))
    flat = np.concatenate(parts) if parts else np.zeros(0)
    flat = group.allreduce_sum(flat, average=True)
    offset = 0
    for n in active:
        p = store[n]
        p.grad = flat[offset:offset + p.size].reshape(p.shape).copy()
        offset += p.size
    return len(active)


def broadcast_parameters(group: WorkerGroup, store: ParamStore, root: int = 0):
    if group.world_size == 1:
        return
    for name, p in store.items():
        p.data = group.broadcast(p.data, root=root).reshape(p.shape).copy()


def verify_layout(group: WorkerGroup, store: ParamStore):
    """All ranks must hold the identical canonical parameter layout."""
    if group.world_size == 1:
        return
    h = store.layout_hash()
    ref = group.broadcast(np.array([h], dtype=np.uint64), root=0)[0]
    if int(ref) != h:
        raise CollectiveAborted("parameter layout differs across ranks")
