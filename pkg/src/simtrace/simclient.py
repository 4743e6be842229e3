"""Simulator-side protocol client.

A simulator is any callable taking a ModelContext. The context routes every
random draw and conditioning statement to the controller, either through an
in-process exchange function or over a stream socket. This module is the
reference client; simulators in other languages implement the same loop.
"""

from __future__ import annotations

import socket
from typing import Callable, Optional

from .addressing import AddressCache, resolve_address
from .distributions import Distribution
from .values import Value
from .wire import (
    Handshake, HandshakeResult, MessageKind, ObserveAck, ObserveNotify,
    ProtocolError, Run, RunResult, SampleReply, SampleRequest, SessionState,
    StreamDecoder, WireMessage, encode, session_step,
)

Exchange = Callable[[WireMessage], WireMessage]


class ModelContext:
    """What a simulator sees while it runs: sample, observe, the observation."""

    def __init__(self, exchange: Exchange, observation: Optional[Value],
                 cache: Optional[AddressCache] = None):
        self._exchange = exchange
        self.observation = observation
        self._cache = cache if cache is not None else AddressCache()

    def sample(self, dist: Distribution, frames: list[str], name: str = "",
               control: bool = True, replace: bool = False) -> Value:
        address = resolve_address(frames, dist.tag, self._cache)
        reply = self._exchange(SampleRequest(address, name, dist, control, replace))
        if reply.kind != MessageKind.SAMPLE_REPLY:
            raise ProtocolError(f"expected SampleReply, got {reply.kind.name}")
        return reply.value

    def observe(self, dist: Distribution, frames: list[str],
                value: Optional[Value] = None) -> Value:
        """Condition on `value`; with value=None the controller draws it
        (prior generation) and the drawn value is returned."""
        address = resolve_address(frames, dist.tag, self._cache)
        reply = self._exchange(ObserveNotify(address, dist, value))
        if reply.kind != MessageKind.OBSERVE_ACK:
            raise ProtocolError(f"expected ObserveAck, got {reply.kind.name}")
        return value if value is not None else reply.returned_value


ModelFn = Callable[[ModelContext], Value]


class SocketTransport:
    """Blocking framed-message transport over a stream socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._decoder = StreamDecoder()
        self._inbox: list[WireMessage] = []

    def send(self, m: WireMessage):
        self.sock.sendall(encode(m))

    def recv(self) -> WireMessage:
        while not self._inbox:
            data = self.sock.recv(65536)
            if not data:
                raise ConnectionError("peer closed connection")
            self._inbox.extend(self._decoder.feed(data))
        return self._inbox.pop(0)

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def serve_connection(sock: socket.socket, model: ModelFn, name: str = "simulator"):
    """Run the simulator loop on an established connection until it closes."""
    transport = SocketTransport(sock)
    state = SessionState.AWAITING_HANDSHAKE

    def checked_send(m):
        nonlocal state
        state = session_step(state, m)
        transport.send(m)

    def checked_recv():
        nonlocal state
        m = transport.recv()
        state = session_step(state, m)
        return m

    checked_send(Handshake(name=name))
    result = checked_recv()
    if result.kind != MessageKind.HANDSHAKE_RESULT or not result.ok:
        raise ProtocolError("handshake rejected")

    def exchange(m):
        checked_send(m)
        return checked_recv()

    while True:
        try:
            run = checked_recv()
        except ConnectionError:
            return
        if run.kind != MessageKind.RUN:
            raise ProtocolError(f"expected Run, got {run.kind.name}")
        ctx = ModelContext(exchange, run.observation)
        result_value = model(ctx)
        checked_send(RunResult(result_value))


def connect_and_serve(host: str, port: int, model: ModelFn, name: str = "simulator"):
    sock = socket.create_connection((host, port))
    try:
        serve_connection(sock, model, name)
    finally:
        sock.close()


def listen_and_serve(model: ModelFn, host: str = "127.0.0.1", port: int = 0,
                     name: str = "simulator", ready_callback=None,
                     max_sessions: Optional[int] = None, unix_path: Optional[str] = None):
    """Accept controller connections sequentially, one session each."""
    if unix_path is not None:
        server = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        server.bind(unix_path)
    else:
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind((host, port))
    server.listen(1)
    if ready_callback is not None:
        ready_callback(server.getsockname())
    served = 0
    try:
        while max_sessions is None or served < max_sessions:
            conn, _ = server.accept()
            try:
                serve_connection(conn, model, name)
            except (ConnectionError, ProtocolError):
                pass
            finally:
                conn.close()
            served += 1
    finally:
        server.close()
