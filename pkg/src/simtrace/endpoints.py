"""Simulator endpoints: where a model runs and how to reach it.

Endpoint spec strings:
  model:<name>            built-in toy model, in-process
  spawn:<command>         spawn the command; `{addr}` in it is replaced by
                          host:port of a controller-side listener the child
                          must connect to (appended if no placeholder)
  tcp:<host>:<port>       connect to a listening simulator
  ipc:<path>              connect over a UNIX-domain socket
"""

from __future__ import annotations

import shlex
import socket
import subprocess
import time
from typing import Optional

from .gateway import ControllerSession, Prior, RunAborted, RunTimeout, SamplingPolicy
from .rng import STREAM_MODEL, CounterRng, RunRng
from .simclient import ModelContext, ModelFn, SocketTransport
from .trace import Trace
from .values import Value
from .wire import Handshake, MessageKind, ProtocolError, RunResult, SessionError


class Endpoint:
    """One simulator under supervision; one in-flight run at a time."""

    def execute(self, observation: Optional[Value], policy: SamplingPolicy,
                run_rng: RunRng) -> Trace:
        raise NotImplementedError

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class InProcessEndpoint(Endpoint):
    """Runs a model callable in the controller process. Messages still pass
    through the session state machine, so protocol ordering is enforced."""

    def __init__(self, model: ModelFn, name: str = "in-process"):
        self._model = model
        self._session = ControllerSession()
        self._session.handle(Handshake(name=name))
        self._busy = False

    def execute(self, observation, policy, run_rng):
        if self._busy:
            raise ProtocolError("one in-flight run per endpoint")
        self._busy = True
        try:
            self._session.begin_run(observation, policy, run_rng)
            ctx = ModelContext(self._session.handle, observation)
            try:
                result = self._model(ctx)
            except (SessionError, ProtocolError):
                raise
            except Exception as e:
                self._session.abort_run()
                raise RunAborted(f"simulator raised: {e!r}") from e
            self._session.handle(RunResult(result))
            return self._session.take_trace()
        finally:
            self._busy = False


class SocketEndpoint(Endpoint):
    """Controller over a connected stream socket; the simulator speaks first."""

    def __init__(self, sock: socket.socket, timeout: Optional[float] = 30.0):
        sock.settimeout(timeout)
        self._transport = SocketTransport(sock)
        self._session = ControllerSession()
        self.timeout = timeout
        hello = self._recv()
        if hello.kind != MessageKind.HANDSHAKE:
            raise ProtocolError(f"expected Handshake, got {hello.kind.name}")
        reply = self._session.handle(hello)
        self._transport.send(reply)
        self._busy = False

    def _recv(self):
        try:
            return self._transport.recv()
        except socket.timeout as e:
            raise RunTimeout(f"no message within {self.timeout}s") from e
        except ConnectionError as e:
            raise RunAborted(str(e)) from e

    def execute(self, observation, policy, run_rng):
        if self._busy:
            raise ProtocolError("one in-flight run per endpoint")
        self._busy = True
        try:
            run_msg = self._session.begin_run(observation, policy, run_rng)
            self._transport.send(run_msg)
            while True:
                try:
                    m = self._recv()
                except (RunTimeout, RunAborted):
                    self._session.abort_run()
                    raise
                reply = self._session.handle(m)
                if m.kind == MessageKind.RUN_RESULT:
                    return self._session.take_trace()
                self._transport.send(reply)
        finally:
            self._busy = False

    def close(self):
        self._transport.close()


class SpawnEndpoint(SocketEndpoint):
    def __init__(self, command: str, timeout: Optional[float] = 30.0):
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        host, port = listener.getsockname()
        addr = f"{host}:{port}"
        if "{addr}" in command:
            argv = [a.replace("{addr}", addr) for a in shlex.split(command)]
        else:
            argv = shlex.split(command) + [addr]
        self._proc = subprocess.Popen(argv)
        listener.settimeout(timeout)
        try:
            conn, _ = listener.accept()
        except socket.timeout:
            self._proc.kill()
            raise RunTimeout(f"spawned simulator did not connect within {timeout}s")
        finally:
            listener.close()
        super().__init__(conn, timeout)

    def close(self):
        super().close()
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()


def connect_endpoint(spec: str, timeout: Optional[float] = 30.0) -> Endpoint:
    """Open an endpoint from its spec string (see module docstring)."""
    scheme, _, rest = spec.partition(":")
    if scheme == "model":
        from . import models
        return InProcessEndpoint(models.get_model(rest), name=rest)
    if scheme == "spawn":
        return SpawnEndpoint(rest, timeout)
    if scheme == "tcp":
        host, _, port = rest.rpartition(":")
        deadline = time.monotonic() + (timeout or 30.0)
        while True:
            try:
                sock = socket.create_connection((host, int(port)), timeout=timeout)
                break
            except ConnectionRefusedError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.05)
        return SocketEndpoint(sock, timeout)
    if scheme == "ipc":
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.connect(rest)
        return SocketEndpoint(sock, timeout)
    raise ValueError(f"unknown endpoint spec {spec!r}")


def execute(endpoint: Endpoint, observation: Optional[Value],
            policy: SamplingPolicy, run_rng: RunRng) -> Trace:
    return endpoint.execute(observation, policy, run_rng)


def sample_prior(endpoint: Endpoint, n: int, seed: int,
                 observation: Optional[Value] = None, run_offset: int = 0) -> list[Trace]:
    """n independent prior executions, reproducible given the seed."""
    if n < 0:
        raise ValueError("n must be >= 0")
    root = CounterRng(seed)
    policy = Prior()
    out = []
    for i in range(n):
        rng = RunRng(root, run_offset + i, STREAM_MODEL)
        out.append(endpoint.execute(observation, policy, rng))
    return out
