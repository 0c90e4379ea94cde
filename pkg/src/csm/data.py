"""Scoped data contexts, chains, and the persistent store.

Each component carries its own data contexts; a ScopeChain strings together
the contexts of a component and its ancestors (innermost first) with the
persistent store consulted last. Name resolution walks inward-out; an inner
declaration may shadow an outer one. Assignment writes to the context where
the name resolved, never to a shadow copy.

Store backends: an in-process map, and a TCP key-value client/server pair
with a configurable per-operation delay on the client to stand in for
network distance.
"""

from __future__ import annotations

import random
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional

from . import expr, wire
from .model import VariableDecl
from .values import Value, from_jsonable, to_jsonable


class OutOfScopeError(Exception):
    def __init__(self, name: str):
        super().__init__(f"variable {name!r} is not in scope")
        self.name = name


class AlreadyExistsError(Exception):
    def __init__(self, name: str, where: str):
        super().__init__(f"variable {name!r} already exists in {where}")
        self.name = name


class DuplicateNameError(Exception):
    def __init__(self, name: str, where: str):
        super().__init__(f"duplicate declaration of {name!r} in {where}")
        self.name = name


@dataclass
class DataContext:
    """One component's variable frame. kind is 'local' or 'static'; the
    distinction is lifecycle (who clears it when), not lookup behavior."""

    kind: str
    owner: str
    entries: dict = field(default_factory=dict)


class PersistentStore(expr.StoreView):
    """Key-value storage shared by every instance. Per-key atomic,
    last-writer-wins, no transactions."""

    def lookup(self, name: str) -> tuple[bool, Value]:
        raise NotImplementedError

    def get(self, name: str) -> Value:
        found, value = self.lookup(name)
        if not found:
            raise OutOfScopeError(name)
        return value

    def put(self, name: str, value: Value) -> None:
        raise NotImplementedError

    def delete(self, name: str) -> bool:
        raise NotImplementedError


class InMemoryStore(PersistentStore):
    def __init__(self):
        self._lock = threading.Lock()
        self._entries: dict = {}

    def lookup(self, name: str) -> tuple[bool, Value]:
        with self._lock:
            if name in self._entries:
                return True, self._entries[name]
            return False, None

    def put(self, name: str, value: Value) -> None:
        with self._lock:
            self._entries[name] = value

    def delete(self, name: str) -> bool:
        with self._lock:
            return self._entries.pop(name, _MISSING) is not _MISSING


_MISSING = object()


class ScopeChain:
    """Contexts visible from one component, innermost first, plus the store."""

    def __init__(self, frames: Iterable[DataContext] = (), store: Optional[PersistentStore] = None):
        self.frames: tuple[DataContext, ...] = tuple(frames)
        self.store = store

    def child(self, ctx: DataContext) -> "ScopeChain":
        return ScopeChain((ctx, *self.frames), self.store)

    def environment(self, rng: Optional[random.Random] = None) -> expr.Environment:
        return expr.Environment([f.entries for f in self.frames], self.store, rng)

    def try_resolve(self, name: str) -> tuple[bool, Value]:
        for frame in self.frames:
            if name in frame.entries:
                return True, frame.entries[name]
        if self.store is not None:
            return self.store.lookup(name)
        return False, None

    def resolve(self, name: str) -> Value:
        found, value = self.try_resolve(name)
        if not found:
            raise OutOfScopeError(name)
        return value

    def create(self, name: str, value: Value, persistent: bool = False) -> str:
        """Returns where the variable landed: 'local' or 'persistent'."""
        if persistent:
            if self.store is None:
                raise OutOfScopeError(name)
            found, _ = self.store.lookup(name)
            if found:
                raise AlreadyExistsError(name, "persistent store")
            self.store.put(name, value)
            return "persistent"
        if not self.frames:
            raise OutOfScopeError(name)
        innermost = self.frames[0]
        if name in innermost.entries:
            raise AlreadyExistsError(name, innermost.owner)
        innermost.entries[name] = value
        return "local"

    def assign(self, name: str, value: Value) -> str:
        """Returns where the write landed: 'local' or 'persistent'."""
        for frame in self.frames:
            if name in frame.entries:
                frame.entries[name] = value
                return "local"
        if self.store is not None:
            found, _ = self.store.lookup(name)
            if found:
                self.store.put(name, value)
                return "persistent"
        raise OutOfScopeError(name)

    def delete(self, name: str) -> None:
        for frame in self.frames:
            if name in frame.entries:
                del frame.entries[name]
                return
        if self.store is not None and self.store.delete(name):
            return
        raise OutOfScopeError(name)


def declare_block(
    decls: Iterable[VariableDecl],
    ctx: DataContext,
    chain: ScopeChain,
    rng: Optional[random.Random] = None,
    skip_existing: bool = False,
) -> None:
    """Evaluate lexical declarations into ctx, in declaration order.

    chain must already contain ctx so earlier declarations are visible to
    later ones. skip_existing supports static re-entry (values retained)
    and externally pre-installed names."""
    env = chain.environment(rng)
    for d in decls:
        if d.name in ctx.entries:
            if skip_existing:
                continue
            raise DuplicateNameError(d.name, ctx.owner)
        ctx.entries[d.name] = expr.evaluate_text(d.value, env)


def declare_persistent(
    decls: Iterable[VariableDecl],
    chain: ScopeChain,
    rng: Optional[random.Random] = None,
) -> None:
    """Lexical persistent declarations: put-if-absent into the store, so a
    restarted or second instance does not clobber live shared values."""
    if chain.store is None and any(True for _ in decls):
        raise OutOfScopeError(next(iter(decls)).name)
    env = chain.environment(rng)
    for d in decls:
        found, _ = chain.store.lookup(d.name)
        if not found:
            chain.store.put(d.name, expr.evaluate_text(d.value, env))


# --- TCP store backend -------------------------------------------------


class _StoreHandler(socketserver.BaseRequestHandler):
    def handle(self):
        store: InMemoryStore = self.server.store  # type: ignore[attr-defined]
        while True:
            try:
                frame = wire.recv_frame(self.request)
            except (wire.FrameError, OSError):
                return
            if frame is None:
                return
            op = frame.get("op")
            name = frame.get("name")
            if op == "get":
                found, value = store.lookup(name)
                reply = {"ok": True, "found": found}
                if found:
                    reply["value"] = to_jsonable(value)
            elif op == "put":
                store.put(name, from_jsonable(frame.get("value")))
                reply = {"ok": True}
            elif op == "del":
                reply = {"ok": True, "found": store.delete(name)}
            else:
                reply = {"ok": False, "error": f"unknown op {op!r}"}
            try:
                wire.send_frame(self.request, reply)
            except OSError:
                return


class StoreServer(socketserver.ThreadingTCPServer):
    """Serves one InMemoryStore over the framed GET/PUT/DEL protocol."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _StoreHandler)
        self.store = InMemoryStore()

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start(self) -> "StoreServer":
        threading.Thread(target=self.serve_forever, name="store-server", daemon=True).start()
        return self


class RemoteStore(PersistentStore):
    """Client for StoreServer. inject_latency_ms delays every operation on
    the client side to model link distance; the server itself stays fast."""

    def __init__(self, host: str, port: int, inject_latency_ms: float = 0.0, timeout: float = 10.0):
        self._address = (host, port)
        self._timeout = timeout
        self.inject_latency_ms = inject_latency_ms
        self._lock = threading.Lock()
        self._sock: Optional[socket.socket] = None

    def _connect(self) -> socket.socket:
        if self._sock is None:
            sock = socket.create_connection(self._address, timeout=self._timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._sock = sock
        return self._sock

    def _request(self, frame: dict) -> dict:
        if self.inject_latency_ms > 0:
            time.sleep(self.inject_latency_ms / 1000.0)
        with self._lock:
            try:
                sock = self._connect()
                wire.send_frame(sock, frame)
                reply = wire.recv_frame(sock)
            except OSError:
                # one reconnect attempt, then give up
                self.close()
                sock = self._connect()
                wire.send_frame(sock, frame)
                reply = wire.recv_frame(sock)
            if reply is None:
                self.close()
                raise wire.FrameError("store connection closed")
            return reply

    def lookup(self, name: str) -> tuple[bool, Value]:
        reply = self._request({"op": "get", "name": name})
        if reply.get("found"):
            return True, from_jsonable(reply.get("value"))
        return False, None

    def put(self, name: str, value: Value) -> None:
        self._request({"op": "put", "name": name, "value": to_jsonable(value)})

    def delete(self, name: str) -> bool:
        return bool(self._request({"op": "del", "name": name}).get("found"))

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None
