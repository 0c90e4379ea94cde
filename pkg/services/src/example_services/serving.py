"""Run the app on a background uvicorn server; used by tests and scripts."""

from __future__ import annotations

import threading
import time

import uvicorn


class ServerHandle:
    def __init__(self, server: uvicorn.Server, thread: threading.Thread):
        self._server = server
        self._thread = thread

    @property
    def address(self) -> tuple[str, int]:
        sock = self._server.servers[0].sockets[0]
        return sock.getsockname()[:2]

    def url(self, path: str = "") -> str:
        host, port = self.address
        return f"http://{host}:{port}{path}"

    def stop(self, timeout: float = 10.0) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=timeout)


def serve_in_thread(app, host: str = "127.0.0.1", port: int = 0, startup_timeout: float = 10.0) -> ServerHandle:
    config = uvicorn.Config(app, host=host, port=port, log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, name="example-services", daemon=True)
    thread.start()
    deadline = time.monotonic() + startup_timeout
    while not server.started:
        if time.monotonic() > deadline or not thread.is_alive():
            raise RuntimeError("server did not start")
        time.sleep(0.01)
    return ServerHandle(server, thread)
