"""Length-prefixed JSON framing shared by every TCP protocol in the package.

A frame is a 4-byte big-endian payload length followed by a UTF-8 JSON
document. Values travel in the same JSON encoding used for event payloads
(bytes wrapped by values.to_jsonable).
"""

from __future__ import annotations

import json
import socket
import struct
from typing import Any, Optional

_HEADER = struct.Struct(">I")
MAX_FRAME = 64 * 1024 * 1024  # refuse absurd lengths rather than allocate


class FrameError(Exception):
    pass


def send_frame(sock: socket.socket, obj: Any) -> None:
    payload = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    sock.sendall(_HEADER.pack(len(payload)) + payload)


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None  # peer closed
        buf.extend(chunk)
    return bytes(buf)


def recv_frame(sock: socket.socket) -> Optional[Any]:
    """Read one frame; None on orderly EOF at a frame boundary."""
    header = _recv_exact(sock, _HEADER.size)
    if header is None:
        return None
    (length,) = _HEADER.unpack(header)
    if length > MAX_FRAME:
        raise FrameError(f"frame of {length} bytes exceeds limit")
    payload = _recv_exact(sock, length)
    if payload is None:
        raise FrameError("connection closed mid-frame")
    try:
        return json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FrameError(f"bad frame payload: {e}") from e
