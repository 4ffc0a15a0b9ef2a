"""Loopback stream transport: length-prefixed frames of canonical documents.

A frame is a 4-byte big-endian length followed by one encoded document. The
document's ``kind`` field names what it carries (``envelope``, ``token``,
``protected``, ``policy``, ``result``, ``error``); request frames may also
carry routing fields read without verification (``op``, ``declared_identity``,
``flow``).

Every connection accepted by a FrameServer is stamped with a network Origin;
privileged helpers refuse invocations whose origin carries that marker.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
from dataclasses import dataclass

from . import encoding
from .errors import GridForgeError, MalformedEnvelope, TransportError, from_wire

MAX_FRAME = 16 * 1024 * 1024

KIND_ENVELOPE = "envelope"
KIND_TOKEN = "token"
KIND_PROTECTED = "protected"
KIND_POLICY = "policy"
KIND_RESULT = "result"
KIND_ERROR = "error"


@dataclass(frozen=True)
class Origin:
    """Where an invocation came from. Network entry points always stamp this."""

    transport: str            # "local" or "network"
    peer: str | None = None

    @property
    def is_network(self) -> bool:
        return self.transport == "network"


LOCAL_ORIGIN = Origin(transport="local")


def local_origin(note: str | None = None) -> Origin:
    return Origin(transport="local", peer=note)


def send_frame(sock: socket.socket, doc: encoding.Value) -> None:
    data = encoding.encode(doc)
    sock.sendall(struct.pack(">I", len(data)) + data)


def recv_frame(sock: socket.socket) -> encoding.Value | None:
    """Next document on the stream, or None on a clean EOF between frames."""
    header = _recv_exact(sock, 4, allow_eof=True)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME:
        raise TransportError(f"frame of {length} bytes exceeds limit")
    data = _recv_exact(sock, length, allow_eof=False)
    assert data is not None
    return encoding.decode(data)


def _recv_exact(sock: socket.socket, n: int, *, allow_eof: bool) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if allow_eof and not buf:
                return None
            raise TransportError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError as exc:
        raise TransportError(f"bad endpoint {endpoint!r}") from exc


class Conversation:
    """A client connection exchanging multiple frames (handshakes, job control)."""

    def __init__(self, endpoint: str, timeout: float = 10.0):
        host, port = parse_endpoint(endpoint)
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {endpoint}: {exc}") from exc
        self.endpoint = endpoint

    def send(self, doc: encoding.Value) -> None:
        try:
            send_frame(self._sock, doc)
        except OSError as exc:
            raise TransportError(f"send to {self.endpoint} failed: {exc}") from exc

    def recv(self) -> encoding.Value:
        try:
            doc = recv_frame(self._sock)
        except OSError as exc:
            raise TransportError(f"recv from {self.endpoint} failed: {exc}") from exc
        if doc is None:
            raise TransportError(f"{self.endpoint} closed the connection")
        return doc

    def exchange(self, doc: encoding.Value) -> dict:
        """Send one frame and return the reply, raising remotely reported errors."""
        self.send(doc)
        return expect_reply(self.recv())

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "Conversation":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def expect_reply(doc: encoding.Value) -> dict:
    if not isinstance(doc, dict) or "kind" not in doc:
        raise MalformedEnvelope("reply frame has no kind")
    if doc["kind"] == KIND_ERROR:
        raise from_wire(doc.get("body", {}))
    return doc


def call(endpoint: str, doc: encoding.Value, timeout: float = 10.0) -> dict:
    """One-shot request/response against a frame service."""
    with Conversation(endpoint, timeout=timeout) as conn:
        return conn.exchange(doc)


class FrameServer:
    """Threaded loopback listener dispatching whole connections to a service.

    The service object implements ``serve_connection(conn, origin)`` where
    ``conn`` is a server-side Conversation-like wrapper; any GridForgeError it
    raises is reported to the peer as an error frame.
    """

    def __init__(self, service, host: str = "127.0.0.1", port: int = 0):
        self.service = service
        outer = self

        class _Handler(socketserver.BaseRequestHandler):
            def handle(self) -> None:
                conn = _ServerConnection(self.request)
                origin = Origin(transport="network", peer=f"{self.client_address[0]}:{self.client_address[1]}")
                try:
                    outer.service.serve_connection(conn, origin)
                except GridForgeError as err:
                    try:
                        conn.send({"kind": KIND_ERROR, "body": err.to_wire()})
                    except (OSError, TransportError):
                        pass
                except (OSError, TransportError):
                    pass

        class _Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = _Server((host, port), _Handler)
        self.endpoint = f"{host}:{self._server.server_address[1]}"
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._server.serve_forever, name=f"frames@{self.endpoint}", daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


class _ServerConnection:
    def __init__(self, sock: socket.socket):
        self._sock = sock

    def send(self, doc: encoding.Value) -> None:
        send_frame(self._sock, doc)

    def recv(self) -> encoding.Value | None:
        return recv_frame(self._sock)
