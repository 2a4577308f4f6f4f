"""Stream-socket transport: the same length-prefixed frames over real TCP.

The simulated fabric carries all deterministic testing; this module is the
deployment-facing substrate. Each endpoint owns a listener; outbound
connections are cached per peer address. Beacons go over UDP datagrams to a
configurable group/port (unicast works too, which is what the tests use).
"""

from __future__ import annotations

import os
import socket
import struct
import threading
from typing import Any, Callable

DEFAULT_BEACON_GROUP = os.environ.get("LABBUS_BEACON_GROUP", "239.82.11.1")
DEFAULT_BEACON_PORT = int(os.environ.get("LABBUS_BEACON_PORT", "8211"))

from .envelope import Envelope, FrameDecoder, encode_frame

_LEN = struct.Struct(">I")


class TcpEndpoint:
    """Frame-oriented endpoint. Delivery callbacks run on reader threads;
    hand frames to a queue if single-threaded semantics are needed."""

    def __init__(self, node_id: str,
                 on_frame: Callable[[Envelope, str], None],
                 host: str = "127.0.0.1", port: int = 0) -> None:
        self.node_id = node_id
        self.on_frame = on_frame
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(16)
        self.address = self._listener.getsockname()
        self._peers: dict[tuple[str, int], socket.socket] = {}
        self._lock = threading.Lock()
        self._closing = False
        self._accept_thread = threading.Thread(target=self._accept_loop,
                                               daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._closing:
            try:
                conn, peer = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._read_loop, args=(conn, peer),
                             daemon=True).start()

    def _read_loop(self, conn: socket.socket, peer: tuple[str, int]) -> None:
        decoder = FrameDecoder()
        try:
            while not self._closing:
                data = conn.recv(65536)
                if not data:
                    return
                for envelope in decoder.feed(data):
                    self.on_frame(envelope, f"{peer[0]}:{peer[1]}")
        except OSError:
            return
        finally:
            conn.close()

    def _connection(self, address: tuple[str, int]) -> socket.socket:
        with self._lock:
            conn = self._peers.get(address)
            if conn is None:
                conn = socket.create_connection(address, timeout=5.0)
                self._peers[address] = conn
            return conn

    def send(self, envelope: Envelope, address: tuple[str, int]) -> None:
        frame = encode_frame(envelope)
        conn = self._connection(address)
        try:
            conn.sendall(frame)
        except OSError:
            with self._lock:
                self._peers.pop(address, None)
            raise

    def close(self) -> None:
        self._closing = True
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            for conn in self._peers.values():
                conn.close()
            self._peers.clear()


class UdpBeacon:
    """Datagram announcements for discovery: broadcast to a group address in
    deployments, plain unicast in tests."""

    def __init__(self, node_id: str, group: str = DEFAULT_BEACON_GROUP,
                 port: int = DEFAULT_BEACON_PORT,
                 on_beacon: Callable[[dict[str, Any], str], None] | None = None,
                 listen: bool = False, listen_host: str = "") -> None:
        self.node_id = node_id
        self.group = group
        self.port = port
        self.on_beacon = on_beacon
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_BROADCAST, 1)
        self._closing = False
        if listen:
            self._sock.bind((listen_host, port))
            threading.Thread(target=self._listen_loop, daemon=True).start()

    def announce(self, payload: dict[str, Any],
                 target: str | None = None) -> None:
        import json
        body = json.dumps({"node_id": self.node_id, **payload}).encode("utf-8")
        self._sock.sendto(body, (target or self.group, self.port))

    def _listen_loop(self) -> None:
        import json
        while not self._closing:
            try:
                data, peer = self._sock.recvfrom(65536)
            except OSError:
                return
            if self.on_beacon is not None:
                try:
                    self.on_beacon(json.loads(data.decode("utf-8")),
                                   f"{peer[0]}:{peer[1]}")
                except ValueError:
                    continue

    def close(self) -> None:
        self._closing = True
        self._sock.close()
