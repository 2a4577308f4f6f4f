import queue
import time

from labkernel.bus.envelope import Envelope
from labkernel.bus.tcp import TcpEndpoint, UdpBeacon


def test_tcp_frames_roundtrip_localhost():
    inbox_a: queue.Queue = queue.Queue()
    inbox_b: queue.Queue = queue.Queue()
    a = TcpEndpoint("a", lambda env, src: inbox_a.put(env))
    b = TcpEndpoint("b", lambda env, src: inbox_b.put(env))
    try:
        sent = [Envelope(channel="status", kind="publish", msg_id=f"a-m{i}",
                         source="a", target="b",
                         payload={"topic": "t", "i": i}, seq=i + 1)
                for i in range(20)]
        for env in sent:
            a.send(env, b.address)
        got = [inbox_b.get(timeout=5.0) for _ in sent]
        assert got == sent  # ordering and content preserved over the socket
        reply = Envelope(channel="networking", kind="heartbeat",
                         msg_id="b-m1", source="b", target="a", seq=1)
        b.send(reply, a.address)
        assert inbox_a.get(timeout=5.0) == reply
    finally:
        a.close()
        b.close()


def test_udp_beacon_unicast():
    seen: queue.Queue = queue.Queue()
    listener = UdpBeacon("host", port=0, listen=True, listen_host="127.0.0.1",
                         on_beacon=lambda payload, src: seen.put(payload))
    port = listener._sock.getsockname()[1]
    sender = UdpBeacon("dev-1", port=port)
    try:
        deadline = time.time() + 5.0
        payload = None
        while time.time() < deadline and payload is None:
            sender.announce({"protocol_version": "1"}, target="127.0.0.1")
            try:
                payload = seen.get(timeout=0.25)
            except queue.Empty:
                payload = None
        assert payload is not None
        assert payload["node_id"] == "dev-1"
        assert payload["protocol_version"] == "1"
    finally:
        sender.close()
        listener.close()
