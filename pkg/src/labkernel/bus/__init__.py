"""Four-channel host-device message bus with decentralized discovery.

The wire unit is an Envelope (networking / material / action / status
channel) framed as 4-byte big-endian length plus canonical JSON. The
simulated fabric in ``network`` delivers frames deterministically on a
virtual clock with an injectable fault shim; ``node`` implements endpoint
semantics: services with exactly-once dedup, long-running actions with
feedback and cancellation, peer-to-peer topics with drop-oldest rings,
beacons, and heartbeats.
"""

from .envelope import (  # noqa: F401
    Envelope,
    FrameDecoder,
    MAX_FRAME_BYTES,
    decode_frame,
    encode_frame,
)
from .network import FaultShim, SimNetwork  # noqa: F401
from .node import (  # noqa: F401
    ActionExecution,
    BusNode,
    NodeInfo,
    PendingCall,
    Subscription,
    PROTOCOL_VERSION,
    LIVENESS_TOPIC,
    LOG_TOPIC,
)
