"""Laboratory kernel: provenance-aware resource store, transactional CRUTD
engine, device message bus, orchestrator, protocol compiler, and a simulated
device fleet for end-to-end scenarios."""

__version__ = "0.1.0"
