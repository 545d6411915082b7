"""Per-app connection RTT monitoring through a user-space TCP/UDP relay."""

__version__ = "0.1.0"
