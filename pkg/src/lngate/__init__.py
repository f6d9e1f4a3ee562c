"""IoT micro-payments over a Lightning-style channel with an untrusted gateway."""

__version__ = "0.1.0"
