"""Distributed control and readout software for superconducting-qubit instruments.

Waveforms are built from closed-form primitives and expressions, shaped by a
per-channel pipeline, and shipped to AWGs over a length-prefixed TCP protocol.
Digitizer records arrive as UDP frames, are reassembled, demodulated to IQ
points, and classified.  A Manager relays JSON-line RPC between clients and
the two servers.
"""

from .waveform import Waveform, WaveKind, generate

__version__ = "0.1.0"

__all__ = ["Waveform", "WaveKind", "generate", "__version__"]
