"""Cooperative multi-agent exploration of voxel maps: region graphs, task units,
contiguity-aware allocation, a versioned commit handshake and a tick simulator."""

__version__ = "0.1.0"
