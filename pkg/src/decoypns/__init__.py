"""Decoy-state BB84 link simulator with photon number splitting detection."""

__version__ = "0.1.0"
