"""Time-synchronous voice reenactment with explicit F0 preservation."""

__version__ = "0.1.0"
