"""Test-only IDX encoder, kept independent of the package parser."""

import numpy as np


def encode_idx(arr: np.ndarray) -> bytes:
    """Serialize an unsigned-byte array in IDX layout (big-endian dims)."""
    arr = np.asarray(arr, dtype=np.uint8)
    header = bytes([0, 0, 0x08, arr.ndim])
    dims = b"".join(int(s).to_bytes(4, "big") for s in arr.shape)
    return header + dims + arr.tobytes()


def quantize_back(parsed: np.ndarray) -> np.ndarray:
    """Invert the parser's scaling so a parsed array re-encodes byte-exactly."""
    if parsed.ndim >= 2:
        return np.round(parsed * 255.0).astype(np.uint8)
    return parsed.astype(np.uint8)
