"""Internet checksum (RFC 1071) with a compiled kernel and a pure-Python fallback.

The compiled ``_speedups`` extension is preferred. Setting the environment
variable ``SPLICEMON_PURE_PYTHON=1`` forces the fallback, which is also used
automatically when the extension was not built.
"""

import os

from . import _pychecksum

BACKEND = "python"
_impl = _pychecksum

if os.environ.get("SPLICEMON_PURE_PYTHON", "") in ("", "0"):
    try:
        from . import _speedups as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass

ones_sum = _impl.ones_sum


def internet_checksum(data: bytes, initial: int = 0) -> int:
    """Ones'-complement of the ones'-complement 16-bit sum of ``data``.

    Odd-length input is padded with one zero byte. ``initial`` is a partial
    ones'-complement sum folded in first (used for pseudo-headers).
    """
    return _impl.internet_checksum(data, initial)


def pseudo_header_sum(src: int, dst: int, protocol: int, length: int) -> int:
    """Folded sum of the IPv4 pseudo-header for TCP/UDP checksums."""
    total = (src >> 16) + (src & 0xFFFF) + (dst >> 16) + (dst & 0xFFFF) + protocol + length
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def backends():
    """Map of available backend name to module, for tests and benchmarks."""
    found = {"python": _pychecksum}
    try:
        from . import _speedups

        found["cython"] = _speedups
    except ImportError:
        pass
    return found
