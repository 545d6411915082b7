"""Pure-Python checksum kernel, used when the compiled extension is absent."""

from array import array
import sys

_SWAP = sys.byteorder == "little"


def ones_sum(data, initial=0):
    """Return the folded 16-bit ones'-complement sum of ``data`` plus ``initial``."""
    data = bytes(data)
    if len(data) & 1:
        data += b"\x00"
    words = array("H", data)
    if _SWAP:
        words.byteswap()
    total = sum(words) + initial
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def internet_checksum(data, initial=0):
    return ~ones_sum(data, initial) & 0xFFFF
