# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled checksum kernel. Same contract as ``_pychecksum``."""


cdef unsigned long long _sum(const unsigned char[:] buf, unsigned long long acc) noexcept nogil:
    cdef Py_ssize_t n = buf.shape[0]
    cdef Py_ssize_t i = 0
    while i + 1 < n:
        acc += (<unsigned long long>buf[i] << 8) | buf[i + 1]
        i += 2
    if n & 1:
        acc += <unsigned long long>buf[n - 1] << 8
    while acc >> 16:
        acc = (acc & 0xFFFF) + (acc >> 16)
    return acc


def ones_sum(data, unsigned long long initial=0):
    cdef const unsigned char[:] view = data
    return int(_sum(view, initial))


def internet_checksum(data, unsigned long long initial=0):
    cdef const unsigned char[:] view = data
    return int(~_sum(view, initial) & 0xFFFF)
