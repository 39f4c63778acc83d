# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled lane of the hashed embedding kernel.

Semantics match prismdb.kernels._hashed_py exactly: same tokenizer, same
FNV-1a hash, same signed bucket accumulation, same normalization order.
Accumulated bucket counts are small integers, so float64 results are
bit-identical across lanes.
"""

from libc.math cimport sqrt

cdef unsigned long long FNV_OFFSET = 0xCBF29CE484222325ULL
cdef unsigned long long FNV_PRIME = 0x100000001B3ULL


cdef unsigned long long _fnv1a64(const unsigned char[:] data) nogil:
    cdef unsigned long long h = FNV_OFFSET
    cdef Py_ssize_t i
    for i in range(data.shape[0]):
        h ^= <unsigned long long> data[i]
        h *= FNV_PRIME
    return h


def embed_into(list texts, double[:, ::1] out):
    """Fill ``out`` (zeroed (len(texts), dim) float64 array) with unit vectors."""
    cdef Py_ssize_t dim = out.shape[1]
    cdef Py_ssize_t i, j, start, pos, n
    cdef unsigned long long h
    cdef double total, norm
    cdef str text, lowered
    cdef bytes token_bytes
    cdef Py_UCS4 ch

    for i in range(len(texts)):
        text = texts[i]
        lowered = text.lower()
        n = len(lowered)
        pos = 0
        while pos < n:
            ch = lowered[pos]
            if (u'a' <= ch <= u'z') or (u'0' <= ch <= u'9'):
                start = pos
                while pos < n:
                    ch = lowered[pos]
                    if (u'a' <= ch <= u'z') or (u'0' <= ch <= u'9'):
                        pos += 1
                    else:
                        break
                token_bytes = lowered[start:pos].encode("utf-8")
                h = _fnv1a64(token_bytes)
                if h >> 63:
                    out[i, <Py_ssize_t> (h % <unsigned long long> dim)] -= 1.0
                else:
                    out[i, <Py_ssize_t> (h % <unsigned long long> dim)] += 1.0
            else:
                pos += 1
        total = 0.0
        for j in range(dim):
            total += out[i, j] * out[i, j]
        norm = sqrt(total)
        if norm > 0.0:
            for j in range(dim):
                out[i, j] = out[i, j] / norm
