"""
Binary complex values, sign-bit packing and xnor-popcount kernels.

Bit convention: bit = 1 <=> value = +1, LSB-first inside 64-bit words,
row-major rows. Pad bits past the logical length are zero in canonical form,
and every kernel masks the last word so pad content never leaks into a result.
"""

import logging
from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from errors import DomainError, ShapeError, SizeError

logger = logging.getLogger(__name__)

WORD_BITS = 64

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)
_ALL_ONES = np.uint64(0xFFFFFFFFFFFFFFFF)
_S1 = np.uint64(1)
_S2 = np.uint64(2)
_S4 = np.uint64(4)
_S56 = np.uint64(56)


@dataclass(frozen=True)
class BinaryComplex:
    """One of the four values {1+i, 1-i, -1+i, -1-i}, stored as two bits"""
    re: int
    im: int

    def __post_init__(self):
        if self.re not in (1, -1) or self.im not in (1, -1):
            raise DomainError(f"binary complex parts must be +1 or -1, got ({self.re}, {self.im})")

    @classmethod
    def from_complex(cls, z):
        z = complex(z)
        return cls(1 if z.real >= 0 else -1, 1 if z.imag >= 0 else -1)

    @classmethod
    def decode(cls, code):
        if not 0 <= code <= 3:
            raise DomainError(f"binary complex code must be in [0, 3], got {code}")
        return cls(1 if code & 1 else -1, 1 if code & 2 else -1)

    def encode(self):
        return int(self.re == 1) | (int(self.im == 1) << 1)

    def __complex__(self):
        return complex(self.re, self.im)

    def __mul__(self, other):
        # product of two binary complex numbers is a Gaussian integer, not a BinaryComplex
        return complex(self) * complex(other)


def last_word_mask(length):
    """Mask selecting the valid bits of the final word"""
    rem = length % WORD_BITS
    if rem == 0:
        return _ALL_ONES
    return np.uint64((1 << rem) - 1)


def word_count(length):
    return (length + WORD_BITS - 1) // WORD_BITS


def pack_bool_rows(bits):
    """Pack a (rows, n) boolean array into (rows, words) uint64, pad bits zero"""
    bits = np.asarray(bits, dtype=bool)
    rows, n = bits.shape
    words = word_count(n)
    padded = np.zeros((rows, words * WORD_BITS), dtype=bool)
    padded[:, :n] = bits
    packed = np.packbits(padded, axis=1, bitorder='little')
    return np.ascontiguousarray(packed).view('<u8').astype(np.uint64)


def unpack_bool_rows(words, n):
    as_bytes = np.ascontiguousarray(words.astype('<u8')).view(np.uint8)
    return np.unpackbits(as_bytes, axis=1, bitorder='little')[:, :n].astype(bool)


def _check_finite(v):
    if v.size == 0:
        raise SizeError("cannot pack an empty vector")
    if not np.all(np.isfinite(v)):
        bad = int(np.argmin(np.isfinite(v).ravel()))
        raise DomainError(f"non-finite value at flat index {bad}")


@dataclass(frozen=True)
class PackedBitPlane:
    bits: np.ndarray
    length: int

    def __post_init__(self):
        if self.length <= 0:
            raise SizeError("packed plane must hold at least one element")
        if self.bits.dtype != np.uint64 or self.bits.shape != (word_count(self.length),):
            raise ShapeError(
                f"plane of length {self.length} needs {word_count(self.length)} uint64 words, "
                f"got {self.bits.dtype} {self.bits.shape}")

    @property
    def words(self):
        return self.bits.shape[0]

    def canonical(self):
        bits = self.bits.copy()
        bits[-1] &= last_word_mask(self.length)
        return PackedBitPlane(bits, self.length)

    def unpack(self):
        return np.where(unpack_bool_rows(self.bits[None, :], self.length)[0], 1, -1).astype(np.int8)


@dataclass(frozen=True)
class PackedComplexMatrix:
    """Row-major packed planes: real part rows and imaginary part rows of equal shape"""
    re_planes: np.ndarray
    im_planes: np.ndarray
    rows: int
    cols: int

    def __post_init__(self):
        expected = (self.rows, word_count(self.cols))
        for name, plane in (('re_planes', self.re_planes), ('im_planes', self.im_planes)):
            if plane.dtype != np.uint64 or plane.shape != expected:
                raise ShapeError(f"{name} must be uint64 {expected}, got {plane.dtype} {plane.shape}")

    @classmethod
    def from_dense(cls, re, im):
        """Pack the signs of two real (rows, cols) matrices"""
        re = np.asarray(re)
        im = np.asarray(im)
        if re.ndim != 2 or re.shape != im.shape:
            raise ShapeError(f"real and imaginary matrices must be equal 2-D shapes, got {re.shape} and {im.shape}")
        _check_finite(re)
        _check_finite(im)
        rows, cols = re.shape
        return cls(pack_bool_rows(re >= 0), pack_bool_rows(im >= 0), rows, cols)

    def canonical(self):
        mask = last_word_mask(self.cols)
        re = self.re_planes.copy()
        im = self.im_planes.copy()
        re[:, -1] &= mask
        im[:, -1] &= mask
        return PackedComplexMatrix(re, im, self.rows, self.cols)

    def unpack(self):
        re = np.where(unpack_bool_rows(self.re_planes, self.cols), 1, -1).astype(np.int8)
        im = np.where(unpack_bool_rows(self.im_planes, self.cols), 1, -1).astype(np.int8)
        return re, im

    def row(self, i):
        return PackedBitPlane(self.re_planes[i].copy(), self.cols), PackedBitPlane(self.im_planes[i].copy(), self.cols)


def pack_signs(v):
    """Pack sign(v) into a plane; sign(0) = +1"""
    v = np.asarray(v)
    if v.ndim != 1:
        raise ShapeError(f"pack_signs expects a vector, got shape {v.shape}")
    _check_finite(v)
    return PackedBitPlane(pack_bool_rows((v >= 0)[None, :])[0], int(v.shape[0]))


def pack_matrix(m):
    """Pack the signs of a real (rows, cols) matrix into (rows, words) uint64"""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"pack_matrix expects a 2-D array, got shape {m.shape}")
    _check_finite(m)
    return pack_bool_rows(m >= 0)


@njit(inline='always')
def _popcount64(x):
    x = x - ((x >> _S1) & _M1)
    x = (x & _M2) + ((x >> _S2) & _M2)
    x = (x + (x >> _S4)) & _M4
    return (x * _H01) >> _S56


@njit
def _xnor_popcount(a, b, mask):
    words = a.shape[0]
    total = np.uint64(0)
    for w in range(words - 1):
        total += _popcount64(~(a[w] ^ b[w]))
    total += _popcount64(~(a[words - 1] ^ b[words - 1]) & mask)
    return np.int64(total)


@njit(parallel=True)
def _gemm_kernel(x, w, mask, n, out):
    rows = x.shape[0]
    cols = w.shape[0]
    words = x.shape[1]
    for i in prange(rows):
        for j in range(cols):
            total = np.uint64(0)
            for k in range(words):
                m = _ALL_ONES if k < words - 1 else mask
                total += _popcount64(~(x[i, k] ^ w[j, k]) & m)
            out[i, j] = 2 * np.int64(total) - n


@njit(parallel=True)
def _complex_gemm_kernel(xr, xi, wr, wi, mask, n, out_c, out_d):
    rows = xr.shape[0]
    cols = wr.shape[0]
    words = xr.shape[1]
    for i in prange(rows):
        for j in range(cols):
            ax = np.uint64(0)
            by = np.uint64(0)
            bx = np.uint64(0)
            ay = np.uint64(0)
            for k in range(words):
                m = _ALL_ONES if k < words - 1 else mask
                ax += _popcount64(~(wr[j, k] ^ xr[i, k]) & m)
                by += _popcount64(~(wi[j, k] ^ xi[i, k]) & m)
                bx += _popcount64(~(wi[j, k] ^ xr[i, k]) & m)
                ay += _popcount64(~(wr[j, k] ^ xi[i, k]) & m)
            # c = A.x - B.y, d = B.x + A.y, each dot = 2*popc - n
            out_c[i, j] = 2 * (np.int64(ax) - np.int64(by))
            out_d[i, j] = 2 * (np.int64(bx) + np.int64(ay)) - 2 * n


def binary_dot(a, b):
    """Sum of a_i * b_i over ±1 values: 2 * popcount(xnor(a, b)) - n"""
    if a.length != b.length:
        raise ShapeError(f"length mismatch: {a.length} vs {b.length}")
    popc = _xnor_popcount(a.bits, b.bits, last_word_mask(a.length))
    return int(2 * popc - a.length)


def binary_complex_dot(x, y, A, B):
    """(x + iy) . (A + iB) over ±1 planes, as four binary dot products"""
    lengths = {x.length, y.length, A.length, B.length}
    if len(lengths) != 1:
        raise ShapeError(f"all four planes must share one length, got {sorted(lengths)}")
    c = binary_dot(A, x) - binary_dot(B, y)
    d = binary_dot(B, x) + binary_dot(A, y)
    return c, d


def binary_gemm(x, w, n):
    """Real single-plane GEMM: out[i, j] = dot(x row i, w row j) over n valid bits"""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or x.shape[1] != word_count(n):
        raise ShapeError(f"packed operands {x.shape} and {w.shape} do not share {word_count(n)} words")
    out = np.empty((x.shape[0], w.shape[0]), dtype=np.int64)
    _gemm_kernel(np.ascontiguousarray(x), np.ascontiguousarray(w), last_word_mask(n), np.int64(n), out)
    return out


def binary_complex_gemm(X, W):
    """
    Packed complex GEMM. W is stored transposed (one packed row per output),
    so C[i, j] + i D[i, j] is the complex dot of X row i with W row j.
    """
    if X.cols != W.cols:
        raise ShapeError(f"inner dimensions differ: {X.cols} vs {W.cols}")
    out_c = np.empty((X.rows, W.rows), dtype=np.int64)
    out_d = np.empty((X.rows, W.rows), dtype=np.int64)
    _complex_gemm_kernel(
        np.ascontiguousarray(X.re_planes), np.ascontiguousarray(X.im_planes),
        np.ascontiguousarray(W.re_planes), np.ascontiguousarray(W.im_planes),
        last_word_mask(X.cols), np.int64(X.cols), out_c, out_d)
    return out_c, out_d


def set_kernel_threads(threads):
    threads = max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(threads)
    logger.debug(f"kernel threads set to {threads}")
    return threads
