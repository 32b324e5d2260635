"""
Timing of the packed binary complex GEMM against a naive float-complex GEMM.
Each size is checked for exact agreement before it is timed.
"""

import logging
import time

import numpy as np
import pandas as pd

from bitpack import PackedComplexMatrix, binary_complex_gemm
from config import BENCH_CONFIG
from errors import KernelMismatchError, SizeError

logger = logging.getLogger(__name__)

# complex64 (two float32 components) vs two bits per binary complex value
STORAGE_RATIO = 64 // 2


def random_signs(shape, rng):
    return np.where(rng.random(shape) < 0.5, -1, 1).astype(np.int8)


def float_complex_gemm(x, w):
    """out[i, j] = sum_k x[i, k] * w[j, k], unoptimized einsum over complex128"""
    return np.einsum('ik,jk->ij', x, w, optimize=False)


def time_call(fn, repeats):
    fn()  # warmup, includes JIT compilation
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def check_agreement(xr, xi, wr, wi):
    """Packed kernel result equals the float oracle exactly, else KernelMismatchError"""
    X = PackedComplexMatrix.from_dense(xr, xi)
    W = PackedComplexMatrix.from_dense(wr, wi)
    c, d = binary_complex_gemm(X, W)
    oracle = float_complex_gemm(xr + 1j * xi.astype(np.float64), wr + 1j * wi.astype(np.float64))
    if not (np.array_equal(c, oracle.real.astype(np.int64)) and np.array_equal(d, oracle.imag.astype(np.int64))):
        bad = np.argwhere((c != oracle.real) | (d != oracle.imag))[0]
        raise KernelMismatchError(f"packed GEMM differs from the float oracle at {tuple(bad)}")
    return X, W


def bench_size(inner, rows, cols, repeats, rng):
    xr, xi = random_signs((rows, inner), rng), random_signs((rows, inner), rng)
    wr, wi = random_signs((cols, inner), rng), random_signs((cols, inner), rng)
    X, W = check_agreement(xr, xi, wr, wi)
    xc = xr + 1j * xi.astype(np.float64)
    wc = wr + 1j * wi.astype(np.float64)
    t_packed = time_call(lambda: binary_complex_gemm(X, W), repeats)
    t_float = time_call(lambda: float_complex_gemm(xc, wc), repeats)
    macs = rows * cols * inner
    return {
        'rows': rows,
        'cols': cols,
        'inner': inner,
        'packed_s': t_packed,
        'float_s': t_float,
        'packed_macs_per_s': macs / t_packed,
        'float_macs_per_s': macs / t_float,
        'speedup': t_float / t_packed,
        'storage_ratio': STORAGE_RATIO,
    }


def run_bench(sizes=None, rows=None, cols=None, repeats=None, seed=None):
    """One row per inner dimension: seconds, complex MACs per second, speedup and the 32x storage ratio"""
    sizes = sizes or BENCH_CONFIG['sizes']
    rows = rows or BENCH_CONFIG['rows']
    cols = cols or BENCH_CONFIG['cols']
    repeats = repeats or BENCH_CONFIG['repeats']
    seed = BENCH_CONFIG['seed'] if seed is None else seed
    if not sizes or min(sizes) < 1:
        raise SizeError(f"bench sizes must be positive, got {sizes}")
    rng = np.random.default_rng(seed)
    results = []
    for inner in sizes:
        row = bench_size(inner, rows, cols, repeats, rng)
        logger.info(f"⏱️ inner {inner}: packed {row['packed_s'] * 1e3:.2f} ms, "
                    f"float {row['float_s'] * 1e3:.2f} ms, speedup x{row['speedup']:.1f}")
        results.append(row)
    return pd.DataFrame(results)
