"""Shared fixtures and oracle helpers for the test suite.

Oracles live here so every module's tests compare against independent
reimplementations (finite differences, scipy reference routines, explicit
summation loops) rather than against the code under test.
"""

from __future__ import annotations

import numpy as np
import pytest


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def finite_difference_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar f at x, elementwise."""
    x = np.array(x, dtype=np.float64, copy=True)
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + step
        fp = f(x)
        xf[i] = orig - step
        fm = f(x)
        xf[i] = orig
        flat[i] = (fp - fm) / (2.0 * step)
    return g


def relative_error(got: np.ndarray, want: np.ndarray) -> float:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = max(np.linalg.norm(want.reshape(-1)), 1e-30)
    return float(np.linalg.norm((got - want).reshape(-1)) / denom)


def conv2d_direct_sum(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Single-channel zero-padded 'same' cross-correlation by explicit loops."""
    h, w = image.shape
    k = kernel.shape[0]
    p = k // 2
    padded = np.zeros((h + 2 * p, w + 2 * p))
    padded[p : p + h, p : p + w] = image
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for u in range(k):
                for v in range(k):
                    acc += kernel[u, v] * padded[i + u, j + v]
            out[i, j] = acc
    return out


def dft2_explicit(x: np.ndarray) -> np.ndarray:
    """Unitary 2-D DFT of a complex image by explicit O(N^2) summation."""
    h, w = x.shape
    out = np.zeros((h, w), dtype=np.complex128)
    for p in range(h):
        for q in range(w):
            acc = 0.0 + 0.0j
            for m in range(h):
                for n in range(w):
                    acc += x[m, n] * np.exp(-2j * np.pi * (p * m / h + q * n / w))
            out[p, q] = acc / np.sqrt(h * w)
    return out
