"""Dense 2-D DFT, structured linear solvers, and network-style correlation.

All routines operate on 64-bit real or complex arrays and accept stacked
inputs (leading batch axes) wherever that is cheap to support.

The forward DFT here is unnormalized; the inverse carries the 1/(H*W)
factor.  Distances therefore satisfy the scaled Parseval identity
``norm(dft2(x) - dft2(y))**2 == H*W * norm(x - y)**2``, and the constant
cancels inside every least-squares or projection objective built on top.
"""

import numpy as np

from .exceptions import NotPositiveDefinite, RankDeficient, ShapeMismatch

__all__ = [
    "dft2",
    "idft2",
    "solve_hpd",
    "solve_lstsq",
    "valid_correlate",
    "circular_correlate",
]

# Relative pivot threshold below which a factorization is treated as singular.
PIVOT_RTOL = 1e-12


def dft2(x):
    """Unnormalized 2-D DFT over the last two axes."""
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-2] < 1 or x.shape[-1] < 1:
        raise ShapeMismatch(f"dft2 needs at least a 1x1 matrix, got shape {x.shape}")
    return np.fft.fft2(x)


def idft2(x):
    """Inverse of :func:`dft2`; carries the 1/(H*W) normalization."""
    x = np.asarray(x)
    if x.ndim < 2:
        raise ShapeMismatch(f"idft2 needs at least a 1x1 matrix, got shape {x.shape}")
    return np.fft.ifft2(x)


def _as_columns(rhs, n):
    """View ``rhs`` as (..., n, k), remembering whether it was a bare vector."""
    rhs = np.asarray(rhs)
    if rhs.ndim >= 1 and rhs.shape[-1] == n:
        return rhs[..., None], True
    if rhs.ndim >= 2 and rhs.shape[-2] == n:
        return rhs, False
    raise ShapeMismatch(f"rhs shape {rhs.shape} incompatible with system size {n}")


def solve_hpd(a, rhs):
    """Solve ``a @ x = rhs`` for Hermitian positive-definite ``a``.

    Parameters
    ----------
    a : (..., n, n) array
        Hermitian positive-definite matrix or stack of them.  Real
        symmetric positive-definite input is the real specialization.
    rhs : (..., n) or (..., n, k) array
        Right-hand side(s), broadcast against the stack shape of ``a``.

    Returns
    -------
    x : array shaped like ``rhs``

    Raises
    ------
    NotPositiveDefinite
        If the Cholesky factorization fails, or a pivot falls at or below
        ``1e-12 * max(diag(a))``.  For stacked input the exception's
        ``index`` attribute locates the first offending matrix.
    """
    a = np.asarray(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeMismatch(f"expected square matrix, got shape {a.shape}")
    n = a.shape[-1]
    diag = np.abs(np.diagonal(a, axis1=-2, axis2=-1).real)
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    pivots = np.diagonal(chol, axis1=-2, axis2=-1).real ** 2
    bad = pivots <= PIVOT_RTOL * diag.max(axis=-1, keepdims=True)
    if bad.any():
        index = tuple(np.argwhere(bad)[0][:-1]) or None
        raise NotPositiveDefinite(
            f"pivot at or below {PIVOT_RTOL:g} * max diagonal", index=index
        )
    cols, squeeze = _as_columns(rhs, n)
    y = np.linalg.solve(chol, cols)
    x = np.linalg.solve(np.conj(np.swapaxes(chol, -1, -2)), y)
    return x[..., 0] if squeeze else x


def solve_lstsq(a, rhs):
    """Least-squares solution of ``a @ x ~ rhs`` with ``m >= n``, via QR.

    Parameters
    ----------
    a : (..., m, n) array, m >= n
        Full-column-rank matrix or stack of them; real or complex.
    rhs : (..., m) or (..., m, k) array

    Returns
    -------
    x : (..., n) or (..., n, k) array
        Minimizer of ``norm(a @ x - rhs)**2``.

    Raises
    ------
    RankDeficient
        If any diagonal entry of R falls below ``1e-12 * norm(a)``.
    """
    a = np.asarray(a)
    if a.ndim < 2 or a.shape[-2] < a.shape[-1]:
        raise ShapeMismatch(f"expected m >= n matrix, got shape {a.shape}")
    m, n = a.shape[-2:]
    q, r = np.linalg.qr(a)
    rdiag = np.abs(np.diagonal(r, axis1=-2, axis2=-1))
    scale = np.linalg.norm(a, axis=(-2, -1), keepdims=False)
    bad = rdiag <= PIVOT_RTOL * scale[..., None]
    if bad.any():
        index = tuple(np.argwhere(bad)[0][:-1]) or None
        raise RankDeficient("R diagonal at or below 1e-12 * norm(a)", index=index)
    cols, squeeze = _as_columns(rhs, m)
    proj = np.conj(np.swapaxes(q, -1, -2)) @ cols
    try:
        x = np.linalg.solve(r, proj)
    except np.linalg.LinAlgError as exc:
        raise RankDeficient(str(exc)) from exc
    return x[..., 0] if squeeze else x


def valid_correlate(a, kernels, bias=None):
    """Network-style cross-correlation, stride 1, no padding.

    Parameters
    ----------
    a : (..., C, H, W) array
    kernels : (C_out, C, H_K, W_K) array
    bias : (C_out,) array, optional

    Returns
    -------
    (..., C_out, H - H_K + 1, W - W_K + 1) array
        Correlation summed over input channels, plus bias.
    """
    a = np.asarray(a, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    if a.ndim < 3 or kernels.ndim != 4:
        raise ShapeMismatch(
            f"need (..., C, H, W) input and 4-D kernels, got {a.shape} and {kernels.shape}"
        )
    c_out, c_in, hk, wk = kernels.shape
    if a.shape[-3] != c_in:
        raise ShapeMismatch(f"input has {a.shape[-3]} channels, kernels expect {c_in}")
    if a.shape[-2] < hk or a.shape[-1] < wk:
        raise ShapeMismatch(f"spatial extent {a.shape[-2:]} smaller than kernel {(hk, wk)}")
    windows = np.lib.stride_tricks.sliding_window_view(a, (hk, wk), axis=(-2, -1))
    # windows: (..., C, H', W', hk, wk)
    out = np.einsum("...chwst,ocst->...ohw", windows, kernels, optimize=True)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (c_out,):
            raise ShapeMismatch(f"bias shape {bias.shape} != ({c_out},)")
        out = out + bias[..., :, None, None]
    return out


def circular_correlate(a, kernel):
    """Cross-correlation of one H x W map with circular (wrap-around) extension."""
    a = np.asarray(a, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if a.ndim != 2 or kernel.ndim != 2:
        raise ShapeMismatch("circular_correlate expects single 2-D maps")
    hk, wk = kernel.shape
    wrapped = np.pad(a, ((0, hk - 1), (0, wk - 1)), mode="wrap")
    return valid_correlate(wrapped[None], kernel[None, None])[0]
