"""Backward feature computations.

Starting from a reconstructed output vector, features are rebuilt layer by
layer against the frozen parameters: an equality-constrained projection
when the layer loses width (keep the feature closest to the forward one
among all exact solutions), a least-squares fit when it gains width, and
exact or clamped inverses for activations and pooling.

Convolutional layers are handled per frequency.  Valid correlation turns
into a product in the Fourier domain once a boundary correction is
subtracted; the correction is frozen at the forward feature, which makes
every per-frequency system linear in the unknown spectrum.
"""

from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .embedding import embed
from .exceptions import (
    FrptError,
    NotPositiveDefinite,
    RankDeficient,
    RankDeficientFrequency,
    ReconstructionError,
    ShapeMismatch,
)
from .linalg import dft2, idft2, solve_hpd, solve_lstsq, valid_correlate

__all__ = [
    "flip_kernel",
    "boundary_term_G",
    "FourierWorkspace",
    "make_fourier_workspace",
    "reconstruct_linear",
    "reconstruct_conv",
    "reverse_activation",
    "reverse_pool",
    "ReconTrace",
    "reconstruct_chain",
    "ReconDataset",
    "save_recon_dataset",
    "load_recon_dataset",
    "RECON_MAGIC",
]

RECON_MAGIC = b"FRRC"

# Open-interval shrink for limited-range activation inverses.
ACT_EPS = 1e-6

# Tolerance for the imaginary residue left after the inverse transform.
IMAG_RTOL = 1e-6


def flip_kernel(kernels):
    """Reverse both spatial axes: out[..., s, t] = in[..., H-1-s, W-1-t]."""
    kernels = np.asarray(kernels)
    return np.ascontiguousarray(kernels[..., ::-1, ::-1])


def _pad_top_left(arr, dh, dw):
    pad = [(0, 0)] * (arr.ndim - 2) + [(dh, 0), (dw, 0)]
    return np.pad(arr, pad)


def _pad_bottom_right(arr, dh, dw):
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, dh), (0, dw)]
    return np.pad(arr, pad)


def boundary_term_G(a_channel, kernel_flipped):
    """Boundary correction for one (input-channel, kernel) pair.

    ``a_channel`` is an H x W map and ``kernel_flipped`` the spatially
    flipped kernel.  The result G satisfies, for any map a,

        dft2(a) * dft2(pad(k_flipped)) - G[a] = dft2(pad(T[a]))

    where T[a] is the valid correlation of a with the unflipped kernel,
    zero-padded on the left and top.  G collects exactly the wrap-around
    contributions that circular correlation counts and valid correlation
    does not.
    """
    a_channel = np.asarray(a_channel, dtype=np.float64)
    kernel_flipped = np.asarray(kernel_flipped, dtype=np.float64)
    if a_channel.ndim != 2 or kernel_flipped.ndim != 2:
        raise ShapeMismatch("boundary_term_G expects single 2-D maps")
    hk, wk = kernel_flipped.shape
    h, w = a_channel.shape
    if h < hk or w < wk:
        raise ShapeMismatch(f"map {a_channel.shape} smaller than kernel {kernel_flipped.shape}")
    kernel = flip_kernel(kernel_flipped)
    t = valid_correlate(a_channel[None], kernel[None, None])[0]
    spectrum = dft2(a_channel) * dft2(_pad_bottom_right(kernel_flipped, h - hk, w - wk))
    return spectrum - dft2(_pad_top_left(t, hk - 1, wk - 1))


@dataclass
class FourierWorkspace:
    """Spectra shared by every per-frequency system of one conv layer.

    ``kernel_spectrum`` transforms the flipped, zero-padded kernels,
    ``input_spectrum`` the forward feature maps, and ``boundary_sum`` is
    the boundary correction summed over input channels, frozen at the
    forward feature.
    """

    kernel_spectrum: np.ndarray  # (C_out, C_in, H, W) complex
    input_spectrum: np.ndarray   # (..., C_in, H, W) complex
    boundary_sum: np.ndarray     # (..., C_out, H, W) complex


def make_fourier_workspace(kernels, a_hat):
    """Build the spectra for reconstructing through one conv layer."""
    kernels = np.asarray(kernels, dtype=np.float64)
    a_hat = np.asarray(a_hat, dtype=np.float64)
    c_out, c_in, hk, wk = kernels.shape
    h, w = a_hat.shape[-2:]
    flipped = flip_kernel(kernels)
    kernel_spectrum = dft2(_pad_bottom_right(flipped, h - hk, w - wk))
    input_spectrum = dft2(a_hat)
    # Per-pair valid correlations, kept separate over input channels.
    windows = np.lib.stride_tricks.sliding_window_view(a_hat, (hk, wk), axis=(-2, -1))
    t_pairs = np.einsum("...mhwst,nmst->...nmhw", windows, kernels, optimize=True)
    t_spectrum = dft2(_pad_top_left(t_pairs, hk - 1, wk - 1))
    g_pairs = input_spectrum[..., None, :, :, :] * kernel_spectrum - t_spectrum
    return FourierWorkspace(
        kernel_spectrum=kernel_spectrum,
        input_spectrum=input_spectrum,
        boundary_sum=g_pairs.sum(axis=-3),
    )


def _locate_singular_frequency(matrices):
    """Find the first (u, v) whose stacked matrix fails Cholesky."""
    h, w = matrices.shape[:2]
    for u in range(h):
        for v in range(w):
            try:
                np.linalg.cholesky(matrices[u, v])
            except np.linalg.LinAlgError:
                return u, v
    return None


def _check_real(spectrum_inverse):
    imag_max = np.abs(spectrum_inverse.imag).max()
    real_max = np.abs(spectrum_inverse.real).max()
    if imag_max > IMAG_RTOL * (1.0 + real_max):
        raise FrptError(f"imaginary residue {imag_max:g} exceeds tolerance")
    return spectrum_inverse.real.copy()


def reconstruct_conv(kernels, bias, z_star, a_hat):
    """Reconstruct a conv layer's input feature from its output target.

    For each frequency independently: when the layer does not gain
    channels, project the forward spectrum onto the constraint set (the
    spectral form of the layer equation with the frozen boundary
    correction); when it gains channels, fit the constraint stack in the
    least-squares sense.  Accepts a single instance (C, H, W) or a batch
    with leading axes.

    Raises ``RankDeficientFrequency`` when some frequency's kernel matrix
    is singular beyond tolerance.
    """
    kernels = np.asarray(kernels, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    z_star = np.asarray(z_star, dtype=np.float64)
    a_hat = np.asarray(a_hat, dtype=np.float64)
    c_out, c_in, hk, wk = kernels.shape
    h, w = a_hat.shape[-2:]
    if a_hat.shape[-3] != c_in:
        raise ShapeMismatch(f"feature has {a_hat.shape[-3]} channels, kernels expect {c_in}")
    expected = (c_out, h - hk + 1, w - wk + 1)
    if z_star.shape[-3:] != expected:
        raise ShapeMismatch(f"target shape {z_star.shape[-3:]} != {expected}")

    ws = make_fourier_workspace(kernels, a_hat)
    rhs_spatial = _pad_top_left(z_star - bias[..., :, None, None], hk - 1, wk - 1)
    rhs = dft2(rhs_spatial) + ws.boundary_sum

    # Frequency-major layout: matrices (H, W, C_out, C_in), vectors (..., H, W, C).
    a_freq = np.moveaxis(ws.kernel_spectrum, (0, 1), (-2, -1))
    f_hat = np.moveaxis(ws.input_spectrum, -3, -1)
    r = np.moveaxis(rhs, -3, -1)
    try:
        if c_in >= c_out:
            a_h = np.conj(np.swapaxes(a_freq, -1, -2))
            gram = a_freq @ a_h
            defect = r - np.einsum("hwnm,...hwm->...hwn", a_freq, f_hat, optimize=True)
            gamma = solve_hpd(gram, defect)
            f_star = f_hat + np.einsum("hwmn,...hwn->...hwm", a_h, gamma, optimize=True)
        else:
            f_star = solve_lstsq(a_freq, r)
    except NotPositiveDefinite as exc:
        index = exc.index or _locate_singular_frequency(
            (a_freq @ np.conj(np.swapaxes(a_freq, -1, -2)))
        )
        raise RankDeficientFrequency(*(index or ("?", "?"))) from exc
    except RankDeficient as exc:
        index = exc.index or ("?", "?")
        raise RankDeficientFrequency(*index) from exc
    return _check_real(idft2(np.moveaxis(f_star, -1, -3)))


def reconstruct_linear(weight, bias, z_star, a_hat):
    """Reconstruct a fully connected layer's input from its output target.

    When the layer does not gain width (n_in >= n_out), returns the exact
    solution of ``weight @ a + bias = z_star`` nearest to ``a_hat``;
    otherwise the least-squares fit of the same equation.  Accepts single
    vectors or stacks with leading axes.
    """
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    z_star = np.asarray(z_star, dtype=np.float64)
    a_hat = np.asarray(a_hat, dtype=np.float64)
    n_out, n_in = weight.shape
    if z_star.shape[-1] != n_out or a_hat.shape[-1] != n_in:
        raise ShapeMismatch(
            f"weight {weight.shape} incompatible with target {z_star.shape} "
            f"and feature {a_hat.shape}"
        )
    residual = z_star - bias - a_hat @ weight.T
    if n_in >= n_out:
        half_multiplier = solve_hpd(weight @ weight.T, residual)
        return a_hat + half_multiplier @ weight
    return solve_lstsq(weight, z_star - bias)


def reverse_activation(values, activation):
    """Map an activation-level target back to pre-activation values.

    Unbounded bijections invert exactly.  Bounded bijections clamp into
    the open range first (shrunk by 1e-6).  The relu reverse is the
    identity; sin targets are rescaled by their largest magnitude when it
    exceeds one, then arcsin applies.
    """
    values = np.asarray(values, dtype=np.float64)
    kind = activation.kind
    if kind == "identity" or kind == "relu":
        return values.copy()
    if kind == "leaky_relu":
        return np.where(values > 0, values, values / activation.slope)
    if kind == "tanh":
        return np.arctanh(np.clip(values, -1.0 + ACT_EPS, 1.0 - ACT_EPS))
    if kind == "sigmoid":
        clipped = np.clip(values, ACT_EPS, 1.0 - ACT_EPS)
        return np.log(clipped / (1.0 - clipped))
    if kind == "sin":
        peak = np.abs(values).max()
        if peak > 1.0:
            values = values / peak
        return np.arcsin(values)
    raise ValueError(f"unknown activation {kind!r}")


def reverse_pool(values, window):
    """Undo max pooling by replicating each value over its source window."""
    values = np.asarray(values, dtype=np.float64)
    if window == 1:
        return values.copy()
    return np.repeat(np.repeat(values, window, axis=-2), window, axis=-1)


@dataclass
class ReconTrace:
    """Reconstructed features from the output back to unit ``l_r``.

    ``a_star[l]`` is the reconstructed output of unit ``l`` and
    ``z_star[l]`` its pre-activation target; ``branches[l]`` records which
    solver route produced ``a_star[l-1]`` ("projection" or "lstsq").
    ``consistency[l]`` is the largest absolute violation of unit ``l``'s
    affine equation by the reconstructed pair, a direct readout of the
    modeling error introduced by freezing the boundary correction.
    """

    l_r: int
    a_star: dict = field(default_factory=dict)
    z_star: dict = field(default_factory=dict)
    branches: dict = field(default_factory=dict)
    consistency: dict = field(default_factory=dict)

    @property
    def target(self):
        return self.a_star[self.l_r]


def reconstruct_chain(net, trace, labels, l_r, method="ne"):
    """Greedy layer-by-layer reconstruction from labels down to unit ``l_r``.

    The output vector comes from the label embedding; each earlier unit
    then undoes pooling and activation and solves through the affine map,
    using the forward trace as the anchor feature.  Works on a batched
    trace with ``labels`` of shape (N,).
    """
    depth = net.depth
    if not 1 <= l_r <= depth:
        raise ValueError(f"l_r must lie in [1, {depth}], got {l_r}")
    logits = trace.logits
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape[0] != logits.shape[0]:
        raise ShapeMismatch("labels and trace batch sizes differ")
    a_star_l = np.stack([embed(logits[i], labels[i], method).a_star
                         for i in range(labels.shape[0])])
    recon = ReconTrace(l_r=l_r)
    recon.a_star[depth] = a_star_l
    recon.branches[depth] = method
    for l in range(depth, l_r, -1):
        unit = net.units[l - 1]
        level = reverse_pool(a_star_l, unit.pool) if unit.pool else a_star_l
        z_star = reverse_activation(level, unit.activation)
        recon.z_star[l] = z_star
        a_prev_hat = trace.a_of(l - 1)
        try:
            if unit.kind == "fc":
                flat_hat = a_prev_hat.reshape(a_prev_hat.shape[0], -1)
                flat_star = reconstruct_linear(unit.weight, unit.bias, z_star, flat_hat)
                a_star_l = flat_star.reshape(a_prev_hat.shape)
                branch = "projection" if flat_hat.shape[-1] >= z_star.shape[-1] else "lstsq"
                achieved = flat_star @ unit.weight.T + unit.bias
            else:
                a_star_l = reconstruct_conv(unit.weight, unit.bias, z_star, a_prev_hat)
                branch = "projection" if unit.weight.shape[1] >= unit.weight.shape[0] else "lstsq"
                achieved = valid_correlate(a_star_l, unit.weight, unit.bias)
        except (NotPositiveDefinite, RankDeficient, RankDeficientFrequency) as exc:
            raise ReconstructionError(unit=l, cause=exc) from exc
        recon.a_star[l - 1] = a_star_l
        recon.branches[l] = branch
        recon.consistency[l] = float(np.abs(achieved - z_star).max())
    return recon


@dataclass
class ReconDataset:
    """Per-instance reconstruction targets precomputed from frozen layers."""

    targets: np.ndarray
    l_r: int
    method: str
    source_digest: str = ""

    def __len__(self):
        return self.targets.shape[0]


def save_recon_dataset(dataset, path):
    header = {
        "l_r": dataset.l_r,
        "method": dataset.method,
        "source_digest": dataset.source_digest,
        "count": int(dataset.targets.shape[0]),
        "target_shape": list(dataset.targets.shape[1:]),
    }
    write_container(path, RECON_MAGIC, header, {"targets": dataset.targets})


def load_recon_dataset(path):
    header, blocks = read_container(path, RECON_MAGIC)
    return ReconDataset(
        targets=blocks["targets"],
        l_r=int(header["l_r"]),
        method=header["method"],
        source_digest=header["source_digest"],
    )
