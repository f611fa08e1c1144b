"""Separable bilinear / nearest resizing as explicit interpolation matrices.

Expressing the resize as y = A_h x A_w^T makes the adjoint (needed for
backpropagation through the decoder upsample) a plain transpose.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def interp_matrix(n_in, n_out):
    """Row-stochastic (n_out, n_in) bilinear interpolation matrix."""
    a = np.zeros((n_out, n_in))
    if n_in == 1:
        a[:, 0] = 1.0
        return a
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(a, (rows, lo), 1.0 - frac)
    np.add.at(a, (rows, hi), frac)
    return a


@lru_cache(maxsize=None)
def nearest_index(n_in, n_out):
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    return np.clip(np.rint(src).astype(int), 0, n_in - 1)


def bilinear_resize(x, out_h, out_w):
    """Resize (..., H, W, C) channels-last array bilinearly."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-3], x.shape[-2]
    ah = interp_matrix(h, out_h)
    aw = interp_matrix(w, out_w)
    t = np.einsum("oi,...iwc->...owc", ah, x)
    return np.einsum("pj,...ojc->...opc", aw, t)


def bilinear_adjoint(g, in_h, in_w):
    """Adjoint of bilinear_resize: scatter an (..., H_out, W_out, C) gradient back."""
    g = np.asarray(g, dtype=np.float64)
    ah = interp_matrix(in_h, g.shape[-3])
    aw = interp_matrix(in_w, g.shape[-2])
    t = np.einsum("oi,...owc->...iwc", ah, g)
    return np.einsum("pj,...ipc->...ijc", aw, t)


def nearest_resize(x, out_h, out_w):
    """Nearest-neighbor resize of an (..., H, W) label map."""
    x = np.asarray(x)
    ri = nearest_index(x.shape[-2], out_h)
    ci = nearest_index(x.shape[-1], out_w)
    return x[..., ri[:, None], ci[None, :]]
