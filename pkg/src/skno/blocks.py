"""Forward/adjoint pairs for every block of the operator.

Each ``*_forward`` returns ``(output, cache)`` and the matching ``*_backward``
takes ``(cache, grad_output)`` and returns ``(grad_input, param_grads)``.
Arrays carry the layout ``(batch, *spatial, channels)``; the channel axis is
the auxiliary ``p`` axis inside the operator.

Complex gradients follow ``g = dL/dRe + 1j * dL/dIm``, so for ``y = A * x`` the
adjoint is ``g_x = conj(A) * g_y`` and ``g_A = conj(x) * g_y``.
"""
from __future__ import annotations

import numpy as np
from scipy.special import ndtr

INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


# --- activations -----------------------------------------------------------
# Each activation is a pair (forward, derivative); forward returns the value and
# an auxiliary array the derivative can reuse.

def gelu(x):
    return x * ndtr(x)


def _gelu_fwd(x):
    cdf = ndtr(x)
    return x * cdf, cdf


def _gelu_grad(x, cdf):
    return cdf + x * INV_SQRT2PI * np.exp(-0.5 * x * x)


def gelu_grad(x):
    return _gelu_grad(x, ndtr(x))


GELU_C = np.sqrt(2.0 / np.pi)


def _gelu_tanh_fwd(x):
    t = x * x
    t *= 0.044715
    t += 1.0
    t *= x
    t *= GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5
    return y, t


def _gelu_tanh_grad(x, t):
    # 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 a x^2)
    s = x * x
    s *= 3 * 0.044715
    s += 1.0
    s *= x
    s *= 0.5 * GELU_C
    u = t * t
    np.subtract(1.0, u, out=u)
    s *= u
    s += 0.5
    u = 0.5 * t
    s += u
    return s


ACTIVATIONS = {
    "gelu": (_gelu_fwd, _gelu_grad),
    "gelu_tanh": (_gelu_tanh_fwd, _gelu_tanh_grad),
    "identity": (lambda x: (x, None), lambda x, aux: np.ones_like(x)),
}


# --- dense layers over the trailing axis -----------------------------------

def _sum_outer(x, g):
    """``sum over leading axes of x[..., i] * g[..., j]``."""
    return x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])


def dense_forward(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return y, x


def dense_backward(x, g, w, with_bias=True):
    gw = _sum_outer(x, g)
    gb = g.reshape(-1, g.shape[-1]).sum(0) if with_bias else None
    return g @ w.T, gw, gb


def mlp_forward(x, p, prefix, act="gelu", dropout_mask=None):
    """``act(x W1 + b1) [* mask] W2 + b2``."""
    f, _ = ACTIVATIONS[act]
    h = x @ p[prefix + "w1"] + p[prefix + "b1"]
    z, aux = f(h)
    if dropout_mask is not None:
        z = z * dropout_mask
    y = z @ p[prefix + "w2"] + p[prefix + "b2"]
    return y, (x, h, aux, z, dropout_mask, act)


def mlp_backward(cache, g, p, prefix):
    x, h, aux, z, mask, act = cache
    _, df = ACTIVATIONS[act]
    grads = {prefix + "w2": _sum_outer(z, g), prefix + "b2": g.reshape(-1, g.shape[-1]).sum(0)}
    gz = g @ p[prefix + "w2"].T
    if mask is not None:
        gz = gz * mask
    gh = gz * df(h, aux)
    grads[prefix + "w1"] = _sum_outer(x, gh)
    grads[prefix + "b1"] = gh.reshape(-1, gh.shape[-1]).sum(0)
    return gh @ p[prefix + "w1"].T, grads


# --- spectral convolution over x with p-evolution --------------------------

def mode_index(spatial_shape, k):
    """Index arrays selecting the retained half-spectrum block.

    The last spatial axis uses the real-FFT half ``0..k-1``; any other axis
    keeps ``0..k-1`` and ``-(k-1)..-1``.
    """
    idx = []
    for ax, n in enumerate(spatial_shape):
        if ax == len(spatial_shape) - 1:
            idx.append(np.arange(k))
        else:
            idx.append(np.concatenate([np.arange(k), np.arange(n - k + 1, n)]))
    return idx


def mode_block_shape(dims, k):
    return tuple([2 * k - 1] * (dims - 1) + [k])


def _gather(spec, idx):
    """``spec[:, idx0, idx1, ..., :]`` as an outer-product selection."""
    sl = np.ix_(*idx)
    return spec[(slice(None),) + sl + (slice(None),)]


def _scatter(block, idx, full_shape):
    out = np.zeros(full_shape, dtype=np.complex128)
    out[(slice(None),) + np.ix_(*idx) + (slice(None),)] = block
    return out


def spectral_forward(v, a_re, a_im, k, full):
    """``F_x^-1 trunc( F_p^-1 A F_p ( F_x v ) )`` with per-mode weights ``A``."""
    spatial = v.shape[1:-1]
    axes = tuple(range(1, 1 + len(spatial)))
    idx = mode_index(spatial, k)
    vh = _gather(np.fft.rfftn(v, axes=axes), idx)
    ph = np.fft.fft(vh, axis=-1)
    a = a_re + 1j * a_im
    if full:
        qh = np.einsum("...jk,b...k->b...j", a, ph)
    else:
        qh = a * ph
    z = np.fft.ifft(qh, axis=-1)
    half = spatial[:-1] + (spatial[-1] // 2 + 1,)
    y = np.fft.irfftn(_scatter(z, idx, (v.shape[0],) + half + (v.shape[-1],)),
                      s=spatial, axes=axes)
    return y, (ph, idx, spatial, full, a)


def spectral_backward(cache, g):
    ph, idx, spatial, full, a = cache
    axes = tuple(range(1, 1 + len(spatial)))
    n_tot = int(np.prod(spatial))
    n_p = g.shape[-1]
    # adjoint of irfftn restricted to the retained block
    gz = _gather(np.fft.rfftn(g, axes=axes), idx) / n_tot
    gz[..., 1:, :] *= 2.0
    # adjoint of ifft along p is fft / n_p
    gq = np.fft.fft(gz, axis=-1) / n_p
    if full:
        ga = np.einsum("b...j,b...k->...jk", gq, np.conj(ph))
        gph = np.einsum("...jk,b...j->b...k", np.conj(a), gq)
    else:
        ga = np.sum(np.conj(ph) * gq, axis=0)
        gph = np.conj(a) * gq
    # adjoint of fft along p is n_p * ifft
    gvh = np.fft.ifft(gph, axis=-1) * n_p
    full_shape = (g.shape[0],) + tuple(spatial) + (n_p,)
    gv = np.fft.ifftn(_scatter(gvh, idx, full_shape), axes=axes).real * n_tot
    return gv, ga.real.copy(), ga.imag.copy()


# --- local finite-difference propagator ------------------------------------

def centered_stencil(s):
    return s - s.mean(axis=-1, keepdims=True)


def local_forward(v, stencil, mix):
    """Zero-sum 3-point stencil per axis and per ``p`` (scaled by ``1/dx``), mixed over ``p``."""
    sbar = centered_stencil(stencil)
    spatial = v.shape[1:-1]
    d = np.zeros_like(v)
    shifted = []
    for ax, n in enumerate(spatial):
        inv_dx = float(n)
        row = []
        for j, off in enumerate((-1, 0, 1)):
            vs = np.roll(v, -off, axis=1 + ax)
            row.append(vs)
            d += vs * (sbar[ax, :, j] * inv_dx)
        shifted.append(row)
    y = d @ mix
    return y, (d, shifted, sbar, spatial)


def local_backward(cache, g, mix):
    d, shifted, sbar, spatial = cache
    gmix = _sum_outer(d, g)
    gd = g @ mix.T
    gs = np.zeros_like(sbar)
    gv = np.zeros_like(gd)
    flat = lambda x: x.reshape(-1, x.shape[-1])
    for ax, n in enumerate(spatial):
        inv_dx = float(n)
        for j, off in enumerate((-1, 0, 1)):
            gs[ax, :, j] = (flat(gd) * flat(shifted[ax][j])).sum(0) * inv_dx
            gv += np.roll(gd * (sbar[ax, :, j] * inv_dx), off, axis=1 + ax)
    gs = centered_stencil(gs)
    return gv, gs, gmix
