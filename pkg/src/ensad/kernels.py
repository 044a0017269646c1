"""Hot numeric kernels, written once in numba-compatible numpy.

Every function here is wrapped by :func:`ensad.backend.jit`, so the same
source runs either JIT-compiled or as plain CPython/numpy depending on the
``ENSAD_NUMBA`` flag.  Keep the bodies restricted to constructs both paths
support: contiguous arrays, basic slicing, literal-axis reductions, and
``np.dot`` on contiguous operands.

Matrix layout: ensembles and intermediates are handled row-major, one row
per translation (shape ``(m, d)``), because C-contiguous rows make every
norm, broadcast and matmul contiguous.  The public adapter API transposes
at the boundary.
"""

from __future__ import annotations

import math

import numpy as np

from .backend import jit

# splitmix64 constants
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_R30 = np.uint64(30)
_R27 = np.uint64(27)
_R31 = np.uint64(31)
_R11 = np.uint64(11)
_ONE = np.uint64(1)

_TWO_PI = 6.283185307179586
_INV_2_53 = 1.0 / 9007199254740992.0  # 2**-53

# Norms below this are treated as zero: the vector passes through unscaled
# and the matching backward branch contributes a zero Jacobian.
_NORM_EPS = 1e-12


@jit
def splitmix64_fill(seed: np.uint64, position: np.uint64, n: int) -> np.ndarray:
    """Outputs ``position .. position+n-1`` of the splitmix64 stream for ``seed``.

    Counter-based: output ``i`` mixes ``seed + (i+1)*GAMMA`` (uint64 wrap),
    which equals the sequential generator that advances its state by GAMMA
    before each mix.  Pure integer arithmetic, so the stream is identical on
    both backend paths and random access is O(1).
    """
    idx = np.arange(n).astype(np.uint64)
    z = seed + (position + idx + _ONE) * _GAMMA
    z = (z ^ (z >> _R30)) * _MIX1
    z = (z ^ (z >> _R27)) * _MIX2
    z = z ^ (z >> _R31)
    return z


@jit
def gaussian_from_bits(bits: np.ndarray) -> np.ndarray:
    """Box-Muller: 2k uint64 words -> 2k standard normals.

    Word pairs map to (u1, u2] X [0, 1) via the top 53 bits; u1 is offset
    into (0, 1] so the log never sees zero.
    """
    n2 = bits.shape[0] // 2
    hi = (bits[0::2] >> _R11).astype(np.float64)
    lo = (bits[1::2] >> _R11).astype(np.float64)
    u1 = (hi + 1.0) * _INV_2_53
    u2 = lo * _INV_2_53
    r = np.sqrt(-2.0 * np.log(u1))
    t = _TWO_PI * u2
    out = np.empty(2 * n2)
    out[0::2] = r * np.cos(t)
    out[1::2] = r * np.sin(t)
    return out


@jit
def adapter_forward(
    h_rows: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    b: np.ndarray,
    wp: np.ndarray,
    bp: float,
    wo: np.ndarray,
    alpha: float,
    v_eq_k: bool,
):
    """Fuse a source embedding with its translations via additive attention.

    ``h_rows`` is ``(m+1, d)``: row 0 the source embedding, rows 1..m the
    translations.  Value rows are the unit-normalized translation offsets
    (or the translations themselves under ``v_eq_k``).  A gated residual
    mixes the attention context back into the query with weight ``alpha``
    and the result is re-normalized.

    When ``alpha == 0`` or the context vector vanishes, the query passes
    through bit-exactly.

    Returns every intermediate needed for backprop and inspection; see
    ``adapter.ForwardTrace`` for the field-by-field meaning.
    """
    d = h_rows.shape[1]
    m = h_rows.shape[0] - 1
    dh = wq.shape[0]

    q = h_rows[0].copy()
    k_rows = h_rows[1:].copy()

    if v_eq_k:
        vraw_rows = k_rows.copy()
        vraw_norms = np.sqrt(np.sum(vraw_rows * vraw_rows, axis=1))
        v_rows = k_rows.copy()
    else:
        vraw_rows = k_rows - q.reshape(1, d)
        vraw_norms = np.sqrt(np.sum(vraw_rows * vraw_rows, axis=1))
        v_rows = np.empty((m, d))
        for j in range(m):
            nrm = vraw_norms[j]
            if nrm < _NORM_EPS:
                v_rows[j] = vraw_rows[j]
            else:
                v_rows[j] = vraw_rows[j] / nrm

    wk_t = np.ascontiguousarray(wk.T)
    wv_t = np.ascontiguousarray(wv.T)
    base = np.dot(wq, q) + b
    a_rows = np.dot(k_rows, wk_t) + np.dot(v_rows, wv_t) + base.reshape(1, dh)
    t_rows = np.tanh(a_rows)
    logits = np.dot(t_rows, wp) + bp

    mx = np.max(logits)
    e = np.exp(logits - mx)
    s = e / np.sum(e)

    wo_t = np.ascontiguousarray(wo.T)
    u_rows = np.tanh(np.dot(v_rows, wo_t))
    u_norms = np.sqrt(np.sum(u_rows * u_rows, axis=1))
    uhat_rows = np.empty((m, d))
    for j in range(m):
        if u_norms[j] < _NORM_EPS:
            uhat_rows[j] = u_rows[j]
        else:
            uhat_rows[j] = u_rows[j] / u_norms[j]

    vo_rows = (1.0 - alpha) * v_rows + alpha * uhat_rows
    craw = np.dot(s, vo_rows)
    craw_norm = math.sqrt(np.sum(craw * craw))
    if craw_norm < _NORM_EPS:
        c = craw.copy()
    else:
        c = craw / craw_norm

    hraw = (1.0 - alpha) * q + alpha * c
    hraw_norm = math.sqrt(np.sum(hraw * hraw))
    if alpha == 0.0 or craw_norm < _NORM_EPS:
        h_tilde = q.copy()
    elif hraw_norm < _NORM_EPS:
        h_tilde = hraw.copy()
    else:
        h_tilde = hraw / hraw_norm

    return (
        q,
        k_rows,
        vraw_rows,
        vraw_norms,
        v_rows,
        a_rows,
        t_rows,
        logits,
        s,
        u_rows,
        u_norms,
        uhat_rows,
        vo_rows,
        craw,
        craw_norm,
        c,
        hraw,
        hraw_norm,
        h_tilde,
    )


@jit
def adapter_backward(
    g: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    wp: np.ndarray,
    wo: np.ndarray,
    alpha: float,
    v_eq_k: bool,
    q: np.ndarray,
    k_rows: np.ndarray,
    vraw_norms: np.ndarray,
    v_rows: np.ndarray,
    t_rows: np.ndarray,
    s: np.ndarray,
    u_rows: np.ndarray,
    u_norms: np.ndarray,
    uhat_rows: np.ndarray,
    vo_rows: np.ndarray,
    c: np.ndarray,
    craw_norm: float,
    h_tilde: np.ndarray,
    hraw_norm: float,
):
    """Reverse-mode gradients of the adapter forward pass.

    ``g`` is the loss gradient at the fused output.  Hand-derived chain:
    each l2 normalization contributes (I - vv^T)/|raw| on its branch (zero
    when the raw vector vanished), softmax contributes s*(g - s.g), tanh
    contributes 1-y^2, and the affine attention map scatters into the six
    weight tensors.  Returns parameter gradients in declaration order plus
    the gradient w.r.t. the input rows.
    """
    d = q.shape[0]
    m = k_rows.shape[0]
    dh = wq.shape[0]

    if hraw_norm < _NORM_EPS:
        grad_hraw = np.zeros(d)
    else:
        grad_hraw = (g - h_tilde * np.dot(h_tilde, g)) / hraw_norm
    grad_q = (1.0 - alpha) * grad_hraw
    grad_c = alpha * grad_hraw

    if craw_norm < _NORM_EPS:
        grad_craw = np.zeros(d)
    else:
        grad_craw = (grad_c - c * np.dot(c, grad_c)) / craw_norm

    grad_vo_rows = s.reshape(m, 1) * grad_craw.reshape(1, d)
    grad_s = np.dot(vo_rows, grad_craw)
    grad_v_rows = (1.0 - alpha) * grad_vo_rows
    grad_uhat_rows = alpha * grad_vo_rows

    grad_u_rows = np.empty((m, d))
    for j in range(m):
        if u_norms[j] < _NORM_EPS:
            grad_u_rows[j, :] = 0.0
        else:
            dj = np.dot(uhat_rows[j], grad_uhat_rows[j])
            grad_u_rows[j] = (grad_uhat_rows[j] - uhat_rows[j] * dj) / u_norms[j]

    grad_wov_rows = grad_u_rows * (1.0 - u_rows * u_rows)
    grad_wo = np.dot(np.ascontiguousarray(grad_wov_rows.T), v_rows)
    grad_v_rows = grad_v_rows + np.dot(grad_wov_rows, wo)

    sg = np.dot(s, grad_s)
    grad_logits = s * (grad_s - sg)
    grad_wp = np.dot(grad_logits, t_rows)
    grad_bp = np.sum(grad_logits)
    grad_t_rows = grad_logits.reshape(m, 1) * wp.reshape(1, dh)
    grad_a_rows = grad_t_rows * (1.0 - t_rows * t_rows)

    colsum = np.sum(grad_a_rows, axis=0)
    grad_wq = colsum.reshape(dh, 1) * q.reshape(1, d)
    grad_q = grad_q + np.dot(colsum, wq)
    ga_t = np.ascontiguousarray(grad_a_rows.T)
    grad_wk = np.dot(ga_t, k_rows)
    grad_wv = np.dot(ga_t, v_rows)
    grad_b = colsum
    grad_k_rows = np.dot(grad_a_rows, wk)
    grad_v_rows = grad_v_rows + np.dot(grad_a_rows, wv)

    if v_eq_k:
        grad_k_rows = grad_k_rows + grad_v_rows
    else:
        for j in range(m):
            if vraw_norms[j] < _NORM_EPS:
                continue
            dj = np.dot(v_rows[j], grad_v_rows[j])
            gr = (grad_v_rows[j] - v_rows[j] * dj) / vraw_norms[j]
            grad_k_rows[j] = grad_k_rows[j] + gr
            grad_q = grad_q - gr

    g_h_rows = np.empty((m + 1, d))
    g_h_rows[0] = grad_q
    g_h_rows[1:] = grad_k_rows
    return grad_wq, grad_wk, grad_wv, grad_b, grad_wp, grad_bp, grad_wo, g_h_rows


@jit
def jacobi_eigh(a: np.ndarray, tol: float, max_sweeps: int):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix, in place.

    Sweeps rotate every upper-triangle pair until the off-diagonal Frobenius
    norm drops below ``tol`` or ``max_sweeps`` is hit.  Returns
    ``(eigenvalues, eigenvectors, sweeps, offdiag)``; the caller checks
    ``offdiag <= tol`` for convergence.  ``a`` is destroyed.
    """
    n = a.shape[0]
    v = np.eye(n)

    off = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            off += 2.0 * a[i, j] * a[i, j]
    off = math.sqrt(off)

    sweeps = 0
    while off > tol and sweeps < max_sweeps:
        for p in range(n - 1):
            for r in range(p + 1, n):
                apr = a[p, r]
                if apr == 0.0:
                    continue
                theta = 0.5 * math.atan2(2.0 * apr, a[r, r] - a[p, p])
                cth = math.cos(theta)
                sth = math.sin(theta)
                for k in range(n):
                    akp = a[k, p]
                    akr = a[k, r]
                    a[k, p] = cth * akp - sth * akr
                    a[k, r] = sth * akp + cth * akr
                for k in range(n):
                    apk = a[p, k]
                    ark = a[r, k]
                    a[p, k] = cth * apk - sth * ark
                    a[r, k] = sth * apk + cth * ark
                for k in range(n):
                    vkp = v[k, p]
                    vkr = v[k, r]
                    v[k, p] = cth * vkp - sth * vkr
                    v[k, r] = sth * vkp + cth * vkr
        sweeps += 1
        off = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                off += 2.0 * a[i, j] * a[i, j]
        off = math.sqrt(off)

    w = np.empty(n)
    for i in range(n):
        w[i] = a[i, i]
    return w, v, sweeps, off
