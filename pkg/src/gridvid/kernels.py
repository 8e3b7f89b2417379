"""Fused numba kernels for the training/decoding hot path.

Single-core sandbox: multi-pass numpy elementwise roughly doubles step time, so
softmax/layernorm/gelu/cross-entropy forward+backward are fused single-writer
kernels. Row reductions accumulate in float64. Each forward kernel returns a
nonzero flag if it saw a non-finite input, which the tensor layer turns into an
error; this makes the finiteness guard free for kernel-backed ops.

fastmath is restricted to flags that keep NaN/Inf semantics intact (nnan/ninf
would let LLVM delete the isfinite guards).

float32 kernels compute exp(x) for x <= 0 via exp2: t = x*log2(e) splits into
integer n (truncation-based round, valid for nonpositive t) and fraction f in
[-0.5, 0.5]; 2^n is assembled by writing the IEEE exponent field into an int32
scratch row viewed as float32, and 2^f uses a degree-5 polynomial (max rel err
~4e-6, below float32 softmax noise). Branch-free and auto-vectorizable. float64
variants use plain math.exp: the double path only runs in small gradcheck
configs where exactness of the finite-difference comparison matters, not speed.
"""

import math

import numpy as np
from numba import njit

_FM = {"contract", "reassoc", "arcp"}

_LOG2E = 1.4426950408889634
# Taylor coefficients for 2^f on f in [-0.5, 0.5]
_C1 = 0.6931471805599453
_C2 = 0.2402265069591007
_C3 = 0.05550410866482158
_C4 = 0.009618129107628477
_C5 = 0.0013333558146428443


@njit(cache=True, fastmath=_FM)
def softmax_fwd_f32(x, out):
    """Row softmax over the last axis of a 2D array. Returns 1 on non-finite input."""
    rows, cols = x.shape
    bits = np.empty(cols, dtype=np.int32)
    pow2n = bits.view(np.float32)
    bad = 0
    for i in range(rows):
        m = np.float32(-np.inf)
        for j in range(cols):
            v = x[i, j]
            if v > m:
                m = v
        if not np.isfinite(m):
            bad = 1
            m = np.float32(0.0)
        r = out[i]
        for j in range(cols):
            t = (x[i, j] - m) * np.float32(_LOG2E)
            if t < np.float32(-126.0):
                t = np.float32(-126.0)
            # round-to-nearest via truncation, valid because t <= 0
            n = np.int32(t - np.float32(0.5))
            f = t - np.float32(n)
            p = np.float32(1.0) + f * (np.float32(_C1) + f * (np.float32(_C2) + f * (
                np.float32(_C3) + f * (np.float32(_C4) + f * np.float32(_C5)))))
            bits[j] = (n + np.int32(127)) << np.int32(23)
            r[j] = p
        s = 0.0
        for j in range(cols):
            e = r[j] * pow2n[j]
            r[j] = e
            s += e
        # NaN inputs never win the max loop, but they propagate into s
        if not np.isfinite(s):
            bad = 1
            s = 1.0
        inv = np.float32(1.0 / s)
        for j in range(cols):
            r[j] *= inv
    return bad


@njit(cache=True, fastmath=_FM)
def softmax_fwd_f64(x, out):
    rows, cols = x.shape
    bad = 0
    for i in range(rows):
        m = -np.inf
        for j in range(cols):
            v = x[i, j]
            if v > m:
                m = v
        if not np.isfinite(m):
            bad = 1
            m = 0.0
        s = 0.0
        for j in range(cols):
            e = math.exp(x[i, j] - m)
            out[i, j] = e
            s += e
        if not np.isfinite(s):
            bad = 1
            s = 1.0
        inv = 1.0 / s
        for j in range(cols):
            out[i, j] *= inv
    return bad


@njit(cache=True, fastmath=_FM)
def softmax_bwd(p, dp, dx):
    """dx = p * (dp - sum_j p_j dp_j) rowwise. Works for f32 and f64."""
    rows, cols = p.shape
    bad = 0
    for i in range(rows):
        acc = 0.0
        for j in range(cols):
            acc += np.float64(p[i, j]) * np.float64(dp[i, j])
        if not np.isfinite(acc):
            bad = 1
        r = p.dtype.type(acc)
        for j in range(cols):
            dx[i, j] = p[i, j] * (dp[i, j] - r)
    return bad


@njit(cache=True, fastmath=_FM)
def layernorm_fwd(x, gain, bias, eps, out, xhat, inv_std):
    """Rowwise layernorm saving normalized rows and 1/std for backward."""
    rows, cols = x.shape
    bad = 0
    for i in range(rows):
        mu = 0.0
        for j in range(cols):
            mu += np.float64(x[i, j])
        mu /= cols
        var = 0.0
        for j in range(cols):
            d = np.float64(x[i, j]) - mu
            var += d * d
        var /= cols
        iv = 1.0 / math.sqrt(var + eps)
        if not np.isfinite(iv * mu):
            bad = 1
        inv_std[i] = iv
        mu_t = x.dtype.type(mu)
        iv_t = x.dtype.type(iv)
        for j in range(cols):
            h = (x[i, j] - mu_t) * iv_t
            xhat[i, j] = h
            out[i, j] = h * gain[j] + bias[j]
    return bad


@njit(cache=True, fastmath=_FM)
def layernorm_bwd(dy, xhat, inv_std, gain, dx, dgain, dbias):
    """dx plus accumulated (+=) dgain/dbias. Column sums accumulate in f64."""
    rows, cols = dy.shape
    ga = np.zeros(cols, dtype=np.float64)
    ba = np.zeros(cols, dtype=np.float64)
    for i in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(cols):
            g = np.float64(dy[i, j]) * np.float64(gain[j])
            m1 += g
            m2 += g * np.float64(xhat[i, j])
            ga[j] += np.float64(dy[i, j]) * np.float64(xhat[i, j])
            ba[j] += np.float64(dy[i, j])
        m1 /= cols
        m2 /= cols
        iv = dy.dtype.type(inv_std[i])
        m1t = dy.dtype.type(m1)
        m2t = dy.dtype.type(m2)
        for j in range(cols):
            g = dy[i, j] * gain[j]
            dx[i, j] = iv * (g - m1t - xhat[i, j] * m2t)
    for j in range(cols):
        dgain[j] += dgain.dtype.type(ga[j])
        dbias[j] += dbias.dtype.type(ba[j])


_GC0 = 0.7978845608028654  # sqrt(2/pi)
_GC1 = 0.044715


@njit(cache=True, fastmath=_FM)
def gelu_fwd_f32(x, out, tanh_sav):
    """tanh-form gelu on a flat array; saves tanh(u) for backward."""
    n = x.shape[0]
    block = 2048
    bits = np.empty(block, dtype=np.int32)
    pow2n = bits.view(np.float32)
    bad = 0
    i = 0
    while i < n:
        w = min(block, n - i)
        for j in range(w):
            v = x[i + j]
            if not np.isfinite(v):
                bad = 1
                v = np.float32(0.0)
            u = np.float32(_GC0) * (v + np.float32(_GC1) * v * v * v)
            a = u if u >= np.float32(0.0) else -u
            # exp(-2a) via exp2, a >= 0 so the argument is nonpositive
            t = np.float32(-2.0) * a * np.float32(_LOG2E)
            if t < np.float32(-126.0):
                t = np.float32(-126.0)
            nn = np.int32(t - np.float32(0.5))
            f = t - np.float32(nn)
            p = np.float32(1.0) + f * (np.float32(_C1) + f * (np.float32(_C2) + f * (
                np.float32(_C3) + f * (np.float32(_C4) + f * np.float32(_C5)))))
            bits[j] = (nn + np.int32(127)) << np.int32(23)
            tanh_sav[i + j] = p
        for j in range(w):
            e = tanh_sav[i + j] * pow2n[j]
            v = x[i + j]
            u = np.float32(_GC0) * (v + np.float32(_GC1) * v * v * v)
            t = (np.float32(1.0) - e) / (np.float32(1.0) + e)
            if u < np.float32(0.0):
                t = -t
            tanh_sav[i + j] = t
            out[i + j] = np.float32(0.5) * v * (np.float32(1.0) + t)
        i += w
    return bad


@njit(cache=True, fastmath=_FM)
def gelu_fwd_f64(x, out, tanh_sav):
    n = x.shape[0]
    bad = 0
    for i in range(n):
        v = x[i]
        if not np.isfinite(v):
            bad = 1
        u = _GC0 * (v + _GC1 * v * v * v)
        t = math.tanh(u)
        tanh_sav[i] = t
        out[i] = 0.5 * v * (1.0 + t)
    return bad


@njit(cache=True, fastmath=_FM)
def gelu_bwd(x, tanh_sav, dy, dx):
    """dx = dy * d/dx [0.5 x (1 + tanh(u(x)))]."""
    n = x.shape[0]
    one = x.dtype.type(1.0)
    half = x.dtype.type(0.5)
    c0 = x.dtype.type(_GC0)
    c1 = x.dtype.type(3.0 * _GC1)
    for i in range(n):
        v = x[i]
        t = tanh_sav[i]
        du = c0 * (one + c1 * v * v)
        dx[i] = dy[i] * (half * (one + t) + half * v * (one - t * t) * du)


@njit(cache=True, fastmath=_FM)
def cross_entropy_fwd(logits, targets, weights, logz):
    """Weighted NLL over rows; saves per-row logZ for backward.

    Returns (loss_sum_f64, weight_sum_f64, bad_flag). Rows with weight 0 still
    get logz filled; their gradient is zeroed in backward.
    """
    rows, cols = logits.shape
    loss = 0.0
    wsum = 0.0
    bad = 0
    for i in range(rows):
        m = -np.inf
        for j in range(cols):
            v = np.float64(logits[i, j])
            if v > m:
                m = v
        if not np.isfinite(m):
            bad = 1
            m = 0.0
        s = 0.0
        for j in range(cols):
            s += math.exp(np.float64(logits[i, j]) - m)
        lz = m + math.log(s)
        if not np.isfinite(lz):
            bad = 1
        logz[i] = lz
        w = np.float64(weights[i])
        if w != 0.0:
            loss += w * (lz - np.float64(logits[i, targets[i]]))
            wsum += w
    return loss, wsum, bad


@njit(cache=True, fastmath=_FM)
def cross_entropy_bwd(logits, targets, weights, logz, scale, dlogits):
    """dlogits = scale * w * (softmax(logits) - onehot(target)) per row."""
    rows, cols = logits.shape
    for i in range(rows):
        w = np.float64(weights[i]) * scale
        if w == 0.0:
            for j in range(cols):
                dlogits[i, j] = logits.dtype.type(0.0)
            continue
        lz = logz[i]
        for j in range(cols):
            p = math.exp(np.float64(logits[i, j]) - lz)
            dlogits[i, j] = logits.dtype.type(w * p)
        dlogits[i, targets[i]] -= logits.dtype.type(w)


@njit(cache=True, fastmath=_FM)
def adam_step(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """In-place Adam on flat views; bc1/bc2 are precomputed bias corrections.

    Returns 1 if any incoming gradient or updated parameter is non-finite, so
    the update site doubles as the finiteness guard for the backward pass.
    """
    n = p.shape[0]
    b1 = p.dtype.type(beta1)
    b2 = p.dtype.type(beta2)
    o1 = p.dtype.type(1.0 - beta1)
    o2 = p.dtype.type(1.0 - beta2)
    acc = 0.0
    for i in range(n):
        gi = g[i]
        mi = b1 * m[i] + o1 * gi
        vi = b2 * v[i] + o2 * gi * gi
        m[i] = mi
        v[i] = vi
        mhat = np.float64(mi) / bc1
        vhat = np.float64(vi) / bc2
        pi = np.float64(p[i]) - lr * mhat / (math.sqrt(vhat) + eps)
        p[i] = p.dtype.type(pi)
        acc += pi
    return 0 if np.isfinite(acc) else 1


@njit(cache=True, fastmath=_FM)
def scatter_add_rows(table_grad, ids, dout):
    """table_grad[ids[i]] += dout[i]; duplicate-safe embedding backward."""
    rows, cols = dout.shape
    for i in range(rows):
        t = ids[i]
        for j in range(cols):
            table_grad[t, j] += dout[i, j]


def warmup():
    """Compile every kernel once on tiny inputs (on-disk cache persists)."""
    for dt in (np.float32, np.float64):
        x = np.zeros((2, 3), dtype=dt)
        o = np.empty_like(x)
        if dt is np.float32:
            softmax_fwd_f32(x, o)
        else:
            softmax_fwd_f64(x, o)
        softmax_bwd(o, x, o.copy())
        g = np.ones(3, dtype=dt)
        b = np.zeros(3, dtype=dt)
        xh = np.empty_like(x)
        iv = np.empty(2, dtype=dt)
        layernorm_fwd(x, g, b, 1e-5, o, xh, iv)
        layernorm_bwd(x, xh, iv, g, o, g.copy(), b.copy())
        f = np.zeros(4, dtype=dt)
        t = np.empty_like(f)
        of = np.empty_like(f)
        if dt is np.float32:
            gelu_fwd_f32(f, of, t)
        else:
            gelu_fwd_f64(f, of, t)
        gelu_bwd(f, t, of, of.copy())
        lg = np.zeros((2, 5), dtype=dt)
        tg = np.zeros(2, dtype=np.int64)
        w = np.ones(2, dtype=dt)
        lz = np.empty(2, dtype=np.float64)
        cross_entropy_fwd(lg, tg, w, lz)
        cross_entropy_bwd(lg, tg, w, lz, 1.0, np.empty_like(lg))
        p = np.zeros(4, dtype=dt)
        adam_step(p, p.copy(), p.copy(), p.copy(), 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)
        scatter_add_rows(np.zeros((3, 2), dtype=dt), np.zeros(2, dtype=np.int64),
                         np.zeros((2, 2), dtype=dt))
