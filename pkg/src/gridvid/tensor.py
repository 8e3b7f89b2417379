"""Reverse-mode autodiff over numpy arrays.

Design constraints:
- float32 storage on the training path; the same op set runs in float64 when
  its inputs are float64 (shadow mode), which is what gradcheck uses so the
  finite-difference comparison is not drowned by single precision noise.
- Explicit reductions (row sums, normalizer sums, column accumulators) run in
  float64 regardless of storage dtype; BLAS matmuls accumulate at their native
  precision.
- Every op output is guarded against NaN/Inf. Kernel-backed ops return an
  inline flag; plain numpy ops use a float64 sum probe (inf/NaN survive any
  summation order). The one exception is a matmul explicitly created with
  guard=False, for outputs whose consumer is a guarding kernel; the attention
  score matrix uses this because probing 150 MB per layer per step is not free.
- A graph has a single writer. Independent graphs (separate Tensor sets and
  pools) may live on different threads, there is no shared mutable state
  beyond the module-level pool stack, which is thread-local.
- Training loops rebuild an identically-shaped graph every step, so output
  buffers come from a shape-keyed pool when one is active. Pooled arrays are
  fully overwritten by the op that takes them, and recycle() must only be
  called between steps, when no live Tensor from the previous step is needed.
"""

import threading

import numpy as np

from . import kernels


class NonFiniteError(ArithmeticError):
    """An op produced or consumed NaN/Inf."""


_tls = threading.local()


def _pool_stack():
    if not hasattr(_tls, "stack"):
        _tls.stack = []
    return _tls.stack


class BufferPool:
    """Shape/dtype-keyed free lists for step-scoped arrays."""

    def __init__(self):
        self._free = {}
        self._lent = []

    def take(self, shape, dtype):
        key = (tuple(shape), np.dtype(dtype).char)
        lst = self._free.get(key)
        if lst:
            arr = lst.pop()
        else:
            arr = np.empty(key[0], dtype=dtype)
        self._lent.append(arr)
        return arr

    def recycle(self):
        """Return every lent buffer to the free lists. Caller promises no
        Tensor from the finished step is still in use."""
        for arr in self._lent:
            key = (arr.shape, arr.dtype.char)
            self._free.setdefault(key, []).append(arr)
        self._lent = []

    def __enter__(self):
        _pool_stack().append(self)
        return self

    def __exit__(self, *exc):
        _pool_stack().pop()
        return False


def _alloc(shape, dtype):
    stack = _pool_stack()
    if stack:
        return stack[-1].take(shape, dtype)
    return np.empty(shape, dtype=dtype)


def _guard_array(a, opname):
    s = np.sum(a, dtype=np.float64)
    if not np.isfinite(s):
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values in output of {opname}")


def _guard_flag(flag, opname):
    if flag:
        raise NonFiniteError(f"non-finite values in {opname}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "vjp", "op")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None, op="leaf"):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach_array(self):
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape}, dtype={self.data.dtype})"

    def accumulate(self, g):
        """Add g to this node's pending gradient, taking ownership when first."""
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g

    def backward(self):
        if self.data.ndim != 0:
            raise ValueError("backward() expects a scalar loss")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(topo):
            if node.vjp is not None and node.grad is not None:
                node.vjp(node.grad)
            if node.parents:
                # intermediate grads are only needed once
                node.grad = None


def tensor(data, requires_grad=False):
    arr = np.asarray(data)
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        pass
    elif np.issubdtype(arr.dtype, np.floating) or np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.float32)
    return Tensor(arr, requires_grad=requires_grad)


def _needs(*ts):
    return any(t.requires_grad for t in ts)


def matmul(a, b, guard=True):
    """a @ b. 2D b uses a single flattened gemm; 4D x 4D is batched.

    guard=False skips the output probe; only valid when the consumer is a
    guarding kernel op (softmax over attention scores).
    """
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim >= 2:
        lead = ad.shape[:-1]
        out = _alloc(lead + (bd.shape[1],), ad.dtype)
        np.matmul(ad.reshape(-1, ad.shape[-1]), bd, out=out.reshape(-1, bd.shape[1]))
    else:
        out = _alloc(np.broadcast_shapes(ad.shape[:-2], bd.shape[:-2]) + (ad.shape[-2], bd.shape[-1]), ad.dtype)
        np.matmul(ad, bd, out=out)
    if guard:
        _guard_array(out, "matmul")
    if not _needs(a, b):
        return Tensor(out, op="matmul")

    def vjp(dout):
        if a.requires_grad:
            if bd.ndim == 2:
                da = _alloc(ad.shape, ad.dtype)
                np.matmul(dout.reshape(-1, bd.shape[1]), bd.T, out=da.reshape(-1, ad.shape[-1]))
            else:
                da = _alloc(ad.shape, ad.dtype)
                np.matmul(dout, bd.swapaxes(-1, -2), out=da)
            a.accumulate(da)
        if b.requires_grad:
            if bd.ndim == 2:
                a2 = ad.reshape(-1, ad.shape[-1])
                db = _alloc(bd.shape, bd.dtype)
                np.matmul(a2.T, dout.reshape(-1, bd.shape[1]), out=db)
            else:
                db = _alloc(bd.shape, bd.dtype)
                np.matmul(ad.swapaxes(-1, -2), dout, out=db)
            b.accumulate(db)

    return Tensor(out, requires_grad=True, parents=(a, b), vjp=vjp, op="matmul")


def add(a, b):
    """a + b where b.shape is a suffix of a.shape (bias or positional table)
    or the shapes match (residual)."""
    ad, bd = a.data, b.data
    out = _alloc(ad.shape, ad.dtype)
    np.add(ad, bd, out=out)
    _guard_array(out, "add")
    if not _needs(a, b):
        return Tensor(out, op="add")

    ndiff = ad.ndim - bd.ndim

    def vjp(dout):
        a_took = False
        if a.requires_grad:
            a_took = a.grad is None
            a.accumulate(dout)
        if b.requires_grad:
            if ndiff > 0:
                db = np.sum(dout, axis=tuple(range(ndiff)), dtype=np.float64)
                b.accumulate(db.astype(bd.dtype))
            elif a_took and b.grad is None:
                # both parents would own the same buffer and later in-place
                # accumulation on one would corrupt the other
                b.accumulate(dout.copy())
            else:
                b.accumulate(dout)

    return Tensor(out, requires_grad=True, parents=(a, b), vjp=vjp, op="add")


def scale(x, c):
    c = float(c)
    out = _alloc(x.data.shape, x.data.dtype)
    np.multiply(x.data, x.data.dtype.type(c), out=out)
    _guard_array(out, "scale")
    if not x.requires_grad:
        return Tensor(out, op="scale")

    def vjp(dout):
        dx = _alloc(x.data.shape, x.data.dtype)
        np.multiply(dout, x.data.dtype.type(c), out=dx)
        x.accumulate(dx)

    return Tensor(out, requires_grad=True, parents=(x,), vjp=vjp, op="scale")


def layernorm(x, gain, bias, eps=1e-5):
    """Layernorm over the last axis."""
    xd = x.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = _alloc(xd.shape, xd.dtype)
    xhat = _alloc(xd.shape, xd.dtype)
    inv_std = _alloc((x2.shape[0],), xd.dtype)
    flag = kernels.layernorm_fwd(x2, gain.data, bias.data, float(eps),
                                 out.reshape(x2.shape), xhat.reshape(x2.shape), inv_std)
    _guard_flag(flag, "layernorm")
    if not _needs(x, gain, bias):
        return Tensor(out, op="layernorm")

    def vjp(dout):
        d2 = dout.reshape(x2.shape)
        dx = _alloc(xd.shape, xd.dtype)
        if gain.grad is None and gain.requires_grad:
            gain.grad = np.zeros_like(gain.data)
        if bias.grad is None and bias.requires_grad:
            bias.grad = np.zeros_like(bias.data)
        dg = gain.grad if gain.requires_grad else np.zeros_like(gain.data)
        db = bias.grad if bias.requires_grad else np.zeros_like(bias.data)
        kernels.layernorm_bwd(d2, xhat.reshape(x2.shape), inv_std, gain.data,
                              dx.reshape(x2.shape), dg, db)
        if x.requires_grad:
            x.accumulate(dx)

    return Tensor(out, requires_grad=True, parents=(x, gain, bias), vjp=vjp, op="layernorm")


def softmax(x):
    """Softmax over the last axis."""
    xd = x.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = _alloc(xd.shape, xd.dtype)
    o2 = out.reshape(x2.shape)
    if xd.dtype == np.float32:
        flag = kernels.softmax_fwd_f32(x2, o2)
    else:
        flag = kernels.softmax_fwd_f64(x2, o2)
    _guard_flag(flag, "softmax")
    if not x.requires_grad:
        return Tensor(out, op="softmax")

    def vjp(dout):
        dx = _alloc(xd.shape, xd.dtype)
        flag = kernels.softmax_bwd(o2, dout.reshape(x2.shape), dx.reshape(x2.shape))
        _guard_flag(flag, "softmax_bwd")
        x.accumulate(dx)

    return Tensor(out, requires_grad=True, parents=(x,), vjp=vjp, op="softmax")


def gelu(x):
    xd = x.data
    flat = xd.reshape(-1)
    out = _alloc(xd.shape, xd.dtype)
    tsav = _alloc(xd.shape, xd.dtype)
    if xd.dtype == np.float32:
        flag = kernels.gelu_fwd_f32(flat, out.reshape(-1), tsav.reshape(-1))
    else:
        flag = kernels.gelu_fwd_f64(flat, out.reshape(-1), tsav.reshape(-1))
    _guard_flag(flag, "gelu")
    if not x.requires_grad:
        return Tensor(out, op="gelu")

    def vjp(dout):
        dx = _alloc(xd.shape, xd.dtype)
        kernels.gelu_bwd(flat, tsav.reshape(-1), dout.reshape(-1), dx.reshape(-1))
        x.accumulate(dx)

    return Tensor(out, requires_grad=True, parents=(x,), vjp=vjp, op="gelu")


def embedding(table, ids):
    """Row gather: out[..., :] = table[ids[...], :]. ids is a plain int array."""
    ids = np.asarray(ids)
    td = table.data
    flat = ids.reshape(-1)
    if flat.size and (flat.min() < 0 or flat.max() >= td.shape[0]):
        raise IndexError("embedding id out of range")
    out = _alloc(ids.shape + (td.shape[1],), td.dtype)
    np.take(td, flat, axis=0, out=out.reshape(-1, td.shape[1]))
    _guard_array(out, "embedding")
    if not table.requires_grad:
        return Tensor(out, op="embedding")

    def vjp(dout):
        if table.grad is None:
            table.grad = np.zeros_like(td)
        kernels.scatter_add_rows(table.grad, flat.astype(np.int64),
                                 dout.reshape(-1, td.shape[1]))

    return Tensor(out, requires_grad=True, parents=(table,), vjp=vjp, op="embedding")


def cross_entropy(logits, targets, weights):
    """Weighted mean negative log likelihood over the last axis.

    targets: int array matching logits.shape[:-1]; weights: float array of the
    same shape, 0 drops a position, the loss is sum(w*nll)/sum(w).
    """
    ld = logits.data
    l2 = ld.reshape(-1, ld.shape[-1])
    tg = np.ascontiguousarray(targets.reshape(-1), dtype=np.int64)
    wt = np.ascontiguousarray(weights.reshape(-1), dtype=ld.dtype)
    logz = _alloc((l2.shape[0],), np.float64)
    loss_sum, wsum, flag = kernels.cross_entropy_fwd(l2, tg, wt, logz)
    _guard_flag(flag, "cross_entropy")
    if wsum == 0.0:
        raise ValueError("cross_entropy: all weights are zero")
    out = np.asarray(loss_sum / wsum, dtype=ld.dtype)
    if not logits.requires_grad:
        return Tensor(out, op="cross_entropy")

    def vjp(dout):
        dl = _alloc(ld.shape, ld.dtype)
        kernels.cross_entropy_bwd(l2, tg, wt, logz, float(dout) / wsum,
                                  dl.reshape(l2.shape))
        logits.accumulate(dl)

    return Tensor(out, requires_grad=True, parents=(logits,), vjp=vjp, op="cross_entropy")


def reshape(x, shape):
    """numpy reshape semantics: a view when strides allow, else a copy."""
    xd = x.data
    out = xd.reshape(shape)
    if not x.requires_grad:
        return Tensor(out, op="reshape")

    def vjp(dout):
        if dout.flags.c_contiguous:
            x.accumulate(dout.reshape(xd.shape))
        else:
            buf = _alloc(xd.shape, xd.dtype)
            np.copyto(buf.reshape(dout.shape), dout)
            x.accumulate(buf)

    return Tensor(out, requires_grad=True, parents=(x,), vjp=vjp, op="reshape")


def transpose(x, axes):
    axes = tuple(axes)
    out = x.data.transpose(axes)
    if not x.requires_grad:
        return Tensor(out, op="transpose")
    inv = tuple(np.argsort(axes))

    def vjp(dout):
        x.accumulate(dout.transpose(inv))

    return Tensor(out, requires_grad=True, parents=(x,), vjp=vjp, op="transpose")


def contiguous(x):
    """Copy into a pooled C-contiguous buffer; BLAS fast paths need this after
    transpose."""
    xd = x.data
    if xd.flags.c_contiguous:
        return x
    out = _alloc(xd.shape, xd.dtype)
    np.copyto(out, xd)
    if not x.requires_grad:
        return Tensor(out, op="contiguous")

    def vjp(dout):
        x.accumulate(dout)

    return Tensor(out, requires_grad=True, parents=(x,), vjp=vjp, op="contiguous")


def narrow(x, axis, start, length):
    """View of a contiguous slice along an axis."""
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.data[idx]
    if not x.requires_grad:
        return Tensor(out, op="narrow")

    def vjp(dout):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[idx] += dout

    return Tensor(out, requires_grad=True, parents=(x,), vjp=vjp, op="narrow")


def concat(xs, axis):
    datas = [t.data for t in xs]
    shape = list(datas[0].shape)
    shape[axis] = sum(d.shape[axis] for d in datas)
    out = _alloc(tuple(shape), datas[0].dtype)
    offs = []
    o = 0
    for d in datas:
        idx = [slice(None)] * d.ndim
        idx[axis] = slice(o, o + d.shape[axis])
        np.copyto(out[tuple(idx)], d)
        offs.append((tuple(idx), o))
        o += d.shape[axis]
    _guard_array(out, "concat")
    if not _needs(*xs):
        return Tensor(out, op="concat")

    def vjp(dout):
        for t, (idx, _) in zip(xs, offs):
            if t.requires_grad:
                t.accumulate(dout[idx])

    return Tensor(out, requires_grad=True, parents=tuple(xs), vjp=vjp, op="concat")


def gradcheck(fn, params, h=1e-3, max_elems=2000):
    """Central finite differences against reverse-mode grads.

    fn() -> scalar Tensor built from params (dict name -> float64 leaf Tensor).
    Returns the max relative error over all checked parameter elements.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValueError(f"gradcheck wants float64 params, got {p.dtype} for {name}")
        p.grad = None
    loss = fn()
    loss.backward()
    worst = 0.0
    for name, p in params.items():
        if not p.requires_grad:
            continue
        ana = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        aflat = ana.reshape(-1)
        n = flat.size
        if n > max_elems:
            raise ValueError(f"param {name} too large for dense gradcheck ({n} elements)")
        for i in range(n):
            keep = flat[i]
            flat[i] = keep + h
            lp = fn().item()
            flat[i] = keep - h
            lm = fn().item()
            flat[i] = keep
            fd = (lp - lm) / (2 * h)
            denom = max(abs(fd), abs(aflat[i]), 1.0)
            err = abs(fd - aflat[i]) / denom
            if err > worst:
                worst = err
    return worst
