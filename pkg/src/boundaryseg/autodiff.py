"""Dense-tensor engine with reverse-mode automatic differentiation.

Supplies every numeric primitive the segmentation network needs: 3-D
convolution, factor-2 trilinear upsampling, relu/sigmoid, strict
elementwise arithmetic, channel concat/slice, group normalization and
full reduction. Tensors wrap contiguous numpy buffers (float32 for
training and inference, float64 for gradient checking); executed ops
are recorded as tape nodes that ``backward`` replays exactly once in
reverse topological order.

Layout convention for 5-D data is [batch, channels, depth, height,
width]. There is no implicit broadcasting beyond python scalars; shape
mismatches raise :class:`ContractViolation` naming the offending
dimension.
"""

import numbers
from contextlib import contextmanager

import numpy as np

from .errors import ContractViolation, GradientStateError, InvalidConfigError

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class TapeNode:
    """One recorded operation: parent tensors plus a closure that maps
    the output gradient to per-parent gradient contributions."""

    __slots__ = ("op", "parents", "backward_fn", "consumed")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False

    def release(self):
        # Drop saved intermediates so the tape does not pin memory.
        self.parents = ()
        self.backward_fn = None
        self.consumed = True


class Tensor:
    """N-dimensional float array participating in the differentiation tape.

    ``requires_grad`` leaves (no creator node) receive ``.grad`` after
    ``backward``; intermediate tensors carry a :class:`TapeNode` linking
    them to their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # 0-d arrays are already contiguous
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return reduce_sum(self)


def _result(op, parents, out_data, backward_fn):
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out.node = TapeNode(op, tuple(parents), backward_fn)
    return out


def _as_pair(op, a, b):
    """Coerce (Tensor|scalar, Tensor|scalar) for strict binary ops.

    Returns (a, b, a_is_tensor, b_is_tensor). Exactly tensor/tensor with
    identical shapes, or tensor/python-scalar, is allowed.
    """
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    if not (a_t or b_t):
        raise ContractViolation(f"{op}: at least one operand must be a Tensor")
    if a_t and b_t:
        if a.data.shape != b.data.shape:
            raise ContractViolation(
                f"{op}: shape mismatch {a.data.shape} vs {b.data.shape} "
                "(no implicit broadcasting beyond scalars)")
        if a.data.dtype != b.data.dtype:
            raise ContractViolation(
                f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")
    else:
        scalar = b if a_t else a
        if not isinstance(scalar, numbers.Real):
            raise ContractViolation(f"{op}: unsupported operand {type(scalar).__name__}")
    return a, b, a_t, b_t


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b, a_t, b_t = _as_pair("add", a, b)
    if a_t and b_t:
        def back(g):
            return g, g
        return _result("add", [a, b], a.data + b.data, back)
    t, s = (a, b) if a_t else (b, a)

    def back(g):
        return (g,)
    return _result("add", [t], t.data + t.data.dtype.type(s), back)


def sub(a, b):
    a, b, a_t, b_t = _as_pair("sub", a, b)
    if a_t and b_t:
        def back(g):
            return g, -g
        return _result("sub", [a, b], a.data - b.data, back)
    if a_t:
        def back(g):
            return (g,)
        return _result("sub", [a], a.data - a.data.dtype.type(b), back)

    def back(g):
        return (-g,)
    return _result("sub", [b], b.data.dtype.type(a) - b.data, back)


def mul(a, b):
    a, b, a_t, b_t = _as_pair("mul", a, b)
    if a_t and b_t:
        def back(g):
            return g * b.data, g * a.data
        return _result("mul", [a, b], a.data * b.data, back)
    t, s = (a, b) if a_t else (b, a)
    s = t.data.dtype.type(s)

    def back(g):
        return (g * s,)
    return _result("mul", [t], t.data * s, back)


def div(a, b):
    a, b, a_t, b_t = _as_pair("div", a, b)
    if a_t and b_t:
        def back(g):
            return g / b.data, -g * a.data / (b.data * b.data)
        return _result("div", [a, b], a.data / b.data, back)
    if a_t:
        inv = 1.0 / a.data.dtype.type(b)

        def back(g):
            return (g * inv,)
        return _result("div", [a], a.data * inv, back)
    s = b.data.dtype.type(a)

    def back(g):
        return (-g * s / (b.data * b.data),)
    return _result("div", [b], s / b.data, back)


def elementwise(kind, a, b):
    """Dispatch form of the strict elementwise ops: kind in {add, mul}."""
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ContractViolation(f"elementwise: unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# activations


def relu(x):
    mask = x.data > 0

    def back(g):
        return (g * mask,)
    return _result("relu", [x], np.where(mask, x.data, x.data.dtype.type(0)), back)


def sigmoid(x):
    # Two-branch form avoids exp overflow for large |x|.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)

    def back(g):
        return (g * out * (1.0 - out),)
    return _result("sigmoid", [x], out, back)


def activation(kind, x):
    """Dispatch form: kind in {relu, sigmoid}."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractViolation(f"activation: unknown kind {kind!r}")


def clamp(x, lo, hi):
    """Clamp values to [lo, hi]; gradient passes only inside the range."""
    mask = (x.data >= lo) & (x.data <= hi)

    def back(g):
        return (g * mask,)
    return _result("clamp", [x], np.clip(x.data, lo, hi), back)


def log(x):
    def back(g):
        return (g / x.data,)
    return _result("log", [x], np.log(x.data), back)


# ---------------------------------------------------------------------------
# shape ops


def concat_channels(a, b):
    """Concatenate two 5-D tensors along the channel axis (a first)."""
    if a.data.ndim != b.data.ndim or a.data.ndim < 2:
        raise ContractViolation(
            f"concat_channels: rank mismatch {a.data.ndim} vs {b.data.ndim}")
    for ax in range(a.data.ndim):
        if ax != 1 and a.data.shape[ax] != b.data.shape[ax]:
            raise ContractViolation(
                f"concat_channels: axis {ax} extents differ "
                f"({a.data.shape[ax]} vs {b.data.shape[ax]})")
    ca = a.data.shape[1]

    def back(g):
        return g[:, :ca], g[:, ca:]
    return _result("concat_channels", [a, b],
                   np.concatenate([a.data, b.data], axis=1), back)


def slice_channels(x, start, stop):
    """Channel-range view as a differentiable op (inverse of concat)."""
    c = x.data.shape[1]
    if not (0 <= start < stop <= c):
        raise ContractViolation(
            f"slice_channels: range [{start}, {stop}) invalid for {c} channels")

    def back(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)
    return _result("slice_channels", [x], x.data[:, start:stop].copy(), back)


def expand_channels(x, channels):
    """Broadcast a single-channel tensor across ``channels`` channels."""
    if x.data.shape[1] != 1:
        raise ContractViolation(
            f"expand_channels: input has {x.data.shape[1]} channels, expected 1")

    def back(g):
        return (g.sum(axis=1, keepdims=True),)
    reps = (1, channels) + (1,) * (x.data.ndim - 2)
    return _result("expand_channels", [x], np.tile(x.data, reps), back)


def reduce_sum(x):
    """Sum of all elements as a scalar tensor; gradient is all-ones."""
    def back(g):
        return (np.full_like(x.data, g),)
    return _result("reduce_sum", [x], np.sum(x.data), back)


# ---------------------------------------------------------------------------
# 3-D convolution


def _conv_out_extent(name, extent, k, stride, padding):
    out = (extent + 2 * padding - k) // stride + 1
    if out < 1:
        raise ContractViolation(
            f"conv3d: output {name} extent {out} < 1 "
            f"(input {extent}, kernel {k}, stride {stride}, padding {padding})")
    return out


def _im2col(xp, k, stride, od, oh, ow):
    """(N, C, Dp, Hp, Wp) -> (N, C, k, k, k, od, oh, ow) patch matrix."""
    n, c = xp.shape[:2]
    col = np.empty((n, c, k, k, k, od, oh, ow), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            for e in range(k):
                col[:, :, a, b, e] = xp[:, :,
                                        a:a + stride * od:stride,
                                        b:b + stride * oh:stride,
                                        e:e + stride * ow:stride]
    return col


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """3-D cross-correlation of a [N,C,D,H,W] tensor with [K,C,kd,kh,kw]
    filters. kd = kh = kw (cubic, odd); same stride/padding on all axes.

    Output spatial extent per axis: floor((S + 2*padding - k)/stride) + 1.
    """
    if x.data.ndim != 5:
        raise ContractViolation(f"conv3d: input rank {x.data.ndim}, expected 5")
    if weight.data.ndim != 5:
        raise ContractViolation(f"conv3d: weight rank {weight.data.ndim}, expected 5")
    n, c, d, h, w = x.data.shape
    kn, kc, kd, kh, kw = weight.data.shape
    if kc != c:
        raise ContractViolation(
            f"conv3d: input channels C={c} do not match weight channels C={kc}")
    if not (kd == kh == kw):
        raise ContractViolation(f"conv3d: kernel must be cubic, got {(kd, kh, kw)}")
    if kd % 2 == 0:
        raise ContractViolation(f"conv3d: kernel extent {kd} must be odd")
    if not (isinstance(stride, numbers.Integral) and stride >= 1):
        raise ContractViolation(f"conv3d: stride {stride!r} must be a positive int")
    if not (isinstance(padding, numbers.Integral) and padding >= 0):
        raise ContractViolation(f"conv3d: padding {padding!r} must be a non-negative int")
    if bias is not None and bias.data.shape != (kn,):
        raise ContractViolation(
            f"conv3d: bias shape {bias.data.shape} does not match K={kn}")

    od = _conv_out_extent("depth", d, kd, stride, padding)
    oh = _conv_out_extent("height", h, kd, stride, padding)
    ow = _conv_out_extent("width", w, kd, stride, padding)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0)) + ((padding, padding),) * 3)
    else:
        xp = x.data
    col = _im2col(xp, kd, stride, od, oh, ow)
    ck = c * kd * kh * kw
    p = od * oh * ow
    col2 = col.reshape(n, ck, p)
    w2 = weight.data.reshape(kn, ck)
    out = np.matmul(w2, col2).reshape(n, kn, od, oh, ow)
    if bias is not None:
        out += bias.data[None, :, None, None, None]

    parents = [x, weight] if bias is None else [x, weight, bias]

    def back(g):
        g2 = g.reshape(n, kn, p)
        # weight gradient: sum over batch of g @ col^T
        dw = np.matmul(g2, col2.transpose(0, 2, 1)).sum(axis=0).reshape(weight.data.shape)
        # input gradient: scatter-add columns back through the kernel offsets
        dcol = np.matmul(w2.T, g2).reshape(n, c, kd, kh, kw, od, oh, ow)
        dxp = np.zeros_like(xp)
        for a in range(kd):
            for b in range(kd):
                for e in range(kd):
                    dxp[:, :,
                        a:a + stride * od:stride,
                        b:b + stride * oh:stride,
                        e:e + stride * ow:stride] += dcol[:, :, a, b, e]
        dx = dxp[:, :, padding:padding + d, padding:padding + h, padding:padding + w] \
            if padding else dxp
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3, 4))

    return _result("conv3d", parents, out, back)


# ---------------------------------------------------------------------------
# trilinear upsampling (factor 2, align-corners-false)


def _upsample_axis(x, axis):
    m = x.shape[axis]
    out_shape = list(x.shape)
    out_shape[axis] = 2 * m
    out = np.empty(out_shape, dtype=x.dtype)

    def sl(lo, hi, step=1):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(lo, hi, step)
        return tuple(idx)

    if m == 1:
        out[sl(0, 2)] = x
        return out
    # out[2j]   = 0.25*in[j-1] + 0.75*in[j]   (j >= 1), out[0]    = in[0]
    # out[2j+1] = 0.75*in[j]   + 0.25*in[j+1] (j <= m-2), out[-1] = in[-1]
    even, odd = sl(0, None, 2), sl(1, None, 2)
    out[even] = x
    out[odd] = x
    out[sl(2, None, 2)] = 0.25 * x[sl(0, m - 1)] + 0.75 * x[sl(1, m)]
    out[sl(1, 2 * m - 1, 2)] = 0.75 * x[sl(0, m - 1)] + 0.25 * x[sl(1, m)]
    return out


def _upsample_axis_grad(g, axis, m):
    def sl(arr, lo, hi, step=1):
        idx = [slice(None)] * arr.ndim
        idx[axis] = slice(lo, hi, step)
        return arr[tuple(idx)]

    ge = sl(g, 0, None, 2)
    go = sl(g, 1, None, 2)
    if m == 1:
        return ge + go
    dx = np.zeros(ge.shape, dtype=g.dtype)
    # from even outputs
    sl(dx, 0, 1)[...] += sl(ge, 0, 1)
    sl(dx, 1, m)[...] += 0.75 * sl(ge, 1, m)
    sl(dx, 0, m - 1)[...] += 0.25 * sl(ge, 1, m)
    # from odd outputs
    sl(dx, 0, m - 1)[...] += 0.75 * sl(go, 0, m - 1)
    sl(dx, 1, m)[...] += 0.25 * sl(go, 0, m - 1)
    sl(dx, m - 1, m)[...] += sl(go, m - 1, m)
    return dx


def trilinear_upsample(x, factor=2):
    """Double each spatial extent of a [N,C,D,H,W] tensor by trilinear
    interpolation under align-corners-false coordinates."""
    if factor != 2:
        raise InvalidConfigError(f"trilinear_upsample: only factor 2 is supported, got {factor}")
    if x.data.ndim != 5:
        raise ContractViolation(f"trilinear_upsample: input rank {x.data.ndim}, expected 5")
    d, h, w = x.data.shape[2:]
    out = x.data
    for axis in (2, 3, 4):
        out = _upsample_axis(out, axis)

    def back(g):
        for axis, m in ((4, w), (3, h), (2, d)):
            g = _upsample_axis_grad(g, axis, m)
        return (g,)
    return _result("trilinear_upsample", [x], out, back)


# ---------------------------------------------------------------------------
# group normalization


def group_norm(x, groups, gain, bias, eps=1e-5):
    """Normalize each (sample, channel-group) to zero mean / unit variance,
    then apply per-channel affine gain and bias."""
    if x.data.ndim != 5:
        raise ContractViolation(f"group_norm: input rank {x.data.ndim}, expected 5")
    n, c = x.data.shape[:2]
    if c % groups != 0:
        raise ContractViolation(f"group_norm: C={c} not divisible by groups={groups}")
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise ContractViolation(
            f"group_norm: affine shapes {gain.data.shape}/{bias.data.shape} must be ({c},)")

    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = ((xg - mu) / sigma).reshape(x.data.shape)
    out = xhat * gain.data[None, :, None, None, None] + bias.data[None, :, None, None, None]

    def back(g):
        dgain = (g * xhat).sum(axis=(0, 2, 3, 4))
        dbias = g.sum(axis=(0, 2, 3, 4))
        gg = (g * gain.data[None, :, None, None, None]).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        mean_g = gg.mean(axis=2, keepdims=True)
        mean_gx = (gg * xh).mean(axis=2, keepdims=True)
        dx = ((gg - mean_g - xh * mean_gx) / sigma).reshape(x.data.shape)
        return dx, dgain, dbias

    return _result("group_norm", [x, gain, bias], out, back)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root):
    """Iterative post-order over tape nodes reachable from ``root``."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if t.node is None:
            continue
        tid = id(t)
        if done:
            order.append(t)
            continue
        if tid in visited:
            continue
        visited.add(tid)
        stack.append((t, True))
        for p in t.node.parents:
            if p.node is not None and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Populate .grad on every requires_grad leaf reachable from ``loss``.

    The loss must be scalar. Replaying an already-consumed tape, or
    running backward while leaves still hold gradients from a previous
    pass, raises GradientStateError (no silent accumulation).
    """
    if not isinstance(loss, Tensor):
        raise ContractViolation("backward: loss must be a Tensor")
    if loss.data.shape != ():
        raise ContractViolation(
            f"backward: loss must be scalar, got shape {loss.data.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones((), dtype=loss.data.dtype)
        return
    if loss.node.consumed:
        raise GradientStateError("backward: tape already consumed by a previous backward")

    order = _toposort(loss)

    # Reject stale leaf gradients up front: accumulation across backward
    # calls is a classic training bug, so it is an error by contract.
    seen_leaves = set()
    for t in order:
        for p in t.node.parents:
            if p.node is None and p.requires_grad and id(p) not in seen_leaves:
                seen_leaves.add(id(p))
                if p.grad is not None:
                    raise GradientStateError(
                        "backward: leaf already holds a gradient; zero grads first")

    # Backward closures may hand the same buffer to several parents (add
    # returns its output gradient twice), so a stored contribution is not
    # writable until this pass owns a private copy: first accumulation
    # allocates, later ones update in place.
    grads = {id(loss): np.ones((), dtype=loss.data.dtype)}
    owned = {id(loss)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        owned.discard(id(t))
        node = t.node
        if g is None:
            node.release()
            continue
        contribs = node.backward_fn(g)
        for p, pg in zip(node.parents, contribs):
            if pg is None or not p.requires_grad:
                continue
            if p.node is None:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                p.grad += pg
            else:
                pid = id(p)
                acc = grads.get(pid)
                if acc is None:
                    # asarray matters: 0-d arithmetic yields immutable numpy
                    # scalars, which would turn the += below into a rebind
                    grads[pid] = np.asarray(pg.astype(p.data.dtype, copy=False))
                elif pid in owned:
                    acc += pg
                else:
                    grads[pid] = np.asarray(acc + pg)
                    owned.add(pid)
        node.release()


# ---------------------------------------------------------------------------
# finite-difference gradient verification


def finite_diff_check(op_graph, inputs, eps=1e-5, max_components=None, rng=None):
    """Compare tape gradients of a scalar-valued graph with central
    finite differences.

    op_graph: callable taking no arguments and returning a scalar Tensor
        built from ``inputs`` (a fresh tape per call).
    inputs: leaf tensors to check; only requires_grad leaves participate.
    max_components: optionally check a random subset of components per
        input (for large graphs); default checks every component.

    Returns the worst relative error over all checked components:
    max |g_tape - g_fd| divided by the graph-wide gradient scale
    max |g_fd| (+1e-12). Normalizing by the graph scale keeps
    parameters whose true gradient is identically zero (e.g. a conv
    bias absorbed by a following normalization) from comparing finite
    difference noise against itself.

    Kink handling: when the step straddles a relu/clamp kink, the central
    secant measures a chord, but the true one-sided derivative always
    lies within |s_plus - s_minus| / 2 of it (s_plus/s_minus are the
    one-sided secants). Each component is therefore charged only the
    error in excess of that half-jump: exact kink crossings contribute
    zero, smooth points are loosened by O(eps * f''), and a genuinely
    wrong backward formula still shows its full discrepancy.
    """
    checked = [t for t in inputs if t.requires_grad]
    if not checked:
        raise ContractViolation("finite_diff_check: no requires_grad inputs")
    for t in checked:
        t.grad = None
    loss = op_graph()
    if loss.data.shape != ():
        raise ContractViolation("finite_diff_check: graph output must be scalar")
    backward(loss)

    if rng is None:
        rng = np.random.default_rng(0)

    with no_grad():
        f_zero = float(op_graph().data)

    records = []  # (tape, central secant, one-sided secant jump)
    for t in checked:
        if t.grad is None:
            raise GradientStateError("finite_diff_check: leaf missing gradient after backward")
        flat = t.data.reshape(-1)
        n = flat.size
        if max_components is not None and n > max_components:
            idxs = rng.choice(n, size=max_components, replace=False)
        else:
            idxs = np.arange(n)
        g_tape = t.grad.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                f_plus = float(op_graph().data)
            flat[i] = orig - eps
            with no_grad():
                f_minus = float(op_graph().data)
            flat[i] = orig
            s_plus = (f_plus - f_zero) / eps
            s_minus = (f_zero - f_minus) / eps
            records.append((float(g_tape[i]), (s_plus + s_minus) / 2.0,
                            abs(s_plus - s_minus)))
        t.grad = None

    scale = max(abs(central) for _, central, _ in records) + 1e-12
    max_excess = 0.0
    for tape, central, jump in records:
        max_excess = max(max_excess, abs(tape - central) - 0.5 * jump)
    return max(0.0, max_excess) / scale
