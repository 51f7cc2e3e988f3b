"""Reverse-mode automatic differentiation on float64 numpy arrays.

Every operation builds an eager computation graph; ``Tensor.backward()``
walks it in reverse topological order and accumulates gradients on the
leaves. The operator set is exactly what the degradation/SR networks and
losses need: 2-d convolution, affine maps, pointwise ops, a handful of
reductions, decimation/nearest-neighbour resampling and feature-wise
modulation. Double precision throughout so finite-difference checks have
headroom.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Shapes of the operands do not satisfy the operation's contract."""


class ParameterError(ValueError):
    """A non-shape argument (stride, count, value range) is invalid."""


class StateError(RuntimeError):
    """Optimizer or graph state is inconsistent (e.g. missing gradients)."""


_grad_mode = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


class no_grad:
    """Context manager that disables graph recording on the current thread."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _grad_mode.enabled = False

    def __exit__(self, *exc):
        _grad_mode.enabled = self._prev
        return False


class Tensor:
    """N-d float64 array with optional gradient tracking.

    ``data`` is always a C-contiguous float64 array. Leaf construction
    rejects NaN/Inf; interior nodes are finite whenever their inputs are,
    and the scalar losses re-check at the training loop boundary.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ParameterError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, backward_fn) -> "Tensor":
        out = object.__new__(cls)
        out.data = data
        out.grad = None
        track = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward_fn = backward_fn if track else None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ParameterError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = object.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
        return out

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` on every reachable leaf with requires_grad.

        The loss must be scalar. Gradient contributions from multiple uses
        of the same tensor are summed.
        """
        if self.data.size != 1:
            raise ParameterError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        topo = []
        visited = {id(self)}
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    visited.add(id(parent))
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray):
    # grads are never mutated in place, so aliasing the incoming array is safe
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _binary_shapes(a: Tensor, b: Tensor, op: str):
    # identical shapes, or one side is a scalar (size-1) broadcast
    if a.data.shape == b.data.shape or a.data.size == 1 or b.data.size == 1:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.data.shape} vs {b.data.shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back to the scalar operand's shape."""
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _reduce_to(g, a.data.shape))
        _accumulate(b, _reduce_to(g, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    out_data = a.data - b.data

    def backward(g):
        _accumulate(a, _reduce_to(g, a.data.shape))
        _accumulate(b, -_reduce_to(g, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _reduce_to(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _reduce_to(g * a.data, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out_data = a.data * c

    def backward(g):
        _accumulate(a, g * c)

    return Tensor._from_op(out_data, (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    x = a.data
    out_data = np.where(x > 0, x, slope * x)

    def backward(g):
        _accumulate(a, g * np.where(x > 0, 1.0, slope))

    return Tensor._from_op(out_data, (a,), backward)


def abs_(a: Tensor) -> Tensor:
    out_data = np.abs(a.data)

    def backward(g):
        _accumulate(a, g * np.sign(a.data))

    return Tensor._from_op(out_data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return Tensor._from_op(out_data, (a,), backward)


def _require_nonempty(t: Tensor, op: str):
    if t.data.size == 0:
        raise ParameterError(f"{op}: empty tensor")


def tsum(a: Tensor) -> Tensor:
    _require_nonempty(a, "sum")
    out_data = np.array(np.sum(a.data))

    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return Tensor._from_op(out_data, (a,), backward)


def mean(a: Tensor) -> Tensor:
    _require_nonempty(a, "mean")
    n = a.data.size
    out_data = np.array(np.sum(a.data) / n)

    def backward(g):
        _accumulate(a, np.broadcast_to(g / n, a.data.shape))

    return Tensor._from_op(out_data, (a,), backward)


def mean_per_sample(a: Tensor) -> Tensor:
    """Mean over all axes except the leading batch axis: [N, ...] -> [N]."""
    _require_nonempty(a, "mean_per_sample")
    if a.data.ndim < 2:
        raise DimensionError("mean_per_sample needs a batch axis plus data axes")
    n = a.data[0].size
    axes = tuple(range(1, a.data.ndim))
    out_data = np.sum(a.data, axis=axes) / n

    def backward(g):
        expand = g.reshape((-1,) + (1,) * (a.data.ndim - 1))
        _accumulate(a, np.broadcast_to(expand / n, a.data.shape).copy())

    return Tensor._from_op(out_data, (a,), backward)


def sum_per_sample(a: Tensor) -> Tensor:
    """Sum over all axes except the leading batch axis: [N, ...] -> [N]."""
    _require_nonempty(a, "sum_per_sample")
    if a.data.ndim < 2:
        raise DimensionError("sum_per_sample needs a batch axis plus data axes")
    axes = tuple(range(1, a.data.ndim))
    out_data = np.sum(a.data, axis=axes)

    def backward(g):
        expand = g.reshape((-1,) + (1,) * (a.data.ndim - 1))
        _accumulate(a, np.broadcast_to(expand, a.data.shape).copy())

    return Tensor._from_op(out_data, (a,), backward)


def global_avg_pool(a: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C] spatial mean."""
    if a.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects NCHW, got {a.data.shape}")
    _require_nonempty(a, "global_avg_pool")
    n_spatial = a.data.shape[2] * a.data.shape[3]
    out_data = a.data.sum(axis=(2, 3)) / n_spatial

    def backward(g):
        _accumulate(
            a, np.broadcast_to(g[:, :, None, None] / n_spatial, a.data.shape).copy()
        )

    return Tensor._from_op(out_data, (a,), backward)


def l1_mean(a, b) -> Tensor:
    """Mean absolute difference over all elements."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"l1_mean: shapes {a.data.shape} vs {b.data.shape}")
    _require_nonempty(a, "l1_mean")
    diff = a.data - b.data
    n = diff.size
    out_data = np.array(np.sum(np.abs(diff)) / n)

    def backward(g):
        s = np.sign(diff) * (g / n)
        _accumulate(a, s)
        _accumulate(b, -s)

    return Tensor._from_op(out_data, (a, b), backward)


def pairwise_l2(a, b) -> Tensor:
    """All-pairs Euclidean distances between two row sets: [b,d],[m,d] -> [b,m].

    The gradient of each distance is the normalized difference vector; at
    coincident points the subgradient 0 is used, so self-distance terms
    contribute nothing.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError("pairwise_l2 expects 2-d row sets")
    if a.data.shape[1] != b.data.shape[1]:
        raise DimensionError(
            f"pairwise_l2: feature dims {a.data.shape[1]} vs {b.data.shape[1]}"
        )
    _require_nonempty(a, "pairwise_l2")
    _require_nonempty(b, "pairwise_l2")
    diff = a.data[:, None, :] - b.data[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(dist > 0, g / dist, 0.0)
        contrib = w[:, :, None] * diff
        if a.requires_grad:
            _accumulate(a, contrib.sum(axis=1))
        if b.requires_grad:
            _accumulate(b, -contrib.sum(axis=0))

    return Tensor._from_op(dist, (a, b), backward)


def decimate(a: Tensor, s: int) -> Tensor:
    """Keep every s-th pixel (offsets 0, s, 2s, ...) along H and W."""
    s = int(s)
    if s < 1:
        raise ParameterError(f"decimate: stride must be >= 1, got {s}")
    if a.data.ndim != 4:
        raise DimensionError(f"decimate expects NCHW, got {a.data.shape}")
    n, c, h, w = a.data.shape
    if h % s or w % s:
        raise DimensionError(f"decimate: dims ({h},{w}) not divisible by {s}")
    out_data = np.ascontiguousarray(a.data[:, :, ::s, ::s])

    def backward(g):
        gx = np.zeros_like(a.data)
        gx[:, :, ::s, ::s] = g
        _accumulate(a, gx)

    return Tensor._from_op(out_data, (a,), backward)


def nn_upsample(a: Tensor, s: int) -> Tensor:
    """Repeat every pixel s x s along H and W."""
    s = int(s)
    if s < 1:
        raise ParameterError(f"nn_upsample: factor must be >= 1, got {s}")
    if a.data.ndim != 4:
        raise DimensionError(f"nn_upsample expects NCHW, got {a.data.shape}")
    n, c, h, w = a.data.shape
    out_data = np.broadcast_to(
        a.data[:, :, :, None, :, None], (n, c, h, s, w, s)
    ).reshape(n, c, h * s, w * s)
    out_data = np.ascontiguousarray(out_data)

    def backward(g):
        _accumulate(a, g.reshape(n, c, h, s, w, s).sum(axis=(3, 5)))

    return Tensor._from_op(out_data, (a,), backward)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map [N,Din] @ [Dout,Din]^T + [Dout]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise DimensionError("linear expects x[N,Din], w[Dout,Din], b[Dout]")
    if x.data.shape[1] != w.data.shape[1] or w.data.shape[0] != b.data.shape[0]:
        raise DimensionError(
            f"linear: x{x.data.shape} w{w.data.shape} b{b.data.shape} disagree"
        )
    out_data = x.data @ w.data.T + b.data

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g @ w.data)
        if w.requires_grad:
            _accumulate(w, g.T @ x.data)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0))

    return Tensor._from_op(out_data, (x, w, b), backward)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias [C] to a feature map [N,C,H,W]."""
    if x.data.ndim != 4 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"bias_add: x{x.data.shape} b{b.data.shape}")
    out_data = x.data + b.data[None, :, None, None]

    def backward(g):
        _accumulate(x, g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))

    return Tensor._from_op(out_data, (x, b), backward)


def film(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel affine modulation: x * (1 + gamma) + beta.

    gamma and beta are [N,C] vectors broadcast over the spatial axes, so a
    zero-initialized conditioning head leaves the feature map untouched.
    """
    if x.data.ndim != 4 or gamma.data.ndim != 2 or beta.data.ndim != 2:
        raise DimensionError("film expects x[N,C,H,W], gamma[N,C], beta[N,C]")
    if gamma.data.shape != (x.data.shape[0], x.data.shape[1]) or (
        beta.data.shape != gamma.data.shape
    ):
        raise DimensionError(
            f"film: x{x.data.shape} gamma{gamma.data.shape} beta{beta.data.shape}"
        )
    s = 1.0 + gamma.data
    out_data = x.data * s[:, :, None, None] + beta.data[:, :, None, None]

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * s[:, :, None, None])
        if gamma.requires_grad:
            _accumulate(gamma, np.sum(g * x.data, axis=(2, 3)))
        if beta.requires_grad:
            _accumulate(beta, np.sum(g, axis=(2, 3)))

    return Tensor._from_op(out_data, (x, gamma, beta), backward)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int):
    """Gather conv patches into a [C*kh*kw, N*ho*wo] matrix.

    Filled sample by sample with a single strided copy each, so the padded
    source stays cache-resident; the column-major layout makes the GEMM
    output land directly in NCHW order.
    """
    n, c = xp.shape[:2]
    col = np.empty((c, kh, kw, n, ho, wo))
    for i in range(n):
        v = sliding_window_view(xp[i], (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        col[:, :, :, i] = v.transpose(0, 3, 4, 1, 2)
    return col.reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding.

    Args:
        x: input feature map [N, Cin, H, W].
        w: filter bank [Cout, Cin, kh, kw].
        stride: positive step between output sites.
        padding: zero rows/cols added on every side before sliding.

    Returns:
        [N, Cout, H', W'] with H' = (H + 2*padding - kh) // stride + 1.
    """
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise ParameterError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ParameterError(f"conv2d: padding must be >= 0, got {padding}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input/weight, got {x.data.shape}, {w.data.shape}")
    n, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d: input channels {cin} != weight channels {cin_w}")
    if kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(
            f"conv2d: kernel ({kh},{kw}) larger than padded input "
            f"({h + 2 * padding},{wd + 2 * padding})"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    col = _im2col(xp, kh, kw, stride, ho, wo)
    w2d = w.data.reshape(cout, cin * kh * kw)
    out_data = np.ascontiguousarray(
        (w2d @ col).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    )

    def backward(g):
        if w.requires_grad:
            # one big-K GEMM beats per-sample slices; costs one transposed copy
            gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
            _accumulate(w, (gt @ col.T).reshape(cout, cin, kh, kw))
        if x.requires_grad:
            _accumulate(x, _conv2d_input_grad(g, w.data, stride, padding, (n, cin, h, wd)))

    return Tensor._from_op(out_data, (x, w), backward)


def _conv2d_input_grad(g, wdata, stride, padding, x_shape):
    """Gradient w.r.t. the conv input: full correlation of the (dilated)
    output gradient with the 180-degree-rotated, channel-swapped filters."""
    n, cin, h, wd = x_shape
    cout, _, kh, kw = wdata.shape
    ho, wo = g.shape[2], g.shape[3]
    if stride > 1:
        gd = np.zeros((n, cout, (ho - 1) * stride + 1, (wo - 1) * stride + 1))
        gd[:, :, ::stride, ::stride] = g
    else:
        gd = g
    gp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    hf = gp.shape[2] - kh + 1
    wf = gp.shape[3] - kw + 1
    col = _im2col(gp, kh, kw, 1, hf, wf)
    wrot = np.ascontiguousarray(
        wdata[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    ).reshape(cin, cout * kh * kw)
    full = (wrot @ col).reshape(cin, n, hf, wf)
    # full correlation covers the padded extent minus any rows/cols the
    # strided forward pass never reached; embed, then strip the padding
    gxp = np.zeros((n, cin, h + 2 * padding, wd + 2 * padding))
    gxp[:, :, :hf, :wf] = full.transpose(1, 0, 2, 3)
    if padding:
        return np.ascontiguousarray(
            gxp[:, :, padding : padding + h, padding : padding + wd]
        )
    return gxp


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared hyperparameters."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 < self.beta1 < 1.0:
            raise ParameterError(f"beta1 must be in (0,1), got {self.beta1}")
        if not 0.0 < self.beta2 < 1.0:
            raise ParameterError(f"beta2 must be in (0,1), got {self.beta2}")
        if self.epsilon <= 0.0:
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")
        if self.learning_rate <= 0.0:
            raise ParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.step_count < 0:
            raise ParameterError(f"step_count must be >= 0, got {self.step_count}")


class Adam:
    """Bias-corrected Adam over an ordered list of parameter tensors."""

    def __init__(self, params: list, learning_rate: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(
            learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon,
            first_moment=[np.zeros_like(p.data) for p in self.params],
            second_moment=[np.zeros_like(p.data) for p in self.params],
        )

    def step(self):
        """Apply one update from the accumulated gradients, then clear them."""
        st = self.state
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise StateError(f"adam step: parameter {i} has no gradient")
            if p.grad.shape != p.data.shape:
                raise StateError(
                    f"adam step: gradient shape {p.grad.shape} != {p.data.shape}"
                )
        st.step_count += 1
        t = st.step_count
        c1 = 1.0 - st.beta1 ** t
        c2 = 1.0 - st.beta2 ** t
        for p, m, v in zip(self.params, st.first_moment, st.second_moment):
            g = p.grad
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * (g * g)
            p.data -= st.learning_rate * (m / c1) / (np.sqrt(v / c2) + st.epsilon)
            p.grad = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def grad_check(f, x: Tensor, h: float = 1e-4) -> float:
    """Compare the analytic gradient of a scalar function against central
    finite differences.

    Args:
        f: callable mapping a Tensor to a scalar Tensor.
        x: evaluation point; perturbed one element at a time.
        h: finite-difference step.

    Returns:
        max over elements of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ParameterError(f"grad_check: f must be scalar-valued, got {out.data.shape}")
    out.backward()
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(probe.data)

    numeric = np.zeros_like(probe.data)
    flat = probe.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(probe).item()
            flat[i] = orig - h
            lo = f(probe).item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
