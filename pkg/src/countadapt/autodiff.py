"""Reverse-mode automatic differentiation on numpy arrays.

Provides exactly the differentiable operations the density estimator, the
domain discriminator, and their losses need: 2-d convolution, max pooling,
nearest-neighbor upsampling, channel concatenation, leaky ReLU, sigmoid,
elementwise arithmetic, sums, and MSE. Each forward op records a backward
rule on a per-graph tape; ``backward()`` replays the tape in reverse
construction order and accumulates gradients into every reachable tensor
that requires them.

Training runs in float32; gradient checking builds float64 tensors so the
central-difference comparison has enough headroom.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, UsageError

DEFAULT_DTYPE = np.float32

_node_counter = itertools.count()  # next() is atomic under the GIL
_grad_mode = threading.local()  # per-thread so concurrent graphs stay independent


def _grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


class no_grad:
    """Context manager that suspends graph recording (forward-only passes)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _grad_mode.enabled = False

    def __exit__(self, *exc):
        _grad_mode.enabled = self._prev
        return False


class _Node:
    """One tape entry: the producing op's inputs and its backward rule."""

    __slots__ = ("inputs", "out", "grad_fn", "seq")

    def __init__(self, inputs, out, grad_fn):
        self.inputs = inputs
        self.out = out
        self.grad_fn = grad_fn
        self.seq = next(_node_counter)


class Tensor:
    """N-d float array with an optional gradient buffer and graph node.

    ``data`` is always a numpy array (float32 by default, float64 when the
    caller passes one in or asks for it). ``grad`` stays ``None`` until a
    backward pass accumulates into it; tensors with ``requires_grad=False``
    never get one.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same data, cut off from any graph; never requires grad."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def sum(self) -> "Tensor":
        return sum_all(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) != 1 or not isinstance(shape[0], (tuple, list)) else shape[0])

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _record(out: Tensor, inputs: tuple, grad_fn):
    """Attach a tape node to ``out`` if grad mode is on and any input needs it."""
    if any(i.requires_grad for i in inputs) and _grad_enabled():
        out.requires_grad = True
        out.node = _Node(inputs, out, grad_fn)
    return out


def _as_tensor_pair(a, b):
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        return None
    if a.shape != b.shape:
        raise DimensionError(f"elementwise op needs matching shapes, got {a.shape} vs {b.shape}")
    return a, b


# ---------------------------------------------------------------------------
# elementwise / reduction ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _as_tensor_pair(a, b)
        out = Tensor(a.data + b.data)

        def grad_fn(g):
            _accumulate(a, g)
            _accumulate(b, g)

        return _record(out, (a, b), grad_fn)

    scalar = float(b)
    out = Tensor(a.data + np.asarray(scalar, dtype=a.data.dtype))

    def grad_fn(g):
        _accumulate(a, g)

    return _record(out, (a,), grad_fn)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _as_tensor_pair(a, b)
        out = Tensor(a.data * b.data)

        def grad_fn(g):
            _accumulate(a, g * b.data)
            _accumulate(b, g * a.data)

        return _record(out, (a, b), grad_fn)

    scalar = float(b)
    out = Tensor(a.data * np.asarray(scalar, dtype=a.data.dtype))

    def grad_fn(g):
        _accumulate(a, g * scalar)

    return _record(out, (a,), grad_fn)


def sum_all(t: Tensor) -> Tensor:
    """Sum over every element, yielding a scalar tensor."""
    out = Tensor(t.data.sum())

    def grad_fn(g):
        _accumulate(t, np.full(t.shape, g, dtype=t.data.dtype))

    return _record(out, (t,), grad_fn)


def sum_per_item(t: Tensor) -> Tensor:
    """Sum over all but the leading axis: (N, ...) -> (N,)."""
    if t.data.ndim < 2:
        raise DimensionError(f"sum_per_item needs at least 2 dims, got {t.shape}")
    n = t.shape[0]
    axes = tuple(range(1, t.data.ndim))
    out = Tensor(t.data.sum(axis=axes))

    def grad_fn(g):
        shape = (n,) + (1,) * (t.data.ndim - 1)
        _accumulate(t, np.broadcast_to(g.reshape(shape), t.shape).astype(t.data.dtype))

    return _record(out, (t,), grad_fn)


def reshape(t: Tensor, shape) -> Tensor:
    out = Tensor(t.data.reshape(shape))

    def grad_fn(g):
        _accumulate(t, g.reshape(t.shape))

    return _record(out, (t,), grad_fn)


def leaky_relu(t: Tensor, slope: float) -> Tensor:
    """x if x > 0 else slope*x; derivative at 0 is defined as slope."""
    if slope < 0:
        raise UsageError(f"leaky_relu slope must be >= 0, got {slope}")
    x = t.data
    out = Tensor(np.where(x > 0, x, x * np.asarray(slope, dtype=x.dtype)))

    def grad_fn(g):
        factor = np.where(x > 0, np.asarray(1.0, dtype=x.dtype), np.asarray(slope, dtype=x.dtype))
        _accumulate(t, g * factor)

    return _record(out, (t,), grad_fn)


def relu(t: Tensor) -> Tensor:
    return leaky_relu(t, 0.0)


def sigmoid(t: Tensor) -> Tensor:
    """Logistic function, computed branch-wise so large |x| cannot overflow."""
    x = t.data
    z = np.exp(-np.abs(x))
    out_data = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)
    out = Tensor(out_data)

    def grad_fn(g):
        _accumulate(t, g * out_data * (1.0 - out_data))

    return _record(out, (t,), grad_fn)


def log(t: Tensor) -> Tensor:
    out = Tensor(np.log(t.data))

    def grad_fn(g):
        _accumulate(t, g / t.data)

    return _record(out, (t,), grad_fn)


def clamp_min(t: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes wherever x >= floor."""
    x = t.data
    out = Tensor(np.maximum(x, np.asarray(floor, dtype=x.dtype)))

    def grad_fn(g):
        _accumulate(t, g * (x >= floor).astype(x.dtype))

    return _record(out, (t,), grad_fn)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of (pred - target)^2."""
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss needs matching shapes, got {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = Tensor((diff * diff).sum() / n)

    def grad_fn(g):
        scaled = (2.0 / n) * g * diff
        _accumulate(pred, scaled)
        _accumulate(target, -scaled)

    return _record(out, (pred, target), grad_fn)


# ---------------------------------------------------------------------------
# spatial ops (all operate on single images shaped (C, H, W))
# ---------------------------------------------------------------------------

def _conv_out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(inp: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with weight (C_out,C_in,k,k) and zero padding.

    Input is a single image (C_in,H,W) or a batch (N,C_in,H,W); the batch
    form runs the whole batch through one BLAS matmul, which is what makes
    training affordable. Implemented as im2col; the column matrix is kept
    for the weight gradient.
    """
    if weight.data.ndim != 4:
        raise DimensionError(f"conv2d weight must be (C_out,C_in,k,k), got {weight.shape}")
    batched = inp.data.ndim == 4
    if not batched and inp.data.ndim != 3:
        raise DimensionError(
            f"conv2d expects input (C,H,W) or (N,C,H,W), got {inp.shape}")
    n = inp.shape[0] if batched else 1
    c_in, h, w = inp.shape[-3:]
    c_out, c_in_w, kh, kw = weight.shape
    if c_in != c_in_w:
        raise DimensionError(
            f"conv2d channel mismatch: input shape {inp.shape} has {c_in} channels "
            f"but weight shape {weight.shape} expects {c_in_w}")
    if kh != kw:
        raise DimensionError(f"conv2d only supports square kernels, got {kh}x{kw}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    if stride < 1:
        raise DimensionError(f"conv2d stride must be >= 1, got {stride}")
    k = kh
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError(
            f"kernel {k}x{k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    h_out = _conv_out_size(h, k, stride, padding)
    w_out = _conv_out_size(w, k, stride, padding)
    cell = h_out * w_out

    x4 = inp.data if batched else inp.data[None]
    if padding:
        xp = np.pad(x4, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x4
    # (N, C_in, H', W', k, k) -> columns (C_in*k*k, N*h_out*w_out)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c_in * k * k, n * cell)
    w2 = weight.data.reshape(c_out, c_in * k * k)
    out4 = (w2 @ cols).reshape(c_out, n, h_out, w_out).transpose(1, 0, 2, 3)
    out4 = out4 + bias.data[None, :, None, None]
    out = Tensor(out4 if batched else out4[0])

    def grad_fn(g):
        g2 = np.ascontiguousarray((g if batched else g[None]).transpose(1, 0, 2, 3)
                                  ).reshape(c_out, n * cell)
        if bias.requires_grad:
            _accumulate(bias, g2.sum(axis=1))
        if weight.requires_grad:
            _accumulate(weight, (g2 @ cols.T).reshape(weight.shape))
        if inp.requires_grad:
            dcols = (w2.T @ g2).reshape(c_in, k, k, n, h_out, w_out)
            dxp = np.zeros((c_in, n, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, :, ki:ki + stride * h_out:stride,
                        kj:kj + stride * w_out:stride] += dcols[:, ki, kj]
            dx = dxp.transpose(1, 0, 2, 3)
            if padding:
                dx = dx[:, :, padding:padding + h, padding:padding + w]
            _accumulate(inp, dx if batched else dx[0])

    return _record(out, (inp, weight, bias), grad_fn)


def max_pool2d(inp: Tensor, k: int, stride: int) -> Tensor:
    """Max over k*k windows; gradient routes to the first max in row-major order.

    Accepts (C,H,W) or (N,C,H,W).
    """
    if inp.data.ndim not in (3, 4):
        raise DimensionError(f"max_pool2d expects (C,H,W) or (N,C,H,W), got {inp.shape}")
    batched = inp.data.ndim == 4
    h, w = inp.shape[-2:]
    if k > h or k > w:
        raise DimensionError(f"pool window {k}x{k} larger than input {h}x{w}")
    if k == stride and (h % stride or w % stride):
        raise DimensionError(
            f"max_pool2d with k == stride == {k} needs H, W divisible by {stride}, got {h}x{w}")
    h_out = (h - k) // stride + 1
    w_out = (w - k) // stride + 1
    x4 = inp.data if batched else inp.data[None]
    n, c = x4.shape[:2]
    win = sliding_window_view(x4, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, h_out, w_out, k * k)
    argmax = flat.argmax(axis=4)  # first occurrence on ties
    out4 = np.take_along_axis(flat, argmax[..., None], axis=4)[..., 0]
    out = Tensor(out4 if batched else out4[0])

    def grad_fn(g):
        ni, ci, oi, oj = np.indices((n, c, h_out, w_out))
        rows = oi * stride + argmax // k
        cols = oj * stride + argmax % k
        dx = np.zeros((n, c, h, w), dtype=g.dtype)
        np.add.at(dx, (ni, ci, rows, cols), g if batched else g[None])
        _accumulate(inp, dx if batched else dx[0])

    return _record(out, (inp,), grad_fn)


def upsample_nearest2x(inp: Tensor) -> Tensor:
    """Replicate every pixel into a 2x2 block; gradient sums each block.

    Accepts (C,H,W) or (N,C,H,W).
    """
    if inp.data.ndim not in (3, 4):
        raise DimensionError(f"upsample_nearest2x expects (C,H,W) or (N,C,H,W), got {inp.shape}")
    h, w = inp.shape[-2:]
    out = Tensor(np.repeat(np.repeat(inp.data, 2, axis=-2), 2, axis=-1))

    def grad_fn(g):
        _accumulate(inp, g.reshape(g.shape[:-2] + (h, 2, w, 2)).sum(axis=(-3, -1)))

    return _record(out, (inp,), grad_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack b's channels after a's; both must share all non-channel dimensions."""
    if (a.data.ndim not in (3, 4) or a.data.ndim != b.data.ndim
            or a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]):
        raise DimensionError(f"concat_channels needs matching spatial dims, got {a.shape} vs {b.shape}")
    c1 = a.shape[-3]
    out = Tensor(np.concatenate([a.data, b.data], axis=-3))

    def grad_fn(g):
        _accumulate(a, g[..., :c1, :, :])
        _accumulate(b, g[..., c1:, :, :])

    return _record(out, (a, b), grad_fn)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor):
    """Backpropagate from a scalar loss through its recorded graph.

    Gradients are accumulated (+=) into every reachable tensor with
    ``requires_grad``. The graph is spent afterwards: a second call on the
    same loss raises ``UsageError``. Two independent graphs over the same
    parameters sum their gradients, which is why optimizers zero grads.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            _accumulate(loss, np.ones((), dtype=loss.data.dtype))
            return
        raise UsageError("loss is not part of any recorded computation")
    if loss.node.grad_fn is None:
        raise UsageError("backward was already called on this graph")

    nodes = []
    seen = set()
    stack = [loss.node]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        for t in node.inputs:
            if t.node is not None and id(t.node) not in seen:
                stack.append(t.node)
    nodes.sort(key=lambda n: n.seq, reverse=True)

    loss.grad = np.ones(loss.shape, dtype=loss.data.dtype)
    for node in nodes:
        if node.grad_fn is None:
            raise UsageError("graph shares nodes with an already-consumed graph")
        g = node.out.grad
        if g is not None:
            node.grad_fn(g)
    for node in nodes:
        node.grad_fn = None
        node.inputs = ()


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

class ModelParams:
    """Named, ordered collection of trainable tensors plus Adam moment state.

    Iteration order is insertion order and is what checkpointing and the
    optimizer rely on for determinism.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, tensor: Tensor):
        if name in self._params:
            raise UsageError(f"duplicate parameter name '{name}'")
        tensor.requires_grad = True
        self._params[name] = tensor
        self._m[name] = np.zeros_like(tensor.data)
        self._v[name] = np.zeros_like(tensor.data)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    @property
    def n_scalars(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def set_requires_grad(self, flag: bool):
        for t in self._params.values():
            t.requires_grad = flag

    def moments(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return self._m[name], self._v[name]

    def set_moments(self, name: str, m: np.ndarray, v: np.ndarray):
        self._m[name] = m.astype(self._params[name].data.dtype)
        self._v[name] = v.astype(self._params[name].data.dtype)

    def snapshot(self) -> dict[str, np.ndarray]:
        """Deep copy of raw parameter arrays, for bit-exactness checks."""
        return {k: t.data.copy() for k, t in self._params.items()}


class frozen:
    """Context manager that stops gradients accumulating into ``params``.

    Gradients still flow *through* the frozen network to its inputs, which is
    what adversarial updates need. The requires_grad flag is consulted when
    gradients are accumulated, so the context must span the backward call,
    not just the forward pass.
    """

    def __init__(self, params: ModelParams):
        self.params = params

    def __enter__(self):
        self.params.set_requires_grad(False)
        return self.params

    def __exit__(self, *exc):
        self.params.set_requires_grad(True)
        return False


def adam_step(params: ModelParams, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update over all parameters; grads are zeroed after.

    Every parameter must have a populated gradient (a zero gradient is fine,
    a missing one is a caller bug and raises).
    """
    for name, t in params.items():
        if t.grad is None:
            raise UsageError(f"adam_step: parameter '{name}' has no gradient")
    params.step_count += 1
    step = params.step_count
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for name, t in params.items():
        g = t.grad
        m, v = params.moments(name)
        # in place with one scratch buffer; the moment tensors are large for
        # the discriminator and temporaries dominated the step cost otherwise
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        g *= g
        g *= 1.0 - beta2
        v += g
        denom = v * (1.0 / bc2)
        np.sqrt(denom, out=denom)
        denom += eps
        np.divide(m, denom, out=denom)
        denom *= lr / bc1
        t.data -= denom
        t.grad = None


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradcheckEntry:
    input_index: int
    n_checked: int
    max_rel_err: float


@dataclass
class GradcheckReport:
    entries: list[GradcheckEntry] = field(default_factory=list)
    tolerance: float = 1e-6

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def rand_tensor(shape, rng: np.random.Generator, lo: float = -1.0, hi: float = 1.0,
                requires_grad: bool = True) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape).astype(np.float64), requires_grad=requires_grad)


def perturb_params(params: "ModelParams", seed: int, lo: float = 0.02, hi: float = 0.12):
    """Nudge every parameter off its init point before a model-level gradcheck.

    Zero-initialized biases put ReLU pre-activations exactly on the kink,
    where central differences and the subgradient legitimately disagree;
    a signed random offset moves the evaluation point somewhere smooth.
    """
    rng = np.random.default_rng(seed)
    for _, t in params.items():
        offset = rng.uniform(lo, hi, size=t.shape) * rng.choice([-1.0, 1.0], size=t.shape)
        t.data += offset.astype(t.data.dtype)


def gradcheck(fn, inputs, tolerance: float = 1e-6, step: float = 1e-5,
              seed: int = 0, max_coords: int | None = None) -> GradcheckReport:
    """Compare analytic gradients of ``fn(*inputs)`` against central differences.

    ``inputs`` may be Tensors (must be float64) or shape tuples, which are
    filled with seeded uniform(-1, 1) float64 values. The output of ``fn`` is
    projected onto a fixed random direction so every output element
    influences the checked scalar. ``max_coords`` caps how many coordinates
    per input are perturbed (seeded subsample), which keeps large parameter
    tensors tractable; None checks every coordinate.

    Failures are reported in the returned ``GradcheckReport``, never raised.
    The relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1).
    """
    rng = np.random.default_rng(seed)
    tensors = []
    for x in inputs:
        if isinstance(x, Tensor):
            if x.data.dtype != np.float64:
                raise UsageError("gradcheck requires float64 tensors")
            tensors.append(x)
        else:
            tensors.append(rand_tensor(tuple(x), rng))

    out = fn(*tensors)
    proj = rng.standard_normal(out.shape)

    def objective():
        with no_grad():
            val = fn(*tensors)
        return float((val.data * proj).sum())

    loss = sum_all(mul(out, Tensor(proj, dtype=np.float64)))
    for t in tensors:
        t.grad = None
    backward(loss)

    report = GradcheckReport(tolerance=tolerance)
    for idx, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        else:
            coords = np.arange(n)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            f_plus = objective()
            flat[c] = orig - step
            f_minus = objective()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic.reshape(-1)[c])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, rel)
        report.entries.append(GradcheckEntry(idx, len(coords), worst))
    return report
