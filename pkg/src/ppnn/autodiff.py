"""A small reverse-mode autodiff engine with just the ops the networks need.

Arrays are numpy; image tensors are ``(N, C, H, W)`` (a bare ``(C, H, W)`` is
accepted by the image ops and treated as ``N = 1``). Each op records its
parents and a closure that pushes the upstream gradient into them;
:meth:`Tensor.backward` walks the recorded graph in reverse topological order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        """Wrap an op result. ``backward(g)`` returns one gradient (or None) per parent."""
        out = cls(data)
        live = [p for p in parents if p.requires_grad]
        if live:
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {self.data.shape} in {self.op}")
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tensor requiring grad."""
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar loss")
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that was not produced by a differentiable forward pass")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for p, g in zip(node._parents, grads):
                if g is not None and p.requires_grad:
                    p._accumulate(np.asarray(g, dtype=p.data.dtype))

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __mul__(self, a: float):
        return scale(self, a)

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return sum_all(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise / structural ops ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def scale(x: Tensor, a: float) -> Tensor:
    return Tensor.from_op(x.data * a, (x,), lambda g: (g * a,), "scale")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor.from_op(np.asarray(x.data.sum()), (x,),
                          lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient 0 at 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.data.dtype), (x,),
                          lambda g: (g * mask,), "relu")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[-3] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[..., lo:hi, :, :] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=-3), tensors, backward, "concat")


def pixel_shuffle_array(x: np.ndarray, r: int) -> np.ndarray:
    *lead, c, h, w = x.shape
    if c % (r * r):
        raise ValueError(f"channel count {c} not divisible by r^2 = {r * r}")
    c_out = c // (r * r)
    y = x.reshape(*lead, c_out, r, r, h, w)
    nl = len(lead)
    perm = tuple(range(nl)) + tuple(nl + k for k in (0, 3, 1, 4, 2))
    return y.transpose(perm).reshape(*lead, c_out, h * r, w * r)


def pixel_unshuffle_array(y: np.ndarray, r: int) -> np.ndarray:
    *lead, c, hr, wr = y.shape
    if hr % r or wr % r:
        raise ValueError("spatial size not divisible by r")
    h, w = hr // r, wr // r
    x = y.reshape(*lead, c, h, r, w, r)
    nl = len(lead)
    perm = tuple(range(nl)) + tuple(nl + k for k in (0, 2, 4, 1, 3))
    return x.transpose(perm).reshape(*lead, c * r * r, h, w)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """``out[c, r*h + a, r*w + b] = in[c*r*r + a*r + b, h, w]``."""
    return Tensor.from_op(pixel_shuffle_array(x.data, r), (x,),
                          lambda g: (pixel_unshuffle_array(g, r),), "pixel_shuffle")


def rank1_param_map(scalars, col: Tensor, row: Tensor) -> Tensor:
    """``scalars[n] * (col @ row)`` as a ``(N, 1, ny, nx)`` channel.

    ``scalars`` is ``(N,)`` (a float gives ``N = 1``), ``col`` is ``(ny, 1)``
    and ``row`` is ``(1, nx)``.
    """
    if isinstance(scalars, Tensor):
        s = scalars
    else:
        s = Tensor(np.atleast_1d(np.asarray(scalars, dtype=col.data.dtype)))
    if s.ndim != 1:
        raise ValueError("scalars must be a 1-D batch of parameter values")
    outer = col.data @ row.data
    data = s.data[:, None, None, None] * outer[None, None]

    def backward(g):
        g2 = g[:, 0]  # (N, ny, nx)
        gs = np.einsum("nij,ij->n", g2, outer)
        weighted = np.einsum("n,nij->ij", s.data, g2)
        return gs, weighted @ row.data.T, col.data.T @ weighted

    return Tensor.from_op(data, (s, col, row), backward, "rank1_param_map")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each sample jointly over (C, H, W), then ``gain * xhat + bias``.

    ``gain`` and ``bias`` broadcast against ``(C, H, W)``, e.g. ``(C, 1, 1)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    axes = (-3, -2, -1)
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + bias.data
    gshape, bshape = gain.shape, bias.shape

    def backward(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        return dx, _unbroadcast(g * xhat, gshape), _unbroadcast(g, bshape)

    return Tensor.from_op(out, (x, gain, bias), backward, "layer_norm")


def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return Tensor.from_op(np.asarray(np.mean(diff * diff)), (pred, target),
                          lambda g: (g * 2.0 * diff / n, -g * 2.0 * diff / n), "mse")


# --- convolution ------------------------------------------------------------------------

def _fold_wrap(a: np.ndarray, axis: int, before: int, after: int) -> np.ndarray:
    """Adjoint of periodic padding along ``axis``."""
    n = a.shape[axis] - before - after
    idx = [slice(None)] * a.ndim

    def sl(lo, hi):
        idx[axis] = slice(lo, hi)
        return tuple(idx)

    out = a[sl(before, before + n)].copy()
    if before:
        out[sl(n - before, n)] += a[sl(0, before)]
    if after:
        out[sl(0, after)] += a[sl(before + n, before + n + after)]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int | str = 0) -> Tensor:
    """2D cross-correlation. ``padding`` is a zero-pad width or ``"periodic"``.

    Periodic padding keeps the spatial size and needs ``stride == 1``.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, c, h, wd = xd.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"input has {c} channels, kernel expects {c2}")
    if padding == "periodic":
        if stride != 1:
            raise ValueError("periodic padding requires stride 1")
        pads = ((kh - 1) // 2, kh - 1 - (kh - 1) // 2, (kw - 1) // 2, kw - 1 - (kw - 1) // 2)
        xp = np.pad(xd, ((0, 0), (0, 0), pads[:2], pads[2:]), mode="wrap")
    else:
        p = int(padding)
        pads = (p, p, p, p)
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    hp, wp = xp.shape[2:]
    if hp < kh or wp < kw:
        raise ValueError("kernel larger than padded input")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ValueError(f"stride {stride} does not tile padded input {hp}x{wp} with kernel {kh}x{kw}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    # im2col in channels-last order: every slice copy is a contiguous run of c values
    xh = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xh[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    wk = w.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o)
    out = cols @ wk
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        g2 = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(-1, o)
        dw = (cols.T @ g2).reshape(kh, kw, c, o).transpose(3, 2, 0, 1)
        db = g2.sum(axis=0) if b is not None else None
        dx = None
        if x.requires_grad:
            # one matmul for all taps, then col2im as kh*kw strided adds
            dcols = (g2 @ wk.T).reshape(n, ho, wo, kh, kw, c)
            dcols = np.ascontiguousarray(dcols.transpose(3, 4, 0, 5, 1, 2))
            dxp = np.zeros((n, c, hp, wp), dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[i, j]
            if padding == "periodic":
                dx = _fold_wrap(_fold_wrap(dxp, 2, pads[0], pads[1]), 3, pads[2], pads[3])
            else:
                dx = np.ascontiguousarray(dxp[:, :, pads[0]:hp - pads[1], pads[2]:wp - pads[3]])
            if squeeze:
                dx = dx[0]
        return dx, np.ascontiguousarray(dw), db

    parents = (x, w) if b is None else (x, w, b)
    return Tensor.from_op(out, parents, backward, "conv2d")


# --- optimisation -------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, name: str, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Bias-corrected Adam update of one parameter; ``state.t`` must already be incremented."""
    if state.t < 1:
        raise ValueError("increment state.t before calling adam_step")
    m = state.m.get(name)
    v = state.v.get(name)
    if m is None:
        m = np.zeros_like(param)
        v = np.zeros_like(param)
    m = state.beta1 * m + (1 - state.beta1) * grad
    v = state.beta2 * v + (1 - state.beta2) * grad * grad
    state.m[name], state.v[name] = m, v
    mhat = m / (1 - state.beta1 ** state.t)
    vhat = v / (1 - state.beta2 ** state.t)
    return (param - state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(param.dtype)


class Adam:
    """Adam over a name -> Tensor mapping, updating ``.data`` in place order-deterministically."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr, beta1, beta2, eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.state.t += 1
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            p.data = adam_step(self.state, name, p.data, p.grad)


# --- gradient checking -------------------------------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_error: float
    per_input: list[float]
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= self.tolerance


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], tolerance: float = 1e-5,
              h: float = 1e-6, seed: int = 0, max_coords: int | None = None,
              wrt: Sequence[int] | None = None) -> GradcheckReport:
    """Compare backprop gradients of ``fn`` against central differences in float64.

    Non-scalar outputs are reduced with a fixed random projection. The error for
    each input is ``max|analytic - numeric| / max|numeric|``. ``max_coords``
    limits how many randomly chosen coordinates per input get perturbed.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    proj = None

    def loss_of(arrs, track):
        nonlocal proj
        ts = [Tensor(a, requires_grad=track and k in wrt) for k, a in enumerate(arrs)]
        out = fn(*ts)
        if out.data.size != 1:
            if proj is None:
                proj = rng.standard_normal(out.shape)
            out = sum_all(Tensor.from_op(out.data * proj, (out,), lambda g: (g * proj,), "proj"))
        return out, ts

    out, ts = loss_of(arrays, True)
    out.backward()
    errors = []
    for k in wrt:
        analytic = ts[k].grad if ts[k].grad is not None else np.zeros_like(arrays[k])
        flat = arrays[k].reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, max_coords, replace=False)
        num = np.zeros(len(coords))
        for n, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_of(arrays, False)[0].data)
            flat[i] = orig - h
            fm = float(loss_of(arrays, False)[0].data)
            flat[i] = orig
            num[n] = (fp - fm) / (2 * h)
        ana = analytic.reshape(-1)[coords]
        scale_ = max(np.max(np.abs(num)), 1e-12)
        errors.append(float(np.max(np.abs(ana - num)) / scale_))
    return GradcheckReport(max(errors) if errors else 0.0, errors, tolerance)
