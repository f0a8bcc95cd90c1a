"""Reverse-mode automatic differentiation with the 2-D layer primitives used
by the segmentation networks, plus the Adam optimizer.

Tensors hold float32 data in normal operation; every op also runs in float64
so numerical checks can be done at tight tolerances.  Spatial stride is fixed
at 1 throughout: all resolution changes go through the explicit pooling and
upsampling ops.  Convolutions are evaluated as window-gathers contracted by
BLAS (im2col style); the backward passes reuse the same contraction with
flipped/transposed kernels, so no python-level loops touch pixel data.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "BatchNormState",
    "Adam",
    "conv2d",
    "transposed_conv2d",
    "maxpool2x",
    "upsample_nearest2x",
    "batchnorm2d",
    "relu",
    "sigmoid",
    "dropout",
]


class Tensor:
    """A dense n-d array plus an optional gradient buffer and the graph edge
    back to whatever produced it.

    ``backward()`` may be called once per forward pass; the graph is consumed
    by the traversal and a second call without rebuilding it is an error.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop", "_done")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backprop=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        # params get a zero grad buffer up front so an unused parameter
        # reads as exactly-zero gradient after backward()
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = tuple(_parents)
        self._backprop = _backprop
        self._done = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- graph plumbing -----------------------------------------------------

    def _needs_backprop(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad[...] = 0

    def sum(self) -> "Tensor":
        """Sum of all elements; handy sink for building scalar losses."""
        out_parent = self

        def backprop(g):
            out_parent._accumulate(np.full_like(out_parent.data, g.item()))

        needs = self._needs_backprop()
        return Tensor(
            np.asarray(self.data.sum(), dtype=self.dtype),
            _parents=(self,) if needs else (),
            _backprop=(lambda g: backprop(g)) if needs else None,
        )

    def backward(self) -> None:
        """Run reverse-mode accumulation from this scalar.

        The traversal marks every visited node as consumed; calling backward
        a second time on the same graph raises instead of silently doubling
        gradients.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.data.shape}")
        if self._done:
            raise RuntimeError(
                "backward() was already run on this graph; rerun the forward pass first"
            )

        # iterative topological order (graphs can be long chains)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            node._done = True
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)


# -- shared conv machinery ----------------------------------------------------


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _corr2d(x: np.ndarray, w: np.ndarray, ph: int, pw: int) -> tuple[np.ndarray, np.ndarray]:
    """Valid cross-correlation of padded x (N,C,H,W) with w (O,C,kh,kw).

    Returns (result (N,O,Ho,Wo), window view) so backward passes can reuse
    the gathered windows without recomputing them.
    """
    xp = _pad_hw(x, ph, pw)
    win = sliding_window_view(xp, w.shape[2:], axis=(2, 3))  # (N,C,Ho,Wo,kh,kw)
    out = np.tensordot(win, w, axes=[(1, 4, 5), (1, 2, 3)])  # (N,Ho,Wo,O)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), win


def _flip_swap(w: np.ndarray) -> np.ndarray:
    # (A,B,kh,kw) -> (B,A,kh,kw) with both spatial axes reversed
    return np.ascontiguousarray(w.swapaxes(0, 1)[:, :, ::-1, ::-1])


def _resolve_padding(padding, kh: int, kw: int) -> tuple[int, int]:
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"'same' padding needs odd kernels, got {kh}x{kw}")
        return (kh - 1) // 2, (kw - 1) // 2
    if isinstance(padding, tuple):
        ph, pw = padding
    else:
        ph = pw = padding
    if ph < 0 or pw < 0 or ph != int(ph) or pw != int(pw):
        raise ValueError(f"padding must be non-negative integers, got {padding}")
    return int(ph), int(pw)


def _check_image(x: Tensor, name: str = "input") -> None:
    if not isinstance(x, Tensor):
        raise TypeError(f"{name} must be a Tensor")
    if x.data.ndim != 4:
        raise ValueError(f"{name} must be NCHW, got shape {x.data.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None, padding=0) -> Tensor:
    """Stride-1 2-D convolution (cross-correlation) of NCHW input with an
    OIHW kernel and per-output-channel bias.  Output is H+2p-kh+1 square."""
    _check_image(x)
    _check_image(kernel, "kernel")
    N, C, H, W = x.data.shape
    O, I, kh, kw = kernel.data.shape
    if I != C:
        raise ValueError(f"kernel expects {I} input channels, input has {C}")
    if bias is not None and bias.data.shape != (O,):
        raise ValueError(f"bias must have shape ({O},), got {bias.data.shape}")
    ph, pw = _resolve_padding(padding, kh, kw)
    if H + 2 * ph - kh + 1 < 1 or W + 2 * pw - kw + 1 < 1:
        raise ValueError(
            f"conv output would be empty: input {H}x{W}, kernel {kh}x{kw}, padding {(ph, pw)}"
        )

    out, win = _corr2d(x.data, kernel.data, ph, pw)
    if bias is not None:
        out += bias.data[None, :, None, None]

    need_x = x._needs_backprop()
    need_k = kernel._needs_backprop()
    need_b = bias is not None and bias._needs_backprop()
    parents = [p for p, need in ((x, need_x), (kernel, need_k), (bias, need_b)) if need]
    if not parents:
        return Tensor(out)

    kdata = kernel.data

    def backprop(g):
        if need_k:
            kernel._accumulate(np.tensordot(g, win, axes=[(0, 2, 3), (0, 2, 3)]))
        if need_b:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if need_x:
            full, _ = _corr2d(g, _flip_swap(kdata), kh - 1, kw - 1)
            x._accumulate(full[:, :, ph : ph + H, pw : pw + W])

    return Tensor(out, _parents=parents, _backprop=backprop)


def transposed_conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None, padding=0) -> Tensor:
    """Stride-1 transposed convolution: the linear adjoint of conv2d.

    Kernel layout is IOHW (input channels first); output spatial size is
    H - 1 + kh - 2p.  Feeding conv2d's output-gradient through this op with
    the same kernel array reproduces conv2d's input-gradient exactly.
    """
    _check_image(x)
    _check_image(kernel, "kernel")
    N, C, H, W = x.data.shape
    I, O, kh, kw = kernel.data.shape
    if I != C:
        raise ValueError(f"kernel expects {I} input channels, input has {C}")
    if bias is not None and bias.data.shape != (O,):
        raise ValueError(f"bias must have shape ({O},), got {bias.data.shape}")
    ph, pw = _resolve_padding(padding, kh, kw)
    oh, ow = H - 1 + kh - 2 * ph, W - 1 + kw - 2 * pw
    if oh < 1 or ow < 1:
        raise ValueError(
            f"transposed conv output would be empty: input {H}x{W}, "
            f"kernel {kh}x{kw}, padding {(ph, pw)}"
        )

    # forward == full correlation with the flipped/swapped kernel, then crop
    full, win = _corr2d(x.data, _flip_swap(kernel.data), kh - 1, kw - 1)
    out = np.ascontiguousarray(full[:, :, ph : ph + oh, pw : pw + ow])
    if bias is not None:
        out += bias.data[None, :, None, None]

    need_x = x._needs_backprop()
    need_k = kernel._needs_backprop()
    need_b = bias is not None and bias._needs_backprop()
    parents = [p for p, need in ((x, need_x), (kernel, need_k), (bias, need_b)) if need]
    if not parents:
        return Tensor(out)

    kdata = kernel.data

    def backprop(g):
        if need_b:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if need_x:
            # adjoint of the forward map collapses back to a plain correlation
            dx, _ = _corr2d(g, kdata, ph, pw)
            x._accumulate(dx)
        if need_k:
            gp = _pad_hw(g, ph, pw)  # grad on the uncropped full output
            dflip = np.tensordot(gp, win, axes=[(0, 2, 3), (0, 2, 3)])  # (O,I,kh,kw)
            kernel._accumulate(_flip_swap(dflip))

    return Tensor(out, _parents=parents, _backprop=backprop)


def maxpool2x(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.  Ties route the gradient to the first
    maximal element in row-major window order."""
    _check_image(x)
    N, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2x needs even spatial dims, got {H}x{W}")
    Ho, Wo = H // 2, W // 2
    win = (
        x.data.reshape(N, C, Ho, 2, Wo, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(N, C, Ho, Wo, 4)
    )
    idx = win.argmax(axis=4)  # argmax takes the first maximum
    out = np.take_along_axis(win, idx[..., None], axis=4)[..., 0]

    if not x._needs_backprop():
        return Tensor(out)

    def backprop(g):
        scatter = np.zeros((N, C, Ho, Wo, 4), dtype=g.dtype)
        np.put_along_axis(scatter, idx[..., None], g[..., None], axis=4)
        dx = (
            scatter.reshape(N, C, Ho, Wo, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(N, C, H, W)
        )
        x._accumulate(dx)

    return Tensor(out, _parents=(x,), _backprop=backprop)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling; gradient sums each 2x2 block."""
    _check_image(x)
    N, C, H, W = x.data.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    if not x._needs_backprop():
        return Tensor(out)

    def backprop(g):
        x._accumulate(g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)))

    return Tensor(out, _parents=(x,), _backprop=backprop)


class BatchNormState:
    """Running statistics for one batchnorm layer.  Kept outside the graph;
    updated in place during training-mode forwards."""

    __slots__ = ("running_mean", "running_var", "momentum", "eps")

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum = momentum
        self.eps = eps


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool) -> Tensor:
    """Per-channel batch normalization over (batch, H, W).

    Training mode normalizes by batch statistics and folds them into the
    running averages (``running = m*running + (1-m)*batch``); eval mode
    normalizes by the running statistics.  Differentiable w.r.t. input,
    gamma and beta in both modes.
    """
    _check_image(x)
    N, C, H, W = x.data.shape
    if N * H * W == 0:
        raise ValueError("batchnorm2d got an empty batch")
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ValueError(
            f"gamma/beta must have shape ({C},), got {gamma.data.shape}/{beta.data.shape}"
        )

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean = (m * state.running_mean + (1 - m) * mean).astype(np.float32)
        state.running_var = (m * state.running_var + (1 - m) * var).astype(np.float32)
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    need_x = x._needs_backprop()
    need_g = gamma._needs_backprop()
    need_b = beta._needs_backprop()
    parents = [p for p, need in ((x, need_x), (gamma, need_g), (beta, need_b)) if need]
    if not parents:
        return Tensor(out)

    def backprop(g):
        if need_g:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if need_b:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if need_x:
            gx = g * gamma.data[None, :, None, None]  # d loss / d xhat
            if training:
                # batch statistics are functions of x: full normalization grad
                mg = gx.mean(axis=(0, 2, 3))
                mgx = (gx * xhat).mean(axis=(0, 2, 3))
                dx = inv_std[None, :, None, None] * (
                    gx - mg[None, :, None, None] - xhat * mgx[None, :, None, None]
                )
            else:
                dx = gx * inv_std[None, :, None, None]
            x._accumulate(dx)

    return Tensor(out, _parents=parents, _backprop=backprop)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    if not x._needs_backprop():
        return Tensor(out)

    mask = x.data > 0

    def backprop(g):
        x._accumulate(g * mask)

    return Tensor(out, _parents=(x,), _backprop=backprop)


def sigmoid(x: Tensor) -> Tensor:
    # exp of a non-positive argument only, so large |x| cannot overflow
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    if not x._needs_backprop():
        return Tensor(out)

    def backprop(g):
        x._accumulate(g * out * (1.0 - out))

    return Tensor(out, _parents=(x,), _backprop=backprop)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: surviving activations are scaled by 1/(1-p) during
    training so eval mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return Tensor(x.data, _parents=(x,) if x._needs_backprop() else (),
                      _backprop=(lambda g: x._accumulate(g)) if x._needs_backprop() else None)
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")

    scale = (rng.random(x.data.shape) >= p).astype(x.dtype) / (1.0 - p)
    out = x.data * scale
    if not x._needs_backprop():
        return Tensor(out)

    def backprop(g):
        x._accumulate(g * scale)

    return Tensor(out, _parents=(x,), _backprop=backprop)


class Adam:
    """Adam with bias correction.  Holds first/second moment buffers per
    parameter; ``step()`` applies one update from the populated gradients."""

    def __init__(self, params: list[Tensor], learning_rate: float = 0.003,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        if not params:
            raise ValueError("Adam needs at least one parameter")
        for p in params:
            if not p.requires_grad:
                raise ValueError("all Adam parameters must require gradients")
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.first_moment = [np.zeros_like(p.data) for p in params]
        self.second_moment = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p, m, v in zip(self.params, self.first_moment, self.second_moment):
            g = p.grad
            if g is None:
                raise ValueError("step() before any backward(): gradient buffer missing")
            if g.shape != m.shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match optimizer state {m.shape}"
                )
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)
