"""Hand-written tensor layers for the BFS network.

Tensors are float64 numpy arrays with logical axes ``(freq, time, channel,
batch)``.  Layers compute on a channel-last ``(batch, freq, time, channel)``
view, and every op returns ``out.transpose(1, 2, 3, 0)`` of a C-contiguous
channel-last buffer, so chaining layers never copies just to reorder axes.
Serialized tensors are always written in C order of the logical shape.

Every forward returns ``(output, cache)``; the matching backward consumes the
cache and returns the input gradient (plus parameter gradients for layers
that have parameters).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Tuple

import numpy as np
from scipy.linalg import blas

Array = np.ndarray

TILE_ROWS = 2048
SHIFT_MIN_CHANNELS = 16

DEBUG_FINITE = False


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def _check_finite(name, *arrays):
    if DEBUG_FINITE:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise NumericError(f"non-finite values after {name}")


def to_channel_last(x: Array) -> Array:
    """(freq, time, channel, batch) -> (batch, freq, time, channel) view."""
    return x.transpose(3, 0, 1, 2)


def from_channel_last(x: Array) -> Array:
    return x.transpose(1, 2, 3, 0)


def same_padding(size: int, kernel: int, stride: int) -> Tuple[int, int]:
    """Zero padding (low, high) giving an output extent of ceil(size / stride)."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    return (size - kernel) // stride + 1


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvLayer:
    w: Array                       # (kh, kw, c_in, c_out)
    b: Array                       # (c_out,)
    stride: Tuple[int, int] = (1, 1)
    padding: str = "same"

    def __post_init__(self):
        # float32 is kept for folded inference kernels; everything else becomes float64
        self.w = np.asarray(self.w)
        if self.w.dtype != np.float32:
            self.w = self.w.astype(np.float64)
        self.b = np.asarray(self.b, dtype=self.w.dtype)
        if self.w.ndim != 4 or self.b.shape != (self.w.shape[3],):
            raise ShapeError(f"bad conv parameter shapes {self.w.shape}, {self.b.shape}")
        if min(self.w.shape[:2]) < 1 or min(self.stride) < 1:
            raise ShapeError("kernel and stride extents must be >= 1")
        if self.padding not in ("same", "valid"):
            raise ShapeError(f"unknown padding {self.padding!r}")
        self.stride = tuple(int(s) for s in self.stride)

    @property
    def kernel(self):
        return self.w.shape[:2]

    def output_shape(self, h: int, w: int) -> Tuple[int, int]:
        (kh, kw), (sh, sw) = self.kernel, self.stride
        return (conv_output_size(h, kh, sh, self.padding),
                conv_output_size(w, kw, sw, self.padding))


def _pads(layer: ConvLayer, h: int, w: int):
    if layer.padding == "valid":
        return (0, 0), (0, 0)
    (kh, kw), (sh, sw) = layer.kernel, layer.stride
    return same_padding(h, kh, sh), same_padding(w, kw, sw)


def _im2col(xp: Array, kh, kw, sh, sw, ho, wo) -> Array:
    """Patches of a padded channel-last array as (batch*ho*wo, kh*kw*c)."""
    bsz, c = xp.shape[0], xp.shape[3]
    cols = np.empty((bsz, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :]
    return cols.reshape(bsz * ho * wo, kh * kw * c)


def _shift_offsets(kh, kw, wp):
    return [(i, j, i * wp + j) for i in range(kh) for j in range(kw)]


def _gemm(dtype):
    return blas.sgemm if dtype == np.float32 else blas.dgemm


def _shifted_taps(src: Array, taps, dst: Array, m: int, first_overwrites: bool):
    """``dst[r] (+)= sum over taps (s, mat) of src[r + s] @ mat`` for r < m.

    Runs in row tiles through BLAS gemm with beta=1 so partial sums stay in
    cache and no per-tap temporaries are allocated.  ``src`` and ``dst`` must
    be C-contiguous 2-D arrays; the transposed views handed to BLAS are then
    Fortran-ordered and are updated in place.
    """
    gemm = _gemm(dst.dtype)
    src_t, dst_t = src.T, dst.T
    mats_t = [(s, np.asarray(mat.T, order="F")) for s, mat in taps]
    for r0 in range(0, m, TILE_ROWS):
        r1 = min(r0 + TILE_ROWS, m)
        for k, (s, mat_t) in enumerate(mats_t):
            beta = 0.0 if (k == 0 and first_overwrites) else 1.0
            gemm(1.0, mat_t, src_t[:, s + r0:s + r1], beta=beta, c=dst_t[:, r0:r1], overwrite_c=1)


def _shifted_weight_grads(src: Array, g: Array, offsets, grad_w: Array, m: int):
    """``grad_w[i, j] = src[s:s + m].T @ g[:m]`` for every tap, tile by tile."""
    gemm = _gemm(g.dtype)
    for r0 in range(0, m, TILE_ROWS):
        r1 = min(r0 + TILE_ROWS, m)
        g_t = g[r0:r1].T
        for i, j, s in offsets:
            # grad_w[i, j].T (F-ordered) += g_tile.T @ src_tile
            gemm(1.0, g_t, src[s + r0:s + r1].T, beta=0.0 if r0 == 0 else 1.0,
                 c=grad_w[i, j].T, trans_b=1, overwrite_c=1)


def conv2d_forward(x: Array, layer: ConvLayer):
    """Cross-correlation of ``x`` with the layer kernel, plus bias.

    Stride-1 kernels avoid an im2col buffer: on the flattened padded input,
    kernel tap (i, j) is a constant row shift of ``i * Wp + j``, so each tap
    is one GEMM over a contiguous slice.  Rows that straddle an image edge
    land outside the ``ho x wo`` window and are discarded.
    """
    if x.ndim != 4 or x.shape[2] != layer.w.shape[2]:
        raise ShapeError(f"input {x.shape} does not match kernel {layer.w.shape}")
    h, w, c_in, bsz = x.shape
    (kh, kw), (sh, sw) = layer.kernel, layer.stride
    ho, wo = layer.output_shape(h, w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {layer.kernel} larger than input {(h, w)}")
    (ph0, ph1), (pw0, pw1) = _pads(layer, h, w)
    xc = to_channel_last(x)
    if ph0 or ph1 or pw0 or pw1:
        xc = np.pad(xc, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    else:
        xc = np.ascontiguousarray(xc)
    c_out = layer.w.shape[3]
    _, hp, wp, _ = xc.shape
    # compute in the input dtype; float32 inputs keep float32 arithmetic
    kern = layer.w.astype(xc.dtype, copy=False)
    bias = layer.b.astype(xc.dtype, copy=False)
    if sh == sw == 1:
        xf = xc.reshape(-1, c_in)
        if kh == kw == 1:
            out = xf @ kern[0, 0]
            out += bias
            out = out.reshape(bsz, ho, wo, c_out)
        elif c_in >= SHIFT_MIN_CHANNELS:
            n_rows = xf.shape[0]
            m = n_rows - ((kh - 1) * wp + kw - 1)
            full = np.empty((n_rows, c_out), dtype=xf.dtype)
            taps = [(s, kern[i, j]) for i, j, s in _shift_offsets(kh, kw, wp)]
            _shifted_taps(xf, taps, full, m, first_overwrites=True)
            out = full.reshape(bsz, hp, wp, c_out)[:, :ho, :wo, :]
            out = np.ascontiguousarray(out)
            out += bias
        else:
            out = _im2col(xc, kh, kw, 1, 1, ho, wo) @ kern.reshape(-1, c_out)
            out += bias
            out = out.reshape(bsz, ho, wo, c_out)
    else:
        out = _im2col(xc, kh, kw, sh, sw, ho, wo) @ kern.reshape(-1, c_out)
        out += bias
        out = out.reshape(bsz, ho, wo, c_out)
    _check_finite("conv2d_forward", out)
    cache = {"x_shape": x.shape, "xp": xc, "out_hw": (ho, wo)}
    return from_channel_last(out), cache


def conv2d_backward(grad_out: Array, cache: dict, layer: ConvLayer):
    """Gradients w.r.t. input, kernel and bias.

    The input gradient is the transposed convolution of ``grad_out``: each
    output gradient is scattered back through the kernel taps, which equals a
    full convolution with the 180-degree rotated kernel, then the padding is
    cropped away.
    """
    if cache is None or "xp" not in cache:
        raise ValueError("conv2d_backward needs the cache from conv2d_forward")
    h, w, c_in, bsz = cache["x_shape"]
    ho, wo = cache["out_hw"]
    xp = cache["xp"]
    _, hp, wp, _ = xp.shape
    (kh, kw), (sh, sw) = layer.kernel, layer.stride
    c_out = layer.w.shape[3]
    dt = xp.dtype
    kern = layer.w.astype(dt, copy=False)
    gc = np.ascontiguousarray(to_channel_last(grad_out), dtype=dt)
    g = gc.reshape(-1, c_out)
    grad_b = g.sum(axis=0)
    (ph0, _), (pw0, _) = _pads(layer, h, w)
    if sh == sw == 1 and kh == kw == 1:
        xf = xp.reshape(-1, c_in)
        grad_w = (xf.T @ g).reshape(1, 1, c_in, c_out)
        gxp = (g @ kern[0, 0].T).reshape(bsz, hp, wp, c_in)
    elif sh == sw == 1:
        xf = xp.reshape(-1, c_in)
        n_rows = xf.shape[0]
        m = n_rows - ((kh - 1) * wp + kw - 1)
        gfull = np.zeros((bsz, hp, wp, c_out), dtype=dt)
        gfull[:, :ho, :wo, :] = gc
        gfull = gfull.reshape(n_rows, c_out)[:m]
        grad_w = np.empty(layer.w.shape, dtype=dt)
        offsets = _shift_offsets(kh, kw, wp)
        _shifted_weight_grads(xf, gfull, offsets, grad_w, m)
        # transposed taps: input row r + s receives gfull[r] @ w[i, j].T
        gxf = np.zeros((n_rows, c_in), dtype=dt)
        n_pad = (kh - 1) * wp + kw - 1
        gpad = np.zeros((m + 2 * n_pad, c_out), dtype=dt)
        gpad[n_pad:n_pad + m] = gfull
        taps = [(n_pad - s, kern[i, j].T) for i, j, s in offsets]
        _shifted_taps(gpad, taps, gxf, n_rows, first_overwrites=False)
        gxp = gxf.reshape(bsz, hp, wp, c_in)
    else:
        cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
        grad_w = (cols.T @ g).reshape(kh, kw, c_in, c_out)
        del cols
        gcols = (g @ kern.reshape(-1, c_out).T).reshape(bsz, ho, wo, kh, kw, c_in)
        gxp = np.zeros(xp.shape, dtype=dt)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :] += gcols[:, :, :, i, j, :]
    grad_in = gxp[:, ph0:ph0 + h, pw0:pw0 + w, :]
    if not grad_in.flags.c_contiguous:
        grad_in = np.ascontiguousarray(grad_in)
    _check_finite("conv2d_backward", grad_in, grad_w)
    return from_channel_last(grad_in), grad_w, grad_b


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

def pool_output_size(size: int, extent: int, stride: int, ceil_mode: bool = True) -> int:
    if ceil_mode:
        return max(-(-(size - extent) // stride), 0) + 1
    return (size - extent) // stride + 1


def maxpool_forward(x: Array, extent=(2, 1), stride=(2, 1), ceil_mode: bool = True,
                    need_cache: bool = True):
    """Windowed maximum; with ``ceil_mode`` a partial last window is padded with -inf.

    Ties go to the first window element in row-major order.
    """
    h, w, c, bsz = x.shape
    (eh, ew), (sh, sw) = extent, stride
    ho = pool_output_size(h, eh, sh, ceil_mode)
    wo = pool_output_size(w, ew, sw, ceil_mode)
    need_h = (ho - 1) * sh + eh
    need_w = (wo - 1) * sw + ew
    xc = to_channel_last(x)
    if need_h > h or need_w > w:
        xc = np.pad(xc, ((0, 0), (0, max(need_h - h, 0)), (0, max(need_w - w, 0)), (0, 0)),
                    constant_values=-np.inf)
    cands = [xc[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :]
             for i in range(eh) for j in range(ew)]
    best = cands[0].copy()
    for cand in cands[1:]:
        np.maximum(best, cand, out=best)
    cache = None
    if need_cache:
        # first candidate reaching the maximum wins
        arg = np.full(best.shape, len(cands) - 1, dtype=np.int8)
        for k in range(len(cands) - 2, -1, -1):
            arg[cands[k] == best] = k
        cache = {"x_shape": x.shape, "arg": arg, "extent": (eh, ew), "stride": (sh, sw),
                 "padded": xc.shape}
    return from_channel_last(best), cache


def maxpool_backward(grad_out: Array, cache: dict) -> Array:
    """Route each output gradient to the input position that won its window."""
    h, w, c, bsz = cache["x_shape"]
    (eh, ew), (sh, sw) = cache["extent"], cache["stride"]
    arg = cache["arg"]
    _, ho, wo, _ = arg.shape
    g = to_channel_last(grad_out)
    gx = np.zeros(cache["padded"], dtype=g.dtype)
    k = 0
    for i in range(eh):
        for j in range(ew):
            gx[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :] += np.where(arg == k, g, 0.0)
            k += 1
    return from_channel_last(np.ascontiguousarray(gx[:, :h, :w, :]))


# ---------------------------------------------------------------------------
# activation
# ---------------------------------------------------------------------------

def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


def relu_backward(grad: Array, z: Array) -> Array:
    """Gradient through ReLU; the derivative at exactly 0 is taken as 0."""
    return grad * (z > 0)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormLayer:
    gamma: Array
    beta: Array
    running_mean: Array
    running_var: Array
    eps: float = 1e-5
    momentum: float = 0.9

    @classmethod
    def fresh(cls, channels: int, eps: float = 1e-5, momentum: float = 0.9) -> "BatchNormLayer":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels),
                   eps, momentum)

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def _rows(x: Array) -> Array:
    """Channel-last 2-D view (positions, channels); copies only if needed."""
    xc = to_channel_last(x)
    if not xc.flags.c_contiguous:
        xc = np.ascontiguousarray(xc)
    return xc.reshape(-1, x.shape[2])


def _like(rows: Array, x: Array) -> Array:
    h, w, c, bsz = x.shape
    return from_channel_last(rows.reshape(bsz, h, w, c))


def batchnorm_forward(x: Array, layer: BatchNormLayer, mode: str = "train"):
    """Per-channel normalization over frequency, time and batch.

    Train mode uses batch statistics and folds them into the running averages
    (``running = momentum * running + (1 - momentum) * batch``, unbiased
    variance); infer mode uses the running statistics.
    """
    c = x.shape[2]
    if layer.gamma.shape != (c,):
        raise ShapeError(f"batchnorm has {layer.gamma.shape[0]} channels, input has {c}")
    x2 = _rows(x)
    dt = x2.dtype
    if mode == "train":
        count = x2.shape[0]
        if count < 2:
            raise ValueError("train-mode batchnorm needs at least 2 values per channel")
        mean = x2.mean(axis=0)
        xhat = x2 - mean
        var = np.einsum("ij,ij->j", xhat, xhat).astype(np.float64) / count
        m = layer.momentum
        # running statistics stay float64 whatever the compute dtype
        layer.running_mean = m * layer.running_mean + (1 - m) * mean
        layer.running_var = m * layer.running_var + (1 - m) * var * count / (count - 1)
    elif mode == "infer":
        xhat = x2 - layer.running_mean.astype(dt)
        var = layer.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + layer.eps)).astype(dt)
    xhat *= inv_std
    out = xhat * layer.gamma.astype(dt)
    out += layer.beta.astype(dt)
    _check_finite("batchnorm_forward", out)
    return _like(out, x), {"xhat": xhat, "inv_std": inv_std, "mode": mode}


def batchnorm_backward(grad_out: Array, cache: dict, layer: BatchNormLayer):
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    g = _rows(grad_out)
    grad_beta = g.sum(axis=0)
    grad_gamma = np.einsum("ij,ij->j", g, xhat)
    scale = layer.gamma.astype(g.dtype) * inv_std
    if cache["mode"] == "infer":
        return _like(g * scale, grad_out), grad_gamma, grad_beta
    # gradient through the batch mean and variance, per channel:
    # dx = gamma*inv_std * (g - mean(g) - xhat * mean(g * xhat))
    n = g.shape[0]
    grad_in = g * scale
    grad_in -= xhat * (scale * grad_gamma / g.dtype.type(n))
    grad_in -= scale * grad_beta / g.dtype.type(n)
    return _like(grad_in, grad_out), grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# loss and optimizer
# ---------------------------------------------------------------------------

def mse_loss(pred: Array, target: Array):
    """Mean squared error and its gradient with respect to ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


@dataclass
class AdamState:
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, Array] = field(default_factory=dict)
    v: Dict[str, Array] = field(default_factory=dict)


def adam_step(params: Dict[str, Array], grads: Dict[str, Array], state: AdamState,
              alpha: float | None = None) -> None:
    """In-place bias-corrected Adam update of every array in ``params``.

    ``alpha`` overrides ``state.alpha`` for this step (learning-rate schedules).
    """
    lr = state.alpha if alpha is None else alpha
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if lr != 0.0:
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[Array], float], params: Array, h: float = 1e-5) -> Array:
    """Central-difference gradient of a scalar function, one element at a time.

    ``params`` is perturbed in place and restored after each evaluation.
    """
    grad = np.zeros(params.shape)
    flat = params.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(params)
        flat[i] = orig - h
        fm = f(params)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: Array, numeric: Array) -> float:
    """Largest absolute discrepancy scaled by the largest gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)
