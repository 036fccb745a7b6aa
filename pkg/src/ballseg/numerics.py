"""Hand-written forward/backward tensor operations used by the segmentation net.

Tensors are plain numpy arrays laid out as (batch, channels, height, width).
float32 is the working precision; every op preserves a floating input dtype so
gradient checks can evaluate the same code path in float64.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_EPS = 1e-7


@dataclass
class LayerGradients:
    wrt_input: np.ndarray
    wrt_parameters: dict = field(default_factory=dict)


def as_tensor(x):
    """Return ``x`` as a floating array, defaulting to float32."""
    x = np.asarray(x)
    if x.dtype == np.float64:
        return x
    return x.astype(np.float32, copy=False)


def _check_rank4(name, x):
    if x.ndim != 4:
        raise ValueError(f"{name} must be rank 4 (batch, channels, height, width), got shape {x.shape}")


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _windows(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _check_conv_shapes(x, kernels, bias, stride, padding):
    _check_rank4("input", x)
    if kernels.ndim != 4:
        raise ValueError(f"kernels must be rank 4 (outC, inC, kH, kW), got shape {kernels.shape}")
    if x.shape[1] != kernels.shape[1]:
        raise ValueError(
            f"channel mismatch: input shape {x.shape} has {x.shape[1]} channels "
            f"but kernels shape {kernels.shape} expect {kernels.shape[1]}"
        )
    if bias is not None and np.shape(bias) != (kernels.shape[0],):
        raise ValueError(f"bias shape {np.shape(bias)} does not match kernels shape {kernels.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    kh, kw = kernels.shape[2:]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ValueError(f"kernels shape {kernels.shape} larger than padded input shape {x.shape}")


def conv2d(x, kernels, bias, stride=1, padding=0):
    x = as_tensor(x)
    kernels = np.asarray(kernels, dtype=x.dtype)
    _check_conv_shapes(x, kernels, bias, stride, padding)
    kh, kw = kernels.shape[2:]
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        out = np.tensordot(kernels[:, :, 0, 0], x, axes=([1], [1])).transpose(1, 0, 2, 3)
    else:
        win = _windows(x, kh, kw, stride, padding)
        # (B, Ho, Wo, O)
        out = np.tensordot(win, kernels, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += np.asarray(bias, dtype=x.dtype)[None, :, None, None]
    return out


def conv2d_backward(x, kernels, upstream, stride=1, padding=0, input_grad=True):
    """Gradients of a conv2d layer given the gradient of its output.

    With ``input_grad=False`` the (often unneeded) input gradient of a first
    layer is skipped and ``wrt_input`` is None.
    """
    x = as_tensor(x)
    kernels = np.asarray(kernels, dtype=x.dtype)
    upstream = np.asarray(upstream, dtype=x.dtype)
    _check_conv_shapes(x, kernels, None, stride, padding)
    B, C, H, W = x.shape
    O, _, kh, kw = kernels.shape
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    if upstream.shape != (B, O, Ho, Wo):
        raise ValueError(f"upstream gradient shape {upstream.shape} != conv output shape {(B, O, Ho, Wo)}")

    grad_bias = upstream.sum(axis=(0, 2, 3))
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        k2 = kernels[:, :, 0, 0]
        grad_k = np.ascontiguousarray(np.tensordot(upstream, x, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None])
        grad_x = None
        if input_grad:
            grad_x = np.ascontiguousarray(np.tensordot(k2, upstream, axes=([0], [1])).transpose(1, 0, 2, 3))
        return LayerGradients(grad_x, {"kernels": grad_k, "bias": grad_bias})

    win = _windows(x, kh, kw, stride, padding)
    grad_k = np.tensordot(upstream, win, axes=([0, 2, 3], [0, 2, 3]))
    if not input_grad:
        return LayerGradients(None, {"kernels": grad_k, "bias": grad_bias})
    # (B, Ho, Wo, C, kh, kw)
    cols = np.tensordot(upstream, kernels, axes=([1], [0]))
    Hp, Wp = H + 2 * padding, W + 2 * padding
    grad_pad = np.zeros((B, C, Hp, Wp), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            grad_pad[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_x = grad_pad[:, :, padding:padding + H, padding:padding + W]
    return LayerGradients(np.ascontiguousarray(grad_x), {"kernels": grad_k, "bias": grad_bias})


def relu(x):
    x = as_tensor(x)
    return np.maximum(x, 0)


def relu_backward(x, upstream):
    x = as_tensor(x)
    return np.where(x > 0, upstream, 0).astype(x.dtype)


def sampling_matrix(coords, n_in, dtype=np.float32):
    """Linear interpolation weights reading ``n_in`` samples at fractional ``coords``.

    Coordinates are in pixel-index units and clamped to [0, n_in - 1].
    """
    coords = np.clip(np.asarray(coords, dtype=np.float64), 0, n_in - 1)
    m = np.zeros((coords.size, n_in), dtype=np.float64)
    i0 = np.floor(coords).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = coords - i0
    rows = np.arange(coords.size)
    np.add.at(m, (rows, i0), 1 - frac)
    np.add.at(m, (rows, i1), frac)
    return m.astype(dtype)


def resize_matrix(n_in, n_out, dtype=np.float32):
    """Resize weights with half-pixel centers, shape (n_out, n_in)."""
    return sampling_matrix((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, n_in, dtype)


def resize_bilinear(x, target_h, target_w):
    x = as_tensor(x)
    _check_rank4("input", x)
    if target_h < 1 or target_w < 1:
        raise ValueError(f"target extents must be >= 1, got {target_h}x{target_w}")
    H, W = x.shape[2:]
    if (H, W) == (target_h, target_w):
        return x.copy()
    ry = resize_matrix(H, target_h, x.dtype)
    rx = resize_matrix(W, target_w, x.dtype)
    return ry @ x @ rx.T


def resize_bilinear_backward(x_shape, upstream):
    upstream = as_tensor(upstream)
    H, W = x_shape[2:]
    th, tw = upstream.shape[2:]
    if (H, W) == (th, tw):
        return upstream.copy()
    ry = resize_matrix(H, th, upstream.dtype)
    rx = resize_matrix(W, tw, upstream.dtype)
    return ry.T @ upstream @ rx


def softmax_channels(logits):
    logits = as_tensor(logits)
    _check_rank4("logits", logits)
    if logits.shape[1] < 2:
        raise ValueError(f"softmax needs >= 2 channels, got shape {logits.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_mask(probs, mask):
    mask = np.asarray(mask)
    if probs.shape[1] != 2:
        raise ValueError(f"expected 2-channel (background, ball) probabilities, got shape {probs.shape}")
    expected = (probs.shape[0], 1) + probs.shape[2:]
    if mask.shape != expected:
        raise ValueError(f"mask shape {mask.shape} does not match probabilities shape {probs.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("target mask must be binary (values 0 or 1)")
    return mask.astype(bool)


def cross_entropy_pixel_mean(probs, mask):
    """Mean over pixels of -log p(true class)."""
    probs = as_tensor(probs)
    fg = _check_mask(probs, mask)[:, 0]
    p_true = np.where(fg, probs[:, 1], probs[:, 0])
    return float(-np.mean(np.log(np.maximum(p_true, LOG_EPS)), dtype=np.float64))


def cross_entropy_backward(probs, mask):
    """Gradient of the softmax + mean cross-entropy pair w.r.t. the logits."""
    probs = as_tensor(probs)
    fg = _check_mask(probs, mask)
    onehot = np.concatenate([~fg, fg], axis=1).astype(probs.dtype)
    n = probs.shape[0] * probs.shape[2] * probs.shape[3]
    return (probs - onehot) / probs.dtype.type(n)


def sgd_update(parameters, gradients, learning_rate):
    """Plain SGD step returning new arrays: p - lr * g."""
    out = {}
    for name, p in parameters.items():
        g = gradients[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        out[name] = (p - p.dtype.type(learning_rate) * g).astype(p.dtype, copy=False)
    return out
