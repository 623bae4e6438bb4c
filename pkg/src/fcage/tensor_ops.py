"""Dense 3D layer primitives with exact forward/backward definitions.

Everything operates on plain numpy arrays in NC(ZYX) layout and
preserves the input dtype: the training pipeline runs float32, gradient
checking runs the same code in float64.  Convolutions are evaluated as
a sum of shifted GEMMs over kernel offsets, which keeps memory flat
(no im2col buffer) while still going through BLAS.
"""

from __future__ import annotations

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _pad_spatial(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    widths = ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))
    return np.pad(x, widths, constant_values=value)


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, pad: int = 1) -> np.ndarray:
    """Cross-correlation of (N,C,Z,Y,X) with (F,C,kz,ky,kx) plus bias, stride 1."""
    n, c, z, y, xx = x.shape
    f, cw, kz, ky, kx = w.shape
    if cw != c:
        raise ValueError(f"input has {c} channels, kernel expects {cw}")
    zo, yo, xo = z + 2 * pad - kz + 1, y + 2 * pad - ky + 1, xx + 2 * pad - kx + 1
    if min(zo, yo, xo) < 1:
        raise ValueError("kernel larger than padded input")
    xp = _pad_spatial(x, pad)
    acc = np.zeros((n, zo, yo, xo, f), dtype=x.dtype)
    for dz in range(kz):
        for dy in range(ky):
            for dx in range(kx):
                view = xp[:, :, dz : dz + zo, dy : dy + yo, dx : dx + xo]
                acc += np.tensordot(view, w[:, :, dz, dy, dx], axes=([1], [1]))
    out = np.ascontiguousarray(np.moveaxis(acc, -1, 1))
    out += b.astype(x.dtype).reshape(1, f, 1, 1, 1)
    return out


def conv3d_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray, pad: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of conv3d_forward w.r.t. input, weights, bias."""
    n, c, z, y, xx = x.shape
    f, cw, kz, ky, kx = w.shape
    zo, yo, xo = grad_out.shape[2:]
    xp = _pad_spatial(x, pad)
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(w)
    # channels-last copy of grad_out so each offset slice is a clean GEMM
    go = np.ascontiguousarray(np.moveaxis(grad_out, 1, -1))  # (N,Zo,Yo,Xo,F)
    for dz in range(kz):
        for dy in range(ky):
            for dx in range(kx):
                view = xp[:, :, dz : dz + zo, dy : dy + yo, dx : dx + xo]
                # dL/dw[f,c,off] = sum_{n,zyx} grad_out[n,f,zyx] * x[n,c,zyx+off]
                grad_w[:, :, dz, dy, dx] = np.tensordot(
                    go, view, axes=([0, 1, 2, 3], [0, 2, 3, 4])
                )
                # dL/dx accumulates grad_out * w at the shifted location
                grad_xp[:, :, dz : dz + zo, dy : dy + yo, dx : dx + xo] += np.moveaxis(
                    np.tensordot(go, w[:, :, dz, dy, dx], axes=([4], [0])), -1, 1
                )
    if pad:
        grad_x = grad_xp[:, :, pad:-pad, pad:-pad, pad:-pad]
    else:
        grad_x = grad_xp
    grad_b = grad_out.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(x.dtype)
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    mode: str,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
):
    """Per-channel batch normalization over (N, Z, Y, X).

    Train mode normalizes with batch statistics and returns updated
    running averages; eval mode requires previously accumulated running
    statistics and raises if none exist.
    Returns (out, cache, running_mean, running_var).
    """
    if x.ndim != 5:
        raise ValueError("batchnorm expects (N,C,Z,Y,X) input")
    axes = (0, 2, 3, 4)
    shape = (1, x.shape[1], 1, 1, 1)
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
        out = gamma.reshape(shape) * xhat + beta.reshape(shape)
        if running_mean is None:
            new_mean, new_var = mean.copy(), var.copy()
        else:
            new_mean = momentum * running_mean + (1.0 - momentum) * mean
            new_var = momentum * running_var + (1.0 - momentum) * var
        cache = (xhat, inv_std, gamma)
        return out, cache, new_mean, new_var
    if mode == "eval":
        if running_mean is None or running_var is None:
            raise RuntimeError("batchnorm eval mode before any training step")
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean.reshape(shape)) * inv_std.reshape(shape)
        out = gamma.reshape(shape) * xhat + beta.reshape(shape)
        return out, None, running_mean, running_var
    raise ValueError(f"unknown mode {mode!r}")


def batchnorm_backward(grad_out: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients through train-mode batch normalization."""
    xhat, inv_std, gamma = cache
    axes = (0, 2, 3, 4)
    shape = (1, grad_out.shape[1], 1, 1, 1)
    m = grad_out.size // grad_out.shape[1]
    dgamma = (grad_out * xhat).sum(axis=axes)
    dbeta = grad_out.sum(axis=axes)
    dxhat = grad_out * gamma.reshape(shape)
    term = dxhat - dxhat.mean(axis=axes).reshape(shape) - xhat * (dxhat * xhat).sum(
        axis=axes
    ).reshape(shape) / m
    dx = inv_std.reshape(shape) * term
    return dx, dgamma, dbeta


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def maxpool3d_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2x2 max pooling with stride 2.

    Odd extents are padded up to even; padding can never win the max.
    Ties go to the lowest linear index inside each block.
    Returns (out, argmax) where argmax holds the winning offset 0..7.
    """
    n, c, z, y, xx = x.shape
    pz, py, px = z % 2, y % 2, xx % 2
    if pz or py or px:
        x = np.pad(
            x,
            ((0, 0), (0, 0), (0, pz), (0, py), (0, px)),
            constant_values=-np.inf,
        )
    n, c, z, y, xx = x.shape
    blocks = x.reshape(n, c, z // 2, 2, y // 2, 2, xx // 2, 2)
    # window axes ordered (dz, dy, dx) so flat offset == linear index order
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(
        n, c, z // 2, y // 2, xx // 2, 8
    )
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool3d_backward(grad_out: np.ndarray, argmax: np.ndarray, in_shape) -> np.ndarray:
    """Route gradients to each block's argmax location."""
    n, c, z, y, xx = in_shape
    zp, yp, xp = z + z % 2, y + y % 2, xx + xx % 2
    blocks = np.zeros((n, c, zp // 2, yp // 2, xp // 2, 8), dtype=grad_out.dtype)
    np.put_along_axis(blocks, argmax[..., None], grad_out[..., None], axis=-1)
    blocks = blocks.reshape(n, c, zp // 2, yp // 2, xp // 2, 2, 2, 2)
    grad_x = blocks.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(n, c, zp, yp, xp)
    return np.ascontiguousarray(grad_x[:, :, :z, :y, :xx])


def fully_connected(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """y = x @ w + b with x (N, in), w (in, out)."""
    return x @ w + b


def fully_connected_backward(
    x: np.ndarray, w: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    grad_x = grad_out @ w.T
    grad_w = x.T @ grad_out
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def dropout_forward(
    x: np.ndarray, p: float, rng: np.random.Generator | None = None, train: bool = True
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout: kept units scale by 1/(1-p); identity at eval."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not train or p == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs a seeded generator")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return grad_out
    return grad_out * mask


def euclidean_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """loss = sum((pred-target)^2) / (2N); grad = (pred-target)/N."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape or pred.ndim != 1 or pred.size < 1:
        raise ValueError("pred and target must be equal-length 1-D arrays")
    n = pred.size
    diff = pred - target
    loss = float(np.dot(diff, diff)) / (2.0 * n)
    return loss, diff / n
