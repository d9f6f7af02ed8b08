"""Pure-numpy versions of the compiled kernels in ``_ckernels.pyx``.

Same signatures and dtypes. Products are accumulated in float64 and
rounded once; each sample is processed with identically shaped matmuls,
so a batch gives the same bits as running its samples one at a time.
"""
import numpy as np


def _patches(x, K):
    """im2col: ``[B, C*K*K, H*W]`` float64 patches with zero padding."""
    B, C, H, W = x.shape
    p = K // 2
    xp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=np.float64)
    xp[:, :, p:p + H, p:p + W] = x
    cols = np.empty((B, C, K, K, H, W), dtype=np.float64)
    for ky in range(K):
        for kx in range(K):
            cols[:, :, ky, kx] = xp[:, :, ky:ky + H, kx:kx + W]
    return cols.reshape(B, C * K * K, H * W)


def conv2d_forward(x, w, b):
    B, C, H, W = x.shape
    O, K = w.shape[0], w.shape[2]
    cols = _patches(x, K)
    w2 = w.reshape(O, -1).astype(np.float64)
    b2 = b.astype(np.float64)[:, None]
    out = np.empty((B, O, H, W), dtype=np.float32)
    for n in range(B):
        out[n] = (w2 @ cols[n] + b2).reshape(O, H, W)
    return out


def conv2d_backward_input(gy, w):
    # 'same' correlation with the channel-transposed, spatially flipped kernel
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    return conv2d_forward(gy, wt, np.zeros(wt.shape[0], dtype=np.float32))


def conv2d_backward_params(x, gy, K):
    B, O, H, W = gy.shape
    C = x.shape[1]
    cols = _patches(x, K)
    g = gy.reshape(B, O, H * W).astype(np.float64)
    gw = np.einsum("boh,bkh->ok", g, cols).reshape(O, C, K, K)
    gb = g.sum(axis=(0, 2))
    return gw, gb


def _windows(x):
    B, C, H, W = x.shape
    win = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(B, C, H // 2, W // 2, 4)


def maxpool2x2_forward(x):
    win = _windows(x)
    idx = np.argmax(win, axis=-1).astype(np.int8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(out, dtype=np.float32), idx


def maxpool2x2_backward(gy, idx):
    B, C, H, W = gy.shape
    win = np.zeros((B, C, H, W, 4), dtype=np.float32)
    np.put_along_axis(win, idx[..., None].astype(np.intp), gy[..., None], axis=-1)
    gx = win.reshape(B, C, H, W, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(gx.reshape(B, C, 2 * H, 2 * W))
