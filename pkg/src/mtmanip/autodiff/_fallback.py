"""Pure-numpy im2col / col2im, used when the compiled extension is unavailable.

Column layout (shared with the compiled kernels): ``cols[c*kh*kw + u*kw + v,
n*Ho*Wo + i*Wo + j] = xp[n, c, i*stride + u, j*stride + v]``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (n, c, ho, wo, kh, kw) -> (c, kh, kw, n, ho, wo)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)


def col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int) -> np.ndarray:
    """Scatter-add columns back into a padded ``shape`` = (n, c, hp, wp) buffer.

    Contributions land on each element in lexicographic (u, v) order.
    """
    n, c, hp, wp = shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    dc = cols.reshape(c, kh, kw, n, ho, wo)
    out = np.zeros(shape, dtype=np.float64)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for u in range(kh):
        for v in range(kw):
            out[:, :, u:u + hspan:stride, v:v + wspan:stride] += dc[:, u, v].transpose(1, 0, 2, 3)
    return out
