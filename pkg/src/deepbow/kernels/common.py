"""Shared numeric helpers used by both kernel backends.

Layout conventions:
  activations  (n, h, w, c)      channel-last
  conv weights (3, 3, c_in, c_out), pad 1, stride 1
  im2col       (n*h*w, c_in*9) with column index ci*9 + dy*3 + dx

All convolutions accumulate in float64 (inputs are widened before the matmul)
and cast back to the activation dtype, so float32 training is reproducible
bit-for-bit in a fixed batch order.
"""

import numpy as np

# ---- conv weight layouts -------------------------------------------------

def weight_matrix(w: np.ndarray) -> np.ndarray:
    """(3,3,ci,co) -> (ci*9, co) matching the im2col column order."""
    ci, co = w.shape[2], w.shape[3]
    return np.ascontiguousarray(w.transpose(2, 0, 1, 3).reshape(ci * 9, co), dtype=np.float64)


def weight_matrix_flipped(w: np.ndarray) -> np.ndarray:
    """Weight matrix of the transposed, spatially flipped kernel.

    Used by the input-gradient convolution: dx = conv(dy, w_rev) with
    w_rev[a,b,co,ci] = w[2-a, 2-b, ci, co].
    """
    w_rev = w[::-1, ::-1].transpose(0, 1, 3, 2)
    return weight_matrix(w_rev)


# ---- elementwise / structural ops (identical in both backends) ------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, pre: np.ndarray) -> np.ndarray:
    # subgradient 0 at the kink
    return np.where(pre > 0, dy, 0)


def maxpool2(x: np.ndarray):
    """2x2 max pool. Returns (pooled, idx) with idx in {0,1,2,3} encoding the
    first maximal element in scan order (0,0),(0,1),(1,0),(1,1)."""
    t00 = x[:, 0::2, 0::2, :]
    t01 = x[:, 0::2, 1::2, :]
    t10 = x[:, 1::2, 0::2, :]
    t11 = x[:, 1::2, 1::2, :]
    y = np.maximum(np.maximum(t00, t01), np.maximum(t10, t11))
    idx = np.full(y.shape, 3, dtype=np.uint8)
    idx[t10 == y] = 2
    idx[t01 == y] = 1
    idx[t00 == y] = 0
    return y, idx


def maxpool2_backward(dy: np.ndarray, idx: np.ndarray) -> np.ndarray:
    n, h2, w2, c = dy.shape
    dx = np.zeros((n, h2 * 2, w2 * 2, c), dtype=dy.dtype)
    for code, (a, b) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        sel = idx == code
        view = dx[:, a::2, b::2, :]
        view[sel] = dy[sel]
    return dx


def upsample2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2_backward(dy: np.ndarray) -> np.ndarray:
    """Gradient of nearest-neighbor 2x upsampling: 2x2 block sums.

    Summed in a fixed order ((t00+t01)+(t10+t11)) in float64 so both backends
    agree bitwise."""
    t00 = dy[:, 0::2, 0::2, :].astype(np.float64)
    t01 = dy[:, 0::2, 1::2, :].astype(np.float64)
    t10 = dy[:, 1::2, 0::2, :].astype(np.float64)
    t11 = dy[:, 1::2, 1::2, :].astype(np.float64)
    return ((t00 + t01) + (t10 + t11)).astype(dy.dtype)


# ---- RBF gram ---------------------------------------------------------------

def gram_rbf(x: np.ndarray, z: np.ndarray, gamma: float) -> np.ndarray:
    """exp(-gamma * ||x_i - z_j||^2), float64, (len(x), len(z))."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    xx = np.einsum("ij,ij->i", x, x)
    zz = np.einsum("ij,ij->i", z, z)
    sq = xx[:, None] + zz[None, :] - 2.0 * (x @ z.T)
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-gamma * sq)


# ---- nearest-centroid assignment, matmul formulation -----------------------

def assign_nearest_gemm(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """argmin_j ||x_i - c_j||^2 via the expanded form; ties -> lowest index.

    Faster than the scalar loop once n*k*d is large; the loop kernel is the
    reference for exact tie semantics on small inputs."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    cc = np.einsum("ij,ij->i", c, c)
    scores = x @ c.T
    scores *= -2.0
    scores += cc[None, :]
    return np.argmin(scores, axis=1).astype(np.int64)
