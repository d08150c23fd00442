"""Deterministic multi-level feature extractor for the perceptual loss.

A fixed bank of seeded random 3x3 convolutions with ReLU activations,
8 -> 16 -> 32 -> 32 -> 32 channels and stride 2 between levels.  Not
trained: its only job is to provide a reproducible multi-scale embedding
whose channel-normalized distances behave like a perceptual metric.  The
class is a plain interface, so a learned network can be swapped in later.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch

_CHANNELS = (8, 16, 32, 32, 32)
_STRIDES = (1, 2, 2, 2, 2)


def _conv3(x: np.ndarray, W: np.ndarray, stride: int) -> np.ndarray:
    """3x3 convolution, zero padding 1, via im2col and a single matmul.

    x: (H, W, Cin); W: (3, 3, Cin, Cout) tap-major layout.
    """
    h, w, cin = x.shape
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    xp = np.zeros((h + 2, w + 2, cin))
    xp[1:-1, 1:-1] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(0, 1))
    win = win[::stride, ::stride]  # (ho, wo, cin, 3, 3)
    cols = win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, 9 * cin)
    return (cols @ W.reshape(9 * cin, -1)).reshape(ho, wo, -1)


def _conv3_vjp(g: np.ndarray, W: np.ndarray, x_shape, stride: int) -> np.ndarray:
    """Adjoint of :func:`_conv3` w.r.t. the input."""
    h, w, cin = x_shape
    ho, wo = g.shape[:2]
    cols = g.reshape(ho * wo, -1) @ W.reshape(9 * cin, -1).T  # (ho*wo, 9*cin)
    cols = cols.reshape(ho, wo, 3, 3, cin)
    gxp = np.zeros((h + 2, w + 2, cin))
    for di in range(3):
        for dj in range(3):
            gxp[di : di + (ho - 1) * stride + 1 : stride,
                dj : dj + (wo - 1) * stride + 1 : stride] += cols[:, :, di, dj]
    return gxp[1:-1, 1:-1]


class FeaturePyramid:
    """Seeded fixed filter bank producing 5 feature levels.

    Args:
        seed: RNG seed for the filter weights; record it in the run config
            so results are reproducible.
    """

    n_levels = 5

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.weights: list[np.ndarray] = []  # tap-major (3, 3, Cin, Cout)
        cin = 3
        for cout in _CHANNELS:
            w = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), size=(cout, cin, 3, 3))
            self.weights.append(np.ascontiguousarray(w.transpose(2, 3, 1, 0)))
            cin = cout

    def forward(self, img: np.ndarray) -> list[np.ndarray]:
        """Feature maps (post-ReLU) at each of the 5 levels."""
        x = np.asarray(img, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != 3:
            raise ShapeMismatch(f"expected (H, W, 3) image, got {x.shape}")
        feats = []
        for w, s in zip(self.weights, _STRIDES):
            x = np.maximum(_conv3(x, w, s), 0.0)
            feats.append(x)
        return feats

    def forward_vjp(self, img: np.ndarray):
        """Forward pass plus a closure backpropagating level cotangents.

        Returns:
            (feats, vjp) where ``vjp(cotangents)`` takes one cotangent array
            per level (or None) and returns the gradient w.r.t. ``img``.
        """
        x = np.asarray(img, dtype=np.float64)
        feats = []
        pres = []
        shapes = [x.shape]
        for w, s in zip(self.weights, _STRIDES):
            pre = _conv3(x, w, s)
            x = np.maximum(pre, 0.0)
            pres.append(pre)
            feats.append(x)
            shapes.append(x.shape)

        def vjp(cotangents: list[np.ndarray | None]) -> np.ndarray:
            g = None
            for lvl in range(self.n_levels - 1, -1, -1):
                if g is None:
                    g = np.zeros(shapes[lvl + 1])
                if cotangents[lvl] is not None:
                    g = g + cotangents[lvl]
                g = np.where(pres[lvl] > 0.0, g, 0.0)
                g = _conv3_vjp(g, self.weights[lvl], shapes[lvl], _STRIDES[lvl])
            return g

        return feats, vjp


def normalize_channels(feat: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Unit-normalize each pixel's channel vector; zero vectors stay zero."""
    norm = np.sqrt(np.sum(feat**2, axis=-1, keepdims=True))
    return np.where(norm > eps, feat / np.maximum(norm, eps), 0.0)


def normalize_channels_vjp(
    feat: np.ndarray, g_normed: np.ndarray, eps: float = 1e-12
) -> np.ndarray:
    """Adjoint of :func:`normalize_channels` w.r.t. the raw features."""
    norm = np.sqrt(np.sum(feat**2, axis=-1, keepdims=True))
    safe = np.maximum(norm, eps)
    n = feat / safe
    proj = np.sum(n * g_normed, axis=-1, keepdims=True)
    g = (g_normed - n * proj) / safe
    return np.where(norm > eps, g, 0.0)
