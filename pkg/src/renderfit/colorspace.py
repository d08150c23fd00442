"""sRGB to CIELAB conversion with an analytic Jacobian.

Standard pipeline: sRGB gamma expansion, linear RGB to XYZ under D65 /
2-degree observer, XYZ to Lab.  Only the chroma channels (a, b) are used by
the color-coherence loss; they are rescaled to roughly [0, 1] via
``(ch + 128) / 255``.

Matrix and white-point constants follow the classic ITU-R BT.709 / D65
reference values so results agree with common conversion libraries to
machine precision.
"""

from __future__ import annotations

import numpy as np

_XYZ_FROM_RGB = np.array(
    [
        [0.412453, 0.357580, 0.180423],
        [0.212671, 0.715160, 0.072169],
        [0.019334, 0.119193, 0.950227],
    ]
)
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])

_DELTA = 6.0 / 29.0
_T0 = _DELTA**3
_SLOPE = 1.0 / (3.0 * _DELTA**2)


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _srgb_to_linear_deriv(c: np.ndarray) -> np.ndarray:
    return np.where(
        c <= 0.04045,
        1.0 / 12.92,
        (2.4 / 1.055) * ((c + 0.055) / 1.055) ** 1.4,
    )


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _T0, np.cbrt(t), _SLOPE * t + 4.0 / 29.0)


def _lab_f_deriv(t: np.ndarray) -> np.ndarray:
    ts = np.maximum(t, _T0)  # avoid 0^(-2/3) in the unselected branch
    return np.where(t > _T0, np.cbrt(ts) ** -2 / 3.0, _SLOPE)


def rgb_to_ab(rgb: np.ndarray) -> np.ndarray:
    """Chroma (a, b) channels of CIELAB, rescaled by ``(ch + 128) / 255``.

    Args:
        rgb: (..., 3) sRGB values in [0, 1].

    Returns:
        (..., 2) rescaled chroma values.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    lin = _srgb_to_linear(rgb)
    xyz = lin @ _XYZ_FROM_RGB.T / _WHITE_D65
    f = _lab_f(xyz)
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([(a + 128.0) / 255.0, (b + 128.0) / 255.0], axis=-1)


def rgb_to_ab_jac(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rescaled chroma values and their Jacobian w.r.t. the sRGB input.

    Returns:
        (ab, J) with ``ab`` shaped (..., 2) and ``J`` shaped (..., 2, 3),
        ``J[..., i, j] = d ab_i / d rgb_j``.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    lin = _srgb_to_linear(rgb)
    dlin = _srgb_to_linear_deriv(rgb)
    xyz = lin @ _XYZ_FROM_RGB.T / _WHITE_D65
    f = _lab_f(xyz)
    df = _lab_f_deriv(xyz)

    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    ab = np.stack([(a + 128.0) / 255.0, (b + 128.0) / 255.0], axis=-1)

    # d xyz_i / d rgb_j = M_ij / white_i * dlin_j
    M = _XYZ_FROM_RGB / _WHITE_D65[:, None]
    dxyz = M[None, :, :] * dlin[..., None, :]  # (..., 3xyz, 3rgb)
    dfd = df[..., :, None] * dxyz              # (..., 3f, 3rgb)
    da = 500.0 * (dfd[..., 0, :] - dfd[..., 1, :]) / 255.0
    db = 200.0 * (dfd[..., 1, :] - dfd[..., 2, :]) / 255.0
    return ab, np.stack([da, db], axis=-2)
