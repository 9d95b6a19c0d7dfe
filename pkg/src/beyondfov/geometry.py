"""Radial fisheye distortion: forward model, numerical inverse, FoV masks.

The distortion maps a pinhole-image point outward/inward along its radius by
an even-power polynomial gain. Coordinates are taken relative to the
distortion center and divided by ``norm_radius`` before the polynomial is
applied, so coefficients stay O(1) and independent of image size. The inverse
is solved per point by Newton iteration on the scalar radial equation, which
is well-posed because construction validates that r -> r*g(r) is strictly
increasing on the configured range.

All functions are pure; ``warp_image`` does inverse-mapping resampling
(bilinear for images, nearest for class-ID label maps).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_NEWTON_TOL = 1e-8
_NEWTON_MAX_ITER = 50


class InversionError(RuntimeError):
    """Newton inversion of the radial polynomial failed to converge."""

    def __init__(self, residual: float):
        super().__init__(
            f"radial inversion did not converge (max residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class DistortionModel:
    """Fourth-order radial distortion around ``center``.

    ``r_max`` is the normalized radial range on which positivity of the gain
    and strict monotonicity of r*g(r) are validated (by dense sampling) at
    construction; the model is invertible for distorted radii up to
    r_max * g(r_max).
    """

    k: tuple[float, float, float, float]
    center: tuple[float, float]
    norm_radius: float
    r_max: float = 1.25
    max_distorted_radius: float = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.k) != 4:
            raise ValueError(f"expected 4 radial coefficients, got {len(self.k)}")
        if self.norm_radius <= 0:
            raise ValueError(f"norm_radius must be positive, got {self.norm_radius}")
        if self.r_max <= 0:
            raise ValueError(f"r_max must be positive, got {self.r_max}")
        r = np.linspace(0.0, self.r_max, 4097)
        g = self._gain(r * r)
        if not np.all(g > 0):
            raise ValueError(
                f"radial gain is not strictly positive on [0, {self.r_max}]")
        if not np.all(np.diff(r * g) > 0):
            raise ValueError(
                f"r * g(r) is not strictly increasing on [0, {self.r_max}]; "
                "the model would not be invertible")
        object.__setattr__(self, "max_distorted_radius",
                           float(self.r_max * self._gain(self.r_max ** 2)))

    def _gain(self, r2):
        k1, k2, k3, k4 = self.k
        return 1.0 + r2 * (k1 + r2 * (k2 + r2 * (k3 + r2 * k4)))

    def _gain_slope(self, r2):
        # d(r*g)/dr = 1 + 3 k1 r^2 + 5 k2 r^4 + 7 k3 r^6 + 9 k4 r^8
        k1, k2, k3, k4 = self.k
        return 1.0 + r2 * (3 * k1 + r2 * (5 * k2 + r2 * (7 * k3 + r2 * 9 * k4)))

    @property
    def is_identity(self) -> bool:
        return all(c == 0 for c in self.k)


def distort_point(model: DistortionModel, p) -> np.ndarray:
    """Map pinhole-image point(s) ``p`` (..., 2) to fisheye coordinates."""
    p = np.asarray(p, dtype=np.float64)
    if model.is_identity:
        return p.copy()
    c = np.asarray(model.center, dtype=np.float64)
    v = (p - c) / model.norm_radius
    r2 = (v * v).sum(axis=-1, keepdims=True)
    return c + v * model._gain(r2) * model.norm_radius


def _invert_radii(model: DistortionModel, r_d: np.ndarray):
    """Solve r_o * g(r_o) = r_d per element; returns (r_o, valid mask)."""
    if model.is_identity:
        return r_d.copy(), np.ones_like(r_d, dtype=bool)
    in_range = r_d <= model.max_distorted_radius
    r = np.clip(r_d, 0.0, model.r_max)
    for _ in range(_NEWTON_MAX_ITER):
        resid = r * model._gain(r * r) - r_d
        if np.all(np.abs(resid[in_range]) <= _NEWTON_TOL):
            break
        r = np.clip(r - resid / model._gain_slope(r * r), 0.0, model.r_max)
    resid = np.abs(r * model._gain(r * r) - r_d)
    return r, in_range & (resid <= _NEWTON_TOL)


def undistort_point(model: DistortionModel, q) -> np.ndarray:
    """Inverse of :func:`distort_point`; raises InversionError out of range."""
    q = np.asarray(q, dtype=np.float64)
    if model.is_identity:
        return q.copy()
    c = np.asarray(model.center, dtype=np.float64)
    v = (q - c) / model.norm_radius
    r_d = np.sqrt((v * v).sum(axis=-1))
    r_o, valid = _invert_radii(model, r_d)
    if not np.all(valid):
        worst = float(np.max(np.abs(r_o * model._gain(r_o * r_o) - r_d)[~valid]))
        raise InversionError(worst)
    scale = np.divide(r_o, r_d, out=np.zeros_like(r_d), where=r_d > 0)
    return c + v * scale[..., None] * model.norm_radius


@dataclass(frozen=True)
class CircularMask:
    """Binary field-of-view disc; 1 = inside, pixel centers at integers."""

    width: int
    height: int
    center: tuple[float, float]
    radius: float
    data: np.ndarray

    @property
    def inverted(self) -> np.ndarray:
        """Blind-area mask (1 = beyond the FoV)."""
        return 1 - self.data


def circular_mask(width: int, height: int, center: tuple[float, float],
                  radius: float) -> CircularMask:
    """Per-pixel Euclidean disc test: ||p - center||_2 <= radius."""
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    ys, xs = np.mgrid[0:height, 0:width]
    d2 = (xs - center[0]) ** 2.0 + (ys - center[1]) ** 2.0
    data = (d2 <= radius * radius).astype(np.uint8)
    return CircularMask(width, height, (float(center[0]), float(center[1])),
                        float(radius), data)


def warp_image(src: np.ndarray, model: DistortionModel,
               out_size: tuple[int, int] | None = None,
               interp: str = "bilinear", fill=0) -> np.ndarray:
    """Inverse-map ``src`` through the distortion model.

    Each output pixel samples the source at its undistorted position;
    samples outside the source (or beyond the model's invertible radial
    range) are filled with ``fill`` (0 by default; label maps may prefer
    their ignore id). ``interp`` must be "nearest" for class-ID label maps.
    ``out_size`` is (height, width), defaulting to the source.
    """
    if interp not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interp!r}")
    src = np.asarray(src)
    if src.ndim not in (2, 3):
        raise ValueError(f"expected a (H, W) or (H, W, C) raster, got {src.shape}")
    sh, sw = src.shape[:2]
    oh, ow = out_size if out_size is not None else (sh, sw)

    xs, ys = np.meshgrid(np.arange(ow, dtype=np.float64),
                         np.arange(oh, dtype=np.float64))
    if model.is_identity:
        sx, sy = xs, ys
        radial_ok = np.ones_like(xs, dtype=bool)
    else:
        c = np.asarray(model.center, dtype=np.float64)
        vx = (xs - c[0]) / model.norm_radius
        vy = (ys - c[1]) / model.norm_radius
        r_d = np.hypot(vx, vy)
        r_o, radial_ok = _invert_radii(model, r_d)
        scale = np.divide(r_o, r_d, out=np.ones_like(r_d), where=r_d > 0)
        sx = c[0] + vx * scale * model.norm_radius
        sy = c[1] + vy * scale * model.norm_radius

    flat = src.reshape(sh, sw, -1)
    out = np.full((oh, ow, flat.shape[2]), fill, dtype=flat.dtype)
    if interp == "nearest":
        xi = np.rint(sx).astype(np.intp)
        yi = np.rint(sy).astype(np.intp)
        ok = radial_ok & (xi >= 0) & (xi < sw) & (yi >= 0) & (yi < sh)
        out[ok] = flat[yi[ok], xi[ok]]
    else:
        ok = radial_ok & (sx >= 0) & (sx <= sw - 1) & (sy >= 0) & (sy <= sh - 1)
        x0 = np.clip(np.floor(sx), 0, sw - 1).astype(np.intp)
        y0 = np.clip(np.floor(sy), 0, sh - 1).astype(np.intp)
        x1 = np.minimum(x0 + 1, sw - 1)  # clamp-to-edge
        y1 = np.minimum(y0 + 1, sh - 1)
        tx = (sx - x0)[..., None]
        ty = (sy - y0)[..., None]
        vals = (flat[y0, x0] * (1 - tx) * (1 - ty) + flat[y0, x1] * tx * (1 - ty)
                + flat[y1, x0] * (1 - tx) * ty + flat[y1, x1] * tx * ty)
        if np.issubdtype(flat.dtype, np.integer):
            info = np.iinfo(flat.dtype)
            vals = np.clip(np.rint(vals), info.min, info.max)
        out[ok] = vals[ok].astype(flat.dtype)
    return out.reshape((oh, ow) + src.shape[2:])
