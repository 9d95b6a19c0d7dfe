"""Image-fidelity and segmentation metrics: PSNR, windowed SSIM, mean IoU.

All three accept an optional binary ``region`` mask (1 = scored) so the same
functions report either full-frame quality or blind-area-only quality; SSIM
assigns each sliding window to its center pixel for that purpose. Everything
is computed in float64 from brute-force-checkable definitions.
"""

from __future__ import annotations

import numpy as np

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_LUMA = (0.299, 0.587, 0.114)  # Rec.601


def _as_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ np.asarray(_LUMA)
    if img.ndim == 2:
        return img
    raise ValueError(f"expected (H, W) or (H, W, 3) image, got {img.shape}")


def psnr(pred, gt, peak: float = 255.0, region: np.ndarray | None = None,
         cap: float = PSNR_CAP_DB) -> float:
    """10*log10(peak^2 / MSE) over all channels; identical inputs hit ``cap``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shapes differ: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    if region is not None:
        sel = np.asarray(region, dtype=bool)
        diff = diff[sel] if diff.ndim == 2 else diff[sel, :]
        if diff.size == 0:
            raise ValueError("region selects no pixels")
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return cap
    return min(10.0 * np.log10(peak * peak / mse), cap)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur_valid(a: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode filter; output shrinks by window-1 per axis."""
    win = k.size
    a = np.lib.stride_tricks.sliding_window_view(a, win, axis=1) @ k
    a = np.lib.stride_tricks.sliding_window_view(a, win, axis=0) @ k
    return a


def ssim(pred, gt, peak: float = 255.0, window: int = SSIM_WINDOW,
         sigma: float = SSIM_SIGMA, region: np.ndarray | None = None) -> float:
    """Mean gaussian-windowed SSIM over valid positions (RGB via Rec.601).

    C1=(0.01*peak)^2, C2=(0.03*peak)^2. With ``region``, a window counts if
    its center pixel is scored.
    """
    x = _as_gray(pred)
    y = _as_gray(gt)
    if x.shape != y.shape:
        raise ValueError(f"shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < window:
        raise ValueError(
            f"image {x.shape} smaller than the {window}x{window} window")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    k = _gaussian_kernel(window, sigma)
    mx = _blur_valid(x, k)
    my = _blur_valid(y, k)
    vx = _blur_valid(x * x, k) - mx * mx
    vy = _blur_valid(y * y, k) - my * my
    cxy = _blur_valid(x * y, k) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / \
        ((mx * mx + my * my + c1) * (vx + vy + c2))
    if region is None:
        return float(s.mean())
    half = (window - 1) // 2
    centers = np.asarray(region, dtype=bool)[half:half + s.shape[0],
                                             half:half + s.shape[1]]
    if not centers.any():
        raise ValueError("region selects no window centers")
    return float(s[centers].mean())


class ConfusionMatrix:
    """K x K counts, [i][j] = pixels of ground-truth class i predicted j."""

    def __init__(self, num_classes: int, ignore_index: int | None = None):
        if num_classes < 1:
            raise ValueError("need at least one class")
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, gt, region: np.ndarray | None = None) -> None:
        pred = np.asarray(pred).reshape(-1)
        gt = np.asarray(gt).reshape(-1)
        if pred.shape != gt.shape:
            raise ValueError(f"shapes differ: {pred.shape} vs {gt.shape}")
        valid = np.ones(gt.shape, dtype=bool)
        if self.ignore_index is not None:
            valid &= gt != self.ignore_index
            valid &= pred != self.ignore_index
        if region is not None:
            valid &= np.asarray(region, dtype=bool).reshape(-1)
        k = self.num_classes
        p, g = pred[valid], gt[valid]
        for name, arr in (("pred", p), ("gt", g)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                bad = int(arr[(arr < 0) | (arr >= k)][0])
                raise ValueError(f"{name} label {bad} out of range for {k} classes")
        self.counts += np.bincount(g.astype(np.int64) * k + p,
                                   minlength=k * k).reshape(k, k)

    @property
    def scored_pixels(self) -> int:
        return int(self.counts.sum())

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN for classes absent from both pred and gt."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        union = tp + fp + fn
        with np.errstate(invalid="ignore"):
            return np.where(union > 0, tp / union, np.nan)

    def miou(self) -> float:
        iou = self.per_class_iou()
        if np.all(np.isnan(iou)):
            raise ValueError("no scored pixels")
        return float(np.nanmean(iou))


def miou(pred_labels, gt_labels, num_classes: int,
         ignore_index: int | None = None,
         region: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """(per-class IoU, mean IoU) for one label-map pair."""
    cm = ConfusionMatrix(num_classes, ignore_index)
    cm.update(pred_labels, gt_labels, region=region)
    return cm.per_class_iou(), cm.miou()
