"""Image-quality metrics and report emission."""

from __future__ import annotations

import csv
import io as _io

import numpy as np
from scipy.signal import convolve2d

from .errors import DimensionError, ValidationError

__all__ = ["mad", "psnr", "ssim", "gaussian_window", "metric_report", "report_csv", "report_table"]


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def mad(x, y):
    """Mean absolute difference ``||x - y||_1 / d``."""
    x, y = _pair(x, y)
    return float(np.mean(np.abs(x - y)))


def psnr(x, ref, peak=2.0):
    """Peak signal-to-noise ratio in dB; ``inf`` when the inputs are identical."""
    x, ref = _pair(x, ref)
    if not peak > 0:
        raise ValidationError("peak must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(peak**2 / mse))


def gaussian_window(size=11, sigma=1.5):
    k = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(k**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_channel(x, y, w, c1, c2):
    f = lambda a: convolve2d(a, w, mode="valid")  # noqa: E731
    mx, my = f(x), f(y)
    sxx = f(x * x) - mx * mx
    syy = f(y * y) - my * my
    sxy = f(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(x, ref, peak=2.0, window=11, sigma=1.5):
    """Mean local SSIM with a Gaussian window; channels (last axis of 3-D input) are averaged."""
    x, ref = _pair(x, ref)
    if x.ndim not in (2, 3):
        raise DimensionError("ssim expects (H, W) or (H, W, C) images")
    if x.shape[0] < window or x.shape[1] < window:
        raise DimensionError(f"image {x.shape[:2]} smaller than the {window}x{window} window")
    w = gaussian_window(window, sigma)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    if x.ndim == 2:
        return _ssim_channel(x, ref, w, c1, c2)
    return float(np.mean([_ssim_channel(x[..., c], ref[..., c], w, c1, c2) for c in range(x.shape[-1])]))


def metric_report(images, refs, peak=2.0, names=None):
    """Per-image and mean metrics; returns ``{"rows": [...], "aggregate": {...}}``."""
    if len(images) != len(refs):
        raise DimensionError("need one reference per image")
    names = [f"img{i}" for i in range(len(images))] if names is None else list(names)
    rows = []
    for name, x, r in zip(names, images, refs):
        row = {"image": name, "mad": mad(x, r), "psnr": psnr(x, r, peak)}
        x = np.asarray(x)
        if x.ndim in (2, 3) and min(x.shape[:2]) >= 11:
            row["ssim"] = ssim(x, r, peak)
        rows.append(row)
    keys = [k for k in ("mad", "psnr", "ssim") if all(k in row for row in rows)]
    aggregate = {k: float(np.mean([row[k] for row in rows])) for k in keys}
    return {"rows": rows, "aggregate": aggregate}


def report_csv(report):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "image", "value"])
    for row in report["rows"]:
        for k, v in row.items():
            if k != "image":
                w.writerow([k, row["image"], repr(float(v))])
    for k, v in report["aggregate"].items():
        w.writerow([k, "mean", repr(float(v))])
    return buf.getvalue()


def report_table(report):
    keys = list(report["aggregate"])
    lines = ["image".ljust(12) + "".join(k.rjust(14) for k in keys)]
    for row in report["rows"] + [dict(image="mean", **report["aggregate"])]:
        lines.append(str(row["image"]).ljust(12) + "".join(f"{row[k]:14.6g}" for k in keys))
    return "\n".join(lines)
