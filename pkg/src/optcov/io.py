"""File formats: tensors, PGM/PPM images, kernels, masks, priors, schedules, configs.

Images are mapped from ``[0, maxval]`` to ``[-1, 1]`` on read and back with
rounding and clamping on write; 8-bit files therefore quantize to steps of
``2/255``.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import ValidationError
from .oracle import GmmPrior
from .schedule import DdpmSchedule, linear_betas

__all__ = [
    "write_tensor",
    "read_tensor",
    "read_image",
    "write_image",
    "read_kernel",
    "write_kernel",
    "read_mask",
    "write_mask",
    "read_gmm",
    "write_gmm",
    "read_schedule",
    "read_config",
    "write_config",
    "atomic_write",
]

MAGIC = b"PCT1"
DTYPE_F64_LE = 1


def atomic_write(path, data, mode="wb"):
    """Write via a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------- tensors


def encode_tensor(arr):
    arr = np.asarray(arr, dtype="<f8", order="C")
    header = MAGIC + struct.pack("<BI", DTYPE_F64_LE, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buf):
    if buf[:4] != MAGIC:
        raise ValidationError("not a PCT1 tensor file")
    code, rank = struct.unpack_from("<BI", buf, 4)
    if code != DTYPE_F64_LE:
        raise ValidationError(f"unsupported dtype code {code}")
    off = 9
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    n = int(np.prod(dims, dtype=np.int64))
    if len(buf) - off != 8 * n:
        raise ValidationError(f"payload holds {len(buf) - off} bytes, expected {8 * n}")
    return np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).astype(np.float64)


def write_tensor(path, arr):
    atomic_write(path, encode_tensor(arr))


def read_tensor(path):
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


# ---------------------------------------------------------------- images


def _tokens(buf, count, pos):
    out = []
    while len(out) < count:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while buf[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        out.append(buf[start:pos])
    return out, pos + 1


def read_netpbm(path):
    """Return raw integer pixels ``(H, W)`` or ``(H, W, 3)`` and the maxval."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ValidationError(f"{path}: only binary PGM (P5) and PPM (P6) are supported")
    (w, h, maxval), pos = _tokens(buf, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise ValidationError(f"{path}: invalid maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h * channels
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).astype(np.int64)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape), maxval


def write_netpbm(path, pixels, maxval=255):
    pixels = np.asarray(pixels)
    magic = b"P6" if pixels.ndim == 3 else b"P5"
    if pixels.ndim == 3 and pixels.shape[2] != 3:
        raise ValidationError("colour images need exactly three channels")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = pixels.shape[:2]
    header = magic + f"\n{w} {h}\n{maxval}\n".encode()
    atomic_write(path, header + np.clip(pixels, 0, maxval).astype(dtype).tobytes())


def read_image(path):
    """Read a PGM/PPM into float64 values in ``[-1, 1]``."""
    pixels, maxval = read_netpbm(path)
    return pixels / maxval * 2.0 - 1.0


def write_image(path, img, maxval=255):
    img = np.asarray(img, dtype=np.float64)
    pixels = np.rint((np.clip(img, -1.0, 1.0) + 1.0) * 0.5 * maxval).astype(np.int64)
    write_netpbm(path, pixels, maxval)


def read_mask(path):
    """Mask PGM: nonzero pixels are kept."""
    pixels, _ = read_netpbm(path)
    if pixels.ndim != 2:
        raise ValidationError("mask files must be single-channel PGM")
    return pixels != 0


def write_mask(path, mask):
    write_netpbm(path, np.asarray(mask, dtype=bool).astype(np.int64) * 255, 255)


# ---------------------------------------------------------------- text formats


def read_kernel(path):
    rows = [line.split() for line in open(path) if line.strip() and not line.lstrip().startswith("#")]
    if len({len(r) for r in rows}) > 1:
        raise ValidationError(f"{path}: kernel rows must have equal length")
    try:
        k = np.array([[float(v) for v in row] for row in rows])
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    if k.ndim != 2 or k.size == 0:
        raise ValidationError(f"{path}: kernel rows must have equal length")
    return k


def write_kernel(path, kernel):
    kernel = np.atleast_2d(np.asarray(kernel, dtype=np.float64))
    atomic_write(path, "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in kernel), "w")


def _data_lines(path):
    return [line.split("#", 1)[0].strip() for line in open(path) if line.split("#", 1)[0].strip()]


def read_gmm(path):
    """Mixture file: ``K`` then, per component, a weight line, a mean line and a
    covariance line ``diag v1 ... vd`` or ``full`` followed by the row-major
    lower triangle."""
    lines = _data_lines(path)
    try:
        K = int(lines[0])
        weights, means, covs, diag = [], [], [], []
        for k in range(K):
            w, mean, cov = lines[1 + 3 * k: 4 + 3 * k]
            weights.append(float(w))
            means.append([float(v) for v in mean.split()])
            kind, *vals = cov.split()
            vals = [float(v) for v in vals]
            d = len(means[-1])
            if kind == "diag":
                if len(vals) != d:
                    raise ValidationError(f"component {k}: {len(vals)} variances for d={d}")
                covs.append(np.diag(vals))
                diag.append(True)
            elif kind == "full":
                if len(vals) != d * (d + 1) // 2:
                    raise ValidationError(f"component {k}: lower triangle needs {d * (d + 1) // 2} values")
                m = np.zeros((d, d))
                m[np.tril_indices(d)] = vals
                covs.append(m + np.tril(m, -1).T)
                diag.append(False)
            else:
                raise ValidationError(f"component {k}: covariance kind must be diag or full")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"{path}: malformed mixture file ({exc})") from None
    covs = np.stack(covs)
    if all(diag):
        covs = np.stack([np.diag(c) for c in covs])
    return GmmPrior(weights, means, covs)


def write_gmm(path, prior):
    lines = [str(prior.K)]
    for k in range(prior.K):
        lines.append(repr(float(prior.weights[k])))
        lines.append(" ".join(repr(float(v)) for v in prior.means[k]))
        if prior.diagonal:
            lines.append("diag " + " ".join(repr(float(v)) for v in prior.covs[k]))
        else:
            tri = prior.covs[k][np.tril_indices(prior.d)]
            lines.append("full " + " ".join(repr(float(v)) for v in tri))
    atomic_write(path, "\n".join(lines) + "\n", "w")


def read_schedule(source):
    """``linear T bmin bmax`` (inline or as a file header) or a file of betas."""
    parts = str(source).split()
    if parts and parts[0] == "linear":
        return _linear(parts)
    lines = _data_lines(source)
    if lines and lines[0].split()[0] == "linear":
        return _linear(lines[0].split())
    try:
        return DdpmSchedule(np.array([float(v) for v in lines]))
    except ValueError as exc:
        raise ValidationError(f"{source}: {exc}") from None


def _linear(parts):
    if len(parts) != 4:
        raise ValidationError("linear schedule needs: linear <T> <beta_min> <beta_max>")
    return linear_betas(int(parts[1]), float(parts[2]), float(parts[3]))


def read_config(path):
    cfg = {}
    for n, line in enumerate(_data_lines(path), 1):
        if "=" not in line:
            raise ValidationError(f"{path}:{n}: expected key=value")
        key, value = line.split("=", 1)
        cfg[key.strip()] = value.strip()
    return cfg


def write_config(path, cfg):
    atomic_write(path, "".join(f"{k}={v}\n" for k, v in cfg.items()), "w")
