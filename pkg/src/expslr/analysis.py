"""Mono-exponential T2 fitting, SNR and error metrics, PGM/CSV export."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .volume import as_array

SNR_CAP_DB = 300.0
VALID_REL_THRESHOLD = 1e-3


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. zero reference)."""


@dataclass(frozen=True, eq=False)
class T2FitResult:
    """Per-pixel fit of ``|x_n| = a exp(-(n+1) dTE / T2)``.

    ``t2_map`` is ``inf`` where no decay was detected and ``nan`` on invalid
    (background) pixels.
    """

    t2_map: np.ndarray
    amplitude_map: np.ndarray
    residual_map: np.ndarray
    valid_mask: np.ndarray


def fit_t2(series, delta_te: float) -> T2FitResult:
    """Weighted log-linear least squares on the magnitude of every pixel.

    Fits ``log|x_n| = log a - TE_n / T2`` with ``TE_n = (n+1) delta_te`` and
    weights ``|x_n|**2``.  Pixels whose mean magnitude is below ``1e-3`` of the
    global maximum are marked invalid.

    Parameters
    ----------
    series : ComplexVolume or array_like, shape (t, p, q)
        Image-domain series.
    delta_te : float
        Echo spacing in ms.
    """
    x = np.abs(np.asarray(as_array(series)))
    if x.ndim != 3 or x.shape[0] < 2:
        raise ValueError("fit_t2 needs a (t, p, q) series with t >= 2")
    if not delta_te > 0:
        raise ValueError("delta_te must be positive")
    t, p, q = x.shape
    mean_mag = x.mean(axis=0)
    gmax = x.max()
    valid = mean_mag >= VALID_REL_THRESHOLD * gmax if gmax > 0 else np.zeros((p, q), bool)
    te = delta_te * np.arange(1, t + 1)[:, None, None]
    w = x**2
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.where(x > 0, np.log(np.where(x > 0, x, 1.0)), 0.0)
        sw = w.sum(0)
        mt = (w * te).sum(0) / sw
        my = (w * y).sum(0) / sw
        stt = (w * (te - mt) ** 2).sum(0)
        sty = (w * (te - mt) * (y - my)).sum(0)
        slope = sty / stt
        intercept = my - slope * mt
        t2 = np.where(slope < 0, -1.0 / slope, np.inf)
        amp = np.exp(intercept)
        model = amp * np.exp(np.where(np.isfinite(t2), -te / t2, 0.0))
        resid = np.linalg.norm(model - x, axis=0) / np.linalg.norm(x, axis=0)
    t2 = np.where(valid, t2, np.nan)
    amp = np.where(valid, amp, 0.0)
    resid = np.where(valid, resid, 0.0)
    return T2FitResult(t2, amp, resid, valid)


def snr_db(reference, reconstruction) -> float:
    """``20 log10(||ref|| / ||ref - rec||)`` on complex data, capped at 300 dB."""
    ref = np.asarray(as_array(reference))
    rec = np.asarray(as_array(reconstruction))
    if ref.shape != rec.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {rec.shape}")
    num = np.linalg.norm(ref)
    if num == 0:
        raise UndefinedMetricError("SNR is undefined for an all-zero reference")
    err = np.linalg.norm(ref - rec)
    if err == 0:
        return SNR_CAP_DB
    return float(min(20 * np.log10(num / err), SNR_CAP_DB))


@dataclass(frozen=True, eq=False)
class ErrorSummary:
    error_map: np.ndarray
    median: float
    p95: float
    count: int


def t2_error_map(true_fit: T2FitResult, est_fit: T2FitResult, mask=None) -> ErrorSummary:
    """``|T2_est - T2_true| / T2_true`` on ``mask`` and both-valid, finite pixels.

    Pixels outside that set are ``nan`` in the returned map.
    """
    a, b = true_fit.t2_map, est_fit.t2_map
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    sel = true_fit.valid_mask & est_fit.valid_mask & np.isfinite(a) & np.isfinite(b)
    if mask is not None:
        sel &= np.asarray(mask, dtype=bool)
    if not sel.any():
        raise UndefinedMetricError("no pixels in the intersection of mask and valid fits")
    err = np.full(a.shape, np.nan)
    err[sel] = np.abs(b[sel] - a[sel]) / a[sel]
    vals = err[sel]
    return ErrorSummary(err, float(np.median(vals)), float(np.percentile(vals, 95)), int(sel.sum()))


def export_pgm(image, path, window=None, fftshift: bool = False) -> None:
    """Write a 2-D map as a 16-bit binary PGM, linearly windowed to ``[0, 65535]``.

    ``window`` defaults to the data range; complex input is shown as magnitude.
    """
    arr = np.asarray(image)
    if np.iscomplexobj(arr):
        arr = np.abs(arr)
    arr = arr.astype(float)
    if arr.ndim != 2:
        raise ValueError("export_pgm takes a 2-D map")
    if not np.all(np.isfinite(arr)):
        raise ValueError("export_pgm requires finite values")
    if fftshift:
        arr = np.fft.fftshift(arr)
    lo, hi = (arr.min(), arr.max()) if window is None else window
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    pix = np.clip(np.rint((arr - lo) * scale), 0, 65535).astype(">u2")
    rows, cols = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n65535\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError("not a binary PGM")
    cols, rows, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(data[pos + 1:], dtype=dtype, count=rows * cols).reshape(rows, cols)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(v).lower()
    if isinstance(v, (int, np.integer)):
        return str(v)
    if isinstance(v, (float, np.floating)):
        return f"{v:.12g}"
    return str(v)


def export_csv(table, path, header=None) -> None:
    """Write rows as CSV with a header; floats carry 12 significant digits.

    ``table`` is either a list of dicts (header taken from the first) or a
    sequence of rows together with ``header``.
    """
    rows = list(table)
    if rows and isinstance(rows[0], dict):
        header = list(header or rows[0].keys())
        rows = [[r[k] for k in header] for r in rows]
    if header is None:
        raise ValueError("export_csv needs a header for row sequences")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
