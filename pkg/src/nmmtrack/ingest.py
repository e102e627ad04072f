"""Load one channel of a recording (CSV or EDF) at the model's 400 Hz rate."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .edf import read_edf
from .errors import EmptyFileError, IngestError, MalformedHeaderError, MissingChannelError

log = logging.getLogger(__name__)

TARGET_RATE = 400.0


@dataclass
class Recording:
    samples: np.ndarray
    sample_rate: float
    label: str
    units: str = "mV"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.sample_rate > 0:
            raise IngestError("sample rate must be positive")

    def __len__(self):
        return self.samples.size

    @property
    def repaired_count(self):
        return self.meta.get("repaired_count", 0)


def repair_nonfinite(x):
    """Linear interpolation over non-finite samples; edges take the nearest value."""
    x = np.asarray(x, dtype=float).copy()
    bad = ~np.isfinite(x)
    n_bad = int(bad.sum())
    if n_bad == x.size:
        raise EmptyFileError("no finite samples")
    if n_bad:
        idx = np.arange(x.size)
        x[bad] = np.interp(idx[bad], idx[~bad], x[~bad])
    return x, n_bad


def resample_to(x, rate, target=TARGET_RATE):
    """Polyphase resampling by the closest rational factor."""
    frac = Fraction(target / rate).limit_denominator(1000)
    return resample_poly(x, frac.numerator, frac.denominator), frac


def _read_csv(path, channel, sample_rate):
    with open(path, newline="") as fh:
        rows = list(csv.reader(row for row in fh if not row.startswith("#")))
    if not rows:
        raise EmptyFileError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if any(_is_number(h) for h in header):
        raise MalformedHeaderError("CSV needs a header row naming its columns")
    body = rows[1:]
    if not body:
        raise EmptyFileError(f"{path} has a header but no samples")
    if channel is None:
        candidates = [h for h in header if h not in ("t", "time")]
        if not candidates:
            raise MissingChannelError("no signal column in CSV")
        channel = "y" if "y" in candidates else candidates[0]
    if isinstance(channel, int):
        if not 0 <= channel < len(header):
            raise MissingChannelError(f"column index {channel} out of range")
        channel = header[channel]
    if channel not in header:
        raise MissingChannelError(f"column {channel!r} not found; available: {header}")
    col = header.index(channel)
    values = np.array([_to_float(r[col]) if col < len(r) else np.nan for r in body])
    tcol = next((header.index(h) for h in ("t", "time") if h in header), None)
    if sample_rate is None:
        if tcol is None:
            raise MalformedHeaderError("CSV without a time column needs an explicit sample rate")
        t = np.array([_to_float(r[tcol]) for r in body])
        steps = np.diff(t[np.isfinite(t)])
        if steps.size == 0 or not np.median(steps) > 0:
            raise MalformedHeaderError("cannot infer the sample rate from the time column")
        sample_rate = 1.0 / float(np.median(steps))
        # snap rates inferred from rounded time stamps
        if abs(sample_rate - round(sample_rate)) < 1e-6 * sample_rate:
            sample_rate = float(round(sample_rate))
    return values, float(sample_rate), channel, "mV"


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def _to_float(s):
    s = s.strip()
    if s == "" or s.lower() in ("nan", "na", "null"):
        return np.nan
    return float(s)


def ingest(path, fmt=None, channel=None, sample_rate=None, target_rate=TARGET_RATE) -> Recording:
    """Read one channel, repair non-finite samples and resample to ``target_rate``.

    The amplitude is never rescaled; the unit reported by the file is recorded.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError(f"{path} does not exist")
    if path.stat().st_size == 0:
        raise EmptyFileError(f"{path} is empty")
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "edf":
        header, data = read_edf(path, channel if channel is not None else 0)
        label = next(iter(data))
        values = data[label]
        idx = header.labels().index(label)
        rate = header.sample_rate(idx)
        units = header.signals[idx].dimension
    elif fmt in ("csv", "txt"):
        values, rate, label, units = _read_csv(path, channel, sample_rate)
    else:
        raise IngestError(f"unknown format {fmt!r}")
    values, n_bad = repair_nonfinite(values)
    if n_bad:
        log.info("repaired %d non-finite samples in %s", n_bad, path.name)
    meta = {"source": str(path), "format": fmt, "repaired_count": n_bad, "original_rate": rate,
            "units": units, "resampled": False}
    if abs(rate - target_rate) > 1e-9:
        values, frac = resample_to(values, rate, target_rate)
        meta.update(resampled=True, resample_factor=f"{frac.numerator}/{frac.denominator}")
        log.info("resampled %s from %g Hz to %g Hz", path.name, rate, target_rate)
        rate = target_rate
    return Recording(values, rate, label, units, meta)
